"""Zero-shot classification, exact top-k retrieval, report aggregation and
embedding export."""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .alignment import DEFAULT_TEMPLATE, AlignmentModel, embed_images, embed_texts
from .dataset import FeatureStore, PairRecord, tokenize
from .errors import KTooLarge, UnknownDatasetName, UnknownLabel
from .numcore import Tape, as_matrix, softmax_rows

PROB_MODES = ("softmax", "literal")


def round_half_up(x: float, places: int = 2) -> Decimal:
    return Decimal(repr(float(x))).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


def fmt2(x: float | None) -> str:
    return "-" if x is None else str(round_half_up(x))


# ---------------------------------------------------------------------------
# Embedding helpers
# ---------------------------------------------------------------------------

_CHUNK = 4096


def image_embeddings(model: AlignmentModel, image_inputs) -> np.ndarray:
    x = as_matrix(image_inputs)
    parts = [embed_images(Tape(), model, x[i : i + _CHUNK]).value for i in range(0, len(x), _CHUNK)]
    return np.vstack(parts) if parts else np.zeros((0, model.n))


def text_embeddings(model: AlignmentModel, texts: Sequence[str]) -> np.ndarray:
    tokens = [tokenize(t, model.vocab) for t in texts]
    parts = [embed_texts(Tape(), model, tokens[i : i + _CHUNK]).value for i in range(0, len(tokens), _CHUNK)]
    return np.vstack(parts) if parts else np.zeros((0, model.n))


@dataclass(frozen=True)
class PromptSet:
    classes: tuple[str, ...]
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class names must be unique")
        if not self.classes:
            raise ValueError("need at least one class")
        if "{CLS}" not in self.template:
            raise ValueError("template needs a {CLS} placeholder")

    @classmethod
    def for_model(cls, model: AlignmentModel, template: str | None = None) -> "PromptSet":
        return cls(tuple(model.classes), template or model.template)

    @property
    def prompts(self) -> list[str]:
        return [self.template.replace("{CLS}", c) for c in self.classes]

    def index(self, label: str) -> int:
        return self.classes.index(label)


# ---------------------------------------------------------------------------
# Zero-shot classification
# ---------------------------------------------------------------------------


def class_probabilities(scaled_sims, mode: str = "softmax") -> np.ndarray:
    """Turn scale-multiplied cosines into per-class probabilities.

    ``softmax`` exponentiates first; ``literal`` divides each similarity by
    the row sum as-is, which is only a distribution when all similarities
    are positive.
    """
    s = as_matrix(scaled_sims)
    if mode == "softmax":
        return softmax_rows(s)
    if mode == "literal":
        return s / s.sum(axis=1, keepdims=True)
    raise ValueError(f"mode must be one of {PROB_MODES}, got {mode!r}")


def scaled_class_similarities(model: AlignmentModel, image_inputs, prompts: PromptSet) -> np.ndarray:
    fv = image_embeddings(model, image_inputs)
    ft = text_embeddings(model, prompts.prompts)
    return model.logit_scale * (fv @ ft.T)


def zero_shot_predict(model: AlignmentModel, image_inputs, prompts: PromptSet, mode: str = "softmax") -> np.ndarray:
    """Class probabilities; a 1-D input gives a vector, a matrix gives one row per image."""
    single = np.asarray(image_inputs).ndim == 1
    probs = class_probabilities(scaled_class_similarities(model, image_inputs, prompts), mode)
    return probs[0] if single else probs


def check_argmax_agreement(scaled_sims) -> None:
    """Raise if softmax and literal normalization disagree on a row where every
    similarity is positive."""
    s = as_matrix(scaled_sims)
    positive = np.all(s > 0, axis=1)
    if not positive.any():
        return
    a = np.argmax(class_probabilities(s[positive], "softmax"), axis=1)
    b = np.argmax(class_probabilities(s[positive], "literal"), axis=1)
    if not np.array_equal(a, b):
        raise AssertionError("softmax and literal normalization disagree on the predicted class")


def predict_classes(model: AlignmentModel, image_inputs, prompts: PromptSet, mode: str = "softmax") -> np.ndarray:
    sims = scaled_class_similarities(model, image_inputs, prompts)
    check_argmax_agreement(sims)
    # np.argmax keeps the lowest index on ties
    return np.argmax(class_probabilities(sims, mode), axis=1)


def top1_accuracy(
    model: AlignmentModel,
    records: Sequence[PairRecord],
    prompts: PromptSet,
    store: FeatureStore | None = None,
    mode: str = "softmax",
) -> float:
    """Percent of records whose predicted class equals their label."""
    for r in records:
        if r.label not in prompts.classes:
            raise UnknownLabel(r.id, r.label)
    if not records:
        raise ValueError("no records to evaluate")
    store = store or FeatureStore()
    pred = predict_classes(model, store.matrix(records), prompts, mode)
    truth = np.array([prompts.index(r.label) for r in records])
    return 100.0 * float(np.mean(pred == truth))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    accuracies: "OrderedDict[str, float]"
    ood_names: list[str] = field(default_factory=list)
    method: str = "model"

    @property
    def in_domain_names(self) -> list[str]:
        return [k for k in self.accuracies if k not in self.ood_names]

    @property
    def ood_average(self) -> float | None:
        if not self.ood_names:
            return None
        return sum(self.accuracies[k] for k in self.ood_names) / len(self.ood_names)

    @property
    def overall_average(self) -> float:
        return sum(self.accuracies.values()) / len(self.accuracies)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "datasets": dict(self.accuracies),
            "ood": list(self.ood_names),
            "ood_average": self.ood_average,
            "average": self.overall_average,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    def render_table(self) -> str:
        cols = ["Method", *self.in_domain_names, *self.ood_names]
        cells = [self.method] + [fmt2(self.accuracies[k]) for k in cols[1:]]
        if self.ood_names:
            cols.append("OOD Average")
            cells.append(fmt2(self.ood_average))
        cols.append("Average")
        cells.append(fmt2(self.overall_average))
        widths = [max(len(c), len(v)) for c, v in zip(cols, cells)]
        line = lambda row: " | ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(row, widths)))
        rule = "-+-".join("-" * w for w in widths)
        return "\n".join([line(cols), rule, line(cells)]) + "\n"


def aggregate_report(accuracies: Mapping[str, float], ood_names: Sequence[str] = (), method: str = "model") -> EvalReport:
    if not accuracies:
        raise ValueError("need at least one dataset accuracy")
    for name in ood_names:
        if name not in accuracies:
            raise UnknownDatasetName(f"OOD dataset {name!r} has no accuracy")
    return EvalReport(OrderedDict((k, float(v)) for k, v in accuracies.items()), list(ood_names), method)


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RetrievalIndex:
    ids: tuple[str, ...]
    embeddings: np.ndarray
    modality: str = "image"

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("index ids must be unique")
        if self.embeddings.shape[0] != len(self.ids):
            raise ValueError("one embedding row per id")
        emb = np.array(self.embeddings, dtype=np.float64)
        emb.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)

    def __len__(self):
        return len(self.ids)


def build_index(
    model: AlignmentModel,
    records: Sequence[PairRecord],
    modality: str = "image",
    store: FeatureStore | None = None,
) -> RetrievalIndex:
    if not records:
        raise ValueError("cannot index zero records")
    ordered = sorted(records, key=lambda r: r.id)
    if modality == "image":
        emb = image_embeddings(model, (store or FeatureStore()).matrix(ordered))
    elif modality == "text":
        emb = text_embeddings(model, [r.caption or "" for r in ordered])
    else:
        raise ValueError(f"modality must be 'image' or 'text', got {modality!r}")
    return RetrievalIndex(tuple(r.id for r in ordered), emb, modality)


def render_query(model: AlignmentModel, text: str) -> str:
    """Bare class names go through the prompt template; anything else is verbatim."""
    by_lower = {c.lower(): c for c in model.classes}
    name = by_lower.get(text.strip().lower())
    return model.template.replace("{CLS}", name) if name is not None else text


def embed_queries(model: AlignmentModel, queries) -> np.ndarray:
    if isinstance(queries, str):
        queries = [queries]
    if isinstance(queries, np.ndarray):
        return image_embeddings(model, queries)
    queries = list(queries)
    if queries and all(isinstance(q, str) for q in queries):
        return text_embeddings(model, [render_query(model, q) for q in queries])
    return image_embeddings(model, np.asarray(queries, dtype=np.float64))


def _check_k(k: int, available: int) -> None:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > available:
        raise KTooLarge(f"k={k} exceeds the {available} searchable items")


def topk(index: RetrievalIndex, query_embedding, k: int, exclude_id: str | None = None) -> list[tuple[str, float]]:
    """Exact top-k by cosine, descending, ties broken by ascending id."""
    q = np.asarray(query_embedding, dtype=np.float64).reshape(-1)
    cos = index.embeddings @ q
    # index rows are sorted by id, so a stable sort on -cos breaks ties by id
    order = np.argsort(-cos, kind="stable")
    if exclude_id is not None:
        order = order[[index.ids[i] != exclude_id for i in order]]
    _check_k(k, len(order))
    return [(index.ids[i], float(cos[i])) for i in order[:k]]


def retrieve(model: AlignmentModel, query, index: RetrievalIndex, k: int, exclude_id: str | None = None):
    """``query`` is a text string or a single image-feature vector."""
    _check_k(k, len(index) - (exclude_id in index.ids if exclude_id else 0))
    q = embed_queries(model, query if isinstance(query, str) else as_matrix(query))
    return topk(index, q[0], k, exclude_id)


def mean_topk_cosine(query_embeddings, index: RetrievalIndex, k: int, query_ids=None, exclude_self: bool = False) -> float:
    """Mean over queries of the mean cosine of each query's k best items, x100."""
    Q = as_matrix(query_embeddings)
    if exclude_self and query_ids is None:
        raise ValueError("exclude_self needs query ids")
    per_query = []
    for i, q in enumerate(Q):
        skip = query_ids[i] if exclude_self else None
        hits = topk(index, q, k, exclude_id=skip)
        per_query.append(np.mean([c for _, c in hits]))
    return 100.0 * float(np.mean(per_query))


def avg_topk_cosine(model: AlignmentModel, queries, index: RetrievalIndex, k: int, query_ids=None, exclude_self: bool = False) -> float:
    """Table-style retrieval score in [-100, 100]; display with ``fmt2``."""
    _check_k(k, len(index) - (1 if exclude_self else 0))
    return mean_topk_cosine(embed_queries(model, queries), index, k, query_ids, exclude_self)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def export_embeddings(
    model: AlignmentModel,
    records: Sequence[PairRecord],
    path,
    store: FeatureStore | None = None,
    modality: str = "image",
) -> None:
    """Write ``id, label, e0..e{n-1}`` rows as TSV for external visualization."""
    if modality == "image":
        emb = image_embeddings(model, (store or FeatureStore()).matrix(records)) if records else np.zeros((0, model.n))
    elif modality == "text":
        emb = text_embeddings(model, [r.caption or "" for r in records])
    else:
        raise ValueError(f"modality must be 'image' or 'text', got {modality!r}")
    header = ["id", "label"] + [f"e{j}" for j in range(model.n)]
    lines = ["\t".join(header)]
    for r, row in zip(records, emb):
        lines.append("\t".join([r.id, r.label] + [format(v, ".9g") for v in row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_embeddings_tsv(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        n = len(header) - 2
        ids, labels, rows = [], [], []
        for line in f:
            parts = line.rstrip("\n").split("\t")
            ids.append(parts[0])
            labels.append(parts[1])
            rows.append([float(v) for v in parts[2:]])
    return ids, labels, np.array(rows, dtype=np.float64).reshape(len(rows), n)
