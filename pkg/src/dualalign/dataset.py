"""Paired feature/caption ingestion: manifests, captioner invocation, seeded
splits, vocabulary and tokenization, and batching.

Randomness always comes from numpy's PCG64 bit generator. Shuffles are an
explicit Fisher-Yates pass (``i`` from ``n-1`` down to ``1``, swap with
``rng.integers(0, i + 1)``) so the permutation is defined by the bit stream,
not by numpy's internal shuffle algorithm.
"""

from __future__ import annotations

import json
import math
import os
import re
import shlex
import subprocess
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    BadRatios,
    BatchTooSmall,
    CaptionerFailed,
    DuplicateId,
    EmptyCaption,
    IndexOutOfRange,
    MissingField,
    ParseError,
)
from .fvecs import read_fvecs

MAX_TOKENS = 77
DEFAULT_VOCAB_SIZE = 4096
PAD_ID = 0
UNK_ID = 1
SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.8, 0.1, 0.1)

_TOKEN_RE = re.compile(r"[^\W_]+(?:['\-][^\W_]+)*")


@dataclass(frozen=True)
class PairRecord:
    id: str
    features: str
    index: int
    label: str
    caption: str | None = None
    split: str | None = None
    # absolute path of ``features``; not serialized
    feature_path: str = field(default="", compare=False, repr=False)

    @property
    def feature_ref(self) -> str:
        return f"{self.feature_path or self.features}:{self.index}"

    def to_json(self, relative_to: str | os.PathLike | None = None) -> dict:
        features = self.features
        if relative_to is not None and self.feature_path and not os.path.isabs(self.features):
            features = os.path.relpath(self.feature_path, relative_to)
        obj = {"id": self.id, "features": features, "index": self.index}
        if self.caption is not None:
            obj["caption"] = self.caption
        obj["label"] = self.label
        if self.split is not None:
            obj["split"] = self.split
        return obj


def new_rng(*seed_parts: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(seed_parts))))


def fisher_yates(n: int, rng: np.random.Generator) -> np.ndarray:
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def _require(obj: dict, key: str, kind, lineno: int):
    if key not in obj:
        raise MissingField(key, lineno)
    value = obj[key]
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ParseError(lineno, f"field {key!r} must be {kind.__name__}")
    return value


def load_manifest(path) -> list[PairRecord]:
    """Parse a JSONL manifest. Relative feature paths resolve against the
    manifest's directory."""
    path = Path(path)
    base = path.resolve().parent
    records: list[PairRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, exc.msg) from None
            if not isinstance(obj, dict):
                raise ParseError(lineno, "expected a JSON object")
            rid = _require(obj, "id", str, lineno)
            features = _require(obj, "features", str, lineno)
            index = _require(obj, "index", int, lineno)
            label = _require(obj, "label", str, lineno)
            caption = obj.get("caption")
            if caption is not None and not isinstance(caption, str):
                raise ParseError(lineno, "field 'caption' must be str")
            split = obj.get("split")
            if split is not None and split not in SPLITS:
                raise ParseError(lineno, f"split must be one of {SPLITS}, got {split!r}")
            if rid in seen:
                raise DuplicateId(rid)
            seen.add(rid)
            records.append(
                PairRecord(
                    id=rid,
                    features=features,
                    index=index,
                    label=label,
                    caption=caption,
                    split=split,
                    feature_path=os.path.normpath(base / features),
                )
            )
    return records


def dump_manifest(records: Sequence[PairRecord], relative_to=None) -> str:
    lines = [json.dumps(r.to_json(relative_to), ensure_ascii=False) for r in records]
    return "".join(line + "\n" for line in lines)


def write_manifest(records: Sequence[PairRecord], path) -> None:
    path = Path(path)
    text = dump_manifest(records, relative_to=path.resolve().parent)
    path.write_text(text, encoding="utf-8")


class FeatureStore:
    """Lazily loads fvecs files referenced by records and caches them."""

    def __init__(self):
        self._files: dict[str, np.ndarray] = {}

    def _file(self, path: str) -> np.ndarray:
        if path not in self._files:
            self._files[path] = read_fvecs(path)
        return self._files[path]

    def vector(self, path: str, index: int) -> np.ndarray:
        arr = self._file(path)
        if not 0 <= index < arr.shape[0]:
            raise IndexOutOfRange(f"{path} has {arr.shape[0]} records, index {index} requested")
        return arr[index].astype(np.float64)

    def matrix(self, records: Sequence[PairRecord]) -> np.ndarray:
        if not records:
            return np.zeros((0, 0))
        return np.stack([self.vector(r.feature_path or r.features, r.index) for r in records])

    def resolve_ref(self, ref: str) -> np.ndarray:
        """Look up a ``PATH:INDEX`` feature reference."""
        path, sep, idx = ref.rpartition(":")
        if not sep or not idx.isdigit():
            raise ValueError(f"feature reference must look like PATH:INDEX, got {ref!r}")
        return self.vector(path, int(idx))


# ---------------------------------------------------------------------------
# Captions
# ---------------------------------------------------------------------------


def attach_captions(records: Sequence[PairRecord], command, overwrite: bool = False) -> list[PairRecord]:
    """Fill captions by running ``command`` once over all records that need one.

    The command reads one ``PATH:INDEX`` feature reference per stdin line and
    must write exactly one caption per stdout line, in order, exiting 0.
    """
    todo = [i for i, r in enumerate(records) if overwrite or not r.caption]
    out = list(records)
    if not todo:
        return out
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    stdin = "".join(records[i].feature_ref + "\n" for i in todo)
    try:
        proc = subprocess.run(argv, input=stdin, capture_output=True, text=True, encoding="utf-8")
    except FileNotFoundError:
        raise CaptionerFailed(127, f"command not found: {argv[0]!r}") from None
    except PermissionError:
        raise CaptionerFailed(126, f"command not executable: {argv[0]!r}") from None
    if proc.returncode != 0:
        raise CaptionerFailed(proc.returncode, proc.stderr.strip().splitlines()[-1] if proc.stderr.strip() else "")
    lines = proc.stdout.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) != len(todo):
        raise CaptionerFailed(0, f"expected {len(todo)} caption lines, got {len(lines)}")
    for i, line in zip(todo, lines):
        caption = line.rstrip("\r")
        if not caption.strip():
            raise EmptyCaption(records[i].id)
        out[i] = replace(records[i], caption=caption)
    return out


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    # tiny epsilon keeps products like 0.7 * 10 from flooring to 6
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    return n - n_val - n_test, n_val, n_test


def split_records(records: Sequence[PairRecord], ratios=DEFAULT_RATIOS, seed: int = 0) -> list[PairRecord]:
    """Shuffle then assign contiguous train/val/test blocks; remainder goes to train."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or not all(r > 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(records)
    n_train, n_val, _ = split_counts(n, ratios)
    perm = fisher_yates(n, new_rng(seed))
    out = list(records)
    for pos, idx in enumerate(perm):
        split = "train" if pos < n_train else "val" if pos < n_train + n_val else "test"
        out[idx] = replace(records[idx], split=split)
    return out


def by_split(records: Sequence[PairRecord], split: str) -> list[PairRecord]:
    return [r for r in records if r.split == split]


# ---------------------------------------------------------------------------
# Vocabulary and tokens
# ---------------------------------------------------------------------------


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """token -> id map with PAD=0 and UNK=1."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:2]) != ["<pad>", "<unk>"]:
            raise ValueError("vocabulary must start with <pad>, <unk>")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, captions, max_size: int = DEFAULT_VOCAB_SIZE) -> "Vocab":
        if max_size < 2:
            raise ValueError("max_size must leave room for PAD and UNK")
        counts = Counter()
        for caption in captions:
            counts.update(split_words(caption))
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(["<pad>", "<unk>"] + ranked[: max_size - 2])

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.ids

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def lookup(self, token: str) -> int:
        return self.ids.get(token, UNK_ID)


def build_vocab(records: Sequence[PairRecord], max_size: int = DEFAULT_VOCAB_SIZE) -> Vocab:
    train = by_split(records, "train")
    if not train:
        raise ValueError("vocabulary needs at least one train-split record")
    return Vocab.build((r.caption or "" for r in train), max_size)


def tokenize(caption: str, vocab: Vocab, max_len: int = MAX_TOKENS) -> list[int]:
    return [vocab.lookup(w) for w in split_words(caption)[:max_len]]


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass
class EncodedPairs:
    """Records with features loaded and captions tokenized, ready for batching."""

    ids: list[str]
    labels: list[str]
    features: np.ndarray
    tokens: list[list[int]]

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "EncodedPairs":
        idx = list(idx)
        return EncodedPairs(
            [self.ids[i] for i in idx],
            [self.labels[i] for i in idx],
            self.features[idx],
            [self.tokens[i] for i in idx],
        )


def encode_pairs(records: Sequence[PairRecord], vocab: Vocab, store: FeatureStore | None = None) -> EncodedPairs:
    store = store or FeatureStore()
    return EncodedPairs(
        ids=[r.id for r in records],
        labels=[r.label for r in records],
        features=store.matrix(records),
        tokens=[tokenize(r.caption or "", vocab) for r in records],
    )


@dataclass
class Batch:
    ids: list[str]
    image_inputs: np.ndarray
    token_ids: list[list[int]]

    @property
    def match_targets(self) -> np.ndarray:
        return np.arange(len(self.ids))

    def __len__(self):
        return len(self.ids)


def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    if batch_size < 2:
        raise BatchTooSmall(f"batch_size must be >= 2, got {batch_size}")
    perm = fisher_yates(n, new_rng(seed, epoch))
    chunks = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    return [c for c in chunks if len(c) >= 2]


def batches(data: EncodedPairs, batch_size: int, seed: int, epoch: int) -> Iterator[Batch]:
    """Reshuffle per (seed, epoch); a trailing batch of one is dropped."""
    for idx in batch_indices(len(data), batch_size, seed, epoch):
        yield Batch(
            ids=[data.ids[i] for i in idx],
            image_inputs=data.features[idx],
            token_ids=[data.tokens[i] for i in idx],
        )
