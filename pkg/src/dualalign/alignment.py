"""Joint-space projection, temperature-scaled similarity, the symmetric
contrastive loss, optimizers, the training loop and checkpoint files."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dataset import Batch, EncodedPairs, Vocab, batches, new_rng
from .encoders import (
    ImageEncoderParams,
    TextEncoderParams,
    image_forward,
    init_image_encoder,
    init_text_encoder,
    pool_matrix,
    text_forward,
)
from .errors import (
    BadMagic,
    ConfigError,
    CorruptRecord,
    DimMismatch,
    NonFiniteLoss,
    ShapeMismatch,
    VersionUnsupported,
    ZeroNormRow,
)
from .numcore import NORM_FLOOR, GradTape, Node, Tape, as_matrix, cross_entropy_rows, l2_normalize_rows

log = logging.getLogger(__name__)

TAU_INIT = 1.0
MIN_LOGIT_SCALE = 1e-3
MAX_LOGIT_SCALE = 100.0
TAU_MIN = math.log(MIN_LOGIT_SCALE)
TAU_MAX = math.log(MAX_LOGIT_SCALE)
DEFAULT_TEMPLATE = "A realistic photo of a {CLS}"
INIT_STREAM = 2**31 - 1


@dataclass
class AlignmentModel:
    image_encoder: ImageEncoderParams
    text_encoder: TextEncoderParams
    Wv: np.ndarray
    Wt: np.ndarray
    tau: np.ndarray  # 1x1, log of the logit scale
    vocab: Vocab
    classes: list[str] = field(default_factory=list)
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        self.tau = as_matrix(self.tau)
        if self.Wv.shape[1] != self.Wt.shape[1]:
            raise ShapeMismatch(f"projection widths differ: {self.Wv.shape[1]} vs {self.Wt.shape[1]}")
        if self.n < 2:
            raise ShapeMismatch("joint dimension n must be >= 2")
        if self.Wv.shape[0] != self.image_encoder.d_v:
            raise ShapeMismatch(f"Wv has {self.Wv.shape[0]} rows, image encoder gives {self.image_encoder.d_v}")
        if self.Wt.shape[0] != self.text_encoder.d_t:
            raise ShapeMismatch(f"Wt has {self.Wt.shape[0]} rows, text encoder gives {self.text_encoder.d_t}")
        if self.text_encoder.vocab_size != len(self.vocab):
            raise ShapeMismatch(f"embedding table has {self.text_encoder.vocab_size} rows, vocab has {len(self.vocab)}")

    @property
    def n(self) -> int:
        return self.Wv.shape[1]

    @property
    def logit_scale(self) -> float:
        return math.exp(float(self.tau[0, 0]))

    def parameters(self, trainable_only: bool = False) -> "OrderedDict[str, np.ndarray]":
        params: OrderedDict[str, np.ndarray] = OrderedDict()
        if self.image_encoder.trainable or not trainable_only:
            for k, v in self.image_encoder.arrays().items():
                params["image." + k] = v
        if self.text_encoder.trainable or not trainable_only:
            params["text.E"] = self.text_encoder.E
        params["Wv"] = self.Wv
        params["Wt"] = self.Wt
        params["tau"] = self.tau
        return params

    def dims(self) -> dict:
        return {
            "d_in": self.image_encoder.d_in,
            "h": self.image_encoder.hidden,
            "d_v": self.image_encoder.d_v,
            "d_t": self.text_encoder.d_t,
            "n": self.n,
            "vocab_size": len(self.vocab),
        }


def init_model(
    seed: int,
    vocab: Vocab,
    d_in: int,
    h: int = 256,
    d_v: int = 768,
    d_t: int = 512,
    n: int = 512,
    image_mode: str = "toy",
    text_mode: str = "toy",
    classes=(),
    template: str = DEFAULT_TEMPLATE,
) -> AlignmentModel:
    rng = new_rng(seed, INIT_STREAM)
    if image_mode == "frozen":
        d_v = d_in
    image = init_image_encoder(rng, d_in, h, d_v, image_mode)
    text = init_text_encoder(rng, len(vocab), d_t, text_mode)
    return AlignmentModel(
        image_encoder=image,
        text_encoder=text,
        Wv=rng.normal(0.0, 1.0 / math.sqrt(d_v), size=(d_v, n)),
        Wt=rng.normal(0.0, 1.0 / math.sqrt(d_t), size=(d_t, n)),
        tau=np.array([[TAU_INIT]]),
        vocab=vocab,
        classes=list(classes),
        template=template,
    )


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------


def embed_images(tape: Tape, model: AlignmentModel, image_inputs) -> Node:
    f = image_forward(tape, model.image_encoder, image_inputs)
    return tape.l2_normalize_rows(tape.matmul(f, tape.leaf(model.Wv, "Wv")))


def embed_texts(tape: Tape, model: AlignmentModel, token_ids) -> Node:
    f = text_forward(tape, model.text_encoder, token_ids)
    return tape.l2_normalize_rows(tape.matmul(f, tape.leaf(model.Wt, "Wt")))


def loss_graph(tape: Tape, model: AlignmentModel, image_inputs, token_ids) -> Node:
    fv = embed_images(tape, model, image_inputs)
    ft = embed_texts(tape, model, token_ids)
    scale = tape.exp(tape.leaf(model.tau, "tau"))
    logits = tape.mul_scalar(tape.matmul(fv, tape.transpose(ft)), scale)
    targets = np.arange(logits.shape[0])
    rows = tape.cross_entropy_rows(logits, targets)
    cols = tape.cross_entropy_rows(tape.transpose(logits), targets)
    return tape.scale(tape.add(rows, cols), 0.5)


def joint_embed(model: AlignmentModel, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    fv = embed_images(Tape(), model, batch.image_inputs).value
    ft = embed_texts(Tape(), model, batch.token_ids).value
    return fv, ft


def similarity_logits(fv_norm, ft_norm, tau) -> np.ndarray:
    tau = float(np.asarray(tau).reshape(-1)[0])
    return math.exp(tau) * (as_matrix(fv_norm) @ as_matrix(ft_norm).T)


def symmetric_loss(logits) -> float:
    logits = as_matrix(logits)
    b = logits.shape[0]
    if b < 2 or logits.shape[1] != b:
        raise ValueError(f"symmetric loss needs a square matrix with B >= 2, got {logits.shape}")
    t = np.arange(b)
    return 0.5 * (cross_entropy_rows(logits, t) + cross_entropy_rows(logits.T, t))


def loss_and_grads(model: AlignmentModel, batch: Batch) -> tuple[float, GradTape]:
    """Full-pipeline loss and gradients for every parameter (trainable or not)."""
    tape = Tape()
    loss = loss_graph(tape, model, batch.image_inputs, batch.token_ids)
    grads = tape.backward(loss)
    return float(loss.value[0, 0]), grads


# ---------------------------------------------------------------------------
# Optimizers and training
# ---------------------------------------------------------------------------


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for name, p in params.items():
            p -= self.lr * grads[name]


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


PRESETS = {
    "paper": {"learning_rate": 2e-5, "batch_size": 32, "epochs": 10},
    "desk": {"learning_rate": 1e-2, "batch_size": 32, "epochs": 200},
}


@dataclass
class TrainConfig:
    learning_rate: float = 2e-5
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    optimizer: str = "adam"
    preset: str = "paper"

    def __post_init__(self):
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be a finite positive number, got {self.learning_rate}")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError(f"epochs must be an integer >= 1, got {self.epochs}")
        if not isinstance(self.batch_size, int) or self.batch_size < 2:
            raise ConfigError(f"batch_size must be an integer >= 2, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {self.preset!r}")

    @classmethod
    def from_preset(cls, preset: str = "paper", **overrides) -> "TrainConfig":
        if preset not in PRESETS:
            raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {preset!r}")
        values = dict(PRESETS[preset], preset=preset)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def make_optimizer(self):
        return Adam(self.learning_rate) if self.optimizer == "adam" else SGD(self.learning_rate)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float | None] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        """Deterministic part only; wall times go to a sidecar."""
        return {"epochs": len(self.train_loss), "train_loss": self.train_loss, "val_loss": self.val_loss}


def train_step(model: AlignmentModel, batch: Batch, optimizer) -> float:
    """One forward/backward/update. Mutates the model's arrays in place and
    returns the pre-update loss."""
    if len(batch) < 2:
        raise ValueError("train_step needs a batch with B >= 2")
    with np.errstate(invalid="ignore", over="ignore"):
        loss, grads = loss_and_grads(model, batch)
    params = model.parameters(trainable_only=True)
    if not math.isfinite(loss) or not all(np.all(np.isfinite(grads[k])) for k in params):
        raise NonFiniteLoss(
            f"loss={loss!r} logit_scale={model.logit_scale:.6g} batch ids {batch.ids[:4]}{'...' if len(batch) > 4 else ''}"
        )
    optimizer.step(params, grads)
    np.clip(model.tau, TAU_MIN, TAU_MAX, out=model.tau)
    return loss


def evaluate_loss(model: AlignmentModel, data: EncodedPairs, batch_size: int, seed: int) -> float | None:
    """Mean symmetric loss over fixed batches, no updates. None when fewer than 2 items."""
    losses = [batch_loss(model, b) for b in batches(data, batch_size, seed, 0)]
    return float(np.mean(losses)) if losses else None


def _normalize_last(m: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(m * m, axis=-1, keepdims=True))
    bad = np.argwhere(norms[..., 0] < NORM_FLOOR)
    if bad.size:
        raise ZeroNormRow(int(bad[0, -1]))
    return m / norms


def _log_softmax_last(m: np.ndarray) -> np.ndarray:
    shifted = m - m.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def stacked_loss(params: dict, image_inputs: np.ndarray, pool: np.ndarray) -> np.ndarray:
    """Forward-only symmetric loss in plain numpy.

    ``params`` maps the names of ``AlignmentModel.parameters()`` to arrays;
    any of them may carry a leading stack axis of length S, in which case
    the result holds S losses (one per setting), otherwise a single value.
    A frozen image encoder is signalled by the absence of ``image.*`` keys.
    ``pool`` is the ``pool_matrix`` of the batch's token ids.
    """
    x = as_matrix(image_inputs)
    if "image.W1" in params:
        hidden = np.maximum(x @ params["image.W1"] + params["image.b1"], 0.0)
        x = hidden @ params["image.W2"] + params["image.b2"]
    fv = _normalize_last(x @ params["Wv"])
    ft = _normalize_last(pool @ params["text.E"] @ params["Wt"])
    scale = np.exp(np.asarray(params["tau"], dtype=np.float64))
    logits = scale * (fv @ np.swapaxes(ft, -1, -2))
    diag = np.arange(logits.shape[-1])
    rows = -_log_softmax_last(logits)[..., diag, diag].mean(axis=-1)
    cols = -_log_softmax_last(np.swapaxes(logits, -1, -2))[..., diag, diag].mean(axis=-1)
    return 0.5 * (rows + cols)


def batch_loss(model: AlignmentModel, batch: Batch) -> float:
    """Forward-only loss (no tape), as used for validation."""
    x = as_matrix(batch.image_inputs)
    if len(x) < 2:
        raise ValueError("the contrastive loss needs a batch of at least 2 pairs")
    if x.shape[1] != model.image_encoder.d_in:
        raise DimMismatch(f"image inputs have dim {x.shape[1]}, encoder expects {model.image_encoder.d_in}")
    pool = pool_matrix(batch.token_ids, model.text_encoder.vocab_size)
    return float(stacked_loss(model.parameters(), x, pool).reshape(-1)[0])


def fit(
    model: AlignmentModel,
    train: EncodedPairs,
    val: EncodedPairs | None,
    config: TrainConfig,
    on_epoch: Callable[[int, float, float | None], None] | None = None,
) -> tuple[AlignmentModel, TrainHistory]:
    if len(train) < 2:
        raise ValueError("train split needs at least 2 records")
    optimizer = config.make_optimizer()
    history = TrainHistory()
    for epoch in range(config.epochs):
        start = time.perf_counter()
        losses = [train_step(model, b, optimizer) for b in batches(train, config.batch_size, config.seed, epoch)]
        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(model, val, config.batch_size, config.seed) if val is not None else None
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.wall_time.append(time.perf_counter() - start)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
        log.debug("epoch %d train %.6f val %s", epoch + 1, train_loss, val_loss)
    return model, history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"CCLP"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def save_checkpoint(model: AlignmentModel, path) -> None:
    tensors, chunks, offset = [], [], 0
    for name, arr in model.parameters().items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "rows": int(arr.shape[0]), "cols": int(arr.shape[1]), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {
        "tensors": tensors,
        "meta": {
            "image_mode": model.image_encoder.mode,
            "text_mode": model.text_encoder.mode,
            "d_in": model.image_encoder.d_in,
            "d_v": model.image_encoder.d_v,
            "vocab": model.vocab.tokens,
            "classes": model.classes,
            "template": model.template,
        },
    }
    hbytes = json.dumps(header, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        f.write(hbytes)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


def load_checkpoint(path, expect: dict | None = None) -> AlignmentModel:
    """Read a checkpoint. ``expect`` maps dimension names (see
    ``AlignmentModel.dims``) to required values."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size or raw[:4] != MAGIC:
        raise BadMagic(f"{path}: not a checkpoint file")
    _, version, hlen = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise VersionUnsupported(f"checkpoint version {version}, this build reads {VERSION}")
    start = _PREFIX.size
    if start + hlen > len(raw):
        raise CorruptRecord(start, "truncated header")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
        meta = header["meta"]
        specs = header["tensors"]
    except (ValueError, KeyError) as exc:
        raise CorruptRecord(start, f"bad header: {exc}") from None
    payload = start + hlen
    arrays = {}
    for t in specs:
        nbytes = 4 * t["rows"] * t["cols"]
        lo = payload + t["offset"]
        if lo + nbytes > len(raw):
            raise CorruptRecord(lo, f"truncated tensor {t['name']!r}")
        arr = np.frombuffer(raw, dtype="<f4", count=t["rows"] * t["cols"], offset=lo)
        arrays[t["name"]] = arr.reshape(t["rows"], t["cols"]).astype(np.float64)
    try:
        if meta["image_mode"] == "frozen":
            image = ImageEncoderParams("frozen", meta["d_in"], meta["d_v"])
        else:
            image = ImageEncoderParams(
                "toy",
                meta["d_in"],
                meta["d_v"],
                W1=arrays["image.W1"],
                b1=arrays["image.b1"],
                W2=arrays["image.W2"],
                b2=arrays["image.b2"],
            )
        model = AlignmentModel(
            image_encoder=image,
            text_encoder=TextEncoderParams(meta["text_mode"], arrays["text.E"]),
            Wv=arrays["Wv"],
            Wt=arrays["Wt"],
            tau=arrays["tau"],
            vocab=Vocab(meta["vocab"]),
            classes=list(meta["classes"]),
            template=meta["template"],
        )
    except KeyError as exc:
        raise CorruptRecord(payload, f"missing entry {exc}") from None
    except ValueError as exc:
        if isinstance(exc, ShapeMismatch):
            raise
        raise ShapeMismatch(str(exc)) from None
    if expect:
        dims = model.dims()
        for key, want in expect.items():
            if key in dims and want is not None and dims[key] != want:
                raise ShapeMismatch(f"checkpoint has {key}={dims[key]}, config expects {want}")
    return model
