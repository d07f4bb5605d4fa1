"""Toy image and text encoders.

The image encoder is a one-hidden-layer ReLU MLP; the text encoder mean-pools
rows of a token-embedding table over the non-PAD tokens of each caption. In
``frozen`` mode the image encoder is an identity passthrough (for features
that already come out of a pre-trained backbone) and the text table is held
fixed by the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import PAD_ID
from .errors import DimMismatch, EmptySequence, IndexOutOfRange
from .numcore import Node, Tape, as_matrix

MODES = ("toy", "frozen")


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


@dataclass
class ImageEncoderParams:
    mode: str
    d_in: int
    d_v: int
    W1: np.ndarray | None = None
    b1: np.ndarray | None = None
    W2: np.ndarray | None = None
    b2: np.ndarray | None = None

    def __post_init__(self):
        _check_mode(self.mode)
        if self.mode == "frozen":
            if self.d_in != self.d_v:
                raise DimMismatch(f"frozen image encoder needs d_in == d_v, got {self.d_in} and {self.d_v}")
        else:
            if any(p is None for p in (self.W1, self.b1, self.W2, self.b2)):
                raise ValueError("toy image encoder needs W1, b1, W2, b2")
            h = self.W1.shape[1]
            expect = {"W1": (self.d_in, h), "b1": (1, h), "W2": (h, self.d_v), "b2": (1, self.d_v)}
            for name, shape in expect.items():
                if getattr(self, name).shape != shape:
                    raise DimMismatch(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def trainable(self) -> bool:
        return self.mode == "toy"

    @property
    def hidden(self) -> int:
        return self.W1.shape[1] if self.W1 is not None else self.d_in

    def arrays(self) -> dict[str, np.ndarray]:
        if self.mode == "frozen":
            return {}
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


@dataclass
class TextEncoderParams:
    mode: str
    E: np.ndarray

    def __post_init__(self):
        _check_mode(self.mode)
        self.E = as_matrix(self.E)

    @property
    def trainable(self) -> bool:
        return self.mode == "toy"

    @property
    def vocab_size(self) -> int:
        return self.E.shape[0]

    @property
    def d_t(self) -> int:
        return self.E.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"E": self.E}


def init_image_encoder(rng: np.random.Generator, d_in: int, h: int, d_v: int, mode: str = "toy") -> ImageEncoderParams:
    if mode == "frozen":
        return ImageEncoderParams("frozen", d_in, d_v)
    return ImageEncoderParams(
        "toy",
        d_in,
        d_v,
        W1=rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, h)),
        b1=np.zeros((1, h)),
        W2=rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, d_v)),
        b2=np.zeros((1, d_v)),
    )


def init_text_encoder(rng: np.random.Generator, vocab_size: int, d_t: int, mode: str = "toy") -> TextEncoderParams:
    # a lookup has fan-in 1, so table entries are standard normal
    return TextEncoderParams(mode, rng.normal(0.0, 1.0, size=(vocab_size, d_t)))


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def image_forward(tape: Tape, params: ImageEncoderParams, x: np.ndarray, prefix: str = "image.") -> Node:
    x = as_matrix(x)
    if x.shape[1] != params.d_in:
        raise DimMismatch(f"image inputs have dim {x.shape[1]}, encoder expects {params.d_in}")
    inp = tape.constant(x)
    if params.mode == "frozen":
        return inp
    W1 = tape.leaf(params.W1, prefix + "W1")
    b1 = tape.leaf(params.b1, prefix + "b1")
    W2 = tape.leaf(params.W2, prefix + "W2")
    b2 = tape.leaf(params.b2, prefix + "b2")
    hidden = tape.relu(tape.add(tape.matmul(inp, W1), b1))
    return tape.add(tape.matmul(hidden, W2), b2)


def pool_matrix(token_ids: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    """B x V averaging matrix: row i holds count/len for each non-PAD token."""
    seqs = [np.asarray(seq, dtype=np.int64).reshape(-1) for seq in token_ids]
    for i, ids in enumerate(seqs):
        if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
            raise IndexOutOfRange(f"sequence {i} has a token id outside [0, {vocab_size})")
    seqs = [ids[ids != PAD_ID] for ids in seqs]
    lens = np.array([ids.size for ids in seqs])
    empty = np.flatnonzero(lens == 0)
    if empty.size:
        raise EmptySequence(f"sequence {int(empty[0])} has no non-PAD tokens")
    B = len(seqs)
    if B == 0:
        return np.zeros((0, vocab_size))
    flat = np.repeat(np.arange(B), lens) * vocab_size + np.concatenate(seqs)
    weights = np.repeat(1.0 / lens, lens)
    return np.bincount(flat, weights=weights, minlength=B * vocab_size).reshape(B, vocab_size)


def text_forward(tape: Tape, params: TextEncoderParams, token_ids, prefix: str = "text.") -> Node:
    P = tape.constant(pool_matrix(token_ids, params.vocab_size))
    E = tape.leaf(params.E, prefix + "E")
    return tape.matmul(P, E)


def encode_image(params: ImageEncoderParams, image_inputs) -> np.ndarray:
    return image_forward(Tape(), params, image_inputs).value


def encode_text(params: TextEncoderParams, token_ids) -> np.ndarray:
    return text_forward(Tape(), params, token_ids).value
