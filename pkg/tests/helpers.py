import dataclasses

import numpy as np

from dualalign.alignment import init_model, loss_and_grads, stacked_loss
from dualalign.dataset import Batch, Vocab
from dualalign.encoders import ImageEncoderParams, TextEncoderParams, pool_matrix


def small_model(seed=0, vocab_size=12, d_in=8, h=6, d_v=5, d_t=4, n=3, **kw):
    vocab = Vocab(["<pad>", "<unk>"] + [f"w{i}" for i in range(vocab_size - 2)])
    return init_model(seed, vocab, d_in, h, d_v, d_t, n, **kw)


def random_batch(rng, B, d_in, vocab_size, max_len=5):
    x = rng.normal(size=(B, d_in))
    tokens = [list(rng.integers(1, vocab_size, size=rng.integers(1, max_len + 1))) for _ in range(B)]
    return Batch(ids=[f"b{i}" for i in range(B)], image_inputs=x, token_ids=tokens)


def with_params(model, arrays: dict):
    """Copy of ``model`` with the named parameters replaced."""
    img = model.image_encoder
    if img.mode == "toy":
        img = ImageEncoderParams("toy", img.d_in, img.d_v, *(arrays.get("image." + k, getattr(img, k)) for k in ("W1", "b1", "W2", "b2")))
    txt = TextEncoderParams(model.text_encoder.mode, arrays.get("text.E", model.text_encoder.E))
    return dataclasses.replace(
        model, image_encoder=img, text_encoder=txt,
        Wv=arrays.get("Wv", model.Wv), Wt=arrays.get("Wt", model.Wt), tau=arrays.get("tau", model.tau),
    )


def pipeline_loss_fn(model, batch):
    """grad_check adapters (loss+grads, loss only) over every trainable
    parameter of the full pipeline, plus the starting parameter values."""
    names = list(model.parameters(trainable_only=True))

    def f(params):
        loss, grads = loss_and_grads(with_params(model, dict(zip(names, params))), batch)
        return loss, [grads[n] for n in names]

    fixed = model.parameters()
    pool = pool_matrix(batch.token_ids, model.text_encoder.vocab_size)

    def value(params):
        # stack-aware: one entry of ``params`` may carry a leading stack axis
        return stacked_loss({**fixed, **dict(zip(names, params))}, batch.image_inputs, pool)

    return f, value, [model.parameters(trainable_only=True)[n] for n in names]
