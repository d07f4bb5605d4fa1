import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualalign.alignment import (
    TAU_MAX,
    TAU_MIN,
    SGD,
    Adam,
    AlignmentModel,
    TrainConfig,
    fit,
    init_model,
    joint_embed,
    load_checkpoint,
    loss_and_grads,
    batch_loss,
    save_checkpoint,
    similarity_logits,
    stacked_loss,
    symmetric_loss,
    train_step,
)
from dualalign.dataset import Batch, EncodedPairs, Vocab
from dualalign.encoders import ImageEncoderParams, TextEncoderParams, pool_matrix
from dualalign.errors import (
    BadMagic,
    ConfigError,
    CorruptRecord,
    DimMismatch,
    NonFiniteLoss,
    ShapeMismatch,
    VersionUnsupported,
)
from dualalign.numcore import grad_check, l2_normalize_rows

import oracles
from helpers import pipeline_loss_fn, random_batch, small_model


def _unit_rows(rng, b, n):
    return l2_normalize_rows(rng.normal(size=(b, n)))


# -- joint_embed --------------------------------------------------------------


def test_joint_embed_identity_heads():
    n = 4
    vocab = Vocab(["<pad>", "<unk>", "a", "b", "c", "d"])
    E = np.vstack([np.zeros((2, n)), np.eye(n)])
    model = AlignmentModel(
        image_encoder=ImageEncoderParams("frozen", n, n),
        text_encoder=TextEncoderParams("frozen", E),
        Wv=np.eye(n), Wt=np.eye(n), tau=np.array([[1.0]]), vocab=vocab,
    )
    x = np.eye(n)[[2, 0, 3]]
    fv, ft = joint_embed(model, Batch(["p", "q", "r"], x, [[4], [2], [5]]))
    np.testing.assert_array_equal(fv, x)
    np.testing.assert_array_equal(ft, x)


@pytest.mark.parametrize("seed", range(5))
def test_joint_embed_matches_two_step_oracle(seed):
    r = np.random.default_rng(seed)
    model = small_model(seed)
    batch = random_batch(r, 4, 8, len(model.vocab))
    fv, ft = joint_embed(model, batch)
    assert np.allclose(np.linalg.norm(fv, axis=1), 1, atol=1e-12)
    assert np.allclose(np.linalg.norm(ft, axis=1), 1, atol=1e-12)
    V = len(model.vocab)
    pool = [[seq.count(t) / len(seq) for t in range(V)] for seq in batch.token_ids]
    enc = model.image_encoder
    ofv, oft = oracles.joint_embed(
        batch.image_inputs.tolist(), enc.W1.tolist(), enc.b1.tolist(), enc.W2.tolist(), enc.b2.tolist(),
        model.Wv.tolist(), pool, model.text_encoder.E.tolist(), model.Wt.tolist(),
    )
    np.testing.assert_allclose(fv, ofv, atol=1e-12)
    np.testing.assert_allclose(ft, oft, atol=1e-12)


# -- similarity / loss --------------------------------------------------------


def test_similarity_examples(rng):
    q = np.linalg.qr(rng.normal(size=(5, 5)))[0]
    np.testing.assert_allclose(similarity_logits(q, q, 0.0), np.eye(5), atol=1e-12)
    np.testing.assert_allclose(similarity_logits(q, q, math.log(2)), 2 * np.eye(5), atol=1e-12)
    fv, ft = _unit_rows(rng, 4, 6), _unit_rows(rng, 4, 6)
    expect = oracles.similarity(fv.tolist(), ft.tolist(), 0.7)
    logits = similarity_logits(fv, ft, 0.7)
    np.testing.assert_allclose(logits, expect, atol=1e-12)
    assert np.all(np.abs(logits) <= math.exp(0.7) + 1e-12)


def test_symmetric_loss_examples(rng):
    assert symmetric_loss(np.full((32, 32), 0.3)) == pytest.approx(3.4657, abs=1e-4)
    assert symmetric_loss(np.full((32, 32), 0.3)) == pytest.approx(math.log(32), abs=1e-12)
    assert symmetric_loss(50 * np.eye(4)) < 1e-3
    for _ in range(10):
        logits = rng.normal(scale=2, size=(3, 3))
        assert symmetric_loss(logits) == pytest.approx(oracles.symmetric(logits.tolist()), abs=1e-9)
    with pytest.raises(ValueError):
        symmetric_loss(np.zeros((1, 1)))


square = st.integers(2, 8).flatmap(
    lambda b: st.lists(st.floats(-20, 20), min_size=b * b, max_size=b * b).map(lambda v: np.array(v).reshape(b, b))
)


@given(square, st.floats(-100, 100))
def test_symmetric_loss_transpose_and_shift(logits, c):
    base = symmetric_loss(logits)
    assert base >= 0
    assert symmetric_loss(logits.T) == pytest.approx(base, abs=1e-12)
    assert symmetric_loss(logits + c) == pytest.approx(base, abs=1e-9)


@given(st.floats(-30, 30), st.floats(-30, 30), st.floats(-10, 10))
def test_two_by_two_depends_on_difference(a, b, shift):
    loss = symmetric_loss([[a, b], [b, a]])
    assert loss == pytest.approx(symmetric_loss([[a + shift, b + shift], [b + shift, a + shift]]), abs=1e-9)
    assert loss == pytest.approx(math.log1p(math.exp(-(a - b))) if a - b > -700 else b - a, abs=1e-9)


def test_two_by_two_equal_is_ln2():
    assert symmetric_loss([[1.5, 1.5], [1.5, 1.5]]) == math.log(2)


# -- gradients and steps ------------------------------------------------------


@pytest.mark.parametrize("B", [2, 4, 8])
@pytest.mark.parametrize("seed", range(3))
def test_pipeline_gradients(B, seed):
    r = np.random.default_rng(seed)
    model = small_model(seed)
    batch = random_batch(r, B, 8, len(model.vocab))
    f, value, params = pipeline_loss_fn(model, batch)
    assert grad_check(f, params, eps=1e-5) <= 1e-4
    assert grad_check(f, params, eps=1e-5, value_fn=value) <= 1e-4
    assert grad_check(f, params, eps=1e-5, value_fn=value, stacked=True) <= 1e-4


def test_frozen_modes_only_train_heads(rng):
    model = small_model(0, d_in=5, d_v=5, image_mode="frozen", text_mode="frozen")
    assert list(model.parameters(trainable_only=True)) == ["Wv", "Wt", "tau"]
    E0 = model.text_encoder.E.copy()
    batch = random_batch(rng, 4, 5, len(model.vocab))
    opt = Adam(1e-2)
    for _ in range(3):
        train_step(model, batch, opt)
    np.testing.assert_array_equal(model.text_encoder.E, E0)
    f, value, params = pipeline_loss_fn(model, batch)
    assert grad_check(f, params, value_fn=value, stacked=True) <= 1e-4


def test_zero_lr_leaves_model_unchanged(rng):
    model = small_model(1)
    before = {k: v.copy() for k, v in model.parameters().items()}
    batch = random_batch(rng, 4, 8, len(model.vocab))
    loss = train_step(model, batch, Adam(0.0))
    assert loss == pytest.approx(loss_and_grads(model, batch)[0], abs=0)
    for k, v in model.parameters().items():
        np.testing.assert_array_equal(v, before[k])


def test_two_steps_reduce_loss(rng):
    model = small_model(2)
    batch = random_batch(rng, 8, 8, len(model.vocab))
    opt = TrainConfig.from_preset("desk", learning_rate=1e-3).make_optimizer()
    first = train_step(model, batch, opt)
    second = train_step(model, batch, opt)
    assert second <= first


def test_non_finite_loss_aborts(rng):
    model = small_model(3)
    batch = random_batch(rng, 4, 8, len(model.vocab))
    batch.image_inputs[0, 0] = np.nan
    with pytest.raises(NonFiniteLoss):
        train_step(model, batch, Adam(1e-3))
    batch = random_batch(rng, 4, 8, len(model.vocab))
    model.Wt[0, 0] = np.inf
    with pytest.raises(NonFiniteLoss):
        train_step(model, batch, Adam(1e-3))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=20))
def test_tau_clamp_holds(steps):
    r = np.random.default_rng(0)
    model = small_model(4)
    batch = random_batch(r, 4, 8, len(model.vocab))
    for lr in steps:
        train_step(model, batch, SGD(lr))
        assert TAU_MIN <= model.tau[0, 0] <= TAU_MAX
        assert 1e-3 - 1e-15 <= model.logit_scale <= 100 + 1e-12


# -- config / fit -------------------------------------------------------------


def test_train_config_presets():
    paper = TrainConfig.from_preset("paper")
    assert (paper.learning_rate, paper.batch_size, paper.epochs) == (2e-5, 32, 10)
    desk = TrainConfig.from_preset("desk")
    assert (desk.learning_rate, desk.batch_size, desk.epochs) == (1e-2, 32, 200)
    for bad in ({"epochs": 0}, {"learning_rate": 0.0}, {"batch_size": 1}, {"optimizer": "rmsprop"}):
        with pytest.raises(ConfigError):
            TrainConfig.from_preset("desk", **bad)


def _unique_pairs(n=24, d=6, seed=0):
    """Every item has its own caption token, so the loss can approach zero."""
    r = np.random.default_rng(seed)
    vocab = Vocab(["<pad>", "<unk>"] + [f"item{i}" for i in range(n)])
    data = EncodedPairs([f"u{i}" for i in range(n)], ["x"] * n, r.normal(size=(n, d)), [[i + 2] for i in range(n)])
    return vocab, data


def test_fit_separable_loss_drops_tenfold():
    vocab, data = _unique_pairs()
    model = init_model(0, vocab, 6, 16, 16, 16, 8)
    _, hist = fit(model, data, None, TrainConfig.from_preset("desk", epochs=150, batch_size=8))
    assert len(hist.train_loss) == len(hist.val_loss) == len(hist.wall_time) == 150
    assert hist.train_loss[-1] < 0.1 * hist.train_loss[0]


def test_fit_bit_reproducible():
    vocab, data = _unique_pairs()
    runs = []
    for _ in range(2):
        model = init_model(5, vocab, 6, 16, 16, 16, 8)
        model, hist = fit(model, data, data, TrainConfig.from_preset("desk", epochs=5, batch_size=8, seed=3))
        runs.append((model, hist))
    (m1, h1), (m2, h2) = runs
    assert h1.train_loss == h2.train_loss and h1.val_loss == h2.val_loss
    for (k, a), b in zip(m1.parameters().items(), m2.parameters().values()):
        assert a.tobytes() == b.tobytes(), k


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, rng):
    model = small_model(6, classes=["a", "b"])
    path = tmp_path / "m.cclp"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    assert raw[:4] == b"CCLP" and struct.unpack_from("<I", raw, 4)[0] == 1
    loaded = load_checkpoint(path)
    assert loaded.vocab == model.vocab and loaded.classes == ["a", "b"] and loaded.template == model.template
    for k, v in model.parameters().items():
        np.testing.assert_array_equal(loaded.parameters()[k], v.astype(np.float32).astype(np.float64))
    batch = random_batch(rng, 4, 8, len(model.vocab))
    a = joint_embed(loaded, batch)
    save_checkpoint(loaded, tmp_path / "again.cclp")
    assert (tmp_path / "again.cclp").read_bytes() == raw  # load-save is a fixed point
    b = joint_embed(load_checkpoint(tmp_path / "again.cclp"), batch)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_allclose(a[0], joint_embed(model, batch)[0], atol=1e-5)


def test_checkpoint_frozen_image(tmp_path):
    model = small_model(0, d_in=5, d_v=5, image_mode="frozen")
    save_checkpoint(model, tmp_path / "f.cclp")
    loaded = load_checkpoint(tmp_path / "f.cclp")
    assert loaded.image_encoder.mode == "frozen" and loaded.dims()["d_in"] == 5


def test_checkpoint_errors(tmp_path):
    model = small_model(7)
    path = tmp_path / "m.cclp"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    (tmp_path / "bad.cclp").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagic):
        load_checkpoint(tmp_path / "bad.cclp")
    (tmp_path / "short.cclp").write_bytes(raw[:2])
    with pytest.raises(BadMagic):
        load_checkpoint(tmp_path / "short.cclp")
    (tmp_path / "trunc.cclp").write_bytes(raw[:-8])
    with pytest.raises(CorruptRecord):
        load_checkpoint(tmp_path / "trunc.cclp")
    (tmp_path / "v2.cclp").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(VersionUnsupported):
        load_checkpoint(tmp_path / "v2.cclp")
    with pytest.raises(ShapeMismatch):
        load_checkpoint(path, expect={"n": 16})
    assert load_checkpoint(path, expect={"n": 3}).n == 3


# -- forward-only loss ---------------------------------------------------------


@pytest.mark.parametrize("image_mode", ["toy", "frozen"])
def test_batch_loss_matches_tape(rng, image_mode):
    for seed in range(10):
        d_in = 5 if image_mode == "frozen" else 8
        model = small_model(seed, d_in=d_in, h=16, d_v=5, image_mode=image_mode)
        batch = random_batch(rng, int(rng.integers(2, 9)), d_in, 12)
        assert batch_loss(model, batch) == pytest.approx(loss_and_grads(model, batch)[0], abs=1e-12)


def test_stacked_loss_rows_match_single(rng):
    model = small_model(1, h=16)
    batch = random_batch(rng, 4, 8, 12)
    params = dict(model.parameters())
    pool = pool_matrix(batch.token_ids, 12)
    stack = params["Wv"][None] + rng.normal(scale=0.1, size=(3,) + params["Wv"].shape)
    got = stacked_loss({**params, "Wv": stack}, batch.image_inputs, pool)
    assert got.shape == (3,)
    for i in range(3):
        single = stacked_loss({**params, "Wv": stack[i]}, batch.image_inputs, pool)
        assert got[i] == pytest.approx(float(single), abs=1e-12)


def test_batch_loss_checks_inputs(rng):
    model = small_model(0)
    with pytest.raises(ValueError):
        batch_loss(model, random_batch(rng, 1, 8, 12))
    with pytest.raises(DimMismatch):
        batch_loss(model, random_batch(rng, 3, 7, 12))
