"""Tests for the MLP, local training, and federated aggregation."""

from __future__ import annotations

import numpy as np
import pytest

from shiftex.models import (
    ModelParams,
    ModelShapes,
    TrainConfig,
    embed,
    evaluate,
    fed_aggregate,
    init_model,
    local_train,
    loss_and_grad,
    params_from_json,
    params_to_json,
    predict_logits,
)

SHAPES = ModelShapes(8, 16, 4)


def test_flat_size_arithmetic():
    # 8*16 + 16 + 16*4 + 4
    assert SHAPES.flat_size == 8 * 16 + 16 + 16 * 4 + 4
    assert SHAPES.flat_size == 212
    assert ModelShapes(2, 3, 5).flat_size == 2 * 3 + 3 + 3 * 5 + 5


def test_shapes_validation():
    with pytest.raises(ValueError):
        ModelShapes(0, 16, 4)
    with pytest.raises(ValueError):
        ModelParams(SHAPES, np.zeros(10))
    with pytest.raises(ValueError):
        ModelParams(SHAPES, np.full(SHAPES.flat_size, np.inf))


def test_init_deterministic_and_seed_sensitive():
    a = init_model(SHAPES, 0)
    b = init_model(SHAPES, 0)
    c = init_model(SHAPES, 1)
    assert np.array_equal(a.flat, b.flat)
    assert not np.array_equal(a.flat, c.flat)


def test_init_no_collisions_across_seeds():
    seen = {init_model(SHAPES, s).flat.tobytes() for s in range(100)}
    assert len(seen) == 100


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    params = init_model(SHAPES, 3)
    x = rng.normal(size=(40, 8))
    y = rng.integers(0, 4, size=40)
    anchor = init_model(SHAPES, 9)
    h = 1e-5
    for prox in (0.0, 0.7):
        _, grad = loss_and_grad(params, x, y, prox, anchor if prox else None)
        for i in rng.choice(SHAPES.flat_size, 10, replace=False):
            fp = params.flat.copy()
            fp[i] += h
            fm = params.flat.copy()
            fm[i] -= h
            lp, _ = loss_and_grad(ModelParams(SHAPES, fp), x, y, prox, anchor if prox else None)
            lm, _ = loss_and_grad(ModelParams(SHAPES, fm), x, y, prox, anchor if prox else None)
            fd = (lp - lm) / (2 * h)
            rel = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-12)
            assert rel < 1e-4


def test_separable_toy_reaches_perfect_accuracy():
    # independent oracle: the midpoint hyperplane classifies this toy perfectly
    mu0, mu1 = np.array([-3.0, -3.0]), np.array([3.0, 3.0])
    rng = np.random.default_rng(1)
    x = np.vstack([mu0 + 0.3 * rng.normal(size=(100, 2)), mu1 + 0.3 * rng.normal(size=(100, 2))])
    y = np.array([0] * 100 + [1] * 100)
    w = mu1 - mu0
    b = -w @ (mu0 + mu1) / 2
    assert np.mean((x @ w + b > 0).astype(int) == y) == 1.0

    model = init_model(ModelShapes(2, 16, 2), 0)
    cfg = TrainConfig(learning_rate=0.3, local_epochs=50, batch_size=32)
    trained = local_train(model, x, y, cfg, np.random.default_rng(5))
    assert evaluate(trained, x, y) == 1.0


def test_untrained_model_is_chance_level():
    # labels balanced and independent of the features
    rng = np.random.default_rng(3)
    x = rng.normal(size=(10000, 8))
    y = np.tile(np.arange(4), 2500)
    acc = evaluate(init_model(SHAPES, 11), x, y)
    assert abs(acc - 0.25) <= 0.02


def test_full_batch_descent_never_increases_loss():
    rng = np.random.default_rng(2)
    means = 2.5 * rng.normal(size=(4, 8))
    y = np.repeat(np.arange(4), 100)
    x = means[y] + rng.normal(size=(400, 8))
    cfg = TrainConfig(learning_rate=1e-3, local_epochs=1, batch_size=400)
    cur = init_model(SHAPES, 31)
    prev = None
    for _ in range(20):
        loss, _ = loss_and_grad(cur, x, y)
        if prev is not None:
            assert loss <= prev + 1e-12
        prev = loss
        cur = local_train(cur, x, y, cfg, np.random.default_rng(0))


def test_proximal_pull_toward_anchor():
    # discrete infinity-limit check: prox=1e6, one epoch, lr*prox <= 1
    rng = np.random.default_rng(2)
    x = rng.normal(size=(200, 8))
    y = rng.integers(0, 4, size=200)
    start = init_model(SHAPES, 22)
    lr = 1e-6
    free = local_train(start, x, y, TrainConfig(lr, 1, 32, 0.0), np.random.default_rng(7))
    pulled = local_train(
        start, x, y, TrainConfig(lr, 1, 32, 1e6), np.random.default_rng(7), anchor=start
    )
    assert np.linalg.norm(pulled.flat - start.flat) < np.linalg.norm(free.flat - start.flat)


def test_prox_zero_matches_plain_sgd_bitwise():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(100, 8))
    y = rng.integers(0, 4, size=100)
    start = init_model(SHAPES, 1)
    anchor = init_model(SHAPES, 2)
    a = local_train(start, x, y, TrainConfig(0.1, 2, 32, 0.0), np.random.default_rng(9))
    b = local_train(
        start, x, y, TrainConfig(0.1, 2, 32, 0.0), np.random.default_rng(9), anchor=anchor
    )
    assert np.array_equal(a.flat, b.flat)


def test_prox_requires_anchor_in_loss():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        loss_and_grad(init_model(SHAPES, 0), rng.normal(size=(5, 8)), np.zeros(5, dtype=int), 0.5)


def test_zero_epochs_returns_params_unchanged():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(10, 8))
    y = rng.integers(0, 4, size=10)
    start = init_model(SHAPES, 0)
    out = local_train(start, x, y, TrainConfig(0.1, 0, 32), np.random.default_rng(0))
    assert out is start


def test_embed_ignores_head_weights():
    rng = np.random.default_rng(6)
    params = init_model(SHAPES, 5)
    x = rng.normal(size=(20, 8))
    before = embed(params, x)
    flat = params.flat.copy()
    head_start = SHAPES.in_dim * SHAPES.hidden_dim + SHAPES.hidden_dim
    flat[head_start:] = rng.normal(size=SHAPES.flat_size - head_start)
    after = embed(ModelParams(SHAPES, flat), x)
    assert np.array_equal(before, after)
    # but logits change
    assert not np.array_equal(predict_logits(params, x), predict_logits(ModelParams(SHAPES, flat), x))


def test_embed_single_vector_and_dim_check():
    params = init_model(SHAPES, 0)
    v = embed(params, np.zeros(8))
    assert v.shape == (16,)
    with pytest.raises(ValueError):
        embed(params, np.zeros(5))


def test_embeddings_separate_classes_after_training():
    rng = np.random.default_rng(8)
    mu0, mu1 = np.array([-3.0, -3.0]), np.array([3.0, 3.0])
    x = np.vstack([mu0 + 0.3 * rng.normal(size=(100, 2)), mu1 + 0.3 * rng.normal(size=(100, 2))])
    y = np.array([0] * 100 + [1] * 100)
    model = init_model(ModelShapes(2, 16, 2), 0)
    trained = local_train(
        model, x, y, TrainConfig(0.3, 50, 32), np.random.default_rng(5)
    )
    emb = embed(trained, x)
    m0, m1 = emb[y == 0].mean(axis=0), emb[y == 1].mean(axis=0)
    between = np.linalg.norm(m0 - m1)
    within = np.mean(np.linalg.norm(emb[y == 0] - m0, axis=1))
    assert between > within


def test_fed_aggregate_weighted_example():
    s = ModelShapes(1, 1, 1)
    a = ModelParams(s, np.zeros(4))
    b = ModelParams(s, np.full(4, 4.0))
    got = fed_aggregate([(a, 1.0), (b, 3.0)])
    assert got.flat.tolist() == [3.0, 3.0, 3.0, 3.0]


def test_fed_aggregate_copies_exact():
    p = init_model(SHAPES, 7)
    got = fed_aggregate([(p, 2.5)] * 5)
    assert np.array_equal(got.flat, p.flat)


def test_fed_aggregate_single_update_is_identity():
    p = init_model(SHAPES, 7)
    assert np.array_equal(fed_aggregate([(p, 10.0)]).flat, p.flat)


def test_fed_aggregate_permutation_invariant_within_tolerance():
    rng = np.random.default_rng(10)
    parts = [(init_model(SHAPES, s), float(rng.integers(1, 9))) for s in range(5)]
    ref = fed_aggregate(parts)
    for _ in range(10):
        order = rng.permutation(5)
        got = fed_aggregate([parts[i] for i in order])
        assert np.allclose(got.flat, ref.flat, atol=1e-12)


def test_fed_aggregate_validation():
    with pytest.raises(ValueError):
        fed_aggregate([])
    p = init_model(SHAPES, 0)
    with pytest.raises(ValueError):
        fed_aggregate([(p, 0.0)])
    q = init_model(ModelShapes(8, 16, 5), 0)
    with pytest.raises(ValueError):
        fed_aggregate([(p, 1.0), (q, 1.0)])


def test_params_json_roundtrip_bitwise():
    p = init_model(SHAPES, 13)
    obj = params_to_json(p)
    assert obj["in_dim"] == 8 and obj["hidden_dim"] == 16 and obj["n_classes"] == 4
    q = params_from_json(obj)
    assert q.shapes == p.shapes
    assert np.array_equal(q.flat, p.flat)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(local_epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(prox_coefficient=-0.1)
