"""One-hidden-layer MLP classifiers with flat parameter vectors.

The model is deliberately tiny: tanh hidden layer (its activations double as
the embedding used for shift detection), softmax head, plain mini-batch SGD
with an optional proximal pull toward an anchor parameter vector. Parameters
live in one flat float64 array in row-major order (W1, b1, W2, b2), which
makes cloning, averaging, cosine comparison, and checkpointing trivial.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ModelShapes:
    in_dim: int
    hidden_dim: int
    n_classes: int

    def __post_init__(self):
        for name in ("in_dim", "hidden_dim", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def flat_size(self) -> int:
        return (
            self.in_dim * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.n_classes
            + self.n_classes
        )


@dataclass(frozen=True, eq=False)
class ModelParams:
    shapes: ModelShapes
    flat: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.flat, dtype=float)
        if arr.shape != (self.shapes.flat_size,):
            raise ValueError(
                f"flat vector has length {arr.shape}, shapes need {self.shapes.flat_size}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("parameter vector contains non-finite entries")
        object.__setattr__(self, "flat", arr)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    local_epochs: int = 2
    batch_size: int = 32
    prox_coefficient: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.local_epochs < 0:
            raise ValueError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.prox_coefficient < 0:
            raise ValueError(f"prox_coefficient must be >= 0, got {self.prox_coefficient}")


def _unpack(params: ModelParams):
    s = params.shapes
    flat = params.flat
    i = 0
    w1 = flat[i : i + s.in_dim * s.hidden_dim].reshape(s.in_dim, s.hidden_dim)
    i += s.in_dim * s.hidden_dim
    b1 = flat[i : i + s.hidden_dim]
    i += s.hidden_dim
    w2 = flat[i : i + s.hidden_dim * s.n_classes].reshape(s.hidden_dim, s.n_classes)
    i += s.hidden_dim * s.n_classes
    b2 = flat[i : i + s.n_classes]
    return w1, b1, w2, b2


def init_model(shapes: ModelShapes, seed: int) -> ModelParams:
    """Seeded init: normal weights at 1/sqrt(fan_in) scale, zero biases."""
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, 1.0 / np.sqrt(shapes.in_dim), (shapes.in_dim, shapes.hidden_dim))
    b1 = np.zeros(shapes.hidden_dim)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(shapes.hidden_dim), (shapes.hidden_dim, shapes.n_classes))
    b2 = np.zeros(shapes.n_classes)
    flat = np.concatenate([w1.ravel(), b1, w2.ravel(), b2])
    return ModelParams(shapes, flat)


def embed(params: ModelParams, x) -> np.ndarray:
    """Penultimate-layer activations; never touches the classification head."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.shape[1] != params.shapes.in_dim:
        raise ValueError(
            f"feature dim {arr.shape[1]} does not match model in_dim {params.shapes.in_dim}"
        )
    w1, b1, _, _ = _unpack(params)
    h = np.tanh(arr @ w1 + b1)
    return h[0] if single else h


def predict_logits(params: ModelParams, x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    w1, b1, w2, b2 = _unpack(params)
    h = np.tanh(arr @ w1 + b1)
    logits = h @ w2 + b2
    return logits[0] if single else logits


def evaluate(params: ModelParams, x, y) -> float:
    """Fraction of samples whose argmax logit matches the label."""
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] < 1:
        raise ValueError("labels must be a nonempty 1-d array")
    logits = predict_logits(params, x)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def loss_and_grad(
    params: ModelParams,
    x,
    y,
    prox_coefficient: float = 0.0,
    anchor: ModelParams | None = None,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy (plus proximal term) and its flat gradient.

    The proximal term is (prox/2) * ||theta - anchor||^2 over the full flat
    vector; gradient checked against central finite differences in the tests.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    n = x.shape[0]
    w1, b1, w2, b2 = _unpack(params)

    z1 = x @ w1 + b1
    a = np.tanh(z1)
    logits = a @ w2 + b2
    logits = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(logits)
    p = expz / expz.sum(axis=1, keepdims=True)
    nll = -np.log(p[np.arange(n), y] + 1e-300)
    loss = float(nll.mean())

    dz2 = p.copy()
    dz2[np.arange(n), y] -= 1.0
    dz2 /= n
    gw2 = a.T @ dz2
    gb2 = dz2.sum(axis=0)
    da = dz2 @ w2.T
    dz1 = da * (1.0 - a * a)
    gw1 = x.T @ dz1
    gb1 = dz1.sum(axis=0)
    grad = np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])

    if prox_coefficient > 0.0:
        if anchor is None:
            raise ValueError("proximal term needs an anchor parameter vector")
        diff = params.flat - anchor.flat
        loss += 0.5 * prox_coefficient * float(diff @ diff)
        grad = grad + prox_coefficient * diff
    return loss, grad


def local_train(
    params: ModelParams,
    x,
    y,
    cfg: TrainConfig,
    rng: np.random.Generator,
    anchor: ModelParams | None = None,
) -> ModelParams:
    """Seeded mini-batch SGD from params; anchor defaults to the start point.

    local_epochs=0 returns params unchanged.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    n = x.shape[0]
    if n < 1 or y.shape != (n,):
        raise ValueError("training data must be nonempty with matching labels")
    if cfg.local_epochs == 0:
        return params
    if anchor is None:
        anchor = params
    flat = params.flat.copy()
    current = ModelParams(params.shapes, flat)
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grad = loss_and_grad(
                current, x[idx], y[idx], cfg.prox_coefficient, anchor
            )
            flat = flat - cfg.learning_rate * grad
            current = ModelParams(params.shapes, flat)
    return current


def fed_aggregate(updates: list[tuple[ModelParams, float]]) -> ModelParams:
    """Weight-normalized average of parameter vectors.

    Computed anchored at the first update (base + sum w_i/W * (theta_i -
    base)) so aggregating identical params returns them exactly. Reduction
    order is the input order; callers needing determinism pass a fixed
    (party-id-sorted) list.
    """
    if not updates:
        raise ValueError("fed_aggregate needs at least one update")
    shapes = updates[0][0].shapes
    total = 0.0
    for params, weight in updates:
        if params.shapes != shapes:
            raise ValueError("all updates must share the same model shapes")
        if weight <= 0:
            raise ValueError(f"aggregation weights must be positive, got {weight}")
        total += float(weight)
    base = updates[0][0].flat
    acc = np.zeros_like(base)
    for params, weight in updates:
        acc += (float(weight) / total) * (params.flat - base)
    return ModelParams(shapes, base + acc)


def params_to_json(params: ModelParams) -> dict:
    """Checkpoint form: shape header plus row-major flat weights."""
    return {
        "in_dim": params.shapes.in_dim,
        "hidden_dim": params.shapes.hidden_dim,
        "n_classes": params.shapes.n_classes,
        "weights": params.flat.tolist(),
    }


def params_from_json(obj: dict) -> ModelParams:
    shapes = ModelShapes(
        in_dim=int(obj["in_dim"]),
        hidden_dim=int(obj["hidden_dim"]),
        n_classes=int(obj["n_classes"]),
    )
    return ModelParams(shapes, np.asarray(obj["weights"], dtype=float))
