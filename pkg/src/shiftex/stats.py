"""Kernel two-sample statistics and histogram divergences.

Window-over-window shift scores: covariate movement is a biased (V-statistic)
MMD^2 estimate between embedding samples under an RBF kernel, label movement
is the Jensen-Shannon divergence between class histograms in nats. Everything
works on small in-memory numpy arrays; callers keep sample sizes at profile
scale (tens to a few hundred rows).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import rel_entr

LN2 = math.log(2.0)


@dataclass(frozen=True)
class KernelSpec:
    """RBF kernel configuration.

    gamma=None defers to the median heuristic, resolved per comparison over
    the pooled sample: 1 / median of pairwise squared distances.
    """

    family: str = "rbf"
    gamma: float | None = None

    def __post_init__(self):
        if self.family != "rbf":
            raise ValueError(f"unsupported kernel family: {self.family!r}")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError(f"kernel gamma must be positive, got {self.gamma}")


def as_embeddings(x) -> np.ndarray:
    """Validate and return an (n, d) float array of embeddings."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(
            f"embedding set must have shape (n, d) with n, d >= 1, got {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding set contains non-finite entries")
    return arr


def as_histogram(p) -> np.ndarray:
    """Validate and return a 1-d probability histogram."""
    arr = np.asarray(p, dtype=float)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise ValueError(f"histogram must be 1-d and nonempty, got shape {arr.shape}")
    if np.any(arr < 0) or np.any(arr > 1):
        raise ValueError("histogram entries must lie in [0, 1]")
    total = float(arr.sum())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"histogram must sum to 1 within 1e-9, got {total}")
    return arr


def rbf_kernel(x, y, spec: KernelSpec) -> float:
    """Evaluate exp(-gamma * ||x - y||^2) for two single vectors."""
    if spec.gamma is None:
        raise ValueError("rbf_kernel needs an explicit gamma; none to resolve against")
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError(f"vector shapes differ: {x.shape} vs {y.shape}")
    d2 = float(np.sum((x - y) ** 2))
    return math.exp(-spec.gamma * d2)


def median_heuristic_gamma(pooled) -> float:
    """Median-heuristic bandwidth over a pooled sample.

    Returns 1 / median of pairwise squared euclidean distances. Degenerate
    pools (fewer than 2 rows, or all rows identical) fall back to 1.0.
    """
    z = as_embeddings(pooled)
    if z.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(z, "sqeuclidean")))
    if med <= 0.0:
        return 1.0
    return 1.0 / med


def _block_mean(a: np.ndarray, b: np.ndarray, gamma: float) -> float:
    # Summing in sorted order makes the estimate exactly symmetric in (X, Y)
    # and exactly zero for identical inputs; np.mean's layout order would not.
    k = np.exp(-gamma * cdist(a, b, "sqeuclidean"))
    return float(np.sort(k, axis=None).sum() / k.size)


def mmd_squared(x, y, spec: KernelSpec = KernelSpec()) -> float:
    """Biased V-statistic estimate of squared maximum mean discrepancy.

    mean k(X, X) + mean k(Y, Y) - 2 mean k(X, Y), every mean over all pairs
    including self-pairs. Nonnegative up to roundoff, symmetric, and zero
    for identical samples.
    """
    x = as_embeddings(x)
    y = as_embeddings(y)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"embedding dims differ: {x.shape[1]} vs {y.shape[1]}")
    gamma = spec.gamma
    if gamma is None:
        gamma = median_heuristic_gamma(np.vstack([x, y]))
    return (
        _block_mean(x, x, gamma)
        + _block_mean(y, y, gamma)
        - 2.0 * _block_mean(x, y, gamma)
    )


def jsd(p, q) -> float:
    """Jensen-Shannon divergence between two histograms, in nats.

    0.5 KL(p || m) + 0.5 KL(q || m) with m the midpoint, natural log and the
    0 log 0 := 0 convention (no smoothing). Bounded by ln 2.
    """
    p = as_histogram(p)
    q = as_histogram(q)
    if p.shape != q.shape:
        raise ValueError(f"histogram lengths differ: {p.shape[0]} vs {q.shape[0]}")
    m = 0.5 * (p + q)
    val = 0.5 * float(rel_entr(p, m).sum()) + 0.5 * float(rel_entr(q, m).sum())
    # roundoff can land a hair below zero for near-identical inputs
    return max(val, 0.0)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two flat vectors, clipped to [-1, 1]."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"vector shapes differ: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def label_histogram(labels, n_classes: int) -> np.ndarray:
    """Normalized class counts over integer labels in [0, n_classes)."""
    if n_classes < 1:
        raise ValueError(f"n_classes must be >= 1, got {n_classes}")
    arr = np.asarray(labels)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise ValueError("labels must be a nonempty 1-d array")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {arr.dtype}")
    if arr.min() < 0 or arr.max() >= n_classes:
        raise ValueError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{arr.min()}, {arr.max()}]"
        )
    return np.bincount(arr, minlength=n_classes).astype(float) / arr.shape[0]
