"""Synthetic party data streams with windowed covariate and label shift.

Each party draws labeled samples from a class-conditional spherical Gaussian
mixture. A shift schedule reassigns regimes (a covariate transform and/or a
Dirichlet label-resampling alpha) to seeded party subsets at window
boundaries; assignments persist until a later event overrides them,
component-wise. All randomness flows through substreams derived from
(global seed, integer key path), so any cell of the simulation can be
regenerated independently and in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Leading spawn-key tags keep unrelated substream families disjoint.
DATA_DOMAIN = 0
SCHEDULE_DOMAIN = 1
SPLIT_DOMAIN = 2
PROFILE_DOMAIN = 3
TRAIN_DOMAIN = 4
COHORT_DOMAIN = 5
INIT_DOMAIN = 6
MEMORY_DOMAIN = 7
CALIBRATION_DOMAIN = 8
MIXTURE_DOMAIN = 9


def substream(seed: int, *key: int) -> np.random.Generator:
    """Deterministic generator derived from a global seed and a key path."""
    return np.random.default_rng(
        np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    )


def window_rng(seed: int, party_id: int, window_index: int) -> np.random.Generator:
    """Data-generation substream for one (party, window) cell."""
    return substream(seed, DATA_DOMAIN, party_id, window_index)


def schedule_rng(seed: int, window_index: int) -> np.random.Generator:
    """Substream that picks which parties a window's events touch."""
    return substream(seed, SCHEDULE_DOMAIN, window_index)


@dataclass(frozen=True)
class WindowSpec:
    """Tumbling or sliding window geometry over a sample stream."""

    mode: str = "tumbling"
    length: int = 200
    stride: int | None = None

    def __post_init__(self):
        if self.mode not in ("tumbling", "sliding"):
            raise ValueError(f"window mode must be tumbling or sliding, got {self.mode!r}")
        if self.length < 1:
            raise ValueError(f"window length must be >= 1, got {self.length}")
        if self.mode == "tumbling":
            if self.stride is not None and self.stride != self.length:
                raise ValueError("tumbling windows fix stride = length")
            object.__setattr__(self, "stride", self.length)
        else:
            if self.stride is None or self.stride < 1:
                raise ValueError("sliding windows need stride >= 1")


def make_windows(n_samples: int, spec: WindowSpec) -> list[tuple[int, int]]:
    """Half-open [start, end) index ranges; a trailing partial window is dropped."""
    if n_samples < 0:
        raise ValueError(f"n_samples must be >= 0, got {n_samples}")
    out = []
    start = 0
    while start + spec.length <= n_samples:
        out.append((start, start + spec.length))
        start += spec.stride
    return out


@dataclass(frozen=True)
class Rotation:
    """Plane rotation by angle radians in the given coordinate plane."""

    angle: float
    plane: tuple[int, int] = (0, 1)

    def __post_init__(self):
        i, j = self.plane
        if i == j or i < 0 or j < 0:
            raise ValueError(f"rotation plane must be two distinct axes, got {self.plane}")


@dataclass(frozen=True)
class Scale:
    factor: float


@dataclass(frozen=True)
class Shift:
    offset: tuple[float, ...]


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")


TransformStep = Rotation | Scale | Shift | GaussianNoise


@dataclass(frozen=True)
class CovariateTransform:
    """Ordered composition of feature-space transform steps."""

    steps: tuple[TransformStep, ...] = ()

    def apply(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = np.array(x, dtype=float, copy=True)
        for step in self.steps:
            if isinstance(step, Rotation):
                i, j = step.plane
                if out.shape[1] <= max(i, j):
                    raise ValueError(
                        f"rotation plane {step.plane} needs at least "
                        f"{max(i, j) + 1} feature dims, got {out.shape[1]}"
                    )
                c, s = math.cos(step.angle), math.sin(step.angle)
                xi = out[:, i] * c - out[:, j] * s
                xj = out[:, i] * s + out[:, j] * c
                out[:, i], out[:, j] = xi, xj
            elif isinstance(step, Scale):
                out = out * step.factor
            elif isinstance(step, Shift):
                offset = np.asarray(step.offset, dtype=float)
                if offset.shape != (out.shape[1],):
                    raise ValueError(
                        f"shift offset has dim {offset.shape}, features have {out.shape[1]}"
                    )
                out = out + offset
            elif isinstance(step, GaussianNoise):
                out = out + rng.normal(0.0, step.sigma, size=out.shape)
            else:  # pragma: no cover
                raise TypeError(f"unknown transform step: {step!r}")
        return out


IDENTITY = CovariateTransform()


def transform_from_config(obj) -> CovariateTransform:
    """Parse a transform from a list of {"kind": ...} dicts (config format)."""
    if obj is None:
        return IDENTITY
    steps: list[TransformStep] = []
    for item in obj:
        kind = item.get("kind")
        if kind == "identity":
            continue
        elif kind == "rotation":
            plane = tuple(int(v) for v in item.get("plane", (0, 1)))
            steps.append(Rotation(angle=float(item["angle"]), plane=plane))
        elif kind == "scale":
            steps.append(Scale(factor=float(item["factor"])))
        elif kind == "shift":
            steps.append(Shift(offset=tuple(float(v) for v in item["offset"])))
        elif kind == "gaussian_noise":
            steps.append(GaussianNoise(sigma=float(item["sigma"])))
        else:
            raise ValueError(f"unknown transform kind: {kind!r}")
    return CovariateTransform(tuple(steps))


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Class-conditional generator: x | y = c ~ N(mean_c, cov_scale^2 I)."""

    class_means: np.ndarray
    cov_scale: float
    class_prior: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.class_means, dtype=float)
        prior = np.asarray(self.class_prior, dtype=float)
        if means.ndim != 2:
            raise ValueError("class_means must be (n_classes, dim)")
        if prior.shape != (means.shape[0],):
            raise ValueError("class_prior length must match class count")
        if np.any(prior < 0) or abs(float(prior.sum()) - 1.0) > 1e-9:
            raise ValueError("class_prior must be a probability vector")
        if self.cov_scale < 0:
            raise ValueError(f"cov_scale must be >= 0, got {self.cov_scale}")
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "class_prior", prior)

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]


def make_default_mixture(
    n_classes: int, dim: int, seed: int, mean_scale: float = 2.5, cov_scale: float = 1.0
) -> GaussianMixture:
    """Shared base mixture with seeded random class means and uniform prior."""
    rng = substream(seed, MIXTURE_DOMAIN)
    means = mean_scale * rng.standard_normal((n_classes, dim))
    prior = np.full(n_classes, 1.0 / n_classes)
    return GaussianMixture(class_means=means, cov_scale=cov_scale, class_prior=prior)


@dataclass(frozen=True, eq=False)
class PartyStream:
    party_id: int
    base: GaussianMixture
    seed: int


def sample_window(
    stream: PartyStream,
    window_index: int,
    transform: CovariateTransform = IDENTITY,
    label_alpha: float | None = None,
    n: int = 200,
    rng: np.random.Generator | None = None,
    label_window: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw one window of labeled samples under the active regime.

    Labels come first, from the base prior or a Dirichlet(alpha) resample of
    it; features are generated class-conditionally and only then pushed
    through the covariate transform, so label events never touch the
    class-conditional generators. rng defaults to the (party, window)
    substream, so identical calls are bit-identical.

    label_window (when it differs from window_index) replays the Dirichlet
    draw from the window the label regime was installed at, so a persisting
    assignment keeps one fixed class prior instead of resampling it every
    window.
    """
    if n < 1:
        raise ValueError(f"window sample count must be >= 1, got {n}")
    if rng is None:
        rng = window_rng(stream.seed, stream.party_id, window_index)
    base = stream.base
    prior = base.class_prior
    if label_alpha is not None:
        if label_alpha <= 0:
            raise ValueError(f"label alpha must be positive, got {label_alpha}")
        if label_window is not None and label_window != window_index:
            # the install-window rng drew the prior first; rebuilding it
            # reproduces that exact draw
            prior_rng = window_rng(stream.seed, stream.party_id, label_window)
        else:
            prior_rng = rng
        prior = prior_rng.dirichlet(np.full(base.n_classes, float(label_alpha)))
    y = rng.choice(base.n_classes, size=n, p=prior)
    x = base.class_means[y] + base.cov_scale * rng.standard_normal((n, base.dim))
    x = transform.apply(x, rng)
    return x, y.astype(int)


@dataclass(frozen=True)
class ShiftEvent:
    """One scheduled regime change for a random party subset."""

    window_index: int
    affected_fraction: float
    covariate: CovariateTransform | None = None
    label_alpha: float | None = None

    def __post_init__(self):
        if self.window_index < 0:
            raise ValueError("event window_index must be >= 0")
        if not 0.0 < self.affected_fraction <= 1.0:
            raise ValueError(
                f"affected_fraction must be in (0, 1], got {self.affected_fraction}"
            )
        if self.covariate is None and self.label_alpha is None:
            raise ValueError("event needs a covariate transform or a label alpha")
        if self.label_alpha is not None and self.label_alpha <= 0:
            raise ValueError(f"label alpha must be positive, got {self.label_alpha}")


@dataclass(frozen=True)
class ShiftSchedule:
    events: tuple[ShiftEvent, ...] = ()
    horizon: int = 5

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        object.__setattr__(self, "events", tuple(self.events))
        indices = [e.window_index for e in self.events]
        if indices != sorted(indices):
            raise ValueError("events must be sorted by window_index")
        if indices and indices[-1] >= self.horizon:
            raise ValueError("event window_index must be < horizon")

    def events_at(self, window_index: int) -> tuple[ShiftEvent, ...]:
        return tuple(e for e in self.events if e.window_index == window_index)


@dataclass(frozen=True)
class RegimeAssignment:
    """A party's active regime: covariate transform plus optional label alpha.

    label_window records when the label regime was installed, so the realized
    class prior stays fixed for as long as the assignment persists.
    """

    transform: CovariateTransform = IDENTITY
    label_alpha: float | None = None
    label_window: int | None = None


def apply_schedule(
    party_ids: list[int],
    schedule: ShiftSchedule,
    window_index: int,
    rng: np.random.Generator,
    previous: dict[int, RegimeAssignment] | None = None,
) -> dict[int, RegimeAssignment]:
    """Regime assignments for one window.

    Each event at this window reassigns floor(fraction * n) parties sampled
    without replacement. Untouched parties keep `previous` assignments
    (identity regime when previous is None). Events override component-wise:
    a covariate-only event leaves a party's label alpha in place, and vice
    versa.
    """
    ids = sorted(int(p) for p in party_ids)
    if previous is None:
        current = {pid: RegimeAssignment() for pid in ids}
    else:
        current = {pid: previous.get(pid, RegimeAssignment()) for pid in ids}
    for event in schedule.events_at(window_index):
        k = math.floor(event.affected_fraction * len(ids))
        affected = rng.choice(np.array(ids), size=k, replace=False)
        for pid in sorted(int(p) for p in affected):
            prev = current[pid]
            if event.label_alpha is not None:
                alpha, since = event.label_alpha, window_index
            else:
                alpha, since = prev.label_alpha, prev.label_window
            current[pid] = RegimeAssignment(
                transform=event.covariate if event.covariate is not None else prev.transform,
                label_alpha=alpha,
                label_window=since,
            )
    return current
