"""Party-side shift detection.

Each window a party embeds its local data through its current model, builds a
latent profile (full-sample mean plus a bounded seeded subsample) and a label
histogram, and scores movement against the previous window: covariate delta
as MMD^2 between profile subsamples, label delta as JSD between histograms.
Only profiles, histograms, and scores ever leave the party; raw features and
labels stay local.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import ModelParams, embed
from .stats import KernelSpec, as_embeddings, as_histogram, jsd, label_histogram, mmd_squared


@dataclass(frozen=True, eq=False)
class LatentProfile:
    """Summary of one window's embeddings: mean, bounded subsample, source size."""

    mean: np.ndarray
    sample: np.ndarray
    n_source: int

    def __post_init__(self):
        sample = as_embeddings(self.sample)
        mean = np.asarray(self.mean, dtype=float)
        if mean.shape != (sample.shape[1],):
            raise ValueError("profile mean dim must match sample dim")
        if self.n_source < sample.shape[0]:
            raise ValueError("n_source cannot be smaller than the stored sample")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sample", sample)


@dataclass(frozen=True, eq=False)
class PartyReport:
    party_id: int
    window_index: int
    profile: LatentProfile
    label_hist: np.ndarray
    delta_cov: float
    delta_label: float

    def __post_init__(self):
        object.__setattr__(self, "label_hist", as_histogram(self.label_hist))
        if self.delta_cov < 0 or self.delta_label < 0:
            raise ValueError("shift deltas must be nonnegative")


def build_profile(
    params: ModelParams, x, m_profile: int, rng: np.random.Generator
) -> LatentProfile:
    """Embed a window and summarize it.

    The mean is over all rows; the stored sample is a seeded subsample of at
    most m_profile rows (index order preserved).
    """
    if m_profile < 1:
        raise ValueError(f"m_profile must be >= 1, got {m_profile}")
    emb = embed(params, as_embeddings(x))
    mean = emb.mean(axis=0)
    n = emb.shape[0]
    if n > m_profile:
        idx = np.sort(rng.choice(n, size=m_profile, replace=False))
        sample = emb[idx]
    else:
        sample = emb
    return LatentProfile(mean=mean, sample=sample, n_source=n)


def window_deltas(
    prev_profile: LatentProfile,
    prev_hist: np.ndarray,
    profile: LatentProfile,
    hist: np.ndarray,
    kernel: KernelSpec = KernelSpec(),
) -> tuple[float, float]:
    """Covariate and label movement between two window summaries."""
    delta_cov = mmd_squared(profile.sample, prev_profile.sample, kernel)
    delta_label = jsd(hist, prev_hist)
    # the V-statistic can sit a hair under zero for near-identical samples
    return max(delta_cov, 0.0), delta_label


def detect_shift(
    party_id: int,
    window_index: int,
    prev: tuple[LatentProfile, np.ndarray] | None,
    x,
    y,
    params: ModelParams,
    kernel: KernelSpec,
    m_profile: int,
    rng: np.random.Generator,
) -> PartyReport:
    """Build this window's report. With no previous window both deltas are 0."""
    profile = build_profile(params, x, m_profile, rng)
    hist = label_histogram(y, params.shapes.n_classes)
    if prev is None:
        delta_cov, delta_label = 0.0, 0.0
    else:
        prev_profile, prev_hist = prev
        delta_cov, delta_label = window_deltas(prev_profile, prev_hist, profile, hist, kernel)
    return PartyReport(
        party_id=party_id,
        window_index=window_index,
        profile=profile,
        label_hist=hist,
        delta_cov=delta_cov,
        delta_label=delta_label,
    )


def calibration_reports(
    party_id: int,
    x,
    y,
    params: ModelParams,
    kernel: KernelSpec,
    m_profile: int,
    n_splits: int,
    rng: np.random.Generator,
) -> list[PartyReport]:
    """Null shift scores from seeded half-splits of one shift-free window.

    Each split compares two disjoint halves of the same window, so the
    resulting deltas are draws from the no-shift score distribution at
    profile scale. Windows need at least 4 rows to split.
    """
    x = as_embeddings(x)
    y = np.asarray(y)
    n = x.shape[0]
    if n < 4:
        raise ValueError(f"need at least 4 samples to half-split, got {n}")
    if n_splits < 1:
        raise ValueError(f"n_splits must be >= 1, got {n_splits}")
    half = n // 2
    reports = []
    for _ in range(n_splits):
        order = rng.permutation(n)
        ia, ib = order[:half], order[half : 2 * half]
        prof_a = build_profile(params, x[ia], m_profile, rng)
        prof_b = build_profile(params, x[ib], m_profile, rng)
        hist_a = label_histogram(y[ia], params.shapes.n_classes)
        hist_b = label_histogram(y[ib], params.shapes.n_classes)
        delta_cov, delta_label = window_deltas(prof_a, hist_a, prof_b, hist_b, kernel)
        reports.append(
            PartyReport(
                party_id=party_id,
                window_index=0,
                profile=prof_b,
                label_hist=hist_b,
                delta_cov=delta_cov,
                delta_label=delta_label,
            )
        )
    return reports


def report_to_json(report: PartyReport) -> dict:
    """Wire form of a report: summaries and scores only, no raw data."""
    return {
        "party_id": report.party_id,
        "window_index": report.window_index,
        "profile_mean": report.profile.mean.tolist(),
        "profile_sample": report.profile.sample.tolist(),
        "n_source": report.profile.n_source,
        "label_hist": report.label_hist.tolist(),
        "delta_cov": report.delta_cov,
        "delta_label": report.delta_label,
    }


def report_from_json(obj: dict) -> PartyReport:
    profile = LatentProfile(
        mean=np.asarray(obj["profile_mean"], dtype=float),
        sample=np.asarray(obj["profile_sample"], dtype=float),
        n_source=int(obj["n_source"]),
    )
    return PartyReport(
        party_id=int(obj["party_id"]),
        window_index=int(obj["window_index"]),
        profile=profile,
        label_hist=np.asarray(obj["label_hist"], dtype=float),
        delta_cov=float(obj["delta_cov"]),
        delta_label=float(obj["delta_label"]),
    )
