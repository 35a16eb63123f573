"""Aggregator-side protocol: calibration, clustering, and the expert registry.

Each window the aggregator partitions parties by their reported shift
scores, clusters the shifted ones in embedding space, routes each cluster
to a matching expert (or clones a fresh one from the base model), trains
with label-balanced cohorts, merges redundant experts, and folds the new
profiles into each expert's latent memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from sklearn.cluster import KMeans

from .models import (
    ModelParams,
    ModelShapes,
    TrainConfig,
    embed,
    fed_aggregate,
    init_model,
    local_train,
)
from .party import PartyReport, calibration_reports
from .stats import LN2, KernelSpec, cosine_similarity, label_histogram, mmd_squared
from .streams import (
    CALIBRATION_DOMAIN,
    COHORT_DOMAIN,
    INIT_DOMAIN,
    MEMORY_DOMAIN,
    TRAIN_DOMAIN,
    substream,
)

Datasets = Mapping[int, tuple[np.ndarray, np.ndarray]]

_CENTROID_TOL = 1e-12


@dataclass(frozen=True)
class Thresholds:
    """Detection thresholds and lifecycle knobs.

    epsilon_match=None means "reuse the calibrated delta_cov" (both are
    squared-MMD scales); u_max=None means unbounded expert capacity.
    """

    delta_cov: float
    delta_label: float
    epsilon_match: float | None = None
    tau_merge: float = 0.95
    gamma_min_cluster: int = 3
    u_max: int | None = None
    lambda_open: float = 0.5
    mu_balance: float = 0.5
    ema_beta: float = 0.9
    participant_fraction: float = 0.2

    def __post_init__(self):
        if self.delta_cov < 0:
            raise ValueError("delta_cov must be nonnegative")
        if not 0 <= self.delta_label <= LN2 + 1e-12:
            raise ValueError("delta_label must lie in [0, ln 2]")
        if self.epsilon_match is not None and self.epsilon_match < 0:
            raise ValueError("epsilon_match must be nonnegative")
        if not -1 < self.tau_merge <= 1:
            raise ValueError("tau_merge must lie in (-1, 1]")
        if self.gamma_min_cluster < 1:
            raise ValueError("gamma_min_cluster must be at least 1")
        if self.u_max is not None and self.u_max < 1:
            raise ValueError("u_max must be at least 1 when bounded")
        if self.lambda_open < 0 or self.mu_balance < 0:
            raise ValueError("lambda_open and mu_balance must be nonnegative")
        if not 0 <= self.ema_beta < 1:
            raise ValueError("ema_beta must lie in [0, 1)")
        if not 0 < self.participant_fraction <= 1:
            raise ValueError("participant_fraction must lie in (0, 1]")

    def match_epsilon(self) -> float:
        return self.delta_cov if self.epsilon_match is None else self.epsilon_match


@dataclass(frozen=True, eq=False)
class ExpertRecord:
    """One expert: parameters plus the latent memory used for matching."""

    expert_id: int
    params: ModelParams
    memory_signature: np.ndarray
    signature_sample: np.ndarray
    agg_label_hist: np.ndarray
    created_window: int

    def __post_init__(self):
        sig = np.asarray(self.memory_signature, dtype=float)
        sample = np.asarray(self.signature_sample, dtype=float)
        if sig.ndim != 1 or sample.ndim != 2 or sample.shape[1] != sig.shape[0]:
            raise ValueError("signature sample columns must match signature dimension")
        hist = np.asarray(self.agg_label_hist, dtype=float)
        if hist.ndim != 1 or np.any(hist < 0) or not math.isclose(hist.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("agg_label_hist must be a probability vector")
        object.__setattr__(self, "memory_signature", sig)
        object.__setattr__(self, "signature_sample", sample)
        object.__setattr__(self, "agg_label_hist", hist)


@dataclass
class ExpertRegistry:
    experts: dict[int, ExpertRecord] = field(default_factory=dict)
    assignment: dict[int, int] = field(default_factory=dict)
    next_id: int = 0

    def parties_of(self, expert_id: int) -> list[int]:
        return sorted(p for p, e in self.assignment.items() if e == expert_id)

    def assigned_count(self, expert_id: int) -> int:
        return sum(1 for e in self.assignment.values() if e == expert_id)


def check_registry(registry: ExpertRegistry, u_max: int | None = None) -> None:
    """Raise if assignment totality, id freshness, or capacity is violated."""
    for party_id, expert_id in registry.assignment.items():
        if expert_id not in registry.experts:
            raise AssertionError(f"party {party_id} assigned to dead expert {expert_id}")
    if registry.experts and registry.next_id <= max(registry.experts):
        raise AssertionError("next_id must exceed every live expert id")
    if u_max is not None:
        for expert_id in registry.experts:
            if registry.assigned_count(expert_id) > u_max:
                raise AssertionError(f"expert {expert_id} exceeds capacity {u_max}")


def calibrate_thresholds(null_reports: list[PartyReport], p_value: float) -> tuple[float, float]:
    """Nearest-rank (1 - p) quantiles of the null shift scores."""
    if len(null_reports) < 20:
        raise ValueError("calibration needs at least 20 null reports")
    if not 0 < p_value < 1:
        raise ValueError("p_value must lie strictly between 0 and 1")
    q = 1.0 - p_value
    cov = np.array([r.delta_cov for r in null_reports])
    lab = np.array([r.delta_label for r in null_reports])
    return (
        float(np.quantile(cov, q, method="inverted_cdf")),
        float(np.quantile(lab, q, method="inverted_cdf")),
    )


def partition_shifted(
    reports: list[PartyReport], thresholds: Thresholds
) -> tuple[list[PartyReport], list[PartyReport]]:
    """Strict exceedance on either channel flags a party as shifted."""
    shifted, stable = [], []
    for r in reports:
        if r.delta_cov > thresholds.delta_cov or r.delta_label > thresholds.delta_label:
            shifted.append(r)
        else:
            stable.append(r)
    return shifted, stable


def davies_bouldin(points: np.ndarray, labels: np.ndarray) -> float:
    """Davies-Bouldin index with degenerate clusterings scored +inf.

    Any cluster with fewer than 2 members, or a coincident centroid pair,
    disqualifies the candidate. Raw DB rewards shaving singletons off, which
    would fragment groups below the minimum cluster size.
    """
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if len(ids) < 2:
        raise ValueError("Davies-Bouldin needs at least 2 clusters")
    centroids = []
    scatter = []
    for c in ids:
        members = points[labels == c]
        if members.shape[0] < 2:
            return math.inf
        centroid = members.mean(axis=0)
        centroids.append(centroid)
        scatter.append(float(np.linalg.norm(members - centroid, axis=1).mean()))
    centroids = np.array(centroids)
    k = len(ids)
    worst = np.zeros(k)
    for i in range(k):
        for j in range(i + 1, k):
            dist = float(np.linalg.norm(centroids[i] - centroids[j]))
            if dist <= _CENTROID_TOL:
                return math.inf
            ratio = (scatter[i] + scatter[j]) / dist
            worst[i] = max(worst[i], ratio)
            worst[j] = max(worst[j], ratio)
    return float(worst.mean())


def _best_kmeans(points: np.ndarray, k_max: int, rng: np.random.Generator) -> np.ndarray:
    """Labels of the minimum-DB k-means clustering, k searched from 2 up.

    Fewer than 4 points, fewer than 2 distinct points, or all candidates
    degenerate collapse to a single cluster.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    n_distinct = np.unique(points, axis=0).shape[0]
    single = np.zeros(n, dtype=int)
    if n < 4 or n_distinct < 2:
        return single
    best_labels, best_score = None, math.inf
    for k in range(2, min(k_max, n, n_distinct) + 1):
        km = KMeans(n_clusters=k, n_init=10, random_state=int(rng.integers(2**31 - 1)))
        labels = km.fit_predict(points)
        score = davies_bouldin(points, labels)
        if score < best_score:
            best_labels, best_score = labels, score
    if best_labels is None:
        return single
    return best_labels


def cluster_shifted(
    shifted_reports: list[PartyReport],
    rng: np.random.Generator,
    k_max: int = 8,
) -> list[list[PartyReport]]:
    """Group shifted parties by k-means over their profile means.

    Groups come back ordered by their smallest party id, members sorted by
    party id.
    """
    if not shifted_reports:
        raise ValueError("cluster_shifted needs at least one shifted report")
    reports = sorted(shifted_reports, key=lambda r: r.party_id)
    points = np.array([r.profile.mean for r in reports])
    labels = _best_kmeans(points, k_max, rng)
    groups = []
    for c in np.unique(labels):
        groups.append([reports[i] for i in np.flatnonzero(labels == c)])
    groups.sort(key=lambda g: g[0].party_id)
    return groups


def pooled_profile(reports: list[PartyReport]) -> tuple[np.ndarray, np.ndarray]:
    """Source-count-weighted mean and stacked subsamples of a report group."""
    weights = np.array([r.profile.n_source for r in reports], dtype=float)
    means = np.array([r.profile.mean for r in reports])
    mean = (weights[:, None] * means).sum(axis=0) / weights.sum()
    sample = np.vstack([r.profile.sample for r in reports])
    return mean, sample


def pooled_histogram(reports: list[PartyReport]) -> np.ndarray:
    weights = np.array([r.profile.n_source for r in reports], dtype=float)
    hists = np.array([r.label_hist for r in reports])
    return (weights[:, None] * hists).sum(axis=0) / weights.sum()


def match_expert(
    group_sample: np.ndarray,
    registry: ExpertRegistry,
    epsilon_match: float,
    kernel: KernelSpec,
    group_ids: list[int] | None = None,
    u_max: int | None = None,
) -> int | None:
    """Closest expert by squared MMD to its signature sample, if within tolerance.

    Ties go to the lowest expert id. With bounded capacity, experts whose
    prospective assigned count would overflow are skipped.
    """
    if not registry.experts:
        raise ValueError("match_expert needs a nonempty registry")
    group_set = set(group_ids or [])
    best_id, best_score = None, math.inf
    for expert_id in sorted(registry.experts):
        if u_max is not None and group_set:
            kept = sum(
                1
                for p, e in registry.assignment.items()
                if e == expert_id and p not in group_set
            )
            if kept + len(group_set) > u_max:
                continue
        score = mmd_squared(group_sample, registry.experts[expert_id].signature_sample, kernel)
        if score < best_score:
            best_id, best_score = expert_id, score
    if best_id is None or best_score > epsilon_match:
        return None
    return best_id


def _reservoir_merge(
    old: np.ndarray, new: np.ndarray, cap: int, rng: np.random.Generator | None
) -> np.ndarray:
    merged = np.vstack([old, new])
    if merged.shape[0] <= cap:
        return merged
    if rng is None:
        raise ValueError("rng required to cap a merged signature sample")
    idx = np.sort(rng.choice(merged.shape[0], size=cap, replace=False))
    return merged[idx]


def update_latent_memory(
    expert: ExpertRecord,
    group_mean: np.ndarray,
    group_sample: np.ndarray,
    ema_beta: float,
    m_signature: int = 256,
    rng: np.random.Generator | None = None,
) -> ExpertRecord:
    """EMA the signature toward the group mean; reservoir-merge the samples."""
    group_mean = np.asarray(group_mean, dtype=float)
    group_sample = np.asarray(group_sample, dtype=float)
    if group_mean.shape != expert.memory_signature.shape:
        raise ValueError("group mean dimension must match the expert signature")
    if group_sample.ndim != 2 or group_sample.shape[1] != group_mean.shape[0]:
        raise ValueError("group sample columns must match the signature dimension")
    if not 0 <= ema_beta <= 1:
        raise ValueError("ema_beta must lie in [0, 1]")
    signature = ema_beta * expert.memory_signature + (1.0 - ema_beta) * group_mean
    sample = _reservoir_merge(expert.signature_sample, group_sample, m_signature, rng)
    return replace(expert, memory_signature=signature, signature_sample=sample)


def flips_select(
    group: list[tuple[int, np.ndarray]],
    fraction: float,
    rng: np.random.Generator,
) -> list[int]:
    """Label-balanced cohort: cluster histograms, then round-robin across clusters.

    Budget is ceil(fraction * n); every nonempty cluster contributes at least
    one party when the budget allows. Returns sorted party ids.
    """
    if not group:
        raise ValueError("flips_select needs a nonempty group")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = len(group)
    budget = math.ceil(fraction * n)
    hists = np.array([np.asarray(h, dtype=float) for _, h in group])
    labels = _best_kmeans(hists, 5, rng)
    clusters: dict[int, list[int]] = {}
    for (party_id, _), c in zip(group, labels):
        clusters.setdefault(int(c), []).append(party_id)
    ordered = sorted(clusters.values(), key=min)
    queues = [list(rng.permutation(np.array(sorted(c)))) for c in ordered]
    selected: list[int] = []
    while len(selected) < budget:
        drew = False
        for queue in queues:
            if queue and len(selected) < budget:
                selected.append(int(queue.pop()))
                drew = True
        if not drew:
            break
    return sorted(selected)


def train_expert(
    expert: ExpertRecord,
    cohort_ids: list[int],
    datasets: Datasets,
    train_cfg: TrainConfig,
    rounds: int,
    seed: int,
    window_index: int,
    round_offset: int = 0,
) -> ExpertRecord:
    """Federated rounds over a fixed cohort, weights = local sample counts."""
    if not cohort_ids:
        raise ValueError("train_expert needs a nonempty cohort")
    params = expert.params
    for r in range(rounds):
        updates = []
        for party_id in sorted(cohort_ids):
            x, y = datasets[party_id]
            rng = substream(
                seed, TRAIN_DOMAIN, window_index, round_offset + r, party_id, expert.expert_id
            )
            updates.append((local_train(params, x, y, train_cfg, rng), float(len(y))))
        params = fed_aggregate(updates)
    return replace(expert, params=params)


def create_expert(
    registry: ExpertRegistry,
    base: ModelParams,
    group: list[PartyReport],
    m_signature: int = 256,
    rng: np.random.Generator | None = None,
    u_max: int | None = None,
) -> tuple[ExpertRegistry, int]:
    """Clone the base model into a fresh expert seeded with the group's profile.

    With bounded capacity only the lowest u_max party ids join; overflow
    parties keep their previous experts.
    """
    if not group:
        raise ValueError("create_expert needs a nonempty group")
    group = sorted(group, key=lambda r: r.party_id)
    if u_max is not None and len(group) > u_max:
        group = group[:u_max]
    mean, sample = pooled_profile(group)
    if sample.shape[0] > m_signature:
        if rng is None:
            raise ValueError("rng required to cap the pooled signature sample")
        idx = np.sort(rng.choice(sample.shape[0], size=m_signature, replace=False))
        sample = sample[idx]
    expert_id = registry.next_id
    registry.next_id += 1
    registry.experts[expert_id] = ExpertRecord(
        expert_id=expert_id,
        params=ModelParams(base.shapes, base.flat.copy()),
        memory_signature=mean,
        signature_sample=sample,
        agg_label_hist=pooled_histogram(group),
        created_window=group[0].window_index,
    )
    for report in group:
        registry.assignment[report.party_id] = expert_id
    return registry, expert_id


def signal_local_finetune(
    registry: ExpertRegistry,
    group: list[PartyReport],
    datasets: Datasets,
    train_cfg: TrainConfig,
    seed: int,
    window_index: int,
) -> dict[int, ModelParams]:
    """Personalize small groups locally; the registry is left untouched."""
    personalized: dict[int, ModelParams] = {}
    for report in sorted(group, key=lambda r: r.party_id):
        party_id = report.party_id
        expert = registry.experts[registry.assignment[party_id]]
        x, y = datasets[party_id]
        rng = substream(seed, TRAIN_DOMAIN, window_index, party_id)
        personalized[party_id] = local_train(expert.params, x, y, train_cfg, rng)
    return personalized


def _merge_similarity(a: ExpertRecord, b: ExpertRecord, base: ModelParams) -> float:
    """Redundancy score for a pair of experts.

    Identical parameter vectors are fully redundant. Otherwise similarity is
    the cosine of the two fine-tune offsets from the shared base model; the
    base component common to every expert would swamp a raw-parameter cosine
    and make all descendants look alike.
    """
    if np.array_equal(a.params.flat, b.params.flat):
        return 1.0
    da = a.params.flat - base.flat
    db = b.params.flat - base.flat
    if np.linalg.norm(da) == 0.0 or np.linalg.norm(db) == 0.0:
        return -1.0
    return cosine_similarity(da, db)


def consolidate_experts(
    registry: ExpertRegistry,
    tau_merge: float,
    base: ModelParams,
    m_signature: int = 256,
    rng: np.random.Generator | None = None,
    u_max: int | None = None,
) -> ExpertRegistry:
    """Iteratively merge the most-similar expert pair while similarity > tau.

    The survivor keeps the lower id; parameters, signatures, and label
    histograms average with assigned-party-count weights (equal when both
    counts are zero). Pairs whose combined load would overflow a bounded
    capacity are skipped.
    """
    while len(registry.experts) > 1:
        ids = sorted(registry.experts)
        best_pair, best_cos = None, tau_merge
        for i, low in enumerate(ids):
            for high in ids[i + 1 :]:
                if u_max is not None:
                    combined = registry.assigned_count(low) + registry.assigned_count(high)
                    if combined > u_max:
                        continue
                cos = _merge_similarity(
                    registry.experts[low], registry.experts[high], base
                )
                if cos > best_cos:
                    best_pair, best_cos = (low, high), cos
        if best_pair is None:
            break
        low, high = best_pair
        keep, drop = registry.experts[low], registry.experts[high]
        w_keep = float(registry.assigned_count(low))
        w_drop = float(registry.assigned_count(high))
        if w_keep == 0 and w_drop == 0:
            w_keep = w_drop = 1.0
        total = w_keep + w_drop
        flat = keep.params.flat + (w_drop / total) * (drop.params.flat - keep.params.flat)
        signature = keep.memory_signature + (w_drop / total) * (
            drop.memory_signature - keep.memory_signature
        )
        hist = keep.agg_label_hist + (w_drop / total) * (drop.agg_label_hist - keep.agg_label_hist)
        sample = _reservoir_merge(keep.signature_sample, drop.signature_sample, m_signature, rng)
        registry.experts[low] = replace(
            keep,
            params=ModelParams(keep.params.shapes, flat),
            memory_signature=signature,
            signature_sample=sample,
            agg_label_hist=hist,
        )
        for party_id in registry.parties_of(high):
            registry.assignment[party_id] = low
        del registry.experts[high]
    return registry


@dataclass
class AggregatorState:
    registry: ExpertRegistry
    base_params: ModelParams
    seed: int
    kernel: KernelSpec = KernelSpec()
    m_signature: int = 256


@dataclass
class WindowOutcome:
    state: AggregatorState
    window_index: int
    shifted_ids: list[int]
    stable_ids: list[int]
    groups: list[list[int]]
    created_ids: list[int]
    matched_ids: list[int]
    personalized: dict[int, ModelParams]
    # which expert served each reporting party during this window's training
    # (captured before consolidation), and each trained expert's parameter
    # snapshot after every round, for per-round evaluation by the harness
    served: dict[int, int] = field(default_factory=dict)
    round_params: dict[int, dict[int, ModelParams]] = field(default_factory=dict)


def run_window(
    state: AggregatorState,
    reports: list[PartyReport],
    datasets: Datasets,
    thresholds: Thresholds,
    train_cfg: TrainConfig,
    rounds: int = 15,
) -> WindowOutcome:
    """One adaptation window over the full party population.

    Order: partition, cluster, per-group match/create + balanced training
    (small groups fine-tune locally), stable-expert refresh, consolidation,
    then latent-memory updates.
    """
    if not reports:
        raise ValueError("run_window needs at least one report")
    reports = sorted(reports, key=lambda r: r.party_id)
    w = reports[0].window_index
    if any(r.window_index != w for r in reports):
        raise ValueError("all reports must come from the same window")
    registry = state.registry
    seed = state.seed

    shifted, stable = partition_shifted(reports, thresholds)
    shifted_ids = [r.party_id for r in shifted]
    stable_ids = [r.party_id for r in stable]
    groups: list[list[PartyReport]] = []
    if shifted:
        groups = cluster_shifted(shifted, substream(seed, COHORT_DOMAIN, w, 0))
        # label skew dominates profile geometry, so one cluster can span
        # parties whose feature regimes differ (they sit on different
        # experts). Splitting clusters by current expert keeps each training
        # group feature-pure; same-regime splinters still reunite through
        # signature matching below.
        refined: list[list[PartyReport]] = []
        for group in groups:
            by_origin: dict[int, list[PartyReport]] = {}
            for report in group:
                by_origin.setdefault(registry.assignment[report.party_id], []).append(report)
            refined.extend(by_origin[eid] for eid in sorted(by_origin))
        groups = refined

    created_ids: list[int] = []
    matched_ids: list[int] = []
    personalized: dict[int, ModelParams] = {}
    round_params: dict[int, dict[int, ModelParams]] = {}
    trained: set[int] = set()
    for g_index, group in enumerate(groups):
        group_ids = [r.party_id for r in group]
        if len(group) < thresholds.gamma_min_cluster:
            personalized.update(
                signal_local_finetune(registry, group, datasets, train_cfg, seed, w)
            )
            continue
        _, sample = pooled_profile(group)
        expert_id = match_expert(
            sample,
            registry,
            thresholds.match_epsilon(),
            state.kernel,
            group_ids=group_ids,
            u_max=thresholds.u_max,
        )
        if expert_id is None:
            _, expert_id = create_expert(
                registry,
                state.base_params,
                group,
                m_signature=state.m_signature,
                rng=substream(seed, MEMORY_DOMAIN, w, 0, g_index),
                u_max=thresholds.u_max,
            )
            created_ids.append(expert_id)
        else:
            matched_ids.append(expert_id)
            for party_id in group_ids:
                registry.assignment[party_id] = expert_id
        # train over every party currently assigned to the expert, not just
        # the shifted group: a matched expert otherwise drifts toward the
        # group's pooled label mix and unlearns its unshifted members
        hist_of = {r.party_id: r.label_hist for r in reports}
        active = [
            p
            for p in sorted(hist_of)
            if registry.assignment.get(p) == expert_id and p in datasets
        ]
        expert = registry.experts[expert_id]
        # expert members' label priors can differ wildly; partial cohorts then
        # swing the average between disjoint local optima round to round, so
        # every member trains every round (the objective stays fixed)
        for r_i in range(rounds):
            cohort = flips_select(
                [(p, hist_of[p]) for p in active],
                1.0,
                substream(seed, COHORT_DOMAIN, w, 1, g_index, r_i),
            )
            expert = train_expert(
                expert, cohort, datasets, train_cfg, 1, seed, w, round_offset=r_i
            )
            round_params.setdefault(expert_id, {})[r_i] = expert.params
        registry.experts[expert_id] = expert
        trained.add(expert_id)

    # one refresh round keeps untouched experts tracking gradual drift; a
    # partial cohort would instead drag the expert toward whichever members
    # it sampled, compounding window over window
    stable_by_expert: dict[int, list[PartyReport]] = {}
    for report in stable:
        stable_by_expert.setdefault(registry.assignment[report.party_id], []).append(report)
    for expert_id in sorted(stable_by_expert):
        if expert_id in trained:
            continue
        members = stable_by_expert[expert_id]
        cohort = flips_select(
            [(r.party_id, r.label_hist) for r in members],
            1.0,
            substream(seed, COHORT_DOMAIN, w, 2, expert_id),
        )
        registry.experts[expert_id] = train_expert(
            registry.experts[expert_id], cohort, datasets, train_cfg, 1, seed, w
        )
        round_params.setdefault(expert_id, {})[0] = registry.experts[expert_id].params

    served = {r.party_id: registry.assignment[r.party_id] for r in reports}

    consolidate_experts(
        registry,
        thresholds.tau_merge,
        state.base_params,
        m_signature=state.m_signature,
        rng=substream(seed, MEMORY_DOMAIN, w, 1, 0),
        u_max=thresholds.u_max,
    )

    by_expert: dict[int, list[PartyReport]] = {}
    for report in reports:
        by_expert.setdefault(registry.assignment[report.party_id], []).append(report)
    for expert_id in sorted(by_expert):
        members = by_expert[expert_id]
        mean, sample = pooled_profile(members)
        updated = update_latent_memory(
            registry.experts[expert_id],
            mean,
            sample,
            thresholds.ema_beta,
            m_signature=state.m_signature,
            rng=substream(seed, MEMORY_DOMAIN, w, expert_id),
        )
        registry.experts[expert_id] = replace(updated, agg_label_hist=pooled_histogram(members))

    return WindowOutcome(
        state=state,
        window_index=w,
        shifted_ids=shifted_ids,
        stable_ids=stable_ids,
        groups=[[r.party_id for r in g] for g in groups],
        created_ids=created_ids,
        matched_ids=matched_ids,
        personalized=personalized,
        served=served,
        round_params=round_params,
    )


def bootstrap(
    datasets: Datasets,
    shapes: ModelShapes,
    train_cfg: TrainConfig,
    rounds: int,
    seed: int,
    participant_fraction: float = 0.2,
    kernel: KernelSpec = KernelSpec(),
    m_profile: int = 64,
    m_signature: int = 256,
    calibration_splits: int = 3,
    theta0: ModelParams | None = None,
) -> tuple[ModelParams, ExpertRegistry, list[PartyReport]]:
    """Burn-in: train the base model collaboratively, then seed the registry.

    Returns the trained base parameters, a one-expert registry covering
    every party, and shift-free reports for threshold calibration.
    """
    if not datasets:
        raise ValueError("bootstrap needs at least one party")
    ids = sorted(datasets)
    params = theta0
    if params is None:
        params = init_model(shapes, int(substream(seed, INIT_DOMAIN).integers(2**31 - 1)))
    hists = [
        (p, label_histogram(datasets[p][1], shapes.n_classes)) for p in ids
    ]
    for r in range(rounds):
        cohort = flips_select(hists, participant_fraction, substream(seed, COHORT_DOMAIN, 0, 3, r))
        updates = []
        for party_id in cohort:
            x, y = datasets[party_id]
            rng = substream(seed, TRAIN_DOMAIN, 0, r, party_id, 0)
            updates.append((local_train(params, x, y, train_cfg, rng), float(len(y))))
        params = fed_aggregate(updates)

    profiles = []
    null_reports: list[PartyReport] = []
    for party_id in ids:
        x, y = datasets[party_id]
        emb = embed(params, x)
        profiles.append((len(y), emb.mean(axis=0), emb))
        null_reports.extend(
            calibration_reports(
                party_id,
                x,
                y,
                params,
                kernel,
                m_profile,
                calibration_splits,
                substream(seed, CALIBRATION_DOMAIN, party_id),
            )
        )
    weights = np.array([n for n, _, _ in profiles], dtype=float)
    mean = (weights[:, None] * np.array([m for _, m, _ in profiles])).sum(axis=0) / weights.sum()
    pooled = np.vstack([e for _, _, e in profiles])
    if pooled.shape[0] > m_signature:
        pick = substream(seed, MEMORY_DOMAIN, 0, 0)
        pooled = pooled[np.sort(pick.choice(pooled.shape[0], size=m_signature, replace=False))]
    hist = np.concatenate([datasets[p][1] for p in ids])
    registry = ExpertRegistry(
        experts={
            0: ExpertRecord(
                expert_id=0,
                params=params,
                memory_signature=mean,
                signature_sample=pooled,
                agg_label_hist=label_histogram(hist, shapes.n_classes),
                created_window=0,
            )
        },
        assignment={p: 0 for p in ids},
        next_id=1,
    )
    return params, registry, null_reports


def registry_to_json(registry: ExpertRegistry) -> dict:
    """Snapshot for the per-window expert-distribution dumps."""
    return {
        "next_id": registry.next_id,
        "experts": [
            {
                "expert_id": expert_id,
                "created_window": record.created_window,
                "assigned_parties": registry.parties_of(expert_id),
                "signature_mean": [float(v) for v in record.memory_signature],
            }
            for expert_id, record in sorted(registry.experts.items())
        ],
    }


def registry_nbytes(registry: ExpertRegistry) -> int:
    """Byte accounting for the aggregator-side state (arrays plus id maps)."""
    total = 0
    for record in registry.experts.values():
        total += record.params.flat.nbytes
        total += record.memory_signature.nbytes
        total += record.signature_sample.nbytes
        total += record.agg_label_hist.nbytes
    total += 16 * len(registry.assignment)
    return total
