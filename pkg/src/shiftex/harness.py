"""End-to-end experiment orchestration, baseline methods, and window metrics.

A run generates every party's windowed stream once, bootstraps a shared
base model, then replays the same data through each method: the adaptive
expert pipeline, plain federated averaging, and proximal federated
averaging. Per-round aggregate accuracy feeds the three window metrics
(drop, recovery time, max), and everything is reproducible byte-for-byte
from (config, seed).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .aggregator import (
    AggregatorState,
    ExpertRegistry,
    Thresholds,
    bootstrap,
    calibrate_thresholds,
    registry_to_json,
    run_window,
)
from .models import (
    ModelParams,
    ModelShapes,
    TrainConfig,
    evaluate,
    fed_aggregate,
    init_model,
    local_train,
)
from .party import PartyReport, detect_shift
from .stats import KernelSpec
from .streams import (
    COHORT_DOMAIN,
    PROFILE_DOMAIN,
    SPLIT_DOMAIN,
    TRAIN_DOMAIN,
    CovariateTransform,
    GaussianNoise,
    PartyStream,
    Rotation,
    ShiftEvent,
    ShiftSchedule,
    apply_schedule,
    make_default_mixture,
    sample_window,
    schedule_rng,
    substream,
)

METHOD_KINDS = ("shiftex", "fedavg_global", "fedprox_global")

# baseline methods key their train/cohort substreams with a tag far above
# any plausible expert id so they never collide with aggregator streams
_BASELINE_TAG = {"fedavg_global": 1000, "fedprox_global": 1001}


@dataclass(frozen=True)
class MethodSpec:
    """One competitor in a run; None fields fall back to the run config."""

    kind: str
    train_cfg: TrainConfig | None = None
    thresholds: Thresholds | None = None

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}, expected one of {METHOD_KINDS}")
        if (
            self.kind == "fedprox_global"
            and self.train_cfg is not None
            and self.train_cfg.prox_coefficient <= 0
        ):
            raise ValueError("fedprox_global requires prox_coefficient > 0")
        if self.kind != "shiftex" and self.thresholds is not None:
            raise ValueError("thresholds only apply to the shiftex method")


@dataclass(frozen=True)
class WindowMetrics:
    window_index: int
    accuracy_drop: float
    recovery_time: int | str
    max_accuracy: float
    per_round_accuracy: tuple[float, ...]

    def __post_init__(self):
        if not self.per_round_accuracy:
            raise ValueError("per_round_accuracy must be nonempty")
        if self.max_accuracy != max(self.per_round_accuracy):
            raise ValueError("max_accuracy must equal max(per_round_accuracy)")


def accuracy_drop(pre_shift_acc: float, post_shift_series) -> float:
    """Immediate decline: pre-shift accuracy minus the first post-shift point."""
    series = [float(v) for v in post_shift_series]
    if not series:
        raise ValueError("post-shift series must be nonempty")
    return float(pre_shift_acc) - series[0]


def recovery_time(pre_shift_acc: float, post_shift_series, horizon: int) -> int | str:
    """1-based first round regaining 95% of pre-shift accuracy, else '>horizon'."""
    series = [float(v) for v in post_shift_series]
    if not series:
        raise ValueError("post-shift series must be nonempty")
    target = 0.95 * float(pre_shift_acc)
    for i, v in enumerate(series, start=1):
        if v >= target:
            return i
    return f">{horizon}"


def max_accuracy(series) -> float:
    values = [float(v) for v in series]
    if not values:
        raise ValueError("series must be nonempty")
    return max(values)


def recovery_rank(value: int | str, horizon: int) -> int:
    """Total order for recovery times: the sentinel sorts after every round."""
    return horizon + 1 if isinstance(value, str) else int(value)


def window_metrics(
    window_index: int, pre_shift_acc: float, series, horizon: int
) -> WindowMetrics:
    series = tuple(float(v) for v in series)
    return WindowMetrics(
        window_index=window_index,
        accuracy_drop=accuracy_drop(pre_shift_acc, series),
        recovery_time=recovery_time(pre_shift_acc, series, horizon),
        max_accuracy=max_accuracy(series),
        per_round_accuracy=series,
    )


def aggregate_accuracy(pairs) -> float:
    """Sample-count-weighted mean of (accuracy, n_samples) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("aggregate_accuracy needs at least one party")
    total = sum(float(n) for _, n in pairs)
    if total <= 0:
        raise ValueError("aggregate weights must sum to a positive count")
    return float(sum(float(a) * float(n) for a, n in pairs) / total)


def default_schedule(
    windows: int, affected_fraction: float = 0.5, label_alpha: float = 0.3
) -> ShiftSchedule:
    """Events at windows 1-4 alternating covariate and label shifts.

    Odd windows apply a feature-space regime change (half turns across
    coordinate planes, plus mild noise); each covariate event installs a
    distinct regime on a disjoint coordinate block, so affected parties
    always face genuinely new feature geometry. Even windows resample label
    priors from Dirichlet(alpha).
    """
    if windows < 1:
        raise ValueError("windows must be >= 1")
    regimes = (
        CovariateTransform(
            (
                Rotation(math.pi, (0, 1)),
                Rotation(math.pi, (2, 3)),
                GaussianNoise(0.1),
            )
        ),
        CovariateTransform(
            (
                Rotation(math.pi, (4, 5)),
                Rotation(math.pi, (6, 7)),
                GaussianNoise(0.1),
            )
        ),
    )
    events = []
    for w in range(1, min(windows, 5)):
        if w % 2 == 1:
            events.append(
                ShiftEvent(
                    window_index=w,
                    affected_fraction=affected_fraction,
                    covariate=regimes[(w - 1) // 2 % len(regimes)],
                )
            )
        else:
            events.append(
                ShiftEvent(
                    window_index=w,
                    affected_fraction=affected_fraction,
                    label_alpha=label_alpha,
                )
            )
    return ShiftSchedule(tuple(events), horizon=windows)


def default_methods() -> tuple[MethodSpec, ...]:
    return (
        MethodSpec("shiftex"),
        MethodSpec("fedavg_global"),
        MethodSpec("fedprox_global"),
    )


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    parties: int = 40
    feature_dim: int = 8
    classes: int = 4
    hidden_dim: int = 16
    windows: int = 5
    samples_per_window: int = 320
    rounds_per_window: int = 15
    bootstrap_rounds: int = 15
    train_fraction: float = 0.8
    participant_fraction: float = 0.2
    mean_scale: float = 0.8
    train_cfg: TrainConfig = TrainConfig(learning_rate=0.5, local_epochs=3, batch_size=32)
    prox_coefficient: float = 0.01
    methods: tuple[MethodSpec, ...] = field(default_factory=default_methods)
    schedule: ShiftSchedule | None = None
    p_value: float = 0.05
    thresholds: Thresholds | None = None
    m_profile: int = 192
    m_signature: int = 256
    calibration_splits: int = 3
    out_dir: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        for name in ("parties", "feature_dim", "classes", "hidden_dim", "windows",
                     "samples_per_window", "rounds_per_window", "bootstrap_rounds",
                     "m_profile", "m_signature", "calibration_splits"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if not 0.0 < self.participant_fraction <= 1.0:
            raise ValueError(
                f"participant_fraction must lie in (0, 1], got {self.participant_fraction}"
            )
        if not 0.0 < self.p_value < 1.0:
            raise ValueError(f"p_value must lie in (0, 1), got {self.p_value}")
        if self.prox_coefficient <= 0:
            raise ValueError(f"prox_coefficient must be > 0, got {self.prox_coefficient}")
        if not self.methods:
            raise ValueError("at least one method is required")
        kinds = [m.kind for m in self.methods]
        if len(set(kinds)) != len(kinds):
            raise ValueError("method kinds must be unique within a run")
        if self.schedule is not None and self.schedule.horizon != self.windows:
            raise ValueError("schedule horizon must equal the window count")

    def resolved_schedule(self) -> ShiftSchedule:
        if self.schedule is not None:
            return self.schedule
        return default_schedule(self.windows)

    def resolved_train_cfg(self, method: MethodSpec) -> TrainConfig:
        cfg = method.train_cfg if method.train_cfg is not None else self.train_cfg
        if method.kind == "fedprox_global" and cfg.prox_coefficient <= 0:
            cfg = replace(cfg, prox_coefficient=self.prox_coefficient)
        return cfg

    def shapes(self) -> ModelShapes:
        return ModelShapes(self.feature_dim, self.hidden_dim, self.classes)


@dataclass
class RunLog:
    config: RunConfig
    thresholds: tuple[float, float]
    null_summary: dict
    metrics_rows: list[tuple]
    window_metrics: dict[str, list[WindowMetrics]]
    registries: dict[int, dict]


WindowDatasets = dict[int, dict[int, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]]


def generate_run_data(config: RunConfig) -> WindowDatasets:
    """Every party's per-window train/test splits under the shift schedule.

    Identical across methods by construction: data and splits depend only on
    (seed, party, window).
    """
    mixture = make_default_mixture(
        config.classes, config.feature_dim, config.seed, mean_scale=config.mean_scale
    )
    ids = list(range(config.parties))
    schedule = config.resolved_schedule()
    data: WindowDatasets = {}
    regimes = None
    for w in range(config.windows):
        regimes = apply_schedule(ids, schedule, w, schedule_rng(config.seed, w), regimes)
        data[w] = {}
        for pid in ids:
            stream = PartyStream(pid, mixture, config.seed)
            reg = regimes[pid]
            x, y = sample_window(
                stream, w, reg.transform, reg.label_alpha,
                n=config.samples_per_window, label_window=reg.label_window,
            )
            n_train = round(config.train_fraction * len(y))
            n_train = min(max(n_train, 1), len(y) - 1)
            order = substream(config.seed, SPLIT_DOMAIN, pid, w).permutation(len(y))
            tr, te = order[:n_train], order[n_train:]
            data[w][pid] = (x[tr], y[tr], x[te], y[te])
    return data


def _test_accuracy(params_of, data_w) -> float:
    pairs = []
    for pid in sorted(data_w):
        _, _, x_te, y_te = data_w[pid]
        pairs.append((evaluate(params_of(pid), x_te, y_te), len(y_te)))
    return aggregate_accuracy(pairs)


def _null_summary(null_reports: list[PartyReport]) -> dict:
    cov = np.array([r.delta_cov for r in null_reports], dtype=float)
    lab = np.array([r.delta_label for r in null_reports], dtype=float)
    notes = {}
    for name, values in (("delta_cov", cov), ("delta_label", lab)):
        notes[name] = {
            "mean": float(values.mean()),
            "std": float(values.std()),
            "max": float(values.max()),
        }
    notes["n_reports"] = len(null_reports)
    return notes


def _run_baseline(
    kind: str,
    cfg: TrainConfig,
    config: RunConfig,
    data: WindowDatasets,
    theta0: ModelParams,
) -> dict[int, list[float]]:
    """Single global model: uniform random cohorts, FedAvg-style rounds."""
    tag = _BASELINE_TAG[kind]
    ids = sorted(data[0])
    k = math.ceil(config.participant_fraction * len(ids))
    params = theta0
    curves: dict[int, list[float]] = {}
    for w in range(1, config.windows):
        series = []
        for r in range(config.rounds_per_window):
            rng = substream(config.seed, COHORT_DOMAIN, w, 4, tag, r)
            cohort = sorted(int(p) for p in rng.choice(np.array(ids), size=k, replace=False))
            updates = []
            for pid in cohort:
                x_tr, y_tr, _, _ = data[w][pid]
                local_rng = substream(config.seed, TRAIN_DOMAIN, w, r, pid, tag)
                updates.append(
                    (local_train(params, x_tr, y_tr, cfg, local_rng), float(len(y_tr)))
                )
            params = fed_aggregate(updates)
            series.append(_test_accuracy(lambda pid: params, data[w]))
        curves[w] = series
    return curves


def _params_at(round_params, eid, r, fallback):
    best_round, best = -1, None
    for r2, p in round_params.get(eid, {}).items():
        if best_round < r2 <= r:
            best_round, best = r2, p
    return best if best is not None else fallback[eid]


def _run_shiftex(
    method: MethodSpec,
    cfg: TrainConfig,
    config: RunConfig,
    data: WindowDatasets,
    theta0: ModelParams,
    registry0: ExpertRegistry,
    thresholds: Thresholds,
    kernel: KernelSpec,
) -> tuple[dict[int, list[float]], dict[int, int], dict[int, dict]]:
    """Adaptive pipeline; returns curves, expert counts, registry snapshots."""
    ids = sorted(data[0])
    registry = ExpertRegistry(
        experts=dict(registry0.experts),
        assignment=dict(registry0.assignment),
        next_id=registry0.next_id,
    )
    state = AggregatorState(
        registry=registry,
        base_params=theta0,
        seed=config.seed,
        kernel=kernel,
        m_signature=config.m_signature,
    )
    prev: dict[int, tuple] = {}
    for pid in ids:
        x_tr, y_tr, _, _ = data[0][pid]
        report = detect_shift(
            pid, 0, None, x_tr, y_tr, theta0, kernel, config.m_profile,
            substream(config.seed, PROFILE_DOMAIN, pid, 0),
        )
        prev[pid] = (report.profile, report.label_hist)

    override: dict[int, ModelParams] = {}  # sticky per-party personalization
    curves: dict[int, list[float]] = {}
    expert_counts: dict[int, int] = {}
    registries: dict[int, dict] = {}
    for w in range(1, config.windows):
        reports = [
            detect_shift(
                pid, w, prev[pid], data[w][pid][0], data[w][pid][1], theta0,
                kernel, config.m_profile,
                substream(config.seed, PROFILE_DOMAIN, pid, w),
            )
            for pid in ids
        ]
        train_sets = {pid: (data[w][pid][0], data[w][pid][1]) for pid in ids}
        fallback = {eid: rec.params for eid, rec in registry.experts.items()}
        outcome = run_window(
            state, reports, train_sets, thresholds, cfg, rounds=config.rounds_per_window
        )
        for group in outcome.groups:
            if len(group) >= thresholds.gamma_min_cluster:
                for pid in group:
                    override.pop(pid, None)
        override.update(outcome.personalized)

        series = []
        for r in range(config.rounds_per_window):
            def serving(pid):
                if pid in override:
                    return override[pid]
                return _params_at(outcome.round_params, outcome.served[pid], r, fallback)

            series.append(_test_accuracy(serving, data[w]))
        curves[w] = series
        expert_counts[w] = len(registry.experts)
        registries[w] = registry_to_json(registry)
        prev = {rep.party_id: (rep.profile, rep.label_hist) for rep in reports}
    return curves, expert_counts, registries


def run_experiment(config: RunConfig) -> RunLog:
    """Bootstrap once, then replay the same windowed data through each method."""
    data = generate_run_data(config)
    kernel = KernelSpec()
    ids = sorted(data[0])
    train0 = {pid: (data[0][pid][0], data[0][pid][1]) for pid in ids}
    theta0, registry0, null_reports = bootstrap(
        train0,
        config.shapes(),
        config.train_cfg,
        config.bootstrap_rounds,
        config.seed,
        participant_fraction=config.participant_fraction,
        kernel=kernel,
        m_profile=config.m_profile,
        m_signature=config.m_signature,
        calibration_splits=config.calibration_splits,
    )
    if config.thresholds is not None:
        thresholds = config.thresholds
    else:
        delta_cov, delta_label = calibrate_thresholds(null_reports, config.p_value)
        # group-pooled matching samples carry far less estimator noise than
        # single-party profiles, so the match radius sits below the detection
        # threshold; at delta_cov it reabsorbs genuinely novel regimes
        thresholds = Thresholds(
            delta_cov=delta_cov,
            delta_label=delta_label,
            epsilon_match=delta_cov / 3.0,
            participant_fraction=config.participant_fraction,
        )

    acc0 = _test_accuracy(lambda pid: theta0, data[0])
    rows: list[tuple] = []
    metrics: dict[str, list[WindowMetrics]] = {}
    registries: dict[int, dict] = {0: registry_to_json(registry0)}
    for method in config.methods:
        cfg = config.resolved_train_cfg(method)
        if method.kind == "fedprox_global" and cfg.prox_coefficient <= 0:
            raise ValueError("fedprox_global requires prox_coefficient > 0")
        if method.kind == "shiftex":
            thr = method.thresholds if method.thresholds is not None else thresholds
            curves, expert_counts, method_registries = _run_shiftex(
                method, cfg, config, data, theta0, registry0, thr, kernel
            )
            registries.update(method_registries)
        else:
            curves = _run_baseline(method.kind, cfg, config, data, theta0)
            expert_counts = {w: 1 for w in range(1, config.windows)}

        rows.append((method.kind, config.seed, 0, 0, acc0, 1))
        metrics[method.kind] = []
        pre = acc0
        for w in range(1, config.windows):
            series = curves[w]
            for r, acc in enumerate(series, start=1):
                rows.append((method.kind, config.seed, w, r, acc, expert_counts[w]))
            metrics[method.kind].append(
                window_metrics(w, pre, series, config.rounds_per_window)
            )
            pre = series[-1]

    return RunLog(
        config=config,
        thresholds=(thresholds.delta_cov, thresholds.delta_label),
        null_summary=_null_summary(null_reports),
        metrics_rows=rows,
        window_metrics=metrics,
        registries=registries,
    )


def calibration_summary(config: RunConfig) -> dict:
    """Bootstrap-only run: calibrated thresholds plus null-score statistics."""
    data = generate_run_data(config)
    ids = sorted(data[0])
    train0 = {pid: (data[0][pid][0], data[0][pid][1]) for pid in ids}
    _, _, null_reports = bootstrap(
        train0,
        config.shapes(),
        config.train_cfg,
        config.bootstrap_rounds,
        config.seed,
        participant_fraction=config.participant_fraction,
        kernel=KernelSpec(),
        m_profile=config.m_profile,
        m_signature=config.m_signature,
        calibration_splits=config.calibration_splits,
    )
    delta_cov, delta_label = calibrate_thresholds(null_reports, config.p_value)
    return {
        "delta_cov": delta_cov,
        "delta_label": delta_label,
        "p_value": config.p_value,
        "null": _null_summary(null_reports),
    }


def write_metrics_csv(path, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["method", "seed", "window", "round", "accuracy", "experts_active"])
        for method, seed, window, round_i, acc, experts in rows:
            writer.writerow([method, seed, window, round_i, f"{acc:.6f}", experts])
    return path


def write_summary_csv(path, window_metrics: dict[str, list[WindowMetrics]]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["method", "window", "drop", "time", "max"])
        for method, entries in window_metrics.items():
            for wm in entries:
                writer.writerow(
                    [
                        method,
                        wm.window_index,
                        f"{wm.accuracy_drop:.6f}",
                        wm.recovery_time,
                        f"{wm.max_accuracy:.6f}",
                    ]
                )
    return path


def write_run(out_dir, log: RunLog) -> list[Path]:
    """Write metrics.csv, summary.csv, and per-window registry snapshots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [
        write_metrics_csv(out / "metrics.csv", log.metrics_rows),
        write_summary_csv(out / "summary.csv", log.window_metrics),
    ]
    for w, snapshot in sorted(log.registries.items()):
        path = out / f"registry_w{w}.json"
        path.write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
        paths.append(path)
    return paths
