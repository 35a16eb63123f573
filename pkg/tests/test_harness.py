"""Tests for window metrics, run orchestration, and output determinism."""

from __future__ import annotations

import numpy as np
import pytest

from shiftex.aggregator import Thresholds
from shiftex.harness import (
    MethodSpec,
    RunConfig,
    WindowMetrics,
    accuracy_drop,
    aggregate_accuracy,
    default_methods,
    default_schedule,
    generate_run_data,
    max_accuracy,
    recovery_rank,
    recovery_time,
    run_experiment,
    window_metrics,
    write_metrics_csv,
    write_run,
    write_summary_csv,
)
from shiftex.models import TrainConfig
from shiftex.streams import ShiftSchedule

# small enough for second-scale end-to-end runs, large enough to train
SMALL = dict(
    parties=10,
    windows=3,
    samples_per_window=120,
    rounds_per_window=5,
    bootstrap_rounds=6,
    m_profile=64,
    m_signature=64,
)


def test_accuracy_drop_worked_examples():
    assert accuracy_drop(0.70, [0.50, 0.60]) == pytest.approx(0.20)
    assert accuracy_drop(0.70, [0.70, 0.10]) == pytest.approx(0.0)
    # a post-shift improvement is a negative drop, not an error
    assert accuracy_drop(0.50, [0.60]) == pytest.approx(-0.10)
    with pytest.raises(ValueError):
        accuracy_drop(0.70, [])


def test_recovery_time_worked_examples():
    assert recovery_time(0.70, [0.50, 0.60, 0.67, 0.70], 15) == 3
    assert recovery_time(0.70, [0.70, 0.50], 15) == 1
    assert recovery_time(0.70, [0.50] * 51, 51) == ">51"
    with pytest.raises(ValueError):
        recovery_time(0.70, [], 15)


def test_recovery_time_boundary_counts():
    # reaching exactly 95% of the pre-shift level counts as recovered
    assert recovery_time(1.0, [0.95], 5) == 1


def test_recovery_rank_orders_sentinel_last():
    assert recovery_rank(1, 15) == 1
    assert recovery_rank(15, 15) == 15
    assert recovery_rank(">15", 15) == 16
    assert recovery_rank(3, 15) < recovery_rank(">15", 15)


def test_max_accuracy_worked_example():
    assert max_accuracy([0.60, 0.65, 0.63]) == pytest.approx(0.65)
    with pytest.raises(ValueError):
        max_accuracy([])


def test_window_metrics_composition():
    wm = window_metrics(2, 0.70, [0.50, 0.60, 0.67], horizon=15)
    assert wm.window_index == 2
    assert wm.accuracy_drop == pytest.approx(0.20)
    assert wm.recovery_time == 3
    assert wm.max_accuracy == pytest.approx(0.67)
    assert wm.per_round_accuracy == (0.50, 0.60, 0.67)


def test_window_metrics_validation():
    with pytest.raises(ValueError):
        WindowMetrics(1, 0.1, 1, 0.9, ())
    with pytest.raises(ValueError):
        WindowMetrics(1, 0.1, 1, max_accuracy=0.5, per_round_accuracy=(0.6, 0.4))


def test_aggregate_accuracy_weighted():
    assert aggregate_accuracy([(1.0, 10), (0.5, 30)]) == pytest.approx(0.625)
    assert aggregate_accuracy([(0.8, 5)]) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        aggregate_accuracy([])
    with pytest.raises(ValueError):
        aggregate_accuracy([(0.5, 0), (0.9, 0)])


def test_method_spec_validation():
    with pytest.raises(ValueError):
        MethodSpec("fedsgd")
    with pytest.raises(ValueError):
        MethodSpec("fedprox_global", train_cfg=TrainConfig(prox_coefficient=0.0))
    with pytest.raises(ValueError):
        MethodSpec("fedavg_global", thresholds=Thresholds(0.1, 0.1))
    MethodSpec("shiftex", thresholds=Thresholds(0.1, 0.1))


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(train_fraction=1.0)
    with pytest.raises(ValueError):
        RunConfig(participant_fraction=0.0)
    with pytest.raises(ValueError):
        RunConfig(classes=1)
    with pytest.raises(ValueError):
        RunConfig(prox_coefficient=0.0)
    with pytest.raises(ValueError):
        RunConfig(methods=(MethodSpec("shiftex"), MethodSpec("shiftex")))
    with pytest.raises(ValueError):
        RunConfig(windows=4, schedule=ShiftSchedule((), horizon=3))
    with pytest.raises(ValueError):
        RunConfig(methods=())


def test_resolved_train_cfg_injects_prox():
    config = RunConfig(prox_coefficient=0.05)
    spec = MethodSpec("fedprox_global")
    assert config.resolved_train_cfg(spec).prox_coefficient == pytest.approx(0.05)
    # the plain methods keep the prox term off
    assert config.resolved_train_cfg(MethodSpec("shiftex")).prox_coefficient == 0.0


def test_default_schedule_alternates():
    schedule = default_schedule(5)
    assert schedule.horizon == 5
    assert [e.window_index for e in schedule.events] == [1, 2, 3, 4]
    for event in schedule.events:
        assert event.affected_fraction == pytest.approx(0.5)
        if event.window_index % 2 == 1:
            assert event.covariate is not None and event.label_alpha is None
        else:
            assert event.covariate is None and event.label_alpha is not None
    # the two covariate events install different regimes
    assert schedule.events[0].covariate != schedule.events[2].covariate


def test_default_schedule_event_budget():
    assert default_schedule(1).events == ()
    assert [e.window_index for e in default_schedule(8).events] == [1, 2, 3, 4]


def test_default_methods_cover_all_kinds():
    kinds = [m.kind for m in default_methods()]
    assert kinds == ["shiftex", "fedavg_global", "fedprox_global"]


def test_generate_run_data_shapes_and_split():
    config = RunConfig(seed=11, **SMALL)
    data = generate_run_data(config)
    assert sorted(data) == list(range(config.windows))
    for w in data:
        assert sorted(data[w]) == list(range(config.parties))
        x_tr, y_tr, x_te, y_te = data[w][0]
        assert len(y_tr) == 96 and len(y_te) == 24
        assert x_tr.shape == (96, config.feature_dim)
        assert x_te.shape == (24, config.feature_dim)
        assert set(np.unique(y_tr)) <= set(range(config.classes))


def test_generate_run_data_deterministic():
    config = RunConfig(seed=11, **SMALL)
    a = generate_run_data(config)
    b = generate_run_data(config)
    for w in a:
        for pid in a[w]:
            for left, right in zip(a[w][pid], b[w][pid]):
                assert np.array_equal(left, right)
    c = generate_run_data(RunConfig(seed=12, **SMALL))
    assert not np.array_equal(a[0][0][0], c[0][0][0])


@pytest.fixture(scope="module")
def small_log():
    return run_experiment(RunConfig(seed=11, **SMALL))


def test_run_experiment_structure(small_log):
    config = small_log.config
    assert sorted(small_log.window_metrics) == sorted(m.kind for m in config.methods)
    for kind, entries in small_log.window_metrics.items():
        assert [m.window_index for m in entries] == [1, 2]
        for m in entries:
            assert len(m.per_round_accuracy) == config.rounds_per_window
    # one bootstrap row plus rounds-per-window rows per method per window
    expected = len(config.methods) * (1 + 2 * config.rounds_per_window)
    assert len(small_log.metrics_rows) == expected
    for method, seed, window, round_i, acc, experts in small_log.metrics_rows:
        assert seed == config.seed
        assert 0.0 <= acc <= 1.0
        assert experts >= 1
    assert small_log.thresholds[0] > 0 and small_log.thresholds[1] > 0
    assert sorted(small_log.registries) == [0, 1, 2]


def test_run_experiment_methods_share_bootstrap(small_log):
    # every method's window-0 row reports the same shared base accuracy
    boot = [row for row in small_log.metrics_rows if row[2] == 0]
    assert len(boot) == 3
    assert len({row[4] for row in boot}) == 1


def test_zero_shift_run_stays_flat():
    config = RunConfig(
        seed=3, schedule=ShiftSchedule((), horizon=SMALL["windows"]), **SMALL
    )
    log = run_experiment(config)
    for w in log.registries:
        assert len(log.registries[w]["experts"]) == 1
    for entries in log.window_metrics.values():
        for m in entries:
            assert m.recovery_time == 1
            assert abs(m.accuracy_drop) < 0.04


def test_write_run_byte_identical(tmp_path):
    config = RunConfig(seed=11, **SMALL)
    first = write_run(tmp_path / "a", run_experiment(config))
    second = write_run(tmp_path / "b", run_experiment(config))
    assert [p.name for p in first] == [p.name for p in second]
    for left, right in zip(first, second):
        assert left.read_bytes() == right.read_bytes()


def test_metrics_csv_format(tmp_path):
    path = write_metrics_csv(tmp_path / "metrics.csv", [("shiftex", 7, 0, 0, 0.8375, 1)])
    assert path.read_text() == (
        "method,seed,window,round,accuracy,experts_active\n"
        "shiftex,7,0,0,0.837500,1\n"
    )


def test_summary_csv_format(tmp_path):
    wm = window_metrics(1, 0.70, [0.50, 0.60], horizon=5)
    path = write_summary_csv(tmp_path / "summary.csv", {"fedavg_global": [wm]})
    assert path.read_text() == (
        "method,window,drop,time,max\n"
        "fedavg_global,1,0.200000,>5,0.600000\n"
    )
