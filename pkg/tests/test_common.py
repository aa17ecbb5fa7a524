from pathlib import Path

import pytest

from src.entropic_mot.common import (
    GridStage,
    NewtonConfig,
    RepairConfig,
    ScheduleConfig,
    SolverSettings,
    SweepLog,
    SweepRecord,
    parallel_map,
)


def test_defaults():
    settings = SolverSettings()
    assert settings.entropic.h_tol == 1e-11
    assert settings.entropic.truncation_factor == 1e-7
    assert settings.newton.c1 == 1e-4 and settings.newton.c2 == 0.9
    assert settings.newton.a_weights == "nu2"
    assert settings.schedule.stage_grad_tol == 1e-2
    assert settings.semidual.c0 == 1.0


def test_settings_file_roundtrip(tmp_path):
    path = tmp_path / "settings.yaml"
    path.write_text(
        "newton:\n  alpha: 0.0\nschedule:\n  eps_target: 0.01\n  grid_1d: [[1.0, 5], [0.1, 20]]\nruntime:\n  threads: 3\n"
    )
    settings = SolverSettings.from_file(path)
    assert settings.newton.alpha == 0.0
    assert settings.schedule.eps_target == 0.01
    assert settings.schedule.grid_1d == [GridStage(1.0, 5), GridStage(0.1, 20)]
    assert settings.runtime.threads == 3
    assert settings.entropic.max_h_iters == 50


def test_shipped_settings_file_loads():
    settings = SolverSettings.from_file(Path(__file__).parents[1] / "config" / "solver_settings.yaml")
    assert settings.to_mapping() == SolverSettings().to_mapping()


def test_unknown_key_rejected():
    with pytest.raises(ValueError):
        SolverSettings.from_mapping({"newton": {"alpha_max": 1.0}})


@pytest.mark.parametrize("changes", [{"c1": 0.95}, {"a_weights": "mu"}, {"anchor": "mean"}, {"forcing_cap": 0.0}])
def test_newton_config_validation(changes):
    with pytest.raises(ValueError):
        NewtonConfig(**changes)


def test_repair_alphas_must_decrease():
    with pytest.raises(ValueError):
        RepairConfig(alphas=[0.1, 0.2])


def test_epsilons_halve_and_clamp():
    assert ScheduleConfig(eps_start=1.0, eps_target=0.2).epsilons() == [1.0, 0.5, 0.25, 0.2]
    assert ScheduleConfig(eps_start=0.1, eps_target=0.1).epsilons() == [0.1]


def test_grid_size_follows_thresholds():
    schedule = ScheduleConfig()
    assert schedule.grid_size(1.0, 1) == 10
    assert schedule.grid_size(0.05, 1) == 40
    assert schedule.grid_size(4e-4, 1) == 1000
    assert schedule.grid_size(1e-3, 2) == 80


def test_sweep_log_extend_offsets_iterations():
    first = SweepLog([SweepRecord(1, 0.1, 0.5, 2.0), SweepRecord(2, 0.2, 0.25, 1.5)])
    second = SweepLog([SweepRecord(1, 0.05, 0.1, 1.6)])
    first.extend(second)
    assert [r.iteration for r in first.records] == [1, 2, 3]
    assert first.last_error == 0.1
    assert first.monotone_violations() == 1


def test_parallel_map_keeps_order():
    assert parallel_map(lambda v: v * v, range(20), threads=4) == [v * v for v in range(20)]
