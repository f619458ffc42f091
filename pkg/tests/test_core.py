import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from torta.core import (
    DEFAULT_HORIZON,
    SLOT_SECONDS,
    Config,
    ConfigError,
    HistoryFeatures,
    SystemState,
    Task,
    TaskClass,
    Weights,
    check_allocation,
    child_rng,
    is_row_stochastic,
    load_config,
    normalize_rows,
    seeded_rng,
)

from pathlib import Path

GOLDEN = Path(__file__).parent / "golden"


def write(tmp_path, text):
    p = tmp_path / "cfg.ini"
    p.write_text(text)
    return p


def test_minimal_config_fills_defaults(tmp_path):
    cfg = load_config(write(tmp_path, "[weights]\nalpha = 1.0\nbeta = 1.0\n"))
    assert cfg.weights.alpha == 1.0 and cfg.weights.beta == 1.0
    assert cfg.weights == Weights(alpha=1.0, beta=1.0)
    assert cfg.horizon == DEFAULT_HORIZON == 480
    assert cfg.slot_seconds == SLOT_SECONDS == 45.0
    assert cfg.training["eps_target"] == 0.15 and cfg.training["s_target"] == 2.5


def test_q_max_zero_rejected(tmp_path):
    with pytest.raises(ConfigError, match="q_max must be positive"):
        load_config(write(tmp_path, "[weights]\nq_max = 0\n"))


def test_negative_weight_rejected(tmp_path):
    with pytest.raises(ConfigError, match="non-negative"):
        load_config(write(tmp_path, "[weights]\nalpha = -1\n"))


def test_parse_error_reports_line(tmp_path):
    with pytest.raises(ConfigError, match="line 3"):
        load_config(write(tmp_path, "[weights]\nalpha = 1\nthis line is junk\n"))


def test_unknown_keys_and_sections(tmp_path):
    with pytest.raises(ConfigError, match="unknown weight"):
        load_config(write(tmp_path, "[weights]\nalpah = 1\n"))
    with pytest.raises(ConfigError, match="unknown section"):
        load_config(write(tmp_path, "[wieghts]\nalpha = 1\n"))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.ini")


def test_full_scale_run_section(tmp_path):
    cfg = load_config(write(tmp_path, "[run]\nhorizon = 480\nslot_seconds = 45\n"))
    assert cfg.horizon == 480 and cfg.slot_seconds == 45.0


def test_overrides_win_over_file(tmp_path):
    p = write(tmp_path, "[weights]\nalpha = 1.0\n[workload]\nrates = 1,2\n[topology]\nname = toy4\n")
    cfg = load_config(p, {"weights.alpha": "3", "training.epochs": "7", "workload.stationary": "true"})
    assert cfg.weights.alpha == 3.0
    assert cfg.training["epochs"] == 7
    assert cfg.workload.stationary is True
    assert cfg.workload.rates == (1.0, 2.0)
    assert cfg.topology == "toy4"


def test_failure_section(tmp_path):
    cfg = load_config(write(tmp_path, "[failure]\nregion = 2\nstart_slot = 10\nduration_slots = 5\n"))
    assert len(cfg.failures) == 1
    ev = cfg.failures[0]
    assert (ev.region, ev.start_slot, ev.duration_slots, ev.severity) == (2, 10, 5, 1.0)
    assert ev.active(10) and ev.active(14) and not ev.active(15)


def test_seeded_rng_golden():
    draws = seeded_rng(42).random(3)
    golden = json.loads((GOLDEN / "rng_seed42.json").read_text())
    assert [float(x).hex() for x in draws] == golden["first3_hex"]


def test_seeded_rng_streams():
    assert not np.array_equal(seeded_rng(1).random(5), seeded_rng(2).random(5))
    assert np.array_equal(seeded_rng(7).random(5), seeded_rng(7).random(5))
    assert np.array_equal(child_rng(3, 4).random(4), child_rng(3, 4).random(4))
    assert not np.array_equal(child_rng(3, 4).random(4), child_rng(3, 5).random(4))


def test_task_invariants():
    Task(1, 0, 1.0, 1.0, 5, TaskClass.Lightweight, 5)
    with pytest.raises(ValueError):
        Task(1, 0, 0.0, 1.0, 5, TaskClass.Lightweight, 0)
    with pytest.raises(ValueError):
        Task(1, 0, 1.0, -1.0, 5, TaskClass.Lightweight, 0)
    with pytest.raises(ValueError):
        Task(1, 0, 1.0, 1.0, 3, TaskClass.Lightweight, 4)


def test_row_stochastic_check():
    assert is_row_stochastic(np.eye(3))
    assert is_row_stochastic([[0.5, 0.5], [0.25, 0.75]])
    assert not is_row_stochastic([[0.5, 0.6], [0.0, 1.0]])
    assert not is_row_stochastic([[1.5, -0.5], [0.0, 1.0]])
    assert not is_row_stochastic(np.ones((2, 3)) / 3)
    with pytest.raises(ValueError):
        check_allocation(np.zeros((2, 2)))


@settings(max_examples=200, deadline=None)
@given(arrays(float, st.tuples(st.integers(1, 8), st.integers(1, 8)).map(lambda t: (t[0], t[0])),
              elements=st.floats(0, 1e6, allow_nan=False)))
def test_normalize_rows_always_row_stochastic(x):
    assert is_row_stochastic(normalize_rows(x))


def _state(r=2):
    hist = HistoryFeatures(r)
    rng = np.random.default_rng(0)
    for t in range(3):
        hist.push(rng.random(r), rng.integers(0, 9, r), rng.integers(0, 9, r), t)
    lat = np.array([[0.0, 1.0 / 3.0], [1.0 / 3.0, 0.0]])
    return SystemState(5, rng.random(r), np.array([1.0, 2.0]), lat, hist, np.array([0.1, 0.7]),
                       np.array([[0.3, 0.7], [0.6, 0.4]]))


def test_system_state_round_trip_bit_exact():
    s = _state()
    s.validate()
    back = SystemState.from_json(s.to_json())
    assert back.to_json() == s.to_json()
    for name in ("utilization", "queues", "latency", "forecast", "prev_action"):
        assert np.array_equal(getattr(back, name), getattr(s, name))
    for (u, q, a), (u2, q2, a2) in zip(s.history.window, back.history.window):
        assert np.array_equal(u, u2) and np.array_equal(q, q2) and np.array_equal(a, a2)


def test_history_window_and_time_encoding():
    h = HistoryFeatures(2)
    for t in range(7):
        h.push(np.zeros(2), np.zeros(2), np.full(2, t), t)
    assert h.warmed and len(h.window) == 5
    assert [int(w[2][0]) for w in h.window] == [2, 3, 4, 5, 6]
    assert np.isclose(np.linalg.norm(h.time_encoding), 1.0)
