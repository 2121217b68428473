import pytest
from hypothesis import given
from hypothesis import strategies as st

from golden import GOLDEN, MC, R, S, golden_case, trajectory_from_texts
from streamreason.core import GroundTruth
from streamreason.errors import ConfigError
from streamreason.rewards import (
    RewardConfig,
    extract_binary,
    extract_choice,
    extract_count,
    time_reward,
    total_reward,
)


@pytest.mark.parametrize("case", GOLDEN, ids=[f"g{i}" for i in range(len(GOLDEN))])
def test_golden_rewards(case):
    traj, gt, w, expected = golden_case(case)
    got = total_reward(traj, gt, RewardConfig(tolerance_w=w))
    assert (got.r_format, got.r_time, got.r_acc, got.total) == expected


def test_golden_table_size():
    assert len(GOLDEN) >= 30


def test_time_reward_boundary_is_exactly_zero():
    assert time_reward(7, 4, 3.0) == 0.0
    assert time_reward(1, 4, 3.0) == 0.0
    assert time_reward(None, 4, 3.0) == 0.0
    assert time_reward(4, 4, 3.0) == 1.0


@given(st.integers(1, 50), st.integers(1, 50), st.floats(0.1, 20))
def test_time_reward_range_and_symmetry(t, t_gt, w):
    r = time_reward(t, t_gt, w)
    assert 0.0 <= r <= 1.0
    assert r == time_reward(2 * t_gt - t, t_gt, w) if 2 * t_gt - t >= 1 else True


def test_weights_scale_components():
    traj = trajectory_from_texts([S, R("C")])
    got = total_reward(traj, GroundTruth("B", MC, 2), RewardConfig(format_weight=2.0, acc_weight=5.0))
    assert got.total == 2.0 * 1.0 + 1.0 * 1.0 + 5.0 * 0.0


def test_record_lists_violations():
    traj = trajectory_from_texts([S, "<think>x"])
    rec = total_reward(traj, GroundTruth("B", MC, 2)).to_record()
    assert rec["violations"] == ["chunk 2: UnclosedThink"]
    assert rec["t_resp"] is None and rec["t_gt"] == 2


def test_empty_trajectory_has_zero_format():
    traj = trajectory_from_texts([])
    assert total_reward(traj, GroundTruth("B", MC, 1)).total == 0.0


@pytest.mark.parametrize("kwargs", [{"tolerance_w": 0.0}, {"tolerance_w": -1.0}, {"time_weight": -0.5}])
def test_bad_config(kwargs):
    with pytest.raises(ConfigError):
        RewardConfig(**kwargs)


def test_extractors():
    assert extract_choice("(c)") == "C"
    assert extract_choice("none") is None
    assert extract_binary("No.") == "no"
    assert extract_binary("perhaps") is None
    assert extract_count("I see 12") == 12
    assert extract_count("seven") == 7
    assert extract_count("many") is None
