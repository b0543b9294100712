import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from agediff.errors import DirectionError, RangeError, ShapeError, SingularityError
from agediff.schedule import (
    NoiseSchedule,
    StepPlan,
    alpha_bar,
    cfg_combine,
    ddim_invert_step,
    ddim_step,
    make_plan,
    predict_x0,
    q_sample,
)
from tests.oracles import alpha_bar_direct, ddim_move


class FixedTable:
    """Schedule stand-in with a hand-written alpha_bar table."""

    def __init__(self, table):
        self.alpha_bar_table = np.asarray(table, dtype=np.float64)
        self.total_train_steps = len(table) - 1


@pytest.mark.parametrize("kind", ["linear", "scaled_linear"])
def test_alpha_bar_matches_direct_product(kind):
    s = NoiseSchedule(1000, 1e-4, 0.02, kind) if kind == "linear" else NoiseSchedule()
    for t in (0, 1, 17, 500, 999, 1000):
        assert alpha_bar(s, t) == pytest.approx(alpha_bar_direct(kind, 1000, s.beta_min, s.beta_max, t), rel=1e-12)


def test_linear_terminal_value_is_small():
    s = NoiseSchedule(1000, 1e-4, 0.02, "linear")
    assert 0.0 < alpha_bar(s, 1000) < 0.05


@pytest.mark.parametrize("s", [NoiseSchedule(), NoiseSchedule(100, 1e-4, 0.02, "linear")])
def test_alpha_bar_convention_and_monotone(s):
    table = s.alpha_bar_table
    assert table[0] == 1.0
    assert np.all(np.diff(table) < 0)
    assert np.all(table > 0) and np.all(table <= 1)


def test_alpha_bar_range_errors():
    s = NoiseSchedule()
    with pytest.raises(RangeError):
        alpha_bar(s, -1)
    with pytest.raises(RangeError):
        alpha_bar(s, 1001)


def test_schedule_validation_and_roundtrip():
    with pytest.raises(RangeError):
        NoiseSchedule(kind="cosine")
    with pytest.raises(RangeError):
        NoiseSchedule(beta_min=0.1, beta_max=0.01)
    s = NoiseSchedule(500, 1e-4, 0.02, "linear")
    assert NoiseSchedule.from_dict(s.to_dict()) == s


def test_make_plan_default():
    plan = make_plan(NoiseSchedule(), 50)
    assert plan.timestep_list[0] == 1000 and plan.timestep_list[-1] == 20
    assert len(set(plan.timestep_list)) == 50
    assert plan.sampling_pairs()[-1] == (20, 0)
    assert plan.ascending()[:3] == [0, 20, 40]
    assert StepPlan.from_dict(plan.to_dict()) == plan


def test_step_plan_validation():
    with pytest.raises(RangeError):
        StepPlan(2, (10, 20))
    with pytest.raises(RangeError):
        StepPlan(3, (30, 20))
    with pytest.raises(RangeError):
        StepPlan(1, (10,), eta=0.5)
    with pytest.raises(RangeError):
        make_plan(NoiseSchedule(), 0)


def test_q_sample_cases():
    s = NoiseSchedule()
    z0 = torch.randn(2, 3)
    e = torch.randn(2, 3)
    assert torch.equal(q_sample(z0, e, 0, s), z0)
    a = alpha_bar(s, 300)
    assert torch.allclose(q_sample(torch.zeros(2, 3), e, 300, s), math.sqrt(1 - a) * e)
    quarter = FixedTable([1.0, 0.25])
    assert torch.allclose(q_sample(z0, torch.zeros(2, 3), 1, quarter), 0.5 * z0)
    with pytest.raises(ShapeError):
        q_sample(z0, torch.zeros(3), 1, s)


def test_ddim_step_hand_cases():
    table = FixedTable([1.0, 0.81, 0.5, 0.25])
    out = ddim_step(torch.tensor([1.0]), torch.zeros(1), 3, 1, table)
    assert out.item() == pytest.approx(1.8, abs=1e-7)
    e = torch.tensor([0.3, -1.2])
    out = ddim_step(torch.zeros(2), e, 2, 0, table)
    assert torch.allclose(out, -e, atol=1e-7)


def test_invert_step_zero_eps():
    s = NoiseSchedule()
    z = torch.randn(4)
    out = ddim_invert_step(z, torch.zeros(4), 100, 300, s)
    assert torch.allclose(out, math.sqrt(alpha_bar(s, 300) / alpha_bar(s, 100)) * z)


def test_step_directions_enforced():
    s = NoiseSchedule()
    z = torch.zeros(2)
    with pytest.raises(DirectionError):
        ddim_step(z, z, 10, 10, s)
    with pytest.raises(DirectionError):
        ddim_invert_step(z, z, 10, 5, s)


def test_predict_x0_singular():
    with pytest.raises(SingularityError):
        predict_x0(torch.ones(1), torch.ones(1), 0.0)


def test_ddim_matches_numpy_oracle():
    s = NoiseSchedule()
    g = torch.Generator().manual_seed(3)
    z, e = torch.randn(5, generator=g, dtype=torch.float64), torch.randn(5, generator=g, dtype=torch.float64)
    got = ddim_step(z, e, 700, 680, s).numpy()
    want = ddim_move(z.numpy(), e.numpy(), s.alpha_bar_table[700], s.alpha_bar_table[680])
    np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-13)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 999), st.integers(1, 1000), st.integers(0, 2**31 - 1))
def test_round_trip_property(t, gap, seed):
    s = NoiseSchedule()
    u = min(t + gap, 1000)
    if u == t:
        return
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(16, generator=g)
    e = torch.randn(16, generator=g)
    back = ddim_step(ddim_invert_step(z, e, t, u, s), e, u, t, s)
    assert float((back - z).abs().max()) <= 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 1000), st.integers(0, 2**31 - 1))
def test_q_sample_recoverable(t, seed):
    s = NoiseSchedule()
    g = torch.Generator().manual_seed(seed)
    z0 = torch.randn(8, generator=g, dtype=torch.float64)
    e = torch.randn(8, generator=g, dtype=torch.float64)
    a = alpha_bar(s, t)
    rec = (q_sample(z0, e, t, s) - math.sqrt(1 - a) * e) / math.sqrt(a)
    assert float((rec - z0).abs().max()) <= 1e-5


def test_cfg_combine_cases():
    a, b = torch.randn(3), torch.randn(3)
    assert torch.equal(cfg_combine(a, b, 0.0), a)
    assert torch.equal(cfg_combine(a, b, 1.0), b)
    assert cfg_combine(torch.zeros(1), torch.ones(1), 7.5).item() == 7.5
    assert torch.allclose(cfg_combine(a, b, 0.5), cfg_combine(b, a, 0.5))
    with pytest.raises(RangeError):
        cfg_combine(a, b, -1.0)
    with pytest.raises(ShapeError):
        cfg_combine(a, torch.zeros(2), 1.0)
