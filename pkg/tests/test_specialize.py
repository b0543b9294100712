import csv

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from agediff.backbone.dataset import ToyDatasetSpec, generate_toy_dataset
from agediff.backbone.toy import ToyArch, ToyBackbone
from agediff.errors import InputError, RangeError
from agediff.specialize import (
    SpecializationConfig,
    double_prompt_loss,
    double_prompt_terms,
    finetune,
    heldout_double_prompt_loss,
    training_age,
    write_run_log,
)
from tests.stubs import ScriptedBackbone


def _draws(seed, n=2):
    g = torch.Generator().manual_seed(seed)
    shape = (n, 3, 8, 8)
    return torch.randn(shape, generator=g), torch.randn(shape, generator=g), torch.randn(shape, generator=g)


def test_perfect_predictor_gives_zero():
    z0, eps, eps2 = _draws(0)
    bb = ScriptedBackbone([eps2, eps])  # age-specific term is evaluated first
    assert double_prompt_loss(bb, z0, [30, 40], eps, eps2, torch.tensor([10, 20]), torch.tensor([30, 40])).item() == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-2, 2))
def test_constant_offset_costs_twice_its_norm(seed, scale):
    z0, eps, eps2 = _draws(seed, 1)
    delta = torch.full_like(eps, scale)
    bb = ScriptedBackbone([eps2 + delta, eps + delta])
    loss = double_prompt_loss(bb, z0, 25, eps, eps2, 500, 700)
    assert loss.item() == pytest.approx(2 * delta.pow(2).sum().item(), rel=1e-5, abs=1e-6)


def test_single_prompt_drops_plain_term():
    z0, eps, eps2 = _draws(1, 1)
    delta = torch.ones_like(eps)
    bb = ScriptedBackbone([eps2 + delta])
    plain, aged = double_prompt_terms(bb, z0, 25, eps, eps2, 500, 700, double_prompt=False)
    assert plain.item() == 0.0 and aged.item() == pytest.approx(delta.pow(2).sum().item())
    assert bb.calls == 1


def test_timestep_range_checked():
    z0, eps, eps2 = _draws(2, 1)
    bb = ScriptedBackbone([eps2, eps])
    with pytest.raises(RangeError):
        double_prompt_loss(bb, z0, 25, eps, eps2, 0, 10)


def test_training_age_modes():
    assert training_age(23, "group_center") == 25
    assert training_age(90, "group_center") == 80
    assert training_age(23, "exact") == 23
    assert SpecializationConfig().age_labels == "group_center"


def test_config_defaults_and_validation():
    c = SpecializationConfig()
    assert (c.steps, c.batch_size, c.learning_rate, c.double_prompt) == (150, 2, 5e-6, True)
    with pytest.raises(InputError):
        SpecializationConfig(steps=-1)
    with pytest.raises(InputError):
        SpecializationConfig(age_labels="mean")


@pytest.fixture(scope="module")
def tiny():
    return ToyBackbone(ToyArch(seed=4)), generate_toy_dataset(ToyDatasetSpec(num_samples=12, rng_seed=3))


def test_zero_steps_is_passthrough(tiny):
    bb, ds = tiny
    out, rows = finetune(bb, ds, SpecializationConfig(steps=0))
    assert rows == [] and out is not bb
    assert out.parameter_hash() == bb.parameter_hash()


def test_finetune_touches_only_the_noise_predictor(tiny):
    bb, ds = tiny
    out, rows = finetune(bb, ds, SpecializationConfig(steps=3, learning_rate=1e-3))
    assert len(rows) == 3 and all(lp > 0 and la > 0 for _, lp, la in rows)
    assert out.parameter_hash("unet") != bb.parameter_hash("unet")
    assert out.parameter_hash("text") == bb.parameter_hash("text")


def test_finetune_reproducible_and_ablation_distinct(tiny):
    bb, ds = tiny
    cfg = SpecializationConfig(steps=2, learning_rate=1e-3)
    a, ra = finetune(bb, ds, cfg)
    b, rb = finetune(bb, ds, cfg)
    assert ra == rb and a.parameter_hash() == b.parameter_hash()
    single, rs = finetune(bb, ds, SpecializationConfig(steps=2, learning_rate=1e-3, double_prompt=False))
    assert single.parameter_hash() != a.parameter_hash()
    assert all(lp == 0.0 for _, lp, _ in rs)


def test_empty_dataset_rejected(tiny):
    bb, _ = tiny
    with pytest.raises(InputError):
        finetune(bb, generate_toy_dataset(ToyDatasetSpec(num_samples=0)))


def test_heldout_loss_uses_common_draws(tiny):
    bb, ds = tiny
    a = heldout_double_prompt_loss(bb, ds, draws=2)
    assert a == heldout_double_prompt_loss(bb, ds, draws=2) and a > 0


def test_run_log(tmp_path):
    write_run_log([(0, 1.5, 2.5), (1, 1.0, 2.0)], tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["step", "loss_P", "loss_P_age"] and rows[2] == ["1", "1.0", "2.0"]
