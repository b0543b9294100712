import numpy as np
import pytest
import torch

from agediff.backbone.base import TextEmbedding
from agediff.backbone.dataset import render_sample
from agediff.backbone.toy import ToyArch, ToyBackbone
from agediff.edit import (
    EditConfig,
    StageError,
    age_token_heatmap,
    align_tokens,
    attention_localization,
    edit_age,
    edit_with_injection,
    is_identity,
    load_record,
    record_reference_attention,
    resample,
    save_record,
)
from agediff.errors import AlignmentError, InputError, ProbeUnderflowError
from agediff.invert import NullOptConfig, invert_image, reconstruct
from agediff.prompt import build_prompt, empty_prompt
from agediff.schedule import make_plan
from tests.stubs import ZeroBackbone


class DigitBackbone(ZeroBackbone):
    """Tokenizes numerals digit by digit so ages span several tokens."""

    def encode_prompt(self, prompt):
        toks, spans = ["<bos>"], {}
        for i, w in enumerate(prompt.words):
            pieces = list(w) if w.isdigit() else [w]
            spans[i] = (len(toks), len(toks) + len(pieces))
            toks += pieces
        toks += ["<pad>"] * (12 - len(toks))
        return TextEmbedding(list(range(len(toks))), torch.zeros(12, 2), spans, prompt)


def test_alignment_rules():
    toy = ToyBackbone()
    assert is_identity(align_tokens(toy, build_prompt(25), build_prompt(60)))
    assert is_identity(align_tokens(toy, build_prompt(25), build_prompt(25)))
    m = align_tokens(toy, build_prompt(None), build_prompt(80))
    assert m[:4] == [0, 1, 2, 3] and m[7] == 4
    with pytest.raises(AlignmentError):
        align_tokens(toy, empty_prompt(), build_prompt(80))


def test_longer_age_span_duplicates_age_column():
    bb = DigitBackbone()
    m = align_tokens(bb, build_prompt(5), build_prompt(80))
    # <bos> photo of a [5] year old person -> <bos> photo of a [8 0] year old person
    assert m[:7] == [0, 1, 2, 3, 4, 4, 5]
    assert m[7:9] == [6, 7]
    m = align_tokens(bb, build_prompt(80), build_prompt(5))
    assert m[:6] == [0, 1, 2, 3, 4, 6]


def test_config_validation():
    assert EditConfig().replace_ratio == 0.8
    assert EditConfig().horizon(50) == 40
    assert EditConfig(replace_ratio=0.5).horizon(5) == 3
    with pytest.raises(InputError):
        EditConfig(replace_ratio=1.2)
    with pytest.raises(InputError):
        EditConfig(guidance_w=-1)


@pytest.fixture(scope="module")
def setup():
    bb = ToyBackbone(ToyArch(seed=21))
    plan = make_plan(bb.schedule, 6)
    img = render_sample(30, 8, 0)
    bundle = invert_image(bb, img, plan, NullOptConfig(inner_iterations=1), estimated_age=30)
    record, recon = record_reference_attention(bb, bundle, plan)
    return bb, plan, bundle, record, recon


def test_record_is_passive_and_complete(setup):
    bb, plan, bundle, record, recon = setup
    assert torch.equal(recon, reconstruct(bb, bundle))
    assert set(record.maps) == {(s, l) for s in range(6) for l in bb.default_layer_filter()}
    assert record.max_row_error() <= 1e-5
    assert record.prompt_tokens[4] == "30"


def test_identity_edit_is_bitwise_reconstruction(setup):
    bb, plan, bundle, record, recon = setup
    out = edit_with_injection(bb, bundle, record, bundle.prompt, EditConfig(replace_ratio=1.0), plan)
    assert torch.equal(out, recon)


def test_zero_ratio_is_plain_resampling(setup):
    bb, plan, bundle, record, _ = setup
    target = build_prompt(80)
    out = edit_with_injection(bb, bundle, record, target, EditConfig(replace_ratio=0.0), plan)
    assert torch.equal(out, resample(bb, bundle, target, 7.5))


def test_same_horizon_same_output(setup):
    bb, plan, bundle, record, _ = setup
    target = build_prompt(80)
    a = edit_with_injection(bb, bundle, record, target, EditConfig(replace_ratio=0.5), plan)
    b = edit_with_injection(bb, bundle, record, target, EditConfig(replace_ratio=0.55), plan)
    c = edit_with_injection(bb, bundle, record, target, EditConfig(replace_ratio=0.7), plan)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_injected_maps_stay_row_stochastic(setup):
    bb, plan, bundle, record, _ = setup
    probes = []
    edit_with_injection(bb, bundle, record, build_prompt(None), EditConfig(), plan, probes)
    assert probes[0].token_map is not None
    assert probes[0].injected_rows_error <= 1e-5


def test_underflow_when_record_is_short(setup):
    bb, plan, bundle, record, _ = setup
    from agediff.backbone.base import AttentionRecord

    short = AttentionRecord({k: v for k, v in record.maps.items() if k[0] < 2})
    with pytest.raises(ProbeUnderflowError):
        edit_with_injection(bb, bundle, short, build_prompt(80), EditConfig(), plan)


def test_edit_age_stages(setup):
    bb, plan, bundle, _, recon = setup
    res = edit_age(bb, None, 30, EditConfig(replace_ratio=1.0, use_enhanced_prompts=False), plan, bundle=bundle)
    assert res.stage_log == ["record", "inject"]
    assert torch.equal(res.image, recon)
    with pytest.raises(InputError):
        edit_age(bb, None, 0, EditConfig(), plan, bundle=bundle)


def test_edit_age_full_run(setup):
    bb, plan, _, _, _ = setup
    img = render_sample(40, 8, 1)
    res = edit_age(
        bb, img, 70, EditConfig(use_enhanced_prompts=False), plan, NullOptConfig(inner_iterations=0), estimated_age=40
    )
    assert res.stage_log == ["invert", "record", "inject"]
    assert res.target_prompt.rendered == "photo of a 70 year old person"
    assert res.image.shape == (1, 3, 32, 32)


def test_stage_error_wraps_alignment(setup):
    bb, plan, bundle, _, _ = setup
    from dataclasses import replace

    odd = replace(bundle, prompt=empty_prompt())
    with pytest.raises(StageError):
        edit_age(bb, None, 40, EditConfig(use_enhanced_prompts=False), plan, bundle=odd)


def test_record_roundtrip(setup, tmp_path):
    _, _, _, record, _ = setup
    save_record(record, tmp_path / "r")
    back = load_record(tmp_path / "r")
    assert back.prompt_tokens == record.prompt_tokens
    assert all(torch.equal(back.maps[k], v) for k, v in record.maps.items())
    assert age_token_heatmap(record, 0, "down16", 4).shape == (16, 16)


def test_localization_of_a_perfect_map():
    mask = np.zeros((32, 32), dtype=bool)
    mask[:8, :8] = True
    heat = torch.zeros(16, 16)
    heat[:4, :4] = 1.0
    heat[0, 8] = 0.5
    iou, chance, q95 = attention_localization(heat, mask, top_fraction=16 / 256, permutations=200)
    assert iou == 1.0
    assert chance < q95 < iou
    inverted = attention_localization(1.0 - heat, mask, top_fraction=16 / 256, permutations=200)[0]
    assert inverted == 0.0
    with pytest.raises(InputError):
        attention_localization(heat, np.zeros((20, 20), dtype=bool))
