import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from agediff.backbone.base import AttentionProbeContext, AttentionRecord
from agediff.backbone.dataset import ToyDatasetSpec, generate_toy_dataset
from agediff.backbone.toy import (
    ToyArch,
    ToyBackbone,
    ToyTrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_toy_backbone,
)
from agediff.errors import InputError, ProbeUnderflowError, ShapeError, VocabularyError
from agediff.prompt import build_prompt, empty_prompt, render


@pytest.fixture(scope="module")
def bb():
    return ToyBackbone(ToyArch(seed=3))


def test_shapes_and_layers(bb):
    assert bb.latent_shape == (3, 32, 32)
    z = torch.randn(2, 3, 32, 32)
    eps = bb.predict_noise(z, 500, bb.encode_prompt(build_prompt(40)))
    assert eps.shape == z.shape
    names = [l.layer_id for l in bb.cross_attention_layers]
    assert names == ["down16", "mid8", "up16"] == [l.layer_id for l in bb.cross_attention_layers]
    assert bb.default_layer_filter() == set(names)
    assert bb.default_layer_filter(8) == {"mid8"}


def test_identity_autoencoder(bb):
    x = torch.rand(4, 3, 32, 32)
    z = bb.encode_image(x)
    assert torch.equal(z, x * 2 - 1)
    assert torch.allclose(bb.decode_latent(z), x, atol=1e-7)
    assert torch.equal(bb.encode_image(x[2:3]), z[2:3])
    with pytest.raises(ShapeError):
        bb.encode_image(torch.rand(3, 16, 16))
    with pytest.raises(ShapeError):
        bb.predict_noise(torch.rand(1, 3, 16, 16), 10, bb.null_embedding())


def test_prompt_encoding(bb):
    emb = bb.encode_prompt(build_prompt(25))
    assert bb.token_strings(emb)[:8] == ["<bos>", "photo", "of", "a", "25", "year", "old", "person"]
    assert emb.token_spans[3] == (4, 5)
    spans = [emb.token_spans[i] for i in sorted(emb.token_spans)]
    assert all(a < b <= c for (a, b), (c, _) in zip(spans, spans[1:]))
    assert emb.embedding.shape == bb.text_embedding_shape
    assert torch.equal(emb.embedding, bb.encode_prompt(build_prompt(25)).embedding)
    null = bb.null_embedding()
    assert null.embedding.shape == bb.text_embedding_shape
    assert torch.equal(null.embedding, bb.encode_prompt(empty_prompt()).embedding)
    assert torch.equal(bb.encode_prompt("photo of a 25 year old person").embedding, emb.embedding)


def test_vocabulary_errors(bb):
    with pytest.raises(VocabularyError):
        bb.text_encoder.tokenize(render("age", "250", "person"))


def test_numeral_embeddings_are_smooth(bb):
    table = bb.text_encoder.table.weight
    vocab = bb.text_encoder.vocab
    near = (table[vocab["40"]] - table[vocab["41"]]).norm()
    far = (table[vocab["40"]] - table[vocab["90"]]).norm()
    assert near < far


def _run(bb, probe, t=600, age=30, seed=0):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(1, 3, 32, 32, generator=g)
    return bb.predict_noise(z, t, bb.encode_prompt(build_prompt(age)), probe)


def test_recording_is_passive_and_row_stochastic(bb):
    off = _run(bb, None)
    rec = AttentionRecord()
    on = _run(bb, AttentionProbeContext("record", rec, bb.default_layer_filter()))
    assert torch.equal(off, on)
    assert set(rec.maps) == {(0, "down16"), (0, "mid8"), (0, "up16")}
    assert rec.maps[(0, "mid8")].shape == (2, 64, 10)
    assert rec.max_row_error() <= 1e-5


def test_self_injection_is_identity(bb):
    rec = AttentionRecord()
    ref = _run(bb, AttentionProbeContext("record", rec))
    again = _run(bb, AttentionProbeContext("inject", rec, horizon=1))
    assert torch.equal(ref, again)


def test_injection_changes_other_prompt(bb):
    rec = AttentionRecord()
    _run(bb, AttentionProbeContext("record", rec), age=80)
    free = _run(bb, None, age=5)
    injected = _run(bb, AttentionProbeContext("inject", rec, horizon=1), age=5)
    assert not torch.equal(free, injected)
    beyond = _run(bb, AttentionProbeContext("inject", rec, horizon=0), age=5)
    assert torch.equal(free, beyond)


def test_token_map_renormalizes(bb):
    rec = AttentionRecord()
    _run(bb, AttentionProbeContext("record", rec))
    probe = AttentionProbeContext("inject", rec, horizon=1, token_map=[0, 1, 2, 3, 4, 4, 5, 6, 7, 8])
    _run(bb, probe)
    assert probe.injected_rows_error <= 1e-5


def test_probe_underflow_and_batch(bb):
    probe = AttentionProbeContext("inject", AttentionRecord(), horizon=5)
    with pytest.raises(ProbeUnderflowError):
        _run(bb, probe)
    with pytest.raises(ShapeError):
        bb.predict_noise(torch.randn(2, 3, 32, 32), 10, bb.null_embedding(), AttentionProbeContext("record"))
    with pytest.raises(ValueError):
        AttentionProbeContext("replay")


def test_checkpoint_roundtrip(bb, tmp_path):
    save_checkpoint(bb, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.parameter_hash() == bb.parameter_hash()
    z = torch.randn(1, 3, 32, 32)
    c = bb.encode_prompt(build_prompt(50))
    assert torch.equal(back.predict_noise(z, 300, c), bb.predict_noise(z, 300, c))
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "nothing")


def test_one_step_changes_weights():
    ds = generate_toy_dataset(ToyDatasetSpec(num_samples=8, rng_seed=1))
    before = ToyBackbone(ToyArch(seed=5)).parameter_hash("unet")
    trained, losses = train_toy_backbone(ds, ToyTrainConfig(steps=1, batch_size=4, seed=5))
    assert len(losses) == 1 and np.isfinite(losses[0])
    assert trained.parameter_hash("unet") != before
    assert trained.parameter_hash("text") == ToyBackbone(ToyArch(seed=5)).parameter_hash("text")


def test_training_is_reproducible():
    ds = generate_toy_dataset(ToyDatasetSpec(num_samples=8, rng_seed=1))
    a, la = train_toy_backbone(ds, ToyTrainConfig(steps=3, batch_size=4, seed=2))
    b, lb = train_toy_backbone(ds, ToyTrainConfig(steps=3, batch_size=4, seed=2))
    assert la == lb and a.parameter_hash() == b.parameter_hash()


@pytest.mark.slow
def test_loss_decreases_over_500_steps():
    ds = generate_toy_dataset(ToyDatasetSpec(num_samples=64, rng_seed=9))
    _, losses = train_toy_backbone(ds, ToyTrainConfig(steps=500, batch_size=8))
    assert np.mean(losses[-50:]) < np.mean(losses[:50])


def test_training_rejects_empty():
    ds = generate_toy_dataset(ToyDatasetSpec(num_samples=0))
    with pytest.raises(InputError):
        train_toy_backbone(ds, ToyTrainConfig(steps=1))


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 1000), st.integers(1, 100))
def test_predict_noise_deterministic(t, age):
    bb = ToyBackbone(ToyArch(seed=1))
    assert torch.equal(_run(bb, None, t, age), _run(bb, None, t, age))
