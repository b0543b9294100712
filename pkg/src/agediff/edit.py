"""Attention-controlled age editing.

A reconstruction pass with the source prompt records the conditional
branch's cross-attention probabilities. The edit pass samples from the same
inverted noise with the target prompt and, during the first
``round(replace_ratio * T)`` sampling steps (highest noise first), replaces
its attention probabilities with the recorded ones. Values always come from
the target prompt.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from agediff.backbone.base import AttentionProbeContext, AttentionRecord, Backbone
from agediff.errors import AlignmentError, InputError, ProbeUnderflowError
from agediff.invert import (
    InversionBundle,
    NullOptConfig,
    invert_image,
    reconstruct,
    sample_with_schedule,
)
from agediff.prompt import PromptSpec, build_prompt, check_age
from agediff.schedule import StepPlan

FAMILIES = {"age": "photo", "plain": "photo", "empty": "empty"}


@dataclass
class EditConfig:
    replace_ratio: float = 0.8
    guidance_w: float = 7.5
    use_initial_age: bool = True
    use_enhanced_prompts: bool = True
    layer_filter: Optional[list[str]] = None

    def __post_init__(self):
        if not 0.0 <= self.replace_ratio <= 1.0:
            raise InputError(f"replace_ratio {self.replace_ratio} outside [0, 1]")
        if self.guidance_w < 0:
            raise InputError("guidance_w must be >= 0")

    def horizon(self, steps: int) -> int:
        return int(math.floor(self.replace_ratio * steps + 0.5))


def _word_alignment(source: PromptSpec, target: PromptSpec) -> dict[int, int]:
    """target word index -> source word index, matching slots and template words."""
    if FAMILIES[source.template_id] != FAMILIES[target.template_id]:
        raise AlignmentError(f"prompts from different templates: {source.rendered!r} / {target.rendered!r}")
    if source.template_id == target.template_id:
        return {j: j for j in range(len(target.words))}
    # age <-> plain: "photo of a" prefix and the noun slot line up, age words do not
    src_noun = next(i for i, s in source.slots.items() if s == "noun")
    tgt_noun = next(j for j, s in target.slots.items() if s == "noun")
    out = {j: j for j in range(3)}
    out[tgt_noun] = src_noun
    return out


def align_tokens(backbone: Backbone, source: PromptSpec, target: PromptSpec) -> list[int]:
    """For each target token position, the source token column it reads from.

    Aligned words map span to span; a longer target span reuses the last
    source token of its word. Unaligned target words reuse the last aligned
    source token before them. Leading/trailing special tokens map in order.
    """
    words = _word_alignment(source, target)
    s_emb = backbone.encode_prompt(source)
    t_emb = backbone.encode_prompt(target)
    n_src, n_tgt = len(s_emb.tokens), len(t_emb.tokens)
    mapping = [-1] * n_tgt
    first_t = min((a for a, _ in t_emb.token_spans.values()), default=n_tgt)
    first_s = min((a for a, _ in s_emb.token_spans.values()), default=n_src)
    for k in range(first_t):
        mapping[k] = min(k, first_s - 1) if first_s > 0 else 0
    last = mapping[first_t - 1] if first_t > 0 else 0
    for j in sorted(t_emb.token_spans):
        a, b = t_emb.token_spans[j]
        if j in words:
            sa, sb = s_emb.token_spans[words[j]]
            for k in range(a, b):
                mapping[k] = sa + min(k - a, sb - sa - 1)
            last = mapping[b - 1]
        else:
            for k in range(a, b):
                mapping[k] = last
    end_t = max((b for _, b in t_emb.token_spans.values()), default=first_t)
    end_s = max((b for _, b in s_emb.token_spans.values()), default=first_s)
    for off, k in enumerate(range(end_t, n_tgt)):
        mapping[k] = min(end_s + off, n_src - 1)
    return mapping


def is_identity(mapping: list[int]) -> bool:
    return mapping == list(range(len(mapping)))


def record_reference_attention(
    backbone: Backbone, bundle: InversionBundle, plan: Optional[StepPlan] = None, layer_filter=None
) -> tuple[AttentionRecord, torch.Tensor]:
    """Reconstruct with the source prompt while recording attention; returns (record, image)."""
    plan = plan or bundle.plan
    layers = set(layer_filter) if layer_filter is not None else backbone.default_layer_filter()
    emb = backbone.encode_prompt(bundle.prompt)
    record = AttentionRecord(prompt_tokens=backbone.token_strings(emb), step_count=plan.inference_steps)
    probe = AttentionProbeContext("record", record, layers)
    image = reconstruct(backbone, bundle, plan, probe)
    return record, image


def edit_with_injection(
    backbone: Backbone,
    bundle: InversionBundle,
    record: AttentionRecord,
    target_prompt: PromptSpec,
    config: EditConfig = EditConfig(),
    plan: Optional[StepPlan] = None,
    probe_out: Optional[list] = None,
) -> torch.Tensor:
    plan = plan or bundle.plan
    horizon = config.horizon(plan.inference_steps)
    layers = set(config.layer_filter) if config.layer_filter is not None else backbone.default_layer_filter()
    if not record.covers(range(horizon), layers):
        raise ProbeUnderflowError("attention record does not cover the injection horizon")
    mapping = align_tokens(backbone, bundle.prompt, target_prompt)
    probe = AttentionProbeContext(
        "inject", record, layers, horizon=horizon, token_map=None if is_identity(mapping) else mapping
    )
    if probe_out is not None:
        probe_out.append(probe)
    z = sample_with_schedule(
        backbone, bundle.z_T, bundle.null_schedule.embeddings, target_prompt, plan, config.guidance_w, probe
    )
    return backbone.decode_latent(z)


def resample(backbone: Backbone, bundle: InversionBundle, prompt: PromptSpec, guidance_w: float) -> torch.Tensor:
    """Plain resampling from the bundle's noise with a new prompt (no injection)."""
    z = sample_with_schedule(backbone, bundle.z_T, bundle.null_schedule.embeddings, prompt, bundle.plan, guidance_w)
    return backbone.decode_latent(z)


@dataclass
class EditResult:
    image: torch.Tensor
    bundle: InversionBundle
    record: AttentionRecord
    source_prompt: PromptSpec
    target_prompt: PromptSpec
    reconstruction: torch.Tensor
    stage_log: list[str] = field(default_factory=list)


class StageError(InputError):
    pass


def target_prompt_for(bundle: InversionBundle, target_age: int, config: EditConfig) -> PromptSpec:
    return build_prompt(target_age, bundle.gender, config.use_enhanced_prompts and bundle.gender is not None)


def edit_age(
    backbone: Backbone,
    image: torch.Tensor,
    target_age: int,
    config: EditConfig = EditConfig(),
    plan: Optional[StepPlan] = None,
    null_config: Optional[NullOptConfig] = None,
    age_adapter=None,
    gender_adapter=None,
    estimated_age: Optional[int] = None,
    bundle: Optional[InversionBundle] = None,
) -> EditResult:
    """Full edit: estimate -> prompts -> invert -> record -> inject -> decode."""
    target_age = check_age(target_age)
    if plan is None:
        from agediff.schedule import make_plan

        plan = make_plan(backbone.schedule)
    null_config = null_config or NullOptConfig(guidance_w=config.guidance_w)
    stages = []
    if bundle is None:
        stages.append("invert")
        bundle = invert_image(
            backbone,
            image,
            plan,
            null_config,
            age_adapter=age_adapter,
            gender_adapter=gender_adapter,
            estimated_age=estimated_age,
            enhanced=config.use_enhanced_prompts,
            use_initial_age=config.use_initial_age,
        )
    stages.append("record")
    record, recon = record_reference_attention(backbone, bundle, plan, config.layer_filter)
    target = target_prompt_for(bundle, target_age, config)
    stages.append("inject")
    try:
        out = edit_with_injection(backbone, bundle, record, target, config, plan)
    except (AlignmentError, ProbeUnderflowError) as exc:
        raise StageError(f"inject stage failed: {exc}") from exc
    return EditResult(out, bundle, record, bundle.prompt, target, recon, stages)


# -- record persistence -------------------------------------------------------


def save_record(record: AttentionRecord, out_dir) -> str:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for (step, layer), m in sorted(record.maps.items()):
        name = f"attn_{step:03d}_{layer}.f32"
        (out / name).write_bytes(m.contiguous().numpy().astype("<f4").tobytes())
        entries.append({"step": step, "layer": layer, "file": name, "shape": list(m.shape)})
    manifest = {"prompt_tokens": record.prompt_tokens, "step_count": record.step_count, "maps": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out.name


def load_record(path) -> AttentionRecord:
    root = Path(path)
    m = json.loads((root / "manifest.json").read_text())
    maps = {}
    for e in m["maps"]:
        arr = np.frombuffer((root / e["file"]).read_bytes(), dtype="<f4").reshape(e["shape"])
        maps[(e["step"], e["layer"])] = torch.from_numpy(arr.copy())
    return AttentionRecord(maps, m["prompt_tokens"], m["step_count"])


def age_token_heatmap(record: AttentionRecord, step: int, layer: str, token_index: int) -> torch.Tensor:
    """Head-averaged attention on one token as a square map."""
    m = record.maps[(step, layer)][..., token_index].mean(0)
    side = int(round(m.numel() ** 0.5))
    return m.reshape(side, side)


def attention_localization(heatmap, mask, top_fraction: float = 0.1, permutations: int = 1000, seed: int = 0):
    """IoU of the top attention pixels with ``mask``, plus its permutation null.

    ``mask`` is pooled to the heatmap's resolution (majority vote). Returns
    ``(iou, chance_mean, chance_q95)`` where the chance values come from
    random pixel sets of the same size.
    """
    a = np.asarray(heatmap, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if a.ndim != 2 or m.ndim != 2 or m.shape[0] % a.shape[0] or m.shape[1] % a.shape[1]:
        raise InputError(f"mask {m.shape} does not pool onto heatmap {a.shape}")
    fy, fx = m.shape[0] // a.shape[0], m.shape[1] // a.shape[1]
    m = m.reshape(a.shape[0], fy, a.shape[1], fx).mean((1, 3)) >= 0.5
    a, m = a.ravel(), m.ravel()
    k = max(1, int(round(top_fraction * a.size)))

    def iou(sel):
        return float((sel & m).sum() / max((sel | m).sum(), 1))

    top = np.zeros(a.size, dtype=bool)
    top[np.argsort(a, kind="stable")[-k:]] = True
    rng = np.random.default_rng(seed)
    null = []
    for _ in range(permutations):
        sel = np.zeros(a.size, dtype=bool)
        sel[rng.choice(a.size, k, replace=False)] = True
        null.append(iou(sel))
    return iou(top), float(np.mean(null)), float(np.quantile(null, 0.95))
