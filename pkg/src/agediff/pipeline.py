"""End-to-end toy run: prepare, train, specialize, invert, edit, evaluate.

Every artifact except ``run.json`` is a pure function of the config, so two
runs with the same config produce byte-identical trees. The top-level
``seed`` is added to every section seed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from agediff.backbone.dataset import (
    ToyDatasetSpec,
    generate_toy_dataset,
    render_sample,
    save_dataset,
    save_image,
)
from agediff.backbone.regressor import default_regressor
from agediff.backbone.toy import load_checkpoint, save_checkpoint, train_toy_backbone
from agediff.config import RunConfig, to_dict
from agediff.edit import edit_with_injection, record_reference_attention, target_prompt_for
from agediff.invert import invert_image, save_bundle
from agediff.metrics import ToyFeatureExtractor, evaluate_run
from agediff.prompt import load_adapter
from agediff.provenance import write_run_json
from agediff.schedule import make_plan
from agediff.specialize import finetune, heldout_double_prompt_loss, write_run_log

log = logging.getLogger(__name__)


def seeded(cfg: RunConfig) -> RunConfig:
    """Apply the top-level seed offset to every section seed."""
    s = cfg.seed
    if s == 0:
        return cfg
    rep = dataclasses.replace
    return rep(
        cfg,
        dataset=rep(cfg.dataset, seed=cfg.dataset.seed + s),
        pretrain_dataset=rep(cfg.pretrain_dataset, seed=cfg.pretrain_dataset.seed + s),
        toy_train=rep(cfg.toy_train, seed=cfg.toy_train.seed + s),
        specialize=rep(cfg.specialize, rng_seed=cfg.specialize.rng_seed + s),
        edit_run=rep(cfg.edit_run, image_seed=cfg.edit_run.image_seed + s),
        eval=rep(cfg.eval, seed=cfg.eval.seed + s),
    )


def source_images(cfg: RunConfig) -> tuple[torch.Tensor, list[int]]:
    """The edit-run inputs: fresh identities with ages in the source range."""
    er = cfg.edit_run
    rng = np.random.default_rng(er.image_seed)
    lo, hi = er.source_age_range
    ages = [int(a) for a in rng.integers(lo, hi + 1, size=er.num_images)]
    imgs = torch.stack([render_sample(a, er.image_seed, i, cfg.dataset.image_size) for i, a in enumerate(ages)])
    return imgs, ages


def heldout_spec(cfg: RunConfig) -> ToyDatasetSpec:
    """Fresh identities from the specialization domain, never trained on."""
    return ToyDatasetSpec(cfg.dataset.image_size, cfg.dataset.num_samples, rng_seed=cfg.dataset.seed + 1000)


def tree_digest(root: Path, exclude=("run.json",)) -> dict[str, str]:
    """sha256 of every file under ``root`` keyed by relative path."""
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in exclude:
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def run_pipeline(cfg: RunConfig, out: Path, keep_backbone=None) -> dict:
    """Run every stage under ``out``; returns the summary written to summary.json.

    ``keep_backbone`` (a list) receives the specialized backbone and bundles
    for callers that want to reuse them in-process.
    """
    started = time.time()
    cfg = seeded(cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    adapters = {k: load_adapter(k, v) for k, v in dataclasses.asdict(cfg.adapters).items() if v}
    schedule = cfg.schedule.build()
    summary: dict = {}

    if cfg.backbone:
        base = load_checkpoint(cfg.backbone)
        summary["backbone"] = {"source": cfg.backbone}
    else:
        pre = generate_toy_dataset(
            ToyDatasetSpec(
                cfg.dataset.image_size,
                cfg.pretrain_dataset.num_samples,
                rng_seed=cfg.pretrain_dataset.seed,
                color_jitter=cfg.pretrain_dataset.color_jitter,
            )
        )
        base, losses = train_toy_backbone(pre, cfg.toy_train, schedule=schedule)
        save_checkpoint(base, out / "backbone")
        summary["backbone"] = {"steps": len(losses), "final_loss": float(np.mean(losses[-50:]))}
    summary["backbone"]["hash"] = base.parameter_hash()

    data = generate_toy_dataset(ToyDatasetSpec(cfg.dataset.image_size, cfg.dataset.num_samples, rng_seed=cfg.dataset.seed))
    save_dataset(data, out / "data")
    spec_bb, rows = finetune(base, data, cfg.specialize)
    save_checkpoint(spec_bb, out / "specialized")
    write_run_log(rows, out / "specialized" / "run_log.csv")
    held = generate_toy_dataset(heldout_spec(cfg))
    labels = cfg.specialize.age_labels
    summary["specialize"] = {
        "steps": len(rows),
        "hash": spec_bb.parameter_hash(),
        "heldout_loss_before": heldout_double_prompt_loss(base, held, age_labels=labels),
        "heldout_loss_after": heldout_double_prompt_loss(spec_bb, held, age_labels=labels),
    }

    plan = make_plan(spec_bb.schedule, cfg.schedule.inference_steps)
    originals, ages = source_images(cfg)
    src_dir = out / "sources"
    src_dir.mkdir(exist_ok=True)
    names = [f"{i:04d}.png" for i in range(len(ages))]
    for name, img in zip(names, originals):
        save_image(img, src_dir / name)

    reg = default_regressor()
    edits = {t: [] for t in cfg.edit_run.targets}
    psnrs = []
    bundles = []
    for name, img in zip(names, originals):
        bundle = invert_image(
            spec_bb, img, plan, cfg.invert.null_config(),
            age_adapter=adapters.get("age_estimator"), gender_adapter=adapters.get("gender"),
            enhanced=cfg.edit.use_enhanced_prompts, use_initial_age=cfg.edit.use_initial_age,
            inversion_w=cfg.invert.inversion_w,
        )
        save_bundle(bundle, out / "bundles" / Path(name).stem)
        psnrs.append(bundle.psnr)
        bundles.append(bundle)
        record, _ = record_reference_attention(spec_bb, bundle, plan, cfg.edit.layer_filter)
        for t in cfg.edit_run.targets:
            edited = edit_with_injection(spec_bb, bundle, record, target_prompt_for(bundle, t, cfg.edit), cfg.edit, plan)
            edits[t].append(edited[0])

    all_orig, all_edit, all_tgt = [], [], []
    before = reg.predict(originals)
    shifts = {}
    for t, imgs in edits.items():
        d = out / "edits" / f"age_{t:03d}"
        d.mkdir(parents=True, exist_ok=True)
        for name, im in zip(names, imgs):
            save_image(im, d / name)
        with open(d / "targets.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["filename", "target_age"])
            w.writerows([n, t] for n in names)
        stacked = torch.stack(imgs)
        shifts[str(t)] = float(np.mean(reg.predict(stacked) - before))
        all_orig.append(originals)
        all_edit.append(stacked)
        all_tgt.extend([t] * len(imgs))

    report = evaluate_run(torch.cat(all_orig), torch.cat(all_edit), all_tgt, adapters, ToyFeatureExtractor(), cfg.eval)
    (out / "eval").mkdir(exist_ok=True)
    (out / "eval" / "report.json").write_text(report.to_json())
    (out / "eval" / "report.csv").write_text(report.to_csv())

    summary["invert"] = {"psnr": psnrs, "mean_psnr": float(np.mean(psnrs))}
    summary["edit"] = {"source_ages": ages, "mean_regressor_shift": shifts}
    summary["eval"] = {"all": dataclasses.asdict(report.row("all"))}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")

    seeds = {
        "dataset": cfg.dataset.seed, "pretrain_dataset": cfg.pretrain_dataset.seed, "toy_train": cfg.toy_train.seed,
        "specialize": cfg.specialize.rng_seed, "edit_run": cfg.edit_run.image_seed, "eval": cfg.eval.seed,
    }
    write_run_json(out, "run", to_dict(cfg), seeds, started)
    if keep_backbone is not None:
        keep_backbone.extend([base, spec_bb, bundles, originals])
    return summary
