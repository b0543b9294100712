"""Command-line entry point.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 compute error.
Every command writes a ``run.json`` provenance record under its output
directory.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import torch

from agediff import __version__
from agediff.provenance import write_run_json
from agediff.errors import AgeDiffError, ConfigError, InputError, PairingError, UsageError

log = logging.getLogger("agediff")


def _base_config(args):
    from agediff.config import RunConfig, load_config

    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def load_backbone(descriptor: str):
    from agediff.backbone.toy import load_checkpoint

    if not descriptor:
        raise ConfigError("no backbone given (use --backbone or the 'backbone' config key)")
    if descriptor.startswith("toy:"):
        descriptor = descriptor[4:]
    if descriptor.startswith("adapter:"):
        raise ConfigError("pretrained adapters are not bundled; pass a toy checkpoint directory")
    return load_checkpoint(descriptor)


def load_adapters(cfg) -> dict:
    from agediff.prompt import load_adapter

    return {k: load_adapter(k, v) for k, v in dataclasses.asdict(cfg.adapters).items() if v}


def read_input_image(path, size):
    from agediff.backbone.dataset import load_image

    img = load_image(path, size)
    return img


# -- toy ----------------------------------------------------------------------


def cmd_toy_prepare(args):
    from agediff.backbone.dataset import ToyDatasetSpec, generate_toy_dataset, save_dataset
    from agediff.config import override, to_dict

    started = time.time()
    cfg = override(_base_config(args), "dataset", num_samples=args.n, seed=args.seed, image_size=args.size)
    spec = ToyDatasetSpec(cfg.dataset.image_size, cfg.dataset.num_samples, rng_seed=cfg.dataset.seed)
    ds = generate_toy_dataset(spec)
    out = Path(args.out)
    save_dataset(ds, out)
    write_run_json(out, "toy prepare", to_dict(cfg.dataset), {"dataset": cfg.dataset.seed}, started)
    print(f"wrote {len(ds)} images to {out}")
    return 0


def cmd_toy_train(args):
    from agediff.backbone.dataset import load_dataset
    from agediff.backbone.toy import save_checkpoint, train_toy_backbone
    from agediff.config import override, to_dict

    started = time.time()
    cfg = override(_base_config(args), "toy_train", steps=args.steps, batch_size=args.batch,
                   learning_rate=args.lr, seed=args.seed)
    ds = load_dataset(args.data)
    bb, losses = train_toy_backbone(ds, cfg.toy_train, schedule=cfg.schedule.build())
    out = Path(args.out)
    save_checkpoint(bb, out)
    with open(out / "train_log.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows([i, repr(l)] for i, l in enumerate(losses))
    write_run_json(out, "toy train", to_dict(cfg.toy_train), {"train": cfg.toy_train.seed}, started)
    print(f"trained toy backbone ({len(losses)} steps) -> {out}")
    return 0


# -- specialize ---------------------------------------------------------------


def cmd_specialize(args):
    from agediff.backbone.dataset import load_dataset
    from agediff.backbone.toy import save_checkpoint
    from agediff.config import override, to_dict
    from agediff.specialize import finetune, write_run_log

    started = time.time()
    cfg = _base_config(args)
    cfg = override(cfg, "specialize", steps=args.steps, batch_size=args.batch, learning_rate=args.lr,
                   rng_seed=args.seed, double_prompt=False if args.no_double_prompt else None,
                   age_labels=args.age_labels)
    bb = load_backbone(args.backbone or cfg.backbone)
    ds = load_dataset(args.data)
    spec_bb, rows = finetune(bb, ds, cfg.specialize)
    out = Path(args.out)
    save_checkpoint(spec_bb, out)
    write_run_log(rows, out / "run_log.csv")
    write_run_json(out, "specialize", to_dict(cfg.specialize), {"specialize": cfg.specialize.rng_seed}, started)
    print(f"specialized backbone ({len(rows)} steps) -> {out}")
    return 0


# -- invert / edit --------------------------------------------------------------


def _invert_one(bb, image, cfg, adapters, age, enhanced, use_ia):
    from agediff.invert import invert_image
    from agediff.schedule import make_plan

    plan = make_plan(bb.schedule, cfg.schedule.inference_steps)
    return invert_image(
        bb, image, plan, cfg.invert.null_config(),
        age_adapter=adapters.get("age_estimator"), gender_adapter=adapters.get("gender"),
        estimated_age=age, enhanced=enhanced, use_initial_age=use_ia, inversion_w=cfg.invert.inversion_w,
    )


def cmd_invert(args):
    from agediff.config import override, to_dict
    from agediff.invert import save_bundle

    started = time.time()
    cfg = override(_base_config(args), "invert", inner_iterations=args.inner)
    bb = load_backbone(args.backbone or cfg.backbone)
    image = read_input_image(args.image, bb.image_size)
    adapters = load_adapters(cfg)
    enhanced = cfg.edit.use_enhanced_prompts and not args.no_ep
    use_ia = cfg.edit.use_initial_age and not args.no_ia
    bundle = _invert_one(bb, image, cfg, adapters, args.age, enhanced, use_ia)
    out = Path(args.out)
    save_bundle(bundle, out)
    write_run_json(out, "invert", {"invert": to_dict(cfg.invert), "image": str(args.image),
                                   "resized_to": bb.image_size}, {}, started)
    print(f"inverted {args.image}: prompt={bundle.prompt.rendered!r} psnr={bundle.psnr:.2f} dB -> {out}")
    return 0


def cmd_edit(args):
    from agediff.backbone.dataset import save_image
    from agediff.config import override, to_dict
    from agediff.edit import edit_with_injection, record_reference_attention, target_prompt_for
    from agediff.invert import load_bundle, save_bundle

    started = time.time()
    if args.ratio is not None and not 0.0 <= args.ratio <= 1.0:
        raise UsageError(f"--ratio must be in [0, 1], got {args.ratio}")
    cfg = _base_config(args)
    cfg = override(cfg, "edit", replace_ratio=args.ratio,
                   use_enhanced_prompts=False if args.no_ep else None,
                   use_initial_age=False if args.no_ia else None)
    bb = load_backbone(args.backbone or cfg.backbone)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if (args.bundle is None) == (args.image is None):
        raise UsageError("give exactly one of --bundle or --image")
    adapters = load_adapters(cfg)

    jobs = []
    if args.bundle is not None:
        jobs.append(("edit", args.bundle, None))
    else:
        src = Path(args.image)
        files = sorted(src.glob("*.png")) if src.is_dir() else [src]
        jobs.extend((f.stem, None, f) for f in files)

    def run(job):
        name, bundle_path, image_path = job
        if bundle_path is not None:
            bundle = load_bundle(bundle_path)
            if bool(bundle.config.get("use_initial_age", True)) != cfg.edit.use_initial_age:
                raise UsageError("--no-ia must match how the bundle was inverted")
        else:
            image = read_input_image(image_path, bb.image_size)
            bundle = _invert_one(bb, image, cfg, adapters, args.age, cfg.edit.use_enhanced_prompts,
                                 cfg.edit.use_initial_age)
        record, recon = record_reference_attention(bb, bundle, bundle.plan, cfg.edit.layer_filter)
        target = target_prompt_for(bundle, args.target_age, cfg.edit)
        edited = edit_with_injection(bb, bundle, record, target, cfg.edit, bundle.plan)
        save_image(edited[0], out / f"{name}.png")
        if args.save_bundles and bundle_path is None:
            save_bundle(bundle, out / "bundles" / name, record=record)
        return name, bundle.prompt.rendered, target.rendered

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(run, jobs))
    write_run_json(out, "edit", {"edit": to_dict(cfg.edit), "target_age": args.target_age,
                                 "resized_to": bb.image_size,
                                 "prompts": [{"image": n, "source": s, "target": t} for n, s, t in results]},
                   {}, started)
    print(f"edited {len(results)} image(s) to age {args.target_age} -> {out}")
    return 0


# -- eval -----------------------------------------------------------------------


def read_targets(path) -> dict[str, int]:
    targets = {}
    try:
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                targets[Path(row["filename"]).name] = int(row["target_age"])
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"bad targets file {path}: {exc}") from exc
    return targets


def cmd_eval(args):
    from agediff.config import override, to_dict
    from agediff.metrics import ToyFeatureExtractor, evaluate_run

    started = time.time()
    cfg = override(_base_config(args), "eval", subset_size=args.subset_size, num_subsets=args.num_subsets)
    orig = {p.name: p for p in sorted(Path(args.orig_dir).glob("*.png"))}
    edited = {p.name: p for p in sorted(Path(args.edited_dir).glob("*.png"))}
    if set(orig) != set(edited) or not orig:
        missing = sorted(set(orig) ^ set(edited))
        raise PairingError(f"original/edited listings differ: {missing[:5]}")
    targets = read_targets(args.targets)
    if set(targets) != set(orig):
        raise PairingError("targets file does not cover exactly the paired images")
    names = sorted(orig)
    size = args.size
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        originals = torch.stack(list(pool.map(lambda n: read_input_image(orig[n], size), names)))
        edits = torch.stack(list(pool.map(lambda n: read_input_image(edited[n], size), names)))
    adapters = load_adapters(cfg)
    report = evaluate_run(originals, edits, [targets[n] for n in names], adapters, ToyFeatureExtractor(), cfg.eval)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    write_run_json(out, "eval", to_dict(cfg.eval), {"eval": cfg.eval.seed}, started)
    print(report.to_csv(), end="")
    return 0


# -- whole pipeline -------------------------------------------------------------


def cmd_run(args):
    from agediff.pipeline import run_pipeline

    cfg = _base_config(args)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    summary = run_pipeline(cfg, Path(args.out or cfg.out))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agediff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config; flags override its keys")
        return sp

    toy = sub.add_parser("toy", help="toy dataset and backbone")
    toy_sub = toy.add_subparsers(dest="toy_command", required=True)
    sp = common(toy_sub.add_parser("prepare", help="render the toy dataset"))
    sp.add_argument("--n", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_toy_prepare)
    sp = common(toy_sub.add_parser("train", help="train the toy backbone"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_toy_train)

    sp = common(sub.add_parser("specialize", help="age-aware fine-tuning"))
    sp.add_argument("--backbone")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--age-labels", choices=["exact", "group_center"])
    sp.add_argument("--no-double-prompt", action="store_true")
    sp.set_defaults(func=cmd_specialize)

    sp = common(sub.add_parser("invert", help="invert one image into a bundle"))
    sp.add_argument("--backbone")
    sp.add_argument("--image", required=True)
    sp.add_argument("--age", type=int, help="skip the estimator and use this age")
    sp.add_argument("--inner", type=int, help="null-text iterations per step")
    sp.add_argument("--no-ep", action="store_true", help="plain 'person' prompts")
    sp.add_argument("--no-ia", action="store_true", help="age-agnostic inversion prompt")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_invert)

    sp = common(sub.add_parser("edit", help="edit to a target age"))
    sp.add_argument("--backbone")
    sp.add_argument("--bundle")
    sp.add_argument("--image", help="PNG file or directory (inverts first)")
    sp.add_argument("--age", type=int, help="source age override when inverting")
    sp.add_argument("--target-age", type=int, required=True)
    sp.add_argument("--ratio", type=float, help="cross-attention replacing ratio (default 0.8)")
    sp.add_argument("--no-ep", action="store_true")
    sp.add_argument("--no-ia", action="store_true")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--save-bundles", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_edit)

    sp = common(sub.add_parser("eval", help="score edited images"))
    sp.add_argument("--orig-dir", required=True)
    sp.add_argument("--edited-dir", required=True)
    sp.add_argument("--targets", required=True, help="CSV with filename,target_age")
    sp.add_argument("--subset-size", type=int)
    sp.add_argument("--num-subsets", type=int)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("run", help="prepare -> train -> specialize -> invert -> edit -> eval"))
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except AgeDiffError as exc:
        print(f"agediff: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
