"""Toy ablations on a shared backbone: full method against switched-off parts.

    python scripts/ablations.py --backbone runs/default/backbone --out runs/ablations
"""

import argparse
import csv
import dataclasses
import json
import logging
from pathlib import Path

import torch

from agediff.config import RunConfig, load_config
from agediff.pipeline import run_pipeline


def variants(cfg: RunConfig) -> dict[str, RunConfig]:
    rep = dataclasses.replace
    return {
        "full": cfg,
        "no_ia": rep(cfg, edit=rep(cfg.edit, use_initial_age=False)),
        "no_ep": rep(cfg, edit=rep(cfg.edit, use_enhanced_prompts=False)),
        "single_prompt": rep(cfg, specialize=rep(cfg.specialize, double_prompt=False)),
        "no_specialization": rep(cfg, specialize=rep(cfg.specialize, steps=0)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--backbone", required=True, help="pretrained toy checkpoint directory")
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--config", help="base run config (JSON)")
    ap.add_argument("--num-images", type=int, default=20)
    ap.add_argument("--only", nargs="*", help="subset of variant names")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)

    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = dataclasses.replace(cfg, backbone=args.backbone,
                              edit_run=dataclasses.replace(cfg.edit_run, num_images=args.num_images))
    rows = []
    for name, v in variants(cfg).items():
        if args.only and name not in args.only:
            continue
        s = run_pipeline(v, args.out / name)
        shifts = s["edit"]["mean_regressor_shift"]
        row = {
            "variant": name,
            "heldout_before": s["specialize"]["heldout_loss_before"],
            "heldout_after": s["specialize"]["heldout_loss_after"],
            "mean_psnr": s["invert"]["mean_psnr"],
            "mae": s["eval"]["all"]["mae"],
            "gender": s["eval"]["all"]["gender"],
            **{f"shift_to_{t}": shifts[t] for t in sorted(shifts, key=int)},
        }
        rows.append(row)
        logging.info(json.dumps(row))
    with open(args.out / "ablations.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print("  ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))


if __name__ == "__main__":
    main()
