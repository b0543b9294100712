"""Held-out double-prompt loss after specialization at several learning rates."""

import argparse
import dataclasses

import torch

from agediff.backbone.dataset import ToyDatasetSpec, generate_toy_dataset
from agediff.backbone.toy import load_checkpoint
from agediff.config import RunConfig
from agediff.pipeline import heldout_spec
from agediff.specialize import finetune, heldout_double_prompt_loss


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--backbone", required=True)
    ap.add_argument("--lrs", type=float, nargs="+", default=[1e-6, 2e-6, 5e-6, 1e-5, 2e-5, 5e-5])
    ap.add_argument("--steps", type=int, default=150)
    ap.add_argument("--labels", choices=["exact", "group_center"], default="group_center")
    args = ap.parse_args()
    torch.set_num_threads(1)

    cfg = RunConfig()
    base = load_checkpoint(args.backbone)
    data = generate_toy_dataset(ToyDatasetSpec(cfg.dataset.image_size, cfg.dataset.num_samples,
                                               rng_seed=cfg.dataset.seed))
    held = generate_toy_dataset(heldout_spec(cfg))
    before = heldout_double_prompt_loss(base, held, age_labels=args.labels)
    print(f"unspecialized  {before:.4f}")
    for lr in args.lrs:
        sc = dataclasses.replace(cfg.specialize, learning_rate=lr, steps=args.steps, age_labels=args.labels)
        model, _ = finetune(base, data, sc)
        after = heldout_double_prompt_loss(model, held, age_labels=args.labels)
        print(f"lr={lr:<8g} {after:.4f}  ({after - before:+.4f})")


if __name__ == "__main__":
    main()
