"""Edit strength against fidelity as the attention replace ratio varies.

Reuses the bundles and specialized backbone of a finished ``agediff run``.
"""

import argparse
from pathlib import Path

import numpy as np
import torch

from agediff.backbone.dataset import load_image
from agediff.backbone.regressor import default_regressor
from agediff.backbone.toy import load_checkpoint
from agediff.edit import EditConfig, edit_with_injection, record_reference_attention, target_prompt_for
from agediff.invert import load_bundle, psnr


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run", type=Path, help="output directory of agediff run")
    ap.add_argument("--target", type=int, default=80)
    ap.add_argument("--ratios", type=float, nargs="+", default=[0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    ap.add_argument("--limit", type=int, default=5)
    args = ap.parse_args()
    torch.set_num_threads(1)

    bb = load_checkpoint(args.run / "specialized")
    reg = default_regressor()
    paths = sorted((args.run / "bundles").iterdir())[: args.limit]
    bundles = [load_bundle(p) for p in paths]
    sources = torch.stack([load_image(args.run / "sources" / f"{p.name}.png") for p in paths])
    records = [record_reference_attention(bb, b)[0] for b in bundles]
    before = reg.predict(sources)
    print("ratio  shift   psnr_to_source")
    for r in args.ratios:
        cfg = EditConfig(replace_ratio=r)
        out = torch.cat([edit_with_injection(bb, b, rec, target_prompt_for(b, args.target, cfg), cfg)
                         for b, rec in zip(bundles, records)])
        shift = float(np.mean(reg.predict(out) - before))
        fid = float(np.mean([psnr(o, s) for o, s in zip(out, sources)]))
        print(f"{r:5.2f}  {shift:+6.1f}  {fid:6.2f}")


if __name__ == "__main__":
    main()
