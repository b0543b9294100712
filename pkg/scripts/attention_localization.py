"""Does age-token attention land on the pixels that age changes?

Top-decile attention pixels are compared with the renderer's age feature
mask; chance comes from random pixel sets of the same size.
"""

import argparse
import json
from pathlib import Path

import torch

from agediff.backbone.dataset import age_feature_mask, identity_for
from agediff.backbone.toy import load_checkpoint
from agediff.edit import age_token_heatmap, attention_localization, record_reference_attention
from agediff.invert import load_bundle


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run", type=Path, help="output directory of agediff run")
    ap.add_argument("--layers", nargs="+", default=["down16", "up16"])
    ap.add_argument("--limit", type=int, default=6)
    args = ap.parse_args()
    torch.set_num_threads(1)

    bb = load_checkpoint(args.run / "specialized")
    seed = json.loads((args.run / "config.json").read_text())["edit_run"]["image_seed"]
    for i, p in enumerate(sorted((args.run / "bundles").iterdir())[: args.limit]):
        b = load_bundle(p)
        record, _ = record_reference_attention(bb, b)
        tok = b.prompt.words.index(b.prompt.age_word) + 1
        heat = torch.stack([age_token_heatmap(record, s, layer, tok)
                            for s, layer in record.maps if layer in args.layers]).mean(0)
        iou, chance, q95 = attention_localization(heat, age_feature_mask(identity_for(seed, i)), seed=i)
        print(f"{p.name}  {b.prompt}  iou={iou:.3f}  chance={chance:.3f}  q95={q95:.3f}")


if __name__ == "__main__":
    main()
