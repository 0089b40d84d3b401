#!/usr/bin/env python3
"""Generate a seeded random CTEN image (plus optional matching synthetic
ground truth) for exercising the CLI against the reference toy config."""

import argparse
import json

import numpy as np

from collabod.tensor import Tensor, write_tensor


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--output", default="frame.cten", help="CTEN image path")
    parser.add_argument("--shape", default="1,3,64,64", help="N,C,H,W extents")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--gt", help="also write a synthetic ground-truth JSONL here")
    parser.add_argument("--classes", type=int, default=4)
    args = parser.parse_args()

    shape = tuple(int(v) for v in args.shape.split(","))
    rng = np.random.default_rng(args.seed)
    write_tensor(args.output, Tensor(rng.uniform(-1, 1, shape).astype(np.float32)))
    print(f"wrote {args.output} shape={shape} seed={args.seed}")

    if args.gt:
        name = args.output.rsplit("/", 1)[-1].rsplit(".", 1)[0]
        h, w = shape[2], shape[3]
        with open(args.gt, "w", encoding="utf-8") as f:
            for _ in range(6):
                x1 = float(rng.uniform(0, w - 8))
                y1 = float(rng.uniform(0, h - 8))
                bw = float(rng.uniform(4, min(24, w - x1)))
                bh = float(rng.uniform(4, min(24, h - y1)))
                record = {
                    "image": name,
                    "box": [round(x1, 2), round(y1, 2), round(x1 + bw, 2), round(y1 + bh, 2)],
                    "class": int(rng.integers(0, args.classes)),
                }
                f.write(json.dumps(record) + "\n")
        print(f"wrote {args.gt} (6 boxes, {args.classes} classes)")


if __name__ == "__main__":
    main()
