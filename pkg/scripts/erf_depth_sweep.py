#!/usr/bin/env python3
"""Sweep stacked dense-aggregation blocks and print how the effective
receptive field (area above 20% of peak gradient) grows with depth."""

import argparse

from collabod import graph


def stack_config(depth: int, size: int, residual: int) -> tuple[graph.ModelConfig, str]:
    lines = [f"input 1 3 {size} {size}", "layer c0 conv in=image out=8 k=3 s=1 p=1"]
    prev = "c0"
    for i in range(1, depth + 1):
        lines.append(f"layer d{i} dablock in={prev} sources={prev} out=8 residual={residual}")
        prev = f"d{i}"
    return graph.parse_config("\n".join(lines)), prev


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--max-depth", type=int, default=4)
    parser.add_argument("--size", type=int, default=33)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument(
        "--residual",
        type=int,
        default=0,
        choices=(0, 1),
        help="1 keeps the identity shortcut, whose gradient dominates and hides expansion",
    )
    args = parser.parse_args()

    print(f"# seed={args.seed} size={args.size} residual={args.residual} threshold=0.2")
    print(f"{'depth':>5}  {'area_fraction':>13}")
    for depth in range(1, args.max_depth + 1):
        cfg, probe = stack_config(depth, args.size, args.residual)
        model = graph.build_model(cfg, seed=args.seed)
        erf = graph.estimate_erf(model, probe, seed=args.seed)
        print(f"{depth:>5}  {erf.area_fraction:>13.5f}")


if __name__ == "__main__":
    main()
