#!/usr/bin/env python3
"""Sweep the head over a grid of location counts and hidden widths, fit the
MAC model a*N*Ch^2 + b*N*Ch + c*N*R, and print the fit plus term shares."""

import argparse

import numpy as np

from collabod import head as H


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--bins", type=int, default=16)
    parser.add_argument("--classes", type=int, default=5)
    parser.add_argument("--in-channels", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    base = {"xs": (8, 8), "s": (4, 4), "m": (2, 2), "l": (1, 1)}
    rows, targets, grid = [], [], []
    for k in (1, 2, 3):
        extents = {s: (h * k, w * k) for s, (h, w) in base.items()}
        n_total = sum(h * w for h, w in extents.values())
        for hidden in (16, 32, 64):
            p = H.make_uda_head(
                np.random.default_rng(args.seed),
                {s: args.in_channels for s in H.SCALES},
                hidden,
                args.classes,
                args.bins,
            )
            report = H.head_complexity(p, extents)
            rows.append([n_total * hidden * hidden, n_total * hidden, n_total * args.bins])
            targets.append(report.total_macs)
            grid.append((n_total, hidden, report))

    A = np.asarray(rows, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    coef, *_ = np.linalg.lstsq(A, t, rcond=None)
    residual = float(np.abs(A @ coef - t).max() / t.min())

    print(f"# seed={args.seed} bins={args.bins} classes={args.classes}")
    print(f"{'N':>6} {'C_h':>5} {'total_macs':>12} {'shared':>12} {'proj':>10} {'dfl':>8}")
    for (n_total, hidden, report) in grid:
        terms = report.term_totals()
        print(
            f"{n_total:>6} {hidden:>5} {report.total_macs:>12} "
            f"{terms['shared_block']:>12} {terms['projection']:>10} {terms['dfl']:>8}"
        )
    print(
        f"fit: macs ~= {coef[0]:.2f}*N*Ch^2 + {coef[1]:.2f}*N*Ch + {coef[2]:.2f}*N*R "
        f"(residual {residual:.2e})"
    )


if __name__ == "__main__":
    main()
