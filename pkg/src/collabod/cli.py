"""Command-line entry point.

Subcommands: forward, flops, erf, reparam-check, eval, gradcheck. Every run
is deterministic given its inputs and --seed (default 0); the seed is echoed
in every report header. Machine-readable outputs are JSON (--json) or CTEN;
detection output is JSON-lines. Contract violations exit nonzero with a
single diagnostic line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import coco_eval, gradcheck, graph
from . import head as H
from .tensor import ShapeError, Tensor, read_tensor, write_cten

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="collabod",
        description="Detection building blocks: forward/decode, complexity, "
        "receptive-field estimation, re-parameterization and gradient checks, "
        "and COCO-protocol evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fwd = sub.add_parser("forward", help="run a config on a CTEN image and emit detections")
    fwd.add_argument("--config", required=True, help="model config file")
    fwd.add_argument("--input", required=True, help="input image (CTEN, rank 4)")
    fwd.add_argument("--output", help="detections JSON-lines file (default stdout)")
    fwd.add_argument("--iou-thresh", type=float, default=0.45, help="NMS IoU threshold")
    fwd.add_argument("--score-thresh", type=float, default=0.25, help="score threshold")
    fwd.add_argument("--seed", type=int, default=0, help="parameter init seed")

    flops = sub.add_parser("flops", help="closed-form MAC/parameter ledger for a config")
    flops.add_argument("--config", required=True)
    flops.add_argument("--output", help="write the report here instead of stdout")
    flops.add_argument("--seed", type=int, default=0)
    flops.add_argument("--json", action="store_true", help="emit JSON instead of text")

    erf = sub.add_parser("erf", help="effective receptive field of a probe layer")
    erf.add_argument("--config", required=True)
    erf.add_argument("--probe", required=True, help="layer id to probe ('image' for the input)")
    erf.add_argument("--output", help="write the normalized map as CTEN here")
    erf.add_argument("--seed", type=int, default=0)
    erf.add_argument("--erf-thresh", type=float, default=0.2, help="area threshold, fraction of peak")
    erf.add_argument("--json", action="store_true")

    rep = sub.add_parser("reparam-check", help="verify branch-merge equivalence of the head")
    rep.add_argument("--config", required=True)
    rep.add_argument("--seed", type=int, default=0)
    rep.add_argument("--trials", type=int, default=100, help="random inputs to compare")
    rep.add_argument("--json", action="store_true")

    ev = sub.add_parser("eval", help="COCO-protocol AP summary for detections vs ground truth")
    ev.add_argument("--input", required=True, help="detections JSON-lines file")
    ev.add_argument("--gt", required=True, help="ground-truth JSON-lines file")
    ev.add_argument("--output", help="write the summary here instead of stdout")
    ev.add_argument("--json", action="store_true")

    gc = sub.add_parser("gradcheck", help="finite-difference check of tape gradients")
    gc.add_argument("--op", help="op/block name or 'all'")
    gc.add_argument("--config", help="check a built model's input gradient instead")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--trials", type=int, default=10)
    gc.add_argument("--json", action="store_true")
    return parser


def _emit(text: str, output: str | None) -> None:
    if output:
        with open(output, "w", encoding="utf-8") as f:
            f.write(text if text.endswith("\n") else text + "\n")
    else:
        print(text)


def _require_files(*paths: str) -> None:
    for path in paths:
        if path and not os.path.exists(path):
            raise FileNotFoundError(f"no such file: {path}")


def _cmd_forward(args) -> int:
    _require_files(args.config, args.input)
    model = graph.build_model(graph.load_config(args.config), seed=args.seed)
    image = read_tensor(args.input)
    boxes, scores = graph.forward_full(model, image)
    candidates = H.detections_from_rows(boxes, scores, args.score_thresh)
    kept = H.nms(candidates, args.iou_thresh, args.score_thresh)
    name = os.path.splitext(os.path.basename(args.input))[0]
    records = [coco_eval.DetRecord(name, d.box, d.class_id, d.score) for d in kept]
    print(
        f"# seed={args.seed} config={args.config} input={args.input} "
        f"detections={len(records)}",
        file=sys.stderr,
    )
    if args.output:
        with open(args.output, "w", encoding="utf-8") as f:
            coco_eval.write_detections(f, records)
    else:
        coco_eval.write_detections(sys.stdout, records)
    return 0


def _cmd_flops(args) -> int:
    _require_files(args.config)
    model = graph.build_model(graph.load_config(args.config), seed=args.seed)
    report = graph.count_complexity(model)
    if args.json:
        payload = report.to_json()
        payload["seed"] = args.seed
        _emit(json.dumps(payload, indent=2, sort_keys=True), args.output)
    else:
        _emit(f"# seed={args.seed} config={args.config}\n" + report.to_text(), args.output)
    return 0


def _cmd_erf(args) -> int:
    _require_files(args.config)
    model = graph.build_model(graph.load_config(args.config), seed=args.seed)
    erf = graph.estimate_erf(model, args.probe, seed=args.seed, threshold=args.erf_thresh)
    if args.output:
        with open(args.output, "wb") as f:
            write_cten(f, erf.magnitudes.astype(np.float32))
    if args.json:
        print(
            json.dumps(
                {
                    "seed": args.seed,
                    "probe": args.probe,
                    "threshold": erf.threshold,
                    "area_fraction": erf.area_fraction,
                },
                sort_keys=True,
            )
        )
    else:
        print(f"# seed={args.seed} probe={args.probe} threshold={erf.threshold}")
        print(f"area_fraction {erf.area_fraction:.6f}")
    return 0


def _cmd_reparam_check(args) -> int:
    _require_files(args.config)
    model = graph.build_model(graph.load_config(args.config), seed=args.seed)
    if model.head is None:
        raise graph.GraphError("config declares no detection head to re-parameterize")
    block = model.head.detail_block
    merged = H.reparameterize(block)
    rng = np.random.default_rng(args.seed)
    c = block.in_channels
    worst = 0.0
    for _ in range(args.trials):
        x = Tensor(rng.uniform(-1.0, 1.0, (1, c, 8, 8)).astype(np.float32))
        a = H.detail_forward(x, block).data
        b = H.detail_forward(x, merged).data
        worst = max(worst, float(np.abs(a - b).max()))
    ok = worst <= 1e-5
    if args.json:
        print(json.dumps({"seed": args.seed, "trials": args.trials, "max_abs_diff": worst, "pass": ok}, sort_keys=True))
    else:
        print(f"# seed={args.seed} trials={args.trials}")
        print(f"max_abs_diff {worst:.3e} ({'pass' if ok else 'FAIL'})")
    return 0 if ok else 1


def _cmd_eval(args) -> int:
    _require_files(args.input, args.gt)
    dets = coco_eval.read_detections(args.input)
    gts = coco_eval.read_ground_truth(args.gt)
    summary = coco_eval.summarize(dets, gts)
    if args.json:
        _emit(json.dumps(summary.to_json(), indent=2, sort_keys=True), args.output)
    else:
        _emit(f"# detections={len(dets)} ground_truth={len(gts)}\n" + summary.to_text(), args.output)
    return 0


def _cmd_gradcheck(args) -> int:
    if bool(args.op) == bool(args.config):
        raise ValueError("gradcheck needs exactly one of --op or --config")
    if args.config:
        _require_files(args.config)
        model = graph.build_model(graph.load_config(args.config), seed=args.seed)
        results = [gradcheck.check_model(model, seed=args.seed)]
    elif args.op == "all":
        results = gradcheck.run_checks(seed=args.seed, trials=args.trials)
    else:
        results = [gradcheck.check_target(args.op, seed=args.seed, trials=args.trials)]
    ok = all(r.passed for r in results)
    if args.json:
        print(
            json.dumps(
                {
                    "seed": args.seed,
                    "tolerance": gradcheck.TOLERANCE,
                    "results": {r.name: r.max_rel_error for r in results},
                    "pass": ok,
                },
                sort_keys=True,
            )
        )
    else:
        print(f"# seed={args.seed} tolerance={gradcheck.TOLERANCE}")
        for r in results:
            print(f"{r.name:20s} {r.max_rel_error:.3e} ({'pass' if r.passed else 'FAIL'})")
    return 0 if ok else 1


_COMMANDS = {
    "forward": _cmd_forward,
    "flops": _cmd_flops,
    "erf": _cmd_erf,
    "reparam-check": _cmd_reparam_check,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ShapeError, graph.GraphError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
