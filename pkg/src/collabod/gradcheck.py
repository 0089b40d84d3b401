"""Central finite-difference verification of tape gradients.

Each check draws inputs in [-1, 1] and parameters at their usual 1/sqrt(fan_in)
scale, builds a scalar objective as a randomly weighted sum over the outputs,
and compares the tape gradient against central differences at step 1e-3.
The error metric is |analytic - numeric| / max(|analytic|, |numeric|, 1):
relative for gradients of usual size, absolute below unit scale where float32
forward rounding limits what central differences can resolve.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import blocks as B
from . import head as H
from . import ops
from .tensor import GradTape, Tensor

__all__ = [
    "CheckResult",
    "OP_CHECKS",
    "BLOCK_CHECKS",
    "check_target",
    "run_checks",
    "check_model",
    "relative_error",
    "STEP",
    "TOLERANCE",
]

STEP = 1e-3
TOLERANCE = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1.0)
    return float((np.abs(a - f) / denom).max())


# A case builder returns (input arrays, forward) where forward maps tensors to
# the list of output tensors the objective is summed over, with optional
# per-output weight scaling to keep every output near unit magnitude.
Forward = Callable[[Sequence[Tensor], "GradTape | None"], Sequence[Tensor]]
Case = tuple[list[np.ndarray], Forward, list[float]]


def _u(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, shape).astype(np.float32)


def _pool_gap_ok(arr: np.ndarray, window: int, stride: int, padding: int, min_gap: float = 0.02) -> bool:
    """True when every pooling window has a clear top-two gap, so the 1e-3
    perturbation can never flip an argmax mid-difference."""
    from numpy.lib.stride_tricks import sliding_window_view

    n, c, h, w = arr.shape
    xp = np.full((n, c, h + 2 * padding, w + 2 * padding), -np.inf, dtype=np.float32)
    xp[:, :, padding : padding + h, padding : padding + w] = arr
    win = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win.reshape(*win.shape[:4], -1)
    ranked = np.sort(win, axis=-1)
    gap = ranked[..., -1] - ranked[..., -2]
    return bool(np.all(gap[np.isfinite(gap)] >= min_gap))


def _pool_safe(rng: np.random.Generator, shape, window: int, stride: int, padding: int) -> np.ndarray:
    for _ in range(256):
        x = _u(rng, shape)
        if _pool_gap_ok(x, window, stride, padding):
            return x
    raise RuntimeError("could not draw a tie-free pooling input")


def _case_conv2d(rng) -> Case:
    stride = int(rng.integers(1, 3))
    p = ops.rand_conv(rng, 3, 4, kernel=3, stride=stride, padding=1)
    return [_u(rng, (1, 3, 5, 5))], lambda ts, tape: [ops.conv2d(ts[0], p, tape)], [1.0]


def _case_conv2d_grouped(rng) -> Case:
    p = ops.rand_conv(rng, 4, 4, kernel=3, groups=2)
    return [_u(rng, (1, 4, 5, 5))], lambda ts, tape: [ops.conv2d(ts[0], p, tape)], [1.0]


def _case_max_pool2d(rng) -> Case:
    x = _pool_safe(rng, (1, 2, 6, 6), 3, 2, 1)
    return [x], lambda ts, tape: [ops.max_pool2d(ts[0], 3, 2, 1, tape)], [1.0]


def _case_sigmoid(rng) -> Case:
    return [_u(rng, (1, 2, 4, 4))], lambda ts, tape: [ops.sigmoid(ts[0], tape)], [1.0]


def _case_softmax_channel(rng) -> Case:
    return (
        [_u(rng, (1, 8, 3, 3))],
        lambda ts, tape: [ops.softmax_channel(ts[0], 4, tape)],
        [1.0],
    )


def _case_concat(rng) -> Case:
    return (
        [_u(rng, (1, 2, 4, 4)), _u(rng, (1, 3, 4, 4))],
        lambda ts, tape: [ops.concat(list(ts), tape)],
        [1.0],
    )


def _case_split(rng) -> Case:
    return (
        [_u(rng, (1, 6, 3, 3))],
        lambda ts, tape: ops.split(ts[0], (2, 3, 1), tape),
        [1.0, 1.0, 1.0],
    )


def _case_upsample(rng) -> Case:
    return (
        [_u(rng, (1, 2, 3, 3))],
        lambda ts, tape: [ops.upsample_nearest(ts[0], 2, tape)],
        [1.0],
    )


def _case_add(rng) -> Case:
    return (
        [_u(rng, (1, 3, 4, 4)), _u(rng, (1, 3, 4, 4))],
        lambda ts, tape: [ops.add(ts[0], ts[1], tape)],
        [1.0],
    )


def _case_mul(rng) -> Case:
    return (
        [_u(rng, (1, 3, 4, 4)), _u(rng, (1, 3, 4, 4))],
        lambda ts, tape: [ops.mul(ts[0], ts[1], tape)],
        [1.0],
    )


def _case_scale(rng) -> Case:
    factor = float(rng.uniform(-2.0, 2.0))
    return [_u(rng, (1, 2, 4, 4))], lambda ts, tape: [ops.scale(ts[0], factor, tape)], [1.0]


def _case_scale_channels(rng) -> Case:
    w = rng.uniform(-1.5, 1.5, 3).astype(np.float32)
    return (
        [_u(rng, (1, 3, 4, 4))],
        lambda ts, tape: [ops.scale_channels(ts[0], w, tape)],
        [1.0],
    )


def _case_composite(rng) -> Case:
    # conv -> max-pool -> sigmoid chain, the smallest realistic pipeline
    p = ops.rand_conv(rng, 2, 3, kernel=3, padding=1)

    def forward(ts, tape):
        return [ops.sigmoid(ops.max_pool2d(ops.conv2d(ts[0], p, tape), 3, 2, 1, tape), tape)]

    for _ in range(256):
        x = _u(rng, (1, 2, 6, 6))
        if _pool_gap_ok(ops.conv2d(Tensor(x), p).data, 3, 2, 1, min_gap=0.01):
            return [x], forward, [1.0]
    raise RuntimeError("could not draw a tie-free composite input")


def _case_dpf_stem(rng) -> Case:
    p = B.make_dpf_stem(rng, 3, 6)

    def structure_stream(x: np.ndarray) -> np.ndarray:
        emb = ops.conv2d(Tensor(x), p.embed)
        return ops.split(emb, p.split_sizes)[0].data

    for _ in range(256):
        x = _u(rng, (1, 3, 6, 6))
        if _pool_gap_ok(structure_stream(x), p.pool_window[0], 1, 1, min_gap=0.01):
            return [x], lambda ts, tape: [B.dpf_stem_forward(ts[0], p, tape)], [1.0]
    raise RuntimeError("could not draw a tie-free stem input")


def _case_dablock(rng) -> Case:
    p = B.make_dablock(rng, [(5, 1, 1), (3, 1, 2), (2, 2, 1)], out_channels=4, residual=1)

    def forward(ts, tape):
        return [B.dablock_forward(ts[1:], ts[0], p, tape)]

    arrays = [
        _u(rng, (1, 4, 4, 4)),  # current stage
        _u(rng, (1, 5, 4, 4)),  # same scale
        _u(rng, (1, 3, 2, 2)),  # coarser
        _u(rng, (1, 2, 8, 8)),  # finer
    ]
    return arrays, forward, [1.0]


def _case_brm(rng) -> Case:
    p = B.make_brm(rng, 3, 4, embed_channels=4)
    return (
        [_u(rng, (1, 3, 5, 5)), _u(rng, (1, 3, 5, 5))],
        lambda ts, tape: [B.brm_forward(ts[0], ts[1], p, tape)],
        [1.0],
    )


def _case_uda_head(rng) -> Case:
    p = H.make_uda_head(rng, {s: 3 for s in H.SCALES}, hidden=6, num_classes=3, bins=4)
    extents = {"xs": 4, "s": 4, "m": 2, "l": 2}

    def forward(ts, tape):
        features = dict(zip(H.SCALES, ts))
        maps = H.uda_scale_maps(features, p, tape)
        outs = []
        for s in H.SCALES:
            outs.extend(maps[s][1:])  # decoded distances and sigmoid scores
        return outs

    arrays = [_u(rng, (1, 3, extents[s], extents[s])) for s in H.SCALES]
    # Distances live on the [0, bins-1] scale; weigh them down to unit size.
    weights = [1.0 / (p.dfl.bins - 1), 1.0] * len(H.SCALES)
    return arrays, forward, weights


OP_CHECKS = {
    "conv2d": _case_conv2d,
    "conv2d_grouped": _case_conv2d_grouped,
    "max_pool2d": _case_max_pool2d,
    "sigmoid": _case_sigmoid,
    "softmax_channel": _case_softmax_channel,
    "concat": _case_concat,
    "split": _case_split,
    "upsample_nearest": _case_upsample,
    "add": _case_add,
    "mul": _case_mul,
    "scale": _case_scale,
    "scale_channels": _case_scale_channels,
    "composite": _case_composite,
}

BLOCK_CHECKS = {
    "dpf_stem": _case_dpf_stem,
    "dablock": _case_dablock,
    "brm": _case_brm,
    "uda_head": _case_uda_head,
}

ALL_CHECKS = {**OP_CHECKS, **BLOCK_CHECKS}


def _objective(forward: Forward, arrays, weights) -> float:
    outs = forward([Tensor(a) for a in arrays], None)
    total = 0.0
    for (w, scale_w), out in zip(weights, outs):
        total += float((w * scale_w * out.data.astype(np.float64)).sum())
    return total


def _check_once(case: Case, rng: np.random.Generator) -> float:
    arrays, forward, scales = case
    tensors = [Tensor(a) for a in arrays]
    tape = GradTape()
    outs = forward(tensors, tape)
    weights = [(rng.uniform(0.5, 1.5, o.shape), s) for o, s in zip(outs, scales)]
    seeds = {o.tid: w * s for o, (w, s) in zip(outs, weights)}
    grads = tape.backward_from(seeds)

    worst = 0.0
    for arr, t in zip(arrays, tensors):
        analytic = grads.get(t.tid)
        if analytic is None:
            analytic = np.zeros(arr.shape)
        numeric = np.zeros(arr.shape)
        flat = arr.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            hi = np.float32(orig + STEP)
            lo = np.float32(orig - STEP)
            flat[i] = hi
            f_hi = _objective(forward, arrays, weights)
            flat[i] = lo
            f_lo = _objective(forward, arrays, weights)
            flat[i] = orig
            num_flat[i] = (f_hi - f_lo) / (float(hi) - float(lo))
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def check_target(name: str, seed: int = 0, trials: int = 10) -> CheckResult:
    """Run one named check for the given number of seeded trials."""
    try:
        builder = ALL_CHECKS[name]
    except KeyError:
        raise ValueError(f"unknown gradcheck target {name!r} (see OP_CHECKS/BLOCK_CHECKS)") from None
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        worst = max(worst, _check_once(builder(rng), rng))
    return CheckResult(name, worst)


def run_checks(
    names: Sequence[str] | None = None, seed: int = 0, trials: int = 10
) -> list[CheckResult]:
    targets = list(names) if names is not None else list(ALL_CHECKS)
    return [check_target(n, seed=seed, trials=trials) for n in targets]


def check_model(model, samples: int = 32, seed: int = 0) -> CheckResult:
    """Spot-check a built model's input gradient on a random coordinate subset.

    The objective sums the decoded distance maps (scaled to unit range) and
    the score maps when a head is present, else the final layer activations.
    """
    rng = np.random.default_rng(seed)
    image_arr = _u(rng, model.config.input_shape)

    def forward(arr, tape):
        image = Tensor(arr)
        acts = model.run_layers(image, tape)
        if model.head is None:
            return image, [acts[model.layers[-1].spec.id]], [1.0]
        maps = H.uda_scale_maps(model.head_features(acts), model.head, tape)
        outs, scales = [], []
        for s in H.SCALES:
            outs.extend(maps[s][1:])
            scales.extend([1.0 / (model.head.dfl.bins - 1), 1.0])
        return image, outs, scales

    tape = GradTape()
    image, outs, scales = forward(image_arr, tape)
    weights = [(rng.uniform(0.5, 1.5, o.shape), s) for o, s in zip(outs, scales)]
    seeds = {o.tid: w * s for o, (w, s) in zip(outs, weights)}
    analytic = tape.backward_from(seeds).get(image.tid)
    if analytic is None:
        analytic = np.zeros(image_arr.shape)

    def objective() -> float:
        _, outs2, _ = forward(image_arr, None)
        total = 0.0
        for (w, s), out in zip(weights, outs2):
            total += float((w * s * out.data.astype(np.float64)).sum())
        return total

    flat = image_arr.reshape(-1)
    count = min(samples, flat.size)
    picks = rng.choice(flat.size, size=count, replace=False)
    worst = 0.0
    for i in picks:
        orig = flat[i]
        hi = np.float32(orig + STEP)
        lo = np.float32(orig - STEP)
        flat[i] = hi
        f_hi = objective()
        flat[i] = lo
        f_lo = objective()
        flat[i] = orig
        numeric = (f_hi - f_lo) / (float(hi) - float(lo))
        a = float(analytic.reshape(-1)[i])
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1.0))
    return CheckResult("model_input", worst)
