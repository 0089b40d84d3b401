"""Detail-aware detection head.

Shared pointwise projection into a hidden width, a shared multi-branch detail
convolution, decoupled box/class stacks, distribution-to-distance decoding,
anchor-based box recovery, greedy non-maximum suppression, and branch-merge
re-parameterization for inference.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .complexity import FlopsReport, LayerCost, conv_macs
from .ops import ConvParams, add, concat, conv2d, rand_conv, scale, sigmoid, softmax_channel
from .tensor import GradTape, ShapeError, Tensor

__all__ = [
    "SCALES",
    "DflConfig",
    "DetailBranch",
    "DetailConv",
    "UdaHeadParams",
    "AnchorGrid",
    "Detection",
    "detail_forward",
    "reparameterize",
    "make_detail_conv",
    "make_uda_head",
    "make_anchors",
    "dfl_decode",
    "dist2bbox",
    "uda_scale_maps",
    "uda_forward",
    "detections_from_rows",
    "nms",
    "head_complexity",
]

SCALES = ("xs", "s", "m", "l")


@dataclass(frozen=True)
class DflConfig:
    """Bin count for representing each box side as a discrete distribution."""

    bins: int = 16

    def __post_init__(self) -> None:
        if self.bins < 2:
            raise ValueError(f"need at least 2 bins, got {self.bins}")

    @property
    def bin_values(self) -> np.ndarray:
        return np.arange(self.bins, dtype=np.float32)


@dataclass(frozen=True)
class DetailBranch:
    """One linear branch of the detail convolution.

    ``standard`` applies the stored kernel as-is. ``central_diff`` constrains
    the kernel so its elements sum to zero by subtracting the kernel total at
    the center tap, which makes the branch respond to local differences only.
    """

    kind: str
    conv: ConvParams

    def __post_init__(self) -> None:
        if self.kind not in ("standard", "central_diff"):
            raise ValueError(f"unknown branch kind {self.kind!r}")
        kh, kw = self.conv.kernel_extent
        if kh != kw or kh % 2 == 0:
            raise ShapeError(f"branch kernels must be square and odd, got {kh}x{kw}")
        if self.conv.stride != 1 or self.conv.groups != 1:
            raise ShapeError("branches must use stride 1 and groups 1")
        if self.conv.padding != kh // 2:
            raise ShapeError(f"branch padding must be {kh // 2} for a {kh}x{kw} kernel")
        if self.kind == "central_diff" and kh < 3:
            raise ShapeError("central_diff branches need a kernel of at least 3x3")

    def effective_kernel(self) -> np.ndarray:
        k = self.conv.kernel.copy_array()
        if self.kind == "central_diff":
            kh, kw = self.conv.kernel_extent
            k[:, :, kh // 2, kw // 2] -= self.conv.kernel.data.sum(axis=(2, 3))
        return k

    def effective_conv(self) -> ConvParams:
        return ConvParams(
            Tensor(self.effective_kernel(), _own=True),
            self.conv.bias,
            stride=1,
            padding=self.conv.padding,
        )


@dataclass(frozen=True)
class DetailConv:
    """Parallel linear branches plus the optional merged inference kernel.

    When ``merged`` is present the forward pass runs the single kernel; its
    output matches the summed branch outputs to within float rounding.
    """

    branches: tuple[DetailBranch, ...]
    merged: ConvParams | None = None

    def __post_init__(self) -> None:
        if not self.branches:
            raise ShapeError("detail conv needs at least one branch")
        first = self.branches[0].conv
        for b in self.branches[1:]:
            if b.conv.out_channels != first.out_channels or b.conv.in_channels != first.in_channels:
                raise ShapeError(
                    "incompatible branch geometry: channel contracts differ "
                    f"({b.conv.in_channels}->{b.conv.out_channels} vs "
                    f"{first.in_channels}->{first.out_channels})"
                )

    @property
    def in_channels(self) -> int:
        return self.branches[0].conv.in_channels

    @property
    def out_channels(self) -> int:
        return self.branches[0].conv.out_channels


def detail_forward(x: Tensor, d: DetailConv, tape: GradTape | None = None) -> Tensor:
    if d.merged is not None:
        return conv2d(x, d.merged, tape)
    acc = conv2d(x, d.branches[0].effective_conv(), tape)
    for b in d.branches[1:]:
        acc = add(acc, conv2d(x, b.effective_conv(), tape), tape)
    return acc


def reparameterize(d: DetailConv) -> DetailConv:
    """Collapse the parallel branches into one kernel on the common support.

    Smaller kernels are lifted by zero-centering them inside the largest
    extent; effective kernels and biases sum. Returns a new record, leaving
    the input untouched.
    """
    support = max(b.conv.kernel_extent[0] for b in d.branches)
    c_out = d.out_channels
    c_in = d.in_channels
    kernel = np.zeros((c_out, c_in, support, support), dtype=np.float64)
    bias = np.zeros(c_out, dtype=np.float64)
    for b in d.branches:
        k = b.effective_kernel().astype(np.float64)
        ext = k.shape[2]
        off = (support - ext) // 2
        kernel[:, :, off : off + ext, off : off + ext] += k
        bias += b.conv.bias.astype(np.float64)
    merged = ConvParams(
        Tensor(kernel.astype(np.float32), _own=True),
        bias.astype(np.float32),
        stride=1,
        padding=support // 2,
    )
    return replace(d, merged=merged)


def make_detail_conv(rng: np.random.Generator, channels: int) -> DetailConv:
    return DetailConv(
        branches=(
            DetailBranch("standard", rand_conv(rng, channels, channels, kernel=3)),
            DetailBranch("central_diff", rand_conv(rng, channels, channels, kernel=3)),
        )
    )


@dataclass(frozen=True)
class UdaHeadParams:
    """Per-scale projections plus the shared detail block and prediction stacks."""

    shared_proj: Mapping[str, ConvParams]
    detail_block: DetailConv
    box_head: tuple[ConvParams, ...]
    cls_head: tuple[ConvParams, ...]
    box_scales: Mapping[str, float]
    dfl: DflConfig

    def __post_init__(self) -> None:
        if set(self.box_scales) != set(self.shared_proj):
            raise ShapeError("box_scales and shared_proj must cover the same scales")
        if not self.box_head or not self.cls_head:
            raise ShapeError("box and class stacks need at least one convolution")
        if self.box_head[-1].out_channels != 4 * self.dfl.bins:
            raise ShapeError(
                f"box stack must emit {4 * self.dfl.bins} channels (4 sides x "
                f"{self.dfl.bins} bins), got {self.box_head[-1].out_channels}"
            )
        hidden = self.detail_block.in_channels
        for name, proj in self.shared_proj.items():
            if proj.out_channels != hidden:
                raise ShapeError(
                    f"projection for scale {name!r} emits {proj.out_channels} channels, "
                    f"detail block expects {hidden}"
                )

    @property
    def hidden_channels(self) -> int:
        return self.detail_block.in_channels

    @property
    def num_classes(self) -> int:
        return self.cls_head[-1].out_channels


def make_uda_head(
    rng: np.random.Generator,
    in_channels: Mapping[str, int],
    hidden: int,
    num_classes: int,
    bins: int = 16,
) -> UdaHeadParams:
    dfl = DflConfig(bins)
    return UdaHeadParams(
        shared_proj={s: rand_conv(rng, c, hidden, kernel=1) for s, c in in_channels.items()},
        detail_block=make_detail_conv(rng, hidden),
        box_head=(
            rand_conv(rng, hidden, hidden, kernel=3),
            rand_conv(rng, hidden, 4 * bins, kernel=1),
        ),
        cls_head=(
            rand_conv(rng, hidden, hidden, kernel=3),
            rand_conv(rng, hidden, num_classes, kernel=1),
        ),
        box_scales={s: 1.0 for s in in_channels},
        dfl=dfl,
    )


@dataclass(frozen=True)
class AnchorGrid:
    """Cell-unit anchor centers (x+0.5, y+0.5) per scale plus integer strides.

    Center ordering within one scale is row-major over (y, x), matching the
    flatten order of the prediction maps; scales follow the given tuple.
    """

    scales: tuple[str, ...]
    centers: Mapping[str, np.ndarray]
    strides: Mapping[str, int]

    def __post_init__(self) -> None:
        prev = 0
        for s in self.scales:
            if s not in self.centers or s not in self.strides:
                raise ShapeError(f"anchor grid missing scale {s!r}")
            stride = self.strides[s]
            if stride <= prev:
                raise ShapeError(
                    f"strides must be strictly increasing from finest to coarsest, "
                    f"got {stride} after {prev}"
                )
            prev = stride

    @property
    def count(self) -> int:
        return sum(self.centers[s].shape[0] for s in self.scales)

    def flat_centers(self) -> np.ndarray:
        return np.concatenate([self.centers[s] for s in self.scales], axis=0)

    def flat_strides(self) -> np.ndarray:
        return np.concatenate(
            [np.full(self.centers[s].shape[0], self.strides[s], dtype=np.float64) for s in self.scales]
        )


def make_anchors(
    feature_extents: Mapping[str, tuple[int, int]],
    strides: Mapping[str, int],
    scales: Sequence[str] = SCALES,
) -> AnchorGrid:
    centers = {}
    for s in scales:
        h, w = feature_extents[s]
        if h < 1 or w < 1:
            raise ShapeError(f"feature extents must be positive, got {h}x{w} at {s!r}")
        gx, gy = np.meshgrid(np.arange(w, dtype=np.float64) + 0.5, np.arange(h, dtype=np.float64) + 0.5)
        centers[s] = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return AnchorGrid(scales=tuple(scales), centers=centers, strides=dict(strides))


@dataclass(frozen=True)
class Detection:
    """Decoded box in pixel corner form with class index and confidence."""

    box: tuple[float, float, float, float]
    class_id: int
    score: float

    def __post_init__(self) -> None:
        x1, y1, x2, y2 = self.box
        if x2 < x1 or y2 < y1:
            raise ValueError(f"box corners out of order: {self.box}")
        if not 0.0 < self.score < 1.0:
            raise ValueError(f"score must lie in (0, 1), got {self.score}")


def dfl_decode(box_logits: Tensor, r: DflConfig, tape: GradTape | None = None) -> Tensor:
    """Per-side softmax expectation over the bin axis; 4R channels -> 4 distances."""
    c = box_logits.shape[1]
    if c % 4 != 0:
        raise ShapeError(f"dfl_decode: {c} channels not divisible by 4 sides (channel dim)")
    if c != 4 * r.bins:
        raise ShapeError(f"dfl_decode: expected {4 * r.bins} channels for {r.bins} bins, got {c}")
    probs = softmax_channel(box_logits, r.bins, tape)
    kernel = np.zeros((4, r.bins, 1, 1), dtype=np.float32)
    kernel[:, :, 0, 0] = r.bin_values
    expect = ConvParams(Tensor(kernel, _own=True), np.zeros(4, dtype=np.float32), groups=4)
    return conv2d(probs, expect, tape)


def dist2bbox(distances: np.ndarray, anchors: AnchorGrid) -> np.ndarray:
    """(left, top, right, bottom) cell-unit distances -> pixel corner boxes."""
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != 4:
        raise ShapeError(f"dist2bbox: expected (N, 4) distances, got {d.shape}")
    if d.shape[0] != anchors.count:
        raise ShapeError(
            f"dist2bbox: {d.shape[0]} rows for {anchors.count} anchor centers"
        )
    if (d < 0).any():
        raise ValueError("dist2bbox: negative distance (decode contract violated upstream)")
    centers = anchors.flat_centers()
    s = anchors.flat_strides()[:, None]
    cx, cy = centers[:, 0:1], centers[:, 1:2]
    l, t, rr, b = d[:, 0:1], d[:, 1:2], d[:, 2:3], d[:, 3:4]
    boxes = np.concatenate([(cx - l), (cy - t), (cx + rr), (cy + b)], axis=1) * np.concatenate(
        [s, s, s, s], axis=1
    )
    return boxes.astype(np.float32)


def _conv_stack(x: Tensor, stack: Sequence[ConvParams], tape: GradTape | None) -> Tensor:
    for p in stack:
        x = conv2d(x, p, tape)
    return x


def uda_scale_maps(
    features: Mapping[str, Tensor],
    p: UdaHeadParams,
    tape: GradTape | None = None,
) -> dict[str, tuple[Tensor, Tensor, Tensor]]:
    """Run the head per scale; returns (merged logits, decoded distances,
    sigmoid scores) maps keyed by scale."""
    missing = [s for s in SCALES if s not in features]
    if missing:
        raise ShapeError(f"uda head: missing scale(s) {missing}")
    out: dict[str, tuple[Tensor, Tensor, Tensor]] = {}
    for s in SCALES:
        g = detail_forward(conv2d(features[s], p.shared_proj[s], tape), p.detail_block, tape)
        box_logits = scale(_conv_stack(g, p.box_head, tape), p.box_scales[s], tape)
        cls_logits = _conv_stack(g, p.cls_head, tape)
        p_map = concat([box_logits, cls_logits], tape)
        dist = dfl_decode(box_logits, p.dfl, tape)
        score = sigmoid(cls_logits, tape)
        out[s] = (p_map, dist, score)
    return out


def _flatten_rows(t: Tensor) -> np.ndarray:
    # (1, C, H, W) -> (H*W, C), row-major over (y, x)
    _, c, h, w = t.shape
    return t.data.reshape(c, h * w).T


def uda_forward(
    features: Mapping[str, Tensor],
    p: UdaHeadParams,
    anchors: AnchorGrid,
    tape: GradTape | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Decode one image: returns (boxes (N, 4) pixels, scores (N, num_classes))."""
    for s in SCALES:
        if s in features and features[s].shape[0] != 1:
            raise ShapeError("uda_forward decodes one image at a time (batch extent 1)")
    maps = uda_scale_maps(features, p, tape)
    if tuple(anchors.scales) != SCALES:
        raise ShapeError(f"anchor grid scales {anchors.scales} must be {SCALES}")
    for s in SCALES:
        h, w = features[s].shape[2], features[s].shape[3]
        if anchors.centers[s].shape[0] != h * w:
            raise ShapeError(
                f"anchors inconsistent with feature extents at scale {s!r}: "
                f"{anchors.centers[s].shape[0]} centers for {h}x{w} map"
            )
    dist_rows = np.concatenate([_flatten_rows(maps[s][1]) for s in SCALES], axis=0)
    score_rows = np.concatenate([_flatten_rows(maps[s][2]) for s in SCALES], axis=0)
    boxes = dist2bbox(dist_rows, anchors)
    return boxes, score_rows.astype(np.float32)


def detections_from_rows(
    boxes: np.ndarray, scores: np.ndarray, score_threshold: float = 0.25
) -> list[Detection]:
    """One candidate per (row, class) pair above the threshold, row-major order."""
    dets = []
    for i in range(scores.shape[0]):
        for c in range(scores.shape[1]):
            sc = float(scores[i, c])
            if sc > score_threshold:
                dets.append(Detection(tuple(float(v) for v in boxes[i]), c, sc))
    return dets


def _pair_iou(a: Sequence[float], b: Sequence[float]) -> float:
    # Tolerant of degenerate boxes (zero overlap), unlike the evaluator's iou.
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms(
    detections: Sequence[Detection],
    iou_threshold: float = 0.45,
    score_threshold: float = 0.25,
) -> list[Detection]:
    """Class-wise greedy suppression, deterministic tie-break by (score desc,
    input index asc). Retained boxes never overlap above the threshold within
    one class, and all retained scores exceed the score threshold."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    ranked = sorted(
        ((d, i) for i, d in enumerate(detections) if d.score > score_threshold),
        key=lambda t: (-t[0].score, t[1]),
    )
    kept: list[Detection] = []
    for d, _ in ranked:
        if any(
            k.class_id == d.class_id and _pair_iou(k.box, d.box) > iou_threshold for k in kept
        ):
            continue
        kept.append(d)
    return kept


def head_complexity(
    p: UdaHeadParams, feature_extents: Mapping[str, tuple[int, int]]
) -> FlopsReport:
    """MAC/parameter ledger for the head over the given feature extents.

    Entries carry attribution buckets: ``shared_block`` for hidden->hidden
    kernels (quadratic in the hidden width), ``projection`` for everything
    linear in it, and ``dfl`` for the decode expectation (4*bins MACs per
    location). Shared components count their parameters once but their MACs
    at every scale. Memory totals cover the hidden features and the
    prediction logits.
    """
    hidden = p.hidden_channels
    scales = [s for s in SCALES if s in feature_extents]
    n_total = sum(h * w for h, w in (feature_extents[s] for s in scales))

    entries: list[LayerCost] = []
    for s in scales:
        h, w = feature_extents[s]
        proj = p.shared_proj[s]
        entries.append(LayerCost(f"proj.{s}", proj.param_count(), conv_macs(proj, 1, h, w), "projection"))

    def shared_entry(name: str, conv: ConvParams, term: str) -> LayerCost:
        macs = sum(conv_macs(conv, 1, h, w) for h, w in (feature_extents[s] for s in scales))
        return LayerCost(name, conv.param_count(), macs, term)

    if p.detail_block.merged is not None:
        entries.append(shared_entry("detail.merged", p.detail_block.merged, "shared_block"))
    else:
        for i, b in enumerate(p.detail_block.branches):
            entries.append(shared_entry(f"detail.branch{i}", b.conv, "shared_block"))
    # Within each stack, every conv but the final logit projection works at
    # the hidden width, so its cost is quadratic in it.
    for stack_name, stack in (("box_head", p.box_head), ("cls_head", p.cls_head)):
        for i, conv in enumerate(stack):
            term = "projection" if i == len(stack) - 1 else "shared_block"
            entries.append(shared_entry(f"{stack_name}.{i}", conv, term))
    entries.append(LayerCost("dfl_decode", 0, n_total * 4 * p.dfl.bins, "dfl"))

    memory = {
        "hidden_features": n_total * hidden,
        "prediction_logits": n_total * (4 * p.dfl.bins + p.num_classes),
    }
    return FlopsReport(tuple(entries), memory=memory)
