"""Feature-path blocks: dual-path fusion stem, dense aggregation, bilateral reweighting.

Each block is a pure composition of the operators in :mod:`collabod.ops`;
parameter records are frozen dataclasses built once and shared freely across
concurrent forward calls.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ops import (
    ConvParams,
    add,
    concat,
    conv2d,
    max_pool2d,
    mul,
    rand_conv,
    scale_channels,
    sigmoid,
    split,
    upsample_nearest,
)
from .tensor import GradTape, ShapeError, Tensor

__all__ = [
    "DpfStemParams",
    "AlignSpec",
    "DaBlockParams",
    "BrmParams",
    "dpf_stem_forward",
    "dablock_forward",
    "brm_forward",
    "make_dpf_stem",
    "make_dablock",
    "make_brm",
]


@dataclass(frozen=True)
class DpfStemParams:
    """Dual-path stem: embed, split into structure/detail streams, fuse at half scale.

    The structure stream is a scale-preserving max-pool; the detail stream is a
    depthwise 3x3 followed by a pointwise mix. Downsampling lives entirely in
    the stride-2 fuse convolution.
    """

    embed: ConvParams
    detail_dw: ConvParams
    detail_pw: ConvParams
    pool_window: tuple[int, int]
    fuse: ConvParams
    split_sizes: tuple[int, int]

    def __post_init__(self) -> None:
        c_s, c_d = self.split_sizes
        if c_s < 1 or c_d < 1 or c_s + c_d != self.embed.out_channels:
            raise ShapeError(
                f"split sizes {self.split_sizes} must be positive and sum to the "
                f"embedding width {self.embed.out_channels}"
            )
        kh, kw = self.pool_window
        if kh != kw or kh % 2 == 0:
            raise ShapeError(f"pool window must be square and odd, got {self.pool_window}")
        if self.fuse.stride != 2:
            raise ShapeError(f"fuse convolution must have stride 2, got {self.fuse.stride}")

    @property
    def out_channels(self) -> int:
        return self.fuse.out_channels


def dpf_stem_forward(x: Tensor, p: DpfStemParams, tape: GradTape | None = None) -> Tensor:
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(
            f"dpf_stem: spatial extents must be even for the stride-2 fusion, "
            f"got {x.shape[2]}x{x.shape[3]}"
        )
    emb = conv2d(x, p.embed, tape)
    x_struct, x_detail = split(emb, p.split_sizes, tape)
    z_s = max_pool2d(x_struct, p.pool_window, stride=1, padding=(p.pool_window[0] - 1) // 2, tape=tape)
    z_d = conv2d(conv2d(x_detail, p.detail_dw, tape), p.detail_pw, tape)
    return conv2d(concat([z_s, z_d], tape), p.fuse, tape)


def make_dpf_stem(
    rng: np.random.Generator,
    c_in: int,
    embed_channels: int,
    out_channels: int | None = None,
    split_sizes: tuple[int, int] | None = None,
) -> DpfStemParams:
    if out_channels is None:
        out_channels = embed_channels
    if split_sizes is None:
        split_sizes = (embed_channels // 2, embed_channels - embed_channels // 2)
    c_d = split_sizes[1]
    return DpfStemParams(
        embed=rand_conv(rng, c_in, embed_channels, kernel=1),
        detail_dw=rand_conv(rng, c_d, c_d, kernel=3, groups=c_d),
        detail_pw=rand_conv(rng, c_d, c_d, kernel=1),
        pool_window=(3, 3),
        fuse=rand_conv(rng, embed_channels, out_channels, kernel=3, stride=2, padding=1),
        split_sizes=split_sizes,
    )


@dataclass(frozen=True)
class AlignSpec:
    """Brings one source onto the current scale: pointwise conv (stride > 1 for
    finer sources) then nearest upsampling (factor > 1 for coarser sources)."""

    conv: ConvParams
    up_factor: int = 1

    def __post_init__(self) -> None:
        if self.up_factor < 1:
            raise ShapeError(f"align up_factor must be >= 1, got {self.up_factor}")


@dataclass(frozen=True)
class DaBlockParams:
    """Dense aggregation: align sources, concatenate, refine with two stacked
    convolutions, optionally add the current-stage input back (residual=1)."""

    align: tuple[AlignSpec, ...]
    refine: tuple[ConvParams, ConvParams]
    residual: int = 1

    def __post_init__(self) -> None:
        if not self.align:
            raise ShapeError("dablock needs at least one source")
        if self.residual not in (0, 1):
            raise ShapeError(f"residual switch must be 0 or 1, got {self.residual}")


def dablock_forward(
    sources: Sequence[Tensor],
    x: Tensor,
    p: DaBlockParams,
    tape: GradTape | None = None,
) -> Tensor:
    if len(sources) != len(p.align):
        raise ShapeError(
            f"dablock: got {len(sources)} sources for {len(p.align)} align entries"
        )
    aligned = []
    for src, a in zip(sources, p.align):
        t = conv2d(src, a.conv, tape)
        if a.up_factor > 1:
            t = upsample_nearest(t, a.up_factor, tape)
        aligned.append(t)
    ref = aligned[0].shape
    for t in aligned[1:]:
        if t.shape != ref:
            raise ShapeError(f"dablock: aligned source shapes disagree ({t.shape} vs {ref})")
    if ref[2:] != x.shape[2:]:
        raise ShapeError(
            f"dablock: sources align to {ref[2]}x{ref[3]} but the current stage is "
            f"{x.shape[2]}x{x.shape[3]}"
        )
    r = conv2d(conv2d(concat(aligned, tape), p.refine[0], tape), p.refine[1], tape)
    if p.residual:
        if r.shape != x.shape:
            raise ShapeError(
                f"dablock: residual needs refine output {r.shape} to equal input {x.shape}"
            )
        r = add(r, x, tape)
    return r


def make_dablock(
    rng: np.random.Generator,
    sources: Sequence[tuple[int, int, int]],
    out_channels: int,
    mid_channels: int | None = None,
    residual: int = 1,
) -> DaBlockParams:
    """sources: per-source (channels, down_stride, up_factor) relative to the
    current scale. Aligned sources all carry ``mid_channels``."""
    if mid_channels is None:
        mid_channels = out_channels
    align = tuple(
        AlignSpec(
            conv=rand_conv(rng, c, mid_channels, kernel=1, stride=down, padding=0),
            up_factor=up,
        )
        for c, down, up in sources
    )
    refine = (
        rand_conv(rng, mid_channels * len(align), mid_channels, kernel=1),
        rand_conv(rng, mid_channels, out_channels, kernel=3),
    )
    return DaBlockParams(align=align, refine=refine, residual=residual)


@dataclass(frozen=True)
class BrmParams:
    """Bilateral reweighting of two same-scale paths.

    Both paths are embedded pointwise, jointly convolved to produce two sigmoid
    gate banks, rescaled per channel, summed, and mixed by a pointwise output
    projection. The per-channel factors start at 1 so a fresh module behaves
    like ungated fusion.
    """

    proj1: ConvParams
    proj2: ConvParams
    interact: ConvParams
    lambda1: np.ndarray
    lambda2: np.ndarray
    out: ConvParams

    def __post_init__(self) -> None:
        e = self.proj1.out_channels
        if self.proj2.out_channels != e:
            raise ShapeError(
                f"path embeddings disagree: {e} vs {self.proj2.out_channels} channels"
            )
        if self.interact.in_channels != 2 * e or self.interact.out_channels != 2 * e:
            raise ShapeError(
                f"interact must map {2 * e} -> {2 * e} channels for the even gate split, "
                f"got {self.interact.in_channels} -> {self.interact.out_channels}"
            )
        if self.out.in_channels != e:
            raise ShapeError(
                f"output projection expects {e} channels, got {self.out.in_channels}"
            )
        for name in ("lambda1", "lambda2"):
            lam = np.asarray(getattr(self, name), dtype=np.float32)
            if lam.ndim != 1 or lam.shape[0] != e:
                raise ShapeError(f"{name} must have length {e}, got shape {lam.shape}")
            lam = lam.copy()
            lam.flags.writeable = False
            object.__setattr__(self, name, lam)

    @property
    def embed_channels(self) -> int:
        return self.proj1.out_channels


def brm_forward(x1: Tensor, x2: Tensor, p: BrmParams, tape: GradTape | None = None) -> Tensor:
    if x1.shape != x2.shape:
        raise ShapeError(f"brm: path shapes differ {x1.shape} vs {x2.shape}")
    h1 = conv2d(x1, p.proj1, tape)
    h2 = conv2d(x2, p.proj2, tape)
    z = conv2d(concat([h1, h2], tape), p.interact, tape)
    e = p.embed_channels
    g1, g2 = split(sigmoid(z, tape), (e, e), tape)
    y1 = scale_channels(mul(h1, g1, tape), p.lambda1, tape)
    y2 = scale_channels(mul(h2, g2, tape), p.lambda2, tape)
    return conv2d(add(y1, y2, tape), p.out, tape)


def make_brm(
    rng: np.random.Generator,
    in_channels: int,
    out_channels: int,
    embed_channels: int | None = None,
) -> BrmParams:
    e = out_channels if embed_channels is None else embed_channels
    return BrmParams(
        proj1=rand_conv(rng, in_channels, e, kernel=1),
        proj2=rand_conv(rng, in_channels, e, kernel=1),
        interact=rand_conv(rng, 2 * e, 2 * e, kernel=3),
        lambda1=np.ones(e, dtype=np.float32),
        lambda2=np.ones(e, dtype=np.float32),
        out=rand_conv(rng, e, out_channels, kernel=1),
    )
