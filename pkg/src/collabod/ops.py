"""Differentiable operators over rank-4 tensors.

Every operator is a pure function: it validates extents, computes a fresh
output tensor, and (when a tape is supplied) records a pull function for the
reverse sweep. Operators that accumulate across many sites (convolution,
softmax) run internally in float64 and round once to float32 on output so
results agree with naive high-precision oracles to well under 1e-5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import GradTape, ShapeError, Tensor

__all__ = [
    "ConvParams",
    "conv2d",
    "max_pool2d",
    "sigmoid",
    "softmax_channel",
    "concat",
    "split",
    "upsample_nearest",
    "add",
    "mul",
    "scale",
    "scale_channels",
    "rand_conv",
]


@dataclass(frozen=True)
class ConvParams:
    """Weights and geometry of one 2-d cross-correlation (no kernel flip).

    kernel: (C_out, C_in/groups, kH, kW) tensor; bias: length C_out.
    """

    kernel: Tensor
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ShapeError(f"conv stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"conv padding must be >= 0, got {self.padding}")
        if self.groups < 1:
            raise ShapeError(f"conv groups must be >= 1, got {self.groups}")
        c_out = self.kernel.shape[0]
        if c_out % self.groups != 0:
            raise ShapeError(
                f"output channels {c_out} not divisible by groups {self.groups}"
            )
        bias = np.asarray(self.bias, dtype=np.float32)
        if bias.ndim != 1 or bias.shape[0] != c_out:
            raise ShapeError(
                f"bias must have length {c_out} (output channels), got shape {bias.shape}"
            )
        bias = bias.copy()
        bias.flags.writeable = False
        object.__setattr__(self, "bias", bias)

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1] * self.groups

    @property
    def kernel_extent(self) -> tuple[int, int]:
        return self.kernel.shape[2], self.kernel.shape[3]

    def param_count(self) -> int:
        return self.kernel.size + int(self.bias.size)


def rand_conv(
    rng: np.random.Generator,
    c_in: int,
    c_out: int,
    kernel: int = 3,
    stride: int = 1,
    padding: int | None = None,
    groups: int = 1,
) -> ConvParams:
    """Uniform [-k, k] initialization with k = 1/sqrt(fan_in)."""
    if c_in % groups != 0:
        raise ShapeError(f"input channels {c_in} not divisible by groups {groups}")
    fan_in = (c_in // groups) * kernel * kernel
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, (c_out, c_in // groups, kernel, kernel))
    b = rng.uniform(-bound, bound, c_out)
    if padding is None:
        padding = kernel // 2
    return ConvParams(
        Tensor(w.astype(np.float32), _own=True),
        b.astype(np.float32),
        stride=stride,
        padding=padding,
        groups=groups,
    )


def _windows(padded: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = padded.shape[:2]
    s0, s1, s2, s3 = padded.strides
    return as_strided(
        padded,
        (n, c, ho, wo, kh, kw),
        (s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )


def conv2d(x: Tensor, p: ConvParams, tape: GradTape | None = None) -> Tensor:
    n, c, h, w = x.shape
    c_out, c_in_g, kh, kw = p.kernel.shape
    if c != c_in_g * p.groups:
        raise ShapeError(
            f"conv2d: input has {c} channels but kernel expects "
            f"{c_in_g * p.groups} (channel dim)"
        )
    stride, pad, groups = p.stride, p.padding, p.groups
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: {kh}x{kw} kernel with padding {pad} does not fit "
            f"{h}x{w} input (spatial dims)"
        )
    xp = np.pad(x.data.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, kh, kw, stride, ho, wo)
    wing = win.reshape(n, groups, c_in_g, ho, wo, kh, kw)
    kg = p.kernel.data.astype(np.float64).reshape(groups, c_out // groups, c_in_g, kh, kw)
    out64 = np.einsum("ngihwkl,goikl->ngohw", wing, kg, optimize=True)
    out64 = out64.reshape(n, c_out, ho, wo) + p.bias.astype(np.float64)[None, :, None, None]
    out = Tensor(out64.astype(np.float32), _own=True)

    if tape is not None:
        hp, wp = h + 2 * pad, w + 2 * pad

        def pull(g: np.ndarray):
            gg = g.reshape(n, groups, c_out // groups, ho, wo)
            dk = np.einsum("ngihwkl,ngohw->goikl", wing, gg, optimize=True)
            dxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    contrib = np.einsum("ngohw,goi->ngihw", gg, kg[:, :, :, i, j])
                    dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += (
                        contrib.reshape(n, c, ho, wo)
                    )
            dx = dxp[:, :, pad : pad + h, pad : pad + w]
            return dx, dk.reshape(c_out, c_in_g, kh, kw)

        tape.record("conv2d", (x, p.kernel), out, pull)
    return out


def max_pool2d(
    x: Tensor,
    window: int | tuple[int, int],
    stride: int = 1,
    padding: int = 0,
    tape: GradTape | None = None,
) -> Tensor:
    kh, kw = (window, window) if isinstance(window, int) else (int(window[0]), int(window[1]))
    n, c, h, w = x.shape
    if kh < 1 or kw < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"max_pool2d: bad geometry window={kh}x{kw} stride={stride} padding={padding}")
    if padding >= min(kh, kw):
        # A larger pad would create windows made purely of -inf sentinel.
        raise ShapeError(f"max_pool2d: padding {padding} must be smaller than window {kh}x{kw}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"max_pool2d: window {kh}x{kw} larger than padded input {hp}x{wp} (spatial dims)"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.full((n, c, hp, wp), -np.inf, dtype=np.float32)
    xp[:, :, padding : padding + h, padding : padding + w] = x.data
    flat = _windows(xp, kh, kw, stride, ho, wo).reshape(n, c, ho, wo, kh * kw)
    idx = flat.argmax(axis=-1)  # first max wins: deterministic tie-break
    out_arr = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = Tensor(out_arr, _own=True)

    if tape is not None:

        def pull(g: np.ndarray):
            dxp = np.zeros((n, c, hp, wp))
            off_i, off_j = np.divmod(idx, kw)
            rows = off_i + (np.arange(ho) * stride)[None, None, :, None]
            cols = off_j + (np.arange(wo) * stride)[None, None, None, :]
            nn = np.arange(n)[:, None, None, None]
            cc = np.arange(c)[None, :, None, None]
            np.add.at(dxp, (nn, cc, rows, cols), g)
            return (dxp[:, :, padding : padding + h, padding : padding + w],)

        tape.record("max_pool2d", (x,), out, pull)
    return out


# Largest float32 strictly below 1 and smallest positive normal: the clamp
# keeps sigmoid outputs inside the open interval (0, 1) even at saturation.
_SIG_HI = np.float64(1.0 - 2.0**-24)
_SIG_LO = np.float64(2.0**-126)


def sigmoid(x: Tensor, tape: GradTape | None = None) -> Tensor:
    v = x.data.astype(np.float64)
    e = np.exp(-np.abs(v))
    out64 = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out64 = np.clip(out64, _SIG_LO, _SIG_HI)
    out = Tensor(out64.astype(np.float32), _own=True)

    if tape is not None:

        def pull(g: np.ndarray):
            return (g * out64 * (1.0 - out64),)

        tape.record("sigmoid", (x,), out, pull)
    return out


def softmax_channel(x: Tensor, group: int, tape: GradTape | None = None) -> Tensor:
    n, c, h, w = x.shape
    if group < 1 or c % group != 0:
        raise ShapeError(
            f"softmax_channel: {c} channels not divisible by group {group} (channel dim)"
        )
    v = x.data.astype(np.float64).reshape(n, c // group, group, h, w)
    v = v - v.max(axis=2, keepdims=True)
    e = np.exp(v)
    y64 = e / e.sum(axis=2, keepdims=True)
    out = Tensor(y64.reshape(n, c, h, w).astype(np.float32), _own=True)

    if tape is not None:

        def pull(g: np.ndarray):
            gg = g.reshape(n, c // group, group, h, w)
            dot = (gg * y64).sum(axis=2, keepdims=True)
            return ((y64 * (gg - dot)).reshape(n, c, h, w),)

        tape.record("softmax_channel", (x,), out, pull)
    return out


def concat(xs: Sequence[Tensor], tape: GradTape | None = None) -> Tensor:
    if not xs:
        raise ShapeError("concat: need at least one tensor")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != n:
            raise ShapeError(f"concat: batch mismatch {t.shape[0]} vs {n} (batch dim)")
        if t.shape[2] != h or t.shape[3] != w:
            raise ShapeError(
                f"concat: spatial mismatch {t.shape[2]}x{t.shape[3]} vs {h}x{w} (spatial dims)"
            )
    out = Tensor(np.concatenate([t.data for t in xs], axis=1), _own=True)

    if tape is not None:
        sizes = [t.shape[1] for t in xs]
        bounds = np.cumsum(sizes)[:-1]

        def pull(g: np.ndarray):
            return tuple(np.split(g, bounds, axis=1))

        tape.record("concat", tuple(xs), out, pull)
    return out


def split(x: Tensor, sizes: Sequence[int], tape: GradTape | None = None) -> list[Tensor]:
    n, c, h, w = x.shape
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes) or sum(sizes) != c:
        raise ShapeError(f"split: sizes {sizes} must be positive and sum to {c} (channel dim)")
    outs: list[Tensor] = []
    start = 0
    for k, size in enumerate(sizes):
        piece = Tensor(x.data[:, start : start + size].copy(), _own=True)
        if tape is not None:

            def pull(g: np.ndarray, _start=start, _size=size):
                dx = np.zeros((n, c, h, w))
                dx[:, _start : _start + _size] = g
                return (dx,)

            tape.record(f"split[{k}]", (x,), piece, pull)
        outs.append(piece)
        start += size
    return outs


def upsample_nearest(x: Tensor, factor: int, tape: GradTape | None = None) -> Tensor:
    if factor < 1:
        raise ShapeError(f"upsample_nearest: factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    out = Tensor(x.data.repeat(factor, axis=2).repeat(factor, axis=3), _own=True)

    if tape is not None:

        def pull(g: np.ndarray):
            return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

        tape.record("upsample_nearest", (x,), out, pull)
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    _require_same_shape("add", a, b)
    out = Tensor(a.data + b.data, _own=True)
    if tape is not None:
        tape.record("add", (a, b), out, lambda g: (g, g))
    return out


def mul(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    _require_same_shape("mul", a, b)
    out = Tensor(a.data * b.data, _own=True)
    if tape is not None:
        a64 = a.data.astype(np.float64)
        b64 = b.data.astype(np.float64)
        tape.record("mul", (a, b), out, lambda g: (g * b64, g * a64))
    return out


def scale(x: Tensor, factor: float, tape: GradTape | None = None) -> Tensor:
    out = Tensor(x.data * np.float32(factor), _own=True)
    if tape is not None:
        f = float(factor)
        tape.record("scale", (x,), out, lambda g: (g * f,))
    return out


def scale_channels(x: Tensor, weights: Sequence[float], tape: GradTape | None = None) -> Tensor:
    w = np.asarray(weights, dtype=np.float32)
    if w.ndim != 1 or w.shape[0] != x.shape[1]:
        raise ShapeError(
            f"scale_channels: weights length {w.shape} must equal {x.shape[1]} channels"
        )
    out = Tensor(x.data * w[None, :, None, None], _own=True)
    if tape is not None:
        w64 = w.astype(np.float64)[None, :, None, None]
        tape.record("scale_channels", (x,), out, lambda g: (g * w64,))
    return out
