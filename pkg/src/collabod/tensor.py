"""Rank-4 float32 tensor container, reverse-mode gradient tape, and CTEN file io.

Layout is fixed to row-major (batch, channel, height, width) with 32-bit
IEEE-754 storage. Tensors are frozen after construction so activations
recorded on a tape can never be mutated behind its back. Gradients are
accumulated in float64 and keyed by tensor id.
"""

from __future__ import annotations

import io
import itertools
import struct
from dataclasses import dataclass
from typing import BinaryIO, Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "read_cten",
    "write_cten",
    "cten_to_bytes",
    "read_tensor",
    "write_tensor",
]

Shape = tuple[int, int, int, int]


class ShapeError(ValueError):
    """An operation received extents it cannot work with."""


_tensor_ids = itertools.count(1)


class Tensor:
    """Immutable (N, C, H, W) float32 array with a unique id.

    The public constructor copies its argument; operators use the private
    ``_own`` path to adopt freshly allocated arrays without another copy.
    """

    __slots__ = ("data", "tid")

    def __init__(self, data, *, _own: bool = False) -> None:
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be rank 4 (N,C,H,W), got rank {arr.ndim}")
        if min(arr.shape) < 1:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        if not _own:
            arr = arr.copy()
        elif not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self.data = arr
        self.tid = next(_tensor_ids)

    @property
    def shape(self) -> Shape:
        return self.data.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return int(self.data.size)

    def asarray(self) -> np.ndarray:
        """Read-only view of the underlying float32 array."""
        return self.data

    def copy_array(self) -> np.ndarray:
        """Mutable float32 copy of the values."""
        return self.data.copy()

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=np.float32), _own=True)

    @classmethod
    def full(cls, shape: Sequence[int], value: float) -> "Tensor":
        return cls(np.full(tuple(shape), value, dtype=np.float32), _own=True)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tid={self.tid})"


# A pull function maps the output gradient to one gradient (or None) per
# recorded input, in input order. Gradients flow as float64 arrays.
PullFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(frozen=True)
class TapeRecord:
    op: str
    input_ids: tuple[int, ...]
    output_id: int
    output_shape: Shape
    pull: PullFn


class GradTape:
    """Ordered record of tensor operations for one forward pass.

    A tape is confined to a single logical thread per forward/backward
    pair. Replaying it in reverse yields one gradient per tensor that
    influenced the terminal output, shape-equal to that tensor.
    """

    def __init__(self) -> None:
        self._records: list[TapeRecord] = []

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, pull: PullFn) -> None:
        self._records.append(
            TapeRecord(op, tuple(t.tid for t in inputs), output.tid, output.shape, pull)
        )

    def __len__(self) -> int:
        return len(self._records)

    @property
    def terminal_shape(self) -> Shape:
        if not self._records:
            raise ValueError("empty tape has no terminal output")
        return self._records[-1].output_shape

    def backward(self, output_seed: Tensor) -> dict[int, np.ndarray]:
        """Sweep the tape once in reverse from a seed at the terminal output.

        Returns the gradient accumulator keyed by tensor id (float64 arrays;
        fan-out contributions are summed).
        """
        if not self._records:
            raise ValueError("cannot run backward on an empty tape")
        last = self._records[-1]
        if output_seed.shape != last.output_shape:
            raise ShapeError(
                f"seed shape {output_seed.shape} does not match terminal output "
                f"shape {last.output_shape}"
            )
        return self.backward_from({last.output_id: output_seed.data})

    def backward_from(self, seeds: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
        """Reverse sweep seeded at arbitrary recorded tensors (id -> seed array)."""
        grads: dict[int, np.ndarray] = {
            tid: np.asarray(seed, dtype=np.float64).copy() for tid, seed in seeds.items()
        }
        for rec in reversed(self._records):
            g = grads.get(rec.output_id)
            if g is None:
                continue
            for tid, gin in zip(rec.input_ids, rec.pull(g)):
                if gin is None:
                    continue
                acc = grads.get(tid)
                grads[tid] = gin if acc is None else acc + gin
        return grads


# ---------------------------------------------------------------------------
# CTEN file format: 4-byte magic "CTEN", version byte (1), dtype byte
# (0 = float32), rank byte, rank little-endian u32 extents, then the raw
# little-endian float32 payload in row-major order.
# ---------------------------------------------------------------------------

CTEN_MAGIC = b"CTEN"
CTEN_VERSION = 1
CTEN_DTYPE_F32 = 0


def write_cten(f: BinaryIO, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > 255:
        raise ValueError(f"CTEN rank must be in [1, 255], got {arr.ndim}")
    f.write(CTEN_MAGIC)
    f.write(bytes((CTEN_VERSION, CTEN_DTYPE_F32, arr.ndim)))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype("<f4", copy=False).tobytes())


def cten_to_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_cten(buf, array)
    return buf.getvalue()


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError(f"truncated CTEN stream while reading {what}")
    return data


def read_cten(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4, "magic") != CTEN_MAGIC:
        raise ValueError("not a CTEN stream (bad magic)")
    version, dtype_code, rank = _read_exact(f, 3, "header")
    if version != CTEN_VERSION:
        raise ValueError(f"unsupported CTEN version {version}")
    if dtype_code != CTEN_DTYPE_F32:
        raise ValueError(f"unsupported CTEN dtype code {dtype_code}")
    if rank < 1:
        raise ValueError("CTEN rank must be at least 1")
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "extents"))
    if min(shape) < 1:
        raise ValueError(f"CTEN extents must be positive, got {shape}")
    count = int(np.prod(shape))
    payload = _read_exact(f, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def write_tensor(path: str, t: Tensor) -> None:
    with open(path, "wb") as f:
        write_cten(f, t.data)


def read_tensor(path: str) -> Tensor:
    with open(path, "rb") as f:
        arr = read_cten(f)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 CTEN tensor, got rank {arr.ndim}")
    return Tensor(arr)
