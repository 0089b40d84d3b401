"""Multiply-accumulate and parameter accounting.

MACs charge kernel multiply-accumulates only: bias additions, pooling
comparisons, activations, and elementwise gating are free under this
convention. FLOPs are reported as 2*MACs alongside, since both conventions
appear in practice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

from .ops import ConvParams

__all__ = ["LayerCost", "FlopsReport", "conv_macs", "conv_out_extent"]


def conv_out_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def conv_macs(p: ConvParams, batch: int, out_h: int, out_w: int) -> int:
    kh, kw = p.kernel_extent
    c_in_g = p.kernel.shape[1]
    return batch * out_h * out_w * p.out_channels * c_in_g * kh * kw


@dataclass(frozen=True)
class LayerCost:
    layer: str
    params: int
    macs: int
    term: str = ""  # optional attribution bucket, e.g. shared_block/projection/dfl

    def __post_init__(self) -> None:
        if self.params < 0 or self.macs < 0:
            raise ValueError(f"negative cost for layer {self.layer}")


@dataclass(frozen=True)
class FlopsReport:
    entries: tuple[LayerCost, ...]
    memory: Mapping[str, int] = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    @property
    def dominant(self) -> LayerCost:
        if not self.entries:
            raise ValueError("empty report has no dominant layer")
        return max(self.entries, key=lambda e: e.macs)

    def term_totals(self) -> dict[str, int]:
        totals: dict[str, int] = {}
        for e in self.entries:
            if e.term:
                totals[e.term] = totals.get(e.term, 0) + e.macs
        return totals

    def to_json(self) -> dict:
        out = {
            "layers": [
                {"id": e.layer, "params": e.params, "macs": e.macs, "term": e.term}
                for e in self.entries
            ],
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
            "dominant": self.dominant.layer if self.entries else None,
        }
        if self.memory:
            out["memory_elements"] = dict(self.memory)
        terms = self.term_totals()
        if terms:
            out["term_macs"] = terms
        return out

    def to_text(self) -> str:
        width = max([len("layer")] + [len(e.layer) for e in self.entries])
        lines = [f"{'layer':<{width}}  {'params':>12}  {'macs':>14}  term"]
        for e in self.entries:
            lines.append(f"{e.layer:<{width}}  {e.params:>12}  {e.macs:>14}  {e.term}")
        lines.append(
            f"{'total':<{width}}  {self.total_params:>12}  {self.total_macs:>14}  "
            f"(flops {self.total_flops})"
        )
        if self.entries:
            lines.append(f"dominant: {self.dominant.layer} ({self.dominant.macs} macs)")
        for name, count in self.memory.items():
            lines.append(f"memory[{name}]: {count} elements")
        return "\n".join(lines)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)
