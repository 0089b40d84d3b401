"""Declarative layer graphs at desk scale.

A model config is a line-oriented text file::

    # comment
    input N C H W
    classes K          # required when a head is declared
    bins R             # distribution bins per box side   (default 16)
    hidden C           # head hidden width                (default 16)
    layer <id> <kind> in=<id[,id...]> [key=value ...]
    head xs=<id> s=<id> m=<id> l=<id>

Layer kinds and their options:

    conv      out= [k=3] [s=1] [p=k//2] [g=1]
    maxpool   k= [s=1] [p=0]
    upsample  factor=
    dpf_stem  embed= [out=embed] [split=a,b]
    dablock   sources=<id,...> out= [mid=out] [residual=1]   (``in`` is the
              current-stage input; sources align to its scale automatically)
    brm       in=<a,b> out= [embed=out]

The input tensor is addressed as ``image``. Layers must reference previously
declared ids, so every config is a DAG by construction. Parameters are drawn
from one seeded generator in declaration order (uniform in [-k, k] with
k = 1/sqrt(fan_in)), which makes builds bit-reproducible.

Parameter files use the CPAR container: magic ``CPAR``, a version byte, a
little-endian u32 entry count, then per entry a u16 length-prefixed utf-8
parameter path followed by the tensor in CTEN format.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from typing import Iterator, Mapping

import numpy as np

from . import blocks as B
from . import head as H
from .complexity import FlopsReport, LayerCost, conv_macs, conv_out_extent
from .ops import ConvParams, conv2d, max_pool2d, rand_conv, upsample_nearest
from .tensor import GradTape, ShapeError, Tensor, cten_to_bytes, read_cten

__all__ = [
    "INPUT_ID",
    "GraphError",
    "LayerSpec",
    "ModelConfig",
    "Model",
    "ErfMap",
    "parse_config",
    "load_config",
    "build_model",
    "forward_full",
    "count_complexity",
    "estimate_erf",
    "save_params",
    "load_params",
]

INPUT_ID = "image"
LAYER_KINDS = ("conv", "maxpool", "upsample", "dpf_stem", "dablock", "brm")
CPAR_MAGIC = b"CPAR"
CPAR_VERSION = 1


class GraphError(ValueError):
    """A config or build step violated the graph contract."""


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    inputs: tuple[str, ...]
    options: Mapping[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int, int]
    layers: tuple[LayerSpec, ...]
    head_scales: Mapping[str, str] | None = None
    num_classes: int | None = None
    bins: int = 16
    hidden: int = 16


def _parse_value(raw: str):
    if "," in raw:
        return tuple(_parse_value(part) for part in raw.split(","))
    try:
        return int(raw)
    except ValueError:
        return raw


def parse_config(text: str) -> ModelConfig:
    input_shape = None
    num_classes = None
    bins = 16
    hidden = 16
    layers: list[LayerSpec] = []
    head_scales = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        directive = tokens[0]
        try:
            if directive == "input":
                if len(tokens) != 5:
                    raise GraphError("input expects 4 extents N C H W")
                input_shape = tuple(int(t) for t in tokens[1:])
            elif directive in ("classes", "bins", "hidden"):
                if len(tokens) != 2:
                    raise GraphError(f"{directive} expects one integer")
                value = int(tokens[1])
                if directive == "classes":
                    num_classes = value
                elif directive == "bins":
                    bins = value
                else:
                    hidden = value
            elif directive == "layer":
                if len(tokens) < 3:
                    raise GraphError("layer expects: layer <id> <kind> [key=value ...]")
                lid, kind = tokens[1], tokens[2]
                if kind not in LAYER_KINDS:
                    raise GraphError(f"unknown layer kind {kind!r}")
                opts = {}
                for tok in tokens[3:]:
                    if "=" not in tok:
                        raise GraphError(f"expected key=value, got {tok!r}")
                    key, val = tok.split("=", 1)
                    opts[key] = _parse_value(val)
                if "in" not in opts:
                    raise GraphError(f"layer {lid!r} is missing in=")
                ins = opts.pop("in")
                inputs = tuple(str(i) for i in (ins if isinstance(ins, tuple) else (ins,)))
                if kind == "dablock":
                    srcs = opts.get("sources")
                    if srcs is None:
                        raise GraphError(f"dablock {lid!r} is missing sources=")
                    srcs = tuple(str(s) for s in (srcs if isinstance(srcs, tuple) else (srcs,)))
                    opts["sources"] = srcs
                    inputs = inputs + srcs
                layers.append(LayerSpec(lid, kind, inputs, opts))
            elif directive == "head":
                head_scales = {}
                for tok in tokens[1:]:
                    if "=" not in tok:
                        raise GraphError(f"expected scale=layer, got {tok!r}")
                    key, val = tok.split("=", 1)
                    head_scales[key] = val
            else:
                raise GraphError(f"unknown directive {directive!r}")
        except GraphError as exc:
            raise GraphError(f"line {lineno}: {exc}") from None
        except ValueError as exc:
            raise GraphError(f"line {lineno}: {exc}") from None

    if input_shape is None:
        raise GraphError("config is missing the input directive")
    return ModelConfig(
        input_shape=input_shape,  # type: ignore[arg-type]
        layers=tuple(layers),
        head_scales=head_scales,
        num_classes=num_classes,
        bins=bins,
        hidden=hidden,
    )


def load_config(path: str) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


class _RuntimeLayer:
    __slots__ = ("spec", "params", "in_shapes", "out_shape")

    def __init__(self, spec: LayerSpec, params, in_shapes, out_shape) -> None:
        self.spec = spec
        self.params = params
        self.in_shapes = in_shapes
        self.out_shape = out_shape


class Model:
    """Executable layer graph; immutable apart from load_params swapping the
    parameter records (which therefore needs exclusive access)."""

    def __init__(self, config, layers, head_params, anchors, head_strides, seed):
        self.config: ModelConfig = config
        self.layers: list[_RuntimeLayer] = layers
        self.head: H.UdaHeadParams | None = head_params
        self.anchors: H.AnchorGrid | None = anchors
        self.head_strides: dict[str, int] = head_strides or {}
        self.seed = seed
        self._layer_map = {layer.spec.id: layer for layer in layers}

    def layer(self, lid: str) -> _RuntimeLayer:
        try:
            return self._layer_map[lid]
        except KeyError:
            raise GraphError(f"no layer named {lid!r}") from None

    def layer_ids(self) -> list[str]:
        return [layer.spec.id for layer in self.layers]

    def run_layers(
        self, image: Tensor, tape: GradTape | None = None, upto: str | None = None
    ) -> dict[str, Tensor]:
        """Execute feature layers in declaration order, memoizing activations."""
        if image.shape != self.config.input_shape:
            raise ShapeError(
                f"image shape {image.shape} does not match config input "
                f"{self.config.input_shape}"
            )
        acts: dict[str, Tensor] = {INPUT_ID: image}
        if upto == INPUT_ID:
            return acts
        for layer in self.layers:
            acts[layer.spec.id] = _run_layer(layer, acts, tape)
            if upto == layer.spec.id:
                return acts
        if upto is not None:
            raise GraphError(f"no layer named {upto!r}")
        return acts

    def head_features(self, acts: Mapping[str, Tensor]) -> dict[str, Tensor]:
        if self.head is None or self.config.head_scales is None:
            raise GraphError("config declares no detection head")
        return {s: acts[self.config.head_scales[s]] for s in H.SCALES}

    def forward(self, image: Tensor, tape: GradTape | None = None):
        acts = self.run_layers(image, tape)
        features = self.head_features(acts)
        assert self.head is not None and self.anchors is not None
        return H.uda_forward(features, self.head, self.anchors, tape)


def _run_layer(layer: _RuntimeLayer, acts: Mapping[str, Tensor], tape: GradTape | None) -> Tensor:
    spec = layer.spec
    args = [acts[i] for i in spec.inputs]
    kind = spec.kind
    if kind == "conv":
        return conv2d(args[0], layer.params, tape)
    if kind == "maxpool":
        window, stride, padding = layer.params
        return max_pool2d(args[0], window, stride, padding, tape)
    if kind == "upsample":
        return upsample_nearest(args[0], layer.params, tape)
    if kind == "dpf_stem":
        return B.dpf_stem_forward(args[0], layer.params, tape)
    if kind == "dablock":
        return B.dablock_forward(args[1:], args[0], layer.params, tape)
    if kind == "brm":
        return B.brm_forward(args[0], args[1], layer.params, tape)
    raise GraphError(f"layer {spec.id!r}: unknown kind {kind!r}")


def _opt_int(spec: LayerSpec, key: str, default: int | None = None) -> int:
    value = spec.options.get(key, default)
    if value is None:
        raise GraphError(f"layer {spec.id!r} is missing {key}=")
    if not isinstance(value, int):
        raise GraphError(f"layer {spec.id!r}: {key} must be an integer, got {value!r}")
    return value


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Shape-check the graph and draw all parameters from one seeded generator."""
    n, c, h, w = cfg.input_shape
    if min(cfg.input_shape) < 1:
        raise GraphError(f"input extents must be positive, got {cfg.input_shape}")
    rng = np.random.default_rng(seed)
    shapes: dict[str, tuple[int, int, int, int]] = {INPUT_ID: (n, c, h, w)}
    layers: list[_RuntimeLayer] = []

    for spec in cfg.layers:
        if spec.id in shapes:
            raise GraphError(f"duplicate layer id {spec.id!r}")
        for ref in spec.inputs:
            if ref not in shapes:
                raise GraphError(f"layer {spec.id!r} references undeclared input {ref!r}")
        in_shapes = [shapes[ref] for ref in spec.inputs]
        try:
            params, out_shape = _build_layer(spec, in_shapes, rng)
        except ShapeError as exc:
            raise GraphError(f"layer {spec.id!r}: {exc}") from None
        layers.append(_RuntimeLayer(spec, params, tuple(in_shapes), out_shape))
        shapes[spec.id] = out_shape

    head_params = None
    anchors = None
    head_strides: dict[str, int] = {}
    if cfg.head_scales is not None:
        missing = [s for s in H.SCALES if s not in cfg.head_scales]
        if missing:
            raise GraphError(f"head bindings missing scale(s) {missing}")
        if cfg.num_classes is None or cfg.num_classes < 1:
            raise GraphError("a head needs a positive classes directive")
        in_channels = {}
        extents = {}
        for s in H.SCALES:
            lid = cfg.head_scales[s]
            if lid not in shapes:
                raise GraphError(f"head scale {s!r} references undeclared layer {lid!r}")
            _, lc, lh, lw = shapes[lid]
            if h % lh != 0 or w % lw != 0 or h // lh != w // lw:
                raise GraphError(
                    f"head scale {s!r}: {lh}x{lw} map does not divide the "
                    f"{h}x{w} input evenly"
                )
            in_channels[s] = lc
            extents[s] = (lh, lw)
            head_strides[s] = h // lh
        head_params = H.make_uda_head(rng, in_channels, cfg.hidden, cfg.num_classes, cfg.bins)
        try:
            anchors = H.make_anchors(extents, head_strides)
        except ShapeError as exc:
            raise GraphError(str(exc)) from None

    return Model(cfg, layers, head_params, anchors, head_strides, seed)


def _build_layer(spec: LayerSpec, in_shapes, rng: np.random.Generator):
    kind = spec.kind
    n, c, h, w = in_shapes[0]
    if kind == "conv":
        out = _opt_int(spec, "out")
        k = _opt_int(spec, "k", 3)
        s = _opt_int(spec, "s", 1)
        p = _opt_int(spec, "p", k // 2)
        g = _opt_int(spec, "g", 1)
        ho, wo = conv_out_extent(h, k, s, p), conv_out_extent(w, k, s, p)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{k}x{k} kernel does not fit {h}x{w} input")
        return rand_conv(rng, c, out, kernel=k, stride=s, padding=p, groups=g), (n, out, ho, wo)
    if kind == "maxpool":
        k = _opt_int(spec, "k")
        s = _opt_int(spec, "s", 1)
        p = _opt_int(spec, "p", 0)
        if p >= k or k > h + 2 * p or k > w + 2 * p:
            raise ShapeError(f"window {k} incompatible with {h}x{w} input at padding {p}")
        return (k, s, p), (n, c, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
    if kind == "upsample":
        f = _opt_int(spec, "factor")
        if f < 1:
            raise ShapeError(f"factor must be >= 1, got {f}")
        return f, (n, c, h * f, w * f)
    if kind == "dpf_stem":
        embed = _opt_int(spec, "embed")
        out = _opt_int(spec, "out", embed)
        split_opt = spec.options.get("split")
        split_sizes = None
        if split_opt is not None:
            if not (isinstance(split_opt, tuple) and len(split_opt) == 2):
                raise ShapeError(f"split must be two integers, got {split_opt!r}")
            split_sizes = (int(split_opt[0]), int(split_opt[1]))
        if h % 2 or w % 2:
            raise ShapeError(f"spatial extents must be even, got {h}x{w}")
        params = B.make_dpf_stem(rng, c, embed, out, split_sizes)
        return params, (n, out, h // 2, w // 2)
    if kind == "dablock":
        out = _opt_int(spec, "out")
        mid = _opt_int(spec, "mid", out)
        residual = _opt_int(spec, "residual", 1)
        sources = []
        for src_shape in in_shapes[1:]:
            _, sc, sh, sw = src_shape
            if sh == h and sw == w:
                sources.append((sc, 1, 1))
            elif sh > h:
                if sh % h or sw % w or sh // h != sw // w:
                    raise ShapeError(f"source extent {sh}x{sw} not alignable to {h}x{w}")
                sources.append((sc, sh // h, 1))
            else:
                if h % sh or w % sw or h // sh != w // sw:
                    raise ShapeError(f"source extent {sh}x{sw} not alignable to {h}x{w}")
                sources.append((sc, 1, h // sh))
        if residual and out != c:
            raise ShapeError(
                f"residual needs out={out} to equal the current-stage width {c}"
            )
        params = B.make_dablock(rng, sources, out, mid, residual)
        return params, (n, out, h, w)
    if kind == "brm":
        if len(in_shapes) != 2:
            raise ShapeError(f"brm takes exactly two inputs, got {len(in_shapes)}")
        if in_shapes[0] != in_shapes[1]:
            raise ShapeError(f"path shapes differ {in_shapes[0]} vs {in_shapes[1]}")
        out = _opt_int(spec, "out")
        embed = _opt_int(spec, "embed", out)
        params = B.make_brm(rng, c, out, embed)
        return params, (n, out, h, w)
    raise GraphError(f"unknown kind {kind!r}")


def forward_full(model: Model, image: Tensor, tape: GradTape | None = None):
    """Execute the graph in declaration order and decode the head."""
    return model.forward(image, tape)


# ---------------------------------------------------------------------------
# Complexity
# ---------------------------------------------------------------------------


def _layer_cost(layer: _RuntimeLayer) -> LayerCost:
    spec, params = layer.spec, layer.params
    n, _, h, w = layer.in_shapes[0]
    _, _, ho, wo = layer.out_shape
    kind = spec.kind
    if kind == "conv":
        return LayerCost(spec.id, params.param_count(), conv_macs(params, n, ho, wo), "conv")
    if kind in ("maxpool", "upsample"):
        return LayerCost(spec.id, 0, 0, kind)
    if kind == "dpf_stem":
        p: B.DpfStemParams = params
        macs = conv_macs(p.embed, n, h, w)
        macs += conv_macs(p.detail_dw, n, h, w) + conv_macs(p.detail_pw, n, h, w)
        macs += conv_macs(p.fuse, n, ho, wo)
        count = sum(cp.param_count() for cp in (p.embed, p.detail_dw, p.detail_pw, p.fuse))
        return LayerCost(spec.id, count, macs, "dpf_stem")
    if kind == "dablock":
        p: B.DaBlockParams = params
        macs = 0
        count = 0
        for a, src_shape in zip(p.align, layer.in_shapes[1:]):
            _, _, sh, sw = src_shape
            ah = conv_out_extent(sh, 1, a.conv.stride, 0)
            aw = conv_out_extent(sw, 1, a.conv.stride, 0)
            macs += conv_macs(a.conv, n, ah, aw)
            count += a.conv.param_count()
        for cp in p.refine:
            macs += conv_macs(cp, n, h, w)
            count += cp.param_count()
        return LayerCost(spec.id, count, macs, "dablock")
    if kind == "brm":
        p: B.BrmParams = params
        convs = (p.proj1, p.proj2, p.interact, p.out)
        macs = sum(conv_macs(cp, n, h, w) for cp in convs)
        count = sum(cp.param_count() for cp in convs) + int(p.lambda1.size + p.lambda2.size)
        return LayerCost(spec.id, count, macs, "brm")
    raise GraphError(f"layer {spec.id!r}: unknown kind {kind!r}")


def count_complexity(model: Model) -> FlopsReport:
    """Closed-form convolution-MAC ledger for the whole graph.

    Only kernel multiply-accumulates are charged; the head entry therefore
    excludes the decode-expectation bucket that head_complexity reports.
    """
    entries = [_layer_cost(layer) for layer in model.layers]
    if model.head is not None:
        extents = {
            s: model.layer(model.config.head_scales[s]).out_shape[2:]  # type: ignore[index]
            for s in H.SCALES
        }
        report = H.head_complexity(model.head, extents)
        macs = sum(e.macs for e in report.entries if e.term != "dfl")
        count = report.total_params + len(model.head.box_scales)
        entries.append(LayerCost("head", count, macs, "uda_head"))
    return FlopsReport(tuple(entries))


# ---------------------------------------------------------------------------
# Effective receptive field
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErfMap:
    """Normalized input-gradient magnitude for a unit seed at the probe center."""

    magnitudes: np.ndarray  # (H, W), peak normalized to 1 when nonzero
    threshold: float
    area_fraction: float


def estimate_erf(
    model: Model,
    probe_layer: str,
    input_shape: tuple[int, int, int, int] | None = None,
    num_inputs: int = 8,
    seed: int = 0,
    threshold: float = 0.2,
) -> ErfMap:
    """Backpropagate a unit seed from the probe center over several random
    inputs and average the absolute input gradient across channels."""
    shape = input_shape or model.config.input_shape
    if shape[0] != 1:
        raise GraphError("erf estimation uses batch extent 1")
    if probe_layer != INPUT_ID:
        model.layer(probe_layer)  # raises GraphError for unknown ids
    rng = np.random.default_rng(seed)
    h, w = shape[2], shape[3]
    accum = np.zeros((h, w))
    for _ in range(num_inputs):
        image = Tensor(rng.uniform(-1.0, 1.0, shape).astype(np.float32), _own=True)
        if probe_layer == INPUT_ID:
            g = np.zeros(shape)
            g[0, :, h // 2, w // 2] = 1.0
        else:
            tape = GradTape()
            acts = model.run_layers(image, tape, upto=probe_layer)
            probe = acts[probe_layer]
            seed_arr = np.zeros(probe.shape, dtype=np.float32)
            seed_arr[:, :, probe.shape[2] // 2, probe.shape[3] // 2] = 1.0
            grads = tape.backward(Tensor(seed_arr, _own=True))
            g = grads.get(image.tid)
            if g is None:
                raise GraphError(
                    f"probe {probe_layer!r} is not differentiable back to the input"
                )
        accum += np.abs(g).mean(axis=(0, 1))
    accum /= num_inputs
    peak = accum.max()
    if peak > 0:
        accum = accum / peak
    fraction = float((accum >= threshold).mean()) if peak > 0 else 0.0
    return ErfMap(magnitudes=accum, threshold=threshold, area_fraction=fraction)


# ---------------------------------------------------------------------------
# Parameter (de)serialization
# ---------------------------------------------------------------------------


def _conv_entries(prefix: str, p: ConvParams) -> Iterator[tuple[str, np.ndarray]]:
    yield f"{prefix}.kernel", p.kernel.data
    yield f"{prefix}.bias", p.bias


def _params_entries(prefix: str, params) -> Iterator[tuple[str, np.ndarray]]:
    if isinstance(params, ConvParams):
        yield from _conv_entries(prefix, params)
    elif isinstance(params, B.DpfStemParams):
        for name in ("embed", "detail_dw", "detail_pw", "fuse"):
            yield from _conv_entries(f"{prefix}.{name}", getattr(params, name))
    elif isinstance(params, B.DaBlockParams):
        for i, a in enumerate(params.align):
            yield from _conv_entries(f"{prefix}.align{i}", a.conv)
        for i, cp in enumerate(params.refine):
            yield from _conv_entries(f"{prefix}.refine{i}", cp)
    elif isinstance(params, B.BrmParams):
        yield from _conv_entries(f"{prefix}.proj1", params.proj1)
        yield from _conv_entries(f"{prefix}.proj2", params.proj2)
        yield from _conv_entries(f"{prefix}.interact", params.interact)
        yield f"{prefix}.lambda1", params.lambda1
        yield f"{prefix}.lambda2", params.lambda2
        yield from _conv_entries(f"{prefix}.out", params.out)
    elif isinstance(params, H.DetailConv):
        for i, b in enumerate(params.branches):
            yield from _conv_entries(f"{prefix}.branch{i}", b.conv)
        if params.merged is not None:
            yield from _conv_entries(f"{prefix}.merged", params.merged)
    elif isinstance(params, H.UdaHeadParams):
        for s in H.SCALES:
            if s in params.shared_proj:
                yield from _conv_entries(f"{prefix}.proj.{s}", params.shared_proj[s])
        yield from _params_entries(f"{prefix}.detail", params.detail_block)
        for i, cp in enumerate(params.box_head):
            yield from _conv_entries(f"{prefix}.box{i}", cp)
        for i, cp in enumerate(params.cls_head):
            yield from _conv_entries(f"{prefix}.cls{i}", cp)
        for s in H.SCALES:
            if s in params.box_scales:
                yield f"{prefix}.scale.{s}", np.asarray([params.box_scales[s]], dtype=np.float32)
    elif isinstance(params, (int, tuple)):  # maxpool/upsample geometry, no weights
        return
    else:
        raise GraphError(f"cannot serialize parameters of type {type(params).__name__}")


def _model_entries(model: Model) -> list[tuple[str, np.ndarray]]:
    entries: list[tuple[str, np.ndarray]] = []
    for layer in model.layers:
        entries.extend(_params_entries(layer.spec.id, layer.params))
    if model.head is not None:
        entries.extend(_params_entries("head", model.head))
    return entries


def save_params(model: Model) -> bytes:
    entries = _model_entries(model)
    buf = io.BytesIO()
    buf.write(CPAR_MAGIC)
    buf.write(bytes((CPAR_VERSION,)))
    buf.write(struct.pack("<I", len(entries)))
    for path, arr in entries:
        raw = path.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(cten_to_bytes(arr))
    return buf.getvalue()


def _parse_cpar(blob: bytes) -> list[tuple[str, np.ndarray]]:
    buf = io.BytesIO(blob)

    def take(n: int, what: str) -> bytes:
        data = buf.read(n)
        if len(data) != n:
            raise GraphError(f"truncated CPAR stream while reading {what}")
        return data

    if take(4, "magic") != CPAR_MAGIC:
        raise GraphError("not a CPAR parameter stream (bad magic)")
    if take(1, "version")[0] != CPAR_VERSION:
        raise GraphError("unsupported CPAR version")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    entries = []
    for _ in range(count):
        (idlen,) = struct.unpack("<H", take(2, "id length"))
        path = take(idlen, "parameter id").decode("utf-8")
        try:
            entries.append((path, read_cten(buf)))
        except ValueError as exc:
            raise GraphError(f"bad tensor for parameter {path!r}: {exc}") from None
    if buf.read(1):
        raise GraphError("trailing bytes after the last CPAR entry")
    return entries


def _rebuild_conv(p: ConvParams, prefix: str, values: Mapping[str, np.ndarray]) -> ConvParams:
    return ConvParams(
        Tensor(values[f"{prefix}.kernel"]),
        values[f"{prefix}.bias"],
        stride=p.stride,
        padding=p.padding,
        groups=p.groups,
    )


def _rebuild_params(params, prefix: str, values: Mapping[str, np.ndarray]):
    if isinstance(params, ConvParams):
        return _rebuild_conv(params, prefix, values)
    if isinstance(params, B.DpfStemParams):
        return replace(
            params,
            **{
                name: _rebuild_conv(getattr(params, name), f"{prefix}.{name}", values)
                for name in ("embed", "detail_dw", "detail_pw", "fuse")
            },
        )
    if isinstance(params, B.DaBlockParams):
        align = tuple(
            replace(a, conv=_rebuild_conv(a.conv, f"{prefix}.align{i}", values))
            for i, a in enumerate(params.align)
        )
        refine = tuple(
            _rebuild_conv(cp, f"{prefix}.refine{i}", values) for i, cp in enumerate(params.refine)
        )
        return replace(params, align=align, refine=refine)
    if isinstance(params, B.BrmParams):
        return B.BrmParams(
            proj1=_rebuild_conv(params.proj1, f"{prefix}.proj1", values),
            proj2=_rebuild_conv(params.proj2, f"{prefix}.proj2", values),
            interact=_rebuild_conv(params.interact, f"{prefix}.interact", values),
            lambda1=values[f"{prefix}.lambda1"],
            lambda2=values[f"{prefix}.lambda2"],
            out=_rebuild_conv(params.out, f"{prefix}.out", values),
        )
    if isinstance(params, H.DetailConv):
        branches = tuple(
            replace(b, conv=_rebuild_conv(b.conv, f"{prefix}.branch{i}", values))
            for i, b in enumerate(params.branches)
        )
        merged = (
            _rebuild_conv(params.merged, f"{prefix}.merged", values)
            if params.merged is not None
            else None
        )
        return H.DetailConv(branches=branches, merged=merged)
    if isinstance(params, H.UdaHeadParams):
        proj = {
            s: _rebuild_conv(params.shared_proj[s], f"{prefix}.proj.{s}", values)
            for s in H.SCALES
            if s in params.shared_proj
        }
        return H.UdaHeadParams(
            shared_proj=proj,
            detail_block=_rebuild_params(params.detail_block, f"{prefix}.detail", values),
            box_head=tuple(
                _rebuild_conv(cp, f"{prefix}.box{i}", values) for i, cp in enumerate(params.box_head)
            ),
            cls_head=tuple(
                _rebuild_conv(cp, f"{prefix}.cls{i}", values) for i, cp in enumerate(params.cls_head)
            ),
            box_scales={
                s: float(values[f"{prefix}.scale.{s}"][0])
                for s in H.SCALES
                if s in params.box_scales
            },
            dfl=params.dfl,
        )
    return params


def load_params(model: Model, blob: bytes) -> None:
    """Swap every parameter record from a CPAR stream produced by a
    shape-identical model. Mutates the model in place."""
    incoming = _parse_cpar(blob)
    current = _model_entries(model)
    if len(incoming) != len(current):
        raise GraphError(
            f"parameter stream has {len(incoming)} entries, model expects {len(current)}"
        )
    values: dict[str, np.ndarray] = {}
    for (path_new, arr), (path_cur, cur) in zip(incoming, current):
        if path_new != path_cur:
            raise GraphError(f"parameter stream mismatch: got {path_new!r}, expected {path_cur!r}")
        if arr.shape != cur.shape:
            raise GraphError(
                f"parameter {path_new!r} has shape {arr.shape}, model expects {cur.shape}"
            )
        values[path_new] = arr
    for layer in model.layers:
        layer.params = _rebuild_params(layer.params, layer.spec.id, values)
    if model.head is not None:
        model.head = _rebuild_params(model.head, "head", values)
