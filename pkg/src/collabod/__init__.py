"""Detection building blocks at desk scale.

A small NCHW tensor engine with reverse-mode gradients, three feature-path
blocks (dual-path fusion stem, dense aggregation, bilateral reweighting), a
unified detail-aware detection head with distribution-to-distance decoding
and inference-time branch merging, declarative model graphs with complexity
and receptive-field accounting, and a COCO-protocol evaluator.
"""

from .blocks import (
    BrmParams,
    DaBlockParams,
    DpfStemParams,
    brm_forward,
    dablock_forward,
    dpf_stem_forward,
)
from .coco_eval import ApSummary, DetRecord, GroundTruth, iou, match_greedy, summarize
from .complexity import FlopsReport, LayerCost
from .graph import (
    ErfMap,
    GraphError,
    Model,
    ModelConfig,
    build_model,
    count_complexity,
    estimate_erf,
    forward_full,
    load_config,
    load_params,
    parse_config,
    save_params,
)
from .head import (
    AnchorGrid,
    Detection,
    DetailConv,
    DflConfig,
    UdaHeadParams,
    dfl_decode,
    dist2bbox,
    head_complexity,
    make_anchors,
    nms,
    reparameterize,
    uda_forward,
)
from .ops import (
    ConvParams,
    add,
    concat,
    conv2d,
    max_pool2d,
    mul,
    scale,
    scale_channels,
    sigmoid,
    softmax_channel,
    split,
    upsample_nearest,
)
from .tensor import GradTape, ShapeError, Tensor, read_cten, read_tensor, write_cten, write_tensor

__version__ = "0.1.0"
