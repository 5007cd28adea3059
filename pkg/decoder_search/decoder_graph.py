#!/usr/bin/env python3
"""
DECODER GRAPH
=============

Compiles decoder configurations into an executable computation DAG.

The graph is primitive-level: every convolution, normalization, activation,
resize and merge is its own node with an inferred FeatureSpec. Nodes carry a
parameter key; nodes with the same key share one set of parameters, which is
how shared head layers reuse weights across pyramid levels.

Builders:
    compile_decoder        searched FPN + searched head from a DecoderConfig
    original_fcos_decoder  top-down FPN + two 4-conv towers, fully shared
    build_decoder          any FPN variant with any head variant

Conventions:
    - Spatial size at stride s is ceil(H / s).
    - Pyramid levels 3..7 have strides 8..128.
    - Outputs y_l concatenate [cls logits (K), box distances (4), centerness logit (1)].
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

from .errors import GraphError, ShapeError
from .search_space import (
    AggregationKind,
    DecoderConfig,
    FpnConfig,
    HeadConfig,
    OperationKind,
    dangling_blocks,
    pool_name,
    validate_fpn,
    validate_head,
)
from .tensor_engine import (
    Parameter,
    Tensor,
    add,
    batch_norm,
    bilinear_resize,
    clip,
    concat,
    conv2d,
    deform_conv2d,
    exp,
    group_norm,
    relu,
)

logger = logging.getLogger(__name__)

INPUT_STRIDES = {"c3": 8, "c4": 16, "c5": 32}
PYRAMID_LEVELS = (3, 4, 5, 6, 7)
LEVEL_STRIDES = {level: 2 ** level for level in PYRAMID_LEVELS}
COLLECTED_LEVELS = (3, 4, 5)
GN_GROUPS = 8
CLS_PRIOR = 0.01
ORIGINAL_TOWER_DEPTH = 4
# exp() argument bound for regression outputs
REG_LOGIT_LIMIT = 20.0


# ============================================================================
# SHAPES
# ============================================================================

@dataclass(frozen=True)
class FeatureSpec:
    """Shape of one feature map (batch dimension excluded)"""
    stride: int
    channels: int
    height: int
    width: int

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def with_channels(self, channels: int) -> "FeatureSpec":
        return FeatureSpec(self.stride, channels, self.height, self.width)


@dataclass(frozen=True)
class DecoderWidths:
    fpn_width: int = 64
    head_width: int = 128


def backbone_specs(image_hw: Tuple[int, int], channels: Sequence[int] = (64, 128, 128)) -> Dict[str, FeatureSpec]:
    """Specs of c3, c4, c5 for an input image of the given size."""
    h, w = image_hw
    return {
        name: FeatureSpec(stride, ch, math.ceil(h / stride), math.ceil(w / stride))
        for (name, stride), ch in zip(INPUT_STRIDES.items(), channels)
    }


def pyramid_specs(input_specs: Dict[str, FeatureSpec], width: int) -> Dict[str, FeatureSpec]:
    """Specs of p3..p7 produced by any FPN over the given backbone features."""
    sizes = _stride_sizes(input_specs)
    return {f"p{level}": FeatureSpec(LEVEL_STRIDES[level], width, *sizes[LEVEL_STRIDES[level]])
            for level in PYRAMID_LEVELS}


def _stride_sizes(input_specs: Dict[str, FeatureSpec]) -> Dict[int, Tuple[int, int]]:
    # ceil(ceil(H / a) / b) == ceil(H / (a * b)), so coarser sizes follow from the finest input
    finest = min(input_specs.values(), key=lambda s: s.stride)
    sizes = {}
    for level in PYRAMID_LEVELS:
        stride = LEVEL_STRIDES[level]
        if stride < finest.stride:
            continue
        factor = stride // finest.stride
        sizes[stride] = (math.ceil(finest.height / factor), math.ceil(finest.width / factor))
    for spec in input_specs.values():
        sizes[spec.stride] = (spec.height, spec.width)
    return sizes


# ============================================================================
# GRAPH TYPES
# ============================================================================

class NodeKind(str, Enum):
    INPUT = "input"
    CONV = "conv"
    DEFORM_CONV = "deform_conv"
    NORM = "norm"
    RELU = "relu"
    RESIZE = "resize"
    ADD = "add"
    CONCAT = "concat"
    EXP_SCALE = "exp_scale"


class FpnVariant(str, Enum):
    SEARCHED = "searched"
    ORIGINAL = "original"
    DEFORM_ORIGINAL = "deform_original"
    PREFETCHED = "prefetched"


class HeadVariant(str, Enum):
    SEARCHED = "searched"
    ORIGINAL = "original"


@dataclass
class Node:
    index: int
    name: str
    kind: NodeKind
    inputs: Tuple[int, ...]
    spec: FeatureSpec
    section: str
    param_key: Optional[str] = None
    kernel: int = 1
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    bias: bool = False
    norm: Optional[str] = None
    init: str = "he"


@dataclass
class DecoderGraph:
    """
    Compiled decoder.

    Attributes:
        nodes: index -> Node (pruned to what the outputs need, inputs kept)
        order: deterministic topological order of node indices
        inputs: input feature name -> node index
        pyramid_outputs: "p3".."p7" -> node index
        outputs: pyramid level -> node index of y_l
        global_merges: (dangling feature, targets) pairs
        head_partition: per head layer, True if it has per-level weights
    """
    nodes: Dict[int, Node]
    order: List[int]
    inputs: Dict[str, int]
    pyramid_outputs: Dict[str, int]
    outputs: Dict[int, int]
    global_merges: List[Tuple[str, Tuple[str, ...]]]
    head_partition: Tuple[bool, ...]
    num_classes: int
    widths: DecoderWidths
    fpn_variant: FpnVariant
    head_variant: HeadVariant
    config: Optional[DecoderConfig] = None
    digraph: nx.DiGraph = field(default_factory=nx.DiGraph, repr=False)

    def node(self, name: str) -> Node:
        for node in self.nodes.values():
            if node.name == name:
                return node
        raise KeyError(name)

    def input_spec(self, name: str) -> FeatureSpec:
        return self.nodes[self.inputs[name]].spec

    def required_nodes(self, targets: Iterable[int]) -> set:
        needed = set()
        for target in targets:
            needed.add(target)
            needed |= nx.ancestors(self.digraph, target)
        return needed

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Learnable tensors by name; each parameter key contributes once."""
        shapes: Dict[str, Tuple[int, ...]] = {}
        for index in self.order:
            for name, shape in node_parameter_shapes(self, self.nodes[index]).items():
                shapes.setdefault(name, shape)
        return shapes

    def num_parameters(self) -> int:
        return int(sum(np.prod(shape) for shape in self.parameter_shapes().values()))

    def section_nodes(self, section: str) -> List[Node]:
        return [self.nodes[i] for i in self.order if self.nodes[i].section == section]


def node_parameter_shapes(graph: DecoderGraph, node: Node) -> Dict[str, Tuple[int, ...]]:
    if node.param_key is None:
        return {}
    cin = graph.nodes[node.inputs[0]].spec.channels
    cout = node.spec.channels
    if node.kind in (NodeKind.CONV, NodeKind.DEFORM_CONV):
        shapes = {f"{node.param_key}.weight": (cout, cin // node.groups, node.kernel, node.kernel)}
        if node.bias:
            shapes[f"{node.param_key}.bias"] = (cout,)
        return shapes
    if node.kind is NodeKind.NORM:
        return {f"{node.param_key}.gamma": (cout,), f"{node.param_key}.beta": (cout,)}
    return {}


# ============================================================================
# BUILDER
# ============================================================================

class _GraphBuilder:
    """Appends nodes in construction order; the index is the topological tie-break"""

    def __init__(self, input_specs: Dict[str, FeatureSpec], fpn_norm: str):
        self.nodes: Dict[int, Node] = {}
        self.digraph = nx.DiGraph()
        self.sizes = _stride_sizes(input_specs)
        self.fpn_norm = fpn_norm
        self.inputs = {name: self._add(name, NodeKind.INPUT, (), spec, "input")
                       for name, spec in input_specs.items()}

    def spec(self, index: int) -> FeatureSpec:
        return self.nodes[index].spec

    def _add(self, name: str, kind: NodeKind, inputs: Tuple[int, ...], spec: FeatureSpec,
             section: str, **attrs) -> int:
        if spec.height <= 0 or spec.width <= 0 or spec.channels <= 0:
            raise GraphError(f"Node '{name}' has zero-sized output {spec}")
        index = len(self.nodes)
        self.nodes[index] = Node(index, name, kind, tuple(inputs), spec, section, **attrs)
        self.digraph.add_node(index)
        for source in inputs:
            self.digraph.add_edge(source, index)
        return index

    # Primitives -----------------------------------------------------------

    def conv(self, x: int, cout: int, kernel: int, name: str, key: str, section: str,
             stride: int = 1, dilation: int = 1, groups: int = 1, bias: bool = False,
             init: str = "he") -> int:
        spec = self.spec(x)
        if stride == 1:
            out = spec.with_channels(cout)
        else:
            out_stride = spec.stride * stride
            h, w = self.sizes.get(out_stride, (math.ceil(spec.height / stride), math.ceil(spec.width / stride)))
            out = FeatureSpec(out_stride, cout, h, w)
        return self._add(name, NodeKind.CONV, (x,), out, section, param_key=key, kernel=kernel,
                         stride=stride, dilation=dilation, groups=groups, bias=bias, init=init)

    def norm(self, x: int, name: str, key: str, section: str, norm_type: str) -> int:
        return self._add(name, NodeKind.NORM, (x,), self.spec(x), section, param_key=key, norm=norm_type)

    def relu(self, x: int, name: str, section: str) -> int:
        return self._add(name, NodeKind.RELU, (x,), self.spec(x), section)

    def resize_to_stride(self, x: int, stride: int, name: str, section: str) -> int:
        spec = self.spec(x)
        h, w = self.sizes[stride]
        if (spec.height, spec.width) == (h, w):
            return x
        return self._add(name, NodeKind.RESIZE, (x,), FeatureSpec(stride, spec.channels, h, w), section)

    def add(self, inputs: Sequence[int], name: str, section: str) -> int:
        return self._add(name, NodeKind.ADD, tuple(inputs), self.spec(inputs[0]), section)

    def conv_norm_relu(self, x: int, cout: int, kernel: int, name: str, key: str, section: str,
                       norm_type: str, dilation: int = 1) -> int:
        y = self.conv(x, cout, kernel, f"{name}.conv", f"{key}.conv", section, dilation=dilation)
        y = self.norm(y, f"{name}.norm", f"{key}.norm", section, norm_type)
        return self.relu(y, f"{name}.relu", section)

    # Search-space operations ---------------------------------------------

    def unary(self, x: int, op: OperationKind, name: str, key: str, section: str, norm_type: str) -> int:
        width = self.spec(x).channels
        if op is OperationKind.SKIP:
            return x
        if op in (OperationKind.SEP_CONV_3X3, OperationKind.SEP_CONV_3X3_DIL3, OperationKind.SEP_CONV_5X5_DIL6):
            kernel, dilation = {
                OperationKind.SEP_CONV_3X3: (3, 1),
                OperationKind.SEP_CONV_3X3_DIL3: (3, 3),
                OperationKind.SEP_CONV_5X5_DIL6: (5, 6),
            }[op]
            y = self.conv(x, width, kernel, f"{name}.dw", f"{key}.dw", section, dilation=dilation, groups=width)
            y = self.conv(y, width, 1, f"{name}.pw", f"{key}.pw", section)
            y = self.norm(y, f"{name}.norm", f"{key}.norm", section, norm_type)
            return self.relu(y, f"{name}.relu", section)
        if op is OperationKind.DEFORM_CONV_3X3:
            y = self.deform(x, width, f"{name}", f"{key}", section)
            y = self.norm(y, f"{name}.norm", f"{key}.norm", section, norm_type)
            return self.relu(y, f"{name}.relu", section)
        kernel = 1 if op is OperationKind.CONV_1X1 else 3
        return self.conv_norm_relu(x, width, kernel, name, key, section, norm_type)

    def deform(self, x: int, cout: int, name: str, key: str, section: str, bias: bool = False) -> int:
        offsets = self.conv(x, 18, 3, f"{name}.offset", f"{key}.offset", section, bias=True, init="zeros")
        return self._add(f"{name}.dconv", NodeKind.DEFORM_CONV, (x, offsets), self.spec(x).with_channels(cout),
                         section, param_key=f"{key}.dconv", kernel=3, bias=bias)

    def aggregate(self, a: int, b: int, agg: AggregationKind, name: str, section: str) -> int:
        stride = min(self.spec(a).stride, self.spec(b).stride)
        a = self.resize_to_stride(a, stride, f"{name}.up1", section)
        b = self.resize_to_stride(b, stride, f"{name}.up2", section)
        if agg is AggregationKind.SUM:
            return self.add((a, b), f"{name}.sum", section)
        width = self.spec(a).channels
        merged = self._add(f"{name}.cat", NodeKind.CONCAT, (a, b), self.spec(a).with_channels(2 * width), section)
        return self.conv_norm_relu(merged, width, 1, f"{name}.proj", f"{name}.proj", section, self.fpn_norm)


# FPN variants ---------------------------------------------------------------

def _lateral(builder: _GraphBuilder, name: str, width: int, with_norm: bool) -> int:
    source = builder.inputs[name]
    if with_norm:
        return builder.conv_norm_relu(source, width, 1, f"fpn.lateral.{name}", f"fpn.lateral.{name}",
                                      "fpn", builder.fpn_norm)
    return builder.conv(source, width, 1, f"fpn.lateral.{name}", f"fpn.lateral.{name}", "fpn", bias=True)


def _extra_levels(builder: _GraphBuilder, p5: int, width: int) -> Tuple[int, int]:
    p6 = builder.conv(p5, width, 3, "fpn.p6", "fpn.p6", "fpn", stride=2, bias=True)
    p7 = builder.conv(builder.relu(p6, "fpn.p6.relu", "fpn"), width, 3, "fpn.p7", "fpn.p7", "fpn",
                      stride=2, bias=True)
    return p6, p7


def _searched_fpn(builder: _GraphBuilder, fpn: FpnConfig, width: int):
    pool: List[Optional[int]] = [None, None, None]
    laterals = {}

    def resolve(index: int) -> int:
        if index < 3:
            name = f"c{index + 3}"
            if name not in laterals:
                laterals[name] = _lateral(builder, name, width, with_norm=True)
            return laterals[name]
        return pool[index]

    for t, block in enumerate(fpn.blocks, start=1):
        base = f"fpn.bb{t}"
        a = builder.unary(resolve(block.id1), block.op1, f"{base}.op1", f"{base}.op1", "fpn", builder.fpn_norm)
        b = builder.unary(resolve(block.id2), block.op2, f"{base}.op2", f"{base}.op2", "fpn", builder.fpn_norm)
        pool.append(builder.aggregate(a, b, block.agg, base, "fpn"))

    first_collected = len(fpn.blocks) - len(COLLECTED_LEVELS) + 1
    outputs = {}
    for level, t in zip(COLLECTED_LEVELS, range(first_collected, len(fpn.blocks) + 1)):
        outputs[level] = builder.resize_to_stride(pool[2 + t], LEVEL_STRIDES[level], f"fpn.p{level}.resize", "fpn")

    merges = []
    for t in dangling_blocks(fpn, collected=len(COLLECTED_LEVELS)):
        feature = pool[2 + t]
        for level in COLLECTED_LEVELS:
            resized = builder.resize_to_stride(feature, LEVEL_STRIDES[level], f"fpn.x{t}.to_p{level}", "fpn")
            outputs[level] = builder.add((outputs[level], resized), f"fpn.p{level}.merge_x{t}", "fpn")
        merges.append((pool_name(2 + t), tuple(f"p{level}" for level in COLLECTED_LEVELS)))

    outputs[6], outputs[7] = _extra_levels(builder, outputs[5], width)
    return outputs, merges


def _original_fpn(builder: _GraphBuilder, width: int, deformable: bool):
    laterals = {level: _lateral(builder, f"c{level}", width, with_norm=False) for level in COLLECTED_LEVELS}
    merged = {5: laterals[5]}
    for level in (4, 3):
        upsampled = builder.resize_to_stride(merged[level + 1], LEVEL_STRIDES[level], f"fpn.td{level}.up", "fpn")
        merged[level] = builder.add((laterals[level], upsampled), f"fpn.td{level}.sum", "fpn")

    outputs = {}
    for level in COLLECTED_LEVELS:
        name = f"fpn.out{level}"
        if deformable:
            y = merged[level]
            for k in range(2):
                y = builder.unary(y, OperationKind.DEFORM_CONV_3X3, f"{name}.{k}", f"{name}.{k}", "fpn",
                                  builder.fpn_norm)
            outputs[level] = y
        else:
            outputs[level] = builder.conv(merged[level], width, 3, name, name, "fpn", bias=True)
    outputs[6], outputs[7] = _extra_levels(builder, outputs[5], width)
    return outputs, []


# Heads ----------------------------------------------------------------------

def _head_input(builder: _GraphBuilder, feature: int, level: int, head_width: int) -> int:
    if builder.spec(feature).channels == head_width:
        return feature
    return builder.conv_norm_relu(feature, head_width, 1, f"head.l{level}.adapter", "head.adapter", "head", "gn")


def _projections(builder: _GraphBuilder, cls_feature: int, reg_feature: int, ctr_feature: int,
                 level: int, num_classes: int, kernel: int) -> int:
    base = f"head.l{level}"
    cls = builder.conv(cls_feature, num_classes, kernel, f"{base}.cls", "head.cls", "head", bias=True,
                       init="cls_prior")
    reg = builder.conv(reg_feature, 4, kernel, f"{base}.reg", "head.reg", "head", bias=True, init="head_proj")
    reg = builder._add(f"{base}.reg.exp", NodeKind.EXP_SCALE, (reg,), builder.spec(reg), "head",
                       stride=LEVEL_STRIDES[level])
    ctr = builder.conv(ctr_feature, 1, kernel, f"{base}.ctr", "head.ctr", "head", bias=True, init="head_proj")
    spec = builder.spec(cls).with_channels(num_classes + 5)
    return builder._add(f"y{level}", NodeKind.CONCAT, (cls, reg, ctr), spec, "head")


def _searched_head(builder: _GraphBuilder, pyramid: Dict[int, int], head: HeadConfig,
                   head_width: int, num_classes: int) -> Dict[int, int]:
    outputs = {}
    for level in PYRAMID_LEVELS:
        x = _head_input(builder, pyramid[level], level, head_width)
        for j, op in enumerate(head.ops):
            key = f"head.{j}.l{level}" if head.is_independent(j) else f"head.{j}"
            x = builder.unary(x, op, f"head.l{level}.{j}", key, "head", "gn")
        outputs[level] = _projections(builder, x, x, x, level, num_classes, kernel=1)
    return outputs


def _original_head(builder: _GraphBuilder, pyramid: Dict[int, int], head_width: int,
                   num_classes: int) -> Dict[int, int]:
    outputs = {}
    for level in PYRAMID_LEVELS:
        x = _head_input(builder, pyramid[level], level, head_width)
        towers = {}
        for branch in ("cls_tower", "reg_tower"):
            y = x
            for j in range(ORIGINAL_TOWER_DEPTH):
                y = builder.conv_norm_relu(y, head_width, 3, f"head.l{level}.{branch}.{j}",
                                           f"head.{branch}.{j}", "head", "gn")
            towers[branch] = y
        outputs[level] = _projections(builder, towers["cls_tower"], towers["reg_tower"], towers["cls_tower"],
                                      level, num_classes, kernel=3)
    return outputs


# ============================================================================
# COMPILATION
# ============================================================================

def _check_inputs(input_specs: Dict[str, FeatureSpec], expected: Dict[str, int]):
    if set(input_specs) != set(expected):
        raise GraphError(f"Expected input features {sorted(expected)}, got {sorted(input_specs)}")
    for name, stride in expected.items():
        spec = input_specs[name]
        if spec.stride != stride:
            raise GraphError(f"Input {name} must have stride {stride}, got {spec.stride}")
        if min(spec.channels, spec.height, spec.width) <= 0:
            raise GraphError(f"Input {name} has zero-sized spec {spec}")


def build_decoder(
    input_specs: Dict[str, FeatureSpec],
    widths: DecoderWidths,
    num_classes: int,
    fpn_variant: FpnVariant = FpnVariant.SEARCHED,
    head_variant: HeadVariant = HeadVariant.SEARCHED,
    fpn: Optional[FpnConfig] = None,
    head: Optional[HeadConfig] = None,
    fpn_norm: str = "bn",
) -> DecoderGraph:
    """Assemble any FPN variant with any head variant."""
    if widths.fpn_width <= 0 or widths.head_width <= 0:
        raise GraphError(f"Widths must be positive, got {widths}")
    if num_classes < 1:
        raise GraphError(f"num_classes must be >= 1, got {num_classes}")
    if widths.head_width % GN_GROUPS:
        raise GraphError(f"head_width {widths.head_width} is not divisible by {GN_GROUPS} GroupNorm groups")
    if fpn_norm not in ("bn", "gn"):
        raise GraphError(f"Unknown FPN normalization '{fpn_norm}'")
    if fpn_norm == "gn" and widths.fpn_width % GN_GROUPS:
        raise GraphError(f"fpn_width {widths.fpn_width} is not divisible by {GN_GROUPS} GroupNorm groups")

    if fpn_variant is FpnVariant.PREFETCHED:
        _check_inputs(input_specs, {f"p{level}": LEVEL_STRIDES[level] for level in PYRAMID_LEVELS})
    else:
        _check_inputs(input_specs, INPUT_STRIDES)
    builder = _GraphBuilder(input_specs, fpn_norm)

    if fpn_variant is FpnVariant.SEARCHED:
        if fpn is None:
            raise GraphError("Searched FPN variant requires an FpnConfig")
        validate_fpn(fpn)
        pyramid, merges = _searched_fpn(builder, fpn, widths.fpn_width)
    elif fpn_variant is FpnVariant.PREFETCHED:
        pyramid = {level: builder.inputs[f"p{level}"] for level in PYRAMID_LEVELS}
        merges = []
    else:
        pyramid, merges = _original_fpn(builder, widths.fpn_width, fpn_variant is FpnVariant.DEFORM_ORIGINAL)

    if head_variant is HeadVariant.SEARCHED:
        if head is None:
            raise GraphError("Searched head variant requires a HeadConfig")
        validate_head(head)
        outputs = _searched_head(builder, pyramid, head, widths.head_width, num_classes)
        partition = tuple(head.is_independent(j) for j in range(len(head.ops)))
    else:
        outputs = _original_head(builder, pyramid, widths.head_width, num_classes)
        partition = (False,) * ORIGINAL_TOWER_DEPTH

    if not nx.is_directed_acyclic_graph(builder.digraph):
        raise GraphError("Decoder graph contains a cycle")

    keep = set(builder.inputs.values()) | set(outputs.values())
    for target in outputs.values():
        keep |= nx.ancestors(builder.digraph, target)
    digraph = builder.digraph.subgraph(keep).copy()
    pruned = len(builder.nodes) - len(keep)
    if pruned:
        logger.debug(f"Pruned {pruned} unreachable nodes")

    graph = DecoderGraph(
        nodes={i: builder.nodes[i] for i in keep},
        order=list(nx.lexicographical_topological_sort(digraph, key=lambda i: i)),
        inputs=dict(builder.inputs),
        pyramid_outputs={f"p{level}": index for level, index in pyramid.items()},
        outputs=outputs,
        global_merges=merges,
        head_partition=partition,
        num_classes=num_classes,
        widths=widths,
        fpn_variant=fpn_variant,
        head_variant=head_variant,
        config=DecoderConfig(fpn, head) if fpn is not None and head is not None else None,
        digraph=digraph,
    )
    logger.debug(f"Compiled {fpn_variant.value}/{head_variant.value} decoder: {len(graph.nodes)} nodes, "
                 f"{graph.num_parameters()} parameters")
    return graph


def compile_decoder(config: DecoderConfig, input_specs: Dict[str, FeatureSpec], widths: DecoderWidths,
                    num_classes: int, fpn_norm: str = "bn") -> DecoderGraph:
    """Compile a searched FPN and searched head."""
    return build_decoder(input_specs, widths, num_classes, FpnVariant.SEARCHED, HeadVariant.SEARCHED,
                         fpn=config.fpn, head=config.head, fpn_norm=fpn_norm)


def original_fcos_decoder(input_specs: Dict[str, FeatureSpec], widths: DecoderWidths,
                          num_classes: int, deformable_fpn: bool = False) -> DecoderGraph:
    variant = FpnVariant.DEFORM_ORIGINAL if deformable_fpn else FpnVariant.ORIGINAL
    return build_decoder(input_specs, widths, num_classes, variant, HeadVariant.ORIGINAL)


# ============================================================================
# PARAMETERS
# ============================================================================

class ParamSet:
    """
    Parameters and normalization buffers for one graph.

    counters records how many forward passes touched each graph section.
    """

    def __init__(self, params: Dict[str, Parameter], buffers: Dict[str, np.ndarray]):
        self.params = params
        self.buffers = buffers
        self.training = True
        self.counters: Counter = Counter()

    def train(self) -> "ParamSet":
        self.training = True
        return self

    def eval(self) -> "ParamSet":
        self.training = False
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.params.items()}
        state.update({f"buffer:{name}": value.copy() for name, value in self.buffers.items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        for name, value in state.items():
            if name.startswith("buffer:"):
                self.buffers[name[len("buffer:"):]][...] = value
            elif name in self.params:
                self.params[name].data = np.array(value, dtype=self.params[name].dtype)
            else:
                raise GraphError(f"Unknown parameter '{name}' in state")

    def with_parameters(self, params: Dict[str, Parameter]) -> "ParamSet":
        """Same buffers, different parameter values (e.g. Polyak averages)."""
        other = ParamSet(params, self.buffers)
        other.training = self.training
        other.counters = self.counters
        return other


def init_params(graph: DecoderGraph, seed: int, dtype=np.float32) -> ParamSet:
    """He-normal convolutions, unit norm affine, zero offset convs, prior-biased cls projection."""
    rng = np.random.default_rng(seed)
    params: Dict[str, Parameter] = {}
    buffers: Dict[str, np.ndarray] = {}
    for index in graph.order:
        node = graph.nodes[index]
        for name, shape in node_parameter_shapes(graph, node).items():
            if name in params:
                continue
            if name.endswith(".weight"):
                if node.init == "zeros":
                    value = np.zeros(shape)
                elif node.init in ("head_proj", "cls_prior"):
                    value = rng.normal(0.0, 0.01, size=shape)
                else:
                    fan_in = shape[1] * shape[2] * shape[3]
                    value = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
            elif name.endswith(".bias"):
                value = np.zeros(shape)
                if node.init == "cls_prior":
                    value[:] = -math.log((1 - CLS_PRIOR) / CLS_PRIOR)
            elif name.endswith(".gamma"):
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            params[name] = Parameter(value.astype(dtype), name=name)
        if node.kind is NodeKind.NORM and node.norm == "bn" and f"{node.param_key}.running_mean" not in buffers:
            channels = node.spec.channels
            buffers[f"{node.param_key}.running_mean"] = np.zeros(channels, dtype=dtype)
            buffers[f"{node.param_key}.running_var"] = np.ones(channels, dtype=dtype)
    return ParamSet(params, buffers)


# ============================================================================
# EXECUTION
# ============================================================================

def _evaluate(node: Node, args: List[Tensor], params: ParamSet) -> Tensor:
    p = params.params
    if node.kind is NodeKind.CONV:
        bias = p[f"{node.param_key}.bias"] if node.bias else None
        return conv2d(args[0], p[f"{node.param_key}.weight"], bias, stride=node.stride,
                      dilation=node.dilation, groups=node.groups)
    if node.kind is NodeKind.DEFORM_CONV:
        bias = p[f"{node.param_key}.bias"] if node.bias else None
        return deform_conv2d(args[0], p[f"{node.param_key}.weight"], bias, args[1], dilation=node.dilation)
    if node.kind is NodeKind.NORM:
        gamma, beta = p[f"{node.param_key}.gamma"], p[f"{node.param_key}.beta"]
        if node.norm == "gn":
            return group_norm(args[0], gamma, beta, GN_GROUPS)
        return batch_norm(args[0], gamma, beta, params.buffers[f"{node.param_key}.running_mean"],
                          params.buffers[f"{node.param_key}.running_var"], training=params.training)
    if node.kind is NodeKind.RELU:
        return relu(args[0])
    if node.kind is NodeKind.RESIZE:
        return bilinear_resize(args[0], node.spec.height, node.spec.width)
    if node.kind is NodeKind.ADD:
        out = args[0]
        for other in args[1:]:
            out = add(out, other)
        return out
    if node.kind is NodeKind.CONCAT:
        return concat(args, axis=1)
    if node.kind is NodeKind.EXP_SCALE:
        return exp(clip(args[0], -REG_LOGIT_LIMIT, REG_LOGIT_LIMIT)) * float(node.stride)
    raise GraphError(f"Cannot evaluate node kind {node.kind}")


def run_graph(graph: DecoderGraph, params: ParamSet, features: Dict[str, Tensor],
              targets: Iterable[int]) -> Dict[int, Tensor]:
    """Evaluate the nodes needed for `targets`; returns node index -> value."""
    targets = list(targets)
    needed = graph.required_nodes(targets)
    values: Dict[int, Tensor] = {}
    sections = set()
    for index in graph.order:
        if index not in needed:
            continue
        node = graph.nodes[index]
        if node.kind is NodeKind.INPUT:
            if node.name not in features:
                raise ShapeError(f"Missing input feature '{node.name}'")
            value = features[node.name]
            if not isinstance(value, Tensor):
                value = Tensor(value)
            if value.shape[1:] != node.spec.shape:
                raise ShapeError(f"Input '{node.name}' has shape {value.shape[1:]}, expected {node.spec.shape}")
        else:
            value = _evaluate(node, [values[i] for i in node.inputs], params)
            sections.add(node.section)
        values[index] = value
    for section in sections:
        params.counters[section] += 1
    return {target: values[target] for target in targets}


def forward(graph: DecoderGraph, params: ParamSet, features: Dict[str, Tensor]) -> Dict[int, Tensor]:
    """Pyramid predictions: level -> (N, K + 5, H_l, W_l)."""
    results = run_graph(graph, params, features, graph.outputs.values())
    return {level: results[index] for level, index in graph.outputs.items()}


def forward_pyramid(graph: DecoderGraph, params: ParamSet, features: Dict[str, Tensor]) -> Dict[str, Tensor]:
    """FPN outputs p3..p7 only; the head is not evaluated."""
    results = run_graph(graph, params, features, graph.pyramid_outputs.values())
    return {name: results[index] for name, index in graph.pyramid_outputs.items()}


# ============================================================================
# DOT EXPORT
# ============================================================================

_SECTION_COLORS = {"input": "lightgrey", "fpn": "lightblue", "head": "lightyellow"}


def to_dot(graph: DecoderGraph, path: Optional[Union[str, Path]] = None) -> str:
    lines = ["digraph decoder {", "  rankdir=TB;", "  node [shape=box, style=filled, fontsize=10];"]
    for index in graph.order:
        node = graph.nodes[index]
        spec = node.spec
        label = f"{node.name}\\n{node.kind.value} {spec.channels}x{spec.height}x{spec.width} /{spec.stride}"
        lines.append(f'  n{index} [label="{label}", fillcolor={_SECTION_COLORS[node.section]}];')
    for source, target in sorted(graph.digraph.edges()):
        lines.append(f"  n{source} -> n{target};")
    lines.append("}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
