#!/usr/bin/env python3
"""
COST MODEL
==========

Analytic multiply-accumulate (MAC) and parameter counts for compiled decoder
graphs. "FLOPs" in reports means MACs.

Per-node conventions (output H x W, per image):
    conv          kh * kw * (Cin / groups) * Cout * H * W
    deform_conv   kh * kw * Cin * Cout * H * W + 4 * taps * Cin * H * W
                  (the offset predictor is its own conv node)
    norm, relu    2 * elements
    exp_scale     2 * elements
    resize        4 * output elements
    add           (inputs - 1) * elements
    concat, input 0

Parameters are attributed to the first node that uses a parameter key, so
shared head layers are counted once and per-level layers five times.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .decoder_graph import (
    DecoderGraph,
    DecoderWidths,
    FpnVariant,
    HeadVariant,
    Node,
    NodeKind,
    backbone_specs,
    build_decoder,
    compile_decoder,
    node_parameter_shapes,
    original_fcos_decoder,
    pyramid_specs,
)
from .search_space import DecoderConfig, HeadConfig

logger = logging.getLogger(__name__)

REPORT_HEADER = "# costs in MACs (1 MAC counted as 1 FLOP), per image"


@dataclass
class CostRow:
    node: str
    kind: str
    section: str
    output_shape: Tuple[int, int, int]
    macs: int
    params: int


@dataclass
class CostReport:
    macs: int
    params: int
    rows: List[CostRow] = field(default_factory=list)

    def section_totals(self) -> Dict[str, Dict[str, int]]:
        totals: Dict[str, Dict[str, int]] = {}
        for row in self.rows:
            entry = totals.setdefault(row.section, {"macs": 0, "params": 0})
            entry["macs"] += row.macs
            entry["params"] += row.params
        return totals

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"node": r.node, "kind": r.kind, "section": r.section,
              "output_shape": "x".join(str(d) for d in r.output_shape), "macs": r.macs, "params": r.params}
             for r in self.rows],
            columns=["node", "kind", "section", "output_shape", "macs", "params"],
        )

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with path.open("w") as f:
            f.write(REPORT_HEADER + "\n")
            self.to_frame().to_csv(f, index=False)
        return path

    def table(self) -> str:
        """Per-node rows as a fixed-width text table."""
        return self.to_frame().to_string(index=False)

    def summary(self) -> str:
        lines = [REPORT_HEADER, f"total MACs   {self.macs:,}", f"total params {self.params:,}"]
        for section, totals in sorted(self.section_totals().items()):
            lines.append(f"  {section:<6} MACs {totals['macs']:,}  params {totals['params']:,}")
        return "\n".join(lines)


def _elements(node: Node) -> int:
    return node.spec.channels * node.spec.height * node.spec.width


def node_macs(graph: DecoderGraph, node: Node) -> int:
    spec = node.spec
    if node.kind is NodeKind.CONV:
        cin = graph.nodes[node.inputs[0]].spec.channels
        return node.kernel * node.kernel * (cin // node.groups) * spec.channels * spec.height * spec.width
    if node.kind is NodeKind.DEFORM_CONV:
        cin = graph.nodes[node.inputs[0]].spec.channels
        taps = node.kernel * node.kernel
        locations = spec.height * spec.width
        return taps * cin * spec.channels * locations + 4 * taps * cin * locations
    if node.kind in (NodeKind.NORM, NodeKind.RELU, NodeKind.EXP_SCALE):
        return 2 * _elements(node)
    if node.kind is NodeKind.RESIZE:
        return 4 * _elements(node)
    if node.kind is NodeKind.ADD:
        return (len(node.inputs) - 1) * _elements(node)
    return 0


def cost(graph: DecoderGraph) -> CostReport:
    """Per-node MAC and parameter breakdown for the graph's bound input shapes."""
    seen = set()
    rows = []
    for index in graph.order:
        node = graph.nodes[index]
        params = 0
        for name, shape in node_parameter_shapes(graph, node).items():
            if name not in seen:
                seen.add(name)
                params += int(np.prod(shape))
        rows.append(CostRow(node.name, node.kind.value, node.section, node.spec.shape,
                            node_macs(graph, node), params))
    return CostReport(sum(r.macs for r in rows), sum(r.params for r in rows), rows)


# ============================================================================
# CONVENIENCE BUILDERS
# ============================================================================

def config_cost(config: DecoderConfig, image_hw: Tuple[int, int], widths: DecoderWidths,
                num_classes: int, backbone_channels=(64, 128, 128)) -> CostReport:
    graph = compile_decoder(config, backbone_specs(image_hw, backbone_channels), widths, num_classes)
    return cost(graph)


def original_cost(image_hw: Tuple[int, int], widths: DecoderWidths, num_classes: int,
                  backbone_channels=(64, 128, 128), deformable_fpn: bool = False) -> CostReport:
    graph = original_fcos_decoder(backbone_specs(image_hw, backbone_channels), widths, num_classes, deformable_fpn)
    return cost(graph)


def head_cost(head: Optional[HeadConfig], image_hw: Tuple[int, int], width: int, num_classes: int,
              backbone_channels=(64, 128, 128)) -> CostReport:
    """Cost of a head alone over a width-`width` pyramid; head=None is the original 4+4-conv head."""
    inputs = pyramid_specs(backbone_specs(image_hw, backbone_channels), width)
    variant = HeadVariant.ORIGINAL if head is None else HeadVariant.SEARCHED
    graph = build_decoder(inputs, DecoderWidths(width, width), num_classes, FpnVariant.PREFETCHED, variant,
                          head=head)
    return cost(graph)


def compare(reports: Dict[str, CostReport]) -> pd.DataFrame:
    """One row per candidate, ordered by total MACs then name."""
    rows = []
    for name, report in reports.items():
        sections = report.section_totals()
        rows.append({
            "name": name,
            "macs": report.macs,
            "params": report.params,
            "fpn_macs": sections.get("fpn", {}).get("macs", 0),
            "head_macs": sections.get("head", {}).get("macs", 0),
            "fpn_params": sections.get("fpn", {}).get("params", 0),
            "head_params": sections.get("head", {}).get("params", 0),
        })
    frame = pd.DataFrame(rows, columns=["name", "macs", "params", "fpn_macs", "head_macs", "fpn_params", "head_params"])
    return frame.sort_values(["macs", "name"], kind="stable").reset_index(drop=True)
