"""
Unit tests for the analytic cost model.

Tests:
-----
- Hand-counted MACs and parameters of a minimal head
- Recount of random decoders from their parameter shapes
- Reference searched head against the original head
- Report formatting
"""

import numpy as np
import pytest

from decoder_search.cost_model import (
    REPORT_HEADER,
    compare,
    config_cost,
    cost,
    head_cost,
    original_cost,
)
from decoder_search.decoder_graph import (
    DecoderWidths,
    FpnVariant,
    HeadVariant,
    NodeKind,
    backbone_specs,
    build_decoder,
    compile_decoder,
    node_parameter_shapes,
    pyramid_specs,
)
from decoder_search.search_space import REFERENCE_SEARCHED_HEAD, HeadConfig, OperationKind, decode, sample_uniform


def recount(graph):
    """MACs of weighted nodes recomputed as |weight| x output locations."""
    macs = 0
    for index in graph.order:
        node = graph.nodes[index]
        if node.kind in (NodeKind.CONV, NodeKind.DEFORM_CONV):
            weight = node_parameter_shapes(graph, node)[f"{node.param_key}.weight"]
            macs += int(np.prod(weight)) * node.spec.height * node.spec.width
    return macs


@pytest.mark.unit
class TestHandCount:
    """Test costs of a graph small enough to count by hand."""

    def test_skip_head(self):
        """Test a skip-only head: cls, reg (+exp) and ctr 1x1 projections at five levels."""
        inputs = pyramid_specs(backbone_specs((64, 64)), 16)
        graph = build_decoder(inputs, DecoderWidths(16, 16), 2, FpnVariant.PREFETCHED, HeadVariant.SEARCHED,
                              head=HeadConfig((OperationKind.SKIP,) * 6, 0))
        report = cost(graph)
        locations = 8 * 8 + 4 * 4 + 2 * 2 + 1 + 1
        per_location = 16 * 2 + 16 * 4 + 2 * 4 + 16 * 1
        assert report.macs == per_location * locations
        assert report.params == (16 * 2 + 2) + (16 * 4 + 4) + (16 + 1)

    def test_shared_weights_counted_once(self):
        """Test parameters of shared head layers are counted once, MACs at every level."""
        inputs = pyramid_specs(backbone_specs((64, 64)), 16)
        shared = build_decoder(inputs, DecoderWidths(16, 16), 2, FpnVariant.PREFETCHED, HeadVariant.SEARCHED,
                               head=HeadConfig((OperationKind.CONV_1X1,) + (OperationKind.SKIP,) * 5, 0))
        separate = build_decoder(inputs, DecoderWidths(16, 16), 2, FpnVariant.PREFETCHED, HeadVariant.SEARCHED,
                                 head=HeadConfig((OperationKind.CONV_1X1,) + (OperationKind.SKIP,) * 5, 1))
        a, b = cost(shared), cost(separate)
        assert a.macs == b.macs
        layer_params = 16 * 16 + 2 * 16  # conv + GN affine
        assert b.params - a.params == 4 * layer_params


@pytest.mark.unit
class TestRecount:
    """Test the cost model against an independent recount."""

    @pytest.mark.parametrize("seed", range(6))
    def test_random_decoders(self, seed):
        """Test conv MACs and parameter totals of sampled decoders."""
        graph = compile_decoder(decode(sample_uniform(seed)), backbone_specs((128, 96)), DecoderWidths(32, 32), 3)
        report = cost(graph)
        conv_rows = sum(r.macs for r in report.rows if r.kind == NodeKind.CONV.value)
        deform_rows = [graph.nodes[i] for i in graph.order if graph.nodes[i].kind is NodeKind.DEFORM_CONV]
        sampling = sum(4 * 9 * graph.nodes[n.inputs[0]].spec.channels * n.spec.height * n.spec.width
                       for n in deform_rows)
        deform_macs = sum(r.macs for r in report.rows if r.kind == NodeKind.DEFORM_CONV.value)
        assert conv_rows + deform_macs - sampling == recount(graph)
        assert report.params == graph.num_parameters()
        assert report.macs == sum(r.macs for r in report.rows)

    def test_cost_grows_with_resolution(self):
        """Test MACs scale with the image while parameters stay fixed."""
        config = decode(sample_uniform(3))
        small = config_cost(config, (64, 64), DecoderWidths(16, 16), 2)
        large = config_cost(config, (128, 128), DecoderWidths(16, 16), 2)
        assert large.macs > small.macs
        assert large.params == small.params


@pytest.mark.unit
class TestReferenceComparison:
    """Test relative costs of known decoders."""

    def test_reference_head_cheaper_than_original(self):
        """Test the searched head costs less than the 4+4-conv head at width 256 on 1088x800."""
        searched = head_cost(REFERENCE_SEARCHED_HEAD, (800, 1088), 256, 80)
        original = head_cost(None, (800, 1088), 256, 80)
        assert searched.macs < original.macs
        assert searched.params < original.params

    def test_deformable_fpn_costs_more(self):
        """Test deformable FPN convs add cost to the original decoder."""
        plain = original_cost((128, 128), DecoderWidths(32, 32), 3)
        deform = original_cost((128, 128), DecoderWidths(32, 32), 3, deformable_fpn=True)
        assert deform.section_totals()["fpn"]["macs"] > plain.section_totals()["fpn"]["macs"]
        assert deform.section_totals()["head"] == plain.section_totals()["head"]


@pytest.mark.unit
class TestReports:
    """Test report formatting."""

    def test_summary_and_csv(self, temp_output_dir):
        """Test summary text and CSV header."""
        report = original_cost((64, 64), DecoderWidths(16, 16), 2)
        assert report.summary().startswith(REPORT_HEADER)
        assert f"{report.macs:,}" in report.summary()
        path = report.to_csv(temp_output_dir / "cost.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == REPORT_HEADER
        assert lines[1] == "node,kind,section,output_shape,macs,params"
        assert len(lines) == 2 + len(report.rows)

    def test_table_has_one_line_per_node(self):
        """Test the text table lists every node under a header."""
        report = original_cost((64, 64), DecoderWidths(16, 16), 2)
        lines = report.table().splitlines()
        assert lines[0].split() == ["node", "kind", "section", "output_shape", "macs", "params"]
        assert len(lines) == 1 + len(report.rows)
        assert report.rows[-1].node in lines[-1]

    def test_compare_sorted_by_macs(self):
        """Test comparison rows are ordered by total MACs."""
        reports = {
            "original": head_cost(None, (64, 64), 16, 2),
            "searched": head_cost(REFERENCE_SEARCHED_HEAD, (64, 64), 16, 2),
        }
        frame = compare(reports)
        assert list(frame["name"]) == ["searched", "original"]
        assert list(frame["macs"]) == sorted(frame["macs"])
