"""
Unit tests for the JSON-lines search log.

Tests:
-----
- Record serialization (diverged rewards, optional wall time)
- Header, append and truncate
- Top-k selection
"""

import json
import math

import pytest

from decoder_search.search_log import SearchLog, SearchRecord, read_log, top_k


def record(seq, reward, stage="FPN", wall_time=None):
    return SearchRecord(seq=seq, stage=stage, batch=seq // 2, job_id=f"{stage.lower()}-{seq:04d}",
                        tokens=[seq % 3, 1, 2], reward=reward, loss_terms={"cls": 1.0},
                        macs=100 + seq, params=10, wall_time=wall_time)


@pytest.mark.unit
class TestSearchRecord:
    """Test record serialization."""

    def test_diverged_reward_is_null(self):
        """Test -inf is written as null and read back as -inf."""
        data = record(0, -math.inf).to_dict()
        assert data["reward"] is None
        assert SearchRecord.from_dict(json.loads(json.dumps(data))).reward == -math.inf

    def test_wall_time_only_when_requested(self):
        """Test timing is excluded unless asked for."""
        rec = record(1, -2.0, wall_time=3.5)
        assert "wall_time" not in rec.to_dict()
        assert rec.to_dict(include_timing=True)["wall_time"] == 3.5

    def test_share_from(self):
        """Test the sharing index is the last head token."""
        assert record(0, -1.0, stage="HEAD").share_from == 2
        assert record(0, -1.0).share_from is None


@pytest.mark.unit
class TestSearchLog:
    """Test the log file."""

    def test_header_and_records(self, temp_output_dir):
        """Test written records come back unchanged after the header."""
        log = SearchLog(temp_output_dir / "search.jsonl")
        log.start({"seed": 0}, "abc")
        records = [record(i, -float(i)) for i in range(3)]
        log.append(records)
        header, loaded = read_log(log.path)
        assert header["plan_hash"] == "abc"
        assert header["plan"] == {"seed": 0}
        assert loaded == records

    def test_keys_sorted(self, temp_output_dir):
        """Test record lines are written with sorted keys and no spaces."""
        log = SearchLog(temp_output_dir / "search.jsonl")
        log.start({}, "h")
        log.append([record(0, -1.0)])
        line = log.path.read_text().splitlines()[1]
        keys = list(json.loads(line))
        assert keys == sorted(keys)
        assert ", " not in line

    def test_truncate(self, temp_output_dir):
        """Test uncheckpointed records are dropped and the header kept."""
        log = SearchLog(temp_output_dir / "search.jsonl")
        log.start({"seed": 1}, "h")
        log.append([record(i, -1.0) for i in range(5)])
        kept = log.truncate(lambda r: r.seq < 2)
        header, loaded = read_log(log.path)
        assert [r.seq for r in kept] == [0, 1]
        assert loaded == kept
        assert header["plan_hash"] == "h"

    def test_headerless(self, temp_output_dir):
        """Test a bare record stream is readable."""
        path = temp_output_dir / "bare.jsonl"
        path.write_text("\n".join(json.dumps(record(i, -1.0).to_dict()) for i in range(2)) + "\n")
        header, loaded = read_log(path)
        assert header == {}
        assert len(loaded) == 2

    def test_empty(self, temp_output_dir):
        """Test an empty file."""
        path = temp_output_dir / "empty.jsonl"
        path.write_text("")
        assert read_log(path) == ({}, [])


@pytest.mark.unit
class TestTopK:
    """Test selection of the best records."""

    def test_ties_go_to_earlier_seq(self):
        """Test equal rewards keep sequence order."""
        records = [record(3, -1.0), record(1, -1.0), record(2, -0.5), record(0, -math.inf)]
        assert [r.seq for r in top_k(records, 3)] == [2, 1, 3]

    def test_stage_filter(self):
        """Test filtering by stage."""
        records = [record(0, -1.0), record(1, -0.1, stage="HEAD")]
        assert [r.seq for r in top_k(records, 5, stage="FPN")] == [0]
