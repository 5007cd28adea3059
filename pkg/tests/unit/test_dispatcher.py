"""
Unit tests for the evaluation dispatcher.

Tests:
-----
- Frame codec and message validation
- Local evaluation and error capture
- Coordinator/worker loopback, plan-hash handshake and job reassignment
"""

import asyncio
import math
import threading

import pytest

from decoder_search import dispatcher
from decoder_search.dispatcher import (
    PROTOCOL_VERSION,
    Coordinator,
    EvalRequest,
    EvalResult,
    LocalEvaluator,
    RemoteEvaluator,
    decode_frame,
    encode_frame,
    read_frame,
    run_worker,
    safe_evaluate,
    write_frame,
)
from decoder_search.errors import DispatchError, ProtocolError

PLAN_HASH = "f" * 64


def make_requests(n, plan_hash=PLAN_HASH):
    return [EvalRequest(f"fpn-{i:04d}", "FPN", [i, 1, 2], seed=100 + i, plan_hash=plan_hash, cache_id="c")
            for i in range(n)]


def fake_evaluate(request):
    return EvalResult(request.job_id, reward=-float(request.seed), loss_terms={"cls": float(request.seed)})


# ============================================================================
# CODEC
# ============================================================================

@pytest.mark.unit
class TestFrameCodec:
    """Test the length-prefixed JSON frames."""

    def test_encoding(self):
        """Test the prefix is the big-endian payload length."""
        assert encode_frame({"a": 1}) == b"\x00\x00\x00\x07" + b'{"a":1}'

    def test_round_trip(self):
        """Test decode inverts encode."""
        message = {"type": "job", "request": make_requests(1)[0].to_dict()}
        assert decode_frame(encode_frame(message)) == message

    def test_oversize(self, monkeypatch):
        """Test frames above the size limit are refused."""
        monkeypatch.setattr(dispatcher, "MAX_FRAME_SIZE", 8)
        with pytest.raises(ProtocolError):
            encode_frame({"payload": "x" * 20})

    def test_truncated(self):
        """Test a frame missing payload bytes."""
        with pytest.raises(ProtocolError):
            decode_frame(encode_frame({"a": 1})[:-2])

    def test_non_object_payload(self):
        """Test payloads must be JSON objects."""
        with pytest.raises(ProtocolError):
            decode_frame(b"\x00\x00\x00\x02[]")

    def test_invalid_utf8(self):
        """Test undecodable payloads."""
        with pytest.raises(ProtocolError):
            decode_frame(b"\x00\x00\x00\x02\xff\xfe")

    async def test_stream_end(self):
        """Test a clean end of stream reads as None and a cut header as an error."""
        reader = asyncio.StreamReader()
        reader.feed_data(encode_frame({"a": 1}))
        reader.feed_eof()
        assert await read_frame(reader) == {"a": 1}
        assert await read_frame(reader) is None

        partial = asyncio.StreamReader()
        partial.feed_data(b"\x00\x00")
        partial.feed_eof()
        with pytest.raises(ProtocolError):
            await read_frame(partial)


@pytest.mark.unit
class TestMessages:
    """Test request and result messages."""

    def test_malformed_request(self):
        """Test missing fields raise ProtocolError."""
        with pytest.raises(ProtocolError):
            EvalRequest.from_dict({"job_id": "x", "tokens": [1]})

    def test_diverged_result_serializes_null(self):
        """Test -inf rewards and NaN loss terms travel as null."""
        result = EvalResult("fpn-0001", -math.inf, loss_terms={"cls": math.nan}, status="diverged")
        data = result.to_dict()
        assert data["reward"] is None and data["loss_terms"]["cls"] is None
        restored = EvalResult.from_dict(decode_frame(encode_frame(data)))
        assert restored.reward == -math.inf
        assert math.isnan(restored.loss_terms["cls"])
        assert restored.status == "diverged"

    def test_safe_evaluate_captures_errors(self):
        """Test an exception becomes an error result."""
        def explode(request):
            raise ValueError("boom")

        result = safe_evaluate(explode, make_requests(1)[0], "w1")
        assert result.status == "error"
        assert result.reward == -math.inf
        assert result.message == "ValueError: boom"
        assert result.worker_id == "w1"


@pytest.mark.unit
class TestLocalEvaluator:
    """Test in-process evaluation."""

    @pytest.mark.parametrize("jobs", [1, 3])
    def test_results_in_request_order(self, jobs):
        """Test results follow the request order for any pool size."""
        requests = make_requests(7)
        with LocalEvaluator(fake_evaluate, jobs=jobs) as evaluator:
            results = evaluator.evaluate(requests)
        assert [r.job_id for r in results] == [r.job_id for r in requests]
        assert [r.reward for r in results] == [-float(r.seed) for r in requests]


# ============================================================================
# COORDINATOR
# ============================================================================

@pytest.mark.unit
class TestCoordinator:
    """Test the coordinator and worker loop over loopback TCP."""

    def test_job_timeout(self):
        """Test the timeout is the larger of the floor and factor x median."""
        coordinator = Coordinator(PLAN_HASH, timeout_factor=10.0, min_timeout=30.0, no_worker_timeout=600.0)
        assert coordinator.job_timeout([]) == 600.0
        assert coordinator.job_timeout([1.0, 2.0, 3.0]) == 30.0
        assert coordinator.job_timeout([10.0]) == 100.0

    async def test_loopback(self):
        """Test two workers complete a batch and results come back in order."""
        coordinator = Coordinator(PLAN_HASH, tick=0.05)
        await coordinator.start()
        workers = [asyncio.create_task(run_worker("127.0.0.1", coordinator.port, PLAN_HASH, fake_evaluate, f"w{i}"))
                   for i in range(2)]
        requests = make_requests(6)
        results = await asyncio.wait_for(coordinator.run_jobs(requests), timeout=30)
        await coordinator.stop()
        completed = await asyncio.wait_for(asyncio.gather(*workers), timeout=10)
        assert [r.job_id for r in results] == [r.job_id for r in requests]
        assert [r.reward for r in results] == [-float(r.seed) for r in requests]
        assert sum(completed) == 6
        assert coordinator.reassignments == 0

    async def test_settled_jobs_are_released(self):
        """Test job state is dropped after each submission settles."""
        coordinator = Coordinator(PLAN_HASH, tick=0.05)
        await coordinator.start()
        worker = asyncio.create_task(run_worker("127.0.0.1", coordinator.port, PLAN_HASH, fake_evaluate, "w"))
        requests = make_requests(6)
        for batch in (requests[:3], requests[3:]):
            results = await asyncio.wait_for(coordinator.run_jobs(batch), timeout=30)
            assert [r.job_id for r in results] == [r.job_id for r in batch]
            assert coordinator.tracked_jobs == 0
        await coordinator.stop()
        assert await asyncio.wait_for(worker, timeout=10) == 6

    async def test_late_duplicate_after_settle_is_ignored(self):
        """Test a timed-out worker answering after the job settled neither wins nor re-tracks the job."""
        coordinator = Coordinator(PLAN_HASH, min_timeout=0.1, no_worker_timeout=0.3, tick=0.05)
        await coordinator.start()
        reader, writer = await asyncio.open_connection("127.0.0.1", coordinator.port)
        await write_frame(writer, {"type": "hello", "protocol": PROTOCOL_VERSION,
                                   "plan_hash": PLAN_HASH, "worker_id": "slow"})
        assert (await read_frame(reader))["type"] == "welcome"

        submission = asyncio.create_task(coordinator.run_jobs(make_requests(1)))
        job = await asyncio.wait_for(read_frame(reader), timeout=10)
        worker = asyncio.create_task(run_worker("127.0.0.1", coordinator.port, PLAN_HASH, fake_evaluate, "steady"))
        results = await asyncio.wait_for(submission, timeout=30)
        assert results[0].worker_id.startswith("steady")

        late = EvalResult(job["request"]["job_id"], reward=123.0)
        await write_frame(writer, {"type": "result", "result": late.to_dict()})
        await asyncio.sleep(0.3)
        assert coordinator.tracked_jobs == 0
        assert coordinator.reassignments >= 1

        writer.close()
        await writer.wait_closed()
        await coordinator.stop()
        await asyncio.wait_for(worker, timeout=10)

    async def test_plan_hash_mismatch(self):
        """Test a worker for another plan is rejected at the handshake."""
        coordinator = Coordinator(PLAN_HASH)
        await coordinator.start()
        try:
            with pytest.raises(ProtocolError, match="rejected"):
                await run_worker("127.0.0.1", coordinator.port, "0" * 64, fake_evaluate)
        finally:
            await coordinator.stop()

    async def test_duplicate_job_ids(self):
        """Test one submission cannot repeat a job id."""
        coordinator = Coordinator(PLAN_HASH)
        await coordinator.start()
        try:
            with pytest.raises(DispatchError):
                await coordinator.run_jobs(make_requests(1) * 2)
        finally:
            await coordinator.stop()

    async def test_lost_worker_job_is_reassigned(self):
        """Test a job held by a worker that disconnects goes to another worker."""
        coordinator = Coordinator(PLAN_HASH, tick=0.05)
        await coordinator.start()
        reader, writer = await asyncio.open_connection("127.0.0.1", coordinator.port)
        await write_frame(writer, {"type": "hello", "protocol": PROTOCOL_VERSION,
                                   "plan_hash": PLAN_HASH, "worker_id": "flaky"})
        assert (await read_frame(reader))["type"] == "welcome"

        submission = asyncio.create_task(coordinator.run_jobs(make_requests(1)))
        job = await asyncio.wait_for(read_frame(reader), timeout=10)
        assert job["type"] == "job"
        writer.close()
        await writer.wait_closed()

        worker = asyncio.create_task(run_worker("127.0.0.1", coordinator.port, PLAN_HASH, fake_evaluate, "steady"))
        results = await asyncio.wait_for(submission, timeout=30)
        await coordinator.stop()
        await asyncio.wait_for(worker, timeout=10)
        assert results[0].job_id == "fpn-0000"
        assert results[0].worker_id.startswith("steady")
        assert coordinator.reassignments >= 1


@pytest.mark.unit
class TestRemoteEvaluator:
    """Test the blocking facade used by the search loop."""

    def test_matches_local(self):
        """Test remote results equal local results."""
        requests = make_requests(4)
        with RemoteEvaluator(PLAN_HASH, tick=0.05) as evaluator:
            host, port = evaluator.address
            thread = threading.Thread(
                target=lambda: asyncio.run(run_worker(host, port, PLAN_HASH, fake_evaluate, "thread")))
            thread.start()
            remote = evaluator.evaluate(requests)
        thread.join(timeout=10)
        local = LocalEvaluator(fake_evaluate).evaluate(requests)
        assert [(r.job_id, r.reward, r.loss_terms) for r in remote] == \
            [(r.job_id, r.reward, r.loss_terms) for r in local]
        assert not thread.is_alive()
