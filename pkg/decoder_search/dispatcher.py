#!/usr/bin/env python3
"""
EVALUATION DISPATCHER
=====================

Farms architecture evaluations out to worker processes.

Wire protocol (NFCS-RPC/1): every frame is a 4-byte big-endian length
followed by that many bytes of UTF-8 JSON holding one object.

    worker -> coordinator   {"type": "hello", "protocol": "NFCS-RPC/1", "plan_hash": ..., "worker_id": ...}
    coordinator -> worker   {"type": "welcome", "worker_id": ...} | {"type": "reject", "reason": ...}
    coordinator -> worker   {"type": "job", "request": {...}} | {"type": "shutdown"}
    worker -> coordinator   {"type": "result", "result": {...}}

The coordinator runs one handler task per worker connection and a single
queue-owner task. Handlers talk to the owner through its inbox; only the
owner touches job state. Jobs are reassigned when a worker disconnects or
runs longer than the timeout; the first result for a job id wins.
"""

import asyncio
import itertools
import json
import logging
import math
import socket
import statistics
import struct
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, Dict, List, Optional, Sequence, Tuple

from .errors import DispatchError, ProtocolError

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = "NFCS-RPC/1"
MAX_FRAME_SIZE = 16 * 1024 * 1024
_LENGTH = struct.Struct(">I")


# ============================================================================
# MESSAGES
# ============================================================================

@dataclass
class EvalRequest:
    job_id: str
    stage: str
    tokens: List[int]
    seed: int
    plan_hash: str
    cache_id: str

    def to_dict(self) -> Dict[str, Any]:
        return {"job_id": self.job_id, "stage": self.stage, "tokens": list(self.tokens), "seed": self.seed,
                "plan_hash": self.plan_hash, "cache_id": self.cache_id}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalRequest":
        try:
            return cls(job_id=str(data["job_id"]), stage=str(data["stage"]),
                       tokens=[int(t) for t in data["tokens"]], seed=int(data["seed"]),
                       plan_hash=str(data["plan_hash"]), cache_id=str(data["cache_id"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolError(f"Malformed job request: {e}") from e


@dataclass
class EvalResult:
    job_id: str
    reward: float
    loss_terms: Dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0
    worker_id: str = ""
    status: str = "ok"              # ok | diverged | error
    message: str = ""
    macs: int = 0
    params: int = 0
    fpn_forwards: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "job_id": self.job_id,
            "reward": self.reward if math.isfinite(self.reward) else None,
            "loss_terms": {k: (v if math.isfinite(v) else None) for k, v in self.loss_terms.items()},
            "wall_time": self.wall_time,
            "worker_id": self.worker_id,
            "status": self.status,
            "message": self.message,
            "macs": self.macs,
            "params": self.params,
            "fpn_forwards": self.fpn_forwards,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalResult":
        try:
            reward = data.get("reward")
            return cls(
                job_id=str(data["job_id"]),
                reward=float(reward) if reward is not None else -math.inf,
                loss_terms={k: (float(v) if v is not None else math.nan)
                            for k, v in data.get("loss_terms", {}).items()},
                wall_time=float(data.get("wall_time", 0.0)),
                worker_id=str(data.get("worker_id", "")),
                status=str(data.get("status", "ok")),
                message=str(data.get("message", "")),
                macs=int(data.get("macs", 0)),
                params=int(data.get("params", 0)),
                fpn_forwards=int(data.get("fpn_forwards", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolError(f"Malformed job result: {e}") from e


EvaluateFn = Callable[[EvalRequest], EvalResult]


# ============================================================================
# FRAME CODEC
# ============================================================================

def encode_frame(message: Dict[str, Any]) -> bytes:
    payload = json.dumps(message, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    if len(payload) > MAX_FRAME_SIZE:
        raise ProtocolError(f"Frame of {len(payload)} bytes exceeds the {MAX_FRAME_SIZE} byte limit")
    return _LENGTH.pack(len(payload)) + payload


def _decode_payload(payload: bytes) -> Dict[str, Any]:
    try:
        message = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"Frame payload is not UTF-8 JSON: {e}") from e
    if not isinstance(message, dict):
        raise ProtocolError(f"Frame payload must be a JSON object, got {type(message).__name__}")
    return message


def decode_frame(frame: bytes) -> Dict[str, Any]:
    """Decode exactly one complete frame (length prefix included)."""
    if len(frame) < _LENGTH.size:
        raise ProtocolError("Frame shorter than its length prefix")
    (length,) = _LENGTH.unpack_from(frame)
    if length > MAX_FRAME_SIZE:
        raise ProtocolError(f"Declared frame length {length} exceeds {MAX_FRAME_SIZE}")
    if len(frame) != _LENGTH.size + length:
        raise ProtocolError(f"Frame declares {length} payload bytes but carries {len(frame) - _LENGTH.size}")
    return _decode_payload(frame[_LENGTH.size:])


async def read_frame(reader: asyncio.StreamReader) -> Optional[Dict[str, Any]]:
    """Next message, or None on a clean end of stream."""
    try:
        header = await reader.readexactly(_LENGTH.size)
    except asyncio.IncompleteReadError as e:
        if not e.partial:
            return None
        raise ProtocolError("Connection closed inside a frame header") from e
    (length,) = _LENGTH.unpack(header)
    if length > MAX_FRAME_SIZE:
        raise ProtocolError(f"Declared frame length {length} exceeds {MAX_FRAME_SIZE}")
    try:
        payload = await reader.readexactly(length)
    except asyncio.IncompleteReadError as e:
        raise ProtocolError(f"Connection closed after {len(e.partial)} of {length} payload bytes") from e
    return _decode_payload(payload)


async def write_frame(writer: asyncio.StreamWriter, message: Dict[str, Any]):
    writer.write(encode_frame(message))
    await writer.drain()


def safe_evaluate(evaluate_fn: EvaluateFn, request: EvalRequest, worker_id: str) -> EvalResult:
    """Run one evaluation; failures become an `error` result instead of an exception."""
    start = time.perf_counter()
    try:
        result = evaluate_fn(request)
    except Exception as e:
        logger.warning(f"Job {request.job_id} failed on {worker_id}: {e}")
        result = EvalResult(request.job_id, -math.inf, status="error", message=f"{type(e).__name__}: {e}")
    if not result.wall_time:
        result.wall_time = time.perf_counter() - start
    result.worker_id = worker_id
    return result


# ============================================================================
# COORDINATOR
# ============================================================================

class Coordinator:
    """
    Serves jobs to connected workers.

    Args:
        plan_hash: workers announcing a different hash are rejected
        timeout_factor: a job is reassigned after timeout_factor x median job time
        min_timeout: lower bound on that timeout (seconds)
        no_worker_timeout: fail outstanding submissions after this long without workers
    """

    def __init__(self, plan_hash: str, host: str = "127.0.0.1", port: int = 0,
                 timeout_factor: float = 10.0, min_timeout: float = 30.0,
                 no_worker_timeout: float = 600.0, tick: float = 0.2):
        self.plan_hash = plan_hash
        self.host = host
        self.port = port
        self.timeout_factor = timeout_factor
        self.min_timeout = min_timeout
        self.no_worker_timeout = no_worker_timeout
        self.tick = tick
        self.reassignments = 0
        self._ids = itertools.count(1)
        self._server: Optional[asyncio.AbstractServer] = None
        self._inbox: Optional[asyncio.Queue] = None
        self._owner_task: Optional[asyncio.Task] = None
        self._ticker_task: Optional[asyncio.Task] = None
        self._handlers: set = set()
        # job state of unsettled submissions; the queue owner drops entries once a submission settles
        self._requests: Dict[str, EvalRequest] = {}
        self._accepted: Dict[str, EvalResult] = {}

    @property
    def tracked_jobs(self) -> int:
        """Jobs whose request or accepted result is still held."""
        return len(self._requests) + len(self._accepted)

    async def start(self):
        self._inbox = asyncio.Queue()
        self._server = await asyncio.start_server(self._handle_worker, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        self._owner_task = asyncio.create_task(self._own_queue())
        self._ticker_task = asyncio.create_task(self._ticker())
        logger.info(f"Coordinator listening on {self.host}:{self.port} ({PROTOCOL_VERSION})")

    async def stop(self):
        if self._inbox is not None:
            done = asyncio.get_running_loop().create_future()
            await self._inbox.put(("shutdown", done))
            await done
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for task in (self._ticker_task, self._owner_task):
            if task:
                task.cancel()
                try:
                    await task
                except asyncio.CancelledError:
                    pass
        if self._handlers:
            await asyncio.wait(self._handlers, timeout=5.0)
        logger.info("Coordinator stopped")

    async def run_jobs(self, requests: Sequence[EvalRequest]) -> List[EvalResult]:
        """Evaluate a batch remotely; results come back in request order."""
        if not requests:
            return []
        ids = [r.job_id for r in requests]
        if len(set(ids)) != len(ids):
            raise DispatchError("Duplicate job ids in one submission")
        future = asyncio.get_running_loop().create_future()
        await self._inbox.put(("submit", list(requests), future))
        return await future

    # Connection handlers ----------------------------------------------------

    async def _handle_worker(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        task = asyncio.current_task()
        self._handlers.add(task)
        worker_id = None
        peer = writer.get_extra_info("peername")
        try:
            hello = await read_frame(reader)
            reason = self._check_hello(hello)
            if reason:
                logger.warning(f"Rejected worker {peer}: {reason}")
                await write_frame(writer, {"type": "reject", "reason": reason})
                return
            worker_id = f"{hello.get('worker_id') or 'worker'}-{next(self._ids)}"
            await write_frame(writer, {"type": "welcome", "worker_id": worker_id})
            jobs: asyncio.Queue = asyncio.Queue()
            await self._inbox.put(("join", worker_id, jobs))
            logger.info(f"Worker {worker_id} joined from {peer}")

            while True:
                request = await jobs.get()
                if request is None:
                    await write_frame(writer, {"type": "shutdown"})
                    break
                await write_frame(writer, {"type": "job", "request": request.to_dict()})
                reply = await read_frame(reader)
                if reply is None:
                    raise ConnectionError("worker closed the connection mid-job")
                if reply.get("type") != "result" or not isinstance(reply.get("result"), dict):
                    raise ProtocolError(f"Expected a result frame, got {reply.get('type')!r}")
                result = EvalResult.from_dict(reply["result"])
                if result.job_id != request.job_id:
                    raise ProtocolError(f"Result for {result.job_id} while {request.job_id} was outstanding")
                result.worker_id = worker_id
                await self._inbox.put(("result", worker_id, result))
        except (ConnectionError, ProtocolError) as e:
            logger.warning(f"Dropping worker {worker_id or peer}: {e}")
        finally:
            if worker_id is not None:
                await self._inbox.put(("lost", worker_id))
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass
            self._handlers.discard(task)

    def _check_hello(self, hello: Optional[Dict[str, Any]]) -> Optional[str]:
        if hello is None or hello.get("type") != "hello":
            return "expected a hello frame"
        if hello.get("protocol") != PROTOCOL_VERSION:
            return f"protocol {hello.get('protocol')!r} is not {PROTOCOL_VERSION}"
        if hello.get("plan_hash") != self.plan_hash:
            return f"plan hash {str(hello.get('plan_hash'))[:12]} does not match {self.plan_hash[:12]}"
        return None

    async def _ticker(self):
        while True:
            await asyncio.sleep(self.tick)
            await self._inbox.put(("tick",))

    # Queue owner --------------------------------------------------------------

    def job_timeout(self, durations: Sequence[float]) -> float:
        if not durations:
            return self.no_worker_timeout
        return max(self.min_timeout, self.timeout_factor * statistics.median(durations))

    async def _own_queue(self):
        workers: Dict[str, asyncio.Queue] = {}
        idle: List[str] = []
        busy: Dict[str, str] = {}
        pending: Deque[str] = deque()
        requests = self._requests
        accepted = self._accepted
        in_flight: Dict[str, Dict[str, float]] = {}
        submissions: List[Tuple[List[str], asyncio.Future]] = []
        durations: List[float] = []
        lonely_since: Optional[float] = None

        def dispatch():
            while pending and idle:
                job_id = pending.popleft()
                if job_id in accepted or job_id not in requests:
                    continue
                worker_id = idle.pop(0)
                busy[worker_id] = job_id
                in_flight.setdefault(job_id, {})[worker_id] = time.monotonic()
                workers[worker_id].put_nowait(requests[job_id])

        def retire(job_ids):
            wanted = {job_id for ids, _ in submissions for job_id in ids}
            for job_id in job_ids:
                if job_id not in wanted:
                    requests.pop(job_id, None)
                    accepted.pop(job_id, None)
                    in_flight.pop(job_id, None)

        def settle():
            for entry in list(submissions):
                ids, future = entry
                if all(job_id in accepted for job_id in ids):
                    submissions.remove(entry)
                    results = [accepted[job_id] for job_id in ids]
                    retire(ids)
                    if not future.done():
                        future.set_result(results)

        def fail_all(error: Exception):
            failed = [(ids, future) for ids, future in submissions]
            submissions.clear()
            pending.clear()
            for ids, future in failed:
                retire(ids)
                if not future.done():
                    future.set_exception(error)

        while True:
            message = await self._inbox.get()
            kind = message[0]
            now = time.monotonic()

            if kind == "submit":
                _, batch, future = message
                for request in batch:
                    requests[request.job_id] = request
                    if request.job_id not in accepted:
                        pending.append(request.job_id)
                submissions.append(([r.job_id for r in batch], future))
                settle()

            elif kind == "join":
                _, worker_id, queue = message
                workers[worker_id] = queue
                idle.append(worker_id)

            elif kind == "result":
                _, worker_id, result = message
                job_id = busy.pop(worker_id, None)
                if worker_id in workers:
                    idle.append(worker_id)
                started = in_flight.get(job_id, {}).pop(worker_id, None)
                if job_id in accepted or job_id not in requests:
                    logger.debug(f"Ignoring duplicate result for {job_id} from {worker_id}")
                else:
                    accepted[job_id] = result
                    in_flight.pop(job_id, None)
                    if started is not None:
                        durations.append(now - started)
                    settle()

            elif kind == "lost":
                _, worker_id = message
                workers.pop(worker_id, None)
                if worker_id in idle:
                    idle.remove(worker_id)
                job_id = busy.pop(worker_id, None)
                if job_id in requests and job_id not in accepted:
                    in_flight.get(job_id, {}).pop(worker_id, None)
                    if not in_flight.get(job_id) and job_id not in pending:
                        pending.appendleft(job_id)
                        self.reassignments += 1
                        logger.warning(f"Worker {worker_id} lost; reassigning {job_id}")

            elif kind == "tick":
                timeout = self.job_timeout(durations)
                for job_id, starts in in_flight.items():
                    if job_id in accepted or job_id not in requests or job_id in pending or not starts:
                        continue
                    if now - max(starts.values()) > timeout:
                        pending.append(job_id)
                        self.reassignments += 1
                        logger.warning(f"Job {job_id} exceeded {timeout:.1f}s; reassigning")
                outstanding = bool(pending) or any(starts for starts in in_flight.values())
                if workers or not outstanding:
                    lonely_since = None
                elif lonely_since is None:
                    lonely_since = now
                elif now - lonely_since > self.no_worker_timeout:
                    fail_all(DispatchError(f"No workers connected for {self.no_worker_timeout:.0f}s "
                                           f"with {len(pending)} jobs pending"))
                    lonely_since = None

            elif kind == "shutdown":
                _, done = message
                for queue in workers.values():
                    queue.put_nowait(None)
                fail_all(DispatchError("Coordinator shut down with jobs outstanding"))
                done.set_result(None)

            dispatch()


# ============================================================================
# WORKER
# ============================================================================

async def run_worker(host: str, port: int, plan_hash: str, evaluate_fn: EvaluateFn,
                     worker_id: Optional[str] = None) -> int:
    """Serve jobs until the coordinator says shutdown or closes; returns the job count."""
    worker_id = worker_id or socket.gethostname()
    reader, writer = await asyncio.open_connection(host, port)
    try:
        await write_frame(writer, {"type": "hello", "protocol": PROTOCOL_VERSION,
                                   "plan_hash": plan_hash, "worker_id": worker_id})
        reply = await read_frame(reader)
        if reply is None:
            raise ProtocolError("Coordinator closed the connection during the handshake")
        if reply.get("type") == "reject":
            raise ProtocolError(f"Coordinator rejected worker: {reply.get('reason')}")
        if reply.get("type") != "welcome":
            raise ProtocolError(f"Unexpected handshake reply {reply.get('type')!r}")
        assigned_id = reply.get("worker_id", worker_id)
        logger.info(f"Connected to {host}:{port} as {assigned_id}")

        completed = 0
        while True:
            message = await read_frame(reader)
            if message is None or message.get("type") == "shutdown":
                break
            if message.get("type") != "job":
                raise ProtocolError(f"Unexpected frame type {message.get('type')!r}")
            request = EvalRequest.from_dict(message.get("request", {}))
            if request.plan_hash != plan_hash:
                raise ProtocolError(f"Job {request.job_id} carries plan hash {request.plan_hash[:12]}")
            result = await asyncio.to_thread(safe_evaluate, evaluate_fn, request, assigned_id)
            await write_frame(writer, {"type": "result", "result": result.to_dict()})
            completed += 1
            logger.debug(f"{request.job_id}: reward {result.reward:.4f} ({result.status})")
        logger.info(f"Worker {assigned_id} finished after {completed} jobs")
        return completed
    finally:
        writer.close()
        try:
            await writer.wait_closed()
        except (ConnectionError, OSError):
            pass


# ============================================================================
# EVALUATORS
# ============================================================================

class LocalEvaluator:
    """In-process evaluation on a thread pool; results in request order."""

    def __init__(self, evaluate_fn: EvaluateFn, jobs: int = 1):
        self.evaluate_fn = evaluate_fn
        self.jobs = max(1, jobs)
        self._pool = ThreadPoolExecutor(max_workers=self.jobs) if self.jobs > 1 else None

    def evaluate(self, requests: Sequence[EvalRequest]) -> List[EvalResult]:
        if self._pool is None:
            return [safe_evaluate(self.evaluate_fn, r, "local") for r in requests]
        return list(self._pool.map(lambda r: safe_evaluate(self.evaluate_fn, r, "local"), requests))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)

    def __enter__(self) -> "LocalEvaluator":
        return self

    def __exit__(self, *exc):
        self.close()


class RemoteEvaluator:
    """
    Synchronous face of a Coordinator running on a background event loop, so
    the search loop can stay blocking.
    """

    def __init__(self, plan_hash: str, host: str = "127.0.0.1", port: int = 0, **coordinator_options):
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, name="coordinator", daemon=True)
        self._thread.start()
        self.coordinator = Coordinator(plan_hash, host, port, **coordinator_options)
        self._call(self.coordinator.start())

    def _call(self, coroutine):
        return asyncio.run_coroutine_threadsafe(coroutine, self._loop).result()

    @property
    def address(self) -> Tuple[str, int]:
        return self.coordinator.host, self.coordinator.port

    def evaluate(self, requests: Sequence[EvalRequest]) -> List[EvalResult]:
        return self._call(self.coordinator.run_jobs(requests))

    def close(self):
        if self._loop.is_running():
            self._call(self.coordinator.stop())
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join(timeout=10.0)
        self._loop.close()

    def __enter__(self) -> "RemoteEvaluator":
        return self

    def __exit__(self, *exc):
        self.close()
