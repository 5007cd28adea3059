#!/usr/bin/env python3
"""
SEARCH LOG
==========

Append-only JSON-lines log. Line 1 is a header carrying the effective plan;
every following line is one SearchRecord. Keys are sorted and wall time is
only written when requested, so two runs of the same plan produce identical
files.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

logger = logging.getLogger(__name__)

LOG_FORMAT_VERSION = 1


@dataclass
class SearchRecord:
    """One evaluated architecture"""
    seq: int
    stage: str                      # "FPN" or "HEAD"
    batch: int
    job_id: str
    tokens: List[int]
    reward: float                   # -inf when the proxy training diverged
    loss_terms: Dict[str, float] = field(default_factory=dict)
    macs: int = 0
    params: int = 0
    status: str = "ok"
    wall_time: Optional[float] = None

    @property
    def share_from(self) -> Optional[int]:
        return self.tokens[-1] if self.stage == "HEAD" else None

    def to_dict(self, include_timing: bool = False) -> Dict[str, Any]:
        data = {
            "seq": self.seq,
            "stage": self.stage,
            "batch": self.batch,
            "job_id": self.job_id,
            "tokens": list(self.tokens),
            "reward": self.reward if math.isfinite(self.reward) else None,
            "loss_terms": dict(self.loss_terms),
            "macs": self.macs,
            "params": self.params,
            "status": self.status,
        }
        if include_timing and self.wall_time is not None:
            data["wall_time"] = self.wall_time
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SearchRecord":
        reward = data.get("reward")
        return cls(
            seq=int(data["seq"]),
            stage=data["stage"],
            batch=int(data["batch"]),
            job_id=data["job_id"],
            tokens=[int(t) for t in data["tokens"]],
            reward=float(reward) if reward is not None else -math.inf,
            loss_terms=dict(data.get("loss_terms", {})),
            macs=int(data.get("macs", 0)),
            params=int(data.get("params", 0)),
            status=data.get("status", "ok"),
            wall_time=data.get("wall_time"),
        )


def _dumps(data: Dict[str, Any]) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


class SearchLog:
    def __init__(self, path: Union[str, Path], include_timing: bool = False):
        self.path = Path(path)
        self.include_timing = include_timing

    def start(self, plan_dict: Dict[str, Any], plan_hash: str):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        header = {"format_version": LOG_FORMAT_VERSION, "plan": plan_dict, "plan_hash": plan_hash}
        self.path.write_text(_dumps(header) + "\n")

    def append(self, records: Iterable[SearchRecord]):
        with self.path.open("a") as f:
            for record in records:
                f.write(_dumps(record.to_dict(self.include_timing)) + "\n")

    def rewrite(self, header: Dict[str, Any], records: Iterable[SearchRecord]):
        lines = [_dumps(header)] + [_dumps(r.to_dict(self.include_timing)) for r in records]
        self.path.write_text("\n".join(lines) + "\n")

    def truncate(self, keep) -> List[SearchRecord]:
        """Drop records for which keep(record) is False; returns the kept records."""
        header, records = read_log(self.path)
        kept = [r for r in records if keep(r)]
        if len(kept) != len(records):
            logger.info(f"Truncated {len(records) - len(kept)} uncheckpointed records from {self.path}")
        self.rewrite(header, kept)
        return kept


def read_log(path: Union[str, Path]) -> Tuple[Dict[str, Any], List[SearchRecord]]:
    path = Path(path)
    lines = [line for line in path.read_text().splitlines() if line.strip()]
    if not lines:
        return {}, []
    header = json.loads(lines[0])
    if "plan" not in header:
        # headerless logs are plain record streams
        return {}, [SearchRecord.from_dict(json.loads(line)) for line in lines]
    return header, [SearchRecord.from_dict(json.loads(line)) for line in lines[1:]]


def top_k(records: Iterable[SearchRecord], k: int, stage: Optional[str] = None) -> List[SearchRecord]:
    """k highest rewards; ties go to the earlier sequence number."""
    pool = [r for r in records if stage is None or r.stage == stage]
    return sorted(pool, key=lambda r: (-r.reward, r.seq))[:k]
