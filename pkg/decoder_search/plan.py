#!/usr/bin/env python3
"""
SEARCH PLAN
===========

Configuration of a search run. The plan file (TOML or JSON) is the source of
truth; command-line overrides are applied on top and the effective plan is
echoed into the search log header.
"""

import hashlib
import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, ValidationError, model_validator

from .controller import PolicyConfig
from .errors import ConfigError

logger = logging.getLogger(__name__)

CACHE_ENV_VAR = "DECODER_SEARCH_CACHE"
DEFAULT_WORKDIR = ".decoder_search"
# fields that change how a run executes but not what it computes
OPERATIONAL_FIELDS = ("jobs", "workdir", "log_timings")


class RewardMode(str, Enum):
    NEG_LOSS = "neg_loss"
    TOY_AP = "toy_ap"


class SpaceMode(str, Enum):
    FPN_ONLY = "fpn"
    HEAD_ONLY = "head"
    PROGRESSIVE = "fpn+head"


class SearchPlan(BaseModel):
    """Everything that determines a search run"""

    # Data
    seed: int = 0
    num_images: int = Field(1000, ge=4)
    image_size: int = Field(128, ge=32)
    num_classes: int = Field(3, ge=1)
    meta_train_fraction: float = Field(0.7, gt=0.0, lt=1.0)

    # Backbone preparation
    backbone_channels: Tuple[int, int, int] = (64, 128, 128)
    backbone_iterations: int = Field(300, ge=0)

    # Proxy task
    proxy_iterations: int = Field(300, ge=1)
    proxy_batch_size: int = Field(16, ge=1)
    eval_batch_size: int = Field(32, ge=1)
    lr: float = Field(8e-4, gt=0.0)
    polyak_decay: float = Field(0.9, ge=0.0, lt=1.0)
    fpn_width: int = Field(64, gt=0)
    head_width: int = Field(128, gt=0)
    fpn_norm: Literal["bn", "gn"] = "bn"
    prefetch_iterations: int = Field(300, ge=1)

    # Search
    search_space: SpaceMode = SpaceMode.PROGRESSIVE
    reward_mode: RewardMode = RewardMode.NEG_LOSS
    fpn_archs: int = Field(280, ge=1)
    head_archs: int = Field(60, ge=1)
    top_k_fpn: int = Field(20, ge=1)
    top_k_head: int = Field(10, ge=1)
    controller: PolicyConfig = Field(default_factory=PolicyConfig)

    # Studies
    correlation_samples: int = Field(15, ge=2)
    long_budget_iterations: int = Field(1500, ge=1)

    # Dispatch
    job_timeout_factor: float = Field(10.0, gt=0.0)
    min_job_timeout: float = Field(30.0, gt=0.0)
    no_worker_timeout: float = Field(600.0, gt=0.0)

    # Operational
    jobs: int = Field(1, ge=1)
    workdir: Optional[str] = None
    log_timings: bool = False

    model_config = {"extra": "forbid"}

    @model_validator(mode="after")
    def _check_selection(self) -> "SearchPlan":
        if self.top_k_fpn > self.fpn_archs:
            raise ValueError(f"top_k_fpn={self.top_k_fpn} exceeds fpn_archs={self.fpn_archs}")
        if self.top_k_head > self.head_archs:
            raise ValueError(f"top_k_head={self.top_k_head} exceeds head_archs={self.head_archs}")
        if int(self.num_images * self.meta_train_fraction) < 1 or \
                self.num_images - int(self.num_images * self.meta_train_fraction) < 1:
            raise ValueError("meta_train_fraction leaves an empty meta-train or meta-val split")
        return self

    # Derived values -------------------------------------------------------

    def resolved_workdir(self) -> Path:
        return Path(self.workdir or os.environ.get(CACHE_ENV_VAR) or DEFAULT_WORKDIR)

    def canonical_dict(self) -> Dict[str, Any]:
        data = self.model_dump(mode="json")
        for name in OPERATIONAL_FIELDS:
            data.pop(name, None)
        return data

    def plan_hash(self) -> str:
        canonical = json.dumps(self.canonical_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def split_sizes(self) -> Tuple[int, int]:
        train = int(self.num_images * self.meta_train_fraction)
        return train, self.num_images - train


def job_seed(plan_seed: int, job_id: str) -> int:
    """Per-job seed; independent of which worker or thread runs the job."""
    digest = hashlib.sha256(f"{plan_seed}:{job_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


# ============================================================================
# LOADING
# ============================================================================

def plan_from_dict(data: Dict[str, Any]) -> SearchPlan:
    try:
        return SearchPlan(**data)
    except ValidationError as e:
        raise ConfigError(f"Invalid search plan: {e}") from e


def load_plan(path: Union[str, Path]) -> SearchPlan:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Plan file {path} not found")
    if path.suffix == ".toml":
        with path.open("rb") as f:
            try:
                data = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"Plan file {path} is not valid TOML: {e}") from e
    elif path.suffix == ".json":
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"Plan file {path} is not valid JSON: {e}") from e
    else:
        raise ConfigError(f"Plan file {path} must be .toml or .json")
    plan = plan_from_dict(data)
    logger.info(f"Loaded plan {path} (hash {plan.plan_hash()[:12]})")
    return plan


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(plan: SearchPlan, assignments: Iterable[str] = (), **fields: Any) -> SearchPlan:
    """
    Apply `key=value` assignments (dotted keys reach nested models, values
    parsed as JSON when possible) and keyword overrides; None values are skipped.
    """
    data = plan.model_dump(mode="json")
    for assignment in assignments:
        if "=" not in assignment:
            raise ConfigError(f"Override '{assignment}' is not of the form key=value")
        key, raw = assignment.split("=", 1)
        target = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(target.get(part), dict):
                raise ConfigError(f"Override key '{key}' does not name a nested section")
            target = target[part]
        target[parts[-1]] = _parse_value(raw.strip())
    for name, value in fields.items():
        if value is not None:
            data[name] = value
    return plan_from_dict(data)
