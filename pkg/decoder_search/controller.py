#!/usr/bin/env python3
"""
ARCHITECTURE CONTROLLER
=======================

Autoregressive LSTM policy over token sequences, trained with PPO.

Position k's distribution is softmax(proj_k(h_k)); the token sampled at
position k is embedded with table embed_k and fed as the next input. Output
projections start at zero, so a fresh policy is uniform at every position.

All controller arithmetic is fp64.
"""

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from .checkpoint import load_tensors, save_tensors
from .errors import CheckpointError, ConfigError, ControllerError
from .search_space import ActionSpace, SearchStage
from .tensor_engine import (
    Adam,
    AdamState,
    Parameter,
    Tensor,
    clip,
    concat,
    exp,
    log_softmax,
    lstm_cell,
    matmul,
    minimum,
    no_grad,
    softmax,
    sum_,
    take,
)

logger = logging.getLogger(__name__)

CONTROLLER_FORMAT_VERSION = 1


class PolicyConfig(BaseModel):
    """Controller hyperparameters"""
    hidden_size: int = Field(64, gt=0)
    embedding_size: int = Field(32, gt=0)
    clip_epsilon: float = Field(0.2, gt=0.0, lt=1.0)
    ppo_epochs: int = Field(3, ge=1)
    batch_archs: int = Field(10, ge=1)
    entropy_coef: float = Field(0.01, ge=0.0)
    baseline_decay: float = Field(0.95, ge=0.0, lt=1.0)
    lr: float = Field(3.5e-4, gt=0.0)
    init_scale: float = Field(0.1, gt=0.0)

    @classmethod
    def from_dict(cls, data: Dict) -> "PolicyConfig":
        try:
            return cls(**data)
        except ValidationError as e:
            raise ConfigError(f"Invalid controller configuration: {e}") from e


@dataclass
class SampleBatch:
    """Sampled sequences plus what PPO needs from sampling time"""
    tokens: np.ndarray             # (n, L) int64
    log_probs: np.ndarray          # (n, L) per-token log-probabilities at sampling time
    rewards: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.tokens)

    def sequences(self) -> List[List[int]]:
        return [[int(t) for t in row] for row in self.tokens]


@dataclass
class UpdateStats:
    mean_reward: float
    baseline: float
    surrogate: float
    entropy: float
    approx_kl: float
    epochs: int


class Controller:
    """
    LSTM policy over one ActionSpace.

    Parameters:
        start                 (1, E) first input
        embed.{k}             (vocab_k, E) embedding of the token chosen at k
        lstm.weight/.bias     (E + H, 4H) / (4H,)
        proj.{k}.weight/.bias (H, vocab_k) / (vocab_k,), zero-initialized
    """

    def __init__(self, space: ActionSpace, config: Optional[PolicyConfig] = None, seed: int = 0):
        self.space = space
        self.config = config or PolicyConfig()
        self.baseline: Optional[float] = None
        self.updates = 0
        # policy batches completed when this controller was checkpointed
        self.batches = 0
        self.params = self._init_params(seed)
        self.optimizer = Adam(self.params, lr=self.config.lr)

    def _init_params(self, seed: int) -> Dict[str, Parameter]:
        rng = np.random.default_rng(seed)
        e, h = self.config.embedding_size, self.config.hidden_size
        scale = self.config.init_scale
        params = {
            "start": rng.uniform(-scale, scale, size=(1, e)),
            "lstm.weight": rng.uniform(-scale, scale, size=(e + h, 4 * h)),
            "lstm.bias": np.zeros(4 * h),
        }
        for k, vocab in enumerate(self.space.vocab_sizes):
            params[f"embed.{k}"] = rng.uniform(-scale, scale, size=(vocab, e))
            params[f"proj.{k}.weight"] = np.zeros((h, vocab))
            params[f"proj.{k}.bias"] = np.zeros(vocab)
        return {name: Parameter(value.astype(np.float64), name=name) for name, value in params.items()}

    @property
    def num_positions(self) -> int:
        return len(self.space.vocab_sizes)

    # Policy unrolling -----------------------------------------------------

    def _logits(self, k: int, h: Tensor) -> Tensor:
        logits = matmul(h, self.params[f"proj.{k}.weight"]) + self.params[f"proj.{k}.bias"]
        if not np.all(np.isfinite(logits.data)):
            raise ControllerError(f"Non-finite controller logits at position {k}")
        return logits

    def _initial_state(self, n: int) -> Tuple[Tensor, Tensor, Tensor]:
        hidden = self.config.hidden_size
        x = take(self.params["start"], np.zeros(n, dtype=np.int64))
        zeros = np.zeros((n, hidden), dtype=np.float64)
        return x, Tensor(zeros), Tensor(zeros.copy())

    def sample(self, n: int, seed: int) -> SampleBatch:
        """Draw n sequences; deterministic per seed."""
        rng = np.random.default_rng(seed)
        tokens = np.zeros((n, self.num_positions), dtype=np.int64)
        log_probs = np.zeros((n, self.num_positions), dtype=np.float64)
        with no_grad():
            x, h, c = self._initial_state(n)
            for k in range(self.num_positions):
                h, c = lstm_cell(x, h, c, self.params["lstm.weight"], self.params["lstm.bias"])
                logp = log_softmax(self._logits(k, h), axis=-1).data
                cumulative = np.cumsum(np.exp(logp), axis=1)
                draws = rng.random(n)[:, None] * cumulative[:, -1:]
                chosen = np.minimum((cumulative <= draws).sum(axis=1), logp.shape[1] - 1)
                tokens[:, k] = chosen
                log_probs[:, k] = logp[np.arange(n), chosen]
                x = take(self.params[f"embed.{k}"], chosen)
        return SampleBatch(tokens, log_probs)

    def distributions(self, tokens: np.ndarray) -> List[np.ndarray]:
        """Per-position probability tables under teacher forcing, each (n, vocab_k)."""
        with no_grad():
            return [softmax(logits, axis=-1).data for logits in self._unroll(np.asarray(tokens))]

    def _unroll(self, tokens: np.ndarray) -> List[Tensor]:
        n = len(tokens)
        x, h, c = self._initial_state(n)
        all_logits = []
        for k in range(self.num_positions):
            h, c = lstm_cell(x, h, c, self.params["lstm.weight"], self.params["lstm.bias"])
            all_logits.append(self._logits(k, h))
            x = take(self.params[f"embed.{k}"], tokens[:, k])
        return all_logits

    def log_probs_and_entropy(self, tokens: np.ndarray) -> Tuple[Tensor, Tensor]:
        """(n, L) per-token log-probabilities and (n, L) per-position entropies."""
        tokens = np.asarray(tokens, dtype=np.int64)
        columns = []
        entropies = []
        for k, logits in enumerate(self._unroll(tokens)):
            logp = log_softmax(logits, axis=-1)
            onehot = np.eye(logits.shape[1], dtype=np.float64)[tokens[:, k]]
            columns.append(sum_(logp * onehot, axis=1, keepdims=True))
            entropies.append(-sum_(exp(logp) * logp, axis=1, keepdims=True))
        return concat(columns, axis=1), concat(entropies, axis=1)

    # PPO ------------------------------------------------------------------

    def ppo_objective(self, tokens: np.ndarray, old_log_probs: np.ndarray,
                      advantages: np.ndarray) -> Tuple[Tensor, Dict[str, float]]:
        """Clipped surrogate (mean over tokens) plus entropy bonus; maximize."""
        eps = self.config.clip_epsilon
        new_logp, entropy = self.log_probs_and_entropy(tokens)
        ratio = exp(new_logp - old_log_probs)
        adv = np.asarray(advantages, dtype=np.float64)[:, None]
        surrogate = minimum(ratio * adv, clip(ratio, 1.0 - eps, 1.0 + eps) * adv).mean()
        mean_entropy = entropy.mean()
        objective = surrogate + mean_entropy * self.config.entropy_coef
        approx_kl = float(np.mean(old_log_probs - new_logp.data))
        return objective, {"surrogate": surrogate.item(), "entropy": mean_entropy.item(), "approx_kl": approx_kl}

    def ppo_update(self, batch: SampleBatch) -> UpdateStats:
        if len(batch) == 0 or batch.rewards is None:
            raise ControllerError("ppo_update needs a non-empty batch with rewards")
        rewards = np.asarray(batch.rewards, dtype=np.float64)
        finite = np.isfinite(rewards)
        if not finite.any():
            raise ControllerError("Every reward in the batch is non-finite")
        # diverged architectures count as the worst architecture of the batch
        rewards = np.where(finite, rewards, rewards[finite].min())

        if self.baseline is None:
            self.baseline = float(rewards.mean())
        batch.advantages = rewards - self.baseline

        first = None
        for epoch in range(self.config.ppo_epochs):
            self.optimizer.zero_grad()
            objective, stats = self.ppo_objective(batch.tokens, batch.log_probs, batch.advantages)
            if not np.isfinite(objective.item()):
                raise ControllerError(f"Non-finite PPO objective at epoch {epoch}")
            (-objective).backward()
            self.optimizer.step()
            if first is None:
                first = stats
            last = stats

        decay = self.config.baseline_decay
        self.baseline = decay * self.baseline + (1 - decay) * float(rewards.mean())
        self.updates += 1
        logger.debug(f"PPO update {self.updates}: mean reward {rewards.mean():.4f}, "
                     f"baseline {self.baseline:.4f}, entropy {last['entropy']:.4f}")
        return UpdateStats(float(rewards.mean()), self.baseline, first["surrogate"], last["entropy"],
                           last["approx_kl"], self.config.ppo_epochs)

    # Persistence ------------------------------------------------------------

    def save(self, path: Union[str, Path], batches: Optional[int] = None) -> Path:
        """NFCS tensors (parameters and Adam moments) plus a JSON sidecar, both replaced atomically."""
        path = Path(path)
        if batches is not None:
            self.batches = batches
        tensors = {f"param:{name}": p.data for name, p in self.params.items()}
        state = self.optimizer.state
        tensors.update({f"adam.m:{name}": value for name, value in state.m.items()})
        tensors.update({f"adam.v:{name}": value for name, value in state.v.items()})
        save_tensors(path, tensors)
        sidecar = {
            "format_version": CONTROLLER_FORMAT_VERSION,
            "config": self.config.model_dump(),
            "stage": self.space.stage.value,
            "vocab_sizes": list(self.space.vocab_sizes),
            "offset": self.space.offset,
            "adam_t": state.t,
            "baseline": self.baseline,
            "updates": self.updates,
            "batches": self.batches,
        }
        sidecar_path = _sidecar_path(path)
        tmp = sidecar_path.with_name(sidecar_path.name + ".tmp")
        tmp.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        os.replace(tmp, sidecar_path)
        return path

    @classmethod
    def load(cls, path: Union[str, Path], space: Optional[ActionSpace] = None) -> "Controller":
        path = Path(path)
        sidecar_path = _sidecar_path(path)
        if not sidecar_path.exists():
            raise CheckpointError(f"Controller sidecar {sidecar_path} not found")
        meta = json.loads(sidecar_path.read_text())
        if meta.get("format_version") != CONTROLLER_FORMAT_VERSION:
            raise CheckpointError(f"Controller checkpoint version {meta.get('format_version')} is not supported")
        saved_space = ActionSpace(SearchStage(meta["stage"]), tuple(meta["vocab_sizes"]), meta["offset"])
        if space is not None and tuple(space.vocab_sizes) != saved_space.vocab_sizes:
            raise CheckpointError("Controller checkpoint vocabulary does not match the action space")
        controller = cls(space or saved_space, PolicyConfig.from_dict(meta["config"]))
        tensors = load_tensors(path)
        for name, p in controller.params.items():
            key = f"param:{name}"
            if key not in tensors:
                raise CheckpointError(f"Controller checkpoint is missing '{name}'")
            p.data = tensors[key].astype(np.float64)
        controller.optimizer.state = AdamState(
            m={k.split(":", 1)[1]: v for k, v in tensors.items() if k.startswith("adam.m:")},
            v={k.split(":", 1)[1]: v for k, v in tensors.items() if k.startswith("adam.v:")},
            t=int(meta["adam_t"]),
        )
        controller.baseline = meta["baseline"]
        controller.updates = int(meta["updates"])
        controller.batches = int(meta.get("batches", 0))
        return controller


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")
