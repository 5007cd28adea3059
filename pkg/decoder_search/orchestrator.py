#!/usr/bin/env python3
"""
SEARCH ORCHESTRATOR
===================

Runs the progressive decoder search end to end:

    1. prepare    synthetic dataset, toy backbone trained with the original
                  decoder, frozen backbone features cached per image
    2. FPN stage  controller samples FPN tokens; each candidate is trained
                  with the original head on meta-train and scored on meta-val
    3. prefetch   the best FPN is trained once and its pyramid outputs are
                  cached for every image
    4. HEAD stage controller samples head tokens + sharing index; candidates
                  run on the cached pyramid only

Every controller batch is checkpointed, so an interrupted search resumes with
contiguous sequence numbers and an identical log.
"""

import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import h5py
import numpy as np
from scipy.stats import spearmanr

from .backbone import backbone_forward, backbone_hash, init_backbone
from .checkpoint import load_tensors, save_tensors
from .controller import Controller
from .cost_model import cost
from .decoder_graph import (
    INPUT_STRIDES,
    LEVEL_STRIDES,
    DecoderGraph,
    DecoderWidths,
    FeatureSpec,
    FpnVariant,
    HeadVariant,
    ParamSet,
    backbone_specs,
    build_decoder,
    compile_decoder,
    forward,
    forward_pyramid,
    init_params,
    original_fcos_decoder,
)
from .detection_toyland import (
    SynthImage,
    compute_losses,
    encode_targets,
    evaluate_ap,
    generate_dataset,
    level_specs_for,
    load_dataset,
    reward,
    save_dataset,
    stack_targets,
)
from .dispatcher import EvalRequest, EvalResult, LocalEvaluator
from .errors import CacheError, CheckpointError, ConfigError, DispatchError, DivergenceError
from .plan import RewardMode, SearchPlan, SpaceMode, job_seed
from .search_log import SearchLog, SearchRecord, read_log, top_k
from .search_space import ActionSpace, SearchStage, action_space, decode, decode_fpn, decode_head
from .tensor_engine import Adam, Parameter, PolyakAverager, Tensor, no_grad

logger = logging.getLogger(__name__)

FEATURE_FORMAT_VERSION = 1
STATE_FORMAT_VERSION = 2
SHARING_WINDOW = 50
STAGE_NAMES = ("FPN", "HEAD")


# ============================================================================
# CACHE LAYOUT
# ============================================================================

def _digest(payload: Any) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def dataset_cache_path(plan: SearchPlan, workdir: Path) -> Path:
    return workdir / f"dataset-s{plan.seed}-n{plan.num_images}-{plan.image_size}px-k{plan.num_classes}.h5"


def backbone_checkpoint_path(plan: SearchPlan, workdir: Path) -> Path:
    key = _digest({
        "seed": plan.seed, "num_images": plan.num_images, "image_size": plan.image_size,
        "num_classes": plan.num_classes, "meta_train_fraction": plan.meta_train_fraction,
        "channels": list(plan.backbone_channels), "iterations": plan.backbone_iterations,
        "fpn_width": plan.fpn_width, "lr": plan.lr, "batch": plan.proxy_batch_size,
    })
    return workdir / f"backbone-{key[:16]}.nfcs"


def run_directory(plan: SearchPlan, workdir: Path) -> Path:
    return workdir / "runs" / plan.plan_hash()[:16]


def meta_split(plan: SearchPlan) -> Tuple[np.ndarray, np.ndarray]:
    """Disjoint (meta-train, meta-val) image indices."""
    n_train, _ = plan.split_sizes()
    order = np.random.default_rng(job_seed(plan.seed, "meta-split")).permutation(plan.num_images)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def build_targets(images: Sequence[SynthImage], num_classes: int) -> Dict[int, np.ndarray]:
    specs = level_specs_for(images[0].image_size)
    return stack_targets([encode_targets(image, specs, num_classes) for image in images])


def write_feature_cache(path: Path, arrays: Dict[str, np.ndarray], kind: str, dataset_seed: int,
                        source_hash: str) -> Path:
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with h5py.File(tmp, "w") as f:
            f.attrs["format_version"] = FEATURE_FORMAT_VERSION
            f.attrs["kind"] = kind
            f.attrs["dataset_seed"] = dataset_seed
            f.attrs["source_hash"] = source_hash
            for name, value in arrays.items():
                f.create_dataset(name, data=value)
        os.replace(tmp, path)
    except OSError as e:
        raise CacheError(f"Could not write feature cache {path}: {e}") from e
    logger.info(f"Wrote {kind} feature cache {path.name} ({', '.join(sorted(arrays))})")
    return path


def _cache_matches(path: Path, dataset_seed: int, source_hash: str) -> bool:
    if not path.exists():
        return False
    try:
        with h5py.File(path, "r") as f:
            return (f.attrs.get("format_version") == FEATURE_FORMAT_VERSION
                    and int(f.attrs.get("dataset_seed", -1)) == dataset_seed
                    and f.attrs.get("source_hash") == source_hash)
    except OSError:
        return False


def _input_spec(name: str, array: np.ndarray) -> FeatureSpec:
    stride = INPUT_STRIDES[name] if name in INPUT_STRIDES else LEVEL_STRIDES[int(name[1:])]
    _, channels, height, width = array.shape
    return FeatureSpec(stride, channels, height, width)


# ============================================================================
# PROXY TASK
# ============================================================================

@dataclass
class ProxyTask:
    """Cached decoder inputs, stacked targets and the meta split for one run"""
    cache_id: str
    inputs: Dict[str, np.ndarray]          # name -> (N, C, H, W)
    targets: Dict[int, np.ndarray]         # level -> (N, K + 5, H, W)
    meta_train: np.ndarray
    meta_val: np.ndarray
    images: List[SynthImage]
    num_classes: int
    input_specs: Dict[str, FeatureSpec] = field(default_factory=dict)

    def __post_init__(self):
        if not self.input_specs:
            self.input_specs = {name: _input_spec(name, value) for name, value in self.inputs.items()}
        self._train_set = frozenset(int(i) for i in self.meta_train)
        if self._train_set & set(int(i) for i in self.meta_val):
            raise ConfigError("meta-train and meta-val overlap")

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        size = min(batch_size, len(self.meta_train))
        batch = np.sort(rng.choice(self.meta_train, size=size, replace=False))
        assert all(int(i) in self._train_set for i in batch), "training batch touched meta-val"
        return batch

    def features(self, indices: np.ndarray) -> Dict[str, np.ndarray]:
        return {name: value[indices] for name, value in self.inputs.items()}

    def batch_targets(self, indices: np.ndarray) -> Dict[int, np.ndarray]:
        return {level: value[indices] for level, value in self.targets.items()}


class LiveBackboneTask(ProxyTask):
    """Same task, but every batch runs the frozen backbone instead of reading the cache."""

    def __init__(self, task: ProxyTask, backbone: Dict[str, Parameter], channels: Sequence[int]):
        super().__init__(task.cache_id, task.inputs, task.targets, task.meta_train, task.meta_val,
                         task.images, task.num_classes, dict(task.input_specs))
        self.backbone = backbone
        self.channels = tuple(channels)

    def features(self, indices: np.ndarray) -> Dict[str, np.ndarray]:
        per_image = [compute_backbone_features(self.backbone, self.images[int(i)].pixels, self.channels)
                     for i in indices]
        return {name: np.stack([f[name] for f in per_image]) for name in per_image[0]}


def compute_backbone_features(backbone: Dict[str, Parameter], pixels: np.ndarray,
                              channels: Sequence[int]) -> Dict[str, np.ndarray]:
    """Features of a single image; caching and live runs both go through here."""
    with no_grad():
        outputs = backbone_forward(backbone, Tensor(pixels[None]), channels)
    return {name: value.data[0] for name, value in outputs.items()}


def load_task(plan: SearchPlan, workdir: Union[str, Path], cache_id: str) -> ProxyTask:
    workdir = Path(workdir)
    path = workdir / cache_id
    if not path.exists():
        raise CacheError(f"Feature cache {path} not found; run the `prepare` step first")
    with h5py.File(path, "r") as f:
        if f.attrs.get("format_version") != FEATURE_FORMAT_VERSION:
            raise CacheError(f"Feature cache {path} has an unsupported format; rerun `prepare`")
        if int(f.attrs.get("dataset_seed", -1)) != plan.seed:
            raise CacheError(f"Feature cache {path} belongs to dataset seed {int(f.attrs['dataset_seed'])}; "
                             f"rerun `prepare`")
        inputs = {name: f[name][...] for name in f.keys()}
    images = load_dataset(dataset_cache_path(plan, workdir), plan.seed)
    if any(len(value) != len(images) for value in inputs.values()):
        raise CacheError(f"Feature cache {path} does not cover the dataset; rerun `prepare`")
    meta_train, meta_val = meta_split(plan)
    return ProxyTask(cache_id, inputs, build_targets(images, plan.num_classes), meta_train, meta_val,
                     images, plan.num_classes)


# ============================================================================
# BACKBONE PREPARATION
# ============================================================================

@dataclass
class PreparedData:
    images: List[SynthImage]
    backbone: Dict[str, Parameter]
    backbone_hash: str
    feature_cache: Path

    @property
    def cache_id(self) -> str:
        return self.feature_cache.name


def _load_or_generate_dataset(plan: SearchPlan, workdir: Path) -> List[SynthImage]:
    path = dataset_cache_path(plan, workdir)
    if path.exists():
        logger.info(f"Dataset cache hit: {path.name}")
        return load_dataset(path, plan.seed)
    logger.info(f"Generating {plan.num_images} synthetic images (seed {plan.seed})")
    images = generate_dataset(plan.seed, plan.num_images, plan.image_size, plan.num_classes)
    try:
        save_dataset(path, images, plan.seed, plan.num_classes)
    except OSError as e:
        raise CacheError(f"Could not write dataset cache {path}: {e}") from e
    return images


def _train_backbone(plan: SearchPlan, images: List[SynthImage]) -> Dict[str, Parameter]:
    """Fine-tune the toy backbone jointly with the original decoder on meta-train."""
    channels = plan.backbone_channels
    backbone = init_backbone(job_seed(plan.seed, "backbone"), channels)
    graph = original_fcos_decoder(backbone_specs((plan.image_size, plan.image_size), channels),
                                  DecoderWidths(plan.fpn_width, plan.fpn_width), plan.num_classes)
    decoder = init_params(graph, job_seed(plan.seed, "backbone-decoder"))
    optimizer = Adam({**backbone, **decoder.params}, lr=plan.lr)
    targets = build_targets(images, plan.num_classes)
    meta_train, _ = meta_split(plan)
    rng = np.random.default_rng(job_seed(plan.seed, "backbone-batches"))
    pixels = np.stack([image.pixels for image in images])

    for iteration in range(plan.backbone_iterations):
        batch = np.sort(rng.choice(meta_train, size=min(plan.proxy_batch_size, len(meta_train)), replace=False))
        features = backbone_forward(backbone, Tensor(pixels[batch]), channels)
        preds = forward(graph, decoder, features)
        total = compute_losses(preds, {l: t[batch] for l, t in targets.items()}, plan.num_classes).total
        if not math.isfinite(total.item()):
            raise DivergenceError(f"Backbone fine-tuning diverged at iteration {iteration} "
                                  f"(loss {total.item()}); lower lr or backbone_iterations")
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        if iteration % 50 == 0:
            logger.debug(f"Backbone iteration {iteration}: loss {total.item():.4f}")
    return backbone


def prepare_backbone(plan: SearchPlan, workdir: Optional[Union[str, Path]] = None) -> PreparedData:
    """Dataset, frozen backbone and per-image feature cache; every step is a cache hit when possible."""
    workdir = Path(workdir or plan.resolved_workdir())
    workdir.mkdir(parents=True, exist_ok=True)
    images = _load_or_generate_dataset(plan, workdir)

    checkpoint = backbone_checkpoint_path(plan, workdir)
    if checkpoint.exists():
        logger.info(f"Backbone checkpoint hit: {checkpoint.name}")
        backbone = {name: Parameter(value, name=name) for name, value in load_tensors(checkpoint).items()}
    else:
        logger.info(f"Fine-tuning backbone for {plan.backbone_iterations} iterations")
        backbone = _train_backbone(plan, images)
        save_tensors(checkpoint, {name: p.data for name, p in backbone.items()})

    digest = backbone_hash(backbone)
    feature_cache = workdir / f"features-{digest[:16]}-s{plan.seed}.h5"
    if _cache_matches(feature_cache, plan.seed, digest):
        logger.info(f"Feature cache hit: {feature_cache.name}")
    else:
        per_image = [compute_backbone_features(backbone, image.pixels, plan.backbone_channels) for image in images]
        arrays = {name: np.stack([f[name] for f in per_image]) for name in per_image[0]}
        write_feature_cache(feature_cache, arrays, "backbone", plan.seed, digest)
    return PreparedData(images, backbone, digest, feature_cache)


# ============================================================================
# ARCHITECTURE EVALUATION
# ============================================================================

@dataclass
class TrainedDecoder:
    params: ParamSet                 # Polyak-averaged parameters in eval mode
    losses: List[float]
    diverged: bool
    message: str = ""


@dataclass
class ArchitectureEvaluation:
    reward: float
    loss_terms: Dict[str, float]
    status: str
    losses: List[float]
    fpn_forwards: int
    message: str = ""


def train_decoder(graph: DecoderGraph, task: ProxyTask, plan: SearchPlan, seed: int,
                  iterations: Optional[int] = None) -> TrainedDecoder:
    """Fresh parameters, Adam on meta-train minibatches, Polyak averaging throughout."""
    iterations = plan.proxy_iterations if iterations is None else iterations
    params = init_params(graph, seed).train()
    optimizer = Adam(params.params, lr=plan.lr)
    averager = PolyakAverager(params.params, plan.polyak_decay)
    rng = np.random.default_rng(seed)
    losses: List[float] = []
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for iteration in range(iterations):
            batch = task.sample_batch(rng, plan.proxy_batch_size)
            preds = forward(graph, params, task.features(batch))
            total = compute_losses(preds, task.batch_targets(batch), task.num_classes).total
            value = total.item()
            if not math.isfinite(value):
                averaged = params.with_parameters(averager.averaged_parameters()).eval()
                return TrainedDecoder(averaged, losses, True, f"non-finite loss at iteration {iteration}")
            losses.append(value)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            averager.update()
    return TrainedDecoder(params.with_parameters(averager.averaged_parameters()).eval(), losses, False)


def _predictor(graph: DecoderGraph, params: ParamSet, task: ProxyTask):
    def predict(indices: np.ndarray) -> Dict[int, Tensor]:
        return forward(graph, params, task.features(indices))
    return predict


def toy_ap(graph: DecoderGraph, trained: TrainedDecoder, task: ProxyTask, batch_size: int = 32) -> float:
    """Mean toy AP@0.5 on meta-val."""
    predict = _predictor(graph, trained.params, task)
    chunks: Dict[int, List[np.ndarray]] = {}
    with no_grad():
        for start in range(0, len(task.meta_val), batch_size):
            for level, value in predict(task.meta_val[start:start + batch_size]).items():
                chunks.setdefault(level, []).append(value.data)
    preds = {level: np.concatenate(values) for level, values in chunks.items()}
    report = evaluate_ap(preds, [task.images[int(i)] for i in task.meta_val], task.num_classes)
    return report.mean


def evaluate_architecture(graph: DecoderGraph, task: ProxyTask, plan: SearchPlan, seed: int,
                          iterations: Optional[int] = None,
                          reward_mode: Optional[RewardMode] = None) -> ArchitectureEvaluation:
    """
    Proxy-train one decoder and score it on meta-val. Divergence is reported
    as reward -inf with status "diverged", never raised.
    """
    reward_mode = reward_mode or plan.reward_mode
    trained = train_decoder(graph, task, plan, seed, iterations)
    counters = trained.params.counters
    if trained.diverged:
        logger.warning(f"Proxy training diverged ({trained.message})")
        return ArchitectureEvaluation(-math.inf, {}, "diverged", trained.losses, counters["fpn"], trained.message)

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        value, terms = reward(_predictor(graph, trained.params, task), task.meta_val, task.targets,
                              task.num_classes, plan.eval_batch_size)
        if reward_mode is RewardMode.TOY_AP:
            value = toy_ap(graph, trained, task, plan.eval_batch_size)
    if not math.isfinite(value):
        return ArchitectureEvaluation(-math.inf, terms, "diverged", trained.losses, counters["fpn"],
                                      "non-finite meta-val reward")
    return ArchitectureEvaluation(float(value), terms, "ok", trained.losses, counters["fpn"])


def build_stage_graph(stage: str, tokens: Sequence[int], task: ProxyTask, plan: SearchPlan) -> DecoderGraph:
    """
    FPN candidates get the original head at fpn_width; HEAD candidates read the
    prefetched pyramid; FULL compiles a complete 42-token decoder on backbone features.
    """
    if stage == "FPN":
        return build_decoder(task.input_specs, DecoderWidths(plan.fpn_width, plan.fpn_width), plan.num_classes,
                             FpnVariant.SEARCHED, HeadVariant.ORIGINAL, fpn=decode_fpn(tokens),
                             fpn_norm=plan.fpn_norm)
    if stage == "HEAD":
        return build_decoder(task.input_specs, DecoderWidths(plan.fpn_width, plan.head_width), plan.num_classes,
                             FpnVariant.PREFETCHED, HeadVariant.SEARCHED, head=decode_head(tokens))
    if stage == "FULL":
        return compile_decoder(decode(tokens), task.input_specs, DecoderWidths(plan.fpn_width, plan.head_width),
                               plan.num_classes, fpn_norm=plan.fpn_norm)
    raise ConfigError(f"Unknown search stage '{stage}'")


class EvaluationContext:
    """Per-process view of the caches a job may reference; tasks load lazily once."""

    def __init__(self, plan: SearchPlan, workdir: Optional[Union[str, Path]] = None):
        self.plan = plan
        self.workdir = Path(workdir or plan.resolved_workdir())
        self._tasks: Dict[str, ProxyTask] = {}
        self._lock = threading.Lock()

    def register(self, task: ProxyTask):
        with self._lock:
            self._tasks[task.cache_id] = task

    def task(self, cache_id: str) -> ProxyTask:
        with self._lock:
            if cache_id not in self._tasks:
                self._tasks[cache_id] = load_task(self.plan, self.workdir, cache_id)
            return self._tasks[cache_id]

    def evaluate(self, request: EvalRequest) -> EvalResult:
        return evaluate_job(request, self)


def evaluate_job(request: EvalRequest, context: EvaluationContext) -> EvalResult:
    plan = context.plan
    if request.plan_hash != plan.plan_hash():
        raise DispatchError(f"Job {request.job_id} was issued for a different plan")
    start = time.perf_counter()
    task = context.task(request.cache_id)
    graph = build_stage_graph(request.stage, request.tokens, task, plan)
    evaluation = evaluate_architecture(graph, task, plan, request.seed)
    report = cost(graph)
    return EvalResult(
        job_id=request.job_id,
        reward=evaluation.reward,
        loss_terms=evaluation.loss_terms,
        wall_time=time.perf_counter() - start,
        status=evaluation.status,
        message=evaluation.message,
        macs=report.macs,
        params=report.params,
        fpn_forwards=evaluation.fpn_forwards,
    )


# ============================================================================
# PROGRESSIVE SEARCH
# ============================================================================

@dataclass
class StageOutcome:
    stage: str
    records: List[SearchRecord]
    top: List[SearchRecord]

    @property
    def best(self) -> Optional[SearchRecord]:
        return self.top[0] if self.top else None


@dataclass
class SearchResult:
    run_dir: Path
    log_path: Path
    stages: Dict[str, StageOutcome]
    records: List[SearchRecord]
    prefetch_cache_id: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run_dir": str(self.run_dir),
            "log": str(self.log_path),
            "prefetch_cache_id": self.prefetch_cache_id,
            "stages": {name: {"evaluated": len(o.records),
                              "top": [{"seq": r.seq, "tokens": r.tokens, "reward": r.reward} for r in o.top]}
                       for name, o in self.stages.items()},
        }


def stages_for(mode: SpaceMode) -> Tuple[str, ...]:
    return {SpaceMode.FPN_ONLY: ("FPN",), SpaceMode.HEAD_ONLY: ("HEAD",),
            SpaceMode.PROGRESSIVE: STAGE_NAMES}[mode]


class ProgressiveSearch:
    """
    One search run rooted at workdir/runs/<plan hash>/.

    Files:
        search.jsonl               header + one SearchRecord per line
        state.json                 completed batches and controller checkpoint per stage,
                                   prefetch cache id
        controller-{stage}-b{n}.nfcs
                                   controller after n batches: parameters + Adam moments
                                   (+ .json sidecar); state.json names the one to resume from
    """

    def __init__(self, plan: SearchPlan, workdir: Path, prepared: PreparedData, evaluator):
        self.plan = plan
        self.plan_hash = plan.plan_hash()
        self.workdir = workdir
        self.prepared = prepared
        self.evaluator = evaluator
        self.run_dir = run_directory(plan, workdir)
        self.log = SearchLog(self.run_dir / "search.jsonl", include_timing=plan.log_timings)
        self.state_path = self.run_dir / "state.json"
        self.state: Dict[str, Any] = {}
        self.records: List[SearchRecord] = []

    # State ----------------------------------------------------------------------

    def _fresh_state(self) -> Dict[str, Any]:
        return {"format_version": STATE_FORMAT_VERSION, "plan_hash": self.plan_hash,
                "batches": {name: 0 for name in STAGE_NAMES}, "controllers": {}, "prefetch_cache_id": None,
                "complete": False}

    def _save_state(self):
        tmp = self.state_path.with_name("state.json.tmp")
        tmp.write_text(json.dumps(self.state, indent=2, sort_keys=True))
        os.replace(tmp, self.state_path)

    def _controller_path(self, stage: str, batches: int) -> Path:
        return self.run_dir / f"controller-{stage.lower()}-b{batches:05d}.nfcs"

    def _load_controller(self, stage: str, space: ActionSpace, done: int) -> Controller:
        """The checkpoint state.json names; a controller saved past the recorded batches is never used."""
        name = self.state["controllers"].get(stage)
        path = self.run_dir / name if name else None
        if path is None or not path.exists():
            raise CheckpointError(f"{stage} stage has {done} completed batches but no controller checkpoint "
                                  f"in {self.run_dir}; rerun `search` with --restart")
        controller = Controller.load(path, space)
        if controller.batches != done:
            raise CheckpointError(f"Controller checkpoint {path.name} holds {controller.batches} batches, "
                                  f"state.json records {done}")
        return controller

    def _restore(self, resume: bool):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        if resume and self.state_path.exists() and self.log.path.exists():
            state = json.loads(self.state_path.read_text())
            header, _ = read_log(self.log.path)
            if (state.get("format_version") == STATE_FORMAT_VERSION and state.get("plan_hash") == self.plan_hash
                    and header.get("plan_hash") == self.plan_hash):
                self.state = state
                batches = state["batches"]
                self.records = self.log.truncate(lambda r: r.batch < batches.get(r.stage, 0))
                logger.info(f"Resuming search in {self.run_dir} at record {len(self.records)} "
                            f"(batches {batches})")
                return
            logger.warning(f"Search state in {self.run_dir} belongs to another plan; starting over")
        for stale in self.run_dir.glob("controller-*"):
            stale.unlink(missing_ok=True)
        self.state = self._fresh_state()
        self.records = []
        self.log.start(self.plan.canonical_dict(), self.plan_hash)
        self._save_state()

    # Stages ---------------------------------------------------------------------

    def _search_stage(self, stage: str, cache_id: str, n_archs: int, k: int) -> StageOutcome:
        plan = self.plan
        space = action_space(SearchStage.FPN_ONLY if stage == "FPN" else SearchStage.HEAD_ONLY)
        done = self.state["batches"].get(stage, 0)
        if done:
            controller = self._load_controller(stage, space, done)
        else:
            controller = Controller(space, plan.controller, seed=job_seed(plan.seed, f"controller-{stage}"))

        batch_size = plan.controller.batch_archs
        n_batches = math.ceil(n_archs / batch_size)
        logger.info(f"{stage} stage: {n_archs} architectures in {n_batches} batches "
                    f"(starting at batch {done}, {len(space)} tokens each)")
        for b in range(done, n_batches):
            size = min(batch_size, n_archs - b * batch_size)
            batch = controller.sample(size, seed=job_seed(plan.seed, f"sample-{stage}-{b}"))
            requests = []
            for tokens in batch.sequences():
                job_id = f"{stage}-{len(self.records) + len(requests):06d}"
                requests.append(EvalRequest(job_id, stage, tokens, job_seed(plan.seed, job_id),
                                            self.plan_hash, cache_id))
            results = {result.job_id: result for result in self.evaluator.evaluate(requests)}
            missing = [r.job_id for r in requests if r.job_id not in results]
            if missing:
                raise DispatchError(f"No result for jobs {missing}")

            new_records = []
            for request in requests:
                result = results[request.job_id]
                new_records.append(SearchRecord(
                    seq=len(self.records) + len(new_records), stage=stage, batch=b, job_id=request.job_id,
                    tokens=list(request.tokens), reward=result.reward, loss_terms=dict(result.loss_terms),
                    macs=result.macs, params=result.params, status=result.status, wall_time=result.wall_time,
                ))
            batch.rewards = np.array([r.reward for r in new_records], dtype=np.float64)
            if np.isfinite(batch.rewards).any():
                stats = controller.ppo_update(batch)
                logger.info(f"{stage} batch {b + 1}/{n_batches}: mean reward {stats.mean_reward:.4f}, "
                            f"baseline {stats.baseline:.4f}, entropy {stats.entropy:.3f}")
            else:
                logger.warning(f"{stage} batch {b + 1}/{n_batches}: every architecture diverged; "
                               f"policy update skipped")

            self.log.append(new_records)
            self.records.extend(new_records)
            previous = self.state["controllers"].get(stage)
            checkpoint = controller.save(self._controller_path(stage, b + 1), batches=b + 1)
            self.state["batches"][stage] = b + 1
            self.state["controllers"][stage] = checkpoint.name
            self._save_state()
            if previous:
                for stale in self.run_dir.glob(f"{previous}*"):
                    stale.unlink(missing_ok=True)

        stage_records = [r for r in self.records if r.stage == stage]
        return StageOutcome(stage, stage_records, top_k(stage_records, k))

    def _prefetch(self, fpn_outcome: Optional[StageOutcome]) -> str:
        """Train the chosen FPN once and cache p3..p7 for every image."""
        plan = self.plan
        base = EvaluationContext(plan, self.workdir).task(self.prepared.cache_id)
        widths = DecoderWidths(plan.fpn_width, plan.fpn_width)
        if fpn_outcome is not None:
            best = fpn_outcome.best
            if best is None or not math.isfinite(best.reward):
                raise DivergenceError("Every FPN candidate diverged; nothing to prefetch")
            graph = build_stage_graph("FPN", best.tokens, base, plan)
            source = {"fpn_tokens": best.tokens}
        else:
            graph = original_fcos_decoder(base.input_specs, widths, plan.num_classes)
            source = {"fpn": "original"}
        source.update(plan=self.plan_hash, backbone=self.prepared.backbone_hash)
        digest = _digest(source)
        cache_id = f"pyramid-{digest[:16]}.h5"
        path = self.workdir / cache_id
        if _cache_matches(path, plan.seed, digest):
            logger.info(f"Prefetched pyramid hit: {cache_id}")
        else:
            logger.info(f"Prefetching pyramid of {source.get('fpn_tokens', 'the original FPN')}")
            trained = train_decoder(graph, base, plan, job_seed(plan.seed, "prefetch"), plan.prefetch_iterations)
            if trained.diverged:
                raise DivergenceError(f"Prefetch training diverged: {trained.message}")
            chunks: Dict[str, List[np.ndarray]] = {}
            everything = np.arange(len(base.images))
            with no_grad():
                for start in range(0, len(everything), plan.eval_batch_size):
                    batch = everything[start:start + plan.eval_batch_size]
                    for name, value in forward_pyramid(graph, trained.params, base.features(batch)).items():
                        chunks.setdefault(name, []).append(value.data)
            arrays = {name: np.concatenate(values) for name, values in chunks.items()}
            write_feature_cache(path, arrays, "pyramid", plan.seed, digest)
        self.state["prefetch_cache_id"] = cache_id
        self._save_state()
        return cache_id

    def execute(self, resume: bool = True) -> SearchResult:
        self._restore(resume)
        plan = self.plan
        outcomes: Dict[str, StageOutcome] = {}
        stages = stages_for(plan.search_space)
        if "FPN" in stages:
            outcomes["FPN"] = self._search_stage("FPN", self.prepared.cache_id, plan.fpn_archs, plan.top_k_fpn)
        if "HEAD" in stages:
            cache_id = self._prefetch(outcomes.get("FPN"))
            outcomes["HEAD"] = self._search_stage("HEAD", cache_id, plan.head_archs, plan.top_k_head)
        self.state["complete"] = True
        self._save_state()
        for name, outcome in outcomes.items():
            if outcome.best is not None:
                logger.info(f"{name} stage best: reward {outcome.best.reward:.4f} (seq {outcome.best.seq})")
        return SearchResult(self.run_dir, self.log.path, outcomes, list(self.records),
                            self.state.get("prefetch_cache_id"))


def run_progressive_search(plan: SearchPlan, evaluator=None, workdir: Optional[Union[str, Path]] = None,
                           resume: bool = True) -> SearchResult:
    """
    Prepare (or reuse) caches and run the stages selected by plan.search_space.

    evaluator: anything with evaluate(requests) -> results; defaults to a
    thread pool of plan.jobs workers in this process.
    """
    workdir = Path(workdir or plan.resolved_workdir())
    prepared = prepare_backbone(plan, workdir)
    owned = evaluator is None
    if owned:
        evaluator = LocalEvaluator(EvaluationContext(plan, workdir).evaluate, plan.jobs)
    try:
        return ProgressiveSearch(plan, workdir, prepared, evaluator).execute(resume)
    finally:
        if owned:
            evaluator.close()


# ============================================================================
# STUDIES
# ============================================================================

def sharing_trend(records: Sequence[SearchRecord], window: int = SHARING_WINDOW) -> List[float]:
    """Fraction of fully shared heads (share_from == 0) per window of HEAD records."""
    heads = sorted((r for r in records if r.stage == "HEAD"), key=lambda r: r.seq)
    return [float(np.mean([r.share_from == 0 for r in heads[i * window:(i + 1) * window]]))
            for i in range(len(heads) // window)]


def select_across_range(records: Sequence[SearchRecord], n: int) -> List[SearchRecord]:
    """n finite-reward records spread evenly over the reward ranking."""
    finite = sorted((r for r in records if math.isfinite(r.reward)), key=lambda r: (r.reward, r.seq))
    if not finite:
        return []
    positions = np.unique(np.round(np.linspace(0, len(finite) - 1, min(n, len(finite)))).astype(int))
    return [finite[i] for i in positions]


def rank_correlation(rewards: Sequence[float], aps: Sequence[float]) -> Tuple[float, float]:
    rho, pvalue = spearmanr(rewards, aps)
    return float(rho), float(pvalue)


@dataclass
class CorrelationResult:
    job_ids: List[str]
    rewards: List[float]
    aps: List[float]
    rho: float
    pvalue: float

    def to_dict(self) -> Dict[str, Any]:
        return {"job_ids": self.job_ids, "rewards": self.rewards, "aps": self.aps,
                "rho": self.rho, "pvalue": self.pvalue}


def correlation_study(plan: SearchPlan, records: Sequence[SearchRecord], n: Optional[int] = None,
                      long_budget: Optional[int] = None, workdir: Optional[Union[str, Path]] = None,
                      stage: str = "FPN", cache_id: Optional[str] = None) -> CorrelationResult:
    """Retrain architectures spanning the reward range with a long budget and rank-correlate reward with toy AP."""
    workdir = Path(workdir or plan.resolved_workdir())
    n = n or plan.correlation_samples
    long_budget = long_budget or plan.long_budget_iterations
    if cache_id is None:
        if stage != "FPN":
            raise ConfigError("HEAD correlation needs the prefetched pyramid cache id")
        cache_id = prepare_backbone(plan, workdir).cache_id
    task = EvaluationContext(plan, workdir).task(cache_id)
    chosen = select_across_range([r for r in records if r.stage == stage], n)
    if len(chosen) < 2:
        raise ConfigError(f"Need at least two finite {stage} records to correlate, found {len(chosen)}")

    aps = []
    for record in chosen:
        graph = build_stage_graph(stage, record.tokens, task, plan)
        trained = train_decoder(graph, task, plan, job_seed(plan.seed, f"long-{record.job_id}"), long_budget)
        ap = 0.0 if trained.diverged else toy_ap(graph, trained, task, plan.eval_batch_size)
        aps.append(ap)
        logger.info(f"{record.job_id}: reward {record.reward:.4f}, toy AP {ap:.4f}")
    rewards = [r.reward for r in chosen]
    rho, pvalue = rank_correlation(rewards, aps)
    logger.info(f"Spearman rho over {len(chosen)} architectures: {rho:.3f} (p={pvalue:.3g})")
    return CorrelationResult([r.job_id for r in chosen], rewards, aps, rho, pvalue)


@dataclass
class AblationReport:
    reward_modes: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    space_modes: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    deform_baseline: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"reward_modes": self.reward_modes, "space_modes": self.space_modes,
                "deform_baseline": self.deform_baseline}


def ablation_modes(plan: SearchPlan, workdir: Optional[Union[str, Path]] = None,
                   modes: Sequence[str] = ("reward", "space", "deform"), top: int = 10) -> AblationReport:
    """
    reward  FPN search under each reward mode; top-`top` FPNs retrained and scored by toy AP
    space   f-only, h-only and progressive searches under the same budget
    deform  original decoder against the same decoder with deformable FPN convs
    """
    workdir = Path(workdir or plan.resolved_workdir())
    report = AblationReport()
    unknown = set(modes) - {"reward", "space", "deform"}
    if unknown:
        raise ConfigError(f"Unknown ablation modes {sorted(unknown)}")

    if "reward" in modes:
        for mode in RewardMode:
            variant = plan.model_copy(update={"reward_mode": mode, "search_space": SpaceMode.FPN_ONLY})
            result = run_progressive_search(variant, workdir=workdir)
            task = EvaluationContext(variant, workdir).task(prepare_backbone(variant, workdir).cache_id)
            aps = []
            for record in result.stages["FPN"].top[:top]:
                graph = build_stage_graph("FPN", record.tokens, task, variant)
                trained = train_decoder(graph, task, variant, job_seed(variant.seed, f"ablate-{record.job_id}"))
                aps.append(0.0 if trained.diverged else toy_ap(graph, trained, task, variant.eval_batch_size))
            report.reward_modes[mode.value] = {
                "top_mean_ap": float(np.mean(aps)) if aps else 0.0,
                "top_aps": aps,
                "best_reward": result.stages["FPN"].best.reward if result.stages["FPN"].best else None,
                "log": str(result.log_path),
            }
            logger.info(f"Reward mode {mode.value}: top-{top} mean toy AP {report.reward_modes[mode.value]['top_mean_ap']:.4f}")

    if "space" in modes:
        for mode in SpaceMode:
            variant = plan.model_copy(update={"search_space": mode})
            result = run_progressive_search(variant, workdir=workdir)
            report.space_modes[mode.value] = {
                "positions": sum(len(action_space(SearchStage.FPN_ONLY if s == "FPN" else SearchStage.HEAD_ONLY))
                                 for s in stages_for(mode)),
                "stages": {name: {"evaluated": len(o.records),
                                  "best_reward": o.best.reward if o.best else None,
                                  "best_tokens": o.best.tokens if o.best else None}
                           for name, o in result.stages.items()},
                "log": str(result.log_path),
            }

    if "deform" in modes:
        prepared = prepare_backbone(plan, workdir)
        task = EvaluationContext(plan, workdir).task(prepared.cache_id)
        widths = DecoderWidths(plan.fpn_width, plan.fpn_width)
        for name, deformable in (("original", False), ("deform_fpn", True)):
            graph = original_fcos_decoder(task.input_specs, widths, plan.num_classes, deformable_fpn=deformable)
            evaluation = evaluate_architecture(graph, task, plan, job_seed(plan.seed, f"baseline-{name}"))
            costs = cost(graph)
            report.deform_baseline[name] = {"reward": evaluation.reward if math.isfinite(evaluation.reward) else None,
                                            "status": evaluation.status, "macs": costs.macs, "params": costs.params}
    return report
