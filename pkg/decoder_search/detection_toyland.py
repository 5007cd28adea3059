#!/usr/bin/env python3
"""
DETECTION TOYLAND
=================

Desk-scale detection proxy task:

    - seeded synthetic images of discs, squares and triangles
    - anchor-free pyramid targets (class one-hot, l/t/r/b distances, centerness)
    - focal, IoU and centerness losses; negative-loss reward
    - box decoding with class-wise NMS and 101-point interpolated AP

Target layout per level: channels [0, K) class one-hot, [K, K+4) distances
in pixels, K+4 centerness. A location is positive iff its class channels are
not all zero.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import h5py
import numpy as np
from scipy.special import expit

from .decoder_graph import LEVEL_STRIDES, PYRAMID_LEVELS, FeatureSpec
from .errors import CacheError
from .tensor_engine import (
    Tensor,
    clip,
    concat,
    log,
    maximum,
    minimum,
    narrow,
    no_grad,
    sigmoid,
    sum_,
    take,
)

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
SHAPE_NAMES = ("disc", "square", "triangle")
DEFAULT_LEVEL_RANGES: Dict[int, Tuple[float, float]] = {
    3: (0.0, 16.0),
    4: (16.0, 32.0),
    5: (32.0, 64.0),
    6: (64.0, 96.0),
    7: (96.0, math.inf),
}
PROB_EPS = 1e-6
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
MIN_OBJECT_SIZE = 8.0
MAX_OBJECT_SIZE = 120.0

_CLASS_COLORS = np.array([
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.25, 0.35, 0.95],
    [0.9, 0.85, 0.2],
    [0.8, 0.3, 0.85],
    [0.2, 0.85, 0.85],
])


# ============================================================================
# DATASET
# ============================================================================

@dataclass
class SynthObject:
    """One rendered object; box is tight around its own full mask"""
    class_id: int
    box: Tuple[float, float, float, float]
    center: Tuple[float, float]
    size: float

    @property
    def shape_name(self) -> str:
        return SHAPE_NAMES[self.class_id % len(SHAPE_NAMES)]

    def to_dict(self) -> Dict:
        return {"class_id": self.class_id, "box": list(self.box), "center": list(self.center), "size": self.size}


@dataclass
class SynthImage:
    pixels: np.ndarray  # (3, H, W) float32
    objects: List[SynthObject] = field(default_factory=list)

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]

    def boxes(self) -> np.ndarray:
        return np.array([obj.box for obj in self.objects], dtype=np.float64).reshape(-1, 4)

    def labels(self) -> np.ndarray:
        return np.array([obj.class_id for obj in self.objects], dtype=np.int64)


def render_mask(shape_name: str, center: Tuple[float, float], size: float,
                image_size: Tuple[int, int]) -> np.ndarray:
    """Boolean mask sampled at pixel centers."""
    h, w = image_size
    ys, xs = np.mgrid[0:h, 0:w]
    dy = ys + 0.5 - center[1]
    dx = xs + 0.5 - center[0]
    half = size / 2.0
    if shape_name == "disc":
        return dx * dx + dy * dy <= half * half
    if shape_name == "square":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if shape_name == "triangle":
        # apex on top, base at the bottom edge
        depth = dy + half
        return (depth >= 0) & (dy <= half) & (np.abs(dx) <= depth / 2.0)
    raise ValueError(f"Unknown shape '{shape_name}'")


def mask_box(mask: np.ndarray) -> Optional[Tuple[float, float, float, float]]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return (float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def generate_image(rng: np.random.Generator, image_size: int, num_classes: int,
                   max_objects: int = 4) -> SynthImage:
    size_hw = (image_size, image_size)
    pixels = 0.2 + 0.05 * rng.standard_normal((3, image_size, image_size))
    objects = []
    for _ in range(int(rng.integers(1, max_objects + 1))):
        class_id = int(rng.integers(num_classes))
        size = float(np.exp(rng.uniform(np.log(MIN_OBJECT_SIZE), np.log(MAX_OBJECT_SIZE))))
        half = size / 2.0
        center = (float(rng.uniform(half, image_size - half)), float(rng.uniform(half, image_size - half)))
        mask = render_mask(SHAPE_NAMES[class_id % len(SHAPE_NAMES)], center, size, size_hw)
        box = mask_box(mask)
        if box is None:
            continue
        color = _CLASS_COLORS[class_id % len(_CLASS_COLORS)] + 0.05 * rng.standard_normal(3)
        pixels[:, mask] = color[:, None]
        objects.append(SynthObject(class_id, box, center, size))
    if not objects:
        return generate_image(rng, image_size, num_classes, max_objects)
    return SynthImage(pixels.astype(np.float32), objects)


def generate_dataset(seed: int, n_images: int, image_size: int = 128, num_classes: int = 3) -> List[SynthImage]:
    """Deterministic per seed; object sides are log-uniform in [8, 120] px."""
    if n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    rng = np.random.default_rng(seed)
    images = [generate_image(rng, image_size, num_classes) for _ in range(n_images)]
    logger.info(f"Generated {n_images} synthetic images (seed={seed}, "
                f"{sum(len(im.objects) for im in images)} objects)")
    return images


def scale_level(box: Sequence[float], ranges: Dict[int, Tuple[float, float]] = DEFAULT_LEVEL_RANGES) -> int:
    """Level whose range contains the box's longer side."""
    longest = max(box[2] - box[0], box[3] - box[1])
    for level, (lo, hi) in ranges.items():
        if lo < longest <= hi:
            return level
    raise ValueError(f"No level range contains {longest}")


# Cache ------------------------------------------------------------------------

def save_dataset(path: Union[str, Path], images: List[SynthImage], seed: int, num_classes: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for image_index, image in enumerate(images):
        for obj in image.objects:
            rows.append([image_index, obj.class_id, *obj.box, *obj.center, obj.size])
    with h5py.File(path, "w") as f:
        f.attrs["format_version"] = DATASET_FORMAT_VERSION
        f.attrs["seed"] = seed
        f.attrs["num_classes"] = num_classes
        f.create_dataset("pixels", data=np.stack([im.pixels for im in images]), compression="gzip")
        f.create_dataset("annotations", data=np.array(rows, dtype=np.float64).reshape(-1, 9))
    logger.info(f"Wrote dataset cache {path}")
    return path


def load_dataset(path: Union[str, Path], seed: Optional[int] = None) -> List[SynthImage]:
    path = Path(path)
    if not path.exists():
        raise CacheError(f"Dataset cache {path} not found; run the `prepare` step first")
    with h5py.File(path, "r") as f:
        if f.attrs.get("format_version") != DATASET_FORMAT_VERSION:
            raise CacheError(f"Dataset cache {path} has an unsupported format version; rerun `prepare`")
        if seed is not None and int(f.attrs["seed"]) != seed:
            raise CacheError(f"Dataset cache {path} was built with seed {int(f.attrs['seed'])}, "
                             f"expected {seed}; rerun `prepare`")
        pixels = f["pixels"][...]
        rows = f["annotations"][...]
    images = [SynthImage(pixels[i]) for i in range(len(pixels))]
    for row in rows:
        images[int(row[0])].objects.append(
            SynthObject(int(row[1]), tuple(float(v) for v in row[2:6]), (float(row[6]), float(row[7])), float(row[8])))
    return images


def export_annotations_json(images: List[SynthImage], path: Union[str, Path]) -> Path:
    path = Path(path)
    payload = [{"image": i, "objects": [obj.to_dict() for obj in image.objects]} for i, image in enumerate(images)]
    path.write_text(json.dumps(payload, indent=2))
    return path


# ============================================================================
# TARGETS
# ============================================================================

@dataclass
class PyramidTargets:
    """level -> (K + 5, H_l, W_l) target map"""
    levels: Dict[int, np.ndarray]
    num_classes: int

    def positive_mask(self, level: int) -> np.ndarray:
        return self.levels[level][:self.num_classes].sum(axis=0) > 0

    def num_positives(self) -> int:
        return int(sum(self.positive_mask(level).sum() for level in self.levels))


def level_locations(spec: FeatureSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Image coordinates (x, y) of each feature location, each of shape (H, W)."""
    offset = spec.stride // 2
    ys = offset + spec.stride * np.arange(spec.height, dtype=np.float64)
    xs = offset + spec.stride * np.arange(spec.width, dtype=np.float64)
    return np.meshgrid(xs, ys)


def encode_targets(
    image: SynthImage,
    level_specs: Dict[int, FeatureSpec],
    num_classes: int,
    ranges: Dict[int, Tuple[float, float]] = DEFAULT_LEVEL_RANGES,
) -> PyramidTargets:
    """
    A location is positive iff it lies inside a box and its largest distance
    to the box edges falls in (lo, hi] for the level. Overlaps go to the
    smallest-area box.
    """
    boxes = image.boxes()
    labels = image.labels()
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    levels = {}
    for level, spec in level_specs.items():
        target = np.zeros((num_classes + 5, spec.height, spec.width), dtype=np.float32)
        if len(boxes):
            xs, ys = level_locations(spec)
            x = xs[..., None]
            y = ys[..., None]
            dist = np.stack([x - boxes[:, 0], y - boxes[:, 1], boxes[:, 2] - x, boxes[:, 3] - y], axis=-1)
            inside = dist.min(axis=-1) > 0
            extent = dist.max(axis=-1)
            lo, hi = ranges[level]
            candidate = inside & (extent > lo) & (extent <= hi)
            cost = np.where(candidate, areas, np.inf)
            owner = np.argmin(cost, axis=-1)
            positive = np.isfinite(cost.min(axis=-1))
            py, px = np.nonzero(positive)
            chosen = owner[py, px]
            ltrb = dist[py, px, chosen]
            target[labels[chosen], py, px] = 1.0
            target[num_classes:num_classes + 4, py, px] = ltrb.T
            target[num_classes + 4, py, px] = centerness(ltrb)
        levels[level] = target
    return PyramidTargets(levels, num_classes)


def centerness(ltrb: np.ndarray) -> np.ndarray:
    l, t, r, b = (ltrb[..., i] for i in range(4))
    return np.sqrt((np.minimum(l, r) / np.maximum(l, r)) * (np.minimum(t, b) / np.maximum(t, b)))


def stack_targets(targets: Sequence[PyramidTargets]) -> Dict[int, np.ndarray]:
    """Batch per-image targets into level -> (N, K + 5, H, W)."""
    return {level: np.stack([t.levels[level] for t in targets]) for level in targets[0].levels}


def level_specs_for(image_size: Tuple[int, int], channels: int = 1) -> Dict[int, FeatureSpec]:
    h, w = image_size
    return {level: FeatureSpec(LEVEL_STRIDES[level], channels, math.ceil(h / LEVEL_STRIDES[level]),
                               math.ceil(w / LEVEL_STRIDES[level])) for level in PYRAMID_LEVELS}


# ============================================================================
# LOSSES
# ============================================================================

@dataclass
class LossTerms:
    cls: Tensor
    reg: Tensor
    ctr: Tensor

    @property
    def total(self) -> Tensor:
        return self.cls + self.reg + self.ctr

    def as_floats(self) -> Dict[str, float]:
        return {"cls": self.cls.item(), "reg": self.reg.item(), "ctr": self.ctr.item()}


def focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Sum of sigmoid focal loss over all elements (not normalized)."""
    p = clip(sigmoid(logits), PROB_EPS, 1 - PROB_EPS)
    y = targets.astype(p.dtype)
    p_t = p * y + (1.0 - p) * (1.0 - y)
    alpha_t = alpha * y + (1 - alpha) * (1 - y)
    modulating = (1.0 - p_t) ** gamma if gamma else 1.0
    return -sum_(log(p_t) * modulating * alpha_t)


def binary_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise BCE on clipped sigmoid probabilities."""
    p = clip(sigmoid(logits), PROB_EPS, 1 - PROB_EPS)
    y = targets.astype(p.dtype)
    return -(log(p) * y + log(1.0 - p) * (1.0 - y))


def iou_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """-ln(IoU) per row for (M, 4) l/t/r/b distances sharing an anchor point."""
    t = target.astype(pred.dtype)
    pl, pt, pr, pb = (narrow(pred, 1, i, i + 1) for i in range(4))
    tl, tt, tr, tb = (t[:, i:i + 1] for i in range(4))
    pred_area = (pl + pr) * (pt + pb)
    target_area = (tl + tr) * (tt + tb)
    inter_w = minimum(pl, tl) + minimum(pr, tr)
    inter_h = minimum(pt, tt) + minimum(pb, tb)
    inter = inter_w * inter_h
    union = maximum(pred_area + target_area - inter, PROB_EPS)
    return -log(clip(inter / union, PROB_EPS, 1.0))


def _flatten_levels(preds: Dict[int, Tensor], targets: Dict[int, np.ndarray]) -> Tuple[Tensor, np.ndarray]:
    flat_preds = []
    flat_targets = []
    for level in sorted(preds):
        p = preds[level]
        channels = p.shape[1]
        flat_preds.append(p.transpose(0, 2, 3, 1).reshape(-1, channels))
        flat_targets.append(targets[level].transpose(0, 2, 3, 1).reshape(-1, channels))
    return concat(flat_preds, axis=0), np.concatenate(flat_targets, axis=0)


def compute_losses(preds: Dict[int, Tensor], targets: Dict[int, np.ndarray], num_classes: int) -> LossTerms:
    """
    Batch losses. cls sums focal loss over all locations and divides by
    max(num_pos, 1); reg and ctr average over positives (zero if none).
    """
    flat, flat_targets = _flatten_levels(preds, targets)
    k = num_classes
    cls_targets = flat_targets[:, :k]
    positives = np.flatnonzero(cls_targets.sum(axis=1) > 0)
    num_pos = len(positives)

    cls = focal_loss(narrow(flat, 1, 0, k), cls_targets) / float(max(num_pos, 1))
    if num_pos == 0:
        zero = Tensor(np.zeros((), dtype=flat.dtype))
        return LossTerms(cls, zero, zero)
    pos_rows = take(flat, positives)
    pos_targets = flat_targets[positives]
    reg = iou_loss(narrow(pos_rows, 1, k, k + 4), pos_targets[:, k:k + 4]).mean()
    ctr = binary_cross_entropy(narrow(pos_rows, 1, k + 4, k + 5), pos_targets[:, k + 4:k + 5]).mean()
    return LossTerms(cls, reg, ctr)


def _slice_batch(values: Dict[int, Union[Tensor, np.ndarray]], start: int, stop: int):
    return {level: (narrow(v, 0, start, stop) if isinstance(v, Tensor) else v[start:stop])
            for level, v in values.items()}


def per_image_losses(preds: Dict[int, Tensor], targets: Dict[int, np.ndarray], num_classes: int) -> List[Dict[str, float]]:
    batch = next(iter(preds.values())).shape[0]
    with no_grad():
        return [compute_losses(_slice_batch(preds, i, i + 1), _slice_batch(targets, i, i + 1), num_classes).as_floats()
                for i in range(batch)]


def negative_loss_reward(image_losses: Sequence[Dict[str, float]]) -> float:
    """R = -sum over images of (cls + reg + ctr)."""
    return -float(sum(terms["cls"] + terms["reg"] + terms["ctr"] for terms in image_losses))


def reward(predict, images: Sequence[int], targets: Dict[int, np.ndarray], num_classes: int,
           batch_size: int = 16) -> Tuple[float, Dict[str, float]]:
    """
    Negative loss sum over meta-val.

    predict: callable mapping an index array to pyramid predictions, already
    bound to averaged parameters in eval mode.
    Returns (reward, summed loss terms).
    """
    indices = np.asarray(images)
    if indices.size == 0:
        raise ValueError("reward needs a non-empty meta-val set")
    all_terms: List[Dict[str, float]] = []
    with no_grad():
        for start in range(0, len(indices), batch_size):
            batch = indices[start:start + batch_size]
            preds = predict(batch)
            batch_targets = {level: t[batch] for level, t in targets.items()}
            all_terms.extend(per_image_losses(preds, batch_targets, num_classes))
    totals = {key: float(sum(t[key] for t in all_terms)) for key in ("cls", "reg", "ctr")}
    return negative_loss_reward(all_terms), totals


# ============================================================================
# DECODING AND AP
# ============================================================================

@dataclass
class Detection:
    class_id: int
    score: float
    box: Tuple[float, float, float, float]


@dataclass
class APReport:
    per_class: Dict[int, float]
    mean: float

    def to_dict(self) -> Dict:
        return {"per_class": {str(k): v for k, v in self.per_class.items()}, "mean": self.mean}


def box_iou(box: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    iw = np.maximum(np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0]), 0.0)
    ih = np.maximum(np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1]), 0.0)
    inter = iw * ih
    union = (box[2] - box[0]) * (box[3] - box[1]) + (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]) - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> List[int]:
    """Greedy NMS; returns kept indices in descending score order."""
    order = list(np.argsort(-scores, kind="stable"))
    keep = []
    while order:
        best = order.pop(0)
        keep.append(int(best))
        if order:
            overlaps = box_iou(boxes[best], boxes[order])
            order = [idx for idx, overlap in zip(order, overlaps) if overlap <= iou_threshold]
    return keep


def decode_detections(
    preds: Dict[int, np.ndarray],
    num_classes: int,
    image_size: Tuple[int, int],
    score_threshold: float = 0.05,
    nms_iou: float = 0.6,
    top_n: int = 100,
) -> List[List[Detection]]:
    """Per-image scored boxes from raw pyramid outputs (N, K + 5, H, W)."""
    batch = next(iter(preds.values())).shape[0]
    h, w = image_size
    results: List[List[Detection]] = []
    for n in range(batch):
        boxes, scores, classes = [], [], []
        for level in sorted(preds):
            level_pred = preds[level]
            out = np.asarray(level_pred.data if isinstance(level_pred, Tensor) else level_pred, dtype=np.float64)[n]
            spec = FeatureSpec(LEVEL_STRIDES[level], out.shape[0], out.shape[1], out.shape[2])
            xs, ys = level_locations(spec)
            cls_prob = expit(out[:num_classes])
            ltrb = out[num_classes:num_classes + 4]
            ctr = expit(out[num_classes + 4])
            score = cls_prob * ctr[None]
            k_idx, y_idx, x_idx = np.nonzero(score > score_threshold)
            for k, yi, xi in zip(k_idx, y_idx, x_idx):
                x, y = xs[yi, xi], ys[yi, xi]
                l, t, r, b = ltrb[:, yi, xi]
                boxes.append([max(x - l, 0.0), max(y - t, 0.0), min(x + r, w), min(y + b, h)])
                scores.append(score[k, yi, xi])
                classes.append(int(k))
        detections: List[Detection] = []
        if boxes:
            boxes_arr = np.array(boxes)
            scores_arr = np.array(scores)
            classes_arr = np.array(classes)
            for k in range(num_classes):
                members = np.flatnonzero(classes_arr == k)
                if members.size == 0:
                    continue
                for idx in nms(boxes_arr[members], scores_arr[members], nms_iou):
                    member = members[idx]
                    detections.append(Detection(k, float(scores_arr[member]), tuple(boxes_arr[member])))
            detections.sort(key=lambda d: -d.score)
            detections = detections[:top_n]
        results.append(detections)
    return results


def interpolated_ap(recall: np.ndarray, precision: np.ndarray, points: int = 101) -> float:
    ap = 0.0
    for threshold in np.linspace(0.0, 1.0, points):
        reachable = precision[recall >= threshold]
        ap += reachable.max() if reachable.size else 0.0
    return float(ap / points)


def average_precision(detections: Sequence[Sequence[Detection]], ground_truth: Sequence[SynthImage],
                      class_id: int, iou_threshold: float = 0.5) -> Optional[float]:
    """101-point AP for one class; None when the class has no ground truth."""
    num_gt = sum(int((image.labels() == class_id).sum()) for image in ground_truth)
    if num_gt == 0:
        return None
    scores, hits = [], []
    for image_dets, image in zip(detections, ground_truth):
        gt = image.boxes()[image.labels() == class_id]
        matched = np.zeros(len(gt), dtype=bool)
        for det in sorted((d for d in image_dets if d.class_id == class_id), key=lambda d: -d.score):
            hit = False
            if len(gt):
                overlaps = np.where(matched, -1.0, box_iou(np.array(det.box), gt))
                best = int(np.argmax(overlaps))
                if overlaps[best] >= iou_threshold:
                    matched[best] = True
                    hit = True
            scores.append(det.score)
            hits.append(hit)
    if not scores:
        return 0.0
    order = np.argsort(-np.array(scores), kind="stable")
    tp = np.cumsum(np.array(hits, dtype=np.float64)[order])
    fp = np.cumsum(1.0 - np.array(hits, dtype=np.float64)[order])
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return interpolated_ap(recall, precision)


def evaluate_detections(detections: Sequence[Sequence[Detection]], ground_truth: Sequence[SynthImage],
                        num_classes: int, iou_threshold: float = 0.5) -> APReport:
    per_class = {}
    for k in range(num_classes):
        ap = average_precision(detections, ground_truth, k, iou_threshold)
        if ap is not None:
            per_class[k] = ap
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return APReport(per_class, mean)


def evaluate_ap(preds: Dict[int, np.ndarray], dataset: Sequence[SynthImage], num_classes: int,
                iou_threshold: float = 0.5, score_threshold: float = 0.05, nms_iou: float = 0.6) -> APReport:
    """AP of raw pyramid predictions (batched over `dataset` in order)."""
    if not dataset:
        return APReport({}, 0.0)
    detections = decode_detections(preds, num_classes, dataset[0].image_size, score_threshold, nms_iou)
    return evaluate_detections(detections, dataset, num_classes, iou_threshold)
