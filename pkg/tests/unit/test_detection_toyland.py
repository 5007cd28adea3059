"""
Unit tests for the synthetic detection task.

Tests:
-----
- Dataset generation and HDF5 cache
- Target encoding (level ranges, overlap resolution, centerness)
- Focal, IoU and centerness losses
- Negative-loss reward
- Detection decoding, NMS and toy AP
"""

import json
import math

import numpy as np
import pytest

from decoder_search.detection_toyland import (
    Detection,
    SynthImage,
    SynthObject,
    average_precision,
    binary_cross_entropy,
    centerness,
    compute_losses,
    encode_targets,
    evaluate_ap,
    export_annotations_json,
    focal_loss,
    generate_dataset,
    iou_loss,
    level_specs_for,
    load_dataset,
    nms,
    reward,
    save_dataset,
    scale_level,
    stack_targets,
)
from decoder_search.errors import CacheError
from decoder_search.tensor_engine import Parameter, Tensor, sum_

NUM_CLASSES = 2


def image_with(*objects, size=64):
    pixels = np.zeros((3, size, size), dtype=np.float32)
    return SynthImage(pixels, [SynthObject(k, box, ((box[0] + box[2]) / 2, (box[1] + box[3]) / 2),
                                           max(box[2] - box[0], box[3] - box[1])) for k, box in objects])


def perfect_predictions(targets, num_classes):
    """Logits that agree with the targets at every location."""
    preds = {}
    for level, target in targets.items():
        pred = np.empty_like(target, dtype=np.float64)
        pred[:, :num_classes] = np.where(target[:, :num_classes] > 0, 20.0, -20.0)
        ltrb = target[:, num_classes:num_classes + 4]
        pred[:, num_classes:num_classes + 4] = np.where(ltrb > 0, ltrb, 1.0)
        pred[:, num_classes + 4] = 20.0
        preds[level] = Tensor(pred)
    return preds


# ============================================================================
# DATASET
# ============================================================================

@pytest.mark.unit
class TestDataset:
    """Test synthetic image generation and caching."""

    def test_deterministic(self):
        """Test the same seed produces identical images."""
        a = generate_dataset(5, 3, 64, 3)
        b = generate_dataset(5, 3, 64, 3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.pixels, y.pixels)
            assert [o.box for o in x.objects] == [o.box for o in y.objects]

    def test_image_contents(self, toy_images):
        """Test pixel shape and object counts."""
        for image in toy_images:
            assert image.pixels.shape == (3, 64, 64)
            assert image.pixels.dtype == np.float32
            assert 1 <= len(image.objects) <= 4
            for obj in image.objects:
                x0, y0, x1, y1 = obj.box
                assert 0 <= x0 < x1 <= 64 and 0 <= y0 < y1 <= 64
                assert 0 <= obj.class_id < 3

    def test_cache_round_trip(self, toy_images, temp_output_dir):
        """Test pixels and annotations survive the HDF5 cache."""
        path = save_dataset(temp_output_dir / "data.h5", toy_images, seed=11, num_classes=3)
        loaded = load_dataset(path, seed=11)
        assert len(loaded) == len(toy_images)
        for original, restored in zip(toy_images, loaded):
            np.testing.assert_array_equal(original.pixels, restored.pixels)
            assert [o.box for o in original.objects] == [o.box for o in restored.objects]
            assert [o.class_id for o in original.objects] == [o.class_id for o in restored.objects]

    def test_cache_seed_mismatch(self, toy_images, temp_output_dir):
        """Test a cache built for another seed is rejected."""
        path = save_dataset(temp_output_dir / "data.h5", toy_images, seed=11, num_classes=3)
        with pytest.raises(CacheError, match="prepare"):
            load_dataset(path, seed=12)

    def test_missing_cache(self, temp_output_dir):
        """Test the error points at the prepare step."""
        with pytest.raises(CacheError, match="prepare"):
            load_dataset(temp_output_dir / "missing.h5")

    def test_export_annotations(self, toy_images, temp_output_dir):
        """Test JSON export lists every object."""
        path = export_annotations_json(toy_images, temp_output_dir / "annotations.json")
        payload = json.loads(path.read_text())
        assert len(payload) == len(toy_images)
        assert sum(len(entry["objects"]) for entry in payload) == sum(len(im.objects) for im in toy_images)


# ============================================================================
# TARGETS
# ============================================================================

@pytest.mark.unit
class TestTargets:
    """Test per-level target encoding."""

    @pytest.mark.parametrize("side,level", [(10, 3), (16, 3), (17, 4), (40, 5), (64, 5),
                                            (90, 6), (96, 6), (97, 7), (200, 7)])
    def test_scale_level(self, side, level):
        """Test level ranges are (lo, hi] on the longer side."""
        assert scale_level((0, 0, side, side / 2)) == level

    def test_single_box(self):
        """Test a 40 px box is positive at exactly one level-4 location."""
        image = image_with((1, (20.0, 20.0, 60.0, 60.0)))
        targets = encode_targets(image, level_specs_for((64, 64)), NUM_CLASSES)
        assert targets.num_positives() == 1
        assert targets.positive_mask(4)[2, 2]
        level4 = targets.levels[4]
        assert level4[1, 2, 2] == 1.0 and level4[0, 2, 2] == 0.0
        np.testing.assert_allclose(level4[NUM_CLASSES:NUM_CLASSES + 4, 2, 2], [20, 20, 20, 20])
        assert level4[NUM_CLASSES + 4, 2, 2] == pytest.approx(1.0)

    def test_overlap_goes_to_smaller_box(self):
        """Test a location inside two boxes is assigned to the smaller one."""
        image = image_with((0, (20.0, 20.0, 60.0, 60.0)), (1, (30.0, 30.0, 58.0, 58.0)))
        targets = encode_targets(image, level_specs_for((64, 64)), NUM_CLASSES)
        level4 = targets.levels[4]
        assert level4[1, 2, 2] == 1.0 and level4[0, 2, 2] == 0.0
        np.testing.assert_allclose(level4[NUM_CLASSES:NUM_CLASSES + 4, 2, 2], [10, 10, 18, 18])
        assert level4[NUM_CLASSES + 4, 2, 2] == pytest.approx(10.0 / 18.0)

    def test_centerness(self):
        """Test centerness of centered and off-center points."""
        values = centerness(np.array([[5.0, 5.0, 5.0, 5.0], [1.0, 2.0, 4.0, 8.0]]))
        np.testing.assert_allclose(values, [1.0, math.sqrt(0.25 * 0.25)])

    def test_level_shapes(self, toy_images):
        """Test stacked targets have (N, K + 5, H_l, W_l) per level."""
        specs = level_specs_for((64, 64))
        stacked = stack_targets([encode_targets(im, specs, 3) for im in toy_images])
        assert stacked[3].shape == (4, 8, 8, 8)
        assert stacked[7].shape == (4, 8, 1, 1)


# ============================================================================
# LOSSES
# ============================================================================

@pytest.mark.unit
class TestLosses:
    """Test loss functions."""

    def test_focal_reduces_to_half_bce(self, rng):
        """Test gamma=0, alpha=0.5 gives half the summed BCE."""
        logits = Tensor(rng.standard_normal((6, 3)))
        targets = (rng.random((6, 3)) > 0.5).astype(np.float64)
        focal = focal_loss(logits, targets, alpha=0.5, gamma=0.0).item()
        bce = sum_(binary_cross_entropy(logits, targets)).item()
        assert focal == pytest.approx(0.5 * bce, rel=1e-12)

    def test_focal_known_value(self):
        """Test one positive at p=0.5 with the default alpha and gamma."""
        value = focal_loss(Tensor(np.zeros((1, 1))), np.ones((1, 1))).item()
        assert value == pytest.approx(0.25 * 0.25 * math.log(2.0))

    def test_iou_loss(self):
        """Test -ln(IoU) for exact and half-size predictions."""
        target = np.array([[2.0, 2.0, 2.0, 2.0]])
        assert iou_loss(Tensor(target.copy()), target).item() == pytest.approx(0.0, abs=1e-9)
        assert iou_loss(Tensor(np.ones((1, 4))), target).item() == pytest.approx(math.log(4.0))

    def test_loss_gradients_flow(self):
        """Test all three terms are differentiable with respect to predictions."""
        image = image_with((1, (20.0, 20.0, 60.0, 60.0)))
        targets = stack_targets([encode_targets(image, level_specs_for((64, 64)), NUM_CLASSES)])
        preds = {level: Parameter(np.full(t.shape, 0.5)) for level, t in targets.items()}
        compute_losses(preds, targets, NUM_CLASSES).total.backward()
        assert np.any(preds[4].grad[0, NUM_CLASSES:, 2, 2] != 0)

    def test_no_positives(self):
        """Test images without positives only pay the classification loss."""
        targets = {3: np.zeros((1, NUM_CLASSES + 5, 2, 2))}
        terms = compute_losses({3: Tensor(np.zeros((1, NUM_CLASSES + 5, 2, 2)))}, targets, NUM_CLASSES)
        assert terms.reg.item() == 0.0 and terms.ctr.item() == 0.0
        assert terms.cls.item() > 0.0

    def test_minimum_at_perfect_prediction(self):
        """Test a single centered positive predicted exactly gives a near-zero loss."""
        image = image_with((1, (20.0, 20.0, 60.0, 60.0)))
        targets = stack_targets([encode_targets(image, level_specs_for((64, 64)), NUM_CLASSES)])
        terms = compute_losses(perfect_predictions(targets, NUM_CLASSES), targets, NUM_CLASSES)
        assert terms.total.item() < 1e-4
        assert all(value >= 0.0 for value in terms.as_floats().values())


@pytest.mark.unit
class TestReward:
    """Test the negative-loss reward."""

    def test_reward_is_sum_over_images(self, toy_images, rng):
        """Test R over two images equals the sum of per-image rewards."""
        specs = level_specs_for((64, 64))
        targets = stack_targets([encode_targets(im, specs, 3) for im in toy_images])
        fixed = {level: rng.standard_normal(t.shape) for level, t in targets.items()}
        for value in fixed.values():
            value[:, 3:7] = np.abs(value[:, 3:7]) + 1.0

        def predict(indices):
            return {level: Tensor(value[indices]) for level, value in fixed.items()}

        both, terms = reward(predict, [0, 1], targets, 3, batch_size=1)
        first, _ = reward(predict, [0], targets, 3)
        second, _ = reward(predict, [1], targets, 3)
        assert both == pytest.approx(first + second)
        assert both <= 0.0
        assert both == pytest.approx(-sum(terms.values()))

    def test_batch_size_does_not_change_reward(self, toy_images, rng):
        """Test evaluation batching leaves the reward unchanged."""
        specs = level_specs_for((64, 64))
        targets = stack_targets([encode_targets(im, specs, 3) for im in toy_images])
        fixed = {level: np.abs(rng.standard_normal(t.shape)) for level, t in targets.items()}

        def predict(indices):
            return {level: Tensor(value[indices]) for level, value in fixed.items()}

        a, _ = reward(predict, [0, 1, 2, 3], targets, 3, batch_size=1)
        b, _ = reward(predict, [0, 1, 2, 3], targets, 3, batch_size=4)
        assert a == pytest.approx(b, rel=1e-9)

    def test_empty_meta_val(self):
        """Test a reward over no images is an error."""
        with pytest.raises(ValueError):
            reward(lambda idx: {}, [], {}, 2)


# ============================================================================
# DETECTIONS AND AP
# ============================================================================

@pytest.mark.unit
class TestAveragePrecision:
    """Test detection decoding and toy AP."""

    def test_nms_keeps_best(self):
        """Test overlapping boxes collapse to the highest score."""
        boxes = np.array([[0, 0, 10, 10], [1, 1, 10, 10], [20, 20, 30, 30]], dtype=float)
        assert nms(boxes, np.array([0.5, 0.9, 0.7]), 0.6) == [1, 2]

    def test_perfect_detection(self):
        """Test one exact detection per object gives AP 1."""
        image = image_with((0, (20.0, 20.0, 60.0, 60.0)), (1, (2.0, 2.0, 14.0, 14.0)))
        detections = [[Detection(0, 0.9, (20.0, 20.0, 60.0, 60.0)), Detection(1, 0.8, (2.0, 2.0, 14.0, 14.0))]]
        assert average_precision(detections, [image], 0) == pytest.approx(1.0)
        assert average_precision(detections, [image], 1) == pytest.approx(1.0)

    def test_false_positive_ranked_first(self):
        """Test precision 0.5 at full recall gives AP 0.5."""
        image = image_with((0, (20.0, 20.0, 60.0, 60.0)))
        detections = [[Detection(0, 0.9, (0.0, 0.0, 5.0, 5.0)), Detection(0, 0.8, (20.0, 20.0, 60.0, 60.0))]]
        assert average_precision(detections, [image], 0) == pytest.approx(0.5)

    def test_half_recall(self):
        """Test finding one of two objects covers 51 of 101 recall points."""
        image = image_with((0, (20.0, 20.0, 60.0, 60.0)), (0, (0.0, 0.0, 10.0, 10.0)))
        detections = [[Detection(0, 0.9, (20.0, 20.0, 60.0, 60.0))]]
        assert average_precision(detections, [image], 0) == pytest.approx(51 / 101)

    def test_duplicate_is_false_positive(self):
        """Test a second detection of a matched object does not count."""
        image = image_with((0, (20.0, 20.0, 60.0, 60.0)), (0, (0.0, 0.0, 10.0, 10.0)))
        box = (20.0, 20.0, 60.0, 60.0)
        detections = [[Detection(0, 0.9, box), Detection(0, 0.8, box), Detection(0, 0.7, (0.0, 0.0, 10.0, 10.0))]]
        # precision at full recall is 2/3
        assert average_precision(detections, [image], 0) == pytest.approx((51 * 1.0 + 50 * 2 / 3) / 101)

    def test_class_without_ground_truth(self):
        """Test classes absent from the ground truth are skipped."""
        image = image_with((0, (20.0, 20.0, 60.0, 60.0)))
        assert average_precision([[]], [image], 1) is None

    def test_decode_and_evaluate(self):
        """Test raw predictions decode to the right box and score AP 1."""
        image = image_with((1, (20.0, 20.0, 60.0, 60.0)))
        pred = np.full((1, NUM_CLASSES + 5, 4, 4), -20.0)
        pred[:, NUM_CLASSES:NUM_CLASSES + 4] = 1.0
        pred[0, 1, 2, 2] = 20.0
        pred[0, NUM_CLASSES:NUM_CLASSES + 4, 2, 2] = 20.0
        pred[0, NUM_CLASSES + 4, 2, 2] = 20.0
        report = evaluate_ap({4: pred}, [image], NUM_CLASSES)
        assert report.per_class == {1: pytest.approx(1.0)}
        assert report.mean == pytest.approx(1.0)
