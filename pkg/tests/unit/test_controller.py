"""
Unit tests for the LSTM architecture controller.

Tests:
-----
- Initial uniform policy and deterministic sampling
- PPO update behaviour (zero advantage, non-finite rewards, bandit learning)
- Checkpoint round trip
"""

import math

import numpy as np
import pytest

from decoder_search.controller import Controller, PolicyConfig, SampleBatch
from decoder_search.errors import CheckpointError, ConfigError, ControllerError
from decoder_search.search_space import SearchStage, action_space

SMALL = PolicyConfig(hidden_size=16, embedding_size=8)


def head_controller(config=SMALL, seed=0):
    return Controller(action_space(SearchStage.HEAD_ONLY), config, seed=seed)


@pytest.mark.unit
class TestSampling:
    """Test the initial policy and sampling."""

    def test_initial_policy_is_uniform(self):
        """Test zero-initialized projections give uniform distributions."""
        controller = Controller(action_space(SearchStage.FPN_ONLY), SMALL)
        batch = controller.sample(5, seed=1)
        for k, probs in enumerate(controller.distributions(batch.tokens)):
            vocab = controller.space.vocab_sizes[k]
            np.testing.assert_allclose(probs, 1.0 / vocab, atol=1e-12)
        expected = -np.log(np.array(controller.space.vocab_sizes, dtype=np.float64))
        np.testing.assert_allclose(batch.log_probs, np.broadcast_to(expected, batch.log_probs.shape), atol=1e-12)

    def test_sample_deterministic_per_seed(self):
        """Test equal seeds draw equal sequences."""
        controller = head_controller()
        a = controller.sample(6, seed=42)
        b = controller.sample(6, seed=42)
        np.testing.assert_array_equal(a.tokens, b.tokens)
        assert a.tokens.shape == (6, 7)

    def test_tokens_within_vocab(self):
        """Test every sampled token lies in its position's vocabulary."""
        controller = Controller(action_space(SearchStage.JOINT), SMALL)
        tokens = controller.sample(20, seed=3).tokens
        assert np.all(tokens >= 0)
        assert np.all(tokens < np.array(controller.space.vocab_sizes))

    def test_non_finite_logits(self):
        """Test corrupted parameters fail loudly."""
        controller = head_controller()
        controller.params["proj.0.bias"].data = np.full(7, np.nan)
        with pytest.raises(ControllerError):
            controller.sample(2, seed=0)


# ============================================================================
# PPO
# ============================================================================

@pytest.mark.unit
class TestPPOUpdate:
    """Test PPO updates."""

    def test_zero_advantage_is_noop(self):
        """Test the first batch, whose rewards equal the baseline, leaves the policy in place."""
        controller = head_controller()
        before = {name: p.data.copy() for name, p in controller.params.items()}
        batch = controller.sample(4, seed=0)
        batch.rewards = np.full(4, -3.0)
        stats = controller.ppo_update(batch)
        np.testing.assert_array_equal(batch.advantages, 0.0)
        assert stats.baseline == pytest.approx(-3.0)
        for name, p in controller.params.items():
            np.testing.assert_allclose(p.data, before[name], atol=1e-9)

    def test_non_finite_rewards_take_batch_minimum(self):
        """Test NaN and inf rewards count as the worst finite reward."""
        controller = head_controller()
        batch = controller.sample(4, seed=0)
        batch.rewards = np.array([1.0, np.nan, -2.0, np.inf])
        controller.ppo_update(batch)
        np.testing.assert_allclose(batch.advantages, [2.25, -0.75, -0.75, -0.75])

    def test_all_rewards_non_finite(self):
        """Test a batch with no finite reward is rejected."""
        controller = head_controller()
        batch = controller.sample(3, seed=0)
        batch.rewards = np.array([np.nan, -np.inf, np.nan])
        with pytest.raises(ControllerError):
            controller.ppo_update(batch)

    def test_missing_rewards(self):
        """Test updating without rewards is an error."""
        controller = head_controller()
        with pytest.raises(ControllerError):
            controller.ppo_update(controller.sample(2, seed=0))

    def test_baseline_moving_average(self):
        """Test the baseline decays toward each batch mean."""
        controller = head_controller()
        for seed, value in enumerate([-4.0, -2.0]):
            batch = controller.sample(2, seed=seed)
            batch.rewards = np.full(2, value)
            controller.ppo_update(batch)
        assert controller.baseline == pytest.approx(0.95 * -4.0 + 0.05 * -2.0)
        assert controller.updates == 2

    def test_bandit_improves(self):
        """Test a reward for picking token 4 raises its probability."""
        controller = head_controller(PolicyConfig(hidden_size=16, embedding_size=8, lr=0.05))
        for step in range(60):
            batch = controller.sample(10, seed=step)
            batch.rewards = (batch.tokens[:, :6] == 4).mean(axis=1)
            controller.ppo_update(batch)
        probs = controller.distributions(controller.sample(50, seed=1000).tokens)
        mean_prob = np.mean([p[:, 4].mean() for p in probs[:6]])
        assert mean_prob > 0.3


# ============================================================================
# PERSISTENCE
# ============================================================================

@pytest.mark.unit
class TestPersistence:
    """Test controller checkpoints."""

    def test_round_trip(self, temp_output_dir):
        """Test a reloaded controller samples exactly as the original."""
        controller = head_controller()
        batch = controller.sample(4, seed=0)
        batch.rewards = np.array([-1.0, -2.0, -3.0, -4.0])
        controller.ppo_update(batch)
        path = controller.save(temp_output_dir / "controller.nfcs")
        assert (temp_output_dir / "controller.nfcs.json").exists()

        restored = Controller.load(path, action_space(SearchStage.HEAD_ONLY))
        assert restored.baseline == pytest.approx(controller.baseline)
        assert restored.updates == 1
        assert restored.optimizer.state.t == controller.optimizer.state.t
        for name, p in controller.params.items():
            np.testing.assert_array_equal(restored.params[name].data, p.data)
        np.testing.assert_array_equal(restored.sample(5, seed=9).tokens, controller.sample(5, seed=9).tokens)

    def test_batch_tag_and_atomic_files(self, temp_output_dir):
        """Test the completed-batch tag survives a reload and no temporary files remain."""
        path = head_controller().save(temp_output_dir / "controller.nfcs", batches=3)
        assert Controller.load(path).batches == 3
        assert sorted(p.name for p in temp_output_dir.iterdir()) == ["controller.nfcs", "controller.nfcs.json"]

    def test_vocabulary_mismatch(self, temp_output_dir):
        """Test loading into another stage's space is rejected."""
        path = head_controller().save(temp_output_dir / "controller.nfcs")
        with pytest.raises(CheckpointError):
            Controller.load(path, action_space(SearchStage.FPN_ONLY))

    def test_missing_sidecar(self, temp_output_dir):
        """Test a checkpoint without its JSON sidecar."""
        with pytest.raises(CheckpointError):
            Controller.load(temp_output_dir / "absent.nfcs")


@pytest.mark.unit
class TestPolicyConfig:
    """Test controller configuration."""

    def test_defaults(self):
        """Test default hyperparameters."""
        config = PolicyConfig()
        assert config.batch_archs == 10
        assert config.clip_epsilon == 0.2
        assert math.isclose(config.lr, 3.5e-4)

    def test_invalid(self):
        """Test out-of-range values raise ConfigError."""
        with pytest.raises(ConfigError):
            PolicyConfig.from_dict({"clip_epsilon": 1.5})

    def test_sample_batch_sequences(self):
        """Test token rows convert to plain lists."""
        batch = SampleBatch(np.array([[1, 2], [3, 4]]), np.zeros((2, 2)))
        assert batch.sequences() == [[1, 2], [3, 4]]
        assert len(batch) == 2
