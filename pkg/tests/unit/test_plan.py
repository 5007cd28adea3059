"""
Unit tests for search plan configuration.

Tests:
-----
- Defaults and validation
- TOML / JSON loading
- Command-line overrides
- Plan hashing and per-job seeds
"""

import json

import pytest

from decoder_search.errors import ConfigError
from decoder_search.plan import (
    CACHE_ENV_VAR,
    RewardMode,
    SearchPlan,
    SpaceMode,
    apply_overrides,
    job_seed,
    load_plan,
    plan_from_dict,
)


@pytest.mark.unit
class TestSearchPlan:
    """Test plan defaults and validation."""

    def test_defaults(self):
        """Test the default plan describes a progressive negative-loss search."""
        plan = SearchPlan()
        assert plan.search_space is SpaceMode.PROGRESSIVE
        assert plan.reward_mode is RewardMode.NEG_LOSS
        assert plan.fpn_norm == "bn"
        assert plan.controller.batch_archs == 10
        assert plan.split_sizes() == (700, 300)

    def test_top_k_exceeds_archs(self):
        """Test selecting more architectures than were evaluated."""
        with pytest.raises(ConfigError, match="top_k_fpn"):
            plan_from_dict({"fpn_archs": 5, "top_k_fpn": 6})

    def test_unknown_field(self):
        """Test misspelled keys are rejected."""
        with pytest.raises(ConfigError):
            plan_from_dict({"fpn_arch": 5})

    def test_empty_split(self):
        """Test a split that leaves meta-val empty."""
        with pytest.raises(ConfigError):
            plan_from_dict({"num_images": 4, "meta_train_fraction": 0.99})

    def test_workdir_from_environment(self, monkeypatch, tmp_path):
        """Test the cache directory falls back to the environment variable."""
        monkeypatch.setenv(CACHE_ENV_VAR, str(tmp_path / "cache"))
        assert SearchPlan().resolved_workdir() == tmp_path / "cache"
        assert SearchPlan(workdir=str(tmp_path / "explicit")).resolved_workdir() == tmp_path / "explicit"


@pytest.mark.unit
class TestLoading:
    """Test plan files."""

    def test_toml(self, temp_output_dir):
        """Test a TOML plan with a nested controller table."""
        temp_output_dir.mkdir(parents=True, exist_ok=True)
        path = temp_output_dir / "plan.toml"
        path.write_text('seed = 4\nsearch_space = "head"\n\n[controller]\nlr = 0.01\n')
        plan = load_plan(path)
        assert plan.seed == 4
        assert plan.search_space is SpaceMode.HEAD_ONLY
        assert plan.controller.lr == 0.01

    def test_json(self, temp_output_dir):
        """Test a JSON plan."""
        temp_output_dir.mkdir(parents=True, exist_ok=True)
        path = temp_output_dir / "plan.json"
        path.write_text(json.dumps({"reward_mode": "toy_ap", "fpn_norm": "gn"}))
        plan = load_plan(path)
        assert plan.reward_mode is RewardMode.TOY_AP
        assert plan.fpn_norm == "gn"

    def test_bad_suffix(self, temp_output_dir):
        """Test unsupported file types."""
        temp_output_dir.mkdir(parents=True, exist_ok=True)
        path = temp_output_dir / "plan.yaml"
        path.write_text("seed: 1\n")
        with pytest.raises(ConfigError):
            load_plan(path)

    def test_missing_file(self, temp_output_dir):
        """Test a missing plan file."""
        with pytest.raises(ConfigError, match="not found"):
            load_plan(temp_output_dir / "nothing.toml")

    def test_malformed_toml(self, temp_output_dir):
        """Test TOML syntax errors become ConfigError."""
        temp_output_dir.mkdir(parents=True, exist_ok=True)
        path = temp_output_dir / "plan.toml"
        path.write_text("seed = = 1\n")
        with pytest.raises(ConfigError):
            load_plan(path)


@pytest.mark.unit
class TestOverrides:
    """Test override application."""

    def test_dotted_and_keyword(self):
        """Test nested assignments and keyword fields."""
        plan = apply_overrides(SearchPlan(), ["controller.lr=0.002", "fpn_archs=40"], jobs=3, workdir=None)
        assert plan.controller.lr == 0.002
        assert plan.fpn_archs == 40
        assert plan.jobs == 3
        assert plan.workdir is None

    def test_string_values(self):
        """Test values that are not JSON are taken as strings."""
        plan = apply_overrides(SearchPlan(), ["search_space=fpn"])
        assert plan.search_space is SpaceMode.FPN_ONLY

    @pytest.mark.parametrize("assignment", ["fpn_archs", "seed.value=1"])
    def test_malformed(self, assignment):
        """Test assignments without '=' or with a non-nested dotted key."""
        with pytest.raises(ConfigError):
            apply_overrides(SearchPlan(), [assignment])

    def test_invalid_value(self):
        """Test overrides are validated."""
        with pytest.raises(ConfigError):
            apply_overrides(SearchPlan(), ["image_size=8"])


@pytest.mark.unit
class TestHashing:
    """Test plan identity."""

    def test_operational_fields_ignored(self):
        """Test jobs, workdir and log_timings do not change the hash."""
        base = SearchPlan()
        other = SearchPlan(jobs=8, workdir="/tmp/elsewhere", log_timings=True)
        assert base.plan_hash() == other.plan_hash()

    def test_semantic_fields_change_hash(self):
        """Test changing what is computed changes the hash."""
        assert SearchPlan().plan_hash() != SearchPlan(seed=1).plan_hash()
        assert SearchPlan().plan_hash() != apply_overrides(SearchPlan(), ["controller.lr=0.1"]).plan_hash()

    def test_job_seed(self):
        """Test per-job seeds are stable and distinct."""
        assert job_seed(0, "fpn-0001") == job_seed(0, "fpn-0001")
        assert job_seed(0, "fpn-0001") != job_seed(0, "fpn-0002")
        assert job_seed(0, "fpn-0001") != job_seed(1, "fpn-0001")
        assert 0 <= job_seed(7, "x") < 2 ** 32
