"""
Shared test fixtures for the decoder search engine.

Fixtures:
--------
- temp_output_dir: Scratch directory for files written by a test
- tiny_plan: Search plan small enough to prepare and search in seconds
- plan_factory: Builds further tiny plans with overrides
- prepared: Dataset, backbone and feature cache for tiny_plan
- tiny_task: ProxyTask loaded from the prepared feature cache
- toy_images: Handful of synthetic images at 64 px
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Make the package importable without installation
sys.path.insert(0, str(Path(__file__).parent.parent))

from decoder_search.controller import PolicyConfig  # noqa: E402
from decoder_search.detection_toyland import generate_dataset  # noqa: E402
from decoder_search.orchestrator import EvaluationContext, prepare_backbone  # noqa: E402
from decoder_search.plan import SearchPlan  # noqa: E402


# ============================================================================
# FILE SYSTEM
# ============================================================================

@pytest.fixture
def temp_output_dir(tmp_path):
    """Temporary directory for test outputs."""
    output = tmp_path / "output"
    output.mkdir()
    return output


# ============================================================================
# PLANS
# ============================================================================

def make_tiny_plan(workdir, **overrides) -> SearchPlan:
    """Plan with every budget cut down to a few iterations."""
    values = dict(
        seed=3,
        num_images=12,
        image_size=64,
        num_classes=2,
        meta_train_fraction=0.5,
        backbone_channels=(16, 16, 16),
        backbone_iterations=2,
        proxy_iterations=3,
        proxy_batch_size=4,
        eval_batch_size=8,
        fpn_width=16,
        head_width=16,
        prefetch_iterations=2,
        fpn_archs=4,
        head_archs=4,
        top_k_fpn=2,
        top_k_head=2,
        controller=PolicyConfig(hidden_size=16, embedding_size=8, batch_archs=2),
        correlation_samples=3,
        long_budget_iterations=3,
        min_job_timeout=60.0,
        workdir=str(workdir),
    )
    values.update(overrides)
    return SearchPlan(**values)


@pytest.fixture
def tiny_plan(tmp_path):
    """Tiny plan rooted in a fresh work directory."""
    return make_tiny_plan(tmp_path / "work")


@pytest.fixture
def plan_factory():
    """make_tiny_plan, for tests that need several plans."""
    return make_tiny_plan


@pytest.fixture
def prepared(tiny_plan):
    """Caches for tiny_plan."""
    return prepare_backbone(tiny_plan)


@pytest.fixture
def tiny_task(tiny_plan, prepared):
    """Backbone-feature proxy task for tiny_plan."""
    return EvaluationContext(tiny_plan).task(prepared.cache_id)


# ============================================================================
# DATA
# ============================================================================

@pytest.fixture
def toy_images():
    """Four deterministic 64 px images with three classes."""
    return generate_dataset(seed=11, n_images=4, image_size=64, num_classes=3)


@pytest.fixture
def rng():
    """Seeded generator for test inputs."""
    return np.random.default_rng(1234)
