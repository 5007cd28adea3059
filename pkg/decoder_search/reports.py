#!/usr/bin/env python3
"""
SEARCH REPORTS
==============

Post-hoc tables and charts from a search log:

    reward_trend_<stage>.csv/.svg   reward per record + moving average
    sharing_trend.csv/.svg          fraction of fully shared heads per window
    correlation.csv/.svg            proxy reward against toy AP
    summary.json                    sign test of last window against first
"""

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from scipy.stats import binomtest  # noqa: E402

from .orchestrator import SHARING_WINDOW, CorrelationResult, sharing_trend  # noqa: E402
from .search_log import SearchRecord, read_log  # noqa: E402

logger = logging.getLogger(__name__)

TREND_WINDOW = 50
# no timestamp and a fixed id salt so identical logs give identical SVGs
_SVG_METADATA = {"Date": None}
_SVG_RC = {"svg.hashsalt": "decoder-search"}


def records_frame(records: Sequence[SearchRecord]) -> pd.DataFrame:
    rows = [{
        "seq": r.seq,
        "stage": r.stage,
        "batch": r.batch,
        "job_id": r.job_id,
        "reward": r.reward if math.isfinite(r.reward) else np.nan,
        "status": r.status,
        "macs": r.macs,
        "params": r.params,
        "share_from": r.share_from,
    } for r in records]
    columns = ["seq", "stage", "batch", "job_id", "reward", "status", "macs", "params", "share_from"]
    return pd.DataFrame(rows, columns=columns).sort_values("seq").reset_index(drop=True)


def reward_trend(records: Sequence[SearchRecord], window: int = TREND_WINDOW,
                 stage: Optional[str] = None) -> pd.DataFrame:
    frame = records_frame([r for r in records if stage is None or r.stage == stage])
    frame["moving_average"] = frame["reward"].rolling(window, min_periods=1).mean()
    return frame[["seq", "stage", "reward", "moving_average"]]


@dataclass
class SignTest:
    first_mean: float
    last_mean: float
    wins: int
    trials: int
    pvalue: float

    @property
    def improved(self) -> bool:
        return self.last_mean > self.first_mean


def sign_test(records: Sequence[SearchRecord], window: int = TREND_WINDOW) -> SignTest:
    """
    One-sided sign test: pair the i-th reward of the first window with the
    i-th of the last window and ask whether the last wins more than half.
    Ties and diverged records are dropped.
    """
    rewards = [r.reward for r in sorted(records, key=lambda r: r.seq)]
    window = min(window, len(rewards) // 2)
    if window == 0:
        return SignTest(math.nan, math.nan, 0, 0, 1.0)
    first, last = np.array(rewards[:window]), np.array(rewards[-window:])
    keep = np.isfinite(first) & np.isfinite(last) & (first != last)
    wins = int((last[keep] > first[keep]).sum())
    trials = int(keep.sum())
    pvalue = binomtest(wins, trials, 0.5, alternative="greater").pvalue if trials else 1.0
    return SignTest(_finite_mean(first), _finite_mean(last), wins, trials, float(pvalue))


def _finite_mean(values: np.ndarray) -> float:
    finite = values[np.isfinite(values)]
    return float(finite.mean()) if finite.size else math.nan


# ============================================================================
# CHARTS
# ============================================================================

def _save(fig, path: Path) -> Path:
    with plt.rc_context(_SVG_RC):
        fig.savefig(path, format="svg", metadata=_SVG_METADATA)
    plt.close(fig)
    return path


def plot_reward_trend(trend: pd.DataFrame, path: Union[str, Path], title: str = "Reward during search") -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(trend["seq"], trend["reward"], ".", alpha=0.3, label="reward")
    ax.plot(trend["seq"], trend["moving_average"], "-", linewidth=2, label="moving average")
    ax.set_xlabel("architecture")
    ax.set_ylabel("reward")
    ax.set_title(title)
    ax.legend()
    return _save(fig, Path(path))


def plot_sharing_trend(fractions: Sequence[float], path: Union[str, Path], window: int = SHARING_WINDOW) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(np.arange(1, len(fractions) + 1), fractions)
    ax.set_xlabel(f"period ({window} heads)")
    ax.set_ylabel("fully shared fraction")
    ax.set_ylim(0.0, 1.0)
    return _save(fig, Path(path))


def plot_correlation(result: CorrelationResult, path: Union[str, Path]) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(result.rewards, result.aps)
    ax.set_xlabel("proxy reward")
    ax.set_ylabel("toy AP")
    ax.set_title(f"Spearman rho = {result.rho:.3f}")
    return _save(fig, Path(path))


# ============================================================================
# REPORT FILES
# ============================================================================

def write_correlation(result: CorrelationResult, out_dir: Union[str, Path]) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "correlation.csv"
    pd.DataFrame({"job_id": result.job_ids, "reward": result.rewards, "toy_ap": result.aps}).to_csv(
        csv_path, index=False)
    return {"correlation_csv": csv_path, "correlation_svg": plot_correlation(result, out_dir / "correlation.svg")}


def write_report(log_path: Union[str, Path], out_dir: Union[str, Path],
                 window: int = TREND_WINDOW) -> Dict[str, Path]:
    """All report files for one log; returns name -> path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, records = read_log(log_path)
    outputs: Dict[str, Path] = {}
    summary: Dict[str, Dict] = {}

    for stage in sorted({r.stage for r in records}):
        stage_records = [r for r in records if r.stage == stage]
        trend = reward_trend(stage_records, window)
        name = stage.lower()
        csv_path = out_dir / f"reward_trend_{name}.csv"
        trend.to_csv(csv_path, index=False)
        outputs[f"reward_trend_{name}_csv"] = csv_path
        outputs[f"reward_trend_{name}_svg"] = plot_reward_trend(
            trend, out_dir / f"reward_trend_{name}.svg", f"{stage} reward during search")
        test = sign_test(stage_records, window)
        summary[stage] = {**asdict(test), "improved": test.improved, "records": len(stage_records)}
        logger.info(f"{stage}: moving average {test.first_mean:.4f} -> {test.last_mean:.4f}, "
                    f"sign test p={test.pvalue:.3g}")

    fractions = sharing_trend(records)
    if fractions:
        csv_path = out_dir / "sharing_trend.csv"
        pd.DataFrame({"period": np.arange(1, len(fractions) + 1), "fully_shared": fractions}).to_csv(
            csv_path, index=False)
        outputs["sharing_trend_csv"] = csv_path
        outputs["sharing_trend_svg"] = plot_sharing_trend(fractions, out_dir / "sharing_trend.svg")

    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default))
    outputs["summary"] = summary_path
    return outputs


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")
