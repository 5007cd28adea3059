#!/usr/bin/env python3
"""
DECODER SEARCH CLI
==================

    decoder-search prepare   --plan toy.toml
    decoder-search search    --plan toy.toml --seed 7 --jobs 4
    decoder-search eval-arch --plan toy.toml --stage FPN --tokens 0,1,3,3,0,...
    decoder-search cost      --tokens <42 ints> --hw 1088x800
    decoder-search report    --plan toy.toml --out reports/
    decoder-search correlate --plan toy.toml --out reports/
    decoder-search ablate    --plan toy.toml --modes reward,deform
    decoder-search worker    --plan toy.toml --connect 10.0.0.2:7788

Exit codes: 0 ok, 1 unexpected, 3 config, 4 cache, 5 tokens, 6 dispatch,
7 checkpoint, 8 divergence, 9 graph.
"""

import argparse
import asyncio
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from .cost_model import compare, config_cost, head_cost, original_cost
from .decoder_graph import DecoderWidths
from .detection_toyland import export_annotations_json
from .dispatcher import EvalRequest, RemoteEvaluator, run_worker
from .errors import ConfigError, DecoderSearchError
from .orchestrator import (
    EvaluationContext,
    ablation_modes,
    correlation_study,
    evaluate_job,
    prepare_backbone,
    run_directory,
    run_progressive_search,
)
from .plan import SearchPlan, apply_overrides, job_seed, load_plan
from .reports import write_correlation, write_report
from .search_log import read_log
from .search_space import REFERENCE_SEARCHED_HEAD, TOTAL_TOKENS, decode, pretty

logger = logging.getLogger(__name__)


# ============================================================================
# ARGUMENT HELPERS
# ============================================================================

def parse_tokens(values: Sequence[str]) -> List[int]:
    """Accept `1 2 3`, `1,2,3` or a mix."""
    tokens = []
    for value in values:
        for part in value.replace(",", " ").split():
            try:
                tokens.append(int(part))
            except ValueError as e:
                raise ConfigError(f"Token '{part}' is not an integer") from e
    return tokens


def parse_hw(value: str) -> Tuple[int, int]:
    """`WxH` as in 1088x800 -> (H, W)."""
    try:
        width, height = (int(v) for v in value.lower().split("x"))
    except ValueError as e:
        raise ConfigError(f"Image size '{value}' is not of the form WIDTHxHEIGHT") from e
    return height, width


def parse_address(value: str) -> Tuple[str, int]:
    host, _, port = value.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError as e:
        raise ConfigError(f"Address '{value}' is not of the form HOST:PORT") from e


def resolve_plan(args: argparse.Namespace) -> SearchPlan:
    plan = load_plan(args.plan) if args.plan else SearchPlan()
    return apply_overrides(plan, args.set or (), seed=args.seed, jobs=args.jobs, workdir=args.workdir)


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _latest_state(plan: SearchPlan) -> dict:
    state_path = run_directory(plan, plan.resolved_workdir()) / "state.json"
    if not state_path.exists():
        raise ConfigError(f"No search state at {state_path}; run `search` with this plan first")
    return json.loads(state_path.read_text())


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_prepare(args: argparse.Namespace) -> int:
    plan = resolve_plan(args)
    prepared = prepare_backbone(plan)
    if args.export_annotations:
        export_annotations_json(prepared.images, args.export_annotations)
    _print_json({"workdir": str(plan.resolved_workdir()), "feature_cache": prepared.cache_id,
                 "backbone_hash": prepared.backbone_hash, "images": len(prepared.images)})
    return 0


def cmd_search(args: argparse.Namespace) -> int:
    plan = resolve_plan(args)
    if args.serve:
        host, port = parse_address(args.serve)
        with RemoteEvaluator(plan.plan_hash(), host, port, timeout_factor=plan.job_timeout_factor,
                             min_timeout=plan.min_job_timeout,
                             no_worker_timeout=plan.no_worker_timeout) as evaluator:
            logger.info(f"Waiting for workers on {evaluator.address[0]}:{evaluator.address[1]}")
            result = run_progressive_search(plan, evaluator, resume=not args.restart)
    else:
        result = run_progressive_search(plan, resume=not args.restart)
    if args.log:
        shutil.copyfile(result.log_path, args.log)
    _print_json(result.to_dict())
    return 0


def cmd_eval_arch(args: argparse.Namespace) -> int:
    plan = resolve_plan(args)
    tokens = parse_tokens(args.tokens)
    stage = args.stage.upper()
    cache_id = args.cache_id
    if cache_id is None:
        cache_id = _latest_state(plan)["prefetch_cache_id"] if stage == "HEAD" else prepare_backbone(plan).cache_id
    job_id = f"EVAL-{stage}-{'-'.join(str(t) for t in tokens)}"
    request = EvalRequest(job_id, stage, tokens, job_seed(plan.seed, job_id), plan.plan_hash(), cache_id)
    result = evaluate_job(request, EvaluationContext(plan))
    _print_json(result.to_dict())
    return 0 if result.status == "ok" else 8


def cmd_cost(args: argparse.Namespace) -> int:
    plan = resolve_plan(args)
    hw = parse_hw(args.hw)
    fpn_width = args.fpn_width or plan.fpn_width
    head_width = args.head_width or plan.head_width
    num_classes = args.classes or plan.num_classes
    widths = DecoderWidths(fpn_width, head_width)
    channels = plan.backbone_channels

    reports = {}
    if args.tokens:
        tokens = parse_tokens(args.tokens)
        if len(tokens) != TOTAL_TOKENS:
            raise ConfigError(f"cost needs {TOTAL_TOKENS} tokens, got {len(tokens)}")
        config = decode(tokens)
        reports["searched"] = config_cost(config, hw, widths, num_classes, channels)
        print(pretty(config))
    if args.original:
        reports["original"] = original_cost(hw, widths, num_classes, channels)
        reports["deform_fpn"] = original_cost(hw, widths, num_classes, channels, deformable_fpn=True)
    if args.heads:
        reports["reference_head"] = head_cost(REFERENCE_SEARCHED_HEAD, hw, head_width, num_classes, channels)
        reports["original_head"] = head_cost(None, hw, head_width, num_classes, channels)
    if not reports:
        raise ConfigError("cost needs --tokens, --original or --heads")

    for name, report in reports.items():
        print(f"{name}: {report.summary()}")
        print(report.table())
        if args.csv:
            target = Path(args.csv)
            report.to_csv(target if len(reports) == 1 else target.with_name(f"{target.stem}_{name}{target.suffix}"))
    if len(reports) > 1:
        print(compare(reports).to_string())
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    plan = resolve_plan(args)
    log_path = Path(args.log) if args.log else run_directory(plan, plan.resolved_workdir()) / "search.jsonl"
    if not log_path.exists():
        raise ConfigError(f"Search log {log_path} not found")
    outputs = write_report(log_path, args.out, window=args.window)
    _print_json({name: str(path) for name, path in outputs.items()})
    return 0


def cmd_correlate(args: argparse.Namespace) -> int:
    plan = resolve_plan(args)
    log_path = Path(args.log) if args.log else run_directory(plan, plan.resolved_workdir()) / "search.jsonl"
    if not log_path.exists():
        raise ConfigError(f"Search log {log_path} not found")
    _, records = read_log(log_path)
    stage = args.stage.upper()
    cache_id = _latest_state(plan)["prefetch_cache_id"] if stage == "HEAD" else None
    result = correlation_study(plan, records, n=args.n, long_budget=args.budget, stage=stage, cache_id=cache_id)
    outputs = write_correlation(result, args.out)
    _print_json({**result.to_dict(), **{name: str(path) for name, path in outputs.items()}})
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    plan = resolve_plan(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    report = ablation_modes(plan, modes=modes, top=args.top)
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    _print_json(report.to_dict())
    return 0


def cmd_worker(args: argparse.Namespace) -> int:
    plan = resolve_plan(args)
    host, port = parse_address(args.connect)
    context = EvaluationContext(plan)
    completed = asyncio.run(run_worker(host, port, plan.plan_hash(), context.evaluate, args.worker_id))
    logger.info(f"Worker done ({completed} jobs)")
    return 0


# ============================================================================
# PARSER
# ============================================================================

def build_arg_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    common.add_argument("--plan", help="Plan file (.toml or .json); defaults apply when omitted")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a plan value (repeatable)")
    common.add_argument("--seed", type=int, help="Override plan seed")
    common.add_argument("--jobs", type=int, help="Local parallel evaluations")
    common.add_argument("--workdir", help="Cache/run directory (else $DECODER_SEARCH_CACHE, else ./.decoder_search)")

    parser = argparse.ArgumentParser(prog="decoder-search", description="Progressive RL search of detection decoders")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="Build dataset, backbone and feature cache")
    p.add_argument("--export-annotations", metavar="PATH", help="Also write annotations as JSON")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("search", parents=[common], help="Run the progressive search")
    p.add_argument("--serve", metavar="HOST:PORT", help="Evaluate on remote workers instead of locally")
    p.add_argument("--restart", action="store_true", help="Ignore any checkpointed progress")
    p.add_argument("--log", metavar="PATH", help="Copy the final search log here")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval-arch", parents=[common], help="Evaluate one token sequence on the proxy task")
    p.add_argument("--stage", choices=["FPN", "HEAD", "FULL", "fpn", "head", "full"], default="FPN")
    p.add_argument("--tokens", nargs="+", required=True)
    p.add_argument("--cache-id", help="Feature cache file name inside the workdir")
    p.set_defaults(func=cmd_eval_arch)

    p = sub.add_parser("cost", parents=[common], help="Analytic MACs/params of decoders")
    p.add_argument("--tokens", nargs="+", help=f"{TOTAL_TOKENS} tokens of a full decoder")
    p.add_argument("--hw", default="128x128", help="Input image WIDTHxHEIGHT")
    p.add_argument("--fpn-width", type=int)
    p.add_argument("--head-width", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--original", action="store_true", help="Include the original and deformable-FPN decoders")
    p.add_argument("--heads", action="store_true", help="Compare the reference searched head with the original")
    p.add_argument("--csv", help="Write the per-node breakdown as CSV")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("report", parents=[common], help="Reward and sharing trends as CSV/SVG")
    p.add_argument("--log", help="Search log (default: the plan's run directory)")
    p.add_argument("--out", default="reports")
    p.add_argument("--window", type=int, default=50)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("correlate", parents=[common], help="Rank-correlate proxy reward with long-budget toy AP")
    p.add_argument("--log", help="Search log (default: the plan's run directory)")
    p.add_argument("--stage", choices=["FPN", "HEAD", "fpn", "head"], default="FPN")
    p.add_argument("--n", type=int, help="Architectures to retrain")
    p.add_argument("--budget", type=int, help="Long-budget iterations")
    p.add_argument("--out", default="reports")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("ablate", parents=[common], help="Reward-mode, search-space and deformable-FPN ablations")
    p.add_argument("--modes", default="reward,space,deform")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--out", help="Write the report as JSON")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("worker", parents=[common], help="Join a coordinator and evaluate jobs")
    p.add_argument("--connect", required=True, metavar="HOST:PORT")
    p.add_argument("--worker-id")
    p.set_defaults(func=cmd_worker)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_arg_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DecoderSearchError as e:
        logger.error(str(e))
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("Interrupted; progress up to the last completed batch is checkpointed")
        return 130
    except Exception:
        logger.exception(f"Unexpected failure in '{args.command}'")
        return 1


if __name__ == "__main__":
    sys.exit(main())
