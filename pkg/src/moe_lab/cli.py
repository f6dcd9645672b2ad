"""Command-line entry point.

    train <config>                       train one RunConfig
    plan-budget                          dense budget and MoE token allocation
    simulate-sharding <config> --mesh    per-tensor shards, memory, comm, step time
    compare-sharding <config>            naive-2d / padded-2d / 3d side by side
    grad-check <config>                  finite-difference check of the training loss
    route-bench                          routing pipeline on seeded random logits
    tradeoff <runs-dir>                  step time vs final eval loss per run
    experiment                           the toy speed-accuracy DAG

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from typing import Sequence

import numpy as np

from . import debug
from .autograd import GraphError
from .budget import BUDGET_REFERENCES, dense_budget, moe_token_allocation, plan_reference
from .config import load_run_config, validate_environment
from .io import save_json
from .mesh import (
    PRESET_BATCH_TOKENS,
    STRATEGIES,
    DeviceProfile,
    MeshSpec,
    ShardingError,
    align_to_mesh,
    compare_strategies,
    preset_config,
    sharding_report,
    validate_mesh,
)
from .model import ModelConfig
from .optim import NonFiniteGradientError
from .routing import RouterConfig, RoutingError, route
from .tensor import Tensor, TensorError
from .trainer import TrainingDivergedError, grad_check_run, train, write_tradeoff

DOMAIN_ERRORS = (
    ValueError,
    TensorError,
    GraphError,
    RoutingError,
    ShardingError,
    NonFiniteGradientError,
    TrainingDivergedError,
    FileNotFoundError,
    RuntimeError,
)


def _model_source(args) -> tuple[ModelConfig, int]:
    """(model config, default batch tokens) from a RunConfig file or a preset."""
    if args.preset:
        return preset_config(args.preset, args.experts), PRESET_BATCH_TOKENS
    if not args.config:
        raise ValueError("pass a config file or --preset")
    run = load_run_config(args.config)
    return run.model, run.batch_tokens


# =============================================================================
# Commands
# =============================================================================

def cmd_train(args) -> int:
    run = load_run_config(args.config)
    overrides = {}
    if args.out_dir:
        overrides["out_dir"] = args.out_dir
    if args.timing:
        overrides["timing"] = args.timing
    if overrides:
        run = dataclasses.replace(run, **overrides)
    result = train(run)
    s = result.summary
    print(f"[train] {run.name} finished: eval loss {s['final_eval_loss']:.4f} "
          f"(uniform {s['uniform_loss']:.4f}, entropy floor {s['entropy_rate']:.4f})")
    return 0


def _print_budget_rows(rows) -> None:
    budget = rows[0].budget
    print(f"[budget] dense {budget.dense_params / 1e9:g}B params: {budget.dense_tokens / 1e9:g}B tokens, "
          f"{budget.dense_steps} steps x {float(budget.dense_step_time):g} s = {float(budget.budget_seconds):g} s")
    for row in rows:
        plan = row.plan
        line = (f"  {row.moe}: {float(plan.moe_step_time):g} s/step -> {plan.moe_steps} steps, "
                f"{plan.moe_tokens / 1e9:.1f}B tokens")
        if row.reported_tokens:
            line += f" (reported {row.reported_tokens / 1e9:g}B, {row.relative_error:.2%} off)"
        print(line)


def cmd_plan_budget(args) -> int:
    if args.reference:
        rows = plan_reference(args.reference)
        _print_budget_rows(rows)
        if args.json:
            print(json.dumps([r.to_dict() for r in rows], indent=2))
        return 0
    if args.params is None or args.batch is None or args.step_time is None:
        raise ValueError("plan-budget needs --params, --batch and --step-time (or --reference)")
    budget = dense_budget(args.params, args.batch, args.step_time)
    print(f"[budget] dense {float(budget.dense_params) / 1e9:g}B params: {budget.dense_tokens / 1e9:g}B tokens, "
          f"{budget.dense_steps} steps x {float(budget.dense_step_time):g} s = {float(budget.budget_seconds):g} s")
    out = {"budget": budget.to_dict(), "moe": []}
    for step_time in args.moe_step_time or []:
        plan = moe_token_allocation(budget, step_time)
        print(f"  moe {float(plan.moe_step_time):g} s/step -> {plan.moe_steps} steps, {plan.moe_tokens / 1e9:.1f}B tokens")
        out["moe"].append(plan.to_dict())
    if args.json:
        print(json.dumps(out, indent=2))
    return 0


def cmd_simulate(args) -> int:
    cfg, batch = _model_source(args)
    batch = args.batch_tokens or batch
    mesh = MeshSpec.parse(args.mesh)
    devices = args.devices or mesh.devices
    errors = validate_mesh(
        align_to_mesh(cfg, mesh, args.strategy), mesh, devices=devices, batch_tokens=batch, strategy=args.strategy
    )
    if errors:
        raise ShardingError("invalid mesh: " + "; ".join(errors))
    report = sharding_report(cfg, mesh, args.strategy, DeviceProfile(), batch)
    step = report["step"]
    print(f"[sim] {args.strategy} on mesh {mesh} ({mesh.devices} devices), {batch} tokens/step")
    print(f"  compute {step['compute_seconds']:.4f} s, comm "
          + ", ".join(f"{k} {v:.4f} s" for k, v in step["comm_seconds"].items())
          + f", total {step['total_seconds']:.4f} s")
    print(f"  memory per device {step['memory_bytes']['total'] / 1e9:.3f} GB")
    if args.out:
        save_json(report, args.out)
        print(f"  -> Saved {args.out}")
    return 0


def cmd_compare(args) -> int:
    cfg, batch = _model_source(args)
    batch = args.batch_tokens or batch
    comparison = compare_strategies(cfg, args.devices, DeviceProfile(), batch)
    print(f"[sim] strategies on {args.devices} devices, {batch} tokens/step (slowest first)")
    for name in comparison.ordered:
        r = comparison.results[name]
        print(f"  {name:<10} mesh {r.mesh}  step {r.step_seconds:.4f} s  params {r.params_total / 1e9:.2f}B")
    if args.out:
        save_json(comparison.to_dict(), args.out)
        print(f"  -> Saved {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    run = load_run_config(args.config)
    report = grad_check_run(run, samples=args.samples, seed=args.seed, floor=args.floor)
    status = "passed" if report.passed(args.tolerance) else "FAILED"
    print(f"[grad-check] {run.name}: {status}, max rel error {report.max_rel_error:.3e} "
          f"over {report.checked} elements (worst {report.worst_leaf}{list(report.worst_index or [])})")
    return 0 if report.passed(args.tolerance) else 1


def route_bench(
    experts: int,
    tokens: int,
    top_k: int = 2,
    capacity_factor: float = 2.0,
    policy: str = "naive-second-best",
    seed: int = 0,
    repeats: int = 5,
) -> dict:
    """Routing over seeded N(0, 1) logits: drop fraction, max load, microseconds per token."""
    cfg = RouterConfig(num_experts=experts, top_k=top_k, capacity_factor=capacity_factor, second_choice_policy=policy)
    logits = Tensor.wrap(np.random.default_rng(seed).standard_normal((1, 1, tokens, experts)), ("o", "g", "s", "e"))
    outcome = None
    started = time.perf_counter()
    for i in range(repeats):
        outcome = route(logits, cfg, rng=np.random.default_rng([seed, i]))
    elapsed = time.perf_counter() - started
    return {
        "experts": experts,
        "tokens": tokens,
        "capacity": outcome.capacity,
        "dropped_fraction": outcome.stats.dropped_fraction,
        "max_load": outcome.stats.max_load,
        "microseconds_per_token": elapsed / repeats / tokens * 1e6,
    }


def cmd_route_bench(args) -> int:
    r = route_bench(args.experts, args.tokens, args.top_k, args.capacity_factor, args.policy, args.seed, args.repeats)
    print(f"[route] E={r['experts']} S={r['tokens']} capacity {r['capacity']}: dropped {r['dropped_fraction']:.4f}, "
          f"max load {r['max_load']}, {r['microseconds_per_token']:.2f} us/token")
    return 0


def cmd_tradeoff(args) -> int:
    df, uri = write_tradeoff(args.runs_dir, args.out)
    print(f"[tradeoff] {len(df)} runs")
    for row in df.itertuples():
        print(f"  {row.run:<28} {row.step_seconds:.5f} s/step  eval {row.final_eval_loss:.4f}")
    print(f"  -> Saved {uri}")
    return 0


def cmd_experiment(args) -> int:
    from .orchestrator import load_nodes

    load_nodes(args.nodes_dir).run()
    return 0


# =============================================================================
# Parser
# =============================================================================

def _add_model_source(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="RunConfig JSON (or a name in CONFIGS_DIR)")
    p.add_argument("--preset", choices=["1.6b-moe", "1.6b-dense", "6.4b-dense"])
    p.add_argument("--experts", type=int, default=64, help="expert count for presets")
    p.add_argument("--batch-tokens", type=int)
    p.add_argument("--out", help="write the JSON report here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moe-steptime", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one RunConfig")
    p.add_argument("config")
    p.add_argument("--out-dir")
    p.add_argument("--timing", choices=["wall", "model"])
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("plan-budget", help="dense budget and MoE token allocation")
    p.add_argument("--params", type=str)
    p.add_argument("--batch", type=str)
    p.add_argument("--step-time", type=str)
    p.add_argument("--moe-step-time", type=str, action="append")
    p.add_argument("--reference", choices=sorted(BUDGET_REFERENCES))
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_plan_budget)

    p = sub.add_parser("simulate-sharding", help="simulate one mesh and strategy")
    _add_model_source(p)
    p.add_argument("--mesh", required=True, help="D,E,M")
    p.add_argument("--strategy", choices=STRATEGIES, default="3d")
    p.add_argument("--devices", type=int, help="available devices (default: mesh product)")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("compare-sharding", help="compare naive-2d, padded-2d and 3d")
    _add_model_source(p)
    p.add_argument("--devices", type=int, default=256)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("grad-check", help="finite-difference check of the training loss")
    p.add_argument("config")
    p.add_argument("--samples", type=int, default=8, help="elements checked per parameter")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--floor", type=float, default=1e-4, help="smallest gradient magnitude for relative error")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("route-bench", help="benchmark the routing pipeline")
    p.add_argument("--experts", type=int, required=True)
    p.add_argument("--tokens", type=int, required=True)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--capacity-factor", type=float, default=2.0)
    p.add_argument("--policy", choices=["naive-second-best", "random-proportional"], default="naive-second-best")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(fn=cmd_route_bench)

    p = sub.add_parser("tradeoff", help="step time vs final eval loss per run")
    p.add_argument("runs_dir")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_tradeoff)

    p = sub.add_parser("experiment", help="run the toy speed-accuracy DAG")
    p.add_argument("--nodes-dir")
    p.set_defaults(fn=cmd_experiment)
    return parser


def cli_dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    debug.log_run_start(args.command)
    try:
        validate_environment()
        code = args.fn(args)
    except DOMAIN_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        debug.log_run_end(args.command, "failed", e)
        return 1
    debug.log_run_end(args.command, "completed" if code == 0 else "failed")
    return code
