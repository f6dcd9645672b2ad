"""Toy training runs: Markov corpus, AdamW + cosine schedule, metrics CSV, checkpoint.

A run directory holds:
    config.json       the resolved RunConfig
    metrics.csv       one row per evaluation (fixed header, see io.METRICS_COLUMNS)
    checkpoint.bin/.json
    summary.json      final losses, entropy floor, parameter counts
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import pyarrow as pa

from . import debug
from .autograd import GradGraph, backward, grad_check
from .config import RunConfig, get_fs, join_uri, run_config_to_dict
from .corpus import Corpus, build_corpus, eval_batches, sample_batch
from .io import append_metrics_row, load_metrics, save_checkpoint, save_json, save_table_csv
from .mesh import DeviceProfile, MeshSpec, estimate_step_time
from .model import ModelParams, build_model, count_params, evaluate_loss, forward, leaves_from_params, lm_loss
from .optim import AdamWState, NonFiniteGradientError, adamw_step, lr_at


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, reason: str):
        self.step = step
        super().__init__(f"training diverged at step {step}: {reason}")


@dataclass
class MetricsRow:
    step: int
    train_loss: float
    eval_loss: float
    balance_loss: float
    z_loss: float
    dropped_fraction: float
    tokens_seen: int
    wall_seconds_per_step: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class StepResult:
    loss: float
    cross_entropy: float
    balance: float
    z: float
    dropped_fraction: float
    grads: dict[str, np.ndarray]
    max_loads: dict[int, int] = field(default_factory=dict)


@dataclass
class TrainResult:
    run: RunConfig
    params: ModelParams
    rows: list[MetricsRow]
    metrics_uri: str
    checkpoint_stem: str
    summary: dict


def loss_and_grads(
    params: ModelParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    rng: np.random.Generator | None = None,
) -> StepResult:
    cfg = params.config
    graph = GradGraph()
    leaves = leaves_from_params(graph, params)
    out = forward(graph, leaves, inputs, cfg, training=True, rng=rng)
    terms = lm_loss(graph, out.logits, targets, out.balance, out.z, cfg)
    grads = backward(graph, terms.total)
    dropped = [o.stats.dropped_fraction for o in out.outcomes.values()]
    return StepResult(
        loss=terms.total.item(),
        cross_entropy=terms.cross_entropy.item(),
        balance=terms.balance.item() if terms.balance is not None else 0.0,
        z=terms.z.item() if terms.z is not None else 0.0,
        dropped_fraction=float(np.mean(dropped)) if dropped else 0.0,
        grads=grads,
        max_loads={layer: o.stats.max_load for layer, o in out.outcomes.items()},
    )


def model_step_seconds(run: RunConfig, profile: DeviceProfile | None = None) -> float:
    """Single-device analytical step time, the `timing: model` stand-in for wall clock."""
    return estimate_step_time(run.model, MeshSpec(1, 1, 1), profile or DeviceProfile(), run.batch_tokens).total_seconds


def evaluate(params: ModelParams, corpus: Corpus, run: RunConfig) -> dict[str, float]:
    """Mean forward-only losses over the fixed eval windows."""
    rng = np.random.default_rng([run.seed, 3])
    results = [
        evaluate_loss(params, inputs, targets, training=False, rng=rng)
        for inputs, targets in eval_batches(corpus.eval, run.sequences, run.model.seq_len, run.eval_batches)
    ]
    return {key: float(np.mean([r[key] for r in results])) for key in results[0]}


def _check_corpus(corpus: Corpus, run: RunConfig) -> None:
    need = run.sequences * (run.model.seq_len + 1)
    if len(corpus.eval) < need:
        raise ValueError(
            f"eval split has {len(corpus.eval)} tokens, one eval batch needs {need}; "
            "raise data.corpus_tokens or data.eval_fraction"
        )
    if len(corpus.train) < run.model.seq_len + 1:
        raise ValueError(f"train split has {len(corpus.train)} tokens, shorter than one sequence")


def train(run: RunConfig, verbose: bool = True) -> TrainResult:
    """Train one config end to end; deterministic in (config, seed) when timing is "model".

    Metrics rows are appended as they are produced, so a diverged run keeps
    every row written before the failure.
    """
    cfg = run.model
    run_dir = run.run_dir
    metrics_uri = join_uri(run_dir, "metrics.csv")
    stem = join_uri(run_dir, "checkpoint")

    corpus = build_corpus(run.data)
    _check_corpus(corpus, run)
    params = build_model(cfg, run.seed)
    state = AdamWState.zeros_like(params.arrays())
    batch_rng = np.random.default_rng([run.seed, 1])
    route_rng = np.random.default_rng([run.seed, 2])
    fixed_seconds = model_step_seconds(run) if run.timing == "model" else None

    fs = get_fs(metrics_uri)
    if fs.exists(metrics_uri):
        fs.rm(metrics_uri)
    save_json(run_config_to_dict(run), join_uri(run_dir, "config.json"))

    counts = count_params(cfg)
    total_steps = run.schedule.total_steps
    if verbose:
        print(f"[train] {run.name}: {total_steps} steps, {counts.total:,} params ({counts.activated:,} activated)")

    rows: list[MetricsRow] = []
    window: list[StepResult] = []
    window_seconds = 0.0
    for step in range(1, total_steps + 1):
        inputs, targets = sample_batch(corpus.train, run.sequences, cfg.seq_len, batch_rng)
        started = time.perf_counter()
        result = loss_and_grads(params, inputs, targets, route_rng)
        if not math.isfinite(result.loss):
            raise TrainingDivergedError(step, f"loss is {result.loss}")
        try:
            arrays, state = adamw_step(params.arrays(), result.grads, state, lr_at(step, run.schedule), run.optimizer)
        except NonFiniteGradientError as e:
            raise TrainingDivergedError(step, str(e)) from e
        params = params.with_arrays(arrays)
        window_seconds += time.perf_counter() - started
        window.append(result)

        if step % run.eval_every == 0 or step == total_steps:
            ev = evaluate(params, corpus, run)
            row = MetricsRow(
                step=step,
                train_loss=float(np.mean([r.cross_entropy for r in window])),
                eval_loss=ev["cross_entropy"],
                balance_loss=float(np.mean([r.balance for r in window])),
                z_loss=float(np.mean([r.z for r in window])),
                dropped_fraction=float(np.mean([r.dropped_fraction for r in window])),
                tokens_seen=step * run.batch_tokens,
                wall_seconds_per_step=fixed_seconds if fixed_seconds is not None else window_seconds / len(window),
            )
            append_metrics_row(metrics_uri, row.to_dict())
            rows.append(row)
            for layer, load in result.max_loads.items():
                debug.log_routing(run.name, step, layer, result.dropped_fraction, load, result.balance)
            if verbose:
                print(
                    f"  step {step:>6}  train {row.train_loss:.4f}  eval {row.eval_loss:.4f}"
                    f"  dropped {row.dropped_fraction:.3f}"
                )
            window, window_seconds = [], 0.0

    save_checkpoint(params.tensors, stem)
    entropy = corpus.entropy_rate
    final = rows[-1]
    summary = {
        "name": run.name,
        "steps": total_steps,
        "final_eval_loss": final.eval_loss,
        "final_train_loss": final.train_loss,
        "uniform_loss": math.log(cfg.vocab),
        "entropy_rate": entropy,
        "params_total": counts.total,
        "params_activated": counts.activated,
        "mean_step_seconds": float(np.mean([r.wall_seconds_per_step for r in rows])),
        "late_dropped_fraction": late_dropped_fraction(rows_to_table(rows)),
    }
    save_json(summary, join_uri(run_dir, "summary.json"))
    if verbose:
        print(f"  -> Saved {metrics_uri}")
        print(f"  -> Saved {stem}.bin")
    return TrainResult(run, params, rows, metrics_uri, stem, summary)


def rows_to_table(rows: list[MetricsRow]) -> pa.Table:
    return pa.Table.from_pylist([r.to_dict() for r in rows])


def late_dropped_fraction(table: pa.Table, fraction: float = 0.1) -> float:
    """Mean dropped_fraction over rows in the last `fraction` of training steps."""
    steps = table.column("step").to_pylist()
    dropped = table.column("dropped_fraction").to_pylist()
    cutoff = max(steps) * (1.0 - fraction)
    late = [d for s, d in zip(steps, dropped) if s > cutoff] or dropped[-1:]
    return float(np.mean(late))


# =============================================================================
# Trade-off table
# =============================================================================

def tradeoff_table(runs_dir: str) -> pd.DataFrame:
    """One row per run under `runs_dir`: mean step time and final eval loss, fastest first."""
    fs = get_fs(runs_dir)
    rows = []
    for path in sorted(fs.glob(join_uri(runs_dir, "*", "metrics.csv"))):
        uri = fs.unstrip_protocol(path) if "://" in runs_dir else path
        table = load_metrics(uri)
        steps = table.column("step").to_pylist()
        rows.append({
            "run": uri.rstrip("/").split("/")[-2],
            "step_seconds": float(np.mean(table.column("wall_seconds_per_step").to_pylist())),
            "final_eval_loss": float(table.column("eval_loss").to_pylist()[-1]),
            "final_dropped_fraction": float(table.column("dropped_fraction").to_pylist()[-1]),
            "steps": int(steps[-1]),
        })
    if not rows:
        raise ValueError(f"no runs with metrics.csv under {runs_dir}")
    return pd.DataFrame(rows).sort_values(["step_seconds", "run"], kind="stable").reset_index(drop=True)


def write_tradeoff(runs_dir: str, out_uri: str | None = None) -> tuple[pd.DataFrame, str]:
    df = tradeoff_table(runs_dir)
    out_uri = out_uri or join_uri(runs_dir, "tradeoff.csv")
    save_table_csv(df, out_uri)
    return df, out_uri


# =============================================================================
# Gradient check on a run config
# =============================================================================

def grad_check_run(
    run: RunConfig,
    samples: int | None = 8,
    sequences: int = 2,
    seed: int = 0,
    floor: float = 1e-4,
):
    """Finite-difference check of the full training loss on a seeded batch.

    Relative errors are taken against gradients of at least `floor`.
    """
    cfg = run.model
    corpus = build_corpus(run.data)
    inputs, targets = sample_batch(corpus.train, sequences * cfg.outer_batches * cfg.groups, cfg.seq_len, np.random.default_rng(seed))
    params = build_model(cfg, run.seed)

    def loss_fn(graph, leaves):
        # same draws on every evaluation so the differences see one routing
        out = forward(graph, leaves, inputs, cfg, training=True, rng=np.random.default_rng([run.seed, 3]))
        return lm_loss(graph, out.logits, targets, out.balance, out.z, cfg).total

    return grad_check(loss_fn, params.tensors, samples_per_leaf=samples, seed=seed, floor=floor)
