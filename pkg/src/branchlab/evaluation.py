"""Parallel policy evaluation, checkpoint selection by reward, and reports.

Each instance is solved by an independent engine seeded from (seed, instance
name), so pseudo-clock results are identical for any worker count. Reports
order rows by instance name and serialize floats via repr, which makes the
JSON and CSV forms byte-stable across identical runs.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .bnb import Budget, solve
from .gnn import GcnnPolicy, load_checkpoint, policy_loss
from .instances import parse_instance, serialize_instance
from .rules import BranchingPolicy


@dataclass
class EvalRow:
    instance: str
    status: str
    dual_integral: float
    cumulative_reward: float
    reward_constant: float
    nodes: int
    clock_used: float
    lp_iterations: int
    trace: list[tuple[float, float]] = field(default_factory=list)
    horizon: float = 0.0
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.error == "" and math.isfinite(self.cumulative_reward)


@dataclass
class EvalReport:
    policy: str
    rows: list[EvalRow]
    fingerprint: dict

    def ok_rows(self) -> list[EvalRow]:
        return [r for r in self.rows if r.ok]

    def aggregate(self) -> dict:
        ok = self.ok_rows()
        if not ok:
            return {
                "instances": len(self.rows), "evaluated": 0,
                "mean_reward": math.nan, "median_reward": math.nan,
                "mean_integral": math.nan, "mean_nodes": math.nan,
            }
        rewards = [r.cumulative_reward for r in ok]
        return {
            "instances": len(self.rows),
            "evaluated": len(ok),
            "mean_reward": sum(rewards) / len(rewards),
            "median_reward": statistics.median(rewards),
            "mean_integral": sum(r.dual_integral for r in ok) / len(ok),
            "mean_nodes": sum(r.nodes for r in ok) / len(ok),
        }


def _evaluate_one(payload) -> EvalRow:
    text, policy, budget, seed = payload
    inst = parse_instance(text)
    try:
        result = solve(inst, policy, budget, seed=seed, record_episode=False)
        integral = result.dual_integral()
        reward = result.reward_constant - integral
        return EvalRow(
            instance=inst.name,
            status=result.status.value,
            dual_integral=integral,
            cumulative_reward=reward,
            reward_constant=result.reward_constant,
            nodes=result.nodes_processed,
            clock_used=result.clock_used,
            lp_iterations=result.lp_iterations,
            trace=list(result.trace.events),
            horizon=result.trace.horizon,
        )
    except Exception as exc:               # per-instance failures become error rows
        return EvalRow(
            instance=inst.name, status="error",
            dual_integral=math.nan, cumulative_reward=math.nan,
            reward_constant=math.nan, nodes=0, clock_used=0.0,
            lp_iterations=0, error=f"{type(exc).__name__}: {exc}",
        )


def evaluate_policy(
    policy: BranchingPolicy,
    instances: list,
    budget: Budget,
    workers: int = 1,
    seed: int = 0,
    fingerprint_extra: dict | None = None,
) -> EvalReport:
    """Solve every instance under the policy; failures become error rows."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    payloads = [(serialize_instance(inst), policy, budget, seed) for inst in instances]
    if workers == 1 or len(payloads) <= 1:
        rows = [_evaluate_one(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_evaluate_one, payloads))
    rows.sort(key=lambda r: r.instance)
    fingerprint = {
        "policy": policy.name,
        "seed": seed,
        "max_nodes": budget.max_nodes,
        "max_clock": budget.max_clock,
        "clock_mode": budget.clock_mode,
        "reproducible": budget.clock_mode == "pseudo",
    }
    if fingerprint_extra:
        fingerprint.update(fingerprint_extra)
    return EvalReport(policy=policy.name, rows=rows, fingerprint=fingerprint)


def report_to_json(report: EvalReport) -> str:
    payload = {
        "fingerprint": report.fingerprint,
        "aggregate": report.aggregate(),
        "rows": [
            {
                "instance": r.instance,
                "status": r.status,
                "dual_integral": r.dual_integral,
                "cumulative_reward": r.cumulative_reward,
                "reward_constant": r.reward_constant,
                "nodes": r.nodes,
                "clock_used": r.clock_used,
                "lp_iterations": r.lp_iterations,
                "horizon": r.horizon,
                "trace": r.trace,
                "error": r.error,
            }
            for r in report.rows
        ],
    }
    return json.dumps(payload, sort_keys=True, allow_nan=True)


def report_from_json(text: str) -> EvalReport:
    payload = json.loads(text)
    rows = [
        EvalRow(
            instance=d["instance"], status=d["status"],
            dual_integral=d["dual_integral"], cumulative_reward=d["cumulative_reward"],
            reward_constant=d["reward_constant"], nodes=d["nodes"],
            clock_used=d["clock_used"], lp_iterations=d["lp_iterations"],
            trace=[(c, z) for c, z in d.get("trace", [])],
            horizon=d.get("horizon", 0.0), error=d.get("error", ""),
        )
        for d in payload["rows"]
    ]
    return EvalReport(payload["fingerprint"]["policy"], rows, payload["fingerprint"])


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["instance", "status", "dual_integral", "cumulative_reward",
         "reward_constant", "nodes", "clock_used", "lp_iterations", "error"]
    )
    for r in report.rows:
        writer.writerow(
            [r.instance, r.status, repr(r.dual_integral), repr(r.cumulative_reward),
             repr(r.reward_constant), r.nodes, repr(r.clock_used), r.lp_iterations, r.error]
        )
    return buf.getvalue()


def plot_data_csv(row: EvalRow) -> str:
    """The (clock, bound) series of one instance for external plotting."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["clock", "dual_bound"])
    for c, z in row.trace:
        writer.writerow([repr(float(c)), repr(float(z))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Checkpoint selection: by mean cumulative reward, never by loss (the table
# still shows the loss so reward/loss divergence is observable).
# ---------------------------------------------------------------------------

@dataclass
class CheckpointEntry:
    checkpoint_id: str
    valid_loss: float
    mean_reward: float
    mean_integral: float
    report: EvalReport | None = None
    error: str = ""


def select_best_checkpoint(
    checkpoints: list[tuple[str, str | Path]],
    instances: list,
    budget: Budget,
    workers: int = 1,
    seed: int = 0,
    valid_batch=None,
) -> tuple[str, list[CheckpointEntry]]:
    """Evaluate every checkpoint and pick the highest mean cumulative reward.

    ``valid_batch`` (obs, cand, action) triples recompute the cross-entropy
    loss per checkpoint; otherwise the loss stored at save time is reported.
    Ties go to the later checkpoint. Raises if no checkpoint loads.
    """
    if not checkpoints:
        raise ValueError("no checkpoints given")
    table: list[CheckpointEntry] = []
    for cid, path in checkpoints:
        try:
            params = load_checkpoint(path)
        except Exception as exc:
            table.append(
                CheckpointEntry(cid, math.nan, -math.inf, math.nan,
                                error=f"{type(exc).__name__}: {exc}")
            )
            continue
        if valid_batch is not None:
            loss = policy_loss(params, valid_batch)
        else:
            loss = float(params.meta.get("valid_loss", math.nan))
        report = evaluate_policy(
            GcnnPolicy(params, name=cid), instances, budget, workers=workers, seed=seed
        )
        agg = report.aggregate()
        table.append(
            CheckpointEntry(cid, loss, agg["mean_reward"], agg["mean_integral"], report)
        )
    if all(e.error for e in table):
        raise RuntimeError("every checkpoint failed to load")
    best = None
    for entry in table:
        if entry.error:
            continue
        if best is None or entry.mean_reward >= best.mean_reward:
            best = entry
    return best.checkpoint_id, table


def checkpoint_table_json(best_id: str, table: list[CheckpointEntry]) -> str:
    return json.dumps(
        {
            "selected": best_id,
            "selection_criterion": "mean_cumulative_reward",
            "table": [
                {
                    "checkpoint": e.checkpoint_id,
                    "valid_loss": e.valid_loss,
                    "mean_reward": e.mean_reward,
                    "mean_integral": e.mean_integral,
                    "error": e.error,
                }
                for e in table
            ],
        },
        sort_keys=True,
        allow_nan=True,
    )


def compare_policies(
    policies: list[BranchingPolicy],
    instances: list,
    budget: Budget,
    workers: int = 1,
    seed: int = 0,
) -> list[dict]:
    """Leaderboard over the identical instance set and seeds, best reward first."""
    rows = []
    for policy in policies:
        report = evaluate_policy(policy, instances, budget, workers=workers, seed=seed)
        agg = report.aggregate()
        rows.append(
            {
                "policy": policy.name,
                "mean_reward": agg["mean_reward"],
                "median_reward": agg["median_reward"],
                "mean_integral": agg["mean_integral"],
                "mean_nodes": agg["mean_nodes"],
                "evaluated": agg["evaluated"],
                "report": report,
            }
        )
    rows.sort(key=lambda r: (-(r["mean_reward"] if math.isfinite(r["mean_reward"]) else -math.inf), r["policy"]))
    return rows
