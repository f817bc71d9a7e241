"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v``; the conftest summary hook
echoes one line per criterion at the end of the session. Every tolerance is
stated inline. The full-pipeline criteria (8 and 10) run the real CLI end to
end and take a few minutes.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from branchlab import gnn
from branchlab.bnb import Budget, DualTrace, dual_integral, solve
from branchlab.cli import main as cli_main
from branchlab.evaluation import evaluate_policy, select_best_checkpoint
from branchlab.instances import FAMILIES, InstanceFamilySpec, generate_instance
from branchlab.observation import BipartiteObservation
from branchlab.rules import HybridConfig, HybridExpertPolicy, STANDARD_POLICIES
from branchlab.selection import ReturnEntry, ReturnSet, EnvelopeConfig, compute_returns, select_top, train_envelope
from branchlab.simplex import SimplexSolver, LpStatus

from .conftest import make_instance, record_acceptance
from .oracles import brute_force_binary, lp_vertex_optimum, sign_test_p_value
from .test_gnn import collect_states, fd_gradient_check, random_observation
from .test_evaluation import build_loss_reward_divergence
from .test_selection import _episode

FIVE_POLICIES = (
    "most-infeasible", "pseudocost", "strong-branching",
    "active-constraint", "hybrid-expert",
)


def test_criterion_01_solver_exactness():
    """300 generated binary MILPs with n <= 12: every policy reaches the
    brute-force optimum within 1e-6, in under two minutes total."""
    started = time.time()
    budget = Budget(max_nodes=50_000)
    count = 0
    idx = 0
    while count < 300:
        family = FAMILIES[idx % 3]
        n = 6 + (idx % 7)               # 6..12
        m = 2 + (idx % 3)
        inst = generate_instance(
            InstanceFamilySpec(family, n=n, m=m, seed=1000 + idx, name=f"acc1_{idx}")
        )
        idx += 1
        if inst.num_vars > 12:
            continue
        expected, _ = brute_force_binary(inst)
        assert expected is not None
        for name in FIVE_POLICIES:
            result = solve(inst, STANDARD_POLICIES[name](), budget, seed=3,
                           record_episode=False)
            assert result.status.value == "optimal", (family, n, name)
            assert abs(result.incumbent_value - expected) <= 1e-6, (family, n, name)
        count += 1
    elapsed = time.time() - started
    assert elapsed < 120.0, f"exactness sweep took {elapsed:.1f}s"
    record_acceptance(
        f"criterion 1: solver exactness on {count} instances x 5 policies "
        f"({elapsed:.1f}s < 120s)"
    )


def test_criterion_02_lp_oracle_equivalence():
    """200 random LPs with n <= 6, m <= 4: simplex objective matches dense
    vertex enumeration within 1e-7."""
    rng = np.random.default_rng(515)
    worst = 0.0
    for k in range(200):
        n = int(rng.integers(1, 7))
        m = int(rng.integers(1, 5))
        A = np.round(rng.normal(0, 2, (m, n)), 3)
        c = np.round(rng.normal(0, 2, n), 3)
        l = np.round(rng.uniform(-3, 0, n), 3)
        u = l + np.round(rng.uniform(0.5, 4, n), 3)
        x0 = rng.uniform(l, u)
        b = np.round(A @ x0 + rng.uniform(0, 2, m), 3)      # feasible by construction
        inst = make_instance(f"acc2_{k}", c, A, b, l, u, 0)
        sol = SimplexSolver(inst).solve()
        expected = lp_vertex_optimum(c, A, b, l, u)
        assert sol.status is LpStatus.OPTIMAL
        assert expected is not None
        worst = max(worst, abs(sol.objective - expected))
    assert worst < 1e-7
    record_acceptance(f"criterion 2: LP vs vertex enumeration, worst gap {worst:.2e} < 1e-7")


def test_criterion_03_dual_integral_arithmetic():
    """The hand-integrated step trace yields 20 exactly; solved-at-root
    traces yield 0 exactly."""
    step = DualTrace(horizon=10.0, opt_value=5.0)
    step.append(0.0, 0.0)
    step.append(4.0, 5.0)
    assert dual_integral(step) == 20.0

    inst = make_instance("acc3", [1, 1], [[1, 1]], [2], [0, 0], [1, 1], 2)
    result = solve(inst, STANDARD_POLICIES["most-infeasible"](), Budget(max_nodes=10))
    assert len(result.episode.transitions) == 0
    assert result.dual_integral() == 0.0

    flat = DualTrace(horizon=10.0, opt_value=5.0)
    flat.append(3.0, 5.0)
    assert dual_integral(flat) == 0.0
    record_acceptance("criterion 3: dual-integral step trace = 20, root-solved = 0, exact")


def test_criterion_04_gradient_correctness():
    """Central finite differences on 50 random smooth coordinates per loss,
    relative error < 1e-4."""
    states = collect_states(count=5)
    params = gnn.init_params(0)
    worst_policy = fd_gradient_check(params, states, "policy", 50, seed=41)
    returns = np.linspace(-0.8, 1.4, len(states))
    values = np.array([gnn.forward_numpy(params, s[0])[1] for s in states])
    assert np.all(np.abs(values - returns) > 1e-3)   # margin from the envelope kink
    worst_value = fd_gradient_check(
        params, states, "value", 50, seed=42,
        returns=returns, penalty=1000.0, ridge=1e-4,
    )
    assert worst_policy < 1e-4
    assert worst_value < 1e-4
    record_acceptance(
        f"criterion 4: gradient checks, worst rel err policy {worst_policy:.2e}, "
        f"value {worst_value:.2e} < 1e-4"
    )


def test_criterion_05_gcnn_equivariance():
    """100 random variable permutations: logits permute, value invariant,
    both within 1e-6."""
    rng = np.random.default_rng(99)
    params = gnn.init_params(7)
    worst_logit, worst_value = 0.0, 0.0
    for _ in range(100):
        obs = random_observation(rng, n=int(rng.integers(3, 10)), m=int(rng.integers(1, 5)))
        logits, value = gnn.forward_numpy(params, obs)
        perm = rng.permutation(obs.num_vars)
        vf = np.zeros_like(obs.var_features)
        vf[perm] = obs.var_features
        permuted = BipartiteObservation(
            vf, obs.cons_features, obs.edge_row, perm[obs.edge_col], obs.edge_val
        )
        logits_p, value_p = gnn.forward_numpy(params, permuted)
        worst_logit = max(worst_logit, float(np.abs(logits_p[perm] - logits).max()))
        worst_value = max(worst_value, abs(value_p - value))
    assert worst_logit < 1e-6
    assert worst_value < 1e-6
    record_acceptance(
        f"criterion 5: equivariance over 100 permutations, worst logit dev "
        f"{worst_logit:.2e}, value dev {worst_value:.2e} < 1e-6"
    )


def test_criterion_06_bail_mechanics():
    """Return recursion exact; selection cardinality = ceil(15% m); envelope
    violations at K=1000 no worse than at K=1 on identical data and seed."""
    # exact recursion on synthetic episodes
    rng = np.random.default_rng(0)
    for trial in range(10):
        rewards = list(rng.normal(0, 4, size=int(rng.integers(1, 8))))
        gamma = float(rng.uniform(0, 1))
        rs = compute_returns([_episode(rewards, name=f"acc6_{trial}")], gamma)
        g = [e.G for e in rs.entries]
        for t in range(len(rewards) - 1):
            assert g[t] - (rewards[t] + gamma * g[t + 1]) == 0.0

    # cardinality at p = 15 across sizes
    for m in (100, 200, 7, 33):
        entries = [ReturnEntry(None, (0,), 0, G=float(i % 13), episode="e", t=i)
                   for i in range(m)]
        selected, _ = select_top(entries, np.ones(m), p=15.0)
        assert len(selected) == math.ceil(0.15 * m)

    # envelope dominance trend
    states = collect_states(count=8)
    rs = ReturnSet(
        [ReturnEntry(s[0], s[1], s[2], G=float(g), episode="e", t=t)
         for t, (s, g) in enumerate(zip(states, np.linspace(-1, 2, 8)))],
        gamma=1.0,
    )
    start = gnn.init_params(3)
    _, weak = train_envelope(
        rs, EnvelopeConfig(ridge=1e-4, penalty=1.0, epochs=60, lr=1e-3, seed=3),
        start=start.copy(),
    )
    _, strong = train_envelope(
        rs, EnvelopeConfig(ridge=1e-4, penalty=1000.0, epochs=60, lr=1e-3, seed=3),
        start=start.copy(),
    )
    assert strong.violation_fraction <= weak.violation_fraction
    record_acceptance(
        "criterion 6: return recursion exact, |D| = ceil(15% m), violations "
        f"K=1000 ({strong.violation_fraction:.3f}) <= K=1 ({weak.violation_fraction:.3f})"
    )


def test_criterion_07_hybrid_sampler_distribution():
    """With the dual bound held below the threshold, the pseudocost branch
    fires with frequency R0 +- 0.02 over 10,000 draws."""
    r0 = 0.5
    policy = HybridExpertPolicy(r0=r0, db0_mode="value", db0_value=math.inf)
    policy.config = HybridConfig(db0=math.inf, r0=r0)

    inst = generate_instance(InstanceFamilySpec("multi-knapsack", n=8, m=2, seed=3))
    solver = SimplexSolver(inst)
    lp = solver.solve()
    cands = tuple(j for j in range(inst.num_int) if 1e-6 < (lp.x[j] % 1.0) < 1 - 1e-6)
    assert cands

    class Ctx:
        pass

    ctx = Ctx()
    ctx.instance = inst
    ctx.lp = lp
    ctx.candidates = cands
    from branchlab.rules import PseudocostStore

    ctx.pseudocosts = PseudocostStore(inst.num_vars)
    ctx.rng = np.random.default_rng(2718)
    ctx.dual_bound = lp.objective          # <= DB0 = inf always
    draws = 10_000
    for _ in range(draws):
        policy.select(ctx)
    frac_pc = policy.rule_counts["pc"] / draws
    assert abs(frac_pc - r0) <= 0.02
    record_acceptance(
        f"criterion 7: hybrid PC frequency {frac_pc:.4f} within {r0} +- 0.02 over 10k draws"
    )


def _pipeline_overrides(root: Path, **extra) -> list[str]:
    values = {
        "run.root": str(root), "run.seed": "11",
        "family.name": "multi-knapsack", "family.n": "16", "family.m": "3",
        "family.train_count": "200", "family.valid_count": "40",
        "family.test_count": "50",
        "collect.max_nodes": "40", "collect.max_clock": "4000",
        "hybrid.db0_mode": "value", "hybrid.db0_value": "1e18", "hybrid.r0": "0.8",
        "select.epochs": "25",
        "train.epochs": "60", "train.checkpoint_every": "15",
        "eval.max_nodes": "2000", "eval.max_clock": "3000",
    }
    values.update({k: str(v) for k, v in extra.items()})
    args = []
    for k, v in values.items():
        args.extend(["--set", f"{k}={v}"])
    return args


def _read_rewards(path: Path) -> dict[str, float]:
    payload = json.loads(path.read_text())
    return {r["instance"]: r["cumulative_reward"] for r in payload["rows"]}


def test_criterion_08_learning_signal(tmp_path):
    """Full pipeline on 200 training instances of one family: the trained
    policy beats random branching on 50 held-out instances by a paired sign
    test at the 0.05 level, within 30 minutes."""
    started = time.time()
    root = tmp_path / "run"
    ov = _pipeline_overrides(root)
    for command in ("generate", "collect", "select", "train", "evaluate"):
        assert cli_main(ov + [command]) == 0, command

    reports = sorted((root / "reports").glob("eval_gcnn_*.json"))
    assert reports, "no trained-policy evaluation written"
    trained = _read_rewards(reports[0])
    random_rewards = _read_rewards(root / "reports" / "eval_random.json")
    assert set(trained) == set(random_rewards) and len(trained) == 50

    wins = sum(1 for k in trained if trained[k] > random_rewards[k])
    losses = sum(1 for k in trained if trained[k] < random_rewards[k])
    p_value = sign_test_p_value(wins, wins + losses)
    mean_trained = sum(trained.values()) / len(trained)
    mean_random = sum(random_rewards.values()) / len(random_rewards)
    elapsed = time.time() - started

    assert mean_trained > mean_random
    assert p_value < 0.05, f"sign test p={p_value:.4f} (W{wins}/L{losses})"
    assert elapsed < 1800.0, f"pipeline took {elapsed:.0f}s"
    record_acceptance(
        f"criterion 8: trained beats random W{wins}/L{losses}, sign test "
        f"p={p_value:.2e} < 0.05, mean {mean_trained:.1f} > {mean_random:.1f} "
        f"({elapsed:.0f}s < 1800s)"
    )


def test_criterion_09_remark2_observability(tmp_path):
    """Checkpoint selection reports loss and reward per checkpoint and picks
    by reward even when the loss ordering disagrees."""
    instances, checkpoints, mislabeled = build_loss_reward_divergence(tmp_path)
    budget = Budget(max_nodes=4000, max_clock=1500)
    best, table = select_best_checkpoint(
        checkpoints, instances, budget, valid_batch=mislabeled, seed=0
    )
    by_id = {e.checkpoint_id: e for e in table}
    for entry in table:
        assert math.isfinite(entry.valid_loss)
        assert math.isfinite(entry.mean_reward)
    assert by_id["bad"].valid_loss < by_id["good"].valid_loss
    assert by_id["good"].mean_reward > by_id["bad"].mean_reward
    assert best == "good"
    record_acceptance(
        "criterion 9: table shows loss and reward; selection by reward "
        f"(loss order bad<good, reward order good>bad, selected=good)"
    )


def test_criterion_10_determinism(tmp_path):
    """Two identical pipeline runs agree on the best checkpoint id and
    produce byte-identical evaluation reports, independent of worker count."""
    small = {
        "family.train_count": "12", "family.valid_count": "6",
        "family.test_count": "6", "collect.max_nodes": "25",
        "select.epochs": "6", "train.epochs": "8", "train.checkpoint_every": "4",
        "eval.max_nodes": "80", "eval.max_clock": "2500",
    }
    outputs = {}
    for tag, workers in (("a", 1), ("b", 2)):
        root = tmp_path / tag
        ov = _pipeline_overrides(root, **small, **{"eval.workers": workers})
        for command in ("generate", "collect", "select", "train", "evaluate"):
            assert cli_main(ov + [command]) == 0, (tag, command)
        table = json.loads((root / "reports" / "checkpoint_table.json").read_text())
        evals = {
            p.name: p.read_bytes() for p in sorted((root / "reports").glob("eval_*"))
        }
        outputs[tag] = (table["selected"], evals)

    best_a, evals_a = outputs["a"]
    best_b, evals_b = outputs["b"]
    assert best_a == best_b
    assert evals_a.keys() == evals_b.keys()
    for name in evals_a:
        assert evals_a[name] == evals_b[name], f"{name} differs between runs"
    record_acceptance(
        f"criterion 10: identical best checkpoint ({best_a}) and byte-identical "
        f"reports across reruns with workers 1 vs 2"
    )
