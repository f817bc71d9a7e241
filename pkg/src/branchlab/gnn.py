"""Bipartite graph-convolutional policy/value network.

One convolution round in two passes (variables to constraints, then
constraints back to variables), each message and update function a two-layer
perceptron with relu on the hidden layer. A per-variable head produces
branching logits that are masked to the candidate set; a mean-pooled scalar
head produces the state value used by the envelope fit.

Gradients come from the reverse-accumulation tape in :mod:`.autodiff`; the
plain-numpy forward mirrors the taped one and is used on the hot path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .observation import BipartiteObservation, CATALOG_VERSION, CONS_FEATURES, VAR_FEATURES
from .rules import BranchingPolicy

HIDDEN = 32
CHECKPOINT_FORMAT = 1

_SHAPES = {
    "emb_v_w": (VAR_FEATURES, HIDDEN), "emb_v_b": (HIDDEN,),
    "emb_c_w": (CONS_FEATURES, HIDDEN), "emb_c_b": (HIDDEN,),
    "gc_w_c": (HIDDEN, HIDDEN), "gc_w_v": (HIDDEN, HIDDEN), "gc_w_e": (1, HIDDEN),
    "gc_b1": (HIDDEN,), "gc_w2": (HIDDEN, HIDDEN), "gc_b2": (HIDDEN,),
    "fc_w_self": (HIDDEN, HIDDEN), "fc_w_agg": (HIDDEN, HIDDEN),
    "fc_b1": (HIDDEN,), "fc_w2": (HIDDEN, HIDDEN), "fc_b2": (HIDDEN,),
    "gv_w_c": (HIDDEN, HIDDEN), "gv_w_v": (HIDDEN, HIDDEN), "gv_w_e": (1, HIDDEN),
    "gv_b1": (HIDDEN,), "gv_w2": (HIDDEN, HIDDEN), "gv_b2": (HIDDEN,),
    "fv_w_self": (HIDDEN, HIDDEN), "fv_w_agg": (HIDDEN, HIDDEN),
    "fv_b1": (HIDDEN,), "fv_w2": (HIDDEN, HIDDEN), "fv_b2": (HIDDEN,),
    "pol_w": (HIDDEN, 1), "pol_b": (1,),
    "val_w": (HIDDEN, 1), "val_b": (1,),
}

PARAM_NAMES = tuple(sorted(_SHAPES))
WEIGHT_NAMES = tuple(n for n in PARAM_NAMES if "_w" in n)


class GcnnError(RuntimeError):
    pass


@dataclass
class GcnnParameters:
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def copy(self) -> "GcnnParameters":
        return GcnnParameters({k: v.copy() for k, v in self.arrays.items()}, dict(self.meta))

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}


def init_params(seed: int = 0, zero: bool = False) -> GcnnParameters:
    rng = np.random.default_rng([seed, 0x6E657477])
    arrays = {}
    for name in PARAM_NAMES:
        shape = _SHAPES[name]
        if zero or name.endswith("_b") or name.endswith("b1") or name.endswith("b2"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in, fan_out = shape[0], shape[-1]
            s = math.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-s, s, size=shape)
    meta = {
        "catalog_version": CATALOG_VERSION,
        "hidden": HIDDEN,
        "var_features": VAR_FEATURES,
        "cons_features": CONS_FEATURES,
        "seed": seed,
    }
    return GcnnParameters(arrays, meta)


def _check_widths(obs: BipartiteObservation) -> None:
    if obs.var_features.shape[1] != VAR_FEATURES:
        raise GcnnError(
            f"variable feature width {obs.var_features.shape[1]} != {VAR_FEATURES}"
        )
    if obs.cons_features.shape[0] and obs.cons_features.shape[1] != CONS_FEATURES:
        raise GcnnError(
            f"constraint feature width {obs.cons_features.shape[1]} != {CONS_FEATURES}"
        )


# ---------------------------------------------------------------------------
# Plain-numpy forward (hot path)
# ---------------------------------------------------------------------------

def forward_numpy(params: GcnnParameters, obs: BipartiteObservation) -> tuple[np.ndarray, float]:
    """Returns (per-variable logits, state value)."""
    _check_widths(obs)
    P = params.arrays
    n, m = obs.num_vars, obs.num_cons
    row, col = obs.edge_row, obs.edge_col
    ev = obs.edge_val.reshape(-1, 1)

    V0 = obs.var_features @ P["emb_v_w"] + P["emb_v_b"]
    C0 = obs.cons_features @ P["emb_c_w"] + P["emb_c_b"] if m else np.zeros((0, HIDDEN))

    h = np.maximum(C0[row] @ P["gc_w_c"] + V0[col] @ P["gc_w_v"] + ev @ P["gc_w_e"] + P["gc_b1"], 0.0)
    msg_c = h @ P["gc_w2"] + P["gc_b2"]
    agg_c = np.zeros((m, HIDDEN))
    np.add.at(agg_c, row, msg_c)
    C1 = np.maximum(C0 @ P["fc_w_self"] + agg_c @ P["fc_w_agg"] + P["fc_b1"], 0.0) @ P["fc_w2"] + P["fc_b2"]

    h2 = np.maximum(C1[row] @ P["gv_w_c"] + V0[col] @ P["gv_w_v"] + ev @ P["gv_w_e"] + P["gv_b1"], 0.0)
    msg_v = h2 @ P["gv_w2"] + P["gv_b2"]
    agg_v = np.zeros((n, HIDDEN))
    np.add.at(agg_v, col, msg_v)
    V1 = np.maximum(V0 @ P["fv_w_self"] + agg_v @ P["fv_w_agg"] + P["fv_b1"], 0.0) @ P["fv_w2"] + P["fv_b2"]

    logits = (V1 @ P["pol_w"] + P["pol_b"]).ravel()
    value = float((V1.mean(axis=0) @ P["val_w"] + P["val_b"])[0])
    return logits, value


def masked_probabilities(logits: np.ndarray, cand: tuple[int, ...]) -> np.ndarray:
    """Softmax over the candidate entries only, in candidate order."""
    z = logits[list(cand)]
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def predict_branch(params: GcnnParameters, obs: BipartiteObservation,
                   cand: tuple[int, ...]) -> int:
    """Argmax-logit candidate; ties resolve to the lowest variable index."""
    if len(cand) == 0:
        raise ValueError("empty candidate set")
    order = sorted(int(c) for c in cand)
    logits, _ = forward_numpy(params, obs)
    return order[int(np.argmax(logits[order]))]


# ---------------------------------------------------------------------------
# Taped forward and losses
# ---------------------------------------------------------------------------

def _wrap(params: GcnnParameters) -> dict[str, ad.Tensor]:
    return {k: ad.Tensor(v) for k, v in params.arrays.items()}


def _forward_tape(P: dict[str, ad.Tensor], obs: BipartiteObservation):
    _check_widths(obs)
    n, m = obs.num_vars, obs.num_cons
    row, col = obs.edge_row, obs.edge_col
    ev = ad.const(obs.edge_val.reshape(-1, 1))

    V0 = ad.add(ad.matmul(ad.const(obs.var_features), P["emb_v_w"]), P["emb_v_b"])
    C0 = ad.add(ad.matmul(ad.const(obs.cons_features), P["emb_c_w"]), P["emb_c_b"])

    pre = ad.add(
        ad.add(ad.matmul(ad.gather_rows(C0, row), P["gc_w_c"]),
               ad.matmul(ad.gather_rows(V0, col), P["gc_w_v"])),
        ad.add(ad.matmul(ev, P["gc_w_e"]), P["gc_b1"]),
    )
    msg_c = ad.add(ad.matmul(ad.relu(pre), P["gc_w2"]), P["gc_b2"])
    agg_c = ad.scatter_sum(msg_c, row, m)
    C1 = ad.add(
        ad.matmul(
            ad.relu(ad.add(ad.add(ad.matmul(C0, P["fc_w_self"]),
                                  ad.matmul(agg_c, P["fc_w_agg"])), P["fc_b1"])),
            P["fc_w2"],
        ),
        P["fc_b2"],
    )

    pre2 = ad.add(
        ad.add(ad.matmul(ad.gather_rows(C1, row), P["gv_w_c"]),
               ad.matmul(ad.gather_rows(V0, col), P["gv_w_v"])),
        ad.add(ad.matmul(ev, P["gv_w_e"]), P["gv_b1"]),
    )
    msg_v = ad.add(ad.matmul(ad.relu(pre2), P["gv_w2"]), P["gv_b2"])
    agg_v = ad.scatter_sum(msg_v, col, n)
    V1 = ad.add(
        ad.matmul(
            ad.relu(ad.add(ad.add(ad.matmul(V0, P["fv_w_self"]),
                                  ad.matmul(agg_v, P["fv_w_agg"])), P["fv_b1"])),
            P["fv_w2"],
        ),
        P["fv_b2"],
    )

    logits = ad.add(ad.matmul(V1, P["pol_w"]), P["pol_b"])     # (n, 1)
    value = ad.add(ad.matmul(ad.mean_rows(V1), P["val_w"]), P["val_b"])   # (1, 1)
    return logits, value


def _nll(logits: ad.Tensor, cand: tuple[int, ...], action: int) -> ad.Tensor:
    order = [int(c) for c in cand]
    z = ad.gather_rows(logits, np.asarray(order, dtype=np.int64))
    pos = order.index(int(action))
    return ad.sub(ad.logsumexp(z), ad.pick(z, pos))


def policy_loss_graph(P: dict[str, ad.Tensor], batch) -> ad.Tensor:
    """Mean negative log-probability of the expert actions (masked softmax)."""
    terms = []
    for obs, cand, action in batch:
        logits, _ = _forward_tape(P, obs)
        terms.append(_nll(logits, cand, action))
    return ad.mul_const(ad.add_n(terms), 1.0 / len(terms))


def value_loss_graph(
    P: dict[str, ad.Tensor], batch, returns: np.ndarray, penalty: float, ridge: float
) -> ad.Tensor:
    """Asymmetric squared loss: undershooting a return costs `penalty` times
    more, so the fit is pushed toward an upper envelope of the returns. The
    indicator is evaluated on the current forward value; exactly at the kink
    the non-penalized branch is used. The ridge term covers weights only."""
    terms = []
    for (obs, _cand, _a), g in zip(batch, returns):
        _logits, value = _forward_tape(P, obs)
        v = float(value.value.reshape(-1)[0])
        w = 1.0 if v >= g else penalty
        diff = ad.sub(ad.pick(value, 0), ad.const(g))
        terms.append(ad.mul_const(ad.square(diff), w))
    loss = ad.add_n(terms)
    if ridge > 0:
        reg = ad.add_n([ad.sum_all(ad.square(P[name])) for name in WEIGHT_NAMES])
        loss = ad.add(loss, ad.mul_const(reg, ridge))
    return loss


def grad(params: GcnnParameters, batch, head: str, **kwargs):
    """Exact reverse-accumulation gradients for one loss head.

    head: "policy" for the cross-entropy loss over (obs, cand, action)
    triples, or "value" for the penalized envelope loss (pass ``returns``,
    ``penalty``, ``ridge``). Returns (loss value, gradient dict shaped like
    the parameters).
    """
    P = _wrap(params)
    if head == "policy":
        loss = policy_loss_graph(P, batch)
    elif head == "value":
        loss = value_loss_graph(
            P, batch, kwargs["returns"], kwargs.get("penalty", 1000.0),
            kwargs.get("ridge", 0.0),
        )
    else:
        raise ValueError(f"unknown loss head {head!r}")
    if not np.isfinite(loss.value):
        raise GcnnError("non-finite loss; lower the learning rate")
    ad.backward(loss)
    grads = {}
    for name in PARAM_NAMES:
        g = P[name].grad
        grads[name] = np.zeros_like(params.arrays[name]) if g is None else np.asarray(g)
        if not np.all(np.isfinite(grads[name])):
            raise GcnnError(f"non-finite gradient in parameter {name}")
    return float(loss.value), grads


def policy_loss(params: GcnnParameters, batch) -> float:
    """Loss-only evaluation via the plain forward (no tape)."""
    total = 0.0
    for obs, cand, action in batch:
        logits, _ = forward_numpy(params, obs)
        order = [int(c) for c in cand]
        z = logits[order]
        mx = z.max()
        total += float(mx + np.log(np.exp(z - mx).sum()) - logits[int(action)])
    return total / len(batch)


def value_loss(params: GcnnParameters, batch, returns, penalty: float, ridge: float) -> float:
    total = 0.0
    for (obs, _c, _a), g in zip(batch, returns):
        _z, v = forward_numpy(params, obs)
        w = 1.0 if v >= g else penalty
        total += w * (v - g) ** 2
    if ridge > 0:
        total += ridge * sum(float((params.arrays[n] ** 2).sum()) for n in WEIGHT_NAMES)
    return total


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 10.0) -> float:
    total = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def sgd_step(params: GcnnParameters, grads: dict[str, np.ndarray], lr: float) -> None:
    for name in PARAM_NAMES:
        params.arrays[name] -= lr * grads[name]


# ---------------------------------------------------------------------------
# Checkpoints: versioned binary, little-endian float64 arrays plus a JSON
# metadata blob; loading refuses a mismatched feature-catalog version.
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: GcnnParameters, extra_meta: dict | None = None) -> None:
    meta = dict(params.meta)
    meta["checkpoint_format"] = CHECKPOINT_FORMAT
    meta["catalog_version"] = CATALOG_VERSION
    meta["hidden"] = HIDDEN
    if extra_meta:
        meta.update(extra_meta)
    payload = {name: params.arrays[name].astype("<f8") for name in PARAM_NAMES}
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
    )
    np.savez(path, **payload)


def load_checkpoint(path: str | Path) -> GcnnParameters:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("catalog_version") != CATALOG_VERSION:
            raise GcnnError(
                f"checkpoint catalog version {meta.get('catalog_version')} != {CATALOG_VERSION}"
            )
        if meta.get("checkpoint_format") != CHECKPOINT_FORMAT:
            raise GcnnError(f"unknown checkpoint format {meta.get('checkpoint_format')}")
        arrays = {}
        for name in PARAM_NAMES:
            arr = np.asarray(data[name], dtype=np.float64)
            if arr.shape != _SHAPES[name]:
                raise GcnnError(f"parameter {name} has shape {arr.shape}, expected {_SHAPES[name]}")
            arrays[name] = arr
    return GcnnParameters(arrays, meta)


# ---------------------------------------------------------------------------
# Imitation training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 32
    epochs: int = 40
    seed: int = 0
    checkpoint_every: int = 10
    valid_fraction: float = 0.2
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs <= 0 or self.checkpoint_every <= 0:
            raise ValueError("training config values must be positive")


@dataclass
class TrainResult:
    checkpoints: list[tuple[str, Path]]     # (checkpoint id, path)
    curve: list[tuple[int, float, float]]   # (epoch, train loss, valid loss)
    params: GcnnParameters
    diverged: bool = False


def train_policy(dataset, config: TrainConfig, out_dir: str | Path,
                 extra_meta: dict | None = None) -> TrainResult:
    """Mini-batch gradient descent on the cross-entropy loss.

    Deterministic given the config seed. Writes a checkpoint every
    ``checkpoint_every`` epochs plus the final epoch; on divergence the last
    finite checkpoint is retained and training stops.
    """
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([config.seed, 0x747261696E])
    params = init_params(config.seed)

    idx = rng.permutation(len(dataset))
    n_valid = int(config.valid_fraction * len(dataset))
    valid_idx, train_idx = idx[:n_valid], idx[n_valid:]
    if len(train_idx) == 0:
        train_idx, valid_idx = idx, idx[:0]
    train_set = [dataset[i] for i in train_idx]
    valid_set = [dataset[i] for i in valid_idx]

    checkpoints: list[tuple[str, Path]] = []
    curve: list[tuple[int, float, float]] = []
    diverged = False

    def _save(epoch: int, train_l: float, valid_l: float) -> None:
        cid = f"ckpt_{epoch:04d}"
        path = out_dir / f"{cid}.npz"
        meta = {"epoch": epoch, "train_loss": train_l, "valid_loss": valid_l}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, params, meta)
        checkpoints.append((cid, path))

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        try:
            for start in range(0, len(order), config.batch_size):
                batch = [train_set[i] for i in order[start:start + config.batch_size]]
                _loss, grads = grad(params, batch, "policy")
                clip_gradients(grads, config.clip_norm)
                sgd_step(params, grads, config.lr)
        except GcnnError:
            diverged = True
            break
        train_l = policy_loss(params, train_set)
        valid_l = policy_loss(params, valid_set) if valid_set else math.nan
        if not math.isfinite(train_l):
            diverged = True
            break
        curve.append((epoch, train_l, valid_l))
        if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
            _save(epoch, train_l, valid_l)

    if not checkpoints and curve:
        epoch, train_l, valid_l = curve[-1]
        _save(epoch, train_l, valid_l)
    return TrainResult(checkpoints=checkpoints, curve=curve, params=params, diverged=diverged)


class GcnnPolicy(BranchingPolicy):
    """Branching policy that plugs trained parameters into the engine."""

    requires_observation = True

    def __init__(self, params: GcnnParameters, name: str = "gcnn"):
        self.params = params
        self.name = name

    def select(self, ctx) -> int:
        return predict_branch(self.params, ctx.observation, ctx.candidates)
