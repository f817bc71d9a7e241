"""Return labeling, penalized upper-envelope fitting, and top-p% selection.

Per-state returns are discounted sums of the per-decision rewards to episode
end. The envelope is the shared graph network with its scalar head, trained
under an asymmetric squared loss that charges undershoots ``K`` times more,
plus a ridge term on weights only. Selection keeps the top p% of state-action
pairs ranked by the ratio of return to (floored) envelope value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gnn import (
    GcnnParameters,
    clip_gradients,
    forward_numpy,
    grad,
    init_params,
    sgd_step,
    value_loss,
)
from .trajectories import Episode, validate_chain


@dataclass
class ReturnEntry:
    obs: object
    cand: tuple[int, ...]
    action: int
    G: float
    episode: str
    t: int


@dataclass
class ReturnSet:
    entries: list[ReturnEntry]
    gamma: float


@dataclass(frozen=True)
class EnvelopeConfig:
    ridge: float = 1e-4         # weight-only ridge coefficient
    penalty: float = 1000.0     # undershoot multiplier, >> 1
    epochs: int = 40
    lr: float = 1e-4
    p: float = 15.0             # selection percentage
    seed: int = 0

    def __post_init__(self):
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if self.penalty < 1:
            raise ValueError("penalty coefficient must be >= 1")
        if not (0 < self.p <= 100):
            raise ValueError("selection percentage must lie in (0, 100]")
        if self.epochs <= 0 or self.lr <= 0:
            raise ValueError("epochs and lr must be positive")


def compute_returns(episodes: list[Episode], gamma: float) -> ReturnSet:
    """Backward recursion G_t = r_t + gamma * G_{t+1} per episode.

    Episodes must chain (each next-state digest equals the following state's
    digest); a broken chain raises naming the episode and position.
    """
    entries: list[ReturnEntry] = []
    for ep in episodes:
        validate_chain(ep)
        ts = ep.transitions
        G = 0.0
        returns = [0.0] * len(ts)
        for t in range(len(ts) - 1, -1, -1):
            G = ts[t].reward + gamma * G
            returns[t] = G
        for t, tr in enumerate(ts):
            entries.append(
                ReturnEntry(
                    obs=tr.obs, cand=tr.cand, action=tr.action,
                    G=returns[t], episode=ep.instance, t=t,
                )
            )
    return ReturnSet(entries=entries, gamma=gamma)


@dataclass
class EnvelopeReport:
    final_loss: float
    violation_fraction: float
    epochs: int
    loss_curve: list[float] = field(default_factory=list)


def envelope_values(params: GcnnParameters, entries: list[ReturnEntry]) -> np.ndarray:
    return np.array([forward_numpy(params, e.obs)[1] for e in entries])


def violation_fraction(params: GcnnParameters, entries: list[ReturnEntry]) -> float:
    values = envelope_values(params, entries)
    returns = np.array([e.G for e in entries])
    return float((values < returns).mean())


def train_envelope(
    dataset: ReturnSet,
    config: EnvelopeConfig,
    start: GcnnParameters | None = None,
) -> tuple[GcnnParameters, EnvelopeReport]:
    """Full-batch gradient descent on the penalized envelope loss.

    The step size backtracks (halves) whenever a step would increase the
    loss, so the loss curve is monotone even under large penalty
    coefficients; everything stays deterministic in the seed.
    """
    entries = dataset.entries
    if not entries:
        raise ValueError("empty return-labeled set")
    params = start.copy() if start is not None else init_params(config.seed)
    batch = [(e.obs, e.cand, e.action) for e in entries]
    returns = np.array([e.G for e in entries])

    lr = config.lr
    curve: list[float] = []
    for _ in range(config.epochs):
        try:
            loss, grads = grad(
                params, batch, "value",
                returns=returns, penalty=config.penalty, ridge=config.ridge,
            )
        except Exception as exc:
            raise ValueError(
                f"envelope training diverged ({exc}); use a smaller learning rate"
            ) from exc
        if not math.isfinite(loss):
            raise ValueError("envelope training diverged; use a smaller learning rate")
        clip_gradients(grads)
        while True:
            trial = params.copy()
            sgd_step(trial, grads, lr)
            new_loss = value_loss(trial, batch, returns, config.penalty, config.ridge)
            if new_loss <= loss or lr < 1e-12:
                params = trial
                break
            lr *= 0.5
        curve.append(loss)

    final = value_loss(params, batch, returns, config.penalty, config.ridge)
    report = EnvelopeReport(
        final_loss=final,
        violation_fraction=violation_fraction(params, entries),
        epochs=config.epochs,
        loss_curve=curve,
    )
    return params, report


def shift_to_positive(returns: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shift returns and envelope outputs into a strictly positive range.

    Both series move by one common offset (their joint negative part plus
    their joint magnitude), so the ratio ranking compares each return to its
    state's envelope on the same footing regardless of sign or episode
    position, and scaling both series by a positive constant scales the
    offset identically, leaving the ranking unchanged. Shifting only the
    denominator would rank raw returns, which for negative-reward tasks
    collapses into preferring late, small-magnitude transitions.
    """
    returns = np.asarray(returns, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    lo = min(0.0, float(returns.min(initial=0.0)), float(values.min(initial=0.0)))
    scale = max(float(np.abs(returns).max(initial=0.0)),
                float(np.abs(values).max(initial=0.0)))
    if scale == 0.0:
        scale = 1.0
    offset = -lo + scale
    return returns + offset, values + offset


def select_top(
    entries: list[ReturnEntry],
    values: np.ndarray,
    p: float,
) -> tuple[list[ReturnEntry], float]:
    """Keep the ceil(p% * m) entries with the largest return/envelope ratio.

    Ranking uses the positively shifted pair from :func:`shift_to_positive`;
    an entry that realizes its state's envelope scores 1, underachievers
    score below it. Ties at the boundary break by earlier episode/transition
    order. Returns the selected entries (in original order) and the threshold
    x such that every selected entry satisfies shifted_G > x * shifted_V.
    """
    if not entries:
        raise ValueError("empty return-labeled set")
    if not (0 < p <= 100):
        raise ValueError("selection percentage must lie in (0, 100]")
    if len(values) != len(entries):
        raise ValueError("values and entries have different lengths")
    g_shift, v_shift = shift_to_positive(np.array([e.G for e in entries]), values)
    ratios = g_shift / v_shift
    k = math.ceil(p / 100.0 * len(entries))
    order = sorted(range(len(entries)), key=lambda i: (-ratios[i], i))
    chosen = sorted(order[:k])
    boundary = float(ratios[order[k - 1]])
    threshold = float(np.nextafter(boundary, -math.inf))
    return [entries[i] for i in chosen], threshold
