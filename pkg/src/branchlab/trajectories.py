"""Transition and episode records plus their on-disk JSON-lines form.

One transition is recorded per branching decision: the state (observation
plus candidate set), the chosen candidate, the reward accrued since the
previous decision, the next decision state (absent on the final transition),
and the done flag. Episode files carry a header line with provenance and the
dual-bound trace; observations are stored once in a content-addressed blob
directory and referenced by digest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .observation import (
    BipartiteObservation,
    CATALOG_VERSION,
    observation_from_dict,
    observation_to_dict,
    state_digest,
)


@dataclass
class Transition:
    obs: BipartiteObservation
    cand: tuple[int, ...]
    action: int
    reward: float
    next_obs: BipartiteObservation | None
    next_cand: tuple[int, ...] | None
    done: bool
    clock: float = 0.0

    def digest(self) -> str:
        return state_digest(self.obs, self.cand)

    def next_digest(self) -> str | None:
        if self.next_obs is None or self.next_cand is None:
            return None
        return state_digest(self.next_obs, self.next_cand)


@dataclass
class Episode:
    instance: str
    transitions: list[Transition] = field(default_factory=list)
    trace_events: list[tuple[float, float]] = field(default_factory=list)
    horizon: float = 0.0
    opt_value: float = math.nan

    def __len__(self) -> int:
        return len(self.transitions)


class ChainError(ValueError):
    """Episode transitions do not chain: next state differs from the following state."""

    def __init__(self, episode: str, position: int, message: str):
        super().__init__(f"episode {episode!r}, transition {position}: {message}")
        self.episode = episode
        self.position = position


def validate_chain(episode: Episode) -> None:
    ts = episode.transitions
    for t, tr in enumerate(ts):
        if tr.action not in tr.cand:
            raise ChainError(episode.instance, t, f"action {tr.action} not in candidate set")
        if not math.isfinite(tr.reward):
            raise ChainError(episode.instance, t, "non-finite reward")
        last = t == len(ts) - 1
        if tr.done != last:
            raise ChainError(episode.instance, t, "done flag not on the final transition")
        if last:
            continue
        nd = tr.next_digest()
        if nd is None:
            raise ChainError(episode.instance, t, "missing next state before episode end")
        if nd != ts[t + 1].digest():
            raise ChainError(episode.instance, t, "next state digest mismatch")


class ObservationStore:
    """Content-addressed observation blobs, one JSON file per digest."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def put(self, obs: BipartiteObservation, cand: tuple[int, ...]) -> str:
        digest = state_digest(obs, cand)
        path = self.root / f"{digest}.json"
        if not path.exists():
            path.write_text(json.dumps(observation_to_dict(obs), sort_keys=True))
        return digest

    def get(self, digest: str) -> BipartiteObservation:
        path = self.root / f"{digest}.json"
        return observation_from_dict(json.loads(path.read_text()))


def write_episode_file(
    path: str | Path,
    episode: Episode,
    store: ObservationStore,
    provenance: dict | None = None,
) -> None:
    header = {
        "type": "header",
        "instance": episode.instance,
        "catalog_version": CATALOG_VERSION,
        "transitions": len(episode.transitions),
        "trace": [[c, z] for c, z in episode.trace_events],
        "horizon": episode.horizon,
        "opt_value": None if math.isnan(episode.opt_value) else episode.opt_value,
    }
    if provenance:
        header.update(provenance)
    lines = [json.dumps(header, sort_keys=True)]
    for tr in episode.transitions:
        row = {
            "obs": store.put(tr.obs, tr.cand),
            "set": list(tr.cand),
            "a": tr.action,
            "r": tr.reward,
            "next_obs": store.put(tr.next_obs, tr.next_cand) if tr.next_obs is not None else None,
            "next_set": list(tr.next_cand) if tr.next_cand is not None else None,
            "d": tr.done,
            "clock": tr.clock,
        }
        lines.append(json.dumps(row, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def read_episode_file(path: str | Path, store: ObservationStore) -> Episode:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("type") != "header":
        raise ValueError(f"{path}: first line is not an episode header")
    if header.get("catalog_version") != CATALOG_VERSION:
        raise ValueError(
            f"{path}: catalog version {header.get('catalog_version')} != {CATALOG_VERSION}"
        )
    episode = Episode(
        instance=header["instance"],
        trace_events=[(float(c), float(z)) for c, z in header.get("trace", [])],
        horizon=float(header.get("horizon", 0.0)),
        opt_value=(
            math.nan if header.get("opt_value") is None else float(header["opt_value"])
        ),
    )
    for line in lines[1:]:
        row = json.loads(line)
        episode.transitions.append(
            Transition(
                obs=store.get(row["obs"]),
                cand=tuple(row["set"]),
                action=int(row["a"]),
                reward=float(row["r"]),
                next_obs=store.get(row["next_obs"]) if row["next_obs"] else None,
                next_cand=tuple(row["next_set"]) if row["next_set"] is not None else None,
                done=bool(row["d"]),
                clock=float(row.get("clock", 0.0)),
            )
        )
    return episode
