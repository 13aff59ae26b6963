"""Graph algebra over dynamics graphs: ancestor closure and state masks.

Graphs are boolean arrays of shape (d_S + 1, d_S) where entry (j, i) means
unit ``j`` is a parent of ``s^i_{t+1}`` and row ``d_S`` is the action.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .cmi import CausalGraphEstimate
from .env import GroundTruthGraph

PROVENANCES = ("bisimulation", "cdl", "oracle", "full")


@dataclass
class AbstractionMask:
    kept: np.ndarray
    task: int = 0
    provenance: str = "bisimulation"

    def __post_init__(self):
        self.kept = np.asarray(self.kept, dtype=bool)
        if self.kept.ndim != 1:
            raise ValueError("mask must be a 1-D boolean vector")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}; expected one of {PROVENANCES}")

    @property
    def indices(self) -> list[int]:
        return [int(k) for k in np.nonzero(self.kept)[0]]

    @property
    def size(self) -> int:
        return int(self.kept.sum())

    def same_as(self, other: "AbstractionMask") -> bool:
        return self.indices == other.indices

    def to_dict(self) -> dict:
        return {"task": int(self.task), "provenance": self.provenance, "kept": self.indices, "d_S": int(len(self.kept))}

    @classmethod
    def from_dict(cls, d: dict) -> "AbstractionMask":
        kept = np.zeros(int(d["d_S"]), dtype=bool)
        kept[list(d["kept"])] = True
        return cls(kept, int(d["task"]), d["provenance"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "AbstractionMask":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _edges(graph) -> np.ndarray:
    if isinstance(graph, CausalGraphEstimate):
        e = graph.edges
    elif isinstance(graph, GroundTruthGraph):
        e = graph.dyn_parents
    else:
        e = np.asarray(graph, dtype=bool)
    if e.ndim != 2 or e.shape[0] != e.shape[1] + 1:
        raise ValueError(f"graph must have shape (d_S + 1, d_S), got {e.shape}")
    return e


def _index_set(seeds: Iterable[int] | np.ndarray, d_S: int) -> np.ndarray:
    s = np.asarray(seeds)
    if s.dtype == bool:
        if s.shape != (d_S,):
            raise ValueError(f"boolean seed vector must have length {d_S}")
        return s.copy()
    out = np.zeros(d_S, dtype=bool)
    for k in s.reshape(-1).tolist():
        if not 0 <= int(k) < d_S:
            raise ValueError(f"seed {k} is not a state variable (0..{d_S - 1})")
        out[int(k)] = True
    return out


def ancestor_mask(graph, seeds) -> np.ndarray:
    """Boolean closure of ``seeds`` under state-to-state parent edges."""
    e = _edges(graph)
    d_S = e.shape[1]
    state_edges = e[:d_S]
    closed = _index_set(seeds, d_S)
    while True:
        grown = closed | state_edges[:, closed].any(axis=1)
        if np.array_equal(grown, closed):
            return closed
        closed = grown


def ancestors(graph, seeds) -> set[int]:
    return {int(k) for k in np.nonzero(ancestor_mask(graph, seeds))[0]}


def bisim_abstraction(graph, reward_parents, task: int = 0) -> AbstractionMask:
    """Reward parents together with all their dynamical ancestors."""
    d_S = _edges(graph).shape[1]
    seeds = _index_set(reward_parents, d_S)
    if not seeds.any():
        raise ValueError(f"task {task}: no reward parents detected, the bisimulation mask is undefined")
    return AbstractionMask(ancestor_mask(graph, seeds), task, "bisimulation")


def controllable_mask(graph) -> np.ndarray:
    """Variables forward-reachable from the action."""
    e = _edges(graph)
    d_S = e.shape[1]
    reached = e[d_S].copy()
    while True:
        grown = reached | e[:d_S][reached].any(axis=0)
        if np.array_equal(grown, reached):
            return reached
        reached = grown


def cdl_abstraction(graph, task: int = 0) -> AbstractionMask:
    """Controllable variables plus the parents of controllable variables."""
    e = _edges(graph)
    d_S = e.shape[1]
    ctrl = controllable_mask(e)
    relevant = e[:d_S][:, ctrl].any(axis=1)
    return AbstractionMask(ctrl | relevant, task, "cdl")


def full_mask(d_S: int, task: int = 0) -> AbstractionMask:
    return AbstractionMask(np.ones(d_S, dtype=bool), task, "full")


def oracle_mask(truth: GroundTruthGraph, task: int = 0) -> AbstractionMask:
    m = bisim_abstraction(truth.dyn_parents, truth.reward_parents[task], task)
    return AbstractionMask(m.kept, task, "oracle")


def abstraction_accuracy(mask, reference) -> float:
    a = mask.kept if isinstance(mask, AbstractionMask) else np.asarray(mask, dtype=bool)
    b = reference.kept if isinstance(reference, AbstractionMask) else np.asarray(reference, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask lengths differ: {a.shape} vs {b.shape}")
    return float((a == b).mean())


def apply_mask(mask, state) -> np.ndarray:
    """Zero the ignored components; works on a single state or a batch."""
    m = mask.kept if isinstance(mask, AbstractionMask) else np.asarray(mask, dtype=bool)
    x = np.asarray(state, dtype=np.float64)
    if x.shape[-1] != m.shape[0]:
        raise ValueError(f"state has {x.shape[-1]} components, mask has {m.shape[0]}")
    return np.where(m, x, 0.0)
