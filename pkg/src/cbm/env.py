"""Synthetic factored MDPs with a known causal structure.

State layout is ``[core variables | controllable distractors | uncontrollable
distractors]``.  The action is a single causal unit; in every parent matrix it
occupies the last row (index ``d_S``).
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import rng as rngs

TRANSITION_KINDS = ("copy-chain", "noisy-linear", "contact-gated", "discrete-tabular")
REWARD_KINDS = ("distance-to-goal", "indicator-threshold", "weighted-sum")
POLICIES = ("uniform-random", "scripted-sweep", "external")

BUFFER_MAGIC = b"CBMDATA1"
_TOL = 1e-9


class RangeError(ValueError):
    """A state or action lies outside its declared interval."""


@dataclass
class GroundTruthGraph:
    dyn_parents: np.ndarray  # (d_S + 1, d_S); entry (j, i): j is a parent of s^i_{t+1}
    reward_parents: list[np.ndarray]  # one (d_S,) boolean vector per task

    def __post_init__(self):
        self.dyn_parents = np.asarray(self.dyn_parents, dtype=bool)
        self.reward_parents = [np.asarray(r, dtype=bool) for r in self.reward_parents]

    @property
    def d_S(self) -> int:
        return self.dyn_parents.shape[1]

    def validate(self) -> None:
        d_S = self.d_S
        if self.dyn_parents.shape != (d_S + 1, d_S):
            raise ValueError(f"dyn_parents must have shape ({d_S + 1}, {d_S}), got {self.dyn_parents.shape}")
        for k, rp in enumerate(self.reward_parents):
            if rp.shape != (d_S,):
                raise ValueError(f"reward_parents[{k}] must have length {d_S}")
            if not rp.any():
                raise ValueError(f"reward_parents[{k}] is empty")

    def to_dict(self) -> dict:
        return {
            "dyn_parents": self.dyn_parents.astype(int).tolist(),
            "reward_parents": [r.astype(int).tolist() for r in self.reward_parents],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthGraph":
        return cls(np.array(d["dyn_parents"], dtype=bool), [np.array(r, dtype=bool) for r in d["reward_parents"]])


@dataclass
class RewardSpec:
    task_id: int
    parents: list[int]
    reward_fn_kind: str
    params: list[float]
    noise_std: float = 0.0

    def __post_init__(self):
        if self.reward_fn_kind not in REWARD_KINDS:
            raise ValueError(f"unknown reward_fn_kind {self.reward_fn_kind!r}")
        self.parents = [int(p) for p in self.parents]
        self.params = [float(p) for p in self.params]
        if not self.parents:
            raise ValueError(f"task {self.task_id} has no reward parents")
        if len(self.params) != len(self.parents):
            raise ValueError("reward params need one coefficient per parent")

    def __call__(self, state: np.ndarray, action: np.ndarray | None = None) -> float:
        v = np.asarray(state, dtype=np.float64)[self.parents]
        p = np.asarray(self.params)
        if self.reward_fn_kind == "weighted-sum":
            return float(np.dot(p, v))
        if self.reward_fn_kind == "distance-to-goal":
            return -float(np.sqrt(np.sum((v - p) ** 2)))
        return float(np.all(v >= p))

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "parents": list(self.parents),
            "reward_fn_kind": self.reward_fn_kind,
            "params": list(self.params),
            "noise_std": self.noise_std,
        }


@dataclass
class EnvSpec:
    d_S: int
    d_A: int
    ranges: np.ndarray  # (d_S, 2)
    transition_kind: str
    noise_std: np.ndarray  # (d_S,)
    true_graph: GroundTruthGraph
    reward_specs: list[RewardSpec]
    n_controllable_distractors: int = 0
    n_uncontrollable_distractors: int = 0
    distractor_projection: np.ndarray = field(default_factory=lambda: np.zeros((1, 0)))
    horizon: int = 50
    seed: int = 0
    params: dict = field(default_factory=dict)  # kind-specific transition parameters

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=np.float64).reshape(self.d_S, 2)
        self.noise_std = np.broadcast_to(np.asarray(self.noise_std, dtype=np.float64), (self.d_S,)).copy()
        self.distractor_projection = np.asarray(self.distractor_projection, dtype=np.float64).reshape(
            self.d_A, self.n_controllable_distractors
        )
        self.validate()

    # layout helpers
    @property
    def n_core(self) -> int:
        return self.d_S - self.n_controllable_distractors - self.n_uncontrollable_distractors

    @property
    def cd_slice(self) -> slice:
        return slice(self.n_core, self.n_core + self.n_controllable_distractors)

    @property
    def ud_slice(self) -> slice:
        return slice(self.n_core + self.n_controllable_distractors, self.d_S)

    @property
    def n_tasks(self) -> int:
        return len(self.reward_specs)

    @property
    def lo(self) -> np.ndarray:
        return self.ranges[:, 0]

    @property
    def hi(self) -> np.ndarray:
        return self.ranges[:, 1]

    def supports(self) -> list[np.ndarray | None]:
        """Finite value sets per variable (``None`` for continuous variables)."""
        out: list[np.ndarray | None] = [None] * self.d_S
        if self.transition_kind == "discrete-tabular":
            for i, n in enumerate(self.params["n_values"]):
                out[i] = np.linspace(self.lo[i], self.hi[i], int(n))
        return out

    def variable_names(self) -> list[str]:
        return [f"s{i + 1}" for i in range(self.d_S)]

    def validate(self) -> None:
        if self.transition_kind not in TRANSITION_KINDS:
            raise ValueError(f"unknown transition_kind {self.transition_kind!r}")
        if np.any(self.lo > self.hi):
            raise ValueError("every range needs lo <= hi")
        if self.n_core < 1:
            raise ValueError("an environment needs at least one core variable")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        g = self.true_graph
        g.validate()
        if g.d_S != self.d_S:
            raise ValueError("true_graph does not match d_S")
        if len(g.reward_parents) != len(self.reward_specs):
            raise ValueError("one reward_parents vector per reward spec is required")
        for spec, rp in zip(self.reward_specs, g.reward_parents):
            if sorted(np.flatnonzero(rp).tolist()) != sorted(spec.parents):
                raise ValueError(f"reward spec {spec.task_id} disagrees with true_graph")
        dp = g.dyn_parents
        for i in range(self.n_core, self.d_S):
            # distractors never feed core dynamics
            if dp[i, : self.d_S].any():
                raise ValueError(f"distractor s{i + 1} is a dynamics parent")
        cd = range(self.cd_slice.start, self.cd_slice.stop)
        for i in cd:
            if dp[: self.d_S, i].any() or not dp[self.d_S, i]:
                raise ValueError(f"controllable distractor s{i + 1} must have only the action as parent")
        for i in range(self.ud_slice.start, self.d_S):
            if dp[:, i].any():
                raise ValueError(f"uncontrollable distractor s{i + 1} must have no parents")

    # serialization
    def to_dict(self) -> dict:
        return {
            "d_S": self.d_S,
            "d_A": self.d_A,
            "ranges": self.ranges.tolist(),
            "transition_kind": self.transition_kind,
            "noise_std": self.noise_std.tolist(),
            "true_graph": self.true_graph.to_dict(),
            "reward_specs": [r.to_dict() for r in self.reward_specs],
            "n_controllable_distractors": self.n_controllable_distractors,
            "n_uncontrollable_distractors": self.n_uncontrollable_distractors,
            "distractor_projection": self.distractor_projection.tolist(),
            "horizon": self.horizon,
            "seed": self.seed,
            "params": self.params,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown EnvSpec fields: {sorted(unknown)}")
        d = dict(d)
        d["true_graph"] = GroundTruthGraph.from_dict(d["true_graph"])
        d["reward_specs"] = [RewardSpec(**r) for r in d["reward_specs"]]
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EnvSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# simulation


def _as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def reset(env: EnvSpec, seed) -> np.ndarray:
    """Initial state drawn uniformly inside the ranges (or over the finite supports)."""
    rng = _as_rng(seed)
    state = rng.uniform(env.lo, env.hi)
    for i, sup in enumerate(env.supports()):
        if sup is not None:
            state[i] = sup[rng.integers(len(sup))]
    # a degenerate range [c, c] yields exactly c
    return np.where(env.lo == env.hi, env.lo, state)


def _check_in_range(name: str, x: np.ndarray, lo, hi) -> None:
    if not np.all(np.isfinite(x)):
        raise RangeError(f"{name} contains non-finite values")
    if np.any(x < lo - _TOL) or np.any(x > hi + _TOL):
        raise RangeError(f"{name} outside its declared range")


def _action_bin(env: EnvSpec, action: np.ndarray) -> int:
    n_bins = int(env.params["n_action_bins"])
    return min(int((action[0] + 1.0) / 2.0 * n_bins), n_bins - 1)


def _core_next(env: EnvSpec, s: np.ndarray, a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = env.n_core
    kind = env.transition_kind
    p = env.params
    if kind == "copy-chain":
        nxt = np.empty(n)
        nxt[0] = a[0]
        nxt[1:] = s[: n - 1]
    elif kind == "noisy-linear":
        W = np.asarray(p["state_weights"])  # (n_core, n_core); W[j, i] weight of s^j on s^i
        A = np.asarray(p["action_weights"])  # (d_A, n_core)
        nxt = s[:n] @ W + a @ A
    elif kind == "contact-gated":
        step_size = p["step_size"]
        nxt = s[:n].copy()
        nxt[0] = s[0] + step_size * a[0]
        touching = np.abs(s[1:n] - s[0]) <= p["contact_radius"]
        nxt[1:n] = np.where(touching, s[1:n] + step_size * a[0], s[1:n])
    else:
        sup = env.supports()
        idx = [int(np.argmin(np.abs(sup[k] - s[k]))) for k in range(n)]
        abin = _action_bin(env, a)
        nxt = np.empty(n)
        for i in range(n):
            key = tuple(abin if j < 0 else idx[j] for j in p["parents"][i])
            probs = np.asarray(p["tables"][i], dtype=np.float64)[key]
            nxt[i] = sup[i][rng.choice(len(probs), p=probs / probs.sum())]
        return nxt
    noise = env.noise_std[:n]
    if np.any(noise > 0):
        nxt = nxt + rng.normal(0.0, 1.0, n) * noise
    return nxt


def rewards(env: EnvSpec, state: np.ndarray, action: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    r = np.array([spec(state, action) for spec in env.reward_specs], dtype=np.float64)
    if rng is not None:
        noise = np.array([spec.noise_std for spec in env.reward_specs])
        if np.any(noise > 0):
            r = r + rng.normal(0.0, 1.0, len(r)) * noise
    return r


def step(env: EnvSpec, state, action, seed=None) -> tuple[np.ndarray, np.ndarray]:
    """Advance one step; returns ``(next_state, reward_vector)``.

    Rewards are functions of the current state and action, one per task.
    """
    rng = _as_rng(seed)
    s = np.asarray(state, dtype=np.float64)
    a = np.asarray(action, dtype=np.float64).reshape(env.d_A)
    _check_in_range("action", a, -1.0, 1.0)
    _check_in_range("state", s, env.lo, env.hi)
    nxt = np.empty(env.d_S)
    nxt[: env.n_core] = _core_next(env, s, a, rng)
    nxt[env.cd_slice] = a @ env.distractor_projection
    nxt[env.ud_slice] = rng.uniform(-1.0, 1.0, env.n_uncontrollable_distractors)
    nxt = np.clip(nxt, env.lo, env.hi)
    return nxt, rewards(env, s, a, rng)


# ---------------------------------------------------------------------------
# replay storage


@dataclass
class Transition:
    s_t: np.ndarray
    a_t: np.ndarray
    r_t: np.ndarray
    s_next: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring of transitions; the oldest records are evicted first."""

    def __init__(self, capacity: int, d_S: int, d_A: int, n_tasks: int = 1, rng_seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.d_S, self.d_A, self.n_tasks = int(d_S), int(d_A), int(n_tasks)
        self.rng_seed = int(rng_seed)
        self._rng = np.random.default_rng(self.rng_seed)
        self._s = np.zeros((capacity, d_S))
        self._a = np.zeros((capacity, d_A))
        self._r = np.zeros((capacity, n_tasks))
        self._s2 = np.zeros((capacity, d_S))
        self._start = np.zeros(capacity, dtype=bool)
        self._ptr = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, s, a, r, s_next, episode_start: bool = False) -> None:
        k = self._ptr
        self._s[k] = s
        self._a[k] = a
        self._r[k] = r
        self._s2[k] = s_next
        self._start[k] = episode_start
        self._ptr = (k + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def add_transition(self, tr: Transition, episode_start: bool = False) -> None:
        self.add(tr.s_t, tr.a_t, tr.r_t, tr.s_next, episode_start)

    def _order(self) -> np.ndarray:
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._ptr) % self.capacity

    def arrays(self) -> dict[str, np.ndarray]:
        """All stored records, oldest first."""
        o = self._order()
        return {"s": self._s[o], "a": self._a[o], "r": self._r[o], "s_next": self._s2[o], "start": self._start[o]}

    def __getitem__(self, k: int) -> Transition:
        o = self._order()[k]
        return Transition(self._s[o].copy(), self._a[o].copy(), self._r[o].copy(), self._s2[o].copy())

    def sample(self, batch_size: int, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = (rng or self._rng).integers(0, self._size, size=batch_size)
        return self.take(idx)

    def take(self, idx) -> dict[str, np.ndarray]:
        o = self._order()[np.asarray(idx)]
        return {"s": self._s[o], "a": self._a[o], "r": self._r[o], "s_next": self._s2[o]}

    def split(self, heldout_fraction: float) -> tuple["ReplayBuffer", "ReplayBuffer"]:
        """Deterministic tail split: the newest records become the held-out part."""
        n = len(self)
        n_held = int(round(n * heldout_fraction))
        if n_held < 1 or n_held >= n:
            raise ValueError("split needs at least one record on each side")
        return self.subset(range(0, n - n_held)), self.subset(range(n - n_held, n))

    def subset(self, idx) -> "ReplayBuffer":
        idx = np.asarray(list(idx))
        data = self.arrays()
        out = ReplayBuffer(len(idx), self.d_S, self.d_A, self.n_tasks, self.rng_seed)
        for k in idx:
            out.add(data["s"][k], data["a"][k], data["r"][k], data["s_next"][k], bool(data["start"][k]))
        return out

    # binary export
    def save(self, path: str | Path) -> None:
        path = Path(path)
        d = self.arrays()
        rec = np.concatenate([d["s"], d["a"], d["r"], d["s_next"]], axis=1).astype("<f4")
        with open(path, "wb") as fh:
            fh.write(BUFFER_MAGIC)
            fh.write(rec.tobytes(order="C"))
        sidecar = {
            "format": BUFFER_MAGIC.decode(),
            "dtype": "<f4",
            "d_S": self.d_S,
            "d_A": self.d_A,
            "n_tasks": self.n_tasks,
            "n_records": len(self),
            "record_layout": ["s", "a", "r", "s_next"],
            "record_width": int(rec.shape[1]),
            "episode_starts": np.flatnonzero(d["start"]).tolist(),
            "capacity": self.capacity,
            "rng_seed": self.rng_seed,
        }
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ReplayBuffer":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
        raw = path.read_bytes()
        if raw[:8] != BUFFER_MAGIC:
            raise ValueError(f"{path} is not a CBMDATA1 buffer")
        rec = np.frombuffer(raw[8:], dtype="<f4").reshape(meta["n_records"], meta["record_width"]).astype(np.float64)
        d_S, d_A, K = meta["d_S"], meta["d_A"], meta["n_tasks"]
        buf = cls(max(meta["capacity"], meta["n_records"]), d_S, d_A, K, meta.get("rng_seed", 0))
        starts = set(meta["episode_starts"])
        cuts = np.cumsum([d_S, d_A, K])
        for k, row in enumerate(rec):
            s, a, r, s2 = np.split(row, cuts)
            buf.add(s, a, r, s2, k in starts)
        return buf


# ---------------------------------------------------------------------------
# data collection


def scripted_sweep_action(d_A: int, t: int, phase: np.ndarray, period: np.ndarray) -> np.ndarray:
    """Smooth periodic sweep across the action box (a stand-in for scripted controllers)."""
    return np.clip(np.sin(2.0 * math.pi * t / period + phase), -1.0, 1.0)


def collect_dataset(
    env: EnvSpec,
    policy: str = "uniform-random",
    n_transitions: int = 1000,
    seed: int = 0,
    external: Callable[[np.ndarray], np.ndarray] | None = None,
    capacity: int | None = None,
) -> ReplayBuffer:
    """Roll the environment with a behaviour policy, restarting every ``horizon`` steps."""
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if policy == "external" and external is None:
        raise ValueError("policy 'external' needs a callable")
    env_rng = rngs.stream(seed, "env")
    pol_rng = rngs.stream(seed, "policy")
    buf = ReplayBuffer(capacity or n_transitions, env.d_S, env.d_A, env.n_tasks, rng_seed=rngs.derive_seed(seed, "data"))
    state = None
    phase = period = None
    for t in range(n_transitions):
        t_ep = t % env.horizon
        if t_ep == 0:
            state = reset(env, env_rng)
            phase = pol_rng.uniform(0, 2 * math.pi, env.d_A)
            period = pol_rng.uniform(5.0, 25.0, env.d_A)
        if policy == "uniform-random":
            action = pol_rng.uniform(-1.0, 1.0, env.d_A)
        elif policy == "scripted-sweep":
            action = scripted_sweep_action(env.d_A, t_ep, phase, period)
            action = np.clip(action + 0.1 * pol_rng.normal(size=env.d_A), -1.0, 1.0)
        else:
            action = np.clip(np.asarray(external(state), dtype=np.float64), -1.0, 1.0)
        nxt, r = step(env, state, action, env_rng)
        buf.add(state, action, r, nxt, episode_start=(t_ep == 0))
        state = nxt
    return buf


# ---------------------------------------------------------------------------
# built-in environments


def _distractor_block(d_S_core: int, d_A: int, n_cd: int, n_ud: int, rng: np.random.Generator):
    W = rng.uniform(-1.0, 1.0, (d_A, n_cd)) / d_A
    ranges = [[-1.0, 1.0]] * (n_cd + n_ud)
    return W, ranges


def _assemble(
    kind: str,
    core_ranges: Sequence[Sequence[float]],
    core_parents: np.ndarray,
    d_A: int,
    noise_core: float | Sequence[float],
    n_cd: int,
    n_ud: int,
    reward_specs: Sequence[RewardSpec],
    horizon: int,
    seed: int,
    params: dict,
    rng: np.random.Generator,
) -> EnvSpec:
    n_core = len(core_ranges)
    d_S = n_core + n_cd + n_ud
    W, d_ranges = _distractor_block(n_core, d_A, n_cd, n_ud, rng)
    dp = np.zeros((d_S + 1, d_S), dtype=bool)
    dp[:n_core, :n_core] = core_parents[:n_core]
    dp[d_S, :n_core] = core_parents[n_core]
    dp[d_S, n_core : n_core + n_cd] = True
    noise = np.zeros(d_S)
    noise[:n_core] = noise_core
    reward_parents = []
    for spec in reward_specs:
        v = np.zeros(d_S, dtype=bool)
        v[spec.parents] = True
        reward_parents.append(v)
    return EnvSpec(
        d_S=d_S,
        d_A=d_A,
        ranges=np.array(list(core_ranges) + d_ranges, dtype=np.float64).reshape(d_S, 2),
        transition_kind=kind,
        noise_std=noise,
        true_graph=GroundTruthGraph(dp, reward_parents),
        reward_specs=list(reward_specs),
        n_controllable_distractors=n_cd,
        n_uncontrollable_distractors=n_ud,
        distractor_projection=W,
        horizon=horizon,
        seed=seed,
        params=params,
    )


def make_copy_chain(
    n_core: int = 4,
    d_A: int = 1,
    noise_std: float = 0.0,
    n_cd: int = 0,
    n_ud: int = 0,
    horizon: int = 50,
    seed: int = 0,
    reward_specs: Sequence[RewardSpec] | None = None,
) -> EnvSpec:
    """``s'^1 = a_1`` and ``s'^i = s^{i-1}`` for the rest, plus optional noise."""
    rng = rngs.stream(seed, "env-build")
    parents = np.zeros((n_core + 1, n_core), dtype=bool)
    parents[n_core, 0] = True
    for i in range(1, n_core):
        parents[i - 1, i] = True
    if reward_specs is None:
        reward_specs = [RewardSpec(0, [n_core - 1], "distance-to-goal", [0.5])]
    return _assemble(
        "copy-chain", [[-1.0, 1.0]] * n_core, parents, d_A, noise_std, n_cd, n_ud,
        reward_specs, horizon, seed, {}, rng,
    )


def make_noisy_linear(
    n_core: int = 6,
    d_A: int = 2,
    noise_std: float = 0.05,
    n_cd: int = 4,
    n_ud: int = 4,
    horizon: int = 25,
    seed: int = 0,
    max_parents: int = 2,
    reward_specs: Sequence[RewardSpec] | None = None,
) -> EnvSpec:
    """Sparse random linear dynamics.

    Each core variable draws 1..``max_parents`` other core parents, keeps its
    own past with probability 1/2 and reads the action with probability 1/2.
    Weight magnitudes are normalized to sum to 0.9 per child so the pre-noise
    value stays inside [-1, 1].
    """
    rng = rngs.stream(seed, "env-build")
    parents = np.zeros((n_core + 1, n_core), dtype=bool)
    W = np.zeros((n_core, n_core))
    A = np.zeros((d_A, n_core))
    for i in range(n_core):
        others = [j for j in range(n_core) if j != i]
        k = int(rng.integers(1, max_parents + 1))
        chosen = list(rng.choice(others, size=min(k, len(others)), replace=False))
        if rng.random() < 0.5:
            chosen.append(i)
        use_action = bool(rng.random() < 0.5)
        n_terms = len(chosen) + (d_A if use_action else 0)
        mags = rng.uniform(0.5, 1.0, n_terms) * rng.choice([-1.0, 1.0], n_terms)
        mags *= 0.9 / np.abs(mags).sum()
        for m, j in zip(mags, chosen):
            W[j, i] = m
            parents[j, i] = True
        if use_action:
            A[:, i] = mags[len(chosen):]
            parents[n_core, i] = True
    if reward_specs is None:
        pr = sorted(rng.choice(n_core, size=min(2, n_core), replace=False).tolist())
        reward_specs = [RewardSpec(0, pr, "distance-to-goal", [0.0] * len(pr))]
    params = {"state_weights": W.tolist(), "action_weights": A.tolist()}
    return _assemble(
        "noisy-linear", [[-1.0, 1.0]] * n_core, parents, d_A, noise_std, n_cd, n_ud,
        reward_specs, horizon, seed, params, rng,
    )


def make_contact_gated(
    n_blocks: int = 2,
    d_A: int = 1,
    noise_std: float = 0.0,
    n_cd: int = 4,
    n_ud: int = 4,
    horizon: int = 50,
    seed: int = 0,
    step_size: float = 0.1,
    contact_radius: float = 0.1,
    goal: float = 0.5,
    reward_specs: Sequence[RewardSpec] | None = None,
) -> EnvSpec:
    """1-D pick toy: variable 0 is the end effector, 1..n_blocks are blocks.

    The effector moves by ``step_size * a``; a block moves with it only while
    within ``contact_radius`` of the effector, otherwise it stays put.
    """
    rng = rngs.stream(seed, "env-build")
    n_core = 1 + n_blocks
    parents = np.zeros((n_core + 1, n_core), dtype=bool)
    parents[0, 0] = True
    parents[n_core, 0] = True
    for b in range(1, n_core):
        parents[b, b] = True
        parents[0, b] = True
        parents[n_core, b] = True
    if reward_specs is None:
        reward_specs = [RewardSpec(0, [1], "distance-to-goal", [goal])]
    params = {"step_size": step_size, "contact_radius": contact_radius}
    return _assemble(
        "contact-gated", [[-1.0, 1.0]] * n_core, parents, d_A, noise_std, n_cd, n_ud,
        reward_specs, horizon, seed, params, rng,
    )


def make_discrete_tabular(
    n_values: Sequence[int],
    parents: Sequence[Sequence[int]],
    tables: Sequence[np.ndarray],
    n_action_bins: int,
    ranges: Sequence[Sequence[float]] | None = None,
    d_A: int = 1,
    n_cd: int = 0,
    n_ud: int = 0,
    horizon: int = 20,
    seed: int = 0,
    reward_specs: Sequence[RewardSpec] | None = None,
) -> EnvSpec:
    """Finite-support environment; ``parents[i]`` lists core indices, ``-1`` is the binned action.

    ``tables[i]`` has one axis per parent (sized by that parent's support or
    the number of action bins) plus a last axis of next-value probabilities.
    """
    n_core = len(n_values)
    rng = rngs.stream(seed, "env-build")
    pm = np.zeros((n_core + 1, n_core), dtype=bool)
    for i, ps in enumerate(parents):
        for j in ps:
            pm[n_core if j < 0 else j, i] = True
        expect = tuple(n_action_bins if j < 0 else n_values[j] for j in ps) + (n_values[i],)
        if np.shape(tables[i]) != expect:
            raise ValueError(f"table for s{i + 1} must have shape {expect}, got {np.shape(tables[i])}")
        if not np.allclose(np.sum(tables[i], axis=-1), 1.0):
            raise ValueError(f"table rows for s{i + 1} must sum to 1")
    if ranges is None:
        ranges = [[-1.0, 1.0]] * n_core
    if reward_specs is None:
        reward_specs = [RewardSpec(0, [n_core - 1], "weighted-sum", [1.0])]
    params = {
        "n_values": [int(n) for n in n_values],
        "parents": [[int(j) for j in ps] for ps in parents],
        "tables": [np.asarray(t, dtype=np.float64).tolist() for t in tables],
        "n_action_bins": int(n_action_bins),
    }
    return _assemble(
        "discrete-tabular", ranges, pm, d_A, 0.0, n_cd, n_ud, reward_specs, horizon, seed, params, rng,
    )


def copy_with_noise_table(n_parent: int, n_child: int, copy_prob: float) -> np.ndarray:
    """Child copies the parent's index (mod child support) w.p. ``copy_prob``, else uniform."""
    t = np.full((n_parent, n_child), (1.0 - copy_prob) / n_child)
    for v in range(n_parent):
        t[v, v % n_child] += copy_prob
    return t


def make_discrete_chain(
    n_core: int = 4,
    n_values: int = 4,
    copy_prob: float | Sequence[float] = 0.9,
    horizon: int = 20,
    seed: int = 0,
    n_cd: int = 0,
    n_ud: int = 0,
) -> EnvSpec:
    """Tabular chain: the binned action drives ``s^1``; ``s^i`` copies ``s^{i-1}`` with noise."""
    probs = np.broadcast_to(np.asarray(copy_prob, dtype=np.float64), (n_core,))
    parents = [[-1]] + [[i - 1] for i in range(1, n_core)]
    tables = [copy_with_noise_table(n_values, n_values, probs[i]) for i in range(n_core)]
    return make_discrete_tabular(
        [n_values] * n_core, parents, tables, n_action_bins=n_values, horizon=horizon, seed=seed,
        n_cd=n_cd, n_ud=n_ud,
    )


BUILDERS: dict[str, Callable[..., EnvSpec]] = {
    "copy-chain": make_copy_chain,
    "noisy-linear": make_noisy_linear,
    "contact-gated": make_contact_gated,
    "discrete-chain": make_discrete_chain,
}


def build_env(kind: str, **kwargs) -> EnvSpec:
    try:
        builder = BUILDERS[kind]
    except KeyError:
        raise ValueError(f"unknown environment builder {kind!r}; choose from {sorted(BUILDERS)}") from None
    return builder(**kwargs)


def enumerate_states(env: EnvSpec):
    """All joint states of a fully discrete environment, in C order."""
    sups = env.supports()
    if any(s is None for s in sups):
        raise ValueError("enumeration needs every variable to have a finite support")
    return itertools.product(*sups)
