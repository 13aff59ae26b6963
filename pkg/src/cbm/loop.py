"""Task learning with a learned state abstraction.

Per task: a reward model and a SAC agent are created, then every environment
step runs, in order, data collection, model updates, the periodic abstraction
update and the policy update.  When the abstraction changes the policy is
reset and retrained offline from the preserved replay buffer.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import rng as rngs
from .abstraction import AbstractionMask, bisim_abstraction, cdl_abstraction, full_mask, oracle_mask
from .cmi import binarize, cmi_matrix
from .dynamics import DynModel, train_dyn
from .env import EnvSpec, ReplayBuffer, reset, step
from .reward import RewardConfig, build_reward_net, parents_from_cmi, reward_cmi_matrix, train_reward
from .sac import SacAgent, SacConfig, alpha_at, reset_policy, sac_update

log = logging.getLogger(__name__)

MASK_SOURCES = ("bisimulation", "cdl", "oracle", "full")
TRAINING_LOG_HEADER = ("episode", "task", "return", "mask_size", "n_resets", "alpha")


@dataclass
class LoopConfig:
    provenance: str = "bisimulation"
    tasks: tuple = (0,)
    steps_per_task: int = 10_000
    eval_cadence: int = 2000
    eps: float = 0.02
    n_eval: int = 2000
    n_negatives: int = 256
    dyn_online: bool = False
    dyn_updates_per_step: int = 1
    reward_updates_per_step: int = 1
    reset_updates: int = 1000
    simultaneous: bool = False

    def __post_init__(self):
        self.tasks = tuple(int(k) for k in self.tasks)
        if self.provenance not in MASK_SOURCES:
            raise ValueError(f"provenance must be one of {MASK_SOURCES}")
        if self.eval_cadence < 1 or self.steps_per_task < 1:
            raise ValueError("eval_cadence and steps_per_task must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LoopConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown abstraction/run config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TaskState:
    task: int
    agent: SacAgent
    buffer: ReplayBuffer
    reward_net: object = None
    state: np.ndarray | None = None
    t: int = 0
    t_episode: int = 0
    episode: int = 0
    ep_return: float = 0.0
    last_reset: int = -(10**18)
    env_rng: np.random.Generator | None = None
    act_rng: np.random.Generator | None = None


@dataclass
class RunResult:
    log_rows: list = field(default_factory=list)
    mask_history: list = field(default_factory=list)
    events: list = field(default_factory=list)
    cmi_snapshots: list = field(default_factory=list)
    agents: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)

    def returns(self, task: int) -> list[float]:
        return [row[2] for row in self.log_rows if row[1] == task]


def _initial_mask(env: EnvSpec, cfg: LoopConfig, task: int) -> AbstractionMask:
    if cfg.provenance == "oracle":
        return oracle_mask(env.true_graph, task)
    return full_mask(env.d_S, task)


def _learned_mask(cfg: LoopConfig, graph, parents: list[int], d_S: int, task: int) -> AbstractionMask:
    if cfg.provenance == "cdl":
        return cdl_abstraction(graph, task)
    if not parents:
        return full_mask(d_S, task)
    return bisim_abstraction(graph, parents, task)


def _window(buffer: ReplayBuffer, n: int) -> ReplayBuffer:
    k = min(n, len(buffer))
    return buffer.subset(range(len(buffer) - k, len(buffer)))


def _evaluate(env, cfg, ts: TaskState, dyn: DynModel | None, graph_cache: dict, result: RunResult):
    """Recompute dynamics and reward CMI on recent data and derive the mask."""
    recent = _window(ts.buffer, cfg.n_eval)
    if dyn is None:
        raise ValueError("a learned abstraction needs a dynamics model")
    key = (id(dyn), dyn.steps_done, len(recent)) if cfg.dyn_online else ("fixed", ts.task)
    if key not in graph_cache:
        m = cmi_matrix(dyn, "cbm-g-minus-psi", recent, n_eval=len(recent), n_negatives=cfg.n_negatives,
                       seed=ts.agent.seed + ts.t)
        graph_cache[key] = m
    dyn_cmi = graph_cache[key]
    graph = binarize(dyn_cmi, cfg.eps)
    rew = reward_cmi_matrix(ts.reward_net, recent.arrays())[0]
    parents = parents_from_cmi(rew, cfg.eps)
    if not parents and cfg.provenance == "bisimulation":
        log.warning("task %d: no reward parents detected at step %d, using the full mask", ts.task, ts.t)
    result.cmi_snapshots.append(
        {"task": ts.task, "step": ts.t, "dynamics": dyn_cmi.values.tolist(), "reward": rew.tolist()}
    )
    return _learned_mask(cfg, graph, parents, env.d_S, ts.task), parents


def _task_state(env: EnvSpec, cfg: LoopConfig, sac: SacConfig, task: int, seed: int) -> TaskState:
    agent = SacAgent(env.d_S, env.d_A, env.lo, env.hi, _initial_mask(env, cfg, task), sac, cfg.steps_per_task,
                     rngs.derive_seed(seed, "policy", 100, task))
    buf = ReplayBuffer(cfg.steps_per_task, env.d_S, env.d_A, 1, rngs.derive_seed(seed, "data", 100, task))
    return TaskState(task, agent, buf, env_rng=rngs.stream(seed, "env", 100, task),
                     act_rng=rngs.stream(seed, "policy", 200, task))


def _iteration(env, cfg, sac, rcfg, ts: TaskState, dyn, graph_cache, result, seed) -> None:
    ev = result.events
    # collect
    if ts.state is None or ts.t_episode == env.horizon:
        ts.state = reset(env, ts.env_rng)
        ts.t_episode = 0
        ts.ep_return = 0.0
    if ts.t < sac.start_steps:
        a = ts.act_rng.uniform(-1.0, 1.0, env.d_A)
    else:
        a = ts.agent.act(ts.state)
    nxt, r = step(env, ts.state, a, ts.env_rng)
    ts.buffer.add(ts.state, a, r[ts.task : ts.task + 1], nxt, episode_start=ts.t_episode == 0)
    ts.ep_return += float(r[ts.task])
    ts.state = nxt
    ts.t_episode += 1
    ts.t += 1
    ev.append((ts.task, ts.t, "collect"))
    learned = cfg.provenance in ("bisimulation", "cdl")

    # model updates
    if learned and cfg.dyn_online and dyn is not None and len(ts.buffer) >= dyn.config.batch_size:
        train_dyn(dyn, ts.buffer, cfg.dyn_updates_per_step)
        ev.append((ts.task, ts.t, "dynamics"))
    if learned and ts.t >= sac.start_steps:
        if ts.reward_net is None:
            ts.reward_net = build_reward_net(ts.buffer, rcfg, rngs.derive_seed(seed, "init", 100, ts.task),
                                             state_ranges=env.ranges)
        train_reward(ts.reward_net, ts.buffer, cfg.reward_updates_per_step)
        ev.append((ts.task, ts.t, "reward"))

    # abstraction
    if learned and ts.reward_net is not None and ts.t % cfg.eval_cadence == 0:
        mask, parents = _evaluate(env, cfg, ts, dyn, graph_cache, result)
        changed = not mask.same_as(ts.agent.mask)
        allowed = ts.t - ts.last_reset >= cfg.eval_cadence
        did_reset = changed and allowed
        if did_reset:
            ts.agent.set_mask(mask)
            reset_policy(ts.agent)
            ts.last_reset = ts.t
            for _ in range(cfg.reset_updates):
                sac_update(ts.agent, ts.buffer.sample(sac.batch_size, ts.act_rng), ts.t)
        result.mask_history.append(
            {"task": ts.task, "step": ts.t, "kept": ts.agent.mask.indices, "candidate": mask.indices,
             "reward_parents": parents, "changed": changed, "reset": did_reset}
        )
        ev.append((ts.task, ts.t, "abstraction"))

    # policy
    if ts.t >= sac.start_steps:
        for _ in range(sac.updates_per_step):
            sac_update(ts.agent, ts.buffer.sample(sac.batch_size, ts.act_rng), ts.t)
        ev.append((ts.task, ts.t, "policy"))

    if ts.t_episode == env.horizon:
        alpha = alpha_at(ts.agent.schedule, ts.t)
        result.log_rows.append((ts.episode, ts.task, ts.ep_return, ts.agent.mask.size, ts.agent.n_resets, alpha))
        ts.episode += 1


def run_cbm(
    env: EnvSpec,
    config: LoopConfig | None = None,
    sac: SacConfig | None = None,
    reward: RewardConfig | None = None,
    dyn: DynModel | None = None,
    seed: int = 0,
) -> RunResult:
    """Train one agent per task; ``dyn`` is the (optionally pretrained) dynamics model."""
    cfg = config or LoopConfig()
    sac = sac or SacConfig()
    rcfg = reward or RewardConfig()
    for k in cfg.tasks:
        if not 0 <= k < env.n_tasks:
            raise ValueError(f"task {k} is not defined by the environment")
    if cfg.provenance in ("bisimulation", "cdl") and dyn is None:
        raise ValueError(f"provenance {cfg.provenance!r} needs a dynamics model")
    result = RunResult()
    graph_cache: dict = {}
    states = [_task_state(env, cfg, sac, k, seed) for k in cfg.tasks]
    for ts in states:
        result.mask_history.append(
            {"task": ts.task, "step": 0, "kept": ts.agent.mask.indices, "candidate": ts.agent.mask.indices,
             "reward_parents": [], "changed": False, "reset": False}
        )
    groups = [states] if cfg.simultaneous else [[ts] for ts in states]
    for group in groups:
        for _ in range(cfg.steps_per_task):
            for ts in group:
                _iteration(env, cfg, sac, rcfg, ts, dyn, graph_cache, result, seed)
    for ts in states:
        result.agents[ts.task] = ts.agent
        result.masks[ts.task] = ts.agent.mask
    return result


def episodes_to_threshold(returns, threshold: float, window: int = 5) -> int:
    """First episode count at which the trailing mean return reaches ``threshold``.

    Returns ``len(returns) + 1`` when the threshold is never reached.
    """
    r = np.asarray(returns, dtype=np.float64)
    for k in range(window, len(r) + 1):
        if r[k - window : k].mean() >= threshold:
            return k
    return len(r) + 1


def write_training_log(rows, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAINING_LOG_HEADER)
        for ep, task, ret, size, n_resets, alpha in rows:
            w.writerow([ep, task, repr(float(ret)), size, n_resets, repr(float(alpha))])


def write_mask_history(history, path: str | Path) -> None:
    Path(path).write_text(json.dumps(history, indent=2, sort_keys=True) + "\n", encoding="utf-8")
