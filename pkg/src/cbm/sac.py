"""Minimal soft actor-critic acting on masked states.

The entropy temperature follows a fixed exponential decay instead of being
tuned automatically.  States are scaled to [-1, 1] per variable and then the
abstraction mask zeroes the ignored components, so the networks are exactly
invariant to anything outside the mask.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

from . import rng as rngs
from .abstraction import AbstractionMask
from .dynamics import NumericError, _to_unit
from .nets import Mlp

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


@dataclass
class SacConfig:
    hidden: tuple = (64, 64)
    gamma: float = 0.99
    tau: float = 5e-3
    batch_size: int = 256
    lr: float = 3e-4
    alpha_start: float = 0.2
    alpha_finish: float = 0.01
    alpha_decay: float = 5.0
    grad_clip: float = 10.0
    start_steps: int = 1000
    updates_per_step: int = 1

    def __post_init__(self):
        self.hidden = tuple(int(w) for w in self.hidden)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SacConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown sac config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EntropySchedule:
    alpha_start: float
    alpha_finish: float
    alpha_decay: float
    t_total: int

    def __post_init__(self):
        if self.t_total < 1:
            raise ValueError("t_total must be positive")
        if self.alpha_decay < 0:
            raise ValueError("alpha_decay must be non-negative")


def alpha_at(schedule: EntropySchedule, t: float) -> float:
    """(start - finish) * exp(-decay * t / t_total) + finish."""
    if not 0 <= t <= schedule.t_total:
        raise ValueError(f"t={t} outside [0, {schedule.t_total}]")
    if math.isinf(schedule.alpha_decay):
        return schedule.alpha_finish if t > 0 else schedule.alpha_start
    span = schedule.alpha_start - schedule.alpha_finish
    return span * math.exp(-schedule.alpha_decay * t / schedule.t_total) + schedule.alpha_finish


class SacAgent:
    def __init__(
        self,
        d_S: int,
        d_A: int,
        state_lo,
        state_hi,
        mask: AbstractionMask,
        config: SacConfig | None = None,
        t_total: int = 10_000,
        seed: int = 0,
    ):
        self.d_S, self.d_A = int(d_S), int(d_A)
        self.config = config or SacConfig()
        self.state_lo = np.asarray(state_lo, dtype=np.float64)
        self.state_hi = np.asarray(state_hi, dtype=np.float64)
        if len(mask.kept) != self.d_S:
            raise ValueError("mask length does not match d_S")
        self.mask = mask
        self.seed = int(seed)
        c = self.config
        self.schedule = EntropySchedule(c.alpha_start, c.alpha_finish, c.alpha_decay, t_total)
        self.n_resets = 0
        self.n_updates = 0
        self.gen = rngs.torch_generator(rngs.derive_seed(seed, "policy", 1))
        self._build(rngs.derive_seed(seed, "init", 10))

    def _build(self, init_seed: int) -> None:
        g = rngs.torch_generator(init_seed)
        h = self.config.hidden
        self.actor = Mlp([self.d_S, *h, 2 * self.d_A], 1, g)
        self.critic = Mlp([self.d_S + self.d_A, *h, 1], 2, g)
        self.target = Mlp([self.d_S + self.d_A, *h, 1], 2)
        self.target.load_state_dict(self.critic.state_dict())
        for p in self.target.parameters():
            p.requires_grad_(False)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=self.config.lr)
        self.critic_opt = torch.optim.Adam(self.critic.parameters(), lr=self.config.lr)

    # inputs ---------------------------------------------------------------
    def observe(self, s) -> torch.Tensor:
        """Scale to [-1, 1] and zero the masked-out variables."""
        x = _to_unit(np.atleast_2d(np.asarray(s, dtype=np.float64)), self.state_lo, self.state_hi)
        x = np.where(self.mask.kept, x, 0.0)
        return torch.as_tensor(x, dtype=torch.float32)

    def set_mask(self, mask: AbstractionMask) -> None:
        if len(mask.kept) != self.d_S:
            raise ValueError("mask length does not match d_S")
        self.mask = mask

    # policy ---------------------------------------------------------------
    def _dist(self, obs: torch.Tensor):
        out = self.actor(obs.unsqueeze(0))[0]
        mean, log_std = out[:, : self.d_A], out[:, self.d_A :]
        return mean, torch.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)

    def sample_action(self, obs: torch.Tensor, generator: torch.Generator | None = None):
        """Reparameterized tanh-Gaussian sample and its log-density."""
        mean, log_std = self._dist(obs)
        eps = torch.randn(mean.shape, generator=generator or self.gen)
        u = mean + torch.exp(log_std) * eps
        logp = (-0.5 * eps * eps - log_std - 0.5 * math.log(2 * math.pi)).sum(-1)
        # log |d tanh(u) / du| written in a numerically stable form
        logp = logp - (2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u))).sum(-1)
        return torch.tanh(u), logp

    @torch.no_grad()
    def act(self, s, deterministic: bool = False) -> np.ndarray:
        obs = self.observe(s)
        if deterministic:
            a = torch.tanh(self._dist(obs)[0])
        else:
            a, _ = self.sample_action(obs)
        return a.double().numpy()[0]

    def q_values(self, obs: torch.Tensor, action: torch.Tensor, net: Mlp | None = None) -> torch.Tensor:
        """Both critics, shape (2, B)."""
        x = torch.cat([obs, action], -1).unsqueeze(0).expand(2, -1, -1)
        return (net or self.critic)(x)[..., 0]


def _batch(agent: SacAgent, batch: dict):
    s = agent.observe(batch["s"])
    s2 = agent.observe(batch["s_next"])
    a = torch.as_tensor(np.asarray(batch["a"]), dtype=torch.float32)
    r = torch.as_tensor(np.asarray(batch["r"]).reshape(len(batch["s"]), -1)[:, 0], dtype=torch.float32)
    return s, a, r, s2


def soft_update(target: torch.nn.Module, source: torch.nn.Module, tau: float) -> None:
    with torch.no_grad():
        for tp, p in zip(target.parameters(), source.parameters()):
            tp.mul_(1.0 - tau).add_(tau * p)


def sac_update(agent: SacAgent, batch: dict, t: float = 0.0) -> dict:
    """One critic step, one actor step and a soft target update."""
    c = agent.config
    alpha = alpha_at(agent.schedule, min(max(t, 0), agent.schedule.t_total))
    s, a, r, s2 = _batch(agent, batch)
    with torch.no_grad():
        a2, logp2 = agent.sample_action(s2)
        q_next = agent.q_values(s2, a2, agent.target).min(0).values
        target = r + c.gamma * (q_next - alpha * logp2)
    q = agent.q_values(s, a)
    critic_loss = ((q - target) ** 2).mean(1).sum()
    agent.critic_opt.zero_grad(set_to_none=True)
    critic_loss.backward()
    torch.nn.utils.clip_grad_norm_(agent.critic.parameters(), c.grad_clip)
    agent.critic_opt.step()

    a_new, logp = agent.sample_action(s)
    q_pi = agent.q_values(s, a_new).min(0).values
    actor_loss = (alpha * logp - q_pi).mean()
    agent.actor_opt.zero_grad(set_to_none=True)
    actor_loss.backward()
    torch.nn.utils.clip_grad_norm_(agent.actor.parameters(), c.grad_clip)
    agent.actor_opt.step()

    soft_update(agent.target, agent.critic, c.tau)
    agent.n_updates += 1
    cl, al = float(critic_loss.detach()), float(actor_loss.detach())
    if not (math.isfinite(cl) and math.isfinite(al)):
        raise NumericError(f"non-finite SAC loss after {agent.n_updates} updates")
    return {"critic_loss": cl, "actor_loss": al, "alpha": alpha, "entropy": -float(logp.detach().mean())}


@torch.no_grad()
def critic_loss_on(agent: SacAgent, batch: dict, t: float = 0.0) -> float:
    """Critic regression loss without an update (fixed sampling generator)."""
    c = agent.config
    alpha = alpha_at(agent.schedule, min(max(t, 0), agent.schedule.t_total))
    s, a, r, s2 = _batch(agent, batch)
    a2, logp2 = agent.sample_action(s2, rngs.torch_generator(0))
    q_next = agent.q_values(s2, a2, agent.target).min(0).values
    target = r + c.gamma * (q_next - alpha * logp2)
    return float(((agent.q_values(s, a) - target) ** 2).mean(1).sum())


def reset_policy(agent: SacAgent) -> SacAgent:
    """Fresh actor, critics and optimizers from the next reset stream; schedules are untouched."""
    agent.n_resets += 1
    agent._build(rngs.derive_seed(agent.seed, "init", 10, agent.n_resets))
    return agent
