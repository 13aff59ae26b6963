"""Exact reference quantities.

On discrete-tabular environments the joint distribution of (state, binned
action, next value of one variable) is enumerated exactly, so conditional
mutual information can be computed without sampling.  A central
finite-difference gradient serves as the reference for analytic gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .env import EnvSpec

MAX_SUPPORT = 10**7


@dataclass
class JointTable:
    """p(x, y) over core states, action bin and the child's next value; axes in that order."""

    probs: np.ndarray
    child: int
    sizes: tuple

    @property
    def n_state(self) -> int:
        return len(self.sizes) - 2

    def check(self, tol: float = 1e-12) -> None:
        if np.any(self.probs < 0):
            raise ValueError("negative probability in joint table")
        total = math.fsum(self.probs.ravel().tolist())
        if abs(total - 1.0) > tol:
            raise ValueError(f"joint table sums to {total!r}")


def _require_tabular(env: EnvSpec) -> None:
    if env.transition_kind != "discrete-tabular":
        raise ValueError("the exact oracle needs a discrete-tabular environment")
    if env.n_controllable_distractors or env.n_uncontrollable_distractors:
        raise ValueError("the exact oracle does not support continuous distractors")


def action_distribution(env: EnvSpec, policy=None) -> np.ndarray:
    """Probability of each action bin; ``None`` means uniform actions on [-1, 1]."""
    n = int(env.params["n_action_bins"])
    if policy is None or (isinstance(policy, str) and policy == "uniform-random"):
        return np.full(n, 1.0 / n)
    p = np.asarray(policy, dtype=np.float64)
    if p.shape != (n,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
        raise ValueError(f"policy must be a probability vector over {n} action bins")
    return p / p.sum()


def _factors(env: EnvSpec):
    """Per-variable conditional tables with einsum subscripts (action axis = n_core)."""
    n = env.n_core
    out = []
    for i in range(n):
        parents = env.params["parents"][i]
        table = np.asarray(env.params["tables"][i], dtype=np.float64)
        table = table / table.sum(-1, keepdims=True)
        axes = [n if j < 0 else j for j in parents]
        out.append((table, axes))
    return out


def _guard(env: EnvSpec, child_size: int) -> tuple:
    sizes = tuple(int(v) for v in env.params["n_values"])
    n_bins = int(env.params["n_action_bins"])
    total = int(np.prod(sizes, dtype=np.int64)) * n_bins * int(child_size)
    if total > MAX_SUPPORT:
        raise ValueError(f"joint support has {total} entries, above the limit of {MAX_SUPPORT}")
    return sizes + (n_bins,)


def visitation(env: EnvSpec, policy=None) -> np.ndarray:
    """Time-averaged state distribution over one episode from a uniform reset."""
    _require_tabular(env)
    sizes = _guard(env, 1)
    n = env.n_core
    pi = action_distribution(env, policy)
    facs = _factors(env)
    p = np.full(sizes[:n], 1.0 / np.prod(sizes[:n]))
    acc = np.zeros_like(p)
    out_axes = list(range(n + 1, 2 * n + 1))
    for _ in range(env.horizon):
        acc += p
        ops = [p, list(range(n)), pi, [n]]
        for i, (table, axes) in enumerate(facs):
            ops += [table, axes + [n + 1 + i]]
        p = np.einsum(*ops, out_axes, optimize=True)
    return acc / env.horizon


def joint_table(env: EnvSpec, policy, i: int) -> JointTable:
    _require_tabular(env)
    n = env.n_core
    table, axes = _factors(env)[i]
    sizes = _guard(env, table.shape[-1])
    px = visitation(env, policy)[..., None] * action_distribution(env, policy)  # (sizes..., n_bins)
    # broadcast p(y | parents) onto the full context grid
    order = np.argsort(axes)
    cond = np.transpose(table, list(order) + [len(axes)])
    shape = [sizes[k] if k in axes else 1 for k in range(n + 1)] + [table.shape[-1]]
    cond = cond.reshape(shape)
    probs = px[..., None] * cond
    return JointTable(probs, i, sizes + (table.shape[-1],))


def _cmi_from_joint(jt: JointTable, j: int) -> float:
    """sum p(x, y) log p(y | x) / p(y | x without j), with 0 log 0 = 0."""
    P = jt.probs
    px = P.sum(-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p_y_x = np.where(px > 0, P / px, 0.0)
        P_nj = P.sum(axis=j, keepdims=True)
        px_nj = px.sum(axis=j, keepdims=True)
        p_y_nj = np.where(px_nj > 0, P_nj / px_nj, 0.0)
        ratio = np.where(P > 0, p_y_x / np.broadcast_to(p_y_nj, P.shape), 1.0)
        terms = np.where(P > 0, P * np.log(ratio), 0.0)
    return math.fsum(terms.ravel().tolist())


def oracle_cmi(env: EnvSpec, policy, i: int, j: int) -> float:
    """Exact CMI (nats) between unit ``j`` (``j == n_core`` is the action) and s'^i."""
    jt = joint_table(env, policy, i)
    if not 0 <= j <= env.n_core:
        raise ValueError(f"parent unit {j} out of range")
    return _cmi_from_joint(jt, j)


def oracle_matrix(env: EnvSpec, policy=None) -> np.ndarray:
    _require_tabular(env)
    n = env.n_core
    out = np.zeros((n + 1, n))
    for i in range(n):
        jt = joint_table(env, policy, i)
        for j in range(n + 1):
            out[j, i] = _cmi_from_joint(jt, j)
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central differences along every coordinate of ``x``."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = float(f(x))
        flat[k] = old - h
        fm = float(f(x))
        flat[k] = old
        gf[k] = (fp - fm) / (2.0 * h)
    return g
