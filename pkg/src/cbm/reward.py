"""Masked reward predictor and the reward-parent test.

One Gaussian head per task maps the masked context to the mean and log-std
of the standardized reward.  A state variable ``j`` is a reward parent when
the mean log-density ratio between full-mask and ``j``-masked predictions
reaches the threshold.  The action is never masked.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import rng as rngs
from .dynamics import NumericError, _to_unit
from .env import ReplayBuffer
from .explicit import GaussianHeads, gaussian_checkpoint, gaussian_log_prob, load_gaussian_heads, unit_drop_masks
from .nets import make_adam

DEFAULT_EPS = 0.02


@dataclass
class RewardConfig:
    hidden: tuple = (128, 128)
    lr: float = 3e-4
    batch_size: int = 32
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        self.hidden = tuple(int(w) for w in self.hidden)


class RewardNet:
    """Reward heads for ``n_tasks`` tasks sharing one context normalization."""

    def __init__(
        self,
        d_S: int,
        d_A: int,
        n_tasks: int,
        ctx_lo,
        ctx_hi,
        r_mean,
        r_std,
        config: RewardConfig | None = None,
        seed: int = 0,
    ):
        self.d_S, self.d_A, self.n_tasks = int(d_S), int(d_A), int(n_tasks)
        self.config = config or RewardConfig()
        self.ctx_lo = np.asarray(ctx_lo, dtype=np.float64)
        self.ctx_hi = np.asarray(ctx_hi, dtype=np.float64)
        self.r_mean = np.asarray(r_mean, dtype=np.float64)
        self.r_std = np.asarray(r_std, dtype=np.float64)
        self.seed = int(seed)
        gen = rngs.torch_generator(rngs.derive_seed(seed, "init", 2))
        self.net = GaussianHeads(d_S + d_A, self.config.hidden, n_tasks, gen)
        self.opt = make_adam(self.net.parameters(), lr=self.config.lr)
        self.rng_batch = rngs.stream(seed, "data", 5)
        self.rng_mask = rngs.stream(seed, "data", 6)
        self.steps_done = 0

    def context_tensor(self, s, a) -> torch.Tensor:
        x = np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=-1)
        return torch.as_tensor(_to_unit(x, self.ctx_lo, self.ctx_hi), dtype=torch.float32)

    def target_tensor(self, r) -> torch.Tensor:
        return torch.as_tensor(((np.atleast_2d(r) - self.r_mean) / self.r_std).T.copy(), dtype=torch.float32)

    def params(self, x: torch.Tensor, mask: torch.Tensor | None = None):
        xs = x.unsqueeze(0).expand(self.n_tasks, -1, -1)
        if mask is not None:
            xs = xs * mask
        return self.net(xs)

    @torch.no_grad()
    def predict(self, s, a, mask_units=None) -> np.ndarray:
        """Predicted reward means in raw units, shape (B, n_tasks)."""
        m = None
        if mask_units is not None:
            units = torch.as_tensor(np.asarray(mask_units, dtype=bool))
            m = torch.cat([units[: self.d_S], units[self.d_S :].expand(self.d_A)]).float()
        mean, _ = self.params(self.context_tensor(s, a), m)
        return mean.double().numpy().T * self.r_std + self.r_mean


def build_reward_net(buffer: ReplayBuffer, config: RewardConfig | None = None, seed: int = 0, state_ranges=None) -> RewardNet:
    d = buffer.arrays()
    if state_ranges is not None:
        sr = np.asarray(state_ranges, dtype=np.float64)
        s_lo, s_hi = sr[:, 0], sr[:, 1]
    else:
        s_lo, s_hi = d["s"].min(0), d["s"].max(0)
    r_mean = d["r"].mean(0)
    r_std = d["r"].std(0)
    r_std = np.where(r_std > 1e-12, r_std, 1.0)
    return RewardNet(
        buffer.d_S, buffer.d_A, buffer.n_tasks,
        np.concatenate([s_lo, -np.ones(buffer.d_A)]), np.concatenate([s_hi, np.ones(buffer.d_A)]),
        r_mean, r_std, config, seed,
    )


def train_reward(net: RewardNet, buffer: ReplayBuffer, steps: int, trace: list | None = None):
    """Gaussian NLL under the full mask plus one masked state variable per datapoint."""
    if len(buffer) == 0:
        raise ValueError("cannot train on an empty buffer")
    trace = [] if trace is None else trace
    data = buffer.arrays()
    x_all = net.context_tensor(data["s"], data["a"])
    r_all = net.target_tensor(data["r"])
    B = net.config.batch_size
    K = net.n_tasks
    for _ in range(steps):
        idx = torch.as_tensor(net.rng_batch.integers(0, len(buffer), B))
        x, r = x_all[idx], r_all[:, idx]
        drop = torch.as_tensor(net.rng_mask.integers(0, net.d_S, (K, B)))
        m = unit_drop_masks(drop, net.d_S, net.d_A)
        nll_f = -gaussian_log_prob(r, *net.params(x)).mean(1)
        nll_m = -gaussian_log_prob(r, *net.params(x, m)).mean(1)
        loss = (nll_f + nll_m).sum()
        if not bool(torch.isfinite(loss)):
            raise NumericError(f"non-finite reward loss at step {net.steps_done}")
        net.opt.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        net.opt.optimizer.step()
        for k, (lf, lm) in enumerate(zip(nll_f.tolist(), nll_m.tolist())):
            trace.append((net.steps_done, k, lf, lm))
        net.steps_done += 1
    return net, trace


@torch.no_grad()
def reward_log_ratio(net: RewardNet, j: int, eval_batch: dict) -> np.ndarray:
    """Per-transition log p(r|x) - log p(r|x without s^j), shape (n_tasks, C)."""
    if not 0 <= j < net.d_S:
        raise ValueError(f"reward parents are state variables 0..{net.d_S - 1}; got {j}")
    x = net.context_tensor(eval_batch["s"], eval_batch["a"])
    r = net.target_tensor(eval_batch["r"])
    m = unit_drop_masks(torch.tensor(j), net.d_S, net.d_A)
    return (gaussian_log_prob(r, *net.params(x)).double() - gaussian_log_prob(r, *net.params(x, m)).double()).numpy()


def reward_cmi(net: RewardNet, j: int, eval_batch: dict, task: int = 0) -> float:
    if len(eval_batch["s"]) == 0:
        raise ValueError("empty evaluation batch")
    return float(reward_log_ratio(net, j, eval_batch)[task].mean())


def reward_cmi_matrix(net: RewardNet, eval_batch: dict) -> np.ndarray:
    """CMI of every state variable for every task, shape (n_tasks, d_S)."""
    return np.stack([reward_log_ratio(net, j, eval_batch).mean(1) for j in range(net.d_S)], axis=1)


def parents_from_cmi(values: Sequence[float], eps: float = DEFAULT_EPS) -> list[int]:
    """Indices whose CMI reaches ``eps`` (the boundary counts as a parent)."""
    if not eps > 0:
        raise ValueError("threshold must be positive")
    return [int(j) for j in np.nonzero(np.asarray(values, dtype=np.float64) >= eps)[0]]


def reward_parents(net: RewardNet, eval_batch: dict, eps: float | None = None, task: int = 0) -> list[int]:
    eps = net.config.eps if eps is None else eps
    return parents_from_cmi(reward_cmi_matrix(net, eval_batch)[task], eps)


def write_reward_cmi_csv(values: np.ndarray, path: str | Path, names: Sequence[str] | None = None) -> None:
    values = np.atleast_2d(values)
    names = list(names) if names is not None else [f"s{k + 1}" for k in range(values.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", *names])
        for k, row in enumerate(values):
            w.writerow([k, *[repr(float(v)) for v in row]])


def save_parents(parents: dict[int, list[int]], path: str | Path) -> None:
    doc = [{"task": int(k), "parents": [int(j) for j in v]} for k, v in sorted(parents.items())]
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def save_reward_net(net: RewardNet, out_dir: str | Path, prefix: str = "reward") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k in range(net.n_tasks):
        name = f"{prefix}_task{k}.json"
        doc = gaussian_checkpoint(net.net, k, "reward", -1, {"task": k})
        (out / name).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")
        files.append(name)
    manifest = {
        "kind": "reward",
        "d_S": net.d_S,
        "d_A": net.d_A,
        "n_tasks": net.n_tasks,
        "seed": net.seed,
        "steps_done": net.steps_done,
        "hidden": list(net.config.hidden),
        "lr": net.config.lr,
        "batch_size": net.config.batch_size,
        "eps": net.config.eps,
        "ctx_lo": net.ctx_lo.tolist(),
        "ctx_hi": net.ctx_hi.tolist(),
        "r_mean": net.r_mean.tolist(),
        "r_std": net.r_std.tolist(),
        "files": files,
    }
    path = out / f"{prefix}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_reward_net(manifest_path: str | Path) -> RewardNet:
    path = Path(manifest_path)
    m = json.loads(path.read_text(encoding="utf-8"))
    cfg = RewardConfig(m["hidden"], m["lr"], m["batch_size"], m["eps"])
    net = RewardNet(m["d_S"], m["d_A"], m["n_tasks"], m["ctx_lo"], m["ctx_hi"], m["r_mean"], m["r_std"], cfg, m["seed"])
    docs = [json.loads((path.parent / f).read_text(encoding="utf-8")) for f in m["files"]]
    net.net.load_state_dict(load_gaussian_heads(docs).state_dict())
    net.opt = make_adam(net.net.parameters(), lr=cfg.lr)
    net.steps_done = int(m["steps_done"])
    return net
