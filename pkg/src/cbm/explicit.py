"""Explicit Gaussian dynamics baseline and the shared masked Gaussian head.

Each state variable gets an MLP from the masked context to the mean and
log-std of its (normalized) next value.  CMI is the mean log-density ratio
between the full-mask and the ``j``-masked predictions.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import rng as rngs
from .dynamics import (
    DynConfig,
    Normalizer,
    NumericError,
    write_loss_trace,  # noqa: F401  (re-exported for the CLI)
)
from .env import ReplayBuffer
from .nets import CHECKPOINT_VERSION, Mlp, make_adam

LOG_STD_MIN, LOG_STD_MAX = -6.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class GaussianHeads(torch.nn.Module):
    """``n_heads`` MLPs mapping a masked context to (mean, log-std)."""

    def __init__(self, in_dim: int, hidden: Sequence[int], n_heads: int, generator=None):
        super().__init__()
        self.mlp = Mlp([in_dim, *hidden, 2], n_heads, generator)

    def forward(self, x: torch.Tensor):
        out = self.mlp(x)
        return out[..., 0], torch.clamp(out[..., 1], LOG_STD_MIN, LOG_STD_MAX)


def gaussian_log_prob(y: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    z = (y - mean) * torch.exp(-log_std)
    return -0.5 * z * z - log_std - _HALF_LOG_2PI


def unit_drop_masks(drop: torch.Tensor, d_S: int, d_A: int, dtype=torch.float32) -> torch.Tensor:
    """Dimension masks hiding unit ``drop`` (``d_S`` is the action) for each entry."""
    units = torch.ones(*drop.shape, d_S + 1, dtype=torch.bool)
    units.scatter_(-1, drop.unsqueeze(-1), False)
    return torch.cat([units[..., :d_S], units[..., d_S:].expand(*units.shape[:-1], d_A)], -1).to(dtype)


class ExplicitDynModel:
    def __init__(self, d_S: int, d_A: int, config: DynConfig, normalizer: Normalizer, seed: int = 0):
        self.d_S, self.d_A = int(d_S), int(d_A)
        self.config = config
        self.norm = normalizer
        self.seed = int(seed)
        self.kind = "explicit"
        gen = rngs.torch_generator(rngs.derive_seed(seed, "init", 1))
        self.net = GaussianHeads(d_S + d_A, config.trunk_widths, d_S, gen)
        self.opt = make_adam(self.net.parameters(), lr=config.lr)
        self.rng_batch = rngs.stream(seed, "data", 3)
        self.rng_mask = rngs.stream(seed, "data", 4)
        self.steps_done = 0

    @property
    def n_units(self) -> int:
        return self.d_S + 1

    def context_tensor(self, s, a) -> torch.Tensor:
        return torch.as_tensor(self.norm.context(s, a), dtype=torch.float32)

    def label_tensor(self, s, s_next) -> torch.Tensor:
        return torch.as_tensor(self.norm.label(self.norm.raw_label(s, s_next)).T.copy(), dtype=torch.float32)

    def params(self, x: torch.Tensor, mask: torch.Tensor | None = None):
        """Mean and log-std (H, B) for contexts (B, D) under an optional (H, B, D) or (D,) mask."""
        xs = x.unsqueeze(0).expand(self.d_S, -1, -1)
        if mask is not None:
            xs = xs * mask
        return self.net(xs)


def build_explicit(buffer: ReplayBuffer, config: DynConfig, seed: int = 0, state_ranges=None) -> ExplicitDynModel:
    norm = Normalizer.fit(buffer, config.label_mode, config.range_widen, state_ranges, None)
    return ExplicitDynModel(buffer.d_S, buffer.d_A, config, norm, seed)


def train_explicit(model: ExplicitDynModel, buffer: ReplayBuffer, steps: int, trace: list | None = None):
    """Gaussian NLL under the full mask plus one masked unit per datapoint and variable."""
    if len(buffer) == 0:
        raise ValueError("cannot train on an empty buffer")
    trace = [] if trace is None else trace
    data = buffer.arrays()
    x_all = model.context_tensor(data["s"], data["a"])
    y_all = model.label_tensor(data["s"], data["s_next"])
    B = model.config.batch_size
    for _ in range(steps):
        idx = torch.as_tensor(model.rng_batch.integers(0, len(buffer), B))
        x, y = x_all[idx], y_all[:, idx]
        if model.config.mask_schedule == "round-robin":
            drop = torch.full((model.d_S, B), model.steps_done % model.n_units, dtype=torch.int64)
        else:
            drop = torch.as_tensor(model.rng_mask.integers(0, model.n_units, (model.d_S, B)))
        m = unit_drop_masks(drop, model.d_S, model.d_A)
        nll_f = -gaussian_log_prob(y, *model.params(x)).mean(1)
        nll_m = -gaussian_log_prob(y, *model.params(x, m)).mean(1)
        loss = (nll_f + nll_m).sum()
        if not bool(torch.isfinite(loss)):
            raise NumericError(f"non-finite explicit loss at step {model.steps_done}")
        model.opt.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        model.opt.optimizer.step()
        for i, (lf, lm) in enumerate(zip(nll_f.tolist(), nll_m.tolist())):
            trace.append((model.steps_done, i, lf, lm, 0.0, 0.0))
        model.steps_done += 1
    return model, trace


@torch.no_grad()
def explicit_log_ratio(model: ExplicitDynModel, j: int, eval_batch: dict) -> np.ndarray:
    """Per-transition log N(y; full) - log N(y; unit j masked), shape (H, C)."""
    x = model.context_tensor(eval_batch["s"], eval_batch["a"])
    y = model.label_tensor(eval_batch["s"], eval_batch["s_next"])
    m = unit_drop_masks(torch.tensor(j), model.d_S, model.d_A)
    lp_full = gaussian_log_prob(y, *model.params(x)).double()
    lp_mask = gaussian_log_prob(y, *model.params(x, m)).double()
    return (lp_full - lp_mask).numpy()


def explicit_cmi(model: ExplicitDynModel, i: int, j: int, eval_batch: dict) -> float:
    if len(eval_batch["s"]) == 0:
        raise ValueError("empty evaluation batch")
    return float(explicit_log_ratio(model, j, eval_batch)[i].mean())


def explicit_cmi_matrix(model: ExplicitDynModel, eval_buffer: ReplayBuffer, n_eval: int = 2000, clamp: bool = True):
    from .cmi import CmiMatrix

    if len(eval_buffer) < n_eval:
        raise ValueError(f"evaluation buffer holds {len(eval_buffer)} records, {n_eval} requested")
    data = eval_buffer.take(np.arange(n_eval))
    vals = np.stack([explicit_log_ratio(model, j, data).mean(1) for j in range(model.n_units)])
    if clamp:
        vals = np.maximum(vals, 0.0)
    return CmiMatrix(vals, n_eval, 0, "explicit-likelihood")


@torch.no_grad()
def predict_mean(model: ExplicitDynModel, s, a) -> np.ndarray:
    s2 = np.atleast_2d(np.asarray(s, dtype=np.float64))
    mean, _ = model.params(model.context_tensor(s2, np.atleast_2d(a)))
    raw = model.norm.unlabel(mean.double().numpy().T)
    if model.norm.label_mode == "delta":
        raw = s2 + raw
    return raw[0] if np.ndim(s) == 1 else raw


# ---------------------------------------------------------------------------
# persistence


def gaussian_checkpoint(net: GaussianHeads, head: int, kind: str, owner: int, extra: dict) -> dict:
    params = {name: p.detach()[head].double().tolist() for name, p in net.named_parameters()}
    return {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "owner_variable": int(owner),
        "widths": list(net.mlp.widths),
        "parameters": params,
        **extra,
    }


def load_gaussian_heads(docs: Sequence[dict]) -> GaussianHeads:
    widths = docs[0]["widths"]
    net = GaussianHeads(widths[0], widths[1:-1], len(docs))
    with torch.no_grad():
        for name, p in net.named_parameters():
            p.copy_(torch.tensor(np.array([d["parameters"][name] for d in docs]), dtype=p.dtype))
    return net


def save_explicit(model: ExplicitDynModel, out_dir: str | Path, prefix: str = "explicit") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(model.d_S):
        name = f"{prefix}_s{i + 1}.json"
        doc = gaussian_checkpoint(model.net, i, "explicit", i, {})
        (out / name).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")
        files.append(name)
    manifest = {
        "kind": "explicit",
        "d_S": model.d_S,
        "d_A": model.d_A,
        "seed": model.seed,
        "steps_done": model.steps_done,
        "config": model.config.to_dict(),
        "normalizer": model.norm.to_dict(),
        "files": files,
    }
    path = out / f"{prefix}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_explicit(manifest_path: str | Path) -> ExplicitDynModel:
    path = Path(manifest_path)
    m = json.loads(path.read_text(encoding="utf-8"))
    model = ExplicitDynModel(m["d_S"], m["d_A"], DynConfig.from_dict(m["config"]), Normalizer.from_dict(m["normalizer"]), m["seed"])
    docs = [json.loads((path.parent / f).read_text(encoding="utf-8")) for f in m["files"]]
    model.net.load_state_dict(load_gaussian_heads(docs).state_dict())
    model.opt = make_adam(model.net.parameters(), lr=model.config.lr)
    model.steps_done = int(m["steps_done"])
    return model
