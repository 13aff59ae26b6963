"""Implicit (energy-based) per-variable dynamics models.

One :class:`~cbm.nets.ScoreNet` head per state variable scores candidate
next values of that variable against a masked context.  Training minimizes
the regularized InfoNCE loss under the full mask (the ``g`` role) and under
one masked context per datapoint (the ``psi_j`` role).  Prediction picks the
best of many uniformly drawn candidates.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import rng as rngs
from .env import ReplayBuffer
from .nets import (
    ScoreNet,
    info_nce,
    load_checkpoints,
    make_adam,
    penalized_nce,
    save_checkpoint,
)

LABEL_MODES = ("absolute", "delta")
MASK_SCHEDULES = ("random-unit", "round-robin")
LOSS_TRACE_HEADER = ("step", "variable", "loss_full", "loss_masked", "reg_l1", "reg_grad")


class NumericError(RuntimeError):
    """Raised when training produces a non-finite value."""


@dataclass
class DynConfig:
    trunk_widths: tuple = (128, 128)
    label_widths: tuple = (128,)
    feature_dim: int = 128
    n_negatives: int = 512
    lam1: float = 1e-6
    lam2: float = 1e-6
    batch_size: int = 32
    lr: float = 3e-4
    label_mode: str = "absolute"
    range_widen: float = 0.05
    mask_schedule: str = "random-unit"
    horizon_steps: int = 1
    train_predict_samples: int = 256
    n_predict_samples: int = 8192
    spot_check_every: int = 500

    def __post_init__(self):
        self.trunk_widths = tuple(int(w) for w in self.trunk_widths)
        self.label_widths = tuple(int(w) for w in self.label_widths)
        self.validate()

    def validate(self) -> None:
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be >= 1")
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValueError("regularization weights must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"label_mode must be one of {LABEL_MODES}")
        if self.mask_schedule not in MASK_SCHEDULES:
            raise ValueError(f"mask_schedule must be one of {MASK_SCHEDULES}")
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk_widths"] = list(self.trunk_widths)
        d["label_widths"] = list(self.label_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DynConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dynamics config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# normalization


def _to_unit(v, lo, hi):
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, 2.0 * (v - lo) / safe - 1.0, 0.0)


@dataclass
class Normalizer:
    """Affine maps of contexts and labels onto [-1, 1].

    ``label_supports[i]`` lists the finite label values of variable ``i`` in
    raw units, or is ``None`` for a continuous label.
    """

    ctx_lo: np.ndarray
    ctx_hi: np.ndarray
    label_lo: np.ndarray
    label_hi: np.ndarray
    label_supports: list = field(default_factory=list)
    label_mode: str = "absolute"

    def __post_init__(self):
        self.ctx_lo = np.asarray(self.ctx_lo, dtype=np.float64)
        self.ctx_hi = np.asarray(self.ctx_hi, dtype=np.float64)
        self.label_lo = np.asarray(self.label_lo, dtype=np.float64)
        self.label_hi = np.asarray(self.label_hi, dtype=np.float64)
        if not self.label_supports:
            self.label_supports = [None] * len(self.label_lo)
        self.label_supports = [None if s is None else np.asarray(s, dtype=np.float64) for s in self.label_supports]

    @property
    def d_S(self) -> int:
        return len(self.label_lo)

    @property
    def discrete(self) -> bool:
        """True when every label has a finite support."""
        return all(s is not None for s in self.label_supports)

    @classmethod
    def fit(
        cls,
        buffer: ReplayBuffer,
        label_mode: str = "absolute",
        widen: float = 0.05,
        state_ranges: np.ndarray | None = None,
        supports: Sequence[np.ndarray | None] | None = None,
    ) -> "Normalizer":
        d = buffer.arrays()
        if state_ranges is not None:
            sr = np.asarray(state_ranges, dtype=np.float64)
            s_lo, s_hi = sr[:, 0], sr[:, 1]
        else:
            both = np.concatenate([d["s"], d["s_next"]])
            s_lo, s_hi = both.min(0), both.max(0)
        ctx_lo = np.concatenate([s_lo, -np.ones(buffer.d_A)])
        ctx_hi = np.concatenate([s_hi, np.ones(buffer.d_A)])
        labels = d["s_next"] if label_mode == "absolute" else d["s_next"] - d["s"]
        lab_lo, lab_hi = labels.min(0), labels.max(0)
        sups = [None] * buffer.d_S
        if label_mode == "absolute" and supports is not None:
            sups = [None if s is None else np.asarray(s, dtype=np.float64) for s in supports]
        for i in range(buffer.d_S):
            if sups[i] is not None:
                lab_lo[i], lab_hi[i] = sups[i].min(), sups[i].max()
                continue
            span = lab_hi[i] - lab_lo[i]
            pad = widen * span if span > 0 else 0.5
            lab_lo[i] -= pad
            lab_hi[i] += pad
        return cls(ctx_lo, ctx_hi, lab_lo, lab_hi, sups, label_mode)

    def context(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=-1)
        return _to_unit(x, self.ctx_lo, self.ctx_hi)

    def raw_label(self, s: np.ndarray, s_next: np.ndarray) -> np.ndarray:
        return s_next if self.label_mode == "absolute" else s_next - s

    def label(self, raw: np.ndarray) -> np.ndarray:
        return _to_unit(raw, self.label_lo, self.label_hi)

    def unlabel(self, y: np.ndarray) -> np.ndarray:
        return self.label_lo + (np.asarray(y) + 1.0) * 0.5 * (self.label_hi - self.label_lo)

    def support_unit(self, i: int) -> np.ndarray:
        sup = self.label_supports[i]
        return _to_unit(sup, self.label_lo[i], self.label_hi[i])

    def support_index(self, raw: np.ndarray) -> np.ndarray:
        """Index of each raw label within its variable's support (nearest value)."""
        raw = np.atleast_2d(raw)
        out = np.empty(raw.shape, dtype=np.int64)
        for i, sup in enumerate(self.label_supports):
            out[:, i] = np.abs(raw[:, i : i + 1] - sup[None, :]).argmin(1)
        return out

    def to_dict(self) -> dict:
        return {
            "ctx_lo": self.ctx_lo.tolist(),
            "ctx_hi": self.ctx_hi.tolist(),
            "label_lo": self.label_lo.tolist(),
            "label_hi": self.label_hi.tolist(),
            "label_supports": [None if s is None else s.tolist() for s in self.label_supports],
            "label_mode": self.label_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**d)


# ---------------------------------------------------------------------------
# model


class DynModel:
    """All ``d_S`` per-variable score heads plus their normalization and optimizer state."""

    def __init__(self, d_S: int, d_A: int, config: DynConfig, normalizer: Normalizer, seed: int = 0, kind: str = "implicit"):
        self.d_S, self.d_A = int(d_S), int(d_A)
        self.config = config
        self.norm = normalizer
        self.seed = int(seed)
        self.kind = kind
        gen = rngs.torch_generator(rngs.derive_seed(seed, "init", 0))
        self.net = ScoreNet(
            d_S, d_A, range(d_S), config.trunk_widths, config.label_widths, config.feature_dim, generator=gen
        )
        self.opt = make_adam(self.net.parameters(), lr=config.lr)
        self.rng_batch = rngs.stream(seed, "data", 1)
        self.rng_neg = rngs.stream(seed, "negatives", 0)
        self.rng_mask = rngs.stream(seed, "data", 2)
        self.steps_done = 0
        self._support_cache = None

    @property
    def n_units(self) -> int:
        return self.d_S + 1

    def context_tensor(self, s, a) -> torch.Tensor:
        return torch.as_tensor(self.norm.context(s, a), dtype=self.net.dtype)

    def supports_tensor(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Padded normalized supports (H, K) and support sizes (H,)."""
        if self._support_cache is None:
            sups = [self.norm.support_unit(i) for i in range(self.d_S)]
            K = max(len(s) for s in sups)
            pad = np.stack([np.concatenate([s, np.full(K - len(s), s[-1])]) for s in sups])
            self._support_cache = (
                torch.as_tensor(pad, dtype=self.net.dtype),
                torch.as_tensor([len(s) for s in sups]),
            )
        return self._support_cache

    def mask_dims(self, units: torch.Tensor) -> torch.Tensor:
        """Boolean unit masks (..., d_S+1) -> float dimension masks (..., d_S+d_A)."""
        return torch.cat([units[..., : self.d_S], units[..., self.d_S :].expand(*units.shape[:-1], self.d_A)], -1).to(
            self.net.dtype
        )

    def drop_masks(self, drop: torch.Tensor) -> torch.Tensor:
        """Unit masks hiding unit ``drop[...]`` for every entry of ``drop``."""
        units = torch.ones(*drop.shape, self.n_units, dtype=torch.bool)
        units.scatter_(-1, drop.unsqueeze(-1), False)
        return self.mask_dims(units)


def info_nce_loss(net: ScoreNet, label: float, x, mask, negatives, owner: int | None = None) -> float:
    """InfoNCE of one datapoint: -log softmax of the label's score among label + negatives."""
    from .nets import batch_tensors, candidate_scores

    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1)
    if negatives.size == 0:
        raise ValueError("at least one negative is required")
    owner = net.owners[0] if owner is None else owner
    batch = {"x": np.reshape(x, (1, -1)), "mask": np.reshape(mask, (1, -1)), "y": [label], "negatives": negatives[None]}
    with torch.no_grad():
        xs, m, cand = batch_tensors(net, batch)
        H = len(net.owners)
        s = candidate_scores(net, xs.expand(H, -1, -1), m.expand(H, -1, -1), cand.expand(H, -1, -1))
        return float(info_nce(s[net.head(owner)])[0])


# ---------------------------------------------------------------------------
# scoring helpers shared by training, prediction and CMI evaluation


def label_features(model: DynModel, y: torch.Tensor, tangent: bool):
    return model.net.label_features(y, tangent=tangent)


def role_scores(ctx: torch.Tensor, lab: torch.Tensor) -> torch.Tensor:
    """Context features (H, B, F) against per-head candidates (H, K, F) -> (H, B, K)."""
    return torch.bmm(ctx, lab.transpose(1, 2))


def _sample_candidates(model: DynModel, shape: tuple, rng: np.random.Generator, index: bool):
    """Uniform candidates per head: support indices (discrete) or unit-range values."""
    H = model.d_S
    if index:
        _, sizes = model.supports_tensor()
        u = rng.random((H, *shape))
        return torch.as_tensor(np.floor(u * sizes.numpy().reshape(H, *([1] * len(shape)))).astype(np.int64))
    vals = rng.uniform(-1.0, 1.0, (H, *shape))
    sups = model.norm.label_supports
    for i, sup in enumerate(sups):
        if sup is not None:
            su = model.norm.support_unit(i)
            vals[i] = su[rng.integers(0, len(su), shape)]
    return torch.as_tensor(vals, dtype=model.net.dtype)


def _step_loss(
    model: DynModel,
    x: torch.Tensor,
    y: torch.Tensor,
    drop: torch.Tensor,
    grads: bool,
):
    """Regularized loss for one batch of all heads.

    x: (B, D) normalized contexts; y: (H, B) normalized labels or support
    indices; drop: (H, B) masked unit per head and datapoint.
    Returns the scalar loss and per-head statistics (4, H).
    """
    cfg = model.config
    net = model.net
    H = model.d_S
    B = x.shape[0]
    N = cfg.n_negatives
    xs = x.unsqueeze(0).expand(H, B, -1)
    ctx_full = net.context_features(xs)
    m = model.drop_masks(drop)
    ctx_mask = net.context_features(xs * m)
    discrete = model.norm.discrete
    if discrete:
        sup, _ = model.supports_tensor()
        lab_out = net.label_features(sup, tangent=grads)
        lab, tan = lab_out if grads else (lab_out, None)
        neg_idx = _sample_candidates(model, (B, N), model.rng_neg, index=True)
        idx = torch.cat([y.unsqueeze(-1), neg_idx], dim=-1)  # (H, B, 1+N)

        def scores(ctx, feats):
            return torch.gather(role_scores(ctx, feats), 2, idx)

    else:
        neg = _sample_candidates(model, (N,), model.rng_neg, index=False)  # shared over the batch
        cand = torch.cat([y, neg], dim=1)  # (H, B+N)
        lab_out = net.label_features(cand, tangent=grads)
        lab, tan = lab_out if grads else (lab_out, None)

        def scores(ctx, feats):
            own = (ctx * feats[:, :B]).sum(-1, keepdim=True)
            return torch.cat([own, role_scores(ctx, feats[:, B:])], dim=-1)

    stats = []
    total = 0.0
    for ctx in (ctx_full, ctx_mask):
        s = scores(ctx, lab)
        g = scores(ctx, tan) if grads else None
        tot, nce, r1, r2 = penalized_nce(s, g, cfg.lam1, cfg.lam2)
        total = total + tot.mean(1).sum()
        stats.append((nce.mean(1), r1.mean(1), r2.mean(1)))
    (nce_f, r1_f, r2_f), (nce_m, r1_m, r2_m) = stats
    per_head = torch.stack([nce_f, nce_m, r1_f + r1_m, r2_f + r2_m]).detach()
    return total, per_head


def _draw_drop(model: DynModel, B: int) -> torch.Tensor:
    if model.config.mask_schedule == "round-robin":
        j = model.steps_done % model.n_units
        return torch.full((model.d_S, B), j, dtype=torch.int64)
    return torch.as_tensor(model.rng_mask.integers(0, model.n_units, (model.d_S, B)))


def _batch_labels(model: DynModel, s, s_next) -> torch.Tensor:
    raw = model.norm.raw_label(s, s_next)
    if model.norm.discrete:
        return torch.as_tensor(model.norm.support_index(raw).T.copy())
    return torch.as_tensor(model.norm.label(raw).T.copy(), dtype=model.net.dtype)


def _spot_check(model: DynModel, x: torch.Tensor, drop: torch.Tensor) -> None:
    """Perturb masked-out inputs and require bit-identical trunk features."""
    H = model.d_S
    m = model.drop_masks(drop)
    xs = x.unsqueeze(0).expand(H, -1, -1)
    noise = torch.as_tensor(model.rng_mask.uniform(-1, 1, tuple(xs.shape)), dtype=x.dtype)
    xp = torch.where(m > 0, xs, noise)
    with torch.no_grad():
        a = model.net.context_features(xs * m)
        b = model.net.context_features(xp * m)
    if not torch.equal(a, b):
        raise RuntimeError("masked-context scores changed when a masked-out input was perturbed")


def _multi_step_batch(model: DynModel, data: dict, valid_starts: np.ndarray, B: int):
    """Contexts along model rollouts of length ``horizon_steps`` from sampled start points."""
    Hs = model.config.horizon_steps
    starts = valid_starts[model.rng_batch.integers(0, len(valid_starts), B)]
    out = []
    s = data["s"][starts]
    for k in range(Hs):
        idx = starts + k
        a = data["a"][idx]
        out.append((s, a, data["s_next"][idx]))
        if k + 1 < Hs:
            with torch.no_grad():
                s = predict_next(model, s, a, model.config.train_predict_samples, model.rng_batch)
            s = np.clip(s, model.norm.ctx_lo[: model.d_S], model.norm.ctx_hi[: model.d_S])
    return out


def _valid_starts(data: dict, horizon: int) -> np.ndarray:
    n = len(data["s"])
    starts = data["start"]
    ok = []
    for t in range(n - horizon + 1):
        if not starts[t + 1 : t + horizon].any():
            ok.append(t)
    if not ok:
        raise ValueError("buffer has no segment long enough for multi-step training")
    return np.asarray(ok)


def train_dyn(
    model: DynModel,
    buffer: ReplayBuffer,
    steps: int,
    trace: list | None = None,
    callback: Callable[[int, DynModel], None] | None = None,
) -> tuple[DynModel, list]:
    """Run ``steps`` Adam steps of the regularized InfoNCE objective.

    Each datapoint contributes the full-mask loss and the loss under one
    masked unit drawn by the mask schedule.  Rows appended to ``trace`` follow
    :data:`LOSS_TRACE_HEADER`.
    """
    if len(buffer) == 0:
        raise ValueError("cannot train on an empty buffer")
    trace = [] if trace is None else trace
    cfg = model.config
    grads = cfg.lam2 > 0
    data = buffer.arrays()
    n = len(buffer)
    valid = _valid_starts(data, cfg.horizon_steps) if cfg.horizon_steps > 1 else None
    x_all = torch.as_tensor(model.norm.context(data["s"], data["a"]), dtype=model.net.dtype)
    y_all = _batch_labels(model, data["s"], data["s_next"])
    for _ in range(steps):
        B = cfg.batch_size
        if valid is None:
            idx = torch.as_tensor(model.rng_batch.integers(0, n, B))
            segments = [(x_all[idx], y_all[:, idx])]
        else:
            segments = [
                (model.context_tensor(s, a), _batch_labels(model, s, s2))
                for s, a, s2 in _multi_step_batch(model, data, valid, B)
            ]
        drop = _draw_drop(model, B)
        loss = 0.0
        per_head = 0.0
        for x, y in segments:
            l, ph = _step_loss(model, x, y, drop, grads)
            loss = loss + l / len(segments)
            per_head = per_head + ph / len(segments)
        if not bool(torch.isfinite(loss)):
            raise NumericError(f"non-finite dynamics loss at step {model.steps_done}")
        model.opt.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        model.opt.optimizer.step()
        if cfg.spot_check_every and model.steps_done % cfg.spot_check_every == 0:
            _spot_check(model, segments[0][0], drop)
        rows = per_head.T.tolist()
        for i, (lf, lm, r1, r2) in enumerate(rows):
            trace.append((model.steps_done, i, lf, lm, r1, r2))
        model.steps_done += 1
        if callback is not None:
            callback(model.steps_done, model)
    return model, trace


def write_loss_trace(trace: Sequence[tuple], path: str | Path, n_vars: int | None = None) -> None:
    """One row per training step with the four loss columns repeated per variable."""
    if n_vars is None:
        n_vars = 1 + max((int(row[1]) for row in trace), default=-1)
    header = ["step"] + [f"{name}_s{i + 1}" for i in range(n_vars) for name in LOSS_TRACE_HEADER[2:]]
    rows: dict[int, list] = {}
    for step, var, *vals in trace:
        rows.setdefault(int(step), [""] * (4 * n_vars))[4 * int(var) : 4 * int(var) + 4] = [repr(float(v)) for v in vals]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for step in sorted(rows):
            w.writerow([step, *rows[step]])


# ---------------------------------------------------------------------------
# prediction


def sampled_argmax(score_fn: Callable[[np.ndarray], np.ndarray], lo: float, hi: float, n_samples: int, rng) -> tuple[float, int]:
    """Best of ``n_samples`` uniform draws on [lo, hi]; ties go to the lowest index."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    samples = rngs_as(rng).uniform(lo, hi, n_samples)
    k = int(np.argmax(np.asarray(score_fn(samples))))
    return float(samples[k]), k


def rngs_as(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


@torch.no_grad()
def predict_next(model: DynModel, s, a, n_samples: int | None = None, rng=None) -> np.ndarray:
    """Per-variable sampled argmax of the full-mask score.

    Candidates are drawn independently for each variable; accepts a single
    state or a batch of states.
    """
    n_samples = model.config.n_predict_samples if n_samples is None else int(n_samples)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = rngs_as(0 if rng is None else rng)
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    s2 = np.atleast_2d(s)
    a2 = np.atleast_2d(np.asarray(a, dtype=np.float64))
    H = model.d_S
    x = model.context_tensor(s2, a2)
    ctx = model.net.context_features(x.unsqueeze(0).expand(H, -1, -1))
    cand = _sample_candidates(model, (n_samples,), rng, index=False)
    sc = role_scores(ctx, model.net.label_features(cand)).numpy()  # (H, B, n)
    best = sc.argmax(-1)  # first maximal index
    y = np.take_along_axis(cand.numpy().astype(np.float64)[:, None, :], best[..., None], -1)[..., 0].T
    raw = model.norm.unlabel(y)
    if model.norm.label_mode == "delta":
        raw = s2 + raw
    for i, sup in enumerate(model.norm.label_supports):
        if sup is not None:
            raw[:, i] = sup[np.abs(raw[:, i : i + 1] - sup[None]).argmin(1)]
    return raw[0] if single else raw


def rollout(model: DynModel, s0, actions, n_samples: int | None = None, rng=None) -> np.ndarray:
    """Feed predictions back for ``len(actions)`` steps; states are clipped to the context ranges.

    Returns an array (H, d_S) of predicted next states (batched inputs add a
    leading batch axis after H).
    """
    actions = np.asarray(actions, dtype=np.float64)
    if len(actions) < 1:
        raise ValueError("rollout needs at least one action")
    rng = rngs_as(0 if rng is None else rng)
    lo, hi = model.norm.ctx_lo[: model.d_S], model.norm.ctx_hi[: model.d_S]
    s = np.asarray(s0, dtype=np.float64)
    out = []
    for a in actions:
        s = np.clip(predict_next(model, s, a, n_samples, rng), lo, hi)
        out.append(s)
    return np.stack(out)


@torch.no_grad()
def mean_sq_input_grad(model: DynModel, buffer: ReplayBuffer, n_eval: int = 256, seed: int = 0, role: str = "masked") -> float:
    """Mean squared d(score)/dy over uniformly drawn negatives.

    ``role='masked'`` averages over every single-unit mask (the psi networks);
    ``role='full'`` uses the full mask.
    """
    rng = rngs.stream(seed, "eval", 7)
    data = buffer.take(rng.integers(0, len(buffer), n_eval))
    H = model.d_S
    x = model.context_tensor(data["s"], data["a"]).unsqueeze(0).expand(H, -1, -1)
    neg = torch.as_tensor(rng.uniform(-1, 1, (H, model.config.n_negatives)), dtype=model.net.dtype)
    _, tan = model.net.label_features(neg, tangent=True)
    drops = range(model.n_units) if role == "masked" else [None]
    vals = []
    for j in drops:
        if j is None:
            ctx = model.net.context_features(x)
        else:
            ctx = model.net.context_features(x * model.drop_masks(torch.full((H, n_eval), j)))
        vals.append((role_scores(ctx, tan) ** 2).mean().item())
    return float(np.mean(vals))


@torch.no_grad()
def mean_info_nce(model: DynModel, buffer: ReplayBuffer, n_eval: int = 512, seed: int = 0) -> np.ndarray:
    """Full-mask InfoNCE per variable on ``n_eval`` random records with fresh negatives."""
    rng = rngs.stream(seed, "eval", 8)
    data = buffer.take(rng.integers(0, len(buffer), n_eval))
    x = model.context_tensor(data["s"], data["a"])
    y = _batch_labels(model, data["s"], data["s_next"])
    saved = model.rng_neg
    model.rng_neg = rngs.stream(seed, "eval", 9)
    try:
        H = model.d_S
        drop = torch.zeros((H, n_eval), dtype=torch.int64)
        _, per_head = _step_loss(model, x, y, drop, grads=False)
    finally:
        model.rng_neg = saved
    return per_head[0].numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: DynModel, out_dir: str | Path, prefix: str = "dyn") -> Path:
    """Write one checkpoint per variable plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(model.d_S):
        name = f"{prefix}_s{i + 1}.json"
        save_checkpoint(model.net, out / name, owner=i, kind=model.kind)
        files.append(name)
    manifest = {
        "kind": model.kind,
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


def load_model(manifest_path: str | Path) -> DynModel:
    path = Path(manifest_path)
    m = json.loads(path.read_text(encoding="utf-8"))
    cfg = DynConfig.from_dict(m["config"])
    model = DynModel(m["d_S"], m["d_A"], cfg, Normalizer.from_dict(m["normalizer"]), seed=m["seed"], kind=m["kind"])
    net = load_checkpoints([path.parent / f for f in m["files"]])
    model.net.load_state_dict(net.state_dict())
    model.opt = make_adam(model.net.parameters(), lr=cfg.lr)
    model.steps_done = int(m["steps_done"])
    return model


def save_resume_state(model: DynModel, path: str | Path) -> None:
    """Optimizer moments and RNG positions needed to continue training exactly."""
    torch.save(
        {
            "optimizer": model.opt.optimizer.state_dict(),
            "rng_batch": model.rng_batch.bit_generator.state,
            "rng_neg": model.rng_neg.bit_generator.state,
            "rng_mask": model.rng_mask.bit_generator.state,
            "steps_done": model.steps_done,
        },
        path,
    )


def load_resume_state(model: DynModel, path: str | Path) -> None:
    st = torch.load(path, weights_only=False)
    model.opt.optimizer.load_state_dict(st["optimizer"])
    model.rng_batch.bit_generator.state = st["rng_batch"]
    model.rng_neg.bit_generator.state = st["rng_neg"]
    model.rng_mask.bit_generator.state = st["rng_mask"]
    model.steps_done = int(st["steps_done"])


def build_model(buffer: ReplayBuffer, config: DynConfig, seed: int = 0, state_ranges=None, supports=None) -> DynModel:
    norm = Normalizer.fit(buffer, config.label_mode, config.range_widen, state_ranges, supports)
    return DynModel(buffer.d_S, buffer.d_A, config, norm, seed)


def uniform_nce_baseline(n_negatives: int) -> float:
    """InfoNCE of a model that scores every candidate equally."""
    return math.log(n_negatives + 1)
