"""Two-tower energy networks with input masking.

A :class:`ScoreNet` scores a scalar candidate label ``y`` against a masked
context ``M * x`` as ``dot(trunk(M * x), label_tower(y))``.  Networks for
several owner variables are stacked on a leading "head" axis so that all of
them are evaluated with batched matrix products.

The derivative of the score with respect to ``y`` is computed in forward mode
through the label tower (a scalar input makes the tangent one vector per
layer).  Because that tangent is an ordinary differentiable expression of the
parameters, gradients of losses that penalize it are exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

CHECKPOINT_VERSION = 1


class Mlp(nn.Module):
    """``n_heads`` independent rectifier MLPs with identity output layers."""

    def __init__(
        self,
        widths: Sequence[int],
        n_heads: int = 1,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("an Mlp needs at least input and output widths")
        self.widths = tuple(int(w) for w in widths)
        self.n_heads = int(n_heads)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            self.weights.append(nn.Parameter(torch.empty(n_heads, fan_in, fan_out, dtype=dtype)))
            self.biases.append(nn.Parameter(torch.empty(n_heads, 1, fan_out, dtype=dtype)))
        self.reset_parameters(generator)

    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        for w, b in zip(self.weights, self.biases):
            bound = math.sqrt(1.0 / w.shape[1])
            w.uniform_(-bound, bound, generator=generator)
            b.uniform_(-bound, bound, generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (n_heads, batch, in) -> (n_heads, batch, out)."""
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = torch.baddbmm(b, x, w)
            if k < last:
                x = torch.relu(x)
        return x

    def forward_tangent(self, x: torch.Tensor, tx: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Forward pass plus the directional derivative along ``tx``.

        At a rectifier kink (pre-activation exactly 0) the unit counts as
        active iff the tangent points into the positive side, which yields the
        right-derivative of the composite function.
        """
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = torch.baddbmm(b, x, w)
            tx = torch.bmm(tx, w)
            if k < last:
                active = ((x > 0) | ((x == 0) & (tx > 0))).to(x.dtype)
                x = x * active
                tx = tx * active
        return x, tx


class ScoreNet(nn.Module):
    """Energy networks ``score(y; M*x) = trunk(M*x) . label_tower(y)``, one head per owner variable."""

    def __init__(
        self,
        d_S: int,
        d_A: int,
        owners: Sequence[int],
        trunk_widths: Sequence[int] = (128, 128),
        label_widths: Sequence[int] = (128,),
        feature_dim: int = 128,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.d_S, self.d_A = int(d_S), int(d_A)
        self.owners = [int(o) for o in owners]
        self.trunk_widths = tuple(int(w) for w in trunk_widths)
        self.label_widths = tuple(int(w) for w in label_widths)
        self.feature_dim = int(feature_dim)
        n = len(self.owners)
        self.trunk = Mlp([self.context_dim, *self.trunk_widths, self.feature_dim], n, generator, dtype)
        self.label_tower = Mlp([1, *self.label_widths, self.feature_dim], n, generator, dtype)

    @property
    def context_dim(self) -> int:
        return self.d_S + self.d_A

    @property
    def dtype(self) -> torch.dtype:
        return self.trunk.weights[0].dtype

    def head(self, owner: int) -> int:
        return self.owners.index(int(owner))

    def context_features(self, xm: torch.Tensor) -> torch.Tensor:
        """Masked contexts (H, B, D) -> trunk features (H, B, F)."""
        return self.trunk(xm)

    def label_features(self, y: torch.Tensor, tangent: bool = False):
        """Labels (H, M) -> features (H, M, F), plus d(features)/dy when ``tangent``."""
        y = y.unsqueeze(-1)
        if not tangent:
            return self.label_tower(y)
        return self.label_tower.forward_tangent(y, torch.ones_like(y))


# ---------------------------------------------------------------------------
# masks


def unit_mask_to_dims(mask: np.ndarray | torch.Tensor, d_S: int, d_A: int) -> torch.Tensor:
    """Expand unit masks (..., d_S + 1) to per-dimension masks (..., d_S + d_A)."""
    m = torch.as_tensor(np.asarray(mask, dtype=bool) if not torch.is_tensor(mask) else mask)
    if m.shape[-1] != d_S + 1:
        raise ValueError(f"mask needs {d_S + 1} units, got {m.shape[-1]}")
    if not bool(m.any(dim=-1).all()):
        raise ValueError("a mask must keep at least one unit")
    return torch.cat([m[..., :d_S], m[..., d_S:].expand(*m.shape[:-1], d_A)], dim=-1)


def full_mask(d_S: int) -> np.ndarray:
    return np.ones(d_S + 1, dtype=bool)


def drop_mask(d_S: int, j: int) -> np.ndarray:
    """Mask that hides unit ``j`` (``j == d_S`` hides the action)."""
    m = full_mask(d_S)
    m[j] = False
    return m


# ---------------------------------------------------------------------------
# scoring


def _check_finite(*arrays) -> None:
    for a in arrays:
        t = torch.as_tensor(a)
        if not bool(torch.isfinite(t).all()):
            raise ValueError("score inputs must be finite")


def candidate_scores(net: ScoreNet, x: torch.Tensor, mask: torch.Tensor, y: torch.Tensor, grads: bool = False):
    """Score per-datapoint candidates.

    x: (H, B, D) contexts, mask: (H, B, D) per-dimension masks,
    y: (H, B, K) candidate labels.  Returns scores (H, B, K) and, if
    ``grads``, their derivatives with respect to the candidates.
    """
    H, B, K = y.shape
    ctx = net.context_features(x * mask)
    if grads:
        lab, tan = net.label_features(y.reshape(H, B * K), tangent=True)
        s = torch.einsum("hbf,hbkf->hbk", ctx, lab.view(H, B, K, -1))
        g = torch.einsum("hbf,hbkf->hbk", ctx, tan.view(H, B, K, -1))
        return s, g
    lab = net.label_features(y.reshape(H, B * K))
    return torch.einsum("hbf,hbkf->hbk", ctx, lab.view(H, B, K, -1))


def _single(net: ScoreNet, y, x, mask, owner):
    _check_finite(y, x)
    h = net.head(owner)
    x = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=net.dtype).reshape(1, 1, -1)
    if x.shape[-1] != net.context_dim:
        raise ValueError(f"context must have length {net.context_dim}")
    m = unit_mask_to_dims(mask, net.d_S, net.d_A).to(net.dtype).reshape(1, 1, -1)
    yy = torch.tensor([[float(y)]], dtype=net.dtype)
    sub = _HeadView(net.label_tower, h)
    lab, tan = sub.forward_tangent(yy.unsqueeze(-1), torch.ones_like(yy).unsqueeze(-1))
    ctx = _HeadView(net.trunk, h)(x * m)[0, 0]
    return ctx, lab[0, 0], tan[0, 0]


class _HeadView:
    """Evaluate a single head of a stacked Mlp."""

    def __init__(self, mlp: Mlp, head: int):
        self.mlp, self.h = mlp, head

    def _params(self):
        return [(w[self.h : self.h + 1], b[self.h : self.h + 1]) for w, b in zip(self.mlp.weights, self.mlp.biases)]

    def __call__(self, x):
        last = len(self.mlp.weights) - 1
        for k, (w, b) in enumerate(self._params()):
            x = torch.baddbmm(b, x, w)
            if k < last:
                x = torch.relu(x)
        return x

    def forward_tangent(self, x, tx):
        last = len(self.mlp.weights) - 1
        for k, (w, b) in enumerate(self._params()):
            x = torch.baddbmm(b, x, w)
            tx = torch.bmm(tx, w)
            if k < last:
                active = ((x > 0) | ((x == 0) & (tx > 0))).to(x.dtype)
                x, tx = x * active, tx * active
        return x, tx


@torch.no_grad()
def score(net: ScoreNet, y: float, x, mask, owner: int | None = None) -> float:
    """Score of candidate ``y`` given context ``x`` under a unit mask."""
    owner = net.owners[0] if owner is None else owner
    ctx, lab, _ = _single(net, y, x, mask, owner)
    return float(torch.dot(ctx, lab))


@torch.no_grad()
def score_input_grad(net: ScoreNet, y: float, x, mask, owner: int | None = None) -> float:
    """d score / d y; the trunk feature is constant in ``y``."""
    owner = net.owners[0] if owner is None else owner
    ctx, _, tan = _single(net, y, x, mask, owner)
    return float(torch.dot(ctx, tan))


# ---------------------------------------------------------------------------
# losses


def info_nce(scores: torch.Tensor) -> torch.Tensor:
    """InfoNCE per row; column 0 holds the label's score."""
    return torch.logsumexp(scores, dim=-1) - scores[..., 0]


def penalized_nce(scores: torch.Tensor, grads: torch.Tensor | None, lam1: float, lam2: float):
    """InfoNCE plus L2 penalties on scores and their input gradients over all candidates.

    Returns ``(total, nce, reg_scores, reg_grads)``, each with the leading shape of ``scores[..., 0]``.
    """
    nce = info_nce(scores)
    reg1 = (scores**2).sum(-1)
    reg2 = (grads**2).sum(-1) if grads is not None else torch.zeros_like(reg1)
    total = nce
    if lam1:
        total = total + lam1 * reg1
    if lam2:
        total = total + lam2 * reg2
    return total, nce, reg1, reg2


def batch_tensors(net: ScoreNet, batch: dict, owner: int | None = None):
    """Per-datapoint loss inputs for a single owner: contexts, masks, candidate matrix."""
    x = torch.as_tensor(np.asarray(batch["x"], dtype=np.float64), dtype=net.dtype)
    B = x.shape[0]
    m = unit_mask_to_dims(np.asarray(batch["mask"], dtype=bool).reshape(B, net.d_S + 1), net.d_S, net.d_A)
    y = torch.as_tensor(np.asarray(batch["y"], dtype=np.float64), dtype=net.dtype).reshape(B, 1)
    neg = torch.as_tensor(np.asarray(batch["negatives"], dtype=np.float64), dtype=net.dtype).reshape(B, -1)
    return x, m.to(net.dtype), torch.cat([y, neg], dim=1)


def penalized_loss(net: ScoreNet, batch: dict, lam1: float, lam2: float, owner: int | None = None) -> torch.Tensor:
    """Mean penalized InfoNCE of one owner's head over a batch (differentiable)."""
    owner = net.owners[0] if owner is None else owner
    h = net.head(owner)
    x, m, cand = batch_tensors(net, batch, owner)
    H = len(net.owners)
    xs = x.unsqueeze(0).expand(H, -1, -1)
    ms = m.unsqueeze(0).expand(H, -1, -1)
    cs = cand.unsqueeze(0).expand(H, -1, -1)
    if lam2:
        s, g = candidate_scores(net, xs, ms, cs, grads=True)
        total, *_ = penalized_nce(s[h], g[h], lam1, lam2)
    else:
        s = candidate_scores(net, xs, ms, cs)
        total, *_ = penalized_nce(s[h], None, lam1, lam2)
    return total.mean()


def grad_of_loss_with_penalty(
    net: ScoreNet, batch: dict, lam1: float, lam2: float, owner: int | None = None
) -> dict[str, torch.Tensor]:
    """Exact parameter gradients of InfoNCE + sum(lam1 f^2 + lam2 (df/dy)^2)."""
    if lam1 < 0 or lam2 < 0:
        raise ValueError("penalty weights must be non-negative")
    names, params = zip(*net.named_parameters())
    loss = penalized_loss(net, batch, lam1, lam2, owner)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    optimizer: torch.optim.Adam

    @property
    def step(self) -> int:
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                st = self.optimizer.state.get(p)
                if st and "step" in st:
                    return int(st["step"])
        return 0

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])


def make_adam(params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    return AdamState(torch.optim.Adam(list(params), lr=lr, betas=betas, eps=eps))


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState) -> AdamState:
    """Apply one Adam update in place; ``params`` must be the tensors ``state`` was built on."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter is required")
    for p, g in zip(params, grads):
        if tuple(p.shape) != tuple(g.shape):
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
        p.grad = g.detach().clone().to(p.dtype)
    state.optimizer.step()
    return state


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(net: ScoreNet, owner: int, kind: str = "implicit") -> dict:
    h = net.head(owner)
    params = {name: p.detach()[h].to(torch.float64).tolist() for name, p in net.named_parameters()}
    return {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "owner_variable": int(owner),
        "widths": {
            "d_S": net.d_S,
            "d_A": net.d_A,
            "trunk": list(net.trunk.widths),
            "label_tower": list(net.label_tower.widths),
        },
        "parameters": params,
    }


def save_checkpoint(net: ScoreNet, path: str | Path, owner: int | None = None, kind: str = "implicit") -> None:
    owner = net.owners[0] if owner is None else owner
    Path(path).write_text(json.dumps(checkpoint_dict(net, owner, kind), sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoints(paths: Sequence[str | Path], dtype: torch.dtype = torch.float32) -> ScoreNet:
    """Rebuild a stacked ScoreNet from one checkpoint file per owner variable."""
    docs = [json.loads(Path(p).read_text(encoding="utf-8")) for p in paths]
    if not docs:
        raise ValueError("no checkpoints given")
    for d in docs:
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    w = docs[0]["widths"]
    trunk, label = w["trunk"], w["label_tower"]
    net = ScoreNet(
        w["d_S"], w["d_A"], [d["owner_variable"] for d in docs],
        trunk_widths=trunk[1:-1], label_widths=label[1:-1], feature_dim=trunk[-1], dtype=dtype,
    )
    with torch.no_grad():
        for name, p in net.named_parameters():
            p.copy_(torch.tensor(np.array([d["parameters"][name] for d in docs]), dtype=dtype))
    return net
