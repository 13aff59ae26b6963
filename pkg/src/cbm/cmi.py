"""Conditional mutual information from implicit models.

For child ``i`` and candidate parent ``j`` the estimate is the mean over
evaluation transitions of

    log (N+1) e^{phi(y)} / (e^{phi(y)} + N * sum_n w_n e^{phi(y_n)})

with negatives ``y_n`` drawn uniformly over the child's label range and
self-normalized weights ``w = softmax(psi(y_n))``.  The CBM scorer uses
``phi = g - psi`` (full-mask score minus the score with unit ``j`` masked);
the DEMI baseline learns ``phi`` separately against a frozen ``psi``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import rng as rngs
from .dynamics import DynModel, _batch_labels, _sample_candidates
from .env import GroundTruthGraph, ReplayBuffer
from .nets import ScoreNet, info_nce, make_adam

ESTIMATORS = ("cbm-g-minus-psi", "demi-learned-phi", "explicit-likelihood", "oracle-exact")
DEFAULT_EPS = 0.02


def importance_weights(psi_scores) -> np.ndarray:
    """Softmax of the masked scores over negatives (max-subtracted)."""
    z = np.asarray(psi_scores, dtype=np.float64)
    if z.size < 1:
        raise ValueError("need at least one score")
    if not np.all(np.isfinite(z)):
        raise ValueError("scores must be finite")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _lse(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def cmi_terms(phi_label, phi_neg, psi_neg) -> np.ndarray:
    """Per-transition estimator terms.

    phi_label: (...,), phi_neg and psi_neg: (..., N).  Each term is at most
    log(N+1) and equals 0 when phi is identically 0.
    """
    phi_label = np.asarray(phi_label, dtype=np.float64)
    phi_neg = np.asarray(phi_neg, dtype=np.float64)
    psi_neg = np.asarray(psi_neg, dtype=np.float64)
    N = phi_neg.shape[-1]
    # log sum_n w_n e^{phi_n} with w = softmax(psi)
    log_mix = _lse(psi_neg + phi_neg) - _lse(psi_neg)
    denom = np.logaddexp(phi_label, math.log(N) + log_mix)
    return math.log(N + 1) + phi_label - denom


# ---------------------------------------------------------------------------
# candidate scoring


def _candidates(model: DynModel, data: dict, n_neg: int, rng: np.random.Generator, negatives=None) -> torch.Tensor:
    """Label followed by ``n_neg`` fresh negatives per transition: (H, C, 1+N).

    Discrete models return support indices, continuous ones unit-range values.
    ``negatives`` (H, C, N) in unit range overrides the draw for continuous models.
    """
    C = len(data["s"])
    y = _batch_labels(model, data["s"], data["s_next"])  # (H, C)
    discrete = model.norm.discrete
    if negatives is not None:
        neg = torch.as_tensor(np.array(negatives), dtype=torch.int64 if discrete else model.net.dtype)
    else:
        neg = _sample_candidates(model, (C, n_neg), rng, index=discrete)
    return torch.cat([y.unsqueeze(-1), neg], dim=-1)


@torch.no_grad()
def score_candidates(net: ScoreNet, x: torch.Tensor, mask: torch.Tensor | None, cand: torch.Tensor, support=None) -> np.ndarray:
    """Scores (h, C, M) of candidates under one shared dimension mask.

    x: (C, D) contexts; mask: (D,) float or ``None`` for the full mask;
    cand: (h, C, M) unit-range values, or support indices when ``support``
    (h, K) is given.
    """
    h, C, M = cand.shape
    xs = x.unsqueeze(0).expand(h, -1, -1)
    if mask is not None:
        xs = xs * mask
    ctx = net.context_features(xs)
    if support is not None:
        lab = net.label_features(support)
        s = torch.gather(torch.bmm(ctx, lab.transpose(1, 2)), 2, cand)
    else:
        lab = net.label_features(cand.reshape(h, C * M)).view(h, C, M, -1)
        s = torch.einsum("hcf,hcmf->hcm", ctx, lab)
    return s.numpy().astype(np.float64)


def _unit_mask(model: DynModel, j: int) -> torch.Tensor:
    units = torch.ones(model.n_units, dtype=torch.bool)
    units[j] = False
    return model.mask_dims(units)


# ---------------------------------------------------------------------------
# DEMI baseline


@dataclass
class LearnedPhi:
    """Separately trained conditional score for pair (j -> i), trained against a frozen psi."""

    net: ScoreNet
    child: int
    parent: int
    steps: int = 0


def _pair_candidates(model: DynModel, data: dict, i: int, n_neg: int, rng) -> torch.Tensor:
    return _candidates(model, data, n_neg, rng)[i : i + 1]


def train_demi_phi(
    model: DynModel,
    buffer: ReplayBuffer,
    i: int,
    j: int,
    steps: int,
    seed: int = 0,
    lr: float | None = None,
    batch_size: int | None = None,
) -> LearnedPhi:
    """Fit phi so that phi + psi*_j minimizes InfoNCE; psi* is never updated."""
    cfg = model.config
    gen = rngs.torch_generator(rngs.derive_seed(seed, "init", 100 + i, j))
    net = ScoreNet(model.d_S, model.d_A, [i], cfg.trunk_widths, cfg.label_widths, cfg.feature_dim, generator=gen)
    opt = make_adam(net.parameters(), lr=cfg.lr if lr is None else lr)
    rng_b = rngs.stream(seed, "data", 100 + i, j)
    rng_n = rngs.stream(seed, "negatives", 100 + i, j)
    B = cfg.batch_size if batch_size is None else batch_size
    mask = _unit_mask(model, j)
    discrete = model.norm.discrete
    sup = model.supports_tensor()[0][i : i + 1] if discrete else None
    frozen = [p.detach().clone() for p in model.net.parameters()]
    for _ in range(steps):
        data = buffer.take(rng_b.integers(0, len(buffer), B))
        x = model.context_tensor(data["s"], data["a"])
        cand = _pair_candidates(model, data, i, cfg.n_negatives, rng_n)
        with torch.no_grad():
            psi = torch.as_tensor(score_candidates(model.net, x, mask, _all_heads(cand, model, i), _sup_all(model))[i])
        ctx = net.context_features(x.unsqueeze(0))
        if discrete:
            lab = net.label_features(sup)
            phi = torch.gather(torch.bmm(ctx, lab.transpose(1, 2)), 2, cand)[0]
        else:
            C, M = cand.shape[1:]
            lab = net.label_features(cand.reshape(1, C * M)).view(1, C, M, -1)
            phi = torch.einsum("hcf,hcmf->hcm", ctx, lab)[0]
        loss = info_nce(phi + psi.to(phi.dtype)).mean()
        opt.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        opt.optimizer.step()
    for p, q in zip(model.net.parameters(), frozen):
        if not torch.equal(p, q):
            raise RuntimeError("psi* parameters changed during phi training")
    return LearnedPhi(net, i, j, steps)


def _all_heads(cand: torch.Tensor, model: DynModel, i: int) -> torch.Tensor:
    """Broadcast one head's candidates to every head so the stacked net can score them."""
    return cand.expand(model.d_S, -1, -1).contiguous()


def _sup_all(model: DynModel):
    return model.supports_tensor()[0] if model.norm.discrete else None


# ---------------------------------------------------------------------------
# estimators


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def cmi_pair(
    model: DynModel,
    phi_kind: str,
    i: int,
    j: int,
    eval_batch: dict,
    negatives=None,
    seed: int = 0,
    n_negatives: int | None = None,
    learned_phi: LearnedPhi | None = None,
    per_transition: bool = False,
):
    """Estimate CMI (nats) of parent unit ``j`` for child ``i`` over ``eval_batch``.

    ``negatives`` (C, N) in unit label range (or support indices) fixes the
    negative draws; otherwise fresh ones are drawn per transition.
    """
    C = len(eval_batch["s"])
    if C == 0:
        raise ValueError("empty evaluation batch")
    if phi_kind not in ("cbm-g-minus-psi", "demi-learned-phi"):
        raise ValueError(f"unsupported estimator {phi_kind!r} for implicit models")
    if phi_kind == "demi-learned-phi" and learned_phi is None:
        raise ValueError("demi-learned-phi needs a trained LearnedPhi")
    N = model.config.n_negatives if n_negatives is None else int(n_negatives)
    rng = rngs.stream(seed, "negatives", 200 + i, j)
    x = model.context_tensor(eval_batch["s"], eval_batch["a"])
    if negatives is not None:
        neg = np.broadcast_to(np.asarray(negatives)[None], (model.d_S, C, np.shape(negatives)[-1]))
        cand = _candidates(model, eval_batch, 0, rng, negatives=neg)
    else:
        cand = _candidates(model, eval_batch, N, rng)
    sup = _sup_all(model)
    cand_i = _all_heads(cand[i : i + 1], model, i)
    full = score_candidates(model.net, x, None, cand_i, sup)[i]
    psi = score_candidates(model.net, x, _unit_mask(model, j), cand_i, sup)[i]
    if phi_kind == "cbm-g-minus-psi":
        phi = full - psi
    else:
        phi = score_candidates(learned_phi.net, x, None, cand[i : i + 1], None if sup is None else sup[i : i + 1])[0]
    terms = cmi_terms(phi[:, 0], phi[:, 1:], psi[:, 1:])
    return terms if per_transition else float(terms.mean())


@dataclass
class CmiMatrix:
    values: np.ndarray
    n_eval_transitions: int
    n_negatives: int
    estimator_kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("CMI values must be finite")

    @property
    def d_S(self) -> int:
        return self.values.shape[1]

    def to_csv(self, path: str | Path, names: Sequence[str] | None = None) -> None:
        write_matrix_csv(self.values, path, names)

    @classmethod
    def from_csv(cls, path: str | Path, n_eval_transitions: int = 0, n_negatives: int = 0, kind: str = "cbm-g-minus-psi"):
        return cls(read_matrix_csv(path), n_eval_transitions, n_negatives, kind)


def default_names(d_S: int) -> list[str]:
    return [f"s{k + 1}" for k in range(d_S)]


def write_matrix_csv(values: np.ndarray, path: str | Path, names: Sequence[str] | None = None) -> None:
    """Rows are parents (state variables then ``action``), columns are children."""
    values = np.asarray(values)
    d_S = values.shape[1]
    names = list(names) if names is not None else default_names(d_S)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parent", *names])
        for r, row_name in enumerate([*names, "action"]):
            w.writerow([row_name, *[repr(float(v)) for v in values[r]]])


def read_matrix_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)


def cmi_matrix(
    model: DynModel,
    phi_kind: str,
    eval_buffer: ReplayBuffer,
    n_eval: int = 2000,
    n_negatives: int | None = None,
    seed: int = 0,
    learned: dict | None = None,
    chunk: int = 64,
    clamp: bool = True,
) -> CmiMatrix:
    """Fill every (parent unit, child) cell; negatives are fresh per transition.

    The first ``n_eval`` records of ``eval_buffer`` are used.  Negative
    estimates are clamped to 0 unless ``clamp`` is False.  ``learned`` maps
    ``(i, j)`` to a :class:`LearnedPhi` for the DEMI estimator; every pair
    must be present.
    """
    if len(eval_buffer) < n_eval:
        raise ValueError(f"evaluation buffer holds {len(eval_buffer)} records, {n_eval} requested")
    if n_eval < 1:
        raise ValueError("n_eval must be >= 1")
    N = model.config.n_negatives if n_negatives is None else int(n_negatives)
    H, U = model.d_S, model.n_units
    if phi_kind == "demi-learned-phi":
        learned = learned or {}
        missing = [(i, j) for i in range(H) for j in range(U) if (i, j) not in learned]
        if missing:
            raise ValueError(f"no learned phi for pairs {missing[:5]}...")
    rng = rngs.stream(seed, "negatives", 300)
    data = eval_buffer.take(np.arange(n_eval))
    sums = np.zeros((U, H))
    sup = _sup_all(model)
    masks = [_unit_mask(model, j) for j in range(U)]
    for sl in _chunks(n_eval, chunk):
        part = {k: v[sl] for k, v in data.items()}
        x = model.context_tensor(part["s"], part["a"])
        cand = _candidates(model, part, N, rng)
        full = score_candidates(model.net, x, None, cand, sup)
        for j in range(U):
            psi = score_candidates(model.net, x, masks[j], cand, sup)
            if phi_kind == "cbm-g-minus-psi":
                phi = full - psi
            else:
                phi = np.stack(
                    [
                        score_candidates(
                            learned[(i, j)].net, x, None, cand[i : i + 1], None if sup is None else sup[i : i + 1]
                        )[0]
                        for i in range(H)
                    ]
                )
            terms = cmi_terms(phi[..., 0], phi[..., 1:], psi[..., 1:])  # (H, C)
            sums[j] += terms.sum(1)
    values = sums / n_eval
    if clamp:
        values = np.maximum(values, 0.0)
    return CmiMatrix(values, n_eval, N, phi_kind)


# ---------------------------------------------------------------------------
# graphs


@dataclass
class CausalGraphEstimate:
    edges: np.ndarray
    threshold: float = DEFAULT_EPS

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=bool)

    def edge_list(self) -> list[list[int]]:
        return [[int(j), int(i)] for j, i in zip(*np.nonzero(self.edges))]

    def to_dict(self) -> dict:
        return {"threshold": float(self.threshold), "shape": list(self.edges.shape), "edges": self.edge_list()}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "CausalGraphEstimate":
        edges = np.zeros(d["shape"], dtype=bool)
        for j, i in d["edges"]:
            edges[j, i] = True
        return cls(edges, d["threshold"])

    @classmethod
    def load(cls, path: str | Path) -> "CausalGraphEstimate":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def binarize(cmi: CmiMatrix | np.ndarray, eps: float = DEFAULT_EPS) -> CausalGraphEstimate:
    """Edge iff value >= eps."""
    if not eps > 0:
        raise ValueError("threshold must be positive")
    values = cmi.values if isinstance(cmi, CmiMatrix) else np.asarray(cmi, dtype=np.float64)
    return CausalGraphEstimate(values >= eps, eps)


def graph_accuracy(est: CausalGraphEstimate | np.ndarray, truth: GroundTruthGraph | np.ndarray) -> float:
    """Fraction of (parent, child) cells on which estimate and truth agree."""
    e = est.edges if isinstance(est, CausalGraphEstimate) else np.asarray(est, dtype=bool)
    t = truth.dyn_parents if isinstance(truth, GroundTruthGraph) else np.asarray(truth, dtype=bool)
    if e.shape != t.shape:
        raise ValueError(f"shape mismatch {e.shape} vs {t.shape}")
    return float((e == t).mean())
