"""Training objective: reconstruction, distance, consistency, sparsity, regularization.

Subspace indices are zero-based throughout the code.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import Tensor

log = logging.getLogger(__name__)

TERMS = ("rec", "dis", "spar", "cons", "reg")


@dataclass
class SubspaceNormTracker:
    """Running average of per-subspace code length used to normalize distances."""

    k: int
    momentum: float = 0.99
    eps: float = 1e-8
    mu: np.ndarray = None
    frozen: bool = False

    def __post_init__(self):
        if self.mu is None:
            self.mu = np.ones(self.k)
        self.mu = np.maximum(np.asarray(self.mu, dtype=np.float64), self.eps)

    def denom(self) -> np.ndarray:
        return np.maximum(self.mu, self.eps)

    def update(self, codes: Sequence[Tensor | np.ndarray]) -> None:
        if self.frozen:
            return
        for i, s in enumerate(codes):
            s = s.data if isinstance(s, Tensor) else np.asarray(s)
            batch_mean = np.sqrt((s * s).sum(axis=1)).mean()
            self.mu[i] = max(self.momentum * self.mu[i] + (1.0 - self.momentum) * batch_mean, self.eps)


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 0.1
    beta2: float = 100.0
    beta3: float = 1e-4
    margin: float = 1.0
    tau: float = 10.0

    def __post_init__(self):
        vals = (self.beta1, self.beta2, self.beta3, self.margin, self.tau)
        if not all(np.isfinite(vals)) or min(self.beta1, self.beta2, self.beta3) < 0:
            raise ad.ContractError(f"invalid loss weights {self}")
        if self.margin <= 0 or self.tau <= 0:
            raise ad.ContractError("margin and tau must be positive")


@dataclass(frozen=True)
class Phase:
    """Which loss terms are switched on; reconstruction always is."""

    reg: bool = False
    dis: bool = False
    cons: bool = False
    hard_oracle: bool = False

    @property
    def spar(self) -> bool:
        return self.dis


def rec_loss(x, x_hat) -> Tensor:
    """Batch mean of the squared reconstruction error."""
    x = ad.as_tensor(x)
    return ad.scale(ad.sq_l2_norm(ad.sub(x_hat, x)), 1.0 / x.shape[0])


def subspace_distances(codes1: Sequence[Tensor], codes2: Sequence[Tensor],
                       tracker: SubspaceNormTracker | None = None) -> Tensor:
    """(N, k) Euclidean distances per subspace divided by the tracked mean length."""
    if len(codes1) != len(codes2):
        raise ad.DimensionError("code lists differ in k")
    denom = np.ones(len(codes1)) if tracker is None else tracker.denom()
    cols = [ad.scale(ad.row_norms(ad.sub(a, b)), 1.0 / denom[i])
            for i, (a, b) in enumerate(zip(codes1, codes2))]
    return ad.stack_columns(cols)


def estimate_oracle(delta) -> np.ndarray | int:
    """Index of the largest distance per row (lowest index wins ties)."""
    delta = delta.data if isinstance(delta, Tensor) else np.asarray(delta)
    return np.argmax(delta, axis=-1)


def soft_mask(delta, tau: float = 10.0) -> Tensor:
    """Row-stochastic mask ``softmax(tau * delta**2)``."""
    if tau <= 0:
        raise ad.ContractError("tau must be positive")
    delta = ad.as_tensor(delta)
    if delta.data.ndim == 1:
        delta = Tensor(delta.data[None, :]) if delta.node is None else delta
    return ad.softmax_rows(ad.scale(ad.square(delta), tau))


def hard_mask(A) -> np.ndarray:
    """One-hot row-argmax of ``A``."""
    A = A.data if isinstance(A, Tensor) else np.asarray(A)
    alpha = np.zeros_like(A)
    alpha[np.arange(A.shape[0]), np.argmax(A, axis=1)] = 1.0
    return alpha


def dis_loss(delta, alpha, margin: float = 1.0) -> Tensor:
    """Pair-mean of sum_i (1-a_i) d_i^2 + a_i max(m - d_i, 0)^2.

    ``alpha`` is one-hot (hard oracle) or a soft mask tensor.
    """
    delta = ad.as_tensor(delta)
    if delta.data.ndim == 1:
        delta = Tensor(delta.data[None, :])
    alpha = ad.as_tensor(alpha)
    if alpha.data.ndim == 1:
        alpha = Tensor(alpha.data[None, :])
    if alpha.shape != delta.shape:
        raise ad.DimensionError(f"alpha {alpha.shape} vs delta {delta.shape}")
    pull = ad.mul(ad.sub(Tensor(np.ones(delta.shape)), alpha), ad.square(delta))
    hinge = ad.max_scalar(ad.sub(Tensor(np.full(delta.shape, float(margin))), delta), 0.0)
    push = ad.mul(alpha, ad.square(hinge))
    return ad.scale(ad.sum(ad.add(pull, push)), 1.0 / delta.shape[0])


def spar_loss(codes: Sequence[Tensor]) -> Tensor:
    """Batch mean of sum_i || s_i * sum_{j != i} s_j ||_1."""
    if len(codes) < 2:
        raise ad.ContractError("sparsity loss needs at least two subspaces")
    codes = [ad.as_tensor(c) for c in codes]
    n = codes[0].shape[0] if codes[0].data.ndim == 2 else 1
    total = mdl.aggregate(codes)
    terms = [ad.l1_norm(ad.mul(s, ad.sub(total, s))) for s in codes]
    return ad.scale(mdl.aggregate(terms), 1.0 / n)


def reg_loss(A) -> Tensor:
    """Squared deviation of the mask's column means from 1/k."""
    A = ad.as_tensor(A)
    n, k = A.shape
    dev = ad.sub(ad.mean(A, axis=0), Tensor(np.full(k, 1.0 / k)))
    return ad.sq_l2_norm(dev)


def cons_loss(codes1: Sequence[Tensor], codes2: Sequence[Tensor],
              params: Mapping[str, Tensor]) -> Tensor:
    """Batch mean of sum_i || P_i f(g(swap_i)) - s1_i ||^2.

    All k swapped latents are decoded and re-encoded as one stacked batch.
    """
    k = len(codes1)
    n = codes1[0].shape[0]
    swapped = ad.concat_rows([mdl.swap_latent(codes1, codes2, i) for i in range(k)])
    z_again = mdl.encode(mdl.decode(swapped, params), params)
    terms = [ad.sq_l2_norm(ad.sub(mdl.project_one(ad.rows(z_again, i * n, (i + 1) * n), params, i),
                                  codes1[i]))
             for i in range(k)]
    return ad.scale(mdl.aggregate(terms), 1.0 / n)


@dataclass
class LossResult:
    total: Tensor
    terms: dict[str, float]
    delta: np.ndarray | None = None
    mask: np.ndarray | None = None
    codes1: list[np.ndarray] = field(default_factory=list)
    codes2: list[np.ndarray] = field(default_factory=list)

    def oracle(self) -> np.ndarray:
        return estimate_oracle(self.delta)


def total_loss(x1, x2, params: Mapping[str, Tensor], weights: LossWeights,
               phase: Phase, tracker: SubspaceNormTracker | None = None,
               betas: tuple[float, float, float] | None = None) -> LossResult:
    """L_rec + b1 (L_dis + L_spar) + b2 L_cons + b3 L_reg over a pair batch.

    Inactive terms are not built at all, so they carry no gradient. ``betas``
    overrides the weights' beta values (used by the schedule). Reconstruction
    and sparsity are averaged over both members of every pair.
    """
    b1, b2, b3 = betas if betas is not None else (weights.beta1, weights.beta2, weights.beta3)
    x1 = np.asarray(x1.data if isinstance(x1, Tensor) else x1, dtype=np.float64)
    x2 = np.asarray(x2.data if isinstance(x2, Tensor) else x2, dtype=np.float64)
    n = x1.shape[0]
    both = np.concatenate([x1, x2], axis=0)
    codes = mdl.project(mdl.encode(both, params), params)
    x_hat = mdl.decode(mdl.aggregate(codes), params)
    codes1 = [ad.rows(c, 0, n) for c in codes]
    codes2 = [ad.rows(c, n, 2 * n) for c in codes]

    terms = dict.fromkeys(TERMS, 0.0)
    l_rec = rec_loss(both, x_hat)
    total = l_rec
    terms["rec"] = l_rec.item()

    delta = mask = None
    if phase.reg or phase.dis or phase.cons or tracker is not None:
        delta_t = subspace_distances(codes1, codes2, tracker)
        A = soft_mask(delta_t, weights.tau)
        delta, mask = delta_t.data, A.data
        if phase.reg:
            l_reg = reg_loss(A)
            terms["reg"] = l_reg.item()
            total = ad.add(total, ad.scale(l_reg, b3))
        if phase.dis:
            if phase.hard_oracle:
                alpha = hard_mask(A)
            else:
                alpha = A
            zero_pairs = int(np.sum(np.all(delta == 0.0, axis=1)))
            if zero_pairs:
                log.warning("%d pairs with all subspace distances 0; oracle falls back to index 0",
                            zero_pairs)
            l_dis = dis_loss(delta_t, alpha, weights.margin)
            l_spar = spar_loss(codes)
            terms["dis"] = l_dis.item()
            terms["spar"] = l_spar.item()
            total = ad.add(total, ad.scale(ad.add(l_dis, l_spar), b1))
        if phase.cons:
            l_cons = cons_loss(codes1, codes2, params)
            terms["cons"] = l_cons.item()
            total = ad.add(total, ad.scale(l_cons, b2))
    if tracker is not None:
        tracker.update(codes)
    return LossResult(total, terms, delta, mask,
                      [c.data for c in codes1], [c.data for c in codes2])
