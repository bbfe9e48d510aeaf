"""Numerical checks of the product structure induced by the sparsity loss.

``minimize_spar_free`` optimizes free subspace vectors (no network) and
tracks how much their supports overlap; ``check_definition2`` tests a trained
model for the two-sided disentanglement condition on single-factor pairs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import evaluation as E
from . import losses as L
from . import model as mdl
from .autodiff import ContractError, Tensor
from .rng import stream
from .synthdata import ProductManifold

log = logging.getLogger(__name__)


class DegenerateError(RuntimeError):
    pass


def support_profile(codes, rel_threshold: float = 1e-4) -> np.ndarray:
    """Boolean ``(..., k, d)`` mask of entries above ``rel_threshold * max|entry|``."""
    codes = np.asarray(codes, dtype=np.float64)
    if rel_threshold <= 0:
        raise ContractError("threshold must be positive")
    top = np.abs(codes).max() if codes.size else 0.0
    return np.abs(codes) > rel_threshold * top


def support_overlap(codes, rel_threshold: float = 1e-4) -> tuple[float, bool]:
    """Fraction of claimed coordinate slots that two or more subspaces claim.

    ``codes`` is ``(k, d)`` for one sample or ``(M, k, d)``. Returns
    ``(fraction, degenerate)``; all-zero codes give ``(0.0, True)``.
    """
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim < 2 or codes.shape[-2] < 2:
        raise ContractError("support_overlap needs k >= 2 subspaces")
    if not np.any(codes):
        return 0.0, True
    claims = support_profile(codes, rel_threshold).sum(axis=-2)
    claimed = np.count_nonzero(claims >= 1)
    contested = np.count_nonzero(claims >= 2)
    return contested / claimed, False


def spar_value(S: Tensor) -> Tensor:
    """L_spar for one sample stored as a ``(k, d)`` tensor."""
    total = ad.sum(S, axis=0)
    # S - total = -(sum of the other subspaces); the sign vanishes under |.|
    return ad.l1_norm(ad.mul(S, ad.sub(S, total)))


def spar_term(S: Tensor, q: int) -> Tensor:
    """Single summand ``|| s_q * sum_{j != q} s_j ||_1``."""
    s_q = ad.rows(S, q, q + 1)
    others = ad.sub(ad.sum(S, axis=0), ad.sum(s_q, axis=0))
    return ad.l1_norm(ad.mul(ad.sum(s_q, axis=0), others))


def first_order_term(S: np.ndarray, q: int) -> np.ndarray:
    """Closed form of d(spar_term)/d s_q: sign(s_q * o) * o with o the sum of the others."""
    S = np.asarray(S, dtype=np.float64)
    o = S.sum(axis=0) - S[q]
    return np.sign(S[q] * o) * o


def _objective(S: Tensor, floor: float) -> Tensor:
    norms = ad.row_norms(S)
    short = ad.max_scalar(ad.sub(Tensor(np.full(norms.shape, floor)), norms), 0.0)
    return ad.add(spar_value(S), ad.sq_l2_norm(short))


@dataclass
class SparRun:
    vectors: np.ndarray
    trace: list[tuple[int, float, float]] = field(default_factory=list)  # (step, overlap, L_spar)

    @property
    def final_overlap(self) -> float:
        return support_overlap(self.vectors)[0]

    @property
    def final_spar(self) -> float:
        return spar_value(Tensor(self.vectors)).item()


def minimize_spar_free(k: int, d: int, init_scale: float = 1.0, steps: int = 20000,
                       rng: np.random.Generator | None = None, lr: float = 0.01,
                       lr_final: float = 1e-8, floor: float = 0.5, init: np.ndarray | None = None,
                       record_every: int = 100) -> SparRun:
    """Gradient descent on L_spar of free vectors plus a norm floor.

    The floor penalty ``sum_i max(0, floor - ||s_i||)^2`` stands in for the
    losses that keep real subspaces from collapsing to zero. A coordinate
    whose update would cross zero is clipped to exactly zero (truncated
    gradient). The step size decays geometrically from ``lr`` to ``lr_final``
    so that the residual two-cycles between coupled coordinates die out.
    """
    if k < 2 or d < k:
        raise ContractError("need k >= 2 and d >= k")
    if init is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        S = rng.normal(scale=init_scale, size=(k, d))
    else:
        S = np.array(init, dtype=np.float64)
        if S.shape != (k, d):
            raise ContractError(f"init must have shape {(k, d)}")
    run = SparRun(S)
    decay = (lr_final / lr) ** (1.0 / max(steps, 1))
    for step in range(steps + 1):
        if step % record_every == 0 or step == steps:
            run.trace.append((step, support_overlap(S)[0], spar_value(Tensor(S)).item()))
        if step == steps:
            break
        tape = ad.Tape()
        leaf = tape.param("S", S)
        loss = _objective(leaf, floor)
        g = ad.backward(tape, loss)["S"]
        new = S - lr * decay ** step * g
        new[(S != 0) & (np.sign(new) != np.sign(S))] = 0.0
        if not np.all(np.isfinite(new)) or np.abs(new).max() > 1e6:
            raise ad.NumericError(f"free sparsity minimization diverged at step {step}")
        S = new
    run.vectors = S
    return run


def spar_seed_sweep(seeds, k: int = 3, d: int = 6, steps: int = 20000, **kw) -> list[SparRun]:
    return [minimize_spar_free(k, d, steps=steps, rng=stream(s, "verify-spar"), **kw) for s in seeds]


# ------------------------------------------------------------------ trained models

@dataclass
class Definition2Result:
    hit_rate: float
    leak_rate: float
    matching: dict[int, int]  # factor -> subspace
    active: np.ndarray


def match_subspaces(votes: np.ndarray, active: np.ndarray) -> dict[int, int]:
    """Greedy factor -> subspace assignment by descending vote count.

    ``votes[f, i]`` counts pairs changing factor f whose largest distance is
    in subspace i. A factor whose favourite subspace is already taken gets
    the next best free one; a warning records the conflict.
    """
    score = np.where(active[None, :], np.asarray(votes, dtype=np.float64), -np.inf)
    order = np.dstack(np.unravel_index(np.argsort(-score, axis=None), score.shape))[0]
    out: dict[int, int] = {}
    taken: set[int] = set()
    best = np.argmax(score, axis=1)
    for f, i in order:
        if f in out or i in taken or not np.isfinite(score[f, i]):
            continue
        if best[f] != i:
            log.warning("factor %d prefers subspace %d, already taken; using %d", f, best[f], i)
        out[int(f)] = int(i)
        taken.add(int(i))
    return out


def check_definition2(params: mdl.Params, dataset: ProductManifold, num_pairs: int = 2000,
                      threshold: float = 0.2, seed: int = 0, n_activity: int = 5000,
                      rel_active: float = 1e-2) -> Definition2Result:
    """Hit and leak rates of single-factor pairs.

    Each factor is matched to the active subspace that most often carries the
    largest distance on a fitting set of pairs (majority assignment). On a
    fresh set, a pair changing factor c is a hit when the matched subspace
    moves by more than ``threshold`` (distances normalized by mean code
    length), and a leak when any other active subspace does.
    """
    rng = stream(seed, "definition2")
    x, _ = dataset.sample(n_activity, rng)
    codes = mdl.subspace_codes(x, params)
    active = E.active_subspaces(codes.std(axis=0).mean(axis=1), rel_active)
    if not active.any():
        raise DegenerateError("no active subspaces")
    mu = np.linalg.norm(codes, axis=2).mean(axis=0)

    fit = dataset.sample_pairs(num_pairs, "one", rng)
    delta = E.pair_distances(params, fit.x1, fit.x2, mu)
    votes = np.zeros((dataset.num_factors, delta.shape[1]))
    winner = np.argmax(np.where(active[None, :], delta, -np.inf), axis=1)
    np.add.at(votes, (fit.changed_index(), winner), 1)
    matching = match_subspaces(votes, active)

    pairs = dataset.sample_pairs(num_pairs, "one", rng)
    delta = E.pair_distances(params, pairs.x1, pairs.x2, mu)
    hit, leak = definition2_rates(delta, pairs.changed_index(), matching, active, threshold)
    return Definition2Result(hit, leak, matching, active)


def definition2_rates(delta: np.ndarray, changed: np.ndarray, matching: dict[int, int],
                      active: np.ndarray, threshold: float) -> tuple[float, float]:
    """Hit and leak rates for ``(n, k)`` distances of pairs that change factor ``changed[n]``."""
    moved = (np.asarray(delta) > threshold) & active[None, :]
    target = np.array([matching.get(int(c), -1) for c in changed])
    rows = np.arange(len(target))
    has = target >= 0
    hit = np.zeros(len(target), dtype=bool)
    hit[has] = moved[rows[has], target[has]]
    others = moved.copy()
    others[rows[has], target[has]] = False
    return float(hit.mean()), float(others.any(axis=1).mean())


# ------------------------------------------------------------------ gradient suite

def _codes(x, t):
    return mdl.project(mdl.encode(x, t), t)


def _distances(t, x1, x2, tracker):
    return L.subspace_distances(_codes(x1, t), _codes(x2, t), tracker)


def loss_functions(x1, x2, weights: L.LossWeights, mu: np.ndarray) -> dict:
    """Every training loss as a function of the parameter tensors, on one fixed pair batch."""
    def tracker():
        return L.SubspaceNormTracker(len(mu), mu=mu.copy(), frozen=True)

    def dis(t):
        delta = _distances(t, x1, x2, tracker())
        return L.dis_loss(delta, L.soft_mask(delta, weights.tau), weights.margin)

    def reg(t):
        return L.reg_loss(L.soft_mask(_distances(t, x1, x2, tracker()), weights.tau))

    def total(t):
        phase = L.Phase(reg=True, dis=True, cons=True)
        return L.total_loss(x1, x2, t, weights, phase, tracker()).total

    return {
        "rec": lambda t: L.rec_loss(x1, mdl.forward(x1, t)[1]),
        "dis": dis,
        "spar": lambda t: L.spar_loss(_codes(x1, t)),
        "cons": lambda t: L.cons_loss(_codes(x1, t), _codes(x2, t), t),
        "reg": reg,
        "total": total,
    }


def gradient_suite(seed: int = 0, h: float = 1e-5, latent_dim: int = 4, num_subspaces: int = 3,
                   batch: int = 2, input_dim: int = 5, hidden: tuple[int, ...] = (8, 8),
                   max_draws: int = 50, noise_floor: bool = True) -> dict[str, float]:
    """Max relative finite-difference error of each loss on a small random model.

    Draws are rejected while any ReLU, absolute value or hinge input lies
    within ``100 h`` of its kink, where central differences are meaningless.
    Biases are random so that hidden units are not all alike.
    """
    cfg = mdl.ModelConfig(input_dim, latent_dim, num_subspaces, hidden, hidden)
    # unequal loss weights so that a mis-scaled term cannot hide
    weights = L.LossWeights(beta1=0.7, beta2=1.3, beta3=2.0)
    for draw in range(max_draws):
        rng = stream(seed, "gradcheck", draw)
        params = mdl.init_params(cfg, rng)
        for name in params:
            if name.endswith(".b"):
                params[name] = rng.normal(scale=0.3, size=params[name].shape)
        x1, x2 = rng.normal(size=(batch, input_dim)), rng.normal(size=(batch, input_dim))
        mu = rng.uniform(0.5, 1.5, size=num_subspaces)
        fns = loss_functions(x1, x2, weights, mu)
        margin = float("inf")
        for fn in fns.values():
            tape = ad.Tape(track_kinks=True)
            fn(tape.params(params))
            margin = min(margin, tape.kink_margin)
        if margin > 100 * h:
            break
        log.info("gradcheck draw %d rejected (kink margin %.3g)", draw, margin)
    else:
        raise ad.NumericError("could not draw a model away from kinks")
    return {name: ad.finite_diff_check(fn, params, h, noise_floor) for name, fn in fns.items()}
