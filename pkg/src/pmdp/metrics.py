"""Disentanglement scores: BetaVAE, FactorVAE, DCI, MIG, MIG-PCA, MIG-KM.

Latents are ``(M, D)`` arrays, subspace codes ``(M, k, d)`` arrays and
factors ``(M, F)`` integer arrays of discretized ground-truth levels.
Mutual information is measured in nats.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .autodiff import ContractError

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ information

def _as_codes(col) -> np.ndarray:
    col = np.asarray(col)
    if col.ndim != 1:
        raise ContractError("expected a 1-D column")
    return np.unique(col, return_inverse=True)[1].reshape(-1)


def discrete_entropy(col) -> float:
    col = _as_codes(col)
    if col.size == 0:
        raise ContractError("entropy of an empty column")
    p = np.bincount(col) / col.size
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def discrete_mi(codes, factor) -> float:
    """Plug-in mutual information of two integer columns from their joint histogram."""
    a, b = _as_codes(codes), _as_codes(factor)
    if a.size == 0:
        raise ContractError("mutual information of empty columns")
    if a.size != b.size:
        raise ContractError(f"column lengths differ: {a.size} vs {b.size}")
    na, nb = a.max() + 1, b.max() + 1
    joint = np.bincount(a * nb + b, minlength=na * nb).reshape(na, nb) / a.size
    pa, pb = joint.sum(axis=1), joint.sum(axis=0)
    nz = joint > 0
    mi = (joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])).sum()
    return float(max(mi, 0.0))


def quantile_bins(col, bins: int = 20) -> np.ndarray:
    """Equal-mass bins from average ranks; tied values always share a bin."""
    col = np.asarray(col, dtype=np.float64)
    uniq, inv, counts = np.unique(col, return_inverse=True, return_counts=True)
    upto = np.cumsum(counts)
    avg_rank = (upto - (counts + 1) / 2.0)[inv.reshape(-1)]  # 0-based mean rank per tie group
    return np.minimum((avg_rank * bins / col.size).astype(np.int64), bins - 1)


def mi_matrix(discrete_latents: np.ndarray, factors: np.ndarray) -> np.ndarray:
    """(D, F) mutual information between every latent column and every factor."""
    D, F = discrete_latents.shape[1], factors.shape[1]
    return np.array([[discrete_mi(discrete_latents[:, j], factors[:, f]) for f in range(F)]
                     for j in range(D)])


def _normalized_gaps(m: np.ndarray, factors: np.ndarray) -> float:
    gaps = []
    for f in range(factors.shape[1]):
        h = discrete_entropy(factors[:, f])
        if h <= 0:
            log.warning("factor %d has zero entropy; skipped", f)
            continue
        top = np.sort(m[:, f])[::-1]
        second = top[1] if top.size > 1 else 0.0
        gaps.append((top[0] - second) / h)
    if not gaps:
        return 0.0
    return float(np.clip(np.mean(gaps), 0.0, 1.0))


def mig(latents: np.ndarray, factors: np.ndarray, bins: int = 20) -> float:
    """Mutual information gap over quantile-binned latent dimensions."""
    if bins < 2:
        raise ContractError("bins must be >= 2")
    latents = np.asarray(latents, dtype=np.float64)
    disc = np.stack([quantile_bins(latents[:, j], bins) for j in range(latents.shape[1])], axis=1)
    return _normalized_gaps(mi_matrix(disc, np.asarray(factors)), np.asarray(factors))


# ------------------------------------------------------------------ PCA

@dataclass
class Axis:
    vector: np.ndarray
    eigenvalue: float
    degenerate: bool = False
    near_isotropic: bool = False


def _sign_fix(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    return -v if nz.size and v[nz[0]] < 0 else v


def _power_iteration(C: np.ndarray, iters: int, tol: float) -> tuple[np.ndarray, float]:
    d = C.shape[0]
    # deterministic start with weight on every coordinate
    v = np.ones(d) / np.sqrt(d) + np.arange(d) * 1e-3
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = C @ v
        n = np.linalg.norm(w)
        if n == 0.0:
            break
        w /= n
        lam = float(w @ C @ w)
        done = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
        v = w
        if done:
            break
    return v, lam


def pca_first_axis(points, iters: int = 200, tol: float = 1e-10,
                   isotropy_ratio: float = 0.9) -> Axis:
    """Dominant principal axis by power iteration on the centered covariance."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ContractError("pca needs at least 2 points in a 2-D array")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / X.shape[0]
    d = C.shape[0]
    if not np.any(C):
        e = np.zeros(d)
        e[0] = 1.0
        return Axis(e, 0.0, degenerate=True)
    v, lam = _power_iteration(C, iters, tol)
    v = _sign_fix(v)
    near = False
    if d > 1 and lam > 0:
        _, lam2 = _power_iteration(C - lam * np.outer(v, v), iters, tol)
        near = lam2 / lam >= isotropy_ratio
    return Axis(v, lam, near_isotropic=near)


def mig_pca(codes: np.ndarray, factors: np.ndarray, bins: int = 20) -> float:
    """MIG after collapsing each subspace onto its first principal axis."""
    codes = np.asarray(codes, dtype=np.float64)
    proj = np.empty(codes.shape[:2])
    for i in range(codes.shape[1]):
        S = codes[:, i, :]
        ax = pca_first_axis(S)
        proj[:, i] = (S - S.mean(axis=0)) @ ax.vector if not ax.degenerate else 0.0
    return mig(proj, factors, bins)


# ------------------------------------------------------------------ k-means

@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective: list[float] = field(default_factory=list)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.maximum((X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :], 0.0)


def kmeans(points, b: int, rng: np.random.Generator, max_iter: int = 100) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    M = X.shape[0]
    if b < 1 or b > M:
        raise ContractError(f"need 1 <= b <= M, got b={b}, M={M}")
    C = np.empty((b, X.shape[1]))
    C[0] = X[rng.integers(M)]
    d2 = ((X - C[0]) ** 2).sum(1)
    for c in range(1, b):
        total = d2.sum()
        idx = rng.choice(M, p=d2 / total) if total > 0 else rng.integers(M)
        C[c] = X[idx]
        d2 = np.minimum(d2, ((X - C[c]) ** 2).sum(1))

    assign = None
    objective = []
    for _ in range(max_iter):
        D = _sq_dists(X, C)
        new = np.argmin(D, axis=1)
        objective.append(float(D[np.arange(M), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(b):
            members = assign == c
            if members.any():
                C[c] = X[members].mean(axis=0)
            else:
                far = np.argmax(D[np.arange(M), assign])
                C[c] = X[far]
                assign[far] = c
                D[far] = 0.0
    return KMeansResult(C, assign, objective)


def mig_km(codes: np.ndarray, factors: np.ndarray, levels=None, seed: int = 0) -> float:
    """MIG over k-means cluster ids of each subspace.

    ``levels[f]`` is the number of centroids used when scoring factor ``f``;
    it defaults to the factor's number of observed values.
    """
    from .rng import stream

    codes = np.asarray(codes, dtype=np.float64)
    factors = np.asarray(factors)
    M, k = codes.shape[:2]
    F = factors.shape[1]
    if levels is None:
        levels = [np.unique(factors[:, f]).size for f in range(F)]
    if np.all(codes.std(axis=0) == 0):
        log.warning("all subspaces are constant; MIG-KM is 0")
        return 0.0
    cache: dict[tuple[int, int], np.ndarray] = {}
    m = np.zeros((k, F))
    for f in range(F):
        b = int(levels[f])
        for i in range(k):
            if (i, b) not in cache:
                cache[i, b] = kmeans(codes[:, i, :], b, stream(seed, "kmeans", i, b)).assignments
            m[i, f] = discrete_mi(cache[i, b], factors[:, f])
    return _normalized_gaps(m, factors)


# ------------------------------------------------------------------ DCI

def _ridge(X: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    A = X.T @ X / X.shape[0]
    for _ in range(4):
        G = A + lam * np.eye(A.shape[0])
        if np.linalg.cond(G) < 1e12:
            return np.linalg.solve(G, X.T @ y / X.shape[0])
        lam *= 10.0
    raise np.linalg.LinAlgError("ridge system singular after escalating lambda")


def importance_matrix(latents: np.ndarray, factors: np.ndarray, lam: float = 1e-3) -> np.ndarray:
    """(D, F) absolute ridge weights on standardized latents and targets."""
    Z = np.asarray(latents, dtype=np.float64)
    sd = Z.std(axis=0)
    Z = (Z - Z.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    Y = np.asarray(factors, dtype=np.float64)
    ysd = Y.std(axis=0)
    Y = (Y - Y.mean(axis=0)) / np.where(ysd > 0, ysd, 1.0)
    return np.abs(_ridge(Z, Y, lam))


def dci_from_importance(R: np.ndarray) -> float:
    R = np.abs(np.asarray(R, dtype=np.float64))
    D, F = R.shape
    if F < 2:
        raise ContractError("DCI disentanglement needs at least two factors")
    rows = R.sum(axis=1)
    if rows.sum() == 0:
        return 0.0
    P = R / np.where(rows > 0, rows, 1.0)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        H = -np.where(P > 0, P * np.log(P), 0.0).sum(axis=1) / np.log(F)
    weights = rows / rows.sum()
    return float(np.clip((weights * (1.0 - H)).sum(), 0.0, 1.0))


def dci_disentanglement(latents: np.ndarray, factors: np.ndarray, lam: float = 1e-3) -> float:
    return dci_from_importance(importance_matrix(latents, factors, lam))


# ------------------------------------------------------------------ classifier scores

class FactorSampler(Protocol):
    """Representations of samples drawn with one factor held fixed."""

    num_factors: int

    def fixed_pairs(self, factor: int, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """``n`` representation pairs sharing the value of ``factor``."""

    def fixed_batch(self, factor: int, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` representations all sharing one random value of ``factor``."""

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` representations of unconstrained samples."""


def _softmax_regression(X, y, n_classes, iters=2000, lr=0.5, l2=1e-4):
    mu, sd = X.mean(axis=0), X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Xs = (X - mu) / sd
    W = np.zeros((X.shape[1], n_classes))
    b = np.zeros(n_classes)
    Y = np.eye(n_classes)[y]
    for _ in range(iters):
        logits = Xs @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        P = np.exp(logits)
        P /= P.sum(axis=1, keepdims=True)
        G = (P - Y) / X.shape[0]
        W -= lr * (Xs.T @ G + l2 * W)
        b -= lr * G.sum(axis=0)
    return lambda Z: np.argmax(((Z - mu) / sd) @ W + b, axis=1)


def betavae_score(sampler: FactorSampler, rng: np.random.Generator, n_train: int = 600,
                  n_eval: int = 300, L: int = 64, iters: int = 2000) -> float:
    """Held-out accuracy of a linear classifier predicting the fixed factor."""
    F = sampler.num_factors
    if L < 1 or n_train < F:
        raise ContractError("insufficient pairs for the BetaVAE score")

    def points(n):
        y = rng.integers(0, F, size=n)
        X = []
        for f in y:
            z1, z2 = sampler.fixed_pairs(int(f), L, rng)
            X.append(np.abs(z1 - z2).mean(axis=0))
        return np.array(X), y

    Xtr, ytr = points(n_train)
    Xev, yev = points(n_eval)
    predict = _softmax_regression(Xtr, ytr, F, iters=iters)
    return float(np.mean(predict(Xev) == yev))


def factorvae_score(sampler: FactorSampler, rng: np.random.Generator, n_train: int = 800,
                    n_eval: int = 400, L: int = 64, n_global: int = 5000) -> float:
    """Majority-vote accuracy mapping the least-varying latent dim to the fixed factor."""
    F = sampler.num_factors
    scale = sampler.sample(n_global, rng).std(axis=0)
    active = scale > 0
    if not active.all():
        log.warning("excluding %d zero-variance latent dims", int((~active).sum()))
    if not active.any():
        return 0.0
    dims = np.flatnonzero(active)

    def votes(n):
        out = np.zeros((len(dims), F), dtype=np.int64)
        for _ in range(n):
            f = int(rng.integers(F))
            z = sampler.fixed_batch(f, L, rng)[:, dims] / scale[dims]
            out[np.argmin(z.var(axis=0)), f] += 1
        return out

    train, held = votes(n_train), votes(n_eval)
    table = np.argmax(train, axis=1)
    return float(held[np.arange(len(dims)), table].sum() / held.sum())


# ------------------------------------------------------------------ diagnostics

def subspace_activity(codes: np.ndarray) -> np.ndarray:
    """Per subspace: mean over coordinates of the per-coordinate std over samples."""
    codes = np.asarray(codes, dtype=np.float64)
    return codes.std(axis=0).mean(axis=1)


@dataclass
class MetricsReport:
    betavae: float
    factorvae: float
    dci: float
    mig: float
    mig_pca: float
    mig_km: float
    activity: np.ndarray

    def scores(self) -> dict[str, float]:
        return {"betavae": self.betavae, "factorvae": self.factorvae, "dci": self.dci,
                "mig": self.mig, "mig_pca": self.mig_pca, "mig_km": self.mig_km}
