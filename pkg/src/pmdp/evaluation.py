"""Glue between trained parameters, synthetic datasets and the metric suite."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import metrics as M
from . import model as mdl
from .rng import stream
from .synthdata import ProductManifold


@dataclass
class EvalSet:
    values: np.ndarray   # (M, F) raw factor values
    factors: np.ndarray  # (M, F) discretized levels
    z: np.ndarray        # (M, d) aggregated latents
    codes: np.ndarray    # (M, k, d) subspace codes

    def __post_init__(self):
        if not np.all(np.isfinite(self.codes)):
            raise ValueError("latent codes contain NaN/Inf")


def build_evalset(params: mdl.Params, dataset: ProductManifold, n: int = 10000,
                  seed: int = 0, levels: int = 10) -> EvalSet:
    x, values = dataset.sample(n, stream(seed, "evalset"))
    codes = mdl.subspace_codes(x, params)
    return EvalSet(values, dataset.discretize(values, levels), codes.sum(axis=1), codes)


class DatasetSampler:
    """:class:`metrics.FactorSampler` over a dataset and a representation function."""

    def __init__(self, dataset: ProductManifold, represent: Callable[[np.ndarray], np.ndarray]):
        self.dataset = dataset
        self.represent = represent
        self.num_factors = dataset.num_factors

    def _values(self, n, rng):
        return self.dataset.sample_factors(n, rng)

    def fixed_pairs(self, factor, n, rng):
        v1, v2 = self._values(n, rng), self._values(n, rng)
        v2[:, factor] = v1[:, factor]
        return self.represent(self.dataset.embed(v1, rng)), self.represent(self.dataset.embed(v2, rng))

    def fixed_batch(self, factor, n, rng):
        v = self._values(n, rng)
        v[:, factor] = self._values(1, rng)[0, factor]
        return self.represent(self.dataset.embed(v, rng))

    def sample(self, n, rng):
        return self.represent(self.dataset.embed(self._values(n, rng), rng))


def latent_fn(params: mdl.Params) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: mdl.subspace_codes(x, params).sum(axis=1)


def evaluate(params: mdl.Params, dataset: ProductManifold, n: int = 10000, seed: int = 0,
             bins: int = 20, levels: int = 10) -> tuple[M.MetricsReport, EvalSet]:
    ev = build_evalset(params, dataset, n, seed, levels)
    sampler = DatasetSampler(dataset, latent_fn(params))
    report = M.MetricsReport(
        betavae=M.betavae_score(sampler, stream(seed, "betavae")),
        factorvae=M.factorvae_score(sampler, stream(seed, "factorvae")),
        dci=M.dci_disentanglement(ev.z, ev.factors),
        mig=M.mig(ev.z, ev.factors, bins),
        mig_pca=M.mig_pca(ev.codes, ev.factors, bins),
        mig_km=M.mig_km(ev.codes, ev.factors, seed=seed),
        activity=M.subspace_activity(ev.codes),
    )
    return report, ev


def pair_distances(params: mdl.Params, x1: np.ndarray, x2: np.ndarray,
                   mu: np.ndarray | None = None) -> np.ndarray:
    """(n, k) subspace distances, normalized by ``mu`` (defaults to the mean code length)."""
    c1, c2 = mdl.subspace_codes(x1, params), mdl.subspace_codes(x2, params)
    if mu is None:
        mu = 0.5 * (np.linalg.norm(c1, axis=2).mean(0) + np.linalg.norm(c2, axis=2).mean(0))
    return np.linalg.norm(c1 - c2, axis=2) / np.maximum(mu, 1e-8)


def oracle_agreement(params: mdl.Params, dataset: ProductManifold, n_fit: int = 2000,
                     n_eval: int = 2000, seed: int = 0, mu: np.ndarray | None = None) -> float:
    """Fraction of held-out single-factor pairs whose estimated subspace maps to the changed factor.

    The subspace -> factor map is the majority vote on a separate fitting set.
    """
    rng = stream(seed, "agreement")
    fit = dataset.sample_pairs(n_fit, "one", rng)
    held = dataset.sample_pairs(n_eval, "one", rng)
    k = mdl.num_subspaces(params)
    counts = np.zeros((k, dataset.num_factors))
    np.add.at(counts, (np.argmax(pair_distances(params, fit.x1, fit.x2, mu), axis=1),
                       fit.changed_index()), 1)
    match = np.argmax(counts, axis=1)
    oracle = np.argmax(pair_distances(params, held.x1, held.x2, mu), axis=1)
    return float(np.mean(match[oracle] == held.changed_index()))


def active_subspaces(activity: np.ndarray, rel: float = 1e-2) -> np.ndarray:
    """Boolean mask of subspaces whose activity is at least ``rel`` times the largest."""
    activity = np.asarray(activity, dtype=np.float64)
    top = activity.max()
    if top <= 0:
        return np.zeros(activity.shape, dtype=bool)
    return activity >= rel * top


def collapse_ratio(activity: np.ndarray, rel: float = 1e-2) -> float:
    """Largest inactive activity over smallest active activity (0 when none is inactive)."""
    mask = active_subspaces(activity, rel)
    if mask.all() or not mask.any():
        return 0.0 if mask.all() else float("inf")
    return float(np.max(activity[~mask]) / np.min(activity[mask]))
