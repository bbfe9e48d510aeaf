"""Synthetic product-manifold observations with known factors of variation.

Factors are drawn uniformly, mapped to raw coordinates (circles as
``(cos, sin)`` pairs, categoricals as fixed anchor vectors) and pushed
through a frozen random tanh network into R^N. Pairs share at least one
factor; the changed set is kept alongside for evaluation only.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ContractError
from .rng import stream

TWO_PI = 2.0 * np.pi
POLICIES = ("one", "variable")


@dataclass(frozen=True)
class Factor:
    kind: str  # "circle" | "interval" | "categorical"
    radius: float = 1.0
    low: float = 0.0
    high: float = 1.0
    values: int = 2

    def __post_init__(self):
        if self.kind not in ("circle", "interval", "categorical"):
            raise ContractError(f"unknown factor kind {self.kind!r}")
        if self.kind == "categorical" and self.values < 2:
            raise ContractError("categorical factor needs at least 2 values")
        if self.kind == "interval" and not self.high > self.low:
            raise ContractError("interval needs high > low")
        if self.kind == "circle" and self.radius <= 0:
            raise ContractError("circle radius must be positive")

    @property
    def raw_dim(self) -> int:
        return {"circle": 2, "interval": 1, "categorical": 2}[self.kind]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "circle":
            return rng.uniform(0.0, TWO_PI, size=n)
        if self.kind == "interval":
            return rng.uniform(self.low, self.high, size=n)
        return rng.integers(0, self.values, size=n).astype(np.float64)

    def check(self, v) -> None:
        v = np.asarray(v, dtype=np.float64)
        if self.kind == "circle" and np.any((v < 0) | (v >= TWO_PI)):
            raise ContractError("circle values must lie in [0, 2pi)")
        if self.kind == "interval" and np.any((v < self.low) | (v > self.high)):
            raise ContractError(f"interval values must lie in [{self.low}, {self.high}]")
        if self.kind == "categorical" and np.any((v != np.round(v)) | (v < 0) | (v >= self.values)):
            raise ContractError(f"categorical values must be integers in [0, {self.values})")

    def levels(self, continuous_levels: int = 10) -> int:
        return self.values if self.kind == "categorical" else continuous_levels

    def discretize(self, v: np.ndarray, continuous_levels: int = 10) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if self.kind == "categorical":
            return v.astype(np.int64)
        lo, hi = (0.0, TWO_PI) if self.kind == "circle" else (self.low, self.high)
        idx = np.floor((v - lo) / (hi - lo) * continuous_levels).astype(np.int64)
        return np.clip(idx, 0, continuous_levels - 1)


def parse_factors(text: str) -> list[Factor]:
    """Parse ``"circle,circle,categorical:4,interval:-1:1"``."""
    out = []
    for item in text.split(","):
        parts = item.strip().split(":")
        kind = parts[0]
        if kind == "circle":
            out.append(Factor("circle", radius=float(parts[1]) if len(parts) > 1 else 1.0))
        elif kind == "interval":
            lo, hi = (float(parts[1]), float(parts[2])) if len(parts) > 2 else (0.0, 1.0)
            out.append(Factor("interval", low=lo, high=hi))
        elif kind == "categorical":
            if len(parts) < 2:
                raise ContractError("categorical needs a value count, e.g. categorical:4")
            out.append(Factor("categorical", values=int(parts[1])))
        else:
            raise ContractError(f"unknown factor kind {kind!r}")
    return out


def torus_point(theta, phi, R: float = 2.0, r: float = 0.5) -> np.ndarray:
    """Point(s) on the torus with tube angle ``theta`` and ring angle ``phi``."""
    if not R > r > 0:
        raise ContractError("torus needs R > r > 0")
    theta, phi = np.asarray(theta, dtype=np.float64), np.asarray(phi, dtype=np.float64)
    ring = R + r * np.cos(theta)
    return np.stack([ring * np.cos(phi), ring * np.sin(phi), r * np.sin(theta)], axis=-1)


def factor_distance(factor: Factor, a, b):
    factor.check(a)
    factor.check(b)
    diff = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    if factor.kind == "circle":
        return np.minimum(diff, TWO_PI - diff)
    if factor.kind == "interval":
        return diff
    return (diff != 0).astype(np.float64)


def product_distance(factors: Sequence[Factor], f1, f2):
    """L2 combination of the per-factor distances along the last axis."""
    f1, f2 = np.atleast_1d(np.asarray(f1, float)), np.atleast_1d(np.asarray(f2, float))
    if f1.shape[-1] != len(factors) or f2.shape[-1] != len(factors):
        raise ContractError("factor tuple length does not match the factor list")
    sq = sum(factor_distance(f, f1[..., i], f2[..., i]) ** 2 for i, f in enumerate(factors))
    return np.sqrt(sq)


@dataclass
class PairBatch:
    x1: np.ndarray
    x2: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    changed: np.ndarray  # (n, F) bool

    def __len__(self):
        return self.x1.shape[0]

    def changed_index(self) -> np.ndarray:
        """Index of the changed factor; only meaningful for single-change pairs."""
        return np.argmax(self.changed, axis=1)


class ProductManifold:
    """Frozen generator of observations for a list of factors.

    ``kind="torus"`` requires two circle factors and feeds the 3-D torus
    point (R=2, r=0.5) into the embedding instead of the (cos, sin) pairs.
    """

    def __init__(self, factors: Sequence[Factor], ambient_dim: int = 12, noise: float = 0.01,
                 seed: int = 0, kind: str = "product", hidden: int = 32):
        self.factors = list(factors)
        self.kind = kind
        self.ambient_dim = int(ambient_dim)
        self.noise = float(noise)
        self.seed = int(seed)
        if kind not in ("product", "torus"):
            raise ContractError(f"unknown dataset kind {kind!r}")
        if kind == "torus" and [f.kind for f in self.factors] != ["circle", "circle"]:
            raise ContractError("torus dataset needs exactly two circle factors")
        if self.noise < 0:
            raise ContractError("noise must be >= 0")
        rng = stream(seed, "embedding")
        self.anchors = {i: rng.normal(size=(f.values, 2))
                        for i, f in enumerate(self.factors) if f.kind == "categorical"}
        raw = 3 if kind == "torus" else sum(f.raw_dim for f in self.factors)
        self.W1 = rng.normal(size=(raw, hidden)) / np.sqrt(raw)
        self.b1 = rng.normal(size=hidden) * 0.1
        self.W2 = rng.normal(size=(hidden, self.ambient_dim)) / np.sqrt(hidden)
        self.b2 = rng.normal(size=self.ambient_dim) * 0.1

    @property
    def num_factors(self) -> int:
        return len(self.factors)

    def sample_factors(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.stack([f.sample(n, rng) for f in self.factors], axis=1)

    def raw_coordinates(self, values: np.ndarray) -> np.ndarray:
        values = np.atleast_2d(values)
        if self.kind == "torus":
            return torus_point(values[:, 0], values[:, 1])
        cols = []
        for i, f in enumerate(self.factors):
            v = values[:, i]
            if f.kind == "circle":
                cols += [f.radius * np.cos(v), f.radius * np.sin(v)]
            elif f.kind == "interval":
                cols.append(2.0 * (v - f.low) / (f.high - f.low) - 1.0)
            else:
                a = self.anchors[i][v.astype(np.int64)]
                cols += [a[:, 0], a[:, 1]]
        return np.stack(cols, axis=1)

    def embed(self, values: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """Noise-free map when ``rng`` is None, otherwise adds isotropic noise."""
        h = np.tanh(self.raw_coordinates(values) @ self.W1 + self.b1)
        x = np.tanh(h @ self.W2 + self.b2)
        if rng is not None and self.noise > 0:
            x = x + rng.normal(scale=self.noise, size=x.shape)
        return x

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        values = self.sample_factors(n, rng)
        return self.embed(values, rng), values

    def discretize(self, values: np.ndarray, continuous_levels: int = 10) -> np.ndarray:
        return np.stack([f.discretize(values[:, i], continuous_levels)
                         for i, f in enumerate(self.factors)], axis=1)

    def changed_sets(self, n: int, policy: str, rng: np.random.Generator) -> np.ndarray:
        F = self.num_factors
        changed = np.zeros((n, F), dtype=bool)
        if policy == "none":  # test-only
            return changed
        if F < 2:
            raise ContractError("pair sampling needs at least two factors")
        if policy == "one":
            changed[np.arange(n), rng.integers(0, F, size=n)] = True
        elif policy == "variable":
            sizes = rng.integers(1, F, size=n)
            for row, size in enumerate(sizes):
                changed[row, rng.permutation(F)[:size]] = True
        else:
            raise ContractError(f"unknown pair policy {policy!r}")
        return changed

    def sample_pairs(self, n: int, policy: str, rng: np.random.Generator) -> PairBatch:
        f1 = self.sample_factors(n, rng)
        changed = self.changed_sets(n, policy, rng)
        f2 = f1.copy()
        for i, f in enumerate(self.factors):
            rows = np.flatnonzero(changed[:, i])
            if rows.size == 0:
                continue
            fresh = f.sample(rows.size, rng)
            if f.kind == "categorical":
                # shift onto the other V-1 values: a uniform draw that never repeats
                fresh = (f1[rows, i] + 1 + rng.integers(0, f.values - 1, size=rows.size)) % f.values
            f2[rows, i] = fresh
        x1 = self.embed(f1, rng)
        x2 = self.embed(f2, rng)
        return PairBatch(x1, x2, f1, f2, changed)

    def sample_pair(self, policy: str, rng: np.random.Generator) -> PairBatch:
        return self.sample_pairs(1, policy, rng)


def make_dataset(kind: str = "torus", factors: str | Sequence[Factor] = "circle,circle",
                 ambient_dim: int = 12, noise: float = 0.01, seed: int = 0) -> ProductManifold:
    if isinstance(factors, str):
        factors = parse_factors(factors)
    return ProductManifold(factors, ambient_dim=ambient_dim, noise=noise, seed=seed, kind=kind)
