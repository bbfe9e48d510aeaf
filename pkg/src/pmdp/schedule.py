"""Two-phase training: reconstruction warmup, then staged loss entry with exponential ramps."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import model as mdl
from .rng import stream
from .synthdata import ProductManifold

log = logging.getLogger(__name__)

EPOCH_STEPS = 1000


@dataclass(frozen=True)
class BetaSchedule:
    total_steps: int
    warmup_frac: float = 0.20
    entry_reg: float = 0.20
    entry_dis: float = 0.30
    entry_cons: float = 0.40
    ramp_frac: float = 0.10
    beta1_max: float = 0.1
    beta2_max: float = 100.0
    beta3_max: float = 1e-4

    def __post_init__(self):
        if self.total_steps < 1:
            raise ad.ContractError("total_steps must be >= 1")
        if not 0 < self.warmup_frac < 1:
            raise ad.ContractError("warmup_frac must lie in (0, 1)")
        if not self.warmup_frac <= self.entry_reg <= self.entry_dis <= self.entry_cons:
            raise ad.ContractError("entry fractions must be non-decreasing and start after warmup")
        if self.ramp_frac <= 0:
            raise ad.ContractError("ramp_frac must be positive")
        if min(self.beta1_max, self.beta2_max, self.beta3_max) < 0:
            raise ad.ContractError("beta maxima must be >= 0")

    def entry_step(self, frac: float) -> float:
        return frac * self.total_steps


@dataclass(frozen=True)
class Betas:
    beta1: float
    beta2: float
    beta3: float
    reg: bool
    dis: bool
    cons: bool

    def as_tuple(self) -> tuple[float, float, float]:
        return self.beta1, self.beta2, self.beta3


def _ramp(step: int, entry: float, tau: float) -> float:
    return -math.expm1(-(step - entry) / tau)


def beta_at(step: int, sched: BetaSchedule) -> Betas:
    """Loss weights and activity flags at ``step``.

    b1 (distance + sparsity) and b2 (consistency) rise as
    ``max * (1 - exp(-(step - entry) / ramp))``. b3 (mask balance) switches on
    at full value and decays as ``b3_max * (1 - b2 / b2_max)``.
    """
    T = sched.total_steps
    if not 0 <= step <= T:
        raise ad.ContractError(f"step {step} outside [0, {T}]")
    tau = sched.ramp_frac * T
    e_reg, e_dis, e_cons = (sched.entry_step(f) for f in (sched.entry_reg, sched.entry_dis, sched.entry_cons))
    reg, dis, cons = step >= e_reg, step >= e_dis, step >= e_cons
    b1 = sched.beta1_max * _ramp(step, e_dis, tau) if dis else 0.0
    frac2 = _ramp(step, e_cons, tau) if cons else 0.0
    b2 = sched.beta2_max * frac2
    b3 = sched.beta3_max * (1.0 - frac2) if reg else 0.0
    return Betas(b1, b2, b3, reg, dis, cons)


@dataclass(frozen=True)
class TrainConfig:
    model: mdl.ModelConfig
    schedule: BetaSchedule
    seed: int = 0
    batch_size: int = 32
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    lr: float = 5e-4
    adam_b1: float = 0.9
    adam_b2: float = 0.99
    adam_eps: float = 1e-8
    policy: str = "one"
    # "soft": mask A weights the distance loss; "hard": one-hot argmax;
    # "auto": soft while b3 > hard_below * b3_max, hard afterwards
    oracle: str = "auto"
    hard_below: float = 0.01

    def __post_init__(self):
        if self.batch_size < 2:
            raise ad.ContractError("batch_size must be >= 2")
        if self.oracle not in ("soft", "hard", "auto"):
            raise ad.ContractError(f"unknown oracle mode {self.oracle!r}")

    @property
    def steps(self) -> int:
        return self.schedule.total_steps

    def with_steps(self, steps: int) -> "TrainConfig":
        return replace(self, schedule=replace(self.schedule, total_steps=steps))


def use_hard_oracle(cfg: TrainConfig, betas: Betas) -> bool:
    if cfg.oracle == "hard":
        return True
    if cfg.oracle == "soft":
        return False
    return betas.beta3 <= cfg.hard_below * cfg.schedule.beta3_max


@dataclass
class TrainResult:
    params: mdl.Params
    history: list[dict]
    tracker: L.SubspaceNormTracker


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, step: int, snapshot: dict):
        super().__init__(msg)
        self.step = step
        self.snapshot = snapshot


class _Agreement:
    """Running subspace -> factor co-occurrence used to score the estimated oracle."""

    def __init__(self, k: int, F: int):
        self.counts = np.zeros((k, F))

    def __call__(self, oracle: np.ndarray, changed: np.ndarray) -> float:
        np.add.at(self.counts, oracle, changed)
        match = np.argmax(self.counts, axis=1)
        return float(np.mean(changed[np.arange(len(oracle)), match[oracle]]))


def train_step(params: mdl.Params, x1, x2, cfg: TrainConfig, betas: Betas,
               tracker: L.SubspaceNormTracker, state: ad.AdamState):
    tape = ad.Tape()
    leaves = tape.params(params)
    phase = L.Phase(reg=betas.reg, dis=betas.dis, cons=betas.cons,
                    hard_oracle=use_hard_oracle(cfg, betas))
    res = L.total_loss(x1, x2, leaves, cfg.weights, phase, tracker, betas.as_tuple())
    grads = ad.backward(tape, res.total)
    new_params, state = ad.adam_step(params, grads, state)
    return new_params, res


def train(cfg: TrainConfig, dataset: ProductManifold,
          params: mdl.Params | None = None,
          checkpoint: str | Path | None = None,
          callback: Callable[[int, mdl.Params, dict], None] | None = None,
          log_every: int = 1) -> TrainResult:
    """Run ``cfg.steps`` Adam steps on freshly sampled pair batches.

    Each history row carries the step, raw loss terms, betas, activity flags and
    the oracle agreement of the batch (ground truth used for logging only).
    """
    if params is None:
        params = mdl.init_params(cfg.model, stream(cfg.seed, "init"))
    data_rng = stream(cfg.seed, "data")
    state = ad.AdamState(lr=cfg.lr, b1=cfg.adam_b1, b2=cfg.adam_b2, eps=cfg.adam_eps)
    tracker = L.SubspaceNormTracker(cfg.model.num_subspaces)
    agree = _Agreement(cfg.model.num_subspaces, dataset.num_factors)
    history = []
    for step in range(cfg.steps):
        betas = beta_at(step, cfg.schedule)
        batch = dataset.sample_pairs(cfg.batch_size, cfg.policy, data_rng)
        try:
            new_params, res = train_step(params, batch.x1, batch.x2, cfg, betas, tracker, state)
        except ad.NumericError as exc:
            raise TrainingAborted(f"non-finite value at step {step}: {exc}", step,
                                  {"params": params, "betas": betas, "mu": tracker.mu.copy()}) from exc
        total = res.total.item()
        if not np.isfinite(total):
            raise TrainingAborted(f"non-finite loss at step {step}", step,
                                  {"params": params, "betas": betas, "mu": tracker.mu.copy()})
        params = new_params
        if step % log_every == 0 or step == cfg.steps - 1:
            row = {"step": step, **{t: res.terms[t] for t in L.TERMS}, "total": total,
                   "beta1": betas.beta1, "beta2": betas.beta2, "beta3": betas.beta3,
                   "reg_on": betas.reg, "dis_on": betas.dis, "cons_on": betas.cons,
                   "agreement": agree(res.oracle(), batch.changed)}
            history.append(row)
            if callback is not None:
                callback(step, params, row)
        if step and step % (10 * EPOCH_STEPS) == 0:
            log.info("step %d rec=%.4g dis=%.4g spar=%.4g cons=%.4g", step,
                     res.terms["rec"], res.terms["dis"], res.terms["spar"], res.terms["cons"])
    if checkpoint is not None:
        mdl.save_checkpoint(checkpoint, params)
    return TrainResult(params, history, tracker)
