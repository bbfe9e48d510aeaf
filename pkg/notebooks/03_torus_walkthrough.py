"""
Training on the torus
=====================

Two angles on a torus, pushed through a fixed random network into R^12, are
the two factors. Pairs share one angle and differ in the other; the model is
never told which. After training, two of the four subspaces should carry the
angles and the other two should collapse to constants.

A full run is 30000 steps (about four minutes here). Pass a smaller number to
try it out:  python notebooks/03_torus_walkthrough.py 3000
"""
import sys
import time

import numpy as np

from pmdp import evaluation as E
from pmdp import metrics as M
from pmdp import model as mdl
from pmdp import schedule as S
from pmdp import verify as V
from pmdp.rng import stream
from pmdp.synthdata import make_dataset

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 30000
seed = 0
np.set_printoptions(precision=4, suppress=True)

ds = make_dataset("torus", "circle,circle", ambient_dim=12, noise=0.01, seed=seed)
cfg = S.TrainConfig(model=mdl.ModelConfig(12, 6, 4), schedule=S.BetaSchedule(steps), seed=seed)

# %% the weight schedule: reconstruction alone first, then the other terms join
for frac in (0.0, 0.2, 0.3, 0.4, 0.6, 1.0):
    b = S.beta_at(int(frac * steps), cfg.schedule)
    print(f"t={frac:.1f}T  beta1={b.beta1:.4f} beta2={b.beta2:8.3f} beta3={b.beta3:.2e}")

# %% untrained reference
untrained = mdl.init_params(cfg.model, stream(seed, "init"))  # same draw training starts from
ev0 = E.build_evalset(untrained, ds, seed=seed)
print("\nuntrained MIG-KM:", round(M.mig_km(ev0.codes, ev0.factors, seed=seed), 4))

# %% train
t0 = time.perf_counter()
res = S.train(cfg, ds, log_every=max(1, steps // 10))
print(f"\ntrained {steps} steps in {time.perf_counter() - t0:.0f}s")
for row in res.history:
    print(f"step {row['step']:6d} rec={row['rec']:.4f} dis={row['dis']:.4f} "
          f"spar={row['spar']:.2e} cons={row['cons']:.4f} batch agreement={row['agreement']:.2f}")

# %% which subspaces survived
params = res.params
report, ev = E.evaluate(params, ds, seed=seed)
print("\naverage std per subspace:", report.activity)
print("active subspaces:", np.flatnonzero(E.active_subspaces(report.activity)))
print("collapse ratio:", E.collapse_ratio(report.activity))
print("scores:", {k: round(v, 4) for k, v in report.scores().items()})
print("oracle agreement:", E.oracle_agreement(params, ds, seed=seed))

# %% does a change of one angle move only its own subspace?
d2 = V.check_definition2(params, ds, seed=seed)
print(f"hit rate {d2.hit_rate:.3f}, leak rate {d2.leak_rate:.3f}, factor -> subspace {d2.matching}")
