"""
Metric sanity checks
====================

Before trusting any score on a trained model it helps to see the metrics on
representations whose answer is known: a copy of the factors should score
perfectly, and pure noise should score near zero (MIG) or near chance
(the two classifier scores).

Run:  python notebooks/02_metric_sanity.py
"""
import numpy as np

from pmdp import metrics as M
from pmdp.rng import stream

# %% balanced grid of two 10-level factors
grid = np.stack(np.meshgrid(np.arange(10), np.arange(10), indexing="ij"), axis=-1).reshape(-1, 2)
f = np.tile(grid, (20, 1))
print("MIG, latents = factors:        ", M.mig(f.astype(float), f))
z_dup = np.column_stack([f[:, 0], f[:, 0], f[:, 1]]).astype(float)
print("MIG, first factor duplicated:  ", M.mig(z_dup, f))
rng = stream(0, "notebook")
print("MIG, gaussian noise:           ", M.mig(rng.normal(size=(len(f), 4)), f))

# %% subspace-level MIG variants on 2-D codes
# each factor drives one 2-D subspace through a rotation angle
angle = 2 * np.pi * (f + rng.uniform(size=f.shape)) / 10
codes = np.stack([np.column_stack([np.cos(angle[:, 0]), np.sin(angle[:, 0])]),
                  np.column_stack([np.cos(angle[:, 1]), np.sin(angle[:, 1])])], axis=1)
print("\nsummed-latent MIG on circle codes:", round(M.mig(codes.reshape(len(f), -1), f), 3))
print("MIG-PCA:", round(M.mig_pca(codes, f), 3))
print("MIG-KM: ", round(M.mig_km(codes, f), 3))

# %% DCI on linear latents and the scoring stage alone
print("\nDCI, identity importance:", M.dci_from_importance(np.eye(3)))
print("DCI, uniform importance: ", M.dci_from_importance(np.ones((3, 3))))
print("DCI, latents = factors:  ", round(M.dci_disentanglement(f.astype(float), f), 3))
