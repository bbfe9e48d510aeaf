"""
Why the sparsity term produces a product structure
==================================================

Take k free vectors in R^d, one per subspace, and minimize only the sparsity
penalty. Each vector is pulled towards zero on every coordinate that another
vector also uses. A norm floor keeps the vectors from simply shrinking, so
the only way down is to split the coordinates between the vectors. That is
exactly the disjoint-support layout in which summing subspace codes equals
concatenating them.

Run:  python notebooks/01_sparsity_to_product.py
"""
import numpy as np

from pmdp import verify as V
from pmdp.rng import stream

np.set_printoptions(precision=3, suppress=True)

# %% one run, traced every 100 steps
run = V.minimize_spar_free(3, 6, steps=20000, rng=stream(0, "notebook"))
for step, spar, overlap in run.trace[::20]:
    print(f"step {step:6d}   L_spar {spar:.3e}   overlap {overlap:.3f}")
print("\nfinal vectors (rows = subspaces):")
print(run.vectors)
print("support pattern:")
print(V.support_profile(run.vectors).astype(int))

# %% the first-order condition: a shared coordinate always feels a pull
S = np.array([[0.7, 0.0, 0.4, 0.0],
              [0.0, 0.0, -1.1, 0.5],
              [0.0, 0.9, 0.0, 0.0]])
print("\ncoordinate 2 is shared by subspaces 0 and 1")
for q in range(3):
    print(f"gradient on subspace {q}:", V.first_order_term(S, q))

# %% ten seeds
runs = V.spar_seed_sweep(range(10), k=3, d=6, steps=20000)
print("\nseed  overlap  L_spar")
for seed, r in enumerate(runs):
    print(f"{seed:4d}  {r.final_overlap:7.3f}  {r.final_spar:.2e}")
