import numpy as np
import pytest

from pmdp import autodiff as ad
from pmdp import losses as L
from pmdp import model as mdl
from pmdp import verify as V
from pmdp.autodiff import Tensor
from pmdp.rng import stream
from pmdp.synthdata import make_dataset


# -- support overlap

def test_overlap_examples():
    assert V.support_overlap(np.eye(3)) == (0.0, False)
    assert V.support_overlap(np.ones((3, 4))) == (1.0, False)
    S = np.array([[1.0, 2.0, 0.0, 0.0], [0.0, 3.0, 4.0, 0.0]])
    assert V.support_overlap(S)[0] == pytest.approx(1 / 3)


def test_overlap_degenerate_and_errors():
    assert V.support_overlap(np.zeros((2, 3))) == (0.0, True)
    with pytest.raises(ad.ContractError):
        V.support_overlap(np.ones((1, 3)))
    with pytest.raises(ad.ContractError):
        V.support_profile(np.ones((2, 2)), rel_threshold=0.0)


def test_overlap_invariant_to_signs_and_scale():
    rng = np.random.default_rng(0)
    S = rng.normal(size=(4, 6)) * (rng.uniform(size=(4, 6)) > 0.5)
    base = V.support_overlap(S)
    flips = np.where(rng.uniform(size=6) > 0.5, -1.0, 1.0)
    assert V.support_overlap(S * flips) == base
    assert V.support_overlap(S * 37.5) == base


def test_overlap_relative_threshold():
    S = np.array([[1.0, 1e-5], [0.0, 1.0]])
    assert V.support_overlap(S)[0] == 0.0
    assert V.support_overlap(S, rel_threshold=1e-6)[0] == 0.5


# -- sparsity helpers

def test_spar_value_matches_loss_definition():
    rng = np.random.default_rng(1)
    S = rng.normal(size=(3, 5))
    expect = L.spar_loss([Tensor(S[i:i + 1]) for i in range(3)]).item()
    assert V.spar_value(Tensor(S)).item() == pytest.approx(expect, rel=1e-14)
    assert sum(V.spar_term(Tensor(S), q).item() for q in range(3)) == pytest.approx(expect, rel=1e-14)


def test_shared_coordinate_gradient_matches_first_order_condition():
    # subspaces 0 and 1 share coordinate 2; subspace 2 lives elsewhere
    S = np.array([[0.7, 0.0, 0.4, 0.0],
                  [0.0, 0.0, -1.1, 0.5],
                  [0.0, 0.9, 0.0, 0.0]])
    for q in range(3):
        tape = ad.Tape()
        leaf = tape.param("S", S)
        g = ad.backward(tape, V.spar_term(leaf, q))["S"]
        np.testing.assert_allclose(g[q], V.first_order_term(S, q), rtol=0, atol=1e-15)
    tape = ad.Tape()
    leaf = tape.param("S", S)
    g = ad.backward(tape, V.spar_value(leaf))["S"]
    assert g[0, 2] != 0 and g[1, 2] != 0
    # coordinates that nobody else claims feel no sparsity pull
    assert g[0, 0] == 0 and g[2, 1] == 0


def test_gradient_vanishes_when_complement_cancels():
    # s_0[0] is shared, but s_1[0] + s_2[0] = 0 so the first-order term for s_0 is zero
    S = np.array([[1.0, 0.0], [0.5, 0.0], [-0.5, 1.0]])
    assert not V.first_order_term(S, 0)[0]


# -- free minimization

def test_disjoint_start_stays_disjoint():
    run = V.minimize_spar_free(2, 2, init=np.eye(2), steps=500)
    assert run.final_overlap == 0.0
    assert run.final_spar == 0.0
    np.testing.assert_allclose(run.vectors, np.eye(2))


def test_minimize_validation():
    with pytest.raises(ad.ContractError):
        V.minimize_spar_free(1, 3)
    with pytest.raises(ad.ContractError):
        V.minimize_spar_free(3, 2)
    with pytest.raises(ad.ContractError):
        V.minimize_spar_free(2, 2, init=np.eye(3))


def test_minimize_trace_every_hundred_steps():
    run = V.minimize_spar_free(3, 6, steps=1000, rng=stream(0, "t"))
    assert [t[0] for t in run.trace] == list(range(0, 1001, 100))
    assert run.trace[-1][2] <= run.trace[0][2]


def test_divergence_aborts():
    with pytest.raises(ad.NumericError):
        # the norm floor pushes short vectors outwards; a huge step overshoots
        V.minimize_spar_free(2, 2, init=0.01 * np.eye(2), lr=1e9, steps=50)


@pytest.mark.slow
def test_random_inits_reach_disjoint_supports():
    runs = V.spar_seed_sweep(range(10), k=3, d=6, steps=20000)
    overlaps = [r.final_overlap for r in runs]
    assert sum(o < 0.05 for o in overlaps) >= 9
    for r in runs:
        norms = np.linalg.norm(r.vectors, axis=1)
        if r.final_overlap == 0 and np.all(norms >= 0.5 - 1e-6):
            assert r.final_spar < 1e-6


# -- subspace locality (def2)

def test_rates_on_identical_pairs():
    delta = np.zeros((10, 3))
    hit, leak = V.definition2_rates(delta, np.zeros(10, dtype=int), {0: 0, 1: 2}, np.ones(3, bool), 0.2)
    assert (hit, leak) == (0.0, 0.0)


def test_rates_hand_example():
    delta = np.array([[0.9, 0.0, 0.3],   # changes factor 0: hit, leak via subspace 2
                      [0.0, 0.1, 0.8],   # changes factor 1: hit, no leak
                      [0.1, 0.0, 0.05]])  # changes factor 1: miss
    active = np.array([True, False, True])
    hit, leak = V.definition2_rates(delta, np.array([0, 1, 1]), {0: 0, 1: 2}, active, 0.2)
    assert hit == pytest.approx(2 / 3) and leak == pytest.approx(1 / 3)


def test_match_subspaces_resolves_conflicts(caplog):
    votes = np.array([[90.0, 10.0, 0.0], [80.0, 5.0, 15.0]])
    out = V.match_subspaces(votes, np.ones(3, bool))
    assert out == {0: 0, 1: 2}
    assert "already taken" in caplog.text


def test_untrained_model_leaks():
    ds = make_dataset("torus", "circle,circle", 12, 0.01, seed=0)
    params = mdl.init_params(mdl.ModelConfig(12, 6, 4), stream(0, "init"))
    res = V.check_definition2(params, ds, num_pairs=1000)
    assert res.leak_rate > 0.6
    assert res.active.all()


def test_no_active_subspace_is_degenerate():
    ds = make_dataset("torus", "circle,circle", 12, 0.01, seed=0)
    params = mdl.init_params(mdl.ModelConfig(12, 4, 2), stream(0, "init"))
    params = {k: np.zeros_like(v) for k, v in params.items()}
    with pytest.raises(V.DegenerateError):
        V.check_definition2(params, ds, num_pairs=50, n_activity=100)
