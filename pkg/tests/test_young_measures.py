import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relaxctrl.control_space import Box, ControlDictionary, ControlField, build_dictionary, make_grid
from relaxctrl.errors import DimensionError
from relaxctrl.integrands import AbsPower, Factor, Polynomial, Term, constant
from relaxctrl.young_measures import (CompositeTestFunctional, RelaxedControl, SpaceTimeYoungMeasure, YoungSlice,
                                      barycenter, chatter_spacetime, chatter_time, chatter_time_gap,
                                      chattered_spacetime_integral, choquet_represent, dumps, loads, psi_eval,
                                      refine_relaxed, relaxed_eval, subdomain_mask, two_atomic_slice, young_eval,
                                      young_spacetime_integral)

B01 = Box(((0.0, 1.0),))
B11 = Box(((-1.0, 1.0),))
Z = Polynomial([Term(1.0, z=(1,))])


def _panel(nx=9):
    g = make_grid(1, nx, 1.0, 1, 1.0)
    u1, u2 = ControlField.constant(g, [0.0]), ControlField.constant(g, [1.0])
    return g, u1, u2, subdomain_mask(g, [0.0], [0.5])


def test_simplex_rows_normalized():
    g = make_grid(1, 4, 1.0, 2, 1.0)
    d = build_dictionary(g, B11, "constants", 3)
    mu = RelaxedControl(g, d, [[1.0, 1.0, 2.0], [0.0, 0.0, 3.0]], normalize=True)
    np.testing.assert_allclose(mu.weights.sum(axis=1), 1.0, atol=1e-15)
    with pytest.raises(ValueError):
        RelaxedControl(g, d, [[0.5, 0.5, 0.5], [1.0, 0.0, 0.0]])
    with pytest.raises(ValueError):
        RelaxedControl(g, d, [[1.5, -0.5, 0.0], [1.0, 0.0, 0.0]])


def test_psi_eval_examples():
    g = make_grid(1, 10, 1.0, 1, 1.0)
    u = ControlField.constant(g, [0.3])
    assert psi_eval(constant(1.0), u) == pytest.approx(1.0, abs=1e-14)
    assert psi_eval(AbsPower(1.5, 0.3), u) == 0.0


def test_psi_eval_second_order_convergence():
    errs = []
    for n in (8, 16, 32, 64):
        g = make_grid(1, n, 1.0, 1, 1.0)
        u = ControlField.from_function(g, lambda c: c[:, 0])
        errs.append(abs(psi_eval(Polynomial([Term(1.0, z=(2,))]), u) - 1.0 / 3.0))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.8)


def test_relaxed_eval_dirac_and_two_atoms():
    g, u1, u2, _ = _panel()
    d = ControlDictionary(g, B01, (u1, u2))
    assert relaxed_eval(Z, [0.0, 1.0], d) == psi_eval(Z, u2)
    assert relaxed_eval(Z, [0.5, 0.5], d) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(DimensionError):
        relaxed_eval(Z, [1.0], d)


def test_embedding_consistency_for_composites():
    g = make_grid(1, 7, 1.0, 1, 1.0)
    d = build_dictionary(g, B11, "bang", 4, seed=3)
    v = CompositeTestFunctional((((Factor("square"), Z),), ((Factor("exp_clip"), Z), (Factor("identity"), Z))))
    for l, atom in enumerate(d.atoms):
        e = np.zeros(len(d))
        e[l] = 1.0
        assert relaxed_eval(v, e, d) == v(atom)
        assert relaxed_eval(Z, e, d) == psi_eval(Z, atom)


def test_young_eval_examples():
    g, u1, u2, mask = _panel()
    nu = two_atomic_slice(u1, u2, mask)
    assert young_eval(Z, nu) == pytest.approx(5.0 / 8.0, abs=1e-14)
    u = ControlField.from_function(g, lambda c: c[:, 0] ** 2)
    assert young_eval(Z, YoungSlice.dirac_field(u)) == pytest.approx(psi_eval(Z, u), abs=1e-15)
    sym = YoungSlice(g, [-1.0, 1.0], np.full((g.n_nodes, 2), 0.5))
    assert young_eval(Polynomial([Term(1.0, z=(3,))]), sym) == 0.0


@pytest.mark.parametrize("a,expected", [(0.0, (0, 0.5, 0.25, 0.25)), (0.25, (0.25, 0.25, 0, 0.5)),
                                        (0.1, (0.1, 0.4, 0.15, 0.35))])
def test_choquet_weights(a, expected):
    g, u1, u2, mask = _panel()
    mu = choquet_represent(u1, u2, mask, a, B01)
    np.testing.assert_allclose(mu.weights[0], expected, atol=1e-15)
    bc = barycenter(mu.weights[0], mu.dictionary)
    nu = two_atomic_slice(u1, u2, mask)
    np.testing.assert_array_equal(bc.weights, nu.weights)


@pytest.mark.parametrize("a", [-0.01, 0.3])
def test_choquet_range(a):
    g, u1, u2, mask = _panel()
    with pytest.raises(ValueError):
        choquet_represent(u1, u2, mask, a, B01)


def test_subdomain_must_align_with_cells():
    with pytest.raises(ValueError):
        subdomain_mask(make_grid(1, 8, 1.0, 1, 1.0), [0.0], [0.5])


def test_barycenter_dirac_and_mixture():
    g, u1, u2, _ = _panel()
    d = ControlDictionary(g, B01, (u1, u2))
    np.testing.assert_array_equal(barycenter([1.0, 0.0], d).weights, np.tile([1.0, 0.0], (g.n_nodes, 1)))
    np.testing.assert_array_equal(barycenter([0.5, 0.5], d).weights, np.full((g.n_nodes, 2), 0.5))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 6))
def test_lemma_identity_random_dictionaries(seed, L):
    """relaxed_eval(Psi h, mu) = young_eval(h, barycenter(mu)) for local integrands."""
    g = make_grid(1, 6, 1.0, 1, 1.0)
    d = build_dictionary(g, B11, "bang", L, seed=seed)
    mu = np.random.default_rng(seed).dirichlet(np.ones(L))
    nu = barycenter(mu, d)
    for h in (Z, Polynomial([Term(2.0, x=(1,), z=(2,)), Term(-1.0, sin=1, z=(3,))]), AbsPower(1.3, 0.2)):
        assert relaxed_eval(h, mu, d) == pytest.approx(young_eval(h, nu), abs=1e-12)


def test_chatter_dirac_is_exact():
    g = make_grid(1, 5, 1.0, 3, 1.0)
    d = build_dictionary(g, B11, "constants", 3)
    mu = RelaxedControl.dirac(g, d, [2, 2, 2])
    for k in (1, 3, 8):
        ch = chatter_time(mu, k)
        assert np.all(ch.indices == 2)
        assert chatter_time_gap(Z, mu, k) == 0.0


def test_chatter_two_atoms_alternate():
    g = make_grid(1, 5, 1.0, 2, 1.0)
    d = build_dictionary(g, B11, "constants", 2)
    mu = RelaxedControl(g, d, np.full((2, 2), 0.5))
    ch = chatter_time(mu, 2)
    np.testing.assert_array_equal(ch.indices, [0, 1, 0, 1])
    assert chatter_time_gap(Z, mu, 2) == pytest.approx(0.0, abs=1e-15)


def test_chatter_gap_decay_time_dependent():
    g = make_grid(1, 5, 1.0, 4, 1.0)
    d = build_dictionary(g, B11, "constants", 3)
    mu = RelaxedControl(g, d, np.tile([0.3, 0.2, 0.5], (4, 1)))
    h = Polynomial([Term(1.0, t=1, z=(1,)), Term(0.5, z=(2,))])
    ladder = [2, 4, 8, 16, 32]
    gaps = [chatter_time_gap(h, mu, k) for k in ladder]
    for a, b in zip(gaps, gaps[1:]):
        assert b <= 0.75 * a


def test_refine_relaxed_repeats_rows():
    g = make_grid(1, 5, 1.0, 2, 1.0)
    d = build_dictionary(g, B11, "constants", 3)
    mu = RelaxedControl(g, d, [[0.2, 0.3, 0.5], [1.0, 0.0, 0.0]])
    r = refine_relaxed(mu, 3)
    assert r.grid.nt == 6
    np.testing.assert_array_equal(r.weights[3:], np.tile([1.0, 0.0, 0.0], (3, 1)))


def test_spacetime_dirac_cells():
    g = make_grid(1, 5, 1.0, 2, 1.0)
    w = np.zeros((2, g.n_nodes, 2))
    w[:, :2, 0] = 1.0
    w[:, 2:, 1] = 1.0
    nu = SpaceTimeYoungMeasure(g, B11, [-1.0, 1.0], w)
    ref = young_spacetime_integral(Z, nu)
    # odd k nests fine dual cells inside coarse ones, so the realization is exact
    for k in (1, 3, 5):
        ch = chatter_spacetime(nu, k)
        assert chattered_spacetime_integral(Z, ch) == pytest.approx(ref, abs=1e-14)
    # even k puts fine nodes on coarse faces; the mismatch is one fine cell
    gaps = [abs(chattered_spacetime_integral(Z, chatter_spacetime(nu, k)) - ref) for k in (2, 4, 8)]
    assert gaps[1] < gaps[0] and gaps[2] < gaps[1]


def test_spacetime_symmetric_average_vanishes():
    g = make_grid(1, 5, 1.0, 2, 1.0)
    nu = SpaceTimeYoungMeasure.uniform(g, B11, [-1.0, 1.0])
    gaps = []
    for k in (1, 2, 4, 8):
        ch = chatter_spacetime(nu, k)
        gaps.append(abs(chattered_spacetime_integral(Z, ch)))
    assert gaps[-1] <= 0.2 * max(gaps[0], 1e-300) or gaps[-1] < 1e-12
    assert np.all(np.isin(chatter_spacetime(nu, 4).values, [-1.0, 1.0]))


def test_spacetime_two_atomic_gap_shrinks():
    g, u1, u2, mask = _panel()
    nu1 = two_atomic_slice(u1, u2, mask)
    nu = SpaceTimeYoungMeasure.constant_in_time(nu1, g, B01)
    h = Polynomial([Term(1.0, x=(1,), z=(1,))])
    ref = young_spacetime_integral(h, nu)
    gaps = [abs(chattered_spacetime_integral(h, chatter_spacetime(nu, k)) - ref) for k in (2, 4, 8, 16)]
    assert gaps[-1] < gaps[0]


def test_serialization_roundtrip():
    g = make_grid(1, 5, 1.0, 3, 1.0)
    d = build_dictionary(g, B11, "constants", 3)
    mu = RelaxedControl(g, d, np.random.default_rng(0).dirichlet(np.ones(3), size=3))
    back = loads(dumps(mu))
    np.testing.assert_array_equal(back.weights, mu.weights)
    nu = SpaceTimeYoungMeasure.uniform(g, B11, [-1.0, 0.0, 1.0])
    back = loads(dumps(nu))
    np.testing.assert_array_equal(back.weights, nu.weights)
    assert json.loads(dumps(nu))["kind"] == "spacetime_young_measure"
