import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from relaxctrl import presets
from relaxctrl.control_space import Box, ControlField, build_dictionary, make_grid
from relaxctrl.errors import DimensionError
from relaxctrl.integrands import Polynomial, Term, WithoutDerivative, constant, zero
from relaxctrl.optimizer import gradient_check
from relaxctrl.pde import (CompositeCost, LocalCost, ParabolicProblem, assemble_diffusion, average_field, cost,
                           evaluate_cost, reduced_gradient, sensitivities, solve_adjoint, solve_forward)
from relaxctrl.young_measures import RelaxedControl, SpaceTimeYoungMeasure, barycenter
from relaxctrl.errors import MissingDerivativeError

B = Box(((-1.0, 1.0),))
Z = Polynomial([Term(1.0, z=(1,))])


def _problem(grid, f=None, running=None, terminal=None, initial=None, diffusion=1.0):
    return ParabolicProblem(grid=grid, n_state=1, diffusion=diffusion, reaction=(f or zero(),),
                            running=LocalCost(running or zero()), terminal=terminal,
                            initial=(lambda c: np.zeros(len(c))) if initial is None else initial, control_set=B)


def _uniform(problem, count=3):
    d = build_dictionary(problem.grid, B, "constants", count)
    return RelaxedControl.uniform(problem.grid, d)


def test_stencil_1d():
    L = assemble_diffusion(make_grid(1, 4, 1.0, 1, 1.0), 1.0).toarray()
    np.testing.assert_allclose(L, 16 * np.array([[2, -1, 0], [-1, 2, -1], [0, -1, 2]]))


def test_stencil_eigenvector():
    errs = []
    for n in (8, 16, 32):
        g = make_grid(1, n, 1.0, 1, 1.0)
        v = np.sin(np.pi * g.coords[:, 0])
        errs.append(np.max(np.abs(assemble_diffusion(g, 1.0) @ v - np.pi ** 2 * v)))
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


@pytest.mark.parametrize("A", [1.0, [[1.0, 0.0], [0.0, 2.0]], [[2.0, 0.5], [0.5, 1.0]]])
def test_stencil_symmetry(A):
    dim = 1 if np.isscalar(A) else 2
    g = make_grid(dim, 5 if dim == 1 else (5, 4), 1.0, 1, 1.0)
    L = assemble_diffusion(g, A)
    assert abs(L - L.T).max() == 0.0


def test_rejects_indefinite_diffusion():
    with pytest.raises(ValueError):
        _problem(make_grid(2, (4, 4), 1.0, 1, 1.0), diffusion=[[1.0, 2.0], [2.0, 1.0]])


def test_zero_data_stays_zero():
    p = _problem(make_grid(1, 8, 1.0, 5, 1.0))
    assert np.all(solve_forward(p, _uniform(p)).values == 0.0)


def test_heat_oracle_matches_dense():
    g = make_grid(1, 16, 1.0, 50, 0.1)
    p = _problem(g, initial=lambda c: np.sin(np.pi * c[:, 0]))
    y = solve_forward(p, _uniform(p, 1))
    assert np.max(np.abs(y.final[:, 0] - np.exp(-np.pi ** 2 * 0.1) * np.sin(np.pi * g.coords[:, 0]))) == \
        pytest.approx(oracles.heat_error(16, 50), rel=1e-10)


def test_steady_state_source():
    g = make_grid(1, 20, 1.0, 200, 5.0)
    p = _problem(g, f=constant(1.0))
    x = g.coords[:, 0]
    y = solve_forward(p, _uniform(p, 1)).final[:, 0]
    np.testing.assert_allclose(y, x * (1 - x) / 2, atol=1e-10)


def test_forward_2d_against_dense():
    g = make_grid(2, (5, 4), (1.0, 2.0), 6, 0.3)
    A = [[1.0, 0.2], [0.2, 0.5]]
    p = _problem(g, f=Polynomial([Term(1.0, z=(1,)), Term(-0.5, y=(1,))]), diffusion=A,
                 initial=lambda c: np.sin(np.pi * c[:, 0]) * c[:, 1])
    mu = RelaxedControl(g, build_dictionary(g, B, "bang", 3, seed=2),
                        np.random.default_rng(1).dirichlet(np.ones(3), size=6))
    L = assemble_diffusion(g, A).toarray()
    M = np.eye(g.n_nodes) + g.dt * L
    y = p.y0[:, 0]
    vals = mu.option_values[:, :, 0]
    for k in range(g.nt):
        y = np.linalg.solve(M, y + g.dt * (mu.weights[k] @ vals - 0.5 * y))
    np.testing.assert_allclose(solve_forward(p, mu).final[:, 0], y, rtol=1e-12, atol=1e-14)


def test_nonnegativity_and_energy_decay():
    g = make_grid(2, (6, 6), 1.0, 10, 0.2)
    p = _problem(g, initial=lambda c: np.abs(np.sin(3 * c[:, 0]) * c[:, 1]))
    Y = solve_forward(p, _uniform(p, 1)).values[:, :, 0]
    assert np.all(Y >= 0)
    norms = np.linalg.norm(Y, axis=1)
    assert np.all(np.diff(norms) <= 1e-15)


def test_divergence_reported():
    g = make_grid(1, 6, 1.0, 40, 1.0)
    p = _problem(g, f=Polynomial([Term(50.0, y=(3,))]), initial=lambda c: 3 + 0 * c[:, 0])
    with np.errstate(over="ignore", invalid="ignore"):
        y = solve_forward(p, _uniform(p, 1))
        assert cost(p, _uniform(p, 1)) == np.inf
    assert y.diverged and y.diverged_at is not None


def test_average_field_examples():
    g = make_grid(1, 6, 1.0, 1, 1.0)
    p = _problem(g, f=Z)
    d = build_dictionary(g, B, "constants", 3)
    sym = RelaxedControl(g, d, [[0.5, 0.0, 0.5]])
    assert np.all(average_field(p, 0.0, np.zeros(5), sym, 0) == 0.0)
    dirac = RelaxedControl.dirac(g, d, [2])
    np.testing.assert_array_equal(average_field(p, 0.0, np.zeros(5), dirac, 0)[:, 0], np.ones(5))
    with pytest.raises(DimensionError):
        average_field(p, 0.0, np.zeros(4), sym, 0)


def test_fine_and_barycenter_averages_agree():
    g = make_grid(1, 7, 1.0, 1, 1.0)
    f = Polynomial([Term(2.0, z=(2,), x=(1,)), Term(1.0, z=(1,), y=(1,))])
    p = _problem(g, f=f)
    d = build_dictionary(g, B, "bang", 4, seed=5)
    mu = np.random.default_rng(2).dirichlet(np.ones(4))
    nu = barycenter(mu, d)
    coarse = SpaceTimeYoungMeasure.constant_in_time(nu, g, B)
    y = np.linspace(0.1, 0.7, 6)
    np.testing.assert_allclose(average_field(p, 0.0, y, RelaxedControl(g, d, mu[None]), 0),
                               average_field(p, 0.0, y, coarse, 0), rtol=1e-14, atol=1e-15)


def test_cost_examples():
    g = make_grid(1, 6, 1.0, 4, 1.0)
    p = _problem(g, running=Polynomial([Term(1.0, z=(4,)), Term(-2.0, z=(2,)), Term(1.0)]))
    d = build_dictionary(g, B, "constants", 3)
    assert cost(p, RelaxedControl(g, d, np.tile([0.5, 0.0, 0.5], (4, 1)))) == 0.0
    assert cost(p, RelaxedControl.dirac(g, d, [1] * 4)) == pytest.approx(1.0)
    assert cost(_problem(g), RelaxedControl.uniform(g, d)) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_forward_affine_in_weights(seed):
    g = make_grid(1, 6, 1.0, 5, 1.0)
    p = _problem(g, f=Polynomial([Term(1.0, z=(1,)), Term(0.5, x=(1,), z=(2,))]))
    d = build_dictionary(g, B, "constants", 3)
    rng = np.random.default_rng(seed)
    W1, W2 = rng.dirichlet(np.ones(3), size=5), rng.dirichlet(np.ones(3), size=5)
    lam = rng.uniform()
    mix = solve_forward(p, RelaxedControl(g, d, lam * W1 + (1 - lam) * W2)).values
    sep = lam * solve_forward(p, RelaxedControl(g, d, W1)).values + \
        (1 - lam) * solve_forward(p, RelaxedControl(g, d, W2)).values
    np.testing.assert_allclose(mix, sep, atol=1e-14)


def test_adjoint_zero_for_zero_costs():
    g = make_grid(1, 6, 1.0, 5, 1.0)
    p = _problem(g, f=Z)
    mu = _uniform(p)
    chi = solve_adjoint(p, solve_forward(p, mu), mu)
    assert np.all(chi.values == 0.0)


def test_adjoint_terminal_slice():
    g = make_grid(1, 6, 1.0, 5, 1.0)
    term = Polynomial([Term(0.5, y=(2,)), Term(-0.2, y=(1,))])
    p = _problem(g, f=Z, terminal=term, initial=lambda c: np.sin(np.pi * c[:, 0]))
    mu = _uniform(p)
    y = solve_forward(p, mu)
    chi = solve_adjoint(p, y, mu)
    np.testing.assert_array_equal(chi.values[-1], -(y.final - 0.2))


def test_missing_derivative_raises():
    g = make_grid(1, 6, 1.0, 3, 1.0)
    p = _problem(g, f=Z, running=WithoutDerivative(Polynomial([Term(1.0, y=(2,))])))
    mu = _uniform(p)
    y = solve_forward(p, mu)
    assert np.isfinite(evaluate_cost(p, y, mu))
    with pytest.raises(MissingDerivativeError):
        solve_adjoint(p, y, mu)


@pytest.mark.parametrize("name", ["lq", "chatter", "convex", "nonautonomous", "allen_cahn", "composite"])
def test_gradient_matches_finite_differences(name):
    g = make_grid(1, 8, 1.0, 6, 1.0)
    prob = presets.build(name, g)
    d = build_dictionary(g, prob.control_set, "constants", 3)
    W = 0.5 / 3 + 0.5 * np.random.default_rng(0).dirichlet(np.ones(3), size=6)
    res = gradient_check(prob, RelaxedControl(g, d, W))
    assert res["max_relative_error"] < 1e-6


@pytest.mark.parametrize("name", ["lq", "allen_cahn", "nonautonomous"])
def test_coarse_gradient_matches_finite_differences(name):
    g = make_grid(1, 6, 1.0, 4, 1.0)
    prob = presets.build(name, g)
    W = 0.5 / 3 + 0.5 * np.random.default_rng(1).dirichlet(np.ones(3), size=(4, 5))
    nu = SpaceTimeYoungMeasure(g, prob.control_set, [-1.0, 0.0, 1.0], W)
    # per-cell derivatives carry a dx * dt factor; a larger step keeps roundoff below the floor
    assert gradient_check(prob, nu, eps=1e-4)["max_relative_error"] < 1e-6


def test_gradient_2d_multistate():
    g = make_grid(2, (4, 5), (1.0, 1.0), 4, 0.5)
    f1 = Polynomial([Term(1.0, z=(1,)), Term(-0.3, y=(1,)) ])
    f2 = Polynomial([Term(0.5, z=(2,)), Term(0.4, y=(1,))])
    run = Polynomial([Term(1.0, y=(2,)), Term(0.3, z=(2,))])
    prob = ParabolicProblem(grid=g, n_state=2, diffusion=([[1.0, 0.1], [0.1, 1.0]], 0.5), reaction=(f1, f2),
                            running=LocalCost(run), terminal=Polynomial([Term(0.7, y=(2,))]),
                            initial=lambda c: np.stack([np.sin(np.pi * c[:, 0]), c[:, 1] * 0.1], axis=1),
                            control_set=B)
    d = build_dictionary(g, B, "constants", 3)
    W = 0.5 / 3 + 0.5 * np.random.default_rng(3).dirichlet(np.ones(3), size=4)
    assert gradient_check(prob, RelaxedControl(g, d, W))["max_relative_error"] < 1e-6


def test_reduced_gradient_formula():
    g = make_grid(1, 8, 1.0, 5, 1.0)
    prob = presets.build("lq", g)
    d = build_dictionary(g, prob.control_set, "constants", 3)
    mu = RelaxedControl.uniform(g, d)
    y = solve_forward(prob, mu)
    chi = solve_adjoint(prob, y, mu)
    sens = sensitivities(prob, y, mu)
    G = reduced_gradient(prob, y, chi, mu, sens)
    manual = -g.dt * (np.einsum("ksx,kx,x->ks", sens.f_options[..., 0], chi.values[:-1, :, 0], g.weights)
                      - sens.phi_options)
    np.testing.assert_allclose(G, manual, rtol=1e-14, atol=1e-18)


def test_trajectory_exports():
    g = make_grid(1, 4, 1.0, 2, 1.0)
    p = _problem(g, f=Z)
    y = solve_forward(p, _uniform(p))
    lines = y.to_csv().splitlines()
    assert lines[0].startswith("# {") and lines[1].startswith("k,t,")
    assert len(lines) == 2 + 3
    assert y.to_dict()["diverged_at"] is None


def test_with_grid_keeps_callable_initial():
    p = presets.build("allen_cahn", make_grid(1, 8, 1.0, 4, 1.0))
    q = p.with_grid(make_grid(1, 16, 1.0, 8, 1.0))
    assert q.y0.shape == (15, 1)
    nodal = _problem(make_grid(1, 8, 1.0, 4, 1.0), initial=np.zeros(7))
    with pytest.raises(DimensionError):
        nodal.with_grid(make_grid(1, 16, 1.0, 4, 1.0))


def test_composite_cost_varies_on_choquet_family():
    from relaxctrl.integrands import Factor
    from relaxctrl.young_measures import choquet_represent, subdomain_mask
    g = make_grid(1, 9, 1.0, 1, 1.0)
    B01 = Box(((0.0, 1.0),))
    u1, u2 = ControlField.constant(g, [0.0]), ControlField.constant(g, [1.0])
    mask = subdomain_mask(g, [0.0], [0.5])
    vals = {}
    for mode in ("atomwise", "averaged"):
        for factor in ("square", "identity"):
            costs = []
            for a in (0.0, 0.1, 0.25):
                mu = choquet_represent(u1, u2, mask, a, B01)
                p = ParabolicProblem(grid=g, n_state=1, diffusion=1.0, reaction=(zero(),),
                                     running=CompositeCost((((Factor(factor), Z),),), mode), terminal=None,
                                     initial=np.zeros(8), control_set=B01)
                costs.append(cost(p, mu))
            vals[mode, factor] = np.ptp(costs)
    assert vals["atomwise", "square"] > 1e-3
    assert vals["atomwise", "identity"] < 1e-15
    assert vals["averaged", "square"] < 1e-15
