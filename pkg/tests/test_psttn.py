import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from ttncme.dense import CMEOperator, delta_distribution, integrate_dense
from ttncme.grid import TruncatedStateSpace
from ttncme.model import (ReactionNetwork, builtin_birth_death,
                          builtin_cascade, builtin_lambda_phage, validate_factorization)
from ttncme.psttn import (NumericalError, PSTTNIntegrator, SolverConfig, integrate, leaf_AB,
                          leaf_data, precompute_AB, s_rhs, s_step)
from ttncme.ttn import (delta_state, eval_full, mass, node_factor, parse_partition,
                        random_state)


def _matrix(op):
    return np.column_stack([op.apply(e.reshape(op.shape)).ravel() for e in np.eye(op.space.size)])


def _orthonormal(state, tol=1e-12):
    for l in state.tree.leaves:
        X = state.leaves[l.path]
        assert np.allclose(X.T @ X, np.eye(X.shape[1]), atol=tol)
    for n in state.tree.internal:
        if n is not state.tree.root:
            X = node_factor(state, n)
            assert np.allclose(X.T @ X, np.eye(X.shape[1]), atol=tol)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(0.0, 1.0)
    with pytest.raises(ValueError):
        SolverConfig(0.03, 1.0)
    with pytest.raises(ValueError):
        SolverConfig(0.1, 1.0, "rk4")
    with pytest.raises(ValueError):
        SolverConfig(0.1, 1.0, output_times=(0.25,))
    assert SolverConfig(0.1, 1.0, output_times=(0.0, 0.5)).output_steps() == [0, 5]


def test_no_reactions_leave_state_unchanged():
    net = ReactionNetwork.from_names(["A", "B", "C"], [])
    sp = TruncatedStateSpace.box((3, 3, 3))
    state = random_state(parse_partition("((0)((1)(2)))", (2, 2)), sp, np.random.default_rng(0))
    P = eval_full(state)
    integ = PSTTNIntegrator(state, net, SolverConfig(0.1, 1.0))
    res = integ.run(keep_states=True)
    assert np.max(np.abs(eval_full(res.states[-1]) - P)) <= 1e-14
    assert np.all(np.abs(res.step_mass - res.step_mass[0]) <= 1e-14)


def test_single_leaf_matches_dense():
    net = builtin_birth_death()
    sp = TruncatedStateSpace((0,), (40,))
    state = delta_state(parse_partition("((0))"), sp)
    res = PSTTNIntegrator(state, net, SolverConfig(0.05, 2.0)).run(keep_states=True)
    _, (p,) = integrate_dense(CMEOperator(net, sp), delta_distribution(sp), 2.0, 0.05)
    assert np.max(np.abs(eval_full(res.states[-1]) - p)) <= 1e-13


def test_birth_death_hand_step():
    # one Euler step from x = 0: only the birth at rate 2 fires
    sp = TruncatedStateSpace((0,), (5,))
    integ = PSTTNIntegrator(delta_state(parse_partition("((0))"), sp), builtin_birth_death(),
                            SolverConfig(0.1, 0.1))
    integ.step()
    assert np.allclose(eval_full(integ.state), [0.8, 0.2, 0, 0, 0, 0], rtol=0, atol=1e-15)


def test_leaf_coefficients_symmetric_psd():
    net = builtin_lambda_phage()
    tree = parse_partition("((0 1)((2 3)(4)))", (5, 5))
    sp = TruncatedStateSpace((0,) * 5, (15, 40, 10, 10, 10))
    state = random_state(tree, sp, np.random.default_rng(1))
    asg = validate_factorization(net, tree)
    for leaf in tree.leaves:
        _, B = leaf_AB(state.leaves[leaf.path], leaf_data(net, asg, state, leaf))
        for Bm in B:
            assert np.allclose(Bm, Bm.T, atol=1e-13)
            assert np.min(np.linalg.eigvalsh(Bm)) >= -1e-12


def test_trivial_factor_gives_identity():
    # reaction 0 touches only species 0: on the leaf holding species 1 it is
    # the identity in both coefficients
    net = builtin_cascade(2)
    tree = parse_partition("((0)(1))", (3,))
    sp = TruncatedStateSpace((0, 0), (5, 5))
    state = random_state(tree, sp, np.random.default_rng(2))
    asg = validate_factorization(net, tree)
    A, B = leaf_AB(state.leaves["1"], leaf_data(net, asg, state, tree.by_path["1"]))
    assert np.allclose(A[0], np.eye(3), atol=1e-14)
    assert np.allclose(B[0], np.eye(3), atol=1e-14)


def test_linear_in_initial_scale():
    net = builtin_cascade(3)
    sp = TruncatedStateSpace.box((5, 4, 4))
    tree = parse_partition("((0)((1)(2)))", (3, 2))
    base = random_state(tree, sp, np.random.default_rng(3))
    big = base.copy()
    big.cores[""] = 10.0 * big.cores[""]
    cfg = SolverConfig(0.05, 0.5)
    a = PSTTNIntegrator(base, net, cfg).run(keep_states=True)
    b = PSTTNIntegrator(big, net, cfg).run(keep_states=True)
    assert np.allclose(eval_full(b.states[-1]), 10.0 * eval_full(a.states[-1]), rtol=1e-11, atol=1e-13)


@pytest.mark.parametrize("scheme", ["explicit", "implicit"])
def test_gauge_kept_after_steps(scheme):
    net = builtin_lambda_phage()
    sp = TruncatedStateSpace((0,) * 5, (6, 8, 4, 4, 4))
    state = delta_state(parse_partition("((0 1)((2 3)(4)))", (3, 3)), sp)
    integ = PSTTNIntegrator(state, net, SolverConfig(0.01, 0.05, scheme))
    for _ in range(5):
        integ.step()
    _orthonormal(integ.state)


def test_coefficient_refresh_matches_recompute():
    net = builtin_lambda_phage()
    sp = TruncatedStateSpace((0,) * 5, (6, 8, 4, 4, 4))
    integ = PSTTNIntegrator(random_state(parse_partition("(((0 1)(2 3))(4))", (3, 2)), sp,
                                         np.random.default_rng(4)), net, SolverConfig(0.01, 0.03))
    for _ in range(3):
        integ.step()
    fresh = precompute_AB(integ.state, integ.leaf_data)
    for path in fresh.A:
        assert np.allclose(fresh.A[path], integ.store.A[path], rtol=0, atol=1e-13)
        assert np.allclose(fresh.B[path], integ.store.B[path], rtol=0, atol=1e-13)


def test_non_finite_values_raise():
    net = builtin_cascade(2)
    sp = TruncatedStateSpace((0, 0), (4, 4))
    integ = PSTTNIntegrator(delta_state(parse_partition("((0)(1))", (2,)), sp), net,
                            SolverConfig(0.1, 1.0))
    integ.state.cores[""][0, 0, 0] = np.nan
    with pytest.raises(NumericalError) as err:
        integ.step()
    assert err.value.step == 0


def test_full_rank_exact_flows_reproduce_expm():
    # with full ranks and exact sub-flows the splitting is exact
    net = builtin_cascade(2)
    sp = TruncatedStateSpace((0, 0), (3, 3))
    state = delta_state(parse_partition("((0)(1))", (4,)), sp)
    res = PSTTNIntegrator(state, net, SolverConfig(0.1, 0.5, "exact")).run(keep_states=True)
    op = CMEOperator(net, sp)
    exact = (expm(0.5 * _matrix(op)) @ delta_distribution(sp).ravel()).reshape(sp.shape)
    assert np.max(np.abs(eval_full(res.states[-1]) - exact)) <= 1e-12


def test_full_rank_explicit_is_first_order():
    net = builtin_cascade(2)
    sp = TruncatedStateSpace((0, 0), (3, 3))
    exact = (expm(_matrix(CMEOperator(net, sp))) @ delta_distribution(sp).ravel()).reshape(sp.shape)
    errs = []
    for dt in (0.02, 0.01):
        res = PSTTNIntegrator(delta_state(parse_partition("((0)(1))", (4,)), sp), net,
                              SolverConfig(dt, 1.0)).run(keep_states=True)
        errs.append(np.linalg.norm(eval_full(res.states[-1]) - exact))
    assert errs[0] / errs[1] == pytest.approx(2.0, abs=0.3)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_s_step_small_dt_consistent(seed):
    rng = np.random.default_rng(seed)
    M, r = 3, 3
    A, B = rng.random((M, r, r)), rng.random((M, r, r))
    a, b = rng.random((M, r, r)), rng.random((M, r, r))
    S = rng.standard_normal((r, r))
    for dt in (1e-4, 1e-5):
        exact = s_step(S, A, B, a, b, dt, "exact")
        lin = S + dt * s_rhs(S, A, B, a, b)
        assert np.max(np.abs(exact - lin)) <= 50 * dt ** 2 * (1 + np.abs(S).max())


def test_integrate_schemes_agree_for_small_dt():
    L = np.array([[-1.0, 0.5], [1.0, -0.5]])
    y0 = np.array([1.0, 0.0])
    ex = integrate(lambda y: L @ y, y0, 1e-3, "exact")
    for scheme in ("explicit", "implicit"):
        assert np.max(np.abs(integrate(lambda y: L @ y, y0, 1e-3, scheme) - ex)) <= 2e-6


def test_mass_interior_short_time():
    # far from the box edge the scheme preserves mass to splitting accuracy
    net = builtin_cascade(3)
    sp = TruncatedStateSpace.box((20, 20, 20))
    state = delta_state(parse_partition("((0)((1)(2)))", (4, 4)), sp)
    res = PSTTNIntegrator(state, net, SolverConfig(1e-3, 0.5)).run()
    assert res.max_mass_error <= 1e-4
    assert mass(state) == pytest.approx(1.0, abs=1e-15)


def test_rejects_mismatched_network():
    sp = TruncatedStateSpace.box((3, 3))
    with pytest.raises(ValueError):
        PSTTNIntegrator(delta_state(parse_partition("((0)(1))", (1,)), sp), builtin_cascade(3),
                        SolverConfig(0.1, 0.1))
