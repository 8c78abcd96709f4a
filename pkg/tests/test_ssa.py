import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ttncme.model import (ReactionNetwork, builtin_birth_death, builtin_cascade,
                          builtin_lambda_phage, builtin_schloegl)
from ttncme.ssa import run_ensemble, sample_multinomial, simulate_trajectory, summarize


def test_no_reactions_is_absorbing():
    net = ReactionNetwork.from_names(["A", "B"], [])
    tr = simulate_trajectory(net, [3, 4], 10.0, seed=1)
    assert len(tr.times) == 1 and tuple(tr.state_at(10.0)) == (3, 4)
    ens = run_ensemble(net, [3, 4], [0.0, 5.0], 5, 0)
    assert np.all(ens.mean == [[3, 4], [3, 4]])
    assert np.all(ens.std_error == 0)


def test_seeded_runs_are_deterministic():
    net = builtin_cascade(3)
    a = simulate_trajectory(net, [0, 0, 0], 20.0, seed=42)
    b = simulate_trajectory(net, [0, 0, 0], 20.0, seed=42)
    assert np.array_equal(a.times, b.times) and np.array_equal(a.states, b.states)
    e1 = run_ensemble(net, [0, 0, 0], [5.0, 20.0], 200, 7)
    e2 = run_ensemble(net, [0, 0, 0], [5.0, 20.0], 200, 7)
    assert np.array_equal(e1.mean, e2.mean)
    e3 = run_ensemble(net, [0, 0, 0], [5.0, 20.0], 200, 8)
    assert not np.array_equal(e1.mean, e3.mean)


def test_trajectory_moves_by_stoichiometry():
    net = builtin_lambda_phage()
    tr = simulate_trajectory(net, [1, 0, 0, 0, 0], 5.0, seed=3)
    steps = np.diff(tr.states, axis=0)
    allowed = {tuple(nu) for nu in net.stoichiometry}
    assert all(tuple(s) in allowed for s in steps)
    assert np.all(np.diff(tr.times) > 0) and tr.times[-1] <= 5.0


def test_birth_death_mean():
    # stationary Poisson(20); at t = 100 the mean is 20 (1 - e^-10)
    ens = run_ensemble(builtin_birth_death(), [0], [100.0], 4000, 5)
    expect = 20.0 * (1 - np.exp(-10.0))
    assert abs(ens.mean[0, 0] - expect) <= 3 * ens.std_error[0, 0]


def test_single_run_histograms():
    ens = run_ensemble(builtin_cascade(2), [2, 1], [0.0, 1.0], 1, 9, (0, 0), (7, 7))
    for k in range(2):
        for h in ens.histograms[k]:
            assert h.sum() == 1.0 and np.count_nonzero(h) == 1
    assert ens.histograms[0][0][2] == 1.0 and ens.histograms[0][1][1] == 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2**31 - 1))
def test_histograms_sum_to_runs(n_runs, seed):
    ens = run_ensemble(builtin_cascade(3), [0, 0, 0], [1.0, 3.0], n_runs, seed, (0, 0, 0), (2, 2, 2))
    for k in range(2):
        for s in range(3):
            assert ens.histograms[k][s].sum() == n_runs
    assert np.all(ens.clipped >= 0) and np.all(ens.clipped <= n_runs)


def test_clipping_counts():
    samples = np.array([[[0, 5]], [[3, 1]], [[9, 2]]])
    ens = summarize(samples, np.array([1.0]), (0, 1), (4, 4))
    assert list(ens.clipped[0]) == [1, 1]
    assert list(ens.histograms[0][0]) == [1, 0, 0, 1, 1]
    assert list(ens.histograms[0][1]) == [1, 1, 0, 1]


def test_states_stay_nonnegative():
    net = builtin_schloegl()
    tr = simulate_trajectory(net, [5], 2.0, seed=11)
    assert np.all(tr.states >= 0)


def test_sample_multinomial():
    x = sample_multinomial(3, [0.05] * 5, 20_000, seed=1)
    assert x.shape == (20_000, 5) and np.all(x.sum(axis=1) <= 3)
    assert np.allclose(x.mean(axis=0), 0.15, atol=0.01)
    assert np.mean(x.sum(axis=1) == 0) == pytest.approx(0.75 ** 3, abs=0.01)


def test_input_validation():
    with pytest.raises(ValueError):
        run_ensemble(builtin_birth_death(), [-1], [1.0], 3, 0)
    with pytest.raises(ValueError):
        run_ensemble(builtin_birth_death(), [0], [2.0, 1.0], 3, 0)
    with pytest.raises(ValueError):
        run_ensemble(builtin_birth_death(), [0], [1.0], 0, 0)


@pytest.mark.slow
def test_schloegl_long_time_mean():
    # reduced ensemble: one trajectory to t = 500 costs about three seconds
    ens = run_ensemble(builtin_schloegl(), [0], [500.0], 64, 2024)
    assert abs(ens.mean[0, 0] - 169.46) <= 3 * ens.std_error[0, 0]
