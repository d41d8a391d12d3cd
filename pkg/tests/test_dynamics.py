import math

import numpy as np
import pytest

from kervar.dynamics import (
    AdditiveLags,
    CustomFunction,
    GaussianDiag,
    KernelSections,
    TanhLinear,
    Trajectory,
    TruncatedGaussian,
    lag_embed,
    simulate_var,
    stationary_sample,
    step_stream_normals,
    zero_function,
)
from kervar.errors import SimulationDivergedError
from kervar.kernels import GaussianKernel


class TestRegressionFunctions:
    def test_tanh_linear_shapes(self):
        g = TanhLinear(matrix=np.array([[0.5, -0.2], [0.1, 0.3]]), scale=0.7)
        assert g.d == 2 and g.p == 1
        y = np.array([0.4, -1.0])
        expected = 0.7 * np.tanh(g.matrix @ y)
        assert g(y) == pytest.approx(expected)
        batch = g(np.stack([y, 2 * y]))
        assert batch.shape == (2, 2)
        assert batch[0] == pytest.approx(expected)

    def test_g1_sup_bound_on_random_inputs(self):
        rng = np.random.default_rng(0)
        g = TanhLinear(matrix=rng.normal(size=(2, 4)), scale=1.3)
        ys = rng.normal(scale=5.0, size=(100_000, 4))
        assert np.abs(g(ys)).max() <= g.m_sup + 1e-12

    def test_additive_lags(self):
        h1 = TanhLinear(matrix=np.array([[0.5]]), scale=1.0)
        h2 = TanhLinear(matrix=np.array([[-0.3]]), scale=0.5)
        g = AdditiveLags(lag_functions=(h1, h2))
        assert g.d == 1 and g.p == 2 and g.m_sup == pytest.approx(1.5)
        y = np.array([0.2, 0.8])  # most recent lag first
        assert g(y) == pytest.approx(np.tanh(0.5 * 0.2) + 0.5 * np.tanh(-0.3 * 0.8))

    def test_kernel_sections_bounded(self):
        spec = GaussianKernel(input_dim=1, tau2=2.0)
        g = KernelSections(
            kernel=spec,
            centers=np.array([[-0.5], [0.5]]),
            coeffs=np.array([[1.0], [-2.0]]),
        )
        assert g.d == 1 and g.p == 1
        rng = np.random.default_rng(1)
        vals = g(rng.normal(size=(1000, 1)))
        assert np.abs(vals).max() <= g.m_sup + 1e-12

    def test_zero_function(self):
        g = zero_function(2, 3)
        assert g(np.ones(6)) == pytest.approx(np.zeros(2))


class TestSimulateVar:
    def test_zero_dynamics_matches_reference_stream(self):
        """With g = 0 the outputs are the raw innovations; re-derive them from
        the documented per-step Philox + inverse-CDF rule."""
        from scipy.special import ndtri

        seed, T = 123, 5
        traj = simulate_var(zero_function(1, 1), GaussianDiag(sigma2=(1.0,)), 1, 1, T,
                            burn_in=0, seed=seed)
        for i in range(T):
            step = 1 + i  # p = 1 zero column, then one recursion step per column
            bg = np.random.Philox(key=seed, counter=step << 64)
            u = ((int(bg.random_raw(1)[0]) >> 11) + 0.5) * 2.0**-53
            assert traj.values[0, i] == ndtri(u)

    def test_zero_matrix_equals_zero_function(self):
        noise = GaussianDiag(sigma2=(1.0,))
        a = simulate_var(zero_function(1, 1), noise, 1, 1, 10, burn_in=3, seed=9)
        b = simulate_var(TanhLinear(matrix=np.zeros((1, 1)), scale=1.0), noise, 1, 1, 10,
                         burn_in=3, seed=9)
        assert np.array_equal(a.values, b.values)

    def test_truncated_noise_boundedness(self):
        # oracle: |X_t| <= M_g + L_eps for every step
        g = TanhLinear(matrix=np.array([[10.0]]), scale=1.0)
        noise = TruncatedGaussian(sigma2=(1.0,), l_eps=0.1)
        traj = simulate_var(g, noise, 1, 1, 100_000, burn_in=0, seed=4)
        assert np.abs(traj.values).max() <= g.m_sup + noise.sup_bound + 1e-12
        assert np.abs(traj.innovations).max() <= noise.sup_bound

    def test_reproducible(self):
        g = TanhLinear(matrix=np.array([[0.4, 0.1], [0.0, 0.3]]), scale=0.8)
        noise = GaussianDiag(sigma2=(0.5, 0.25))
        a = simulate_var(g, noise, 2, 1, 50, burn_in=100, seed=77)
        b = simulate_var(g, noise, 2, 1, 50, burn_in=100, seed=77)
        assert np.array_equal(a.values, b.values)
        c = simulate_var(g, noise, 2, 1, 50, burn_in=100, seed=78)
        assert not np.array_equal(a.values, c.values)

    def test_innovations_align_with_recursion(self):
        g = TanhLinear(matrix=np.array([[0.5]]), scale=0.9)
        noise = GaussianDiag(sigma2=(0.3,))
        traj = simulate_var(g, noise, 1, 1, 30, burn_in=10, seed=3)
        # X_t - eps_t must equal g applied to the previous column
        for t in range(1, traj.T):
            pred = g(traj.values[:, t - 1])
            assert traj.values[0, t] - traj.innovations[0, t] == pytest.approx(pred[0], abs=1e-15)

    def test_dimension_validation(self):
        with pytest.raises(ValueError):
            simulate_var(zero_function(2, 1), GaussianDiag(sigma2=(1.0,)), 2, 1, 10)
        with pytest.raises(ValueError):
            simulate_var(zero_function(1, 1), GaussianDiag(sigma2=(1.0,)), 1, 1, 1)

    def test_divergence_detected(self):
        exploding = CustomFunction(fn=lambda y: y * 1e200, d=1, p=1, m_sup=math.inf)
        with np.errstate(over="ignore"), pytest.raises(SimulationDivergedError):
            simulate_var(exploding, GaussianDiag(sigma2=(1.0,)), 1, 1, 300, burn_in=0, seed=0)


class TestLagEmbed:
    def test_listed_example(self):
        traj = Trajectory(values=np.array([[1.0, 2.0, 3.0, 4.0, 5.0]]), d=1, p=2, T=5, seed=0)
        ts = lag_embed(traj, 2)
        assert ts.windows.tolist() == [[2.0, 1.0], [3.0, 2.0], [4.0, 3.0]]
        assert ts.targets.tolist() == [[3.0], [4.0], [5.0]]

    def test_d2_p1(self):
        vals = np.arange(6.0).reshape(2, 3)
        traj = Trajectory(values=vals, d=2, p=1, T=3, seed=0)
        ts = lag_embed(traj, 1)
        assert np.array_equal(ts.windows, vals[:, :2].T)
        assert np.array_equal(ts.targets, vals[:, 1:].T)

    def test_boundary_single_pair(self):
        traj = Trajectory(values=np.array([[1.0, 2.0, 3.0]]), d=1, p=2, T=3, seed=0)
        ts = lag_embed(traj, 2)
        assert len(ts) == 1
        assert ts.windows.tolist() == [[2.0, 1.0]]

    def test_too_short_rejected(self):
        traj = Trajectory(values=np.ones((1, 3)), d=1, p=1, T=3, seed=0)
        with pytest.raises(ValueError):
            lag_embed(traj, 3)

    def test_overlap_consistency(self):
        g = TanhLinear(matrix=np.array([[0.3, -0.1]]), scale=0.5)
        traj = simulate_var(g, GaussianDiag(sigma2=(1.0,)), 1, 2, 40, burn_in=5, seed=2)
        ts = lag_embed(traj, 2)
        for i in range(1, len(ts)):
            assert np.array_equal(ts.windows[i][: ts.d], ts.targets[i - 1])


class TestStationarySample:
    def test_gap_one_matches_lag_embed(self):
        g = TanhLinear(matrix=np.array([[0.4]]), scale=0.5)
        noise = GaussianDiag(sigma2=(1.0,))
        n = 25
        sample = stationary_sample(g, noise, 1, 1, n, gap=1, burn_in=0, seed=6)
        traj = simulate_var(g, noise, 1, 1, n + 1, burn_in=0, seed=6)
        assert np.array_equal(sample, lag_embed(traj, 1).windows)

    def test_iid_limit_clt_band(self):
        # g = 0, p = 1: windows are iid N(0, sigma^2)
        sigma2, n = 0.49, 4000
        sample = stationary_sample(zero_function(1, 1), GaussianDiag(sigma2=(sigma2,)),
                                   1, 1, n, gap=1, burn_in=10, seed=11)
        assert abs(sample.mean()) <= 4 * math.sqrt(sigma2 / n)

    def test_reproducible(self):
        g = TanhLinear(matrix=np.array([[0.4]]), scale=0.5)
        noise = GaussianDiag(sigma2=(1.0,))
        a = stationary_sample(g, noise, 1, 1, 50, gap=3, burn_in=20, seed=13)
        b = stationary_sample(g, noise, 1, 1, 50, gap=3, burn_in=20, seed=13)
        assert np.array_equal(a, b)
        assert a.shape == (50, 1)


def test_step_stream_is_step_local():
    """Draw counts at one step never affect another step's values."""
    a = step_stream_normals(5, 7, 3)
    b = step_stream_normals(5, 7, 10)
    assert np.array_equal(a, b[:3])
    assert not np.isclose(step_stream_normals(5, 8, 1)[0], a[0])
