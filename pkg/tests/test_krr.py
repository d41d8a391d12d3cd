import math

import numpy as np
import pytest

from kervar import krr
from kervar.dynamics import GaussianDiag, TanhLinear, TrainingSet, lag_embed, simulate_var
from kervar.errors import UnsupportedKernelError
from kervar.kernels import (
    GaussianKernel,
    MercerSigmoidKernel,
    MultivariateKernelSpec,
    PolynomialKernel,
    gram_matrix,
    kappa_bound,
)


def single_pair_model():
    """T - p = 1, Gaussian kernel, lambda T = 1: alpha = x1 / 2."""
    ts = TrainingSet(windows=np.array([[0.7]]), targets=np.array([[1.0]]), d=1, p=1)
    kernel = MultivariateKernelSpec.shared(GaussianKernel(input_dim=1, tau2=1.0), 1)
    return krr.fit(kernel, ts, lam=0.5, T=2), ts


def random_training(seed, n=20, d=2, p=1):
    rng = np.random.default_rng(seed)
    return TrainingSet(
        windows=rng.normal(size=(n, d * p)),
        targets=rng.normal(size=(n, d)),
        d=d,
        p=p,
    ), rng


class TestFit:
    def test_single_pair(self):
        model, _ = single_pair_model()
        assert model.alpha == pytest.approx(np.array([[0.5]]))
        assert krr.predict(model, [0.7]) == pytest.approx([0.5])

    def test_zero_targets(self):
        ts = TrainingSet(windows=np.random.default_rng(0).normal(size=(6, 2)),
                         targets=np.zeros((6, 1)), d=1, p=2)
        kernel = MultivariateKernelSpec.shared(GaussianKernel(input_dim=2, tau2=1.0), 1)
        model = krr.fit(kernel, ts, lam=0.1, T=8)
        assert np.array_equal(model.alpha, np.zeros((6, 1)))
        assert krr.predict(model, [0.3, 0.4]) == pytest.approx([0.0])

    def test_normal_equations_residual(self):
        ts, _ = random_training(1, n=40)
        kernel = MultivariateKernelSpec.shared(GaussianKernel(input_dim=2, tau2=2.0), 2)
        model = krr.fit(kernel, ts, lam=0.05, T=41)
        K = gram_matrix(kernel.components[0], ts.windows).entries
        system = K + 0.05 * 41 * np.eye(40)
        resid = system @ model.alpha - ts.targets
        norms = np.linalg.norm(ts.targets, axis=0)
        assert (np.linalg.norm(resid, axis=0) <= 1e-8 * norms).all()

    def test_lambda_validation(self):
        ts, _ = random_training(2)
        kernel = MultivariateKernelSpec.shared(GaussianKernel(input_dim=2, tau2=1.0), 2)
        with pytest.raises(ValueError):
            krr.fit(kernel, ts, lam=0.0, T=21)
        with pytest.raises(ValueError):
            krr.fit(kernel, ts, lam=0.1, T=99)  # inconsistent with len + p

    def test_shared_gram_grouping(self):
        ts, _ = random_training(3)
        shared = GaussianKernel(input_dim=2, tau2=1.0)
        kernel = MultivariateKernelSpec.shared(shared, 2)
        model = krr.fit(kernel, ts, lam=0.1, T=21)
        assert len(model.solver_info["groups"]) == 1
        assert model.solver_info["groups"][0]["dims"] == [0, 1]


class TestPredict:
    def test_dual_primal_equivalence_polynomial(self):
        # oracle: explicit finite feature map + primal ridge solve
        rng = np.random.default_rng(4)
        for trial in range(5):
            n = int(rng.integers(4, 30))
            spec = PolynomialKernel(input_dim=2, c=float(rng.uniform(0.1, 2)), m=int(rng.integers(1, 4)))
            ts = TrainingSet(windows=rng.normal(size=(n, 2)), targets=rng.normal(size=(n, 1)),
                             d=1, p=2)
            model = krr.fit(MultivariateKernelSpec.shared(spec, 1), ts, lam=0.2, T=n + 2)
            oracle = krr.feature_space_ridge_oracle(spec, ts, 0.2, n + 2)
            grid = rng.normal(size=(1000, 2))
            gap = np.abs(krr.predict_batch(model, grid) - oracle(grid)).max()
            assert gap <= 1e-8 * (1 + np.abs(ts.targets).max())

    def test_linear_ridge_closed_form(self):
        # polynomial c=0, m=1 reduces to linear ridge regression
        rng = np.random.default_rng(5)
        n = 15
        W = rng.normal(size=(n, 3))
        y = rng.normal(size=(n, 1))
        ts = TrainingSet(windows=W, targets=y, d=1, p=3)
        spec = PolynomialKernel(input_dim=3, c=0.0, m=1)
        oracle = krr.feature_space_ridge_oracle(spec, ts, 0.3, n + 3)
        ridge = 0.3 * (n + 3)
        w_closed = np.linalg.solve(W.T @ W + ridge * np.eye(3), W.T @ y)
        # with c = 0 the constant-slot feature is a zero column: weight 0
        assert oracle.weights[:3] == pytest.approx(w_closed, rel=1e-10)
        assert oracle.weights[3] == pytest.approx(0.0, abs=1e-15)

    def test_interpolation_limit(self):
        # lambda T -> 0+ with square full-rank Phi interpolates the targets
        rng = np.random.default_rng(6)
        spec = MercerSigmoidKernel(input_dim=3, b=1.0, c=0.0)
        W = rng.normal(size=(3, 3))
        y = rng.normal(size=(3, 1))
        ts = TrainingSet(windows=W, targets=y, d=1, p=3)
        oracle = krr.feature_space_ridge_oracle(spec, ts, 1e-13, 6)
        assert oracle(W) == pytest.approx(y, abs=1e-6)

    def test_shrinkage_bound_large_lambda(self):
        ts, rng = random_training(7, n=25)
        spec = GaussianKernel(input_dim=2, tau2=1.0)
        kernel = MultivariateKernelSpec.shared(spec, 2)
        lam_t = 1e8
        model = krr.fit(kernel, ts, lam=lam_t / 26, T=26)
        z = rng.normal(size=2)
        kap2 = kappa_bound(spec) ** 2
        bound = kap2 * np.linalg.norm(ts.targets) / lam_t * len(ts)
        assert np.linalg.norm(krr.predict(model, z)) <= bound

    def test_dimension_mismatch(self):
        model, _ = single_pair_model()
        with pytest.raises(ValueError):
            krr.predict(model, [0.1, 0.2])


class TestInSamplePredictions:
    def test_zero_alpha(self):
        model, _ = single_pair_model()
        zero = krr.FittedModel(kernel=model.kernel, lam=model.lam, T=model.T, p=model.p,
                               d=model.d, windows=model.windows,
                               alpha=np.zeros_like(model.alpha))
        assert np.array_equal(krr.in_sample_predictions(zero), np.zeros((1, 1)))

    def test_matches_pointwise_predict(self):
        ts, _ = random_training(8, n=12)
        kernel = MultivariateKernelSpec(
            components=(GaussianKernel(input_dim=2, tau2=1.0),
                        PolynomialKernel(input_dim=2, c=1.0, m=2))
        )
        model = krr.fit(kernel, ts, lam=0.1, T=13)
        ins = krr.in_sample_predictions(model)
        for i, w in enumerate(ts.windows):
            assert ins[i] == pytest.approx(krr.predict(model, w), abs=1e-12)


class TestRkhsNorm:
    def test_single_pair(self):
        model, _ = single_pair_model()
        assert krr.rkhs_norm_sq(model) == pytest.approx(0.25)

    def test_matches_feature_space_norm(self):
        # oracle: primal ridge coefficient norm for a finite-Mercer kernel
        rng = np.random.default_rng(9)
        spec = MercerSigmoidKernel(input_dim=2, b=1.3, c=0.0)
        n = 10
        ts = TrainingSet(windows=rng.normal(size=(n, 2)), targets=rng.normal(size=(n, 1)),
                         d=1, p=2)
        model = krr.fit(MultivariateKernelSpec.shared(spec, 1), ts, lam=0.3, T=n + 2)
        oracle = krr.feature_space_ridge_oracle(spec, ts, 0.3, n + 2)
        assert krr.rkhs_norm_sq(model) == pytest.approx(
            float((oracle.weights**2).sum()), abs=1e-8
        )

    def test_shrinkage_monotone_in_lambda(self):
        ts, _ = random_training(10, n=30)
        kernel = MultivariateKernelSpec.shared(GaussianKernel(input_dim=2, tau2=1.0), 2)
        lams = [0.01 * 2**i for i in range(10)]
        norms = [krr.rkhs_norm_sq(krr.fit(kernel, ts, lam=l, T=31)) for l in lams]
        assert all(a >= b - 1e-12 for a, b in zip(norms, norms[1:]))


class TestObjective:
    def test_zero_alpha_objective(self):
        ts, _ = random_training(11, n=8)
        kernel = MultivariateKernelSpec.shared(GaussianKernel(input_dim=2, tau2=1.0), 2)
        model = krr.FittedModel(kernel=kernel, lam=0.2, T=9, p=1, d=2,
                                windows=ts.windows, alpha=np.zeros((8, 2)))
        diag = krr.objective_value(model, ts)
        assert diag.objective == pytest.approx(float((ts.targets**2).sum()) / 9)

    def test_hand_computed_single_pair(self):
        model, ts = single_pair_model()
        diag = krr.objective_value(model, ts)
        # (1/2)(1 - 1/2)^2 + (1/2)(1/4) = 0.25
        assert diag.objective == pytest.approx(0.25, abs=1e-14)
        assert diag.solver["normal_eq_residual"] <= 1e-12

    def test_fitted_alpha_minimizes(self):
        # oracle: convexity; random perturbations cannot beat the solution
        ts, rng = random_training(12, n=15)
        kernel = MultivariateKernelSpec.shared(GaussianKernel(input_dim=2, tau2=1.5), 2)
        model = krr.fit(kernel, ts, lam=0.1, T=16)
        best = krr.objective_value(model, ts).objective
        for _ in range(100):
            perturbed = krr.FittedModel(
                kernel=kernel, lam=0.1, T=16, p=1, d=2, windows=ts.windows,
                alpha=model.alpha + rng.normal(scale=0.05, size=model.alpha.shape),
            )
            assert krr.objective_value(perturbed, ts).objective >= best - 1e-12

    def test_objective_dominates_penalty(self):
        ts, _ = random_training(13, n=10)
        kernel = MultivariateKernelSpec.shared(GaussianKernel(input_dim=2, tau2=1.0), 2)
        model = krr.fit(kernel, ts, lam=0.4, T=11)
        diag = krr.objective_value(model, ts)
        assert diag.objective >= 0.4 * diag.rkhs_norm_sq
        assert diag.rkhs_norm_sq >= 0

    def test_mismatched_training_rejected(self):
        model, ts = single_pair_model()
        other = TrainingSet(windows=np.array([[0.1]]), targets=np.array([[1.0]]), d=1, p=1)
        with pytest.raises(ValueError):
            krr.objective_value(model, other)


class TestProperties:
    def test_sup_norm_rkhs_bound(self):
        # ||g||_inf <= kappa ||g||_H on a dense grid
        g = TanhLinear(matrix=np.array([[0.5, -0.2], [0.1, 0.4]]), scale=0.6)
        traj = simulate_var(g, GaussianDiag(sigma2=(0.09, 0.09)), 2, 1, 150, seed=21)
        ts = lag_embed(traj, 1)
        kernel = MultivariateKernelSpec.shared(GaussianKernel(input_dim=2, tau2=2.0), 2)
        model = krr.fit(kernel, ts, lam=0.05, T=150)
        grid = np.stack(np.meshgrid(np.linspace(-2, 2, 40), np.linspace(-2, 2, 40)),
                        axis=-1).reshape(-1, 2)
        preds = krr.predict_batch(model, grid)
        kappa = kernel.kappa()
        assert np.abs(preds).max() <= kappa * math.sqrt(krr.rkhs_norm_sq(model)) + 1e-8

    def test_permutation_equivariance(self):
        ts, rng = random_training(14, n=18)
        kernel = MultivariateKernelSpec.shared(GaussianKernel(input_dim=2, tau2=1.0), 2)
        model = krr.fit(kernel, ts, lam=0.2, T=19)
        perm = rng.permutation(18)
        ts_perm = TrainingSet(windows=ts.windows[perm], targets=ts.targets[perm], d=2, p=1)
        model_perm = krr.fit(kernel, ts_perm, lam=0.2, T=19)
        assert model_perm.alpha == pytest.approx(model.alpha[perm], rel=1e-9, abs=1e-12)
        z = rng.normal(size=2)
        assert krr.predict(model_perm, z) == pytest.approx(krr.predict(model, z), rel=1e-9)

    def test_oracle_rejects_gaussian(self):
        ts, _ = random_training(15, n=5)
        with pytest.raises(UnsupportedKernelError):
            krr.feature_space_ridge_oracle(GaussianKernel(input_dim=2, tau2=1.0), ts, 0.1, 6)


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        ts, rng = random_training(16, n=22)
        kernel = MultivariateKernelSpec(
            components=(GaussianKernel(input_dim=2, tau2=1.7),
                        MercerSigmoidKernel(input_dim=2, b=0.8, c=0.1))
        )
        model = krr.fit(kernel, ts, lam=0.15, T=23)
        path = tmp_path / "model.json"
        krr.save_model(model, str(path))
        loaded = krr.load_model(str(path))
        grid = rng.normal(size=(50, 2))
        assert np.array_equal(krr.predict_batch(loaded, grid), krr.predict_batch(model, grid))

    def test_reload_diagnostics_identical(self, tmp_path):
        ts, _ = random_training(17, n=9)
        kernel = MultivariateKernelSpec.shared(GaussianKernel(input_dim=2, tau2=1.0), 2)
        model = krr.fit(kernel, ts, lam=0.2, T=10)
        path = tmp_path / "m.json"
        krr.save_model(model, str(path))
        loaded = krr.load_model(str(path))
        a = krr.objective_value(model, ts)
        b = krr.objective_value(loaded, ts)
        assert abs(a.objective - b.objective) <= 1e-15
        assert abs(a.rkhs_norm_sq - b.rkhs_norm_sq) <= 1e-15

    def test_bad_file_rejected(self, tmp_path):
        path = tmp_path / "junk.json"
        path.write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            krr.load_model(str(path))
