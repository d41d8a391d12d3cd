"""Kernel ridge regression in representer form.

The fitted predictor is g_i(z) = sum_t alpha_{i,t} K_i(z, w_t) with dual
coefficients solving (K_i + lambda T I) alpha_i = targets_i per output
dimension.  The block-diagonal d(T-p) system is never materialized: the
multivariate kernel is diagonal, so the d solves are independent, and
dimensions sharing one kernel spec reuse a single factorization.

The ridge scale is lambda * T with T the full series length (the objective
divides by T while summing T - p terms); diagnostics report both lambda and
the effective ridge lambda * T.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.linalg.lapack import dpocon

from .dynamics import TrainingSet
from .errors import NumericalError
from .kernels import (
    KernelSpec,
    MultivariateKernelSpec,
    cross_kernel_matrix,
    gram_matrix,
    multivariate_from_dict,
    multivariate_to_dict,
)
from .mercer import feature_map

_JITTER_STEPS = (0.0, 1e-12, 1e-10)  # relative to trace / n
_RESIDUAL_TOL = 1e-8

MODEL_FORMAT = "kervar-model"
MODEL_VERSION = 1


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Representer-form predictor: kernels, ridge parameter, windows, duals."""

    kernel: MultivariateKernelSpec
    lam: float
    T: int
    p: int
    d: int
    windows: np.ndarray  # (T - p, d * p)
    alpha: np.ndarray  # (T - p, d), column i for output dimension i
    solver_info: dict | None = None

    @property
    def n_pairs(self) -> int:
        return self.windows.shape[0]


@dataclass(frozen=True)
class FitDiagnostics:
    """Objective decomposition and solver metadata for a fitted model."""

    objective: float
    rkhs_norm_sq: float
    in_sample_rmse: float
    solver: dict


def _spec_groups(kernel: MultivariateKernelSpec) -> dict[KernelSpec, list[int]]:
    groups: dict[KernelSpec, list[int]] = {}
    for i, spec in enumerate(kernel.components):
        groups.setdefault(spec, []).append(i)
    return groups


def _solve_regularized(K: np.ndarray, ridge: float, rhs: np.ndarray) -> tuple[np.ndarray, dict]:
    """Solve (K + ridge I) x = rhs by Cholesky with escalating diagonal jitter."""
    n = K.shape[0]
    trace_scale = float(np.trace(K)) / n if n else 0.0
    last_err: Exception | None = None
    for level, rel in enumerate(_JITTER_STEPS):
        jitter = rel * trace_scale
        system = K + (ridge + jitter) * np.eye(n)
        try:
            factor = cho_factor(system, lower=True)
        except np.linalg.LinAlgError as err:
            last_err = err
            continue
        x = cho_solve(factor, rhs)
        resid = system @ x - rhs
        rhs_norm = np.linalg.norm(rhs, axis=0)
        ok = np.linalg.norm(resid, axis=0) <= _RESIDUAL_TOL * np.maximum(rhs_norm, 1e-300)
        if not np.all(ok):
            last_err = NumericalError("normal-equations residual above tolerance")
            continue
        anorm = float(np.abs(system).sum(axis=0).max())
        rcond, pocon_info = dpocon(factor[0], anorm, uplo="L")
        cond = float(1.0 / rcond) if pocon_info == 0 and rcond > 0 else math.inf
        return x, {"jitter": jitter, "jitter_level": level, "condition_estimate": cond}
    raise NumericalError(f"Cholesky solve failed after jitter escalation: {last_err}")


def fit(
    kernel: MultivariateKernelSpec,
    training: TrainingSet,
    lam: float,
    T: int,
) -> FittedModel:
    """Fit the regularized estimator on lag-window training pairs.

    T is the full series length; it must equal len(training) + p.  One
    symmetric positive-definite solve of size T - p is performed per distinct
    kernel spec, covering all output dimensions that share it.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if len(training) == 0:
        raise ValueError("training set is empty")
    if kernel.d != training.d:
        raise ValueError(f"kernel has {kernel.d} components, targets have d={training.d}")
    if kernel.input_dim != training.windows.shape[1]:
        raise ValueError(
            f"kernel input_dim {kernel.input_dim} != window dimension {training.windows.shape[1]}"
        )
    if T != len(training) + training.p:
        raise ValueError(
            f"T={T} inconsistent with {len(training)} training pairs at lag order p={training.p}"
        )
    ridge = lam * T
    alpha = np.zeros((len(training), training.d))
    info: dict = {"ridge": ridge, "groups": []}
    for spec, dims in _spec_groups(kernel).items():
        K = gram_matrix(spec, training.windows).entries
        sol, solve_info = _solve_regularized(K, ridge, training.targets[:, dims])
        alpha[:, dims] = sol
        info["groups"].append({"dims": dims, **solve_info})
    return FittedModel(
        kernel=kernel,
        lam=lam,
        T=T,
        p=training.p,
        d=training.d,
        windows=training.windows.copy(),
        alpha=alpha,
        solver_info=info,
    )


def predict(model: FittedModel, z: np.ndarray) -> np.ndarray:
    """Evaluate the fitted predictor at one point z in R^{dp}."""
    z = np.asarray(z, dtype=float).reshape(-1)
    return predict_batch(model, z[None, :])[0]


def predict_batch(model: FittedModel, Z: np.ndarray) -> np.ndarray:
    """Evaluate the predictor on rows of Z; returns shape (len(Z), d)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape[1] != model.kernel.input_dim:
        raise ValueError(
            f"query dimension {Z.shape[1]} != kernel input_dim {model.kernel.input_dim}"
        )
    out = np.zeros((Z.shape[0], model.d))
    for spec, dims in _spec_groups(model.kernel).items():
        cross = cross_kernel_matrix(spec, Z, model.windows)
        out[:, dims] = cross @ model.alpha[:, dims]
    return out


def in_sample_predictions(model: FittedModel) -> np.ndarray:
    """Fitted values K_i alpha_i at the training windows, shape (T - p, d)."""
    out = np.zeros((model.n_pairs, model.d))
    for spec, dims in _spec_groups(model.kernel).items():
        K = gram_matrix(spec, model.windows).entries
        out[:, dims] = K @ model.alpha[:, dims]
    return out


def rkhs_norm_sq(model: FittedModel) -> float:
    """Squared RKHS norm sum_i alpha_i' K_i alpha_i of the predictor."""
    total = 0.0
    for spec, dims in _spec_groups(model.kernel).items():
        K = gram_matrix(spec, model.windows).entries
        block = model.alpha[:, dims]
        total += float(np.einsum("ti,ti->", block, K @ block))
    return total


def objective_value(model: FittedModel, training: TrainingSet) -> FitDiagnostics:
    """Ridge objective (1/T) sum_t ||target_t - fitted_t||^2 + lambda ||g||_H^2.

    Also reports the normal-equations residual max_i ||(K_i + lambda T) a_i -
    y_i|| as first-order optimality metadata; hand-built models (e.g. alpha =
    0) simply show a nonzero residual.
    """
    if len(training) != model.n_pairs or not np.array_equal(training.windows, model.windows):
        raise ValueError("training set does not match the model's stored windows")
    fitted = np.zeros((model.n_pairs, model.d))
    norm_sq = 0.0
    max_resid = 0.0
    ridge = model.lam * model.T
    for spec, dims in _spec_groups(model.kernel).items():
        K = gram_matrix(spec, model.windows).entries
        block = model.alpha[:, dims]
        fitted[:, dims] = K @ block
        norm_sq += float(np.einsum("ti,ti->", block, fitted[:, dims]))
        resid = fitted[:, dims] + ridge * block - training.targets[:, dims]
        max_resid = max(max_resid, float(np.linalg.norm(resid, axis=0).max()))
    residual_sq = float(((training.targets - fitted) ** 2).sum())
    objective = residual_sq / model.T + model.lam * norm_sq
    rmse = math.sqrt(residual_sq / (model.n_pairs * model.d))
    solver = dict(model.solver_info or {})
    solver["normal_eq_residual"] = max_resid
    solver["effective_ridge"] = ridge
    return FitDiagnostics(
        objective=objective, rkhs_norm_sq=norm_sq, in_sample_rmse=rmse, solver=solver
    )


def feature_space_ridge_oracle(
    kernel: KernelSpec, training: TrainingSet, lam: float, T: int
):
    """Primal ridge solution through the explicit finite feature map.

    Builds Phi over the training windows, solves min ||y - Phi w||^2 +
    lambda T ||w||^2 per output dimension, and returns z -> phi(z)' w.  Used
    as the independent oracle for the kernel-trick identity; only kernels
    with a finite Mercer representation qualify.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    Phi = feature_map(kernel, training.windows)
    ridge = lam * T
    system = Phi.T @ Phi + ridge * np.eye(Phi.shape[1])
    factor = cho_factor(system, lower=True)
    w = cho_solve(factor, Phi.T @ training.targets)

    def predictor(Z: np.ndarray) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        single = Z.ndim == 1
        vals = feature_map(kernel, Z[None, :] if single else Z) @ w
        return vals[0] if single else vals

    predictor.weights = w
    return predictor


def _float_list(arr: np.ndarray) -> list:
    return [[float(v) for v in row] for row in np.atleast_2d(arr)]


def save_model(model: FittedModel, path: str) -> None:
    """Persist a fitted model as a JSON text document.

    Floats are written in shortest round-trip form, so reloading reproduces
    predictions bit-for-bit on the same platform.
    """
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kernel": multivariate_to_dict(model.kernel),
        "lambda": float(model.lam),
        "T": int(model.T),
        "p": int(model.p),
        "d": int(model.d),
        "windows": _float_list(model.windows),
        "alpha": _float_list(model.alpha),
    }
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")
    os.replace(tmp, path)


def load_model(path: str) -> FittedModel:
    """Load a model persisted by :func:`save_model`."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path} is not a kervar model file")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')}")
    return FittedModel(
        kernel=multivariate_from_dict(doc["kernel"]),
        lam=float(doc["lambda"]),
        T=int(doc["T"]),
        p=int(doc["p"]),
        d=int(doc["d"]),
        windows=np.array(doc["windows"], dtype=float),
        alpha=np.array(doc["alpha"], dtype=float),
    )
