"""Rate functions, thresholds, and kernel quadratic-form statistics.

The universal constants (c, c0, C_mc) that the underlying bounds leave
unspecified are exposed as free parameters with default 1; the empirical
studies verify shapes (rate exponents, monotonicity, tail decay), never
absolute constants.

Scale convention: all empirical quadratic-form work uses the (1/T^2)-scaled
statistic (1/T^2) eta' K(X,X) eta, with T the full series length.  Raw-scale
thresholds map onto this scale by multiplying by T^2.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ResourceLimitError
from .kernels import KernelSpec, MultivariateKernelSpec, gram_matrix
from .mercer import ENUMERATION_BUDGET, MercerExpansion


@dataclass(frozen=True)
class RateParams:
    """Inputs to the deviation-rate functions.

    c0, c, and c_mc are the free universal constants; b1/b2 come from the
    eigenfunction-growth condition, beta1/beta2 from the tail-moment
    condition, and M is the truncation level (M itself for finite expansions,
    M(T) for infinite ones).
    """

    T: int
    d: int
    sigma: float
    b1: float
    b2: float
    M: int
    beta1: float = 0.0
    beta2: float = 0.0
    c0: float = 1.0
    c: float = 1.0
    c_mc: float = 1.0

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"T must be >= 2, got {self.T}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not self.b1 > 0:
            raise ValueError(f"b1 must be positive, got {self.b1}")
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")


class RateValue(NamedTuple):
    """A rate-function value with a vacuity flag.

    When the defining precondition fails the bound is vacuous; the value is
    reported as 0 with vacuous=True rather than as a negative number.
    """

    value: float
    vacuous: bool


def c1T(params: RateParams, delta: float, gamma: float) -> RateValue:
    """Exponent (T/gamma^2) (delta (d b1 M^{b2})^{-1/2} - sigma/sqrt(T))^2."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    inner = delta * (params.d * params.b1 * params.M**params.b2) ** -0.5
    inner -= params.sigma / math.sqrt(params.T)
    if inner < 0:
        return RateValue(0.0, True)
    return RateValue(params.T / gamma**2 * inner**2, False)


def c2T(params: RateParams, gamma: float) -> RateValue:
    """Exponent (gamma - sqrt(2 sigma^2 log(dT)))^2 / (2 sigma^2)."""
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if params.sigma == 0.0:
        # degenerate noise: any positive gamma is never exceeded
        return RateValue(math.inf, False)
    two_sig2 = 2.0 * params.sigma**2
    root = math.sqrt(two_sig2 * math.log(params.d * params.T))
    if gamma < root:
        return RateValue(0.0, True)
    return RateValue((gamma - root) ** 2 / two_sig2, False)


def gamma_threshold(params: RateParams) -> float:
    """Smallest admissible truncation level gamma = sqrt(4 sigma^2 log(dT))."""
    if params.d * params.T < 2:
        raise ValueError("need d * T >= 2")
    return math.sqrt(4.0 * params.sigma**2 * math.log(params.d * params.T))


def delta_threshold(
    params: RateParams,
    lam: float,
    gamma: float,
    kappa: float,
    g_sup: float,
    g_lambda_gap: float = 0.0,
) -> float:
    """Admissible deviation level for the estimator bound.

    (1/lambda) sqrt(log T / T) L^{b2/2} gamma c0 max{kappa^2 ||g||_inf, 1}
    + ||g_lambda - g||_inf, with L = params.M.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if gamma < 0 or kappa < 0 or g_sup < 0 or g_lambda_gap < 0:
        raise ValueError("gamma, kappa, g_sup, g_lambda_gap must be >= 0")
    rate = (
        (1.0 / lam)
        * math.sqrt(math.log(params.T) / params.T)
        * params.M ** (params.b2 / 2.0)
        * gamma
        * params.c0
        * max(kappa**2 * g_sup, 1.0)
    )
    return rate + g_lambda_gap


@dataclass(frozen=True)
class QuadFormSample:
    """One draw of the scaled noise quadratic form (1/T^2) eta' K(X,X) eta."""

    value: float
    T: int
    seed: int | None = None

    def __post_init__(self):
        if self.value < -1e-12:
            raise ValueError(f"quadratic form must be >= 0, got {self.value}")


def quadratic_form(
    kernel: MultivariateKernelSpec,
    windows: np.ndarray,
    eps: np.ndarray,
    seed: int | None = None,
) -> QuadFormSample:
    """Compute (1/T^2) sum_i eps_i' K_i(X, X) eps_i over the block structure.

    eps has shape (d, T-p); the full d(T-p) block-diagonal matrix is never
    materialized, and dimensions sharing a kernel spec reuse one Gram matrix.
    T is recovered as the number of windows plus p = input_dim / d.
    """
    windows = np.atleast_2d(np.asarray(windows, dtype=float))
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    d = kernel.d
    if eps.shape != (d, windows.shape[0]):
        raise ValueError(
            f"eps must have shape (d, n_windows) = ({d}, {windows.shape[0]}), got {eps.shape}"
        )
    if kernel.input_dim % d != 0:
        raise ValueError("kernel input_dim must be divisible by d")
    p = kernel.input_dim // d
    T = windows.shape[0] + p
    total = 0.0
    groups: dict[KernelSpec, list[int]] = {}
    for i, spec in enumerate(kernel.components):
        groups.setdefault(spec, []).append(i)
    for spec, dims in groups.items():
        K = gram_matrix(spec, windows).entries
        block = eps[dims, :]
        total += float(np.einsum("it,ts,is->", block, K, block))
    return QuadFormSample(value=total / T**2, T=T, seed=seed)


def mercer_quadratic_form(
    expansion: MercerExpansion,
    windows: np.ndarray,
    eps_i: np.ndarray,
    M: int,
    T: int,
) -> float:
    """Truncated spectral form of the scaled one-dimension quadratic form.

    sum_{k <= M} lambda_k sum_j ((1/T) sum_t eps_t phi_{j,k}(Y_{t-1}))^2;
    with a full finite expansion this equals the direct quadratic form.
    T must match the series length used on the direct side.
    """
    windows = np.atleast_2d(np.asarray(windows, dtype=float))
    eps_i = np.asarray(eps_i, dtype=float).reshape(-1)
    if eps_i.shape[0] != windows.shape[0]:
        raise ValueError("eps_i must have one entry per window")
    if T <= 0:
        raise ValueError(f"T must be positive, got {T}")
    total_terms = sum(expansion.level_count(k) for k in expansion.levels(M))
    if total_terms > ENUMERATION_BUDGET:
        raise ResourceLimitError(f"{total_terms} expansion terms exceed the budget")
    total = 0.0
    for k in expansion.levels(M):
        vals = expansion.level_values(k, windows)  # (n, N(k))
        proj = vals.T @ eps_i / T
        total += expansion.eigenvalue(k) * float(proj @ proj)
    return total


def empirical_tail(samples: Sequence[QuadFormSample], delta: float) -> float:
    """Fraction of samples whose scaled statistic exceeds delta^2."""
    if len(samples) == 0:
        raise ValueError("samples must be nonempty")
    thr = delta**2
    return sum(1 for s in samples if s.value > thr) / len(samples)


def write_tail_table(
    path: str, rows: Iterable[tuple[int, float, float, int]]
) -> None:
    """CSV tail table with header T,delta,empirical_tail,n_samples."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["T", "delta", "empirical_tail", "n_samples"])
        for T, delta, tail, n in rows:
            writer.writerow([T, format(delta, ".17g"), format(tail, ".17g"), n])
