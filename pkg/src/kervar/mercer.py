"""Multi-index combinatorics and Mercer eigen-systems.

Enumerates the degree-k multi-index sets for separable kernels on R^{dp},
evaluates the Gaussian and periodic eigen-systems, reconstructs truncated
kernels, and provides the numerical predicates behind the eigenfunction
growth and kernel moment assumptions.

Level convention: levels are indexed from k = 0 and "truncation M" means
degrees 0..M.  The degree-0 constant term is required for the Gaussian
reconstruction identity to hold; sums of the form sum_{k=1}^{M} (beta sums,
tail moments) start at level 1 as in their defining formulas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.special import gammaln

from .errors import NumericalError, ResourceLimitError, UnsupportedKernelError
from .kernels import (
    GaussianKernel,
    KernelSpec,
    MercerSigmoidKernel,
    PeriodicSobolevKernel,
    PolynomialKernel,
)

ENUMERATION_BUDGET = 10**7


@dataclass(frozen=True)
class MultiIndex:
    """A dp-tuple of non-negative integers with its total degree."""

    entries: tuple[int, ...]
    degree: int

    def __post_init__(self):
        if any(e < 0 for e in self.entries):
            raise ValueError(f"entries must be non-negative, got {self.entries}")
        if sum(self.entries) != self.degree:
            raise ValueError(
                f"entries {self.entries} sum to {sum(self.entries)}, not degree {self.degree}"
            )

    @classmethod
    def of(cls, entries: Sequence[int]) -> "MultiIndex":
        entries = tuple(int(e) for e in entries)
        return cls(entries=entries, degree=sum(entries))


def count_multi_indices(k: int, dp: int) -> int:
    """Number of dp-part compositions of k: C(k + dp - 1, dp - 1), exact."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if dp < 1:
        raise ValueError(f"dp must be >= 1, got {dp}")
    return math.comb(k + dp - 1, dp - 1)


@lru_cache(maxsize=512)
def _composition_array(k: int, dp: int) -> np.ndarray:
    """All compositions of k into dp parts, graded reverse-lexicographic.

    The fixed order (largest leading part first) defines the index j of the
    eigenfunctions at each level.
    """
    n = count_multi_indices(k, dp)
    if n > ENUMERATION_BUDGET:
        raise ResourceLimitError(
            f"N({k}) = {n} multi-indices exceeds budget {ENUMERATION_BUDGET}"
        )
    out = np.zeros((n, dp), dtype=np.int64)
    if dp == 1:
        out[0, 0] = k
        return out
    row = 0
    for first in range(k, -1, -1):
        block = _composition_array(k - first, dp - 1)
        out[row : row + block.shape[0], 0] = first
        out[row : row + block.shape[0], 1:] = block
        row += block.shape[0]
    out.setflags(write=False)
    return out


def enumerate_multi_indices(k: int, dp: int) -> list[MultiIndex]:
    """The set N(k) in its documented order; length equals count_multi_indices."""
    return [MultiIndex(entries=tuple(int(v) for v in row), degree=int(k))
            for row in _composition_array(k, dp)]


def gaussian_eigenvalue(k: int, tau2: float) -> float:
    """Eigenvalue (2/tau2)^k / k! of the Gaussian kernel at degree k."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if not tau2 > 0:
        raise ValueError(f"tau2 must be positive, got {tau2}")
    if k <= 150:
        return (2.0 / tau2) ** k / math.factorial(k)
    # log-space to dodge factorial overflow
    return math.exp(k * math.log(2.0 / tau2) - math.lgamma(k + 1))


def _log_multinomial(k: int, entries: np.ndarray) -> np.ndarray:
    """log C(k; n) for rows of a composition array."""
    return gammaln(k + 1) - gammaln(entries + 1).sum(axis=1)


def gaussian_eigenfunction(index: MultiIndex, x: np.ndarray, tau2: float) -> float:
    """Eigenfunction exp(-||x||^2/tau2) * C(k; n)^{1/2} * x^n at a single point."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != len(index.entries):
        raise ValueError(
            f"x has dimension {x.shape[0]}, index has {len(index.entries)} entries"
        )
    k = index.degree
    if k <= 20:
        denom = 1
        for e in index.entries:
            denom *= math.factorial(e)
        coeff = math.sqrt(math.factorial(k) // denom)
    else:
        ent = np.asarray(index.entries, dtype=np.int64)[None, :]
        coeff = math.exp(0.5 * float(_log_multinomial(k, ent)[0]))
    powers = 1.0
    for xi, e in zip(x, index.entries):
        powers *= xi**e
    return math.exp(-float(x @ x) / tau2) * coeff * powers


def periodic_eigenfunction(k: int, x: float, sigma2: float, s: int) -> float:
    """Periodic Sobolev eigenfunctions; the sign of k selects cosine/sine.

    k > 0: sigma sqrt(2) (2 pi k)^{-s} cos(2 pi k x);  k < 0 the sine analogue
    at |k|;  k = 0 the constant sigma.
    """
    if s < 1:
        raise ValueError(f"s must be >= 1, got {s}")
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    sigma = math.sqrt(sigma2)
    if k == 0:
        return sigma
    freq = 2.0 * math.pi * abs(k)
    amp = sigma * math.sqrt(2.0) * freq**-s
    return amp * (math.cos(freq * x) if k > 0 else math.sin(freq * x))


class GaussianMercerExpansion:
    """Level-indexed eigen-system of the Gaussian kernel on R^{dp}.

    Level k holds the N(k) degree-k eigenfunctions; level 0 is the constant
    envelope term exp(-||x||^2/tau2).
    """

    def __init__(self, kernel: GaussianKernel):
        self.kernel = kernel
        self.input_dim = kernel.input_dim
        self.tau2 = kernel.tau2

    def levels(self, M: int) -> range:
        return range(0, M + 1)

    def eigenvalue(self, k: int) -> float:
        return gaussian_eigenvalue(k, self.tau2)

    def level_count(self, k: int) -> int:
        return count_multi_indices(k, self.input_dim)

    def level_values(self, k: int, X: np.ndarray) -> np.ndarray:
        """Matrix of eigenfunction values, shape (n_points, N(k))."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        ent = _composition_array(k, self.input_dim)
        if k <= 20:
            coeff = np.sqrt(np.array([
                math.factorial(k) // math.prod(math.factorial(int(e)) for e in row)
                for row in ent
            ], dtype=float))
        else:
            coeff = np.exp(0.5 * _log_multinomial(k, ent))
        powers = np.prod(X[:, None, :] ** ent[None, :, :], axis=2)
        envelope = np.exp(-np.einsum("ij,ij->i", X, X) / self.tau2)
        return envelope[:, None] * coeff[None, :] * powers

    def level_beta_sq_sum(self, k: int) -> float:
        """sum_j sup_x lambda_k phi_{j,k}^2(x), the level-k beta-square mass.

        The per-index supremum is attained at x_i = (tau2 n_i / 2)^{1/2} and
        collapses to exp(-k) * prod_{n_i > 0} n_i^{n_i} / n_i!, independent of
        tau2.  Evaluated in log-space.
        """
        if k == 0:
            return 1.0
        ent = _composition_array(k, self.input_dim).astype(float)
        logs = np.where(ent > 0, ent * np.log(np.maximum(ent, 1.0)) - gammaln(ent + 1), 0.0)
        return float(np.exp(logs.sum(axis=1) - k).sum())


class PeriodicMercerExpansion:
    """Trigonometric eigen-system of the periodic Sobolev kernel.

    Level 0 is the constant sigma; level k >= 1 holds the cosine and sine
    pair at frequency k.
    """

    def __init__(self, kernel: PeriodicSobolevKernel):
        self.kernel = kernel
        self.input_dim = 1
        self.sigma2 = kernel.sigma2
        self.s = kernel.s

    def levels(self, M: int) -> range:
        return range(0, M + 1)

    def eigenvalue(self, k: int) -> float:
        # decay is folded into the eigenfunctions themselves
        return 1.0

    def level_count(self, k: int) -> int:
        return 1 if k == 0 else 2

    def level_values(self, k: int, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        x = X[:, 0]
        if k == 0:
            return np.full((x.shape[0], 1), math.sqrt(self.sigma2))
        amp = math.sqrt(2.0 * self.sigma2) * (2.0 * math.pi * k) ** -self.s
        arg = 2.0 * math.pi * k * x
        return np.column_stack([amp * np.cos(arg), amp * np.sin(arg)])

    def level_beta_sq_sum(self, k: int) -> float:
        if k == 0:
            return self.sigma2
        return 2.0 * self.sigma2 * (2.0 * math.pi * k) ** (-2 * self.s)


class FiniteMercerExpansion:
    """Explicit finite feature expansion (polynomial / Mercer sigmoid).

    The whole feature system sits in a single level k = 1 with unit
    eigenvalue, so any truncation M >= 1 reproduces the kernel exactly.
    """

    def __init__(self, kernel: KernelSpec):
        if not isinstance(kernel, (PolynomialKernel, MercerSigmoidKernel)):
            raise UnsupportedKernelError(
                f"{kernel.family} kernel has no finite Mercer representation"
            )
        self.kernel = kernel
        self.input_dim = kernel.input_dim

    def levels(self, M: int) -> range:
        if M < 1:
            return range(1, 1)
        return range(1, 2)

    def eigenvalue(self, k: int) -> float:
        return 1.0

    def level_count(self, k: int) -> int:
        return feature_dimension(self.kernel)

    def level_values(self, k: int, X: np.ndarray) -> np.ndarray:
        return feature_map(self.kernel, X)


MercerExpansion = GaussianMercerExpansion | PeriodicMercerExpansion | FiniteMercerExpansion


def expansion_for(kernel: KernelSpec) -> MercerExpansion:
    """The canonical eigen-expansion for a kernel spec."""
    if isinstance(kernel, GaussianKernel):
        return GaussianMercerExpansion(kernel)
    if isinstance(kernel, PeriodicSobolevKernel):
        return PeriodicMercerExpansion(kernel)
    return FiniteMercerExpansion(kernel)


def feature_dimension(kernel: KernelSpec) -> int:
    if isinstance(kernel, MercerSigmoidKernel):
        return kernel.input_dim
    if isinstance(kernel, PolynomialKernel):
        return count_multi_indices(kernel.m, kernel.input_dim + 1)
    raise UnsupportedKernelError(f"{kernel.family} kernel has no finite feature map")


def feature_map(kernel: KernelSpec, X: np.ndarray) -> np.ndarray:
    """Explicit feature matrix Phi with K(x, y) = Phi(x) Phi(y)'.

    Polynomial: one feature per multi-index n over dp + 1 slots with |n| = m,
    C(m; n)^{1/2} c^{n_last/2} prod_i x_i^{n_i}.  Mercer sigmoid: the dp
    rescaled tanh coordinates.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != kernel.input_dim:
        raise ValueError(f"points have dimension {X.shape[1]}, kernel wants {kernel.input_dim}")
    if isinstance(kernel, MercerSigmoidKernel):
        return kernel._features(X)
    if isinstance(kernel, PolynomialKernel):
        ent = _composition_array(kernel.m, kernel.input_dim + 1)
        coeff = np.sqrt(np.array([
            math.factorial(kernel.m) // math.prod(math.factorial(int(e)) for e in row)
            for row in ent
        ], dtype=float))
        coeff = coeff * kernel.c ** (ent[:, -1] / 2.0)
        powers = np.prod(X[:, None, :] ** ent[None, :, :-1], axis=2)
        return coeff[None, :] * powers
    raise UnsupportedKernelError(f"{kernel.family} kernel has no finite feature map")


def _check_level_budget(expansion: MercerExpansion, M: int) -> None:
    total = sum(expansion.level_count(k) for k in expansion.levels(M))
    if total > ENUMERATION_BUDGET:
        raise ResourceLimitError(
            f"expansion through level {M} has {total} terms, over budget {ENUMERATION_BUDGET}"
        )


def truncated_kernel_eval(
    expansion: MercerExpansion, x: np.ndarray, y: np.ndarray, M: int
) -> float:
    """Partial Mercer sum sum_{k=0}^{M} lambda_k sum_j phi_{j,k}(x) phi_{j,k}(y)."""
    _check_level_budget(expansion, M)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    y = np.asarray(y, dtype=float).reshape(1, -1)
    total = 0.0
    for k in expansion.levels(M):
        vx = expansion.level_values(k, x)[0]
        vy = expansion.level_values(k, y)[0]
        total += expansion.eigenvalue(k) * float(vx @ vy)
    return total


def gaussian_truncation_bound(x_norm: float, y_norm: float, tau2: float, M: int) -> float:
    """Taylor remainder bound e * (2 r^2 / tau2)^{M+1} / (M+1)! with r = max norm."""
    u = 2.0 * max(x_norm, y_norm) ** 2 / tau2
    return math.exp(1.0 + (M + 1) * math.log(u) - math.lgamma(M + 2)) if u > 0 else 0.0


def gaussian_truncation_level(radius: float, tau2: float, target: float, max_level: int = 400) -> int:
    """Smallest M whose Taylor remainder bound is <= target for ||x||, ||y|| <= radius."""
    for M in range(max_level + 1):
        if gaussian_truncation_bound(radius, radius, tau2, M) <= target:
            return M
    raise ResourceLimitError(f"no truncation level <= {max_level} reaches target {target}")


def beta_sum(expansion: MercerExpansion, M: int) -> float:
    """sum_{k=1}^{M} sum_j beta_{j,k}^2 with beta = lambda^{1/2} ||phi||_inf.

    Gaussian levels use the analytic per-index supremum; periodic levels
    contribute 2 sigma2 (2 pi k)^{-2s} each.  Level 0 is excluded: the growth
    assumption indexes levels from 1.
    """
    if M < 0:
        raise ValueError(f"M must be >= 0, got {M}")
    if not isinstance(expansion, (GaussianMercerExpansion, PeriodicMercerExpansion)):
        raise UnsupportedKernelError("beta sums are defined for Gaussian or periodic expansions")
    _check_level_budget(expansion, M)
    return float(sum(expansion.level_beta_sq_sum(k) for k in range(1, M + 1)))


def gaussian_beta_defaults(dp: int) -> tuple[float, float]:
    """Growth constants (b1, b2) = (pi^{dp/2}, dp/2 - 1) for the Gaussian kernel."""
    return math.pi ** (dp / 2.0), dp / 2.0 - 1.0


class BetaGrowthCheck(NamedTuple):
    ok: bool
    first_violation: int | None
    sums: np.ndarray  # cumulative beta-square sums, index M-1 holds S(M)
    b1: float
    b2: float

    def __bool__(self) -> bool:  # truthiness mirrors the predicate
        return self.ok


def check_beta_growth(
    expansion: MercerExpansion,
    M_max: int,
    b1: float | None = None,
    b2: float | None = None,
) -> BetaGrowthCheck:
    """Test S(M) <= b1 * M^{b2} for every 1 <= M <= M_max.

    For a Gaussian expansion the defaults are b1 = pi^{dp/2}, b2 = dp/2 - 1;
    other expansions require explicit constants.
    """
    if b1 is None or b2 is None:
        if isinstance(expansion, GaussianMercerExpansion):
            d1, d2 = gaussian_beta_defaults(expansion.input_dim)
            b1 = d1 if b1 is None else b1
            b2 = d2 if b2 is None else b2
        else:
            raise ValueError("b1 and b2 are required for non-Gaussian expansions")
    if not b1 > 0:
        raise ValueError(f"b1 must be positive, got {b1}")
    if M_max < 1:
        raise ValueError(f"M_max must be >= 1, got {M_max}")
    _check_level_budget(expansion, M_max)
    increments = np.array([expansion.level_beta_sq_sum(k) for k in range(1, M_max + 1)])
    sums = np.cumsum(increments)
    bounds = b1 * np.arange(1, M_max + 1, dtype=float) ** b2
    bad = np.nonzero(sums > bounds)[0]
    first = int(bad[0]) + 1 if bad.size else None
    return BetaGrowthCheck(ok=first is None, first_violation=first, sums=sums, b1=b1, b2=b2)


def multinomial_bound_lhs(k: int, dp: int) -> float:
    """sum over N(k) of prod over positive entries of n^{-1/2}, by enumeration.

    This is the brute-force side of the multinomial eigenfunction bound; the
    product runs over the positive entries only, so compositions containing
    zeros (including the endpoint ones) contribute.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ent = _composition_array(k, dp).astype(float)
    factors = np.where(ent > 0, np.maximum(ent, 1.0) ** -0.5, 1.0)
    return float(np.prod(factors, axis=1).sum())


def multinomial_bound_rhs(k: int, dp: int) -> float:
    """The claimed dominating value pi^{dp/2} k^{dp/2 - 1}."""
    return math.pi ** (dp / 2.0) * float(k) ** (dp / 2.0 - 1.0)


class MultinomialBoundWitness(NamedTuple):
    k: int
    dp: int
    lhs: float
    bound: float


def check_multinomial_bound(
    k_max: int, dp_values: Iterable[int] = (1, 2, 3, 4)
) -> list[MultinomialBoundWitness]:
    """Exhaustively test the multinomial bound; returns every violating (k, dp)."""
    witnesses = []
    for dp in dp_values:
        for k in range(1, k_max + 1):
            lhs = multinomial_bound_lhs(k, dp)
            bound = multinomial_bound_rhs(k, dp)
            if lhs > bound:
                witnesses.append(MultinomialBoundWitness(k=k, dp=dp, lhs=lhs, bound=bound))
    return witnesses


def weighted_normal_moment(alpha: float, sigma2: float, tau2: float, k: int) -> float:
    """E[X^{2k} exp(-2 X^2 / tau2)] for X ~ N(alpha, sigma2), by quadrature.

    Adaptive quadrature over [alpha - 12 sigma, alpha + 12 sigma] with
    relative tolerance 1e-10; serves as the oracle against the closed-form
    moment bound.
    """
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    if not tau2 > 0:
        raise ValueError(f"tau2 must be positive, got {tau2}")
    if not 0 <= k <= 60:
        raise ValueError(f"k must be in [0, 60], got {k}")
    sigma = math.sqrt(sigma2)
    norm = 1.0 / math.sqrt(2.0 * math.pi * sigma2)

    def integrand(x: float) -> float:
        return (
            x ** (2 * k)
            * math.exp(-2.0 * x * x / tau2 - (x - alpha) ** 2 / (2.0 * sigma2))
            * norm
        )

    value, abserr = quad(
        integrand, alpha - 12.0 * sigma, alpha + 12.0 * sigma, epsrel=1e-10, limit=400
    )
    # quad's abserr is a conservative estimate; only flag genuine failures
    if not math.isfinite(value) or abserr > 1e-6 * max(abs(value), 1e-250):
        raise NumericalError(
            f"weighted moment quadrature did not converge (value={value}, abserr={abserr})"
        )
    return float(value)


def weighted_moment_constant(L: float, sigma2: float, tau2: float) -> float:
    """The envelope constant C_L of the weighted-moment bound.

    C_L = 2 (2 pi tau2 / (4 sigma2 + tau2))^{1/2}
          * sup_{|a|<=L} exp(a^2 (tau2^2/(4 sigma2 + tau2) - 1/(2 sigma2)))
          * max{ sup_{|a|<=L} (mu_a / sigma_Y)^2, 1 },
    with mu_a = tau2 a / (4 sigma2 + tau2) and sigma_Y^2 = sigma2 tau2 /
    (4 sigma2 + tau2).
    """
    if L < 0:
        raise ValueError(f"L must be >= 0, got {L}")
    denom = 4.0 * sigma2 + tau2
    prefac = 2.0 * math.sqrt(2.0 * math.pi * tau2 / denom)
    exp_coeff = tau2**2 / denom - 1.0 / (2.0 * sigma2)
    sup_exp = math.exp(max(exp_coeff, 0.0) * L * L)
    mu_over_sigma_sq = tau2 * L * L / (sigma2 * denom)
    return prefac * sup_exp * max(mu_over_sigma_sq, 1.0)


def weighted_moment_bound(alpha_limit: float, sigma2: float, tau2: float, k: int) -> float:
    """Closed-form bound C_L (sigma2 tau2/(4 sigma2 + tau2))^k 2^k (k+1)!."""
    c_l = weighted_moment_constant(alpha_limit, sigma2, tau2)
    ratio = sigma2 * tau2 / (4.0 * sigma2 + tau2)
    return c_l * ratio**k * 2.0**k * math.factorial(k + 1)


@dataclass
class TailMomentCheck:
    """Outcome of the kernel-moment tail predicate on a stationary sample."""

    ok: bool
    alpha_hat: np.ndarray  # estimated level masses, index 0 holds level 1
    rho_hat: float | None  # fitted geometric decay ratio, None if not fittable
    tail_estimate: float  # estimated sum over levels >= M_T (incl. extrapolation)
    threshold: float  # beta1 * T^{-beta2}
    slack: float  # 3-sigma Monte Carlo allowance on the tail estimate

    def __bool__(self) -> bool:
        return self.ok


def check_tail_moment(
    expansion: MercerExpansion,
    pi_sample: np.ndarray,
    M_T: int,
    beta1: float,
    beta2: float,
    T: int,
    level_budget: int | None = None,
) -> TailMomentCheck:
    """Monte Carlo test of the eigenfunction tail-moment condition.

    Estimates alpha_k = lambda_k sum_j E[phi_{j,k}(Y)^2] over the supplied
    stationary sample for levels 1..budget, fits a geometric decay ratio to
    extrapolate beyond the budget, and checks

        sum_{k >= M_T} alpha_hat_k <= beta1 * T^{-beta2}

    up to a two-sided 3-sigma Monte Carlo allowance on the estimated tail.
    """
    sample = np.atleast_2d(np.asarray(pi_sample, dtype=float))
    if sample.shape[0] < 1000:
        raise ValueError(f"need at least 1000 sample points, got {sample.shape[0]}")
    if M_T < 1:
        raise ValueError(f"M_T must be >= 1, got {M_T}")
    if beta1 < 0:
        raise ValueError(f"beta1 must be >= 0, got {beta1}")
    n = sample.shape[0]
    budget = level_budget if level_budget is not None else max(2 * M_T, M_T + 10)
    _check_level_budget(expansion, budget)

    alpha_hat = np.zeros(budget)
    alpha_se = np.zeros(budget)
    for k in range(1, budget + 1):
        vals = expansion.level_values(k, sample)
        per_point = expansion.eigenvalue(k) * np.einsum("ij,ij->i", vals, vals)
        alpha_hat[k - 1] = per_point.mean()
        alpha_se[k - 1] = per_point.std(ddof=1) / math.sqrt(n)

    tail_direct = float(alpha_hat[M_T - 1 :].sum())
    tail_slack = 3.0 * float(np.sqrt((alpha_se[M_T - 1 :] ** 2).sum()))

    # geometric extrapolation beyond the enumerated budget
    rho_hat = None
    extrapolated = 0.0
    positive = alpha_hat > 0
    fit_window = np.nonzero(positive)[0]
    fit_window = fit_window[fit_window >= max(0, budget - 8)]
    if fit_window.size >= 2:
        ks = fit_window + 1.0
        slope = np.polyfit(ks, np.log(alpha_hat[fit_window]), 1)[0]
        rho_hat = float(np.exp(slope))
        if 0.0 < rho_hat < 1.0 and alpha_hat[budget - 1] > 0:
            extrapolated = float(alpha_hat[budget - 1] * rho_hat / (1.0 - rho_hat))
        elif rho_hat >= 1.0:
            extrapolated = math.inf

    tail_estimate = tail_direct + extrapolated
    threshold = beta1 * float(T) ** (-beta2)
    ok = tail_estimate <= threshold + tail_slack
    return TailMomentCheck(
        ok=bool(ok),
        alpha_hat=alpha_hat,
        rho_hat=rho_hat,
        tail_estimate=tail_estimate,
        threshold=threshold,
        slack=tail_slack,
    )
