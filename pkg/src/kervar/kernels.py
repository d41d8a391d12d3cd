"""Kernel families on lag-window space R^{dp}.

Four families are supported: Gaussian, polynomial, Mercer sigmoid, and the
periodic Sobolev kernel (scalar inputs only).  Every family provides pointwise
evaluation, vectorized Gram/cross-kernel assembly, and a uniform diagonal
bound kappa with sup_x K(x, x) <= kappa^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import ClassVar

import numpy as np

from .errors import DegenerateKernelError, UnsupportedKernelError

MAX_BERNOULLI_DEGREE = 20


@lru_cache(maxsize=None)
def _bernoulli_numbers(n_max: int) -> tuple[Fraction, ...]:
    # B_0 .. B_{n_max} from the recurrence sum_{k<=n} C(n+1, k) B_k = 0, exact rationals.
    nums = [Fraction(1)]
    for n in range(1, n_max + 1):
        acc = Fraction(0)
        for k in range(n):
            acc += math.comb(n + 1, k) * nums[k]
        nums.append(-acc / (n + 1))
    return tuple(nums)


@lru_cache(maxsize=None)
def _bernoulli_poly_coeffs(degree: int) -> np.ndarray:
    # np.polyval layout: coefficient of t^degree first.
    nums = _bernoulli_numbers(degree)
    return np.array(
        [float(math.comb(degree, k) * nums[degree - k]) for k in range(degree, -1, -1)]
    )


def bernoulli_polynomial(degree: int, t: float) -> float:
    """Evaluate the Bernoulli polynomial B_degree(t) for t in [0, 1].

    Coefficients are precomputed exactly from the Bernoulli numbers via the
    derivative/normalization characterization B_0 = 1, B_n' = n B_{n-1},
    integral_0^1 B_n = 0.
    """
    if not isinstance(degree, (int, np.integer)) or degree < 0:
        raise ValueError(f"degree must be a non-negative integer, got {degree!r}")
    if degree > MAX_BERNOULLI_DEGREE:
        raise ValueError(f"degree {degree} exceeds supported maximum {MAX_BERNOULLI_DEGREE}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return float(np.polyval(_bernoulli_poly_coeffs(int(degree)), t))


class KernelSpec:
    """Base class for kernel specifications.

    Concrete families are immutable dataclasses; instances are safe to share
    across threads and usable as grouping keys.
    """

    family: ClassVar[str]
    input_dim: int

    # subclasses implement the vectorized primitives
    def _pairwise(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _diag(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def kappa(self, domain_radius: float = 0.0) -> float:
        raise NotImplementedError

    def _check_dim(self, arr: np.ndarray, name: str) -> np.ndarray:
        arr = np.asarray(arr, dtype=float)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.input_dim:
            raise ValueError(
                f"{name} must have dimension {self.input_dim}, got shape {arr.shape}"
            )
        return arr


@dataclass(frozen=True)
class GaussianKernel(KernelSpec):
    """K(x, y) = exp(-||x - y||^2 / tau2)."""

    input_dim: int
    tau2: float

    family: ClassVar[str] = "gaussian"

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if not self.tau2 > 0:
            raise ValueError(f"tau2 must be positive, got {self.tau2}")

    def _pairwise(self, X, Y):
        sx = np.einsum("ij,ij->i", X, X)
        sy = np.einsum("ij,ij->i", Y, Y)
        d2 = sx[:, None] + sy[None, :] - 2.0 * (X @ Y.T)
        np.maximum(d2, 0.0, out=d2)
        return np.exp(-d2 / self.tau2)

    def _diag(self, X):
        return np.ones(X.shape[0])

    def kappa(self, domain_radius: float = 0.0) -> float:
        return 1.0


@dataclass(frozen=True)
class PolynomialKernel(KernelSpec):
    """K(x, y) = (x'y + c)^m with c >= 0 and integer degree m >= 1."""

    input_dim: int
    c: float
    m: int

    family: ClassVar[str] = "polynomial"

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.c < 0:
            raise ValueError(f"c must be >= 0, got {self.c}")
        if not isinstance(self.m, (int, np.integer)) or self.m < 1:
            raise ValueError(f"m must be a positive integer, got {self.m!r}")

    def _pairwise(self, X, Y):
        return (X @ Y.T + self.c) ** self.m

    def _diag(self, X):
        return (np.einsum("ij,ij->i", X, X) + self.c) ** self.m

    def kappa(self, domain_radius: float = 0.0) -> float:
        if domain_radius < 0:
            raise ValueError("domain_radius must be >= 0")
        if domain_radius == 0.0 and self.c == 0.0:
            raise DegenerateKernelError(
                "polynomial kernel with c = 0 is identically zero on a radius-0 domain"
            )
        return float((self.input_dim * domain_radius**2 + self.c) ** (self.m / 2))


@dataclass(frozen=True)
class MercerSigmoidKernel(KernelSpec):
    """Separable sigmoid kernel (1/dp) sum_i tanh((x_i-c)/b) tanh((y_i-c)/b)."""

    input_dim: int
    b: float
    c: float = 0.0

    family: ClassVar[str] = "mercer_sigmoid"

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if not self.b > 0:
            raise ValueError(f"b must be positive, got {self.b}")

    def _features(self, X):
        return np.tanh((X - self.c) / self.b) / math.sqrt(self.input_dim)

    def _pairwise(self, X, Y):
        return self._features(X) @ self._features(Y).T

    def _diag(self, X):
        f = self._features(X)
        return np.einsum("ij,ij->i", f, f)

    def kappa(self, domain_radius: float = 0.0) -> float:
        # |tanh| < 1, so K(x, x) = (1/dp) sum tanh^2 < 1
        return 1.0


@dataclass(frozen=True)
class PeriodicSobolevKernel(KernelSpec):
    """Periodic Sobolev kernel on scalar inputs.

    K(x, y) = sigma2 * (1 + (-1)^{s+1} / (2s)! * B_{2s}(frac(|x - y|))).

    The Bernoulli-polynomial argument is reduced to [0, 1) so the closed form
    agrees with the cosine-series form for all real inputs, not only for data
    already living in the unit interval.
    """

    input_dim: int
    sigma2: float
    s: int

    family: ClassVar[str] = "periodic_sobolev"

    def __post_init__(self):
        if self.input_dim != 1:
            raise UnsupportedKernelError(
                "periodic Sobolev kernel supports scalar inputs only (input_dim = 1)"
            )
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not isinstance(self.s, (int, np.integer)) or self.s < 1:
            raise ValueError(f"s must be a positive integer, got {self.s!r}")

    @property
    def _sign_over_fact(self) -> float:
        return (-1) ** (self.s + 1) / math.factorial(2 * self.s)

    def _pairwise(self, X, Y):
        t = np.abs(X[:, 0][:, None] - Y[:, 0][None, :]) % 1.0
        bern = np.polyval(_bernoulli_poly_coeffs(2 * self.s), t)
        return self.sigma2 * (1.0 + self._sign_over_fact * bern)

    def _diag(self, X):
        val = self.sigma2 * (1.0 + self._sign_over_fact * bernoulli_polynomial(2 * self.s, 0.0))
        return np.full(X.shape[0], val)

    def kappa(self, domain_radius: float = 0.0) -> float:
        diag = self.sigma2 * (1.0 + self._sign_over_fact * bernoulli_polynomial(2 * self.s, 0.0))
        return math.sqrt(diag)


@dataclass(frozen=True)
class MultivariateKernelSpec:
    """Diagonal multivariate kernel: one scalar kernel per output dimension."""

    components: tuple[KernelSpec, ...]

    def __post_init__(self):
        if len(self.components) < 1:
            raise ValueError("at least one component kernel is required")
        dims = {k.input_dim for k in self.components}
        if len(dims) != 1:
            raise ValueError(f"component kernels disagree on input_dim: {sorted(dims)}")

    @classmethod
    def shared(cls, spec: KernelSpec, d: int) -> "MultivariateKernelSpec":
        """d output dimensions sharing one kernel (common smoothing parameter)."""
        if d < 1:
            raise ValueError("d must be >= 1")
        return cls(components=(spec,) * d)

    @property
    def d(self) -> int:
        return len(self.components)

    @property
    def input_dim(self) -> int:
        return self.components[0].input_dim

    def kappa(self, domain_radius: float = 0.0) -> float:
        """Combined bound kappa = sqrt(sum_j kappa_j^2)."""
        return math.sqrt(sum(k.kappa(domain_radius) ** 2 for k in self.components))


@dataclass(frozen=True)
class GramMatrix:
    """Symmetric kernel matrix over a fixed set of training windows."""

    entries: np.ndarray
    kernel: KernelSpec


def eval_kernel(spec: KernelSpec, x: np.ndarray, y: np.ndarray) -> float:
    """Evaluate K(x, y) for a single pair of points."""
    X = spec._check_dim(x, "x")
    Y = spec._check_dim(y, "y")
    if X.shape[0] != 1 or Y.shape[0] != 1:
        raise ValueError("eval_kernel takes single points; use gram_matrix for batches")
    return float(spec._pairwise(X, Y)[0, 0])


def kappa_bound(spec: KernelSpec, domain_radius: float = 0.0) -> float:
    """Uniform diagonal bound kappa_j with sup_x K(x, x) <= kappa_j^2.

    domain_radius bounds the sup-norm of admissible inputs and is used only by
    the polynomial family; the other families are bounded globally.
    """
    return spec.kappa(domain_radius)


def gram_matrix(spec: KernelSpec, windows: np.ndarray) -> GramMatrix:
    """Assemble the kernel matrix K[s, t] = K(windows[s], windows[t]).

    Only the strict upper triangle is evaluated and mirrored; the diagonal is
    filled from the dedicated diagonal path, so the result is exactly
    symmetric with exact diagonal entries.
    """
    W = spec._check_dim(windows, "windows")
    if W.shape[0] == 0:
        raise ValueError("windows must be nonempty")
    upper = np.triu(spec._pairwise(W, W), 1)
    return GramMatrix(entries=upper + upper.T + np.diag(spec._diag(W)), kernel=spec)


def cross_kernel_vector(spec: KernelSpec, z: np.ndarray, windows: np.ndarray) -> np.ndarray:
    """Vector (K(z, windows[t]))_t used by the representer-form predictor."""
    Z = spec._check_dim(z, "z")
    if Z.shape[0] != 1:
        raise ValueError("z must be a single point")
    W = spec._check_dim(windows, "windows")
    if W.shape[0] == 0:
        raise ValueError("windows must be nonempty")
    return spec._pairwise(Z, W)[0]


def cross_kernel_matrix(spec: KernelSpec, Z: np.ndarray, windows: np.ndarray) -> np.ndarray:
    """Batch variant of :func:`cross_kernel_vector`: rows index query points."""
    Zm = spec._check_dim(Z, "Z")
    W = spec._check_dim(windows, "windows")
    return spec._pairwise(Zm, W)


_FAMILIES: dict[str, type[KernelSpec]] = {
    cls.family: cls
    for cls in (GaussianKernel, PolynomialKernel, MercerSigmoidKernel, PeriodicSobolevKernel)
}

_FAMILY_FIELDS: dict[str, tuple[str, ...]] = {
    "gaussian": ("tau2",),
    "polynomial": ("c", "m"),
    "mercer_sigmoid": ("b", "c"),
    "periodic_sobolev": ("sigma2", "s"),
}


def spec_to_dict(spec: KernelSpec) -> dict:
    """Serialize a kernel spec to the config schema (family tag + parameters)."""
    out = {"family": spec.family, "input_dim": spec.input_dim}
    for name in _FAMILY_FIELDS[spec.family]:
        value = getattr(spec, name)
        out[name] = int(value) if isinstance(value, (int, np.integer)) else float(value)
    return out


def spec_from_dict(data: dict) -> KernelSpec:
    """Parse a kernel spec from the config schema; unknown keys are rejected."""
    if not isinstance(data, dict):
        raise ValueError(f"kernel spec must be a mapping, got {type(data).__name__}")
    family = data.get("family")
    if family not in _FAMILIES:
        raise ValueError(f"unknown kernel family {family!r}; expected one of {sorted(_FAMILIES)}")
    allowed = {"family", "input_dim", *_FAMILY_FIELDS[family]}
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown kernel spec key(s) {sorted(unknown)} for family {family!r}")
    missing = allowed - set(data)
    if missing:
        raise ValueError(f"missing kernel spec key(s) {sorted(missing)} for family {family!r}")
    kwargs = {k: data[k] for k in data if k != "family"}
    for int_field in ("input_dim", "m", "s"):
        if int_field in kwargs:
            kwargs[int_field] = int(kwargs[int_field])
    return _FAMILIES[family](**kwargs)


def multivariate_to_dict(spec: MultivariateKernelSpec) -> dict:
    return {"components": [spec_to_dict(k) for k in spec.components]}


def multivariate_from_dict(data: dict) -> MultivariateKernelSpec:
    if not isinstance(data, dict):
        raise ValueError("multivariate kernel spec must be a mapping")
    unknown = set(data) - {"components", "shared", "d"}
    if unknown:
        raise ValueError(f"unknown multivariate kernel key(s) {sorted(unknown)}")
    if "components" in data:
        if "shared" in data or "d" in data:
            raise ValueError("give either 'components' or ('shared', 'd'), not both")
        return MultivariateKernelSpec(
            components=tuple(spec_from_dict(c) for c in data["components"])
        )
    if "shared" in data and "d" in data:
        return MultivariateKernelSpec.shared(spec_from_dict(data["shared"]), int(data["d"]))
    raise ValueError("multivariate kernel spec needs 'components' or ('shared', 'd')")
