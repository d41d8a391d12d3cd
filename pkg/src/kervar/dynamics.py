"""Nonlinear VAR(p) simulation, lag embedding, and stationary sampling.

Random number scheme (documented for cross-implementation matching): the
noise at recursion step t comes from a Philox4x64 stream keyed by the user
seed with 256-bit counter t * 2^64, where t is the 0-based column index in
the extended run (columns 0..p-1 are the zero initial state; generated
columns start at t = p).  Each raw 64-bit draw u maps to a uniform
((u >> 11) + 0.5) * 2^-53 in (0, 1) and then through the inverse normal CDF.
Per step, draws are consumed dimension-by-dimension; truncated sampling
rejects within the same step stream, so neighbouring steps never shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtri

from .errors import NumericalError, SimulationDivergedError
from .kernels import KernelSpec, cross_kernel_matrix, kappa_bound

_REJECTION_CAP = 10**6


def step_stream_normals(seed: int, step: int, count: int) -> np.ndarray:
    """Standard normal draws for one recursion step, per the documented scheme."""
    bitgen = np.random.Philox(key=seed, counter=int(step) << 64)
    raw = bitgen.random_raw(count)
    uniforms = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(uniforms)


class RegressionFunction:
    """Base for regression-function specs g: R^{dp} -> R^d.

    Subclasses provide d, p, a sup-norm bound m_sup, and vectorized
    evaluation on rows of lag windows (most recent lag first).
    """

    d: int
    p: int
    m_sup: float

    def __call__(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class TanhLinear(RegressionFunction):
    """g(y) = scale * tanh(A y) applied componentwise; A is d x dp."""

    matrix: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        object.__setattr__(self, "matrix", m)
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if m.shape[1] % m.shape[0] != 0:
            raise ValueError(f"matrix shape {m.shape} is not d x (d*p)")

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    @property
    def p(self) -> int:
        return self.matrix.shape[1] // self.matrix.shape[0]

    @property
    def m_sup(self) -> float:
        return self.scale * math.sqrt(self.d)

    def __call__(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            return self.scale * np.tanh(self.matrix @ y)
        return self.scale * np.tanh(y @ self.matrix.T)


@dataclass(frozen=True, eq=False)
class AdditiveLags(RegressionFunction):
    """g(y) = sum_j h_j(X_{t-j}); each per-lag map h_j acts on R^d."""

    lag_functions: tuple[RegressionFunction, ...]

    def __post_init__(self):
        if not self.lag_functions:
            raise ValueError("at least one lag function is required")
        ds = {h.d for h in self.lag_functions}
        if len(ds) != 1:
            raise ValueError("all lag functions must share the output dimension d")
        if any(h.p != 1 for h in self.lag_functions):
            raise ValueError("per-lag functions must map a single lag (p = 1)")

    @property
    def d(self) -> int:
        return self.lag_functions[0].d

    @property
    def p(self) -> int:
        return len(self.lag_functions)

    @property
    def m_sup(self) -> float:
        return sum(h.m_sup for h in self.lag_functions)

    def __call__(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        d = self.d
        single = y.ndim == 1
        Y = y[None, :] if single else y
        out = np.zeros((Y.shape[0], d))
        for j, h in enumerate(self.lag_functions):
            out += h(Y[:, j * d : (j + 1) * d])
        return out[0] if single else out


@dataclass(frozen=True, eq=False)
class KernelSections(RegressionFunction):
    """g_i(z) = sum_t coeffs[t, i] K(z, centers[t]): a function inside the RKHS."""

    kernel: KernelSpec
    centers: np.ndarray  # (m, dp)
    coeffs: np.ndarray  # (m, d)
    p: int = 1

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "coeffs", coeffs)
        if centers.shape[0] != coeffs.shape[0]:
            raise ValueError("centers and coeffs must have one row per section")
        if centers.shape[1] != self.kernel.input_dim:
            raise ValueError("centers must live in the kernel input space")
        if self.kernel.input_dim != coeffs.shape[1] * self.p:
            raise ValueError("kernel input_dim must equal d * p")

    @property
    def d(self) -> int:
        return self.coeffs.shape[1]

    @property
    def m_sup(self) -> float:
        radius = float(np.abs(self.centers).max()) if self.centers.size else 0.0
        kap2 = kappa_bound(self.kernel, radius) ** 2
        return float(np.abs(self.coeffs).sum(axis=0).max()) * kap2

    def __call__(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        single = y.ndim == 1
        vals = cross_kernel_matrix(self.kernel, y[None, :] if single else y, self.centers)
        out = vals @ self.coeffs
        return out[0] if single else out


@dataclass(frozen=True, eq=False)
class CustomFunction(RegressionFunction):
    """Opaque evaluator with caller-declared dimensions and sup-norm bound."""

    fn: Callable[[np.ndarray], np.ndarray]
    d: int
    p: int
    m_sup: float

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(y), dtype=float)


def zero_function(d: int, p: int) -> TanhLinear:
    """The identically-zero dynamics, as a zero-matrix tanh map."""
    return TanhLinear(matrix=np.zeros((d, d * p)), scale=1.0)


@dataclass(frozen=True)
class NoiseSpec:
    """Base class for innovation distributions; subclasses draw per-step."""

    sigma2: tuple[float, ...]

    def __post_init__(self):
        if not self.sigma2 or any(not s > 0 for s in self.sigma2):
            raise ValueError(f"sigma2 entries must all be positive, got {self.sigma2}")

    @property
    def d(self) -> int:
        return len(self.sigma2)

    @property
    def sigma_max(self) -> float:
        return math.sqrt(max(self.sigma2))

    @property
    def sup_bound(self) -> float:
        """Sup-norm bound on a single innovation; inf unless truncated."""
        return math.inf

    def _sigma(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.sigma2, dtype=float))

    def draw(self, seed: int, step: int) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class GaussianDiag(NoiseSpec):
    """Independent N(0, sigma_i^2) innovations with diagonal covariance."""

    def draw(self, seed: int, step: int) -> np.ndarray:
        return self._sigma() * step_stream_normals(seed, step, self.d)

    @classmethod
    def isotropic(cls, sigma2: float, d: int) -> "GaussianDiag":
        return cls(sigma2=(float(sigma2),) * d)


@dataclass(frozen=True)
class TruncatedGaussian(NoiseSpec):
    """Gaussian innovations conditioned on [-l_eps, l_eps]^d, via rejection.

    Rejection draws come from the same per-step stream, so acceptance at one
    step never disturbs any other step.  Acceptance probability per
    coordinate is erf(l_eps / (sigma sqrt(2))).
    """

    l_eps: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        if not self.l_eps > 0:
            raise ValueError(f"l_eps must be positive, got {self.l_eps}")

    @property
    def sup_bound(self) -> float:
        return self.l_eps

    def draw(self, seed: int, step: int) -> np.ndarray:
        sigma = self._sigma()
        bitgen = np.random.Philox(key=seed, counter=int(step) << 64)
        out = np.empty(self.d)
        for i in range(self.d):
            for attempt in range(_REJECTION_CAP):
                raw = bitgen.random_raw(1)[0]
                u = ((int(raw) >> 11) + 0.5) * 2.0**-53
                z = sigma[i] * float(ndtri(u))
                if abs(z) <= self.l_eps:
                    out[i] = z
                    break
            else:
                raise NumericalError(
                    f"truncated-noise rejection exceeded {_REJECTION_CAP} iterations"
                )
        return out


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A simulated d-dimensional series of length T with generation metadata.

    innovations[:, j] is the noise added when column j was generated; every
    returned column was produced by the recursion, so the alignment is total.
    """

    values: np.ndarray  # (d, T)
    d: int
    p: int
    T: int
    seed: int
    generator_meta: dict = field(default_factory=dict)
    innovations: np.ndarray | None = None

    def __post_init__(self):
        if self.T <= self.p:
            raise ValueError(f"need T > p, got T={self.T}, p={self.p}")
        if self.values.shape != (self.d, self.T):
            raise ValueError(f"values shape {self.values.shape} != (d, T)")
        if not np.isfinite(self.values).all():
            raise SimulationDivergedError("trajectory contains non-finite values")


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Lag windows paired with one-step-ahead targets.

    windows[i] stacks the p most recent observations before time p+i, most
    recent first; targets[i] is the observation at time p+i.
    """

    windows: np.ndarray  # (T - p, d * p)
    targets: np.ndarray  # (T - p, d)
    d: int
    p: int

    def __post_init__(self):
        if self.windows.shape[0] != self.targets.shape[0]:
            raise ValueError("windows and targets must pair up")
        if self.windows.shape[1] != self.d * self.p:
            raise ValueError("window dimension must equal d * p")

    def __len__(self) -> int:
        return self.windows.shape[0]


def simulate_var(
    g: RegressionFunction,
    noise: NoiseSpec,
    d: int,
    p: int,
    T: int,
    burn_in: int = 1000,
    seed: int = 0,
) -> Trajectory:
    """Simulate X_t = g(X_{t-1}, ..., X_{t-p}) + eps_t and keep the last T columns.

    The chain starts from X_1 = ... = X_p = 0 and runs burn_in + T recursion
    steps; geometric ergodicity of the lagged chain makes the start point
    irrelevant after burn-in.  Deterministic given (specs, seed).
    """
    if g.d != d or g.p != p:
        raise ValueError(f"g maps R^{g.d * g.p} -> R^{g.d}, expected d={d}, p={p}")
    if noise.d != d:
        raise ValueError(f"noise has dimension {noise.d}, expected {d}")
    if T <= p:
        raise ValueError(f"need T > p, got T={T}")
    if burn_in < 0:
        raise ValueError(f"burn_in must be >= 0, got {burn_in}")
    total = p + burn_in + T
    values = np.zeros((d, total))
    innov = np.zeros((d, total))
    lag_offsets = np.arange(1, p + 1)
    for t in range(p, total):
        window = values[:, t - lag_offsets].T.reshape(-1)
        eps = noise.draw(seed, t)
        innov[:, t] = eps
        values[:, t] = g(window) + eps
    kept = values[:, total - T :]
    if not np.isfinite(kept).all():
        raise SimulationDivergedError("simulation produced non-finite values")
    return Trajectory(
        values=kept.copy(),
        d=d,
        p=p,
        T=T,
        seed=seed,
        generator_meta={
            "g": type(g).__name__,
            "noise": type(noise).__name__,
            "burn_in": burn_in,
            "rng": "philox4x64-step-counter",
        },
        innovations=innov[:, total - T :].copy(),
    )


def lag_embed(traj: Trajectory, p: int) -> TrainingSet:
    """Turn a trajectory into (window, target) pairs for order-p regression.

    windows[i] = vec(X_{p+i-1}, ..., X_i) (most recent lag first), matching
    the kernel-input ordering used everywhere else; targets[i] = X_{p+i}.
    """
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if traj.T <= p:
        raise ValueError(f"trajectory length {traj.T} must exceed p={p}")
    X = traj.values
    T = traj.T
    blocks = [X[:, p - 1 - j : T - 1 - j] for j in range(p)]
    windows = np.concatenate(blocks, axis=0).T
    targets = X[:, p:].T
    return TrainingSet(windows=windows.copy(), targets=targets.copy(), d=traj.d, p=p)


def stationary_sample(
    g: RegressionFunction,
    noise: NoiseSpec,
    d: int,
    p: int,
    n: int,
    gap: int = 1,
    burn_in: int = 1000,
    seed: int = 0,
) -> np.ndarray:
    """Approximate sample of size n from the stationary law of the lag windows.

    One long chain is simulated, burn-in discarded, and every gap-th lag
    window recorded; thinning is justified by geometric ergodicity.  With
    gap=1 and burn_in=0 this reproduces lag_embed(simulate_var(...)).windows
    exactly.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if gap < 1:
        raise ValueError(f"gap must be >= 1, got {gap}")
    T = p + 1 + (n - 1) * gap
    traj = simulate_var(g, noise, d, p, T, burn_in=burn_in, seed=seed)
    windows = lag_embed(traj, p).windows[::gap]
    return windows[:n].copy()
