"""Multi-output GP regression on control-affine residual dynamics.

Each learned output dimension i has its own composite kernel and keeps a
lower-triangular factor ``L_i`` of ``K_i + noise_i^2 I`` together with
``w_i = L_i^{-1} r_i`` (``r_i`` are residual targets). Queries therefore need
one triangular solve: with ``v = L^{-1} k_*`` the mean is ``v @ w`` and the
variance ``k_** - v @ v``.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.optimize import minimize

from .errors import BudgetExhausted, ContractViolation
from .kernels import CompositeKernel, SeKernelParams, atom_matrices, cross_matrix, gram_matrix

log = logging.getLogger(__name__)

REFACTOR_EVERY = 64
JITTER_FLOOR = 1e-12


def stable_cholesky(K: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, adding diagonal jitter only if plain factorization fails."""
    try:
        return cholesky(K, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    base = JITTER_FLOOR * float(np.max(np.diag(K)))
    for k in range(8):
        jitter = base * 10.0**k
        try:
            L = cholesky(K + jitter * np.eye(len(K)), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        log.debug("Gram matrix numerically singular; added jitter %.3g", jitter)
        return L
    raise np.linalg.LinAlgError("Gram matrix not positive definite even with jitter")


class Dataset:
    """Growable set of (x, u, y) samples with an optional size cap."""

    def __init__(self, state_dim: int, input_dim: int, capacity: Optional[int] = None):
        self.state_dim = state_dim
        self.input_dim = input_dim
        self.capacity = capacity
        self._x: list = []
        self._u: list = []
        self._y: list = []

    def __len__(self):
        return len(self._x)

    def append(self, x, u, y):
        x = np.asarray(x, dtype=float).reshape(self.state_dim)
        u = np.asarray(u, dtype=float).reshape(self.input_dim)
        y = np.asarray(y, dtype=float).reshape(self.state_dim)
        if self.capacity is not None and len(self) >= self.capacity:
            raise BudgetExhausted(f"dataset capacity {self.capacity} reached")
        self._x.append(x)
        self._u.append(u)
        self._y.append(y)

    @property
    def X(self) -> np.ndarray:
        return np.array(self._x).reshape(len(self), self.state_dim)

    @property
    def U(self) -> np.ndarray:
        return np.array(self._u).reshape(len(self), self.input_dim)

    @property
    def Y(self) -> np.ndarray:
        return np.array(self._y).reshape(len(self), self.state_dim)

    def header(self) -> List[str]:
        n, m = self.state_dim, self.input_dim
        return (
            [f"x{i + 1}" for i in range(n)]
            + [f"u{j + 1}" for j in range(m)]
            + [f"y{i + 1}" for i in range(n)]
        )

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for x, u, y in zip(self._x, self._u, self._y):
                w.writerow([repr(float(v)) for v in np.concatenate([x, u, y])])

    @classmethod
    def from_csv(cls, path, capacity: Optional[int] = None) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ContractViolation(f"{path}: missing header line")
        header = rows[0]
        n = sum(1 for h in header if h.startswith("x"))
        m = sum(1 for h in header if h.startswith("u"))
        if n == 0 or sum(1 for h in header if h.startswith("y")) != n or len(header) != 2 * n + m:
            raise ContractViolation(f"{path}: malformed header {header}")
        ds = cls(n, m, capacity)
        for row in rows[1:]:
            vals = np.array([float(v) for v in row])
            ds.append(vals[:n], vals[n : n + m], vals[n + m :])
        return ds


@dataclass
class PosteriorSummary:
    mean: np.ndarray
    variance: np.ndarray


@dataclass
class AffinePosterior:
    """Posterior at a fixed state, as functions of the input.

    mean(u) = drift + input_matrix @ u, and for learned dim i the variance is
    [1, u] @ cov[i] @ [1, u]. ``cov`` is indexed by learned-dim position.
    """

    drift: np.ndarray
    input_matrix: np.ndarray
    cov: np.ndarray

    def mean(self, u) -> np.ndarray:
        return self.drift + self.input_matrix @ np.asarray(u, dtype=float)

    def trace_cov(self) -> np.ndarray:
        """(m+1)x(m+1) matrix giving tr Sigma^2(u) as a quadratic form."""
        return self.cov.sum(axis=0)


def _zero_prior_drift(n):
    return lambda x: np.zeros(n)


def _zero_prior_input(n, m):
    return lambda x: np.zeros((n, m))


class GpModel:
    """Per-dimension composite-kernel GP over ``y = xdot - prior(x, u)``.

    Only the dimensions in ``learned_dims`` carry a GP; the remaining ones are
    treated as exactly known through the prior (mean = prior, variance = 0).
    """

    def __init__(
        self,
        kernels: Sequence[CompositeKernel],
        state_dim: int,
        input_dim: int,
        noise_std,
        rkhs_bound,
        delta: float = 0.05,
        prior_drift: Optional[Callable] = None,
        prior_input: Optional[Callable] = None,
        learned_dims: Optional[Sequence[int]] = None,
        capacity: Optional[int] = None,
        refactor_every: int = REFACTOR_EVERY,
    ):
        self.n = state_dim
        self.m = input_dim
        self.learned_dims = list(range(state_dim) if learned_dims is None else learned_dims)
        p = len(self.learned_dims)
        self.kernels = list(kernels)
        if len(self.kernels) != p:
            raise ContractViolation(f"need {p} kernels, got {len(self.kernels)}")
        for k in self.kernels:
            if k.input_dim != input_dim:
                raise ContractViolation("kernel input dimension does not match model")
        self.noise_std = np.broadcast_to(np.asarray(noise_std, dtype=float), (p,)).copy()
        self.rkhs_bound = np.broadcast_to(np.asarray(rkhs_bound, dtype=float), (p,)).copy()
        if np.any(self.noise_std <= 0) or np.any(self.rkhs_bound <= 0):
            raise ContractViolation("noise_std and rkhs_bound must be positive")
        if not 0.0 < delta < 1.0:
            raise ContractViolation(f"delta must lie in (0, 1), got {delta}")
        self.delta = float(delta)
        self.prior_drift = prior_drift or _zero_prior_drift(state_dim)
        self.prior_input = prior_input or _zero_prior_input(state_dim, input_dim)
        self.capacity = capacity
        self.refactor_every = refactor_every
        self._alloc(16)
        self.N = 0
        self._since_refactor = 0

    # storage -------------------------------------------------------------
    def _alloc(self, cap):
        p = len(self.learned_dims)
        self._cap = cap
        X = np.zeros((cap, self.n))
        U = np.zeros((cap, self.m))
        R = np.zeros((cap, p))
        L = np.zeros((p, cap, cap))
        W = np.zeros((p, cap))
        if getattr(self, "N", 0):
            N = self.N
            X[:N], U[:N], R[:N] = self._X[:N], self._U[:N], self._R[:N]
            L[:, :N, :N] = self._L[:, :N, :N]
            W[:, :N] = self._W[:, :N]
        self._X, self._U, self._R, self._L, self._W = X, U, R, L, W

    @property
    def X(self):
        return self._X[: self.N]

    @property
    def U(self):
        return self._U[: self.N]

    @property
    def residuals(self):
        return self._R[: self.N]

    def dataset(self) -> Dataset:
        ds = Dataset(self.n, self.m)
        for x, u, y in zip(self.X, self.U, self.targets()):
            ds.append(x, u, y)
        return ds

    def targets(self) -> np.ndarray:
        """Full measurement vectors reconstructed as prior + residual (learned dims)."""
        Y = np.array([self.prior_mean(x, u) for x, u in zip(self.X, self.U)]).reshape(self.N, self.n)
        Y[:, self.learned_dims] += self.residuals
        return Y

    def prior_mean(self, x, u) -> np.ndarray:
        return np.asarray(self.prior_drift(x), dtype=float) + np.asarray(
            self.prior_input(x), dtype=float
        ) @ np.asarray(u, dtype=float)

    # updates -------------------------------------------------------------
    def add_measurement(self, x, u, y) -> "GpModel":
        x = np.asarray(x, dtype=float).reshape(self.n)
        u = np.asarray(u, dtype=float).reshape(self.m)
        y = np.asarray(y, dtype=float).reshape(self.n)
        if self.capacity is not None and self.N >= self.capacity:
            raise BudgetExhausted(f"GP capacity {self.capacity} reached")
        if self.N == self._cap:
            self._alloc(2 * self._cap)
        N = self.N
        r = (y - self.prior_mean(x, u))[self.learned_dims]
        self._X[N], self._U[N], self._R[N] = x, u, r
        self._since_refactor += 1
        if self._since_refactor >= self.refactor_every:
            self.N = N + 1
            self.refactor()
            return self
        for i, k in enumerate(self.kernels):
            kvec = cross_matrix(k, self._X[: N + 1], self._U[: N + 1], x[None], u[None])[:, 0]
            kss = kvec[N] + self.noise_std[i] ** 2
            if N:
                l = solve_triangular(self._L[i, :N, :N], kvec[:N], lower=True, check_finite=False)
            else:
                l = np.zeros(0)
            # a numerically dependent point gets its diagonal raised just enough
            # to keep the factor positive definite (same rule as the batch path)
            d = np.sqrt(max(kss - l @ l, JITTER_FLOOR * kss))
            self._L[i, N, :N] = l
            self._L[i, N, N] = d
            self._W[i, N] = (r[i] - l @ self._W[i, :N]) / d
        self.N = N + 1
        return self

    def refactor(self):
        N = self.N
        self._since_refactor = 0
        if N == 0:
            return
        for i, k in enumerate(self.kernels):
            K = gram_matrix(k, self.X, self.U) + self.noise_std[i] ** 2 * np.eye(N)
            Li = stable_cholesky(K)
            self._L[i, :N, :N] = Li
            self._L[i, :N, N:] = 0.0
            self._W[i, :N] = solve_triangular(Li, self._R[:N, i], lower=True, check_finite=False)

    def set_data(self, X, U, Y) -> "GpModel":
        """Replace the dataset and factorize in one batch."""
        X = np.asarray(X, dtype=float).reshape(-1, self.n)
        U = np.asarray(U, dtype=float).reshape(len(X), self.m)
        Y = np.asarray(Y, dtype=float).reshape(len(X), self.n)
        cap = max(16, int(2 ** np.ceil(np.log2(max(len(X), 1)))))
        self.N = 0
        self._alloc(cap)
        self.N = len(X)
        self._X[: self.N], self._U[: self.N] = X, U
        for q in range(self.N):
            self._R[q] = (Y[q] - self.prior_mean(X[q], U[q]))[self.learned_dims]
        self.refactor()
        return self

    def set_kernels(self, kernels: Sequence[CompositeKernel]):
        self.kernels = list(kernels)
        self.refactor()

    # queries ---------------------------------------------------------------
    def affine_posterior(self, x) -> AffinePosterior:
        x = np.asarray(x, dtype=float).reshape(self.n)
        m, N = self.m, self.N
        drift = np.array(self.prior_drift(x), dtype=float).reshape(self.n)
        G = np.array(self.prior_input(x), dtype=float).reshape(self.n, m)
        cov = np.zeros((len(self.learned_dims), m + 1, m + 1))
        for i, (dim, k) in enumerate(zip(self.learned_dims, self.kernels)):
            s = np.array([a.signal_variance for a in k.atoms()])
            if N:
                A = atom_matrices(k, self.X, x[None])[:, :, 0]  # (m+1, N)
                kcols = A.T.copy()
                kcols[:, 1:] *= self.U
                V = solve_triangular(self._L[i, :N, :N], kcols, lower=True, check_finite=False)
                coef = V.T @ self._W[i, :N]
                drift[dim] += coef[0]
                G[dim] += coef[1:]
                cov[i] = np.diag(s) - V.T @ V
            else:
                cov[i] = np.diag(s)
            cov[i] = 0.5 * (cov[i] + cov[i].T)
        return AffinePosterior(drift, G, cov)

    def posterior(self, x, u) -> PosteriorSummary:
        ap = self.affine_posterior(x)
        w = np.concatenate([[1.0], np.asarray(u, dtype=float).reshape(self.m)])
        var = np.zeros(self.n)
        raw = np.einsum("a,iab,b->i", w, ap.cov, w)
        if np.any(raw < -1e-6):
            warnings.warn(f"posterior variance {raw.min():.3e} well below zero", RuntimeWarning)
        var[self.learned_dims] = np.maximum(raw, 0.0)
        return PosteriorSummary(ap.mean(w[1:]), var)

    def info_gain(self, dim: int) -> float:
        """0.5 log det(I + K / noise^2) on the current data, for learned-dim index ``dim``."""
        if self.N == 0:
            return 0.0
        diag = np.diagonal(self._L[dim, : self.N, : self.N])
        return float(np.sum(np.log(diag)) - self.N * np.log(self.noise_std[dim]))

    def beta(self, dim: int) -> float:
        p = len(self.learned_dims)
        gamma = self.info_gain(dim)
        return float(
            self.rkhs_bound[dim]
            + self.noise_std[dim] * np.sqrt(2.0 * (gamma + 1.0 + np.log(p / self.delta)))
        )

    def beta_max(self) -> float:
        return max(self.beta(i) for i in range(len(self.learned_dims)))


def beta_value(rkhs_bound: float, noise_std: float, gamma: float, n: int, delta: float) -> float:
    """Confidence scaling B + s * sqrt(2 (gamma + 1 + ln(n / delta)))."""
    return rkhs_bound + noise_std * np.sqrt(2.0 * (gamma + 1.0 + np.log(n / delta)))


# hyperparameters --------------------------------------------------------------

def log_marginal_likelihood(kernel: CompositeKernel, X, U, y, noise_std: float) -> float:
    N = len(y)
    K = gram_matrix(kernel, X, U) + noise_std**2 * np.eye(N)
    try:
        L = cholesky(K, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return -np.inf
    a = solve_triangular(L, y, lower=True, check_finite=False)
    return float(-0.5 * a @ a - np.sum(np.log(np.diag(L))) - 0.5 * N * np.log(2 * np.pi))


@dataclass
class HyperBounds:
    """Box in natural units for signal variance and lengthscale of every atom."""

    signal_variance: tuple = (1e-8, 1e4)
    lengthscale: tuple = (1e-2, 1e3)


def fit_hyperparameters(
    model: GpModel,
    data: Dataset,
    bounds: HyperBounds = HyperBounds(),
    n_starts: int = 8,
    rng: Optional[np.random.Generator] = None,
) -> List[CompositeKernel]:
    """Maximise the log marginal likelihood per learned dimension.

    Returns the new kernels (the model is not modified). Fewer than two
    samples, or samples that are all identical, leave the kernels untouched.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(data) < 2:
        return list(model.kernels)
    X, U, Y = data.X, data.U, data.Y
    Z = np.hstack([X, U])
    if np.allclose(Z, Z[0]):
        warnings.warn("all training inputs identical; keeping initial hyperparameters")
        return list(model.kernels)
    R = np.array([y - model.prior_mean(x, u) for x, u, y in zip(X, U, Y)])[:, model.learned_dims]

    out = []
    for i, k0 in enumerate(model.kernels):
        n_atoms = k0.input_dim + 1
        lo = np.log([bounds.signal_variance[0], bounds.lengthscale[0]] * n_atoms)
        hi = np.log([bounds.signal_variance[1], bounds.lengthscale[1]] * n_atoms)
        theta0 = np.clip(k0.to_log_vector(), lo, hi)
        y = R[:, i]
        s = model.noise_std[i]

        def nll(theta):
            v = -log_marginal_likelihood(CompositeKernel.from_log_vector(theta), X, U, y, s)
            return v if np.isfinite(v) else 1e25

        best_theta, best_val = theta0, nll(theta0)
        start_val = -log_marginal_likelihood(k0, X, U, y, s)
        starts = [theta0] + [rng.uniform(lo, hi) for _ in range(n_starts - 1)]
        for th in starts:
            res = minimize(nll, th, method="L-BFGS-B", bounds=list(zip(lo, hi)))
            if res.fun < best_val:
                best_theta, best_val = res.x, res.fun
        if best_val <= start_val or not np.isfinite(start_val):
            out.append(CompositeKernel.from_log_vector(best_theta))
        else:
            out.append(k0)
        log.debug("dim %d: nll %.4g -> %.4g", i, start_val, best_val)
    return out


def default_kernel(input_dim: int, signal_variance=1.0, lengthscale=1.0) -> CompositeKernel:
    atom = SeKernelParams(signal_variance, lengthscale)
    return CompositeKernel(atom, tuple(atom for _ in range(input_dim)))
