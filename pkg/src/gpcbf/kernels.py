"""Squared-exponential atoms and the control-affine composite kernel.

The composite kernel for one output dimension is

    k((x, u), (x', u')) = k_f(x, x') + sum_j u_j k_gj(x, x') u'_j

with every atom evaluated on the state only, so a posterior built on it is
affine in ``u`` (mean) and quadratic in ``u`` (variance).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class SeKernelParams:
    signal_variance: float = 1.0
    lengthscale: float = 1.0

    def __post_init__(self):
        if not self.signal_variance > 0 or not self.lengthscale > 0:
            raise ContractViolation(
                f"SE kernel needs positive parameters, got {self.signal_variance}, {self.lengthscale}"
            )


@dataclass(frozen=True)
class CompositeKernel:
    drift_kernel: SeKernelParams = field(default_factory=SeKernelParams)
    input_kernels: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "input_kernels", tuple(self.input_kernels))

    @property
    def input_dim(self) -> int:
        return len(self.input_kernels)

    def atoms(self) -> List[SeKernelParams]:
        """Drift atom followed by the m input atoms."""
        return [self.drift_kernel, *self.input_kernels]

    def to_log_vector(self) -> np.ndarray:
        """Flatten to [log sf2, log l] per atom (drift first)."""
        return np.log([[a.signal_variance, a.lengthscale] for a in self.atoms()]).ravel()

    @classmethod
    def from_log_vector(cls, theta: Sequence[float]) -> "CompositeKernel":
        p = np.exp(np.asarray(theta, dtype=float)).reshape(-1, 2)
        atoms = [SeKernelParams(float(s), float(l)) for s, l in p]
        return cls(atoms[0], tuple(atoms[1:]))

    def to_dict(self) -> dict:
        return {
            "drift": [self.drift_kernel.signal_variance, self.drift_kernel.lengthscale],
            "inputs": [[a.signal_variance, a.lengthscale] for a in self.input_kernels],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CompositeKernel":
        return cls(SeKernelParams(*d["drift"]), tuple(SeKernelParams(*p) for p in d["inputs"]))


def _as_vec(a) -> np.ndarray:
    return np.atleast_1d(np.asarray(a, dtype=float))


def se_eval(params: SeKernelParams, a, b) -> float:
    a, b = _as_vec(a), _as_vec(b)
    if a.shape != b.shape:
        raise ContractViolation(f"dimension mismatch: {a.shape} vs {b.shape}")
    d2 = float(np.sum((a - b) ** 2))
    return params.signal_variance * np.exp(-d2 / (2.0 * params.lengthscale**2))


def composite_eval(k: CompositeKernel, x, u, x2, u2) -> float:
    x, u, x2, u2 = map(_as_vec, (x, u, x2, u2))
    if x.shape != x2.shape:
        raise ContractViolation(f"state dimension mismatch: {x.shape} vs {x2.shape}")
    if u.shape != u2.shape or u.shape[0] != k.input_dim:
        raise ContractViolation(
            f"input dimension mismatch: {u.shape}, {u2.shape}, kernel expects {k.input_dim}"
        )
    val = se_eval(k.drift_kernel, x, x2)
    for j, atom in enumerate(k.input_kernels):
        val += u[j] * se_eval(atom, x, x2) * u2[j]
    return val


def sq_dists(X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
    X1 = np.atleast_2d(X1)
    X2 = np.atleast_2d(X2)
    d = np.sum(X1**2, 1)[:, None] + np.sum(X2**2, 1)[None, :] - 2.0 * X1 @ X2.T
    return np.maximum(d, 0.0)


def atom_matrices(k: CompositeKernel, X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
    """Stack of SE atom matrices, shape (m+1, len(X1), len(X2))."""
    d2 = sq_dists(X1, X2)
    return np.stack([a.signal_variance * np.exp(-d2 / (2.0 * a.lengthscale**2)) for a in k.atoms()])


def cross_matrix(k: CompositeKernel, X1, U1, X2, U2) -> np.ndarray:
    """Composite kernel matrix between two point sets."""
    A = atom_matrices(k, X1, X2)
    W1 = np.hstack([np.ones((len(X1), 1)), np.atleast_2d(U1).reshape(len(X1), -1)])
    W2 = np.hstack([np.ones((len(X2), 1)), np.atleast_2d(U2).reshape(len(X2), -1)])
    return np.einsum("pa,apq,qa->pq", W1, A, W2)


def gram_matrix(k: CompositeKernel, X, U) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.asarray(U, dtype=float).reshape(len(X), -1)
    if len(X) == 0:
        raise ContractViolation("gram_matrix needs at least one point")
    if U.shape[1] != k.input_dim:
        raise ContractViolation(f"inputs have {U.shape[1]} columns, kernel expects {k.input_dim}")
    K = cross_matrix(k, X, U, X, U)
    return 0.5 * (K + K.T)
