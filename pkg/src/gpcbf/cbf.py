"""Barrier functions used by the filter: cruise headway, quadrotor altitude
and the flatness-based quadrotor position barrier."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .dynamics import unpack_quad
from .errors import ContractViolation


@dataclass(frozen=True)
class ClassKappaE:
    """Extended class-K_inf rate. Linear ``slope * r`` unless ``fn`` is given."""

    slope: float = 1.0
    fn: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        if self.fn is None and not self.slope > 0:
            raise ContractViolation("linear alpha needs a positive slope")

    def __call__(self, r):
        return self.fn(r) if self.fn is not None else self.slope * r


@dataclass(frozen=True)
class CbfSpec:
    h: Callable[[np.ndarray], float]
    grad_h: Callable[[np.ndarray], np.ndarray]
    alpha: ClassKappaE
    lipschitz: float
    grad_bound: float
    robust_margin: float = 0.1
    name: str = "h"

    def __post_init__(self):
        if not self.lipschitz > 0 or not self.grad_bound > 0 or not self.robust_margin > 0:
            raise ContractViolation("lipschitz, grad_bound and robust_margin must be positive")

    def shifted(self, eps: float) -> "CbfSpec":
        """Barrier h + eps / slope, which turns a plain CBF into a robust one."""
        off = eps / self.alpha.slope
        h0 = self.h
        return replace(self, h=lambda x: h0(x) + off, robust_margin=eps, name=self.name + "_shift")


def hdot_terms(spec: CbfSpec, x):
    x = np.asarray(x, dtype=float)
    return np.asarray(spec.grad_h(x), dtype=float), float(spec.alpha(spec.h(x)))


def estimate_gradient_bound(grad_h, sampler, n: int = 2000, seed: int = 0, safety: float = 1.2) -> float:
    """Sampled sup of ||grad h|| over an operating region, inflated by ``safety``."""
    rng = np.random.default_rng(seed)
    return safety * max(np.linalg.norm(grad_h(sampler(rng))) for _ in range(n))


# shipped barriers ---------------------------------------------------------------

def cruise_cbf(headway: float = 1.8, slope: float = 1.0, robust_margin: float = 0.1) -> CbfSpec:
    """h(v, z) = z - T_h v."""
    if not headway > 0:
        raise ContractViolation("headway must be positive")
    g = np.array([-headway, 1.0])
    L = float(np.sqrt(1.0 + headway**2))
    return CbfSpec(
        h=lambda x: float(x[1] - headway * x[0]),
        grad_h=lambda x: g.copy(),
        alpha=ClassKappaE(slope),
        lipschitz=L,
        grad_bound=L,
        robust_margin=robust_margin,
        name="headway",
    )


def quad_altitude_cbf(
    altitude_gain: float = 0.1, slope: float = 1.0, robust_margin: float = 0.1, velocity_sign: float = -1.0
) -> CbfSpec:
    """h = 10 (p_z + s T_z v_z) on the 15-dim quadrotor state, s = ``velocity_sign``.

    s = -1 gives 10 (p_z - T_z v_z). Its zero-level boundary flow p_z' = p_z / T_z
    is unstable, so the filter can only hold it by accelerating away from
    p_z = 0 along -z; s = +1 gives the usual braking barrier.
    """
    if not altitude_gain > 0:
        raise ContractViolation("altitude gain must be positive")
    if velocity_sign not in (-1.0, 1.0):
        raise ContractViolation("velocity_sign must be +1 or -1")
    c = velocity_sign * altitude_gain
    g = np.zeros(15)
    g[2], g[5] = 10.0, 10.0 * c
    L = float(np.linalg.norm(g))
    return CbfSpec(
        h=lambda x: float(10.0 * (x[2] + c * x[5])),
        grad_h=lambda x: g.copy(),
        alpha=ClassKappaE(slope),
        lipschitz=L,
        grad_bound=L,
        robust_margin=robust_margin,
        name="altitude",
    )


def random_rotation(rng) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quad_position_cbf(
    radius: float = 2.0,
    extension_gain: float = 1.0,
    shrink: float = 0.5,
    slope: float = 1.0,
    robust_margin: float = 0.1,
    speed_bound: float = 3.0,
    use_extended_gradient: bool = False,
    thrust_axis_sign: float = 1.0,
) -> CbfSpec:
    """Position barrier built from h_p = r^2 - |p|^2.

    h_e = dh_p/dt + a h_p, then h = h_e - lam (1 - (1 / 2r) dh/dp . s R e_z),
    s = ``thrust_axis_sign``. The gradient in the lam term is dh_p/dp = -2p by
    default; with ``use_extended_gradient`` it is dh_e/dp = -2v - 2 a p instead.
    Use s = -1 when the thrust force points along -R e_z, as it does at hover
    under this plant's gravity sign (T < 0).
    """
    r, a, lam = float(radius), float(extension_gain), float(shrink)
    if thrust_axis_sign not in (-1.0, 1.0):
        raise ContractViolation("thrust_axis_sign must be +1 or -1")
    sgn = float(thrust_axis_sign)
    if not 0.0 < lam < r * r / 2.0:
        raise ContractViolation(f"shrink must lie in (0, r^2/2) = (0, {r * r / 2}), got {lam}")

    def lead(p, v):
        return v + a * p if use_extended_gradient else p

    def h(x):
        p, v, R = unpack_quad(x)
        he = -2.0 * p @ v + a * (r * r - p @ p)
        return float(he - lam * (1.0 + sgn * lead(p, v) @ R[:, 2] / r))

    def grad(x):
        p, v, R = unpack_quad(x)
        b = sgn * R[:, 2]
        g = np.zeros(15)
        if use_extended_gradient:
            g[0:3] = -2.0 * v - 2.0 * a * p - lam * a * b / r
            g[3:6] = -2.0 * p - lam * b / r
        else:
            g[0:3] = -2.0 * v - 2.0 * a * p - lam * b / r
            g[3:6] = -2.0 * p
        g[6 + np.arange(3) * 3 + 2] = -lam * sgn * lead(p, v) / r
        return g

    def sampler(rng):
        d = rng.standard_normal(3)
        p = d / np.linalg.norm(d) * r * rng.uniform() ** (1 / 3)
        v = rng.uniform(-speed_bound, speed_bound, 3)
        return np.concatenate([p, v, random_rotation(rng).ravel()])

    L = estimate_gradient_bound(grad, sampler)
    return CbfSpec(h, grad, ClassKappaE(slope), L, L, robust_margin, name="position")


# invariant battery ---------------------------------------------------------------

def finite_difference_grad(h, x, step: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (h(x + e) - h(x - e)) / (2 * step)
    return g


def check_spec(spec: CbfSpec, sampler, n: int = 200, seed: int = 0) -> dict:
    """Sampled Lipschitz, gradient-bound, finite-difference and alpha checks.

    Returns the worst observed value of each check; ``ok`` is the conjunction.
    """
    rng = np.random.default_rng(seed)
    xs = [sampler(rng) for _ in range(n)]
    lip = 0.0
    for a, b in zip(xs[::2], xs[1::2]):
        lip = max(lip, abs(spec.h(a) - spec.h(b)) / max(np.linalg.norm(a - b), 1e-12))
    gnorm = max(np.linalg.norm(spec.grad_h(x)) for x in xs)
    fd = 0.0
    for x in xs[:50]:
        g = spec.grad_h(x)
        gf = finite_difference_grad(spec.h, x)
        fd = max(fd, np.linalg.norm(g - gf) / max(np.linalg.norm(g), 1.0))
    grid = np.linspace(-10, 10, 201)
    vals = np.array([spec.alpha(r) for r in grid])
    alpha_ok = bool(np.all(np.diff(vals) > 0) and spec.alpha(0.0) == 0.0)
    res = {
        "lipschitz_ratio": lip,
        "grad_norm": gnorm,
        "fd_rel_error": fd,
        "alpha_ok": alpha_ok,
    }
    res["ok"] = bool(
        lip <= spec.lipschitz + 1e-9 and gnorm <= spec.grad_bound + 1e-9 and fd <= 1e-5 and alpha_ok
    )
    return res
