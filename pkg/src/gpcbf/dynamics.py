"""Ground-truth plants, RK4 integration and the noisy derivative channel.

Nothing in here is visible to the controller: it only ever sees measurements
produced by :func:`measure`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ContractViolation, IntegrationDiverged

E_Z = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class SystemModel:
    state_dim: int
    input_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    input_matrix: Callable[[np.ndarray], np.ndarray]
    input_lo: np.ndarray
    input_hi: np.ndarray
    xdot_bound: float
    post_step: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = ""

    def __post_init__(self):
        lo = np.asarray(self.input_lo, dtype=float).reshape(self.input_dim)
        hi = np.asarray(self.input_hi, dtype=float).reshape(self.input_dim)
        if np.any(lo > hi):
            raise ContractViolation("input box needs lo <= hi componentwise")
        if not self.xdot_bound > 0:
            raise ContractViolation("xdot_bound must be positive")
        object.__setattr__(self, "input_lo", lo)
        object.__setattr__(self, "input_hi", hi)

    def xdot(self, x, u) -> np.ndarray:
        return self.drift(x) + self.input_matrix(x) @ np.asarray(u, dtype=float)


# cruise control -----------------------------------------------------------------

@dataclass(frozen=True)
class CruiseParams:
    mass: float = 1650.0
    zeta0: float = 0.2
    zeta1: float = 10.0
    zeta2: float = 0.5
    lead_speed: float = 14.0
    headway: float = 1.8
    desired_speed: float = 24.0
    # braking/traction limit as a multiple of m * 9.81
    force_limit_g: float = 0.3
    xdot_bound: float = 25.0

    def __post_init__(self):
        if not self.mass > 0 or not self.headway > 0:
            raise ContractViolation("mass and headway must be positive")


def cruise_dynamics(params: CruiseParams, x):
    """Drift and input matrix for state (v, z); the force acts on v."""
    v = float(x[0])
    rolling = params.zeta0 + params.zeta1 * v + params.zeta2 * v * v
    f = np.array([-rolling / params.mass, params.lead_speed - v])
    g = np.array([[1.0 / params.mass], [0.0]])
    return f, g


def cruise_model(params: CruiseParams = CruiseParams()) -> SystemModel:
    fmax = params.force_limit_g * params.mass * 9.81
    return SystemModel(
        state_dim=2,
        input_dim=1,
        drift=lambda x: cruise_dynamics(params, x)[0],
        input_matrix=lambda x: cruise_dynamics(params, x)[1],
        input_lo=np.array([-fmax]),
        input_hi=np.array([fmax]),
        xdot_bound=params.xdot_bound,
        name="cruise",
    )


# quadrotor --------------------------------------------------------------------

@dataclass(frozen=True)
class QuadrotorParams:
    gravity: float = 9.81
    ground_effect_strength: float = 5.0
    rotor_radius: float = 0.09
    thrust_bound: float = 15000.0
    altitude_gain: float = 0.1
    rate_bound: float = 5.0
    xdot_bound: float = 15100.0

    def __post_init__(self):
        if not self.rotor_radius > 0 or not self.thrust_bound > 0:
            raise ContractViolation("rotor radius and thrust bound must be positive")


def skew(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def ground_effect(params: QuadrotorParams, pz: float):
    """Thrust factor 1 - rho (r_rot / (4 p_z))^2, clamped at 0.

    Returns ``(zeta, in_contact)``; ``in_contact`` flags the clamped regime.
    """
    if pz <= 0:
        return 0.0, True
    zeta = 1.0 - params.ground_effect_strength * (params.rotor_radius / (4.0 * pz)) ** 2
    if zeta <= 0:
        return 0.0, True
    return zeta, False


def unpack_quad(state):
    state = np.asarray(state, dtype=float)
    return state[0:3], state[3:6], state[6:15].reshape(3, 3)


def pack_quad(p, v, R) -> np.ndarray:
    return np.concatenate([p, v, np.asarray(R).ravel()])


def quadrotor_dynamics(params: QuadrotorParams, state, u) -> np.ndarray:
    p, v, R = unpack_quad(state)
    T, w = float(u[0]), np.asarray(u[1:4], dtype=float)
    zeta, _ = ground_effect(params, p[2])
    vdot = params.gravity * E_Z + zeta * R @ E_Z * T
    Rdot = R @ skew(w)
    return pack_quad(v, vdot, Rdot)


def quad_drift(params: QuadrotorParams, state) -> np.ndarray:
    _, v, _ = unpack_quad(state)
    return pack_quad(v, params.gravity * E_Z, np.zeros((3, 3)))


def quad_input_matrix(params: QuadrotorParams, state) -> np.ndarray:
    p, _, R = unpack_quad(state)
    zeta, _ = ground_effect(params, p[2])
    G = np.zeros((15, 4))
    G[3:6, 0] = zeta * R[:, 2]
    for k in range(3):
        G[6:15, 1 + k] = (R @ skew(np.eye(3)[k])).ravel()
    return G


def reorthonormalize(state) -> np.ndarray:
    p, v, R = unpack_quad(state)
    U, _, Vt = np.linalg.svd(R)
    return pack_quad(p, v, U @ Vt)


def quadrotor_model(params: QuadrotorParams = QuadrotorParams()) -> SystemModel:
    b = params.rate_bound
    return SystemModel(
        state_dim=15,
        input_dim=4,
        drift=lambda x: quad_drift(params, x),
        input_matrix=lambda x: quad_input_matrix(params, x),
        input_lo=np.array([-params.thrust_bound, -b, -b, -b]),
        input_hi=np.array([params.thrust_bound, b, b, b]),
        xdot_bound=params.xdot_bound,
        post_step=reorthonormalize,
        name="quadrotor",
    )


# integration and measurement ----------------------------------------------------

def integrate_step(model: SystemModel, x, policy, dt: float) -> np.ndarray:
    """One classical RK4 step; ``policy`` is a callable of the state or a fixed input."""
    if not dt > 0:
        raise ContractViolation(f"dt must be positive, got {dt}")
    pi = policy if callable(policy) else (lambda _x, _u=np.asarray(policy, dtype=float): _u)
    x = np.asarray(x, dtype=float)

    def rhs(s):
        return model.xdot(s, pi(s))

    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    out = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if model.post_step is not None:
        out = model.post_step(out)
    if not np.all(np.isfinite(out)):
        raise IntegrationDiverged(f"non-finite state after step: {out}")
    return out


@dataclass
class Measurement:
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    noise_std: np.ndarray = field(default_factory=lambda: np.zeros(0))


def measure(model: SystemModel, x, u, noise_std, rng: np.random.Generator) -> Measurement:
    """Noisy derivative y = f(x) + g(x) u + xi with xi_i ~ N(0, noise_std_i^2)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    s = np.broadcast_to(np.asarray(noise_std, dtype=float), (model.state_dim,))
    y = model.xdot(x, u) + s * rng.standard_normal(model.state_dim)
    return Measurement(x.copy(), u.copy(), y, s.copy())
