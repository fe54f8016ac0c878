import math

import numpy as np
import pytest

from gpcbf.dynamics import (
    CruiseParams,
    QuadrotorParams,
    SystemModel,
    cruise_dynamics,
    cruise_model,
    ground_effect,
    integrate_step,
    measure,
    pack_quad,
    quadrotor_dynamics,
    quadrotor_model,
)
from gpcbf.errors import ContractViolation, IntegrationDiverged


def linear_model(a=-1.0):
    return SystemModel(1, 1, lambda x: a * x, lambda x: np.zeros((1, 1)), [0.0], [0.0], 10.0)


def test_cruise_drift():
    p = CruiseParams()
    f, g = cruise_dynamics(p, [0.0, 5.0])
    assert f[0] == pytest.approx(-0.2 / 1650)
    f, _ = cruise_dynamics(p, [14.0, 5.0])
    assert f[1] == 0.0
    f, _ = cruise_dynamics(p, [10.0, 5.0])
    assert f[0] == pytest.approx(-(0.2 + 100 + 50) / 1650)
    assert np.array_equal(g, [[1 / 1650], [0.0]])


def test_ground_effect():
    p = QuadrotorParams()
    assert ground_effect(p, 1e6)[0] == pytest.approx(1.0)
    root = p.rotor_radius * math.sqrt(p.ground_effect_strength) / 4
    assert ground_effect(p, root * (1 + 1e-9))[0] == pytest.approx(0.0, abs=1e-8)
    assert ground_effect(p, root * 0.5) == (0.0, True)
    assert ground_effect(p, -1.0) == (0.0, True)


def test_hover():
    p = QuadrotorParams()
    pz = 0.7
    T = -p.gravity / ground_effect(p, pz)[0]
    xd = quadrotor_dynamics(p, pack_quad([0, 0, pz], [0, 0, 0], np.eye(3)), [T, 0, 0, 0])
    assert np.allclose(xd, 0, atol=1e-12)


def test_control_affine_split():
    plant = quadrotor_model()
    rng = np.random.default_rng(0)
    x = pack_quad(rng.standard_normal(3) + [0, 0, 2], rng.standard_normal(3), np.eye(3))
    u = rng.uniform(plant.input_lo, plant.input_hi)
    assert np.allclose(plant.xdot(x, u), quadrotor_dynamics(QuadrotorParams(), x, u))


def test_integrate_trivial_and_linear():
    plant = SystemModel(2, 1, lambda x: np.zeros(2), lambda x: np.zeros((2, 1)), [0.0], [0.0], 1.0)
    assert np.array_equal(integrate_step(plant, [1.0, 2.0], [0.0], 0.1), [1.0, 2.0])
    x = integrate_step(linear_model(), [1.0], [0.0], 0.01)
    assert x[0] == pytest.approx(math.exp(-0.01), abs=1e-9)
    with pytest.raises(ContractViolation):
        integrate_step(plant, [1.0, 2.0], [0.0], 0.0)


def test_rk4_order():
    m = linear_model(-2.0)
    errs = [abs(integrate_step(m, [1.0], [0.0], h)[0] - math.exp(-2 * h)) for h in (0.1, 0.05)]
    assert errs[0] / errs[1] == pytest.approx(32, rel=0.1)  # local error O(h^5)
    # global error over a fixed horizon: halving dt cuts it by ~16
    glob = []
    for n in (20, 40):
        x = np.array([1.0])
        for _ in range(n):
            x = integrate_step(m, x, [0.0], 1.0 / n)
        glob.append(abs(x[0] - math.exp(-2)))
    assert glob[0] / glob[1] == pytest.approx(16, rel=0.1)


def test_cruise_step_halving():
    plant = cruise_model()
    def run(dt):
        x = np.array([20.0, 50.0])
        for _ in range(int(round(1.0 / dt))):
            x = integrate_step(plant, x, lambda s: np.array([-100.0 * (s[0] - 24)]), dt)
        return x
    assert np.linalg.norm(run(1e-3) - run(5e-4)) <= 1e-6


def test_divergence_raises():
    m = SystemModel(1, 1, lambda x: x**3, lambda x: np.zeros((1, 1)), [0.0], [0.0], 1.0)
    with np.errstate(over="ignore"), pytest.raises(IntegrationDiverged):
        integrate_step(m, [1e200], [0.0], 1.0)


def test_rotation_stays_orthonormal():
    plant = quadrotor_model()
    x = pack_quad([0, 0, 1.0], [0, 0, 0], np.eye(3))
    rng = np.random.default_rng(0)
    for k in range(5000):
        u = np.array([-9.81, *rng.uniform(-5, 5, 3)])
        x = integrate_step(plant, x, u, 1e-2)
        x[:6] = 0.0
        x[2] = 1.0
    R = x[6:].reshape(3, 3)
    assert np.linalg.norm(R.T @ R - np.eye(3)) <= 1e-6


def test_xdot_bound_holds():
    rng = np.random.default_rng(1)
    for plant, sample in (
        (cruise_model(), lambda: rng.uniform([0, 0], [30, 100])),
        (quadrotor_model(), lambda: pack_quad(rng.uniform(-2, 2, 3), rng.uniform(-3, 3, 3), np.eye(3))),
    ):
        for _ in range(500):
            u = rng.uniform(plant.input_lo, plant.input_hi)
            assert np.linalg.norm(plant.xdot(sample(), u)) <= plant.xdot_bound


def test_measure():
    plant = cruise_model()
    x, u = np.array([20.0, 40.0]), np.array([100.0])
    assert np.array_equal(measure(plant, x, u, 0.0, np.random.default_rng(0)).y, plant.xdot(x, u))
    a = measure(plant, x, u, 0.1, np.random.default_rng(9)).y
    b = measure(plant, x, u, 0.1, np.random.default_rng(9)).y
    assert np.array_equal(a, b)
    rng = np.random.default_rng(2)
    ys = np.array([measure(plant, x, u, 0.1, rng).y for _ in range(10_000)])
    assert np.allclose(ys.std(axis=0), 0.1, rtol=0.05)


def test_box_contract():
    with pytest.raises(ContractViolation):
        SystemModel(1, 1, lambda x: x, lambda x: np.ones((1, 1)), [1.0], [0.0], 1.0)
