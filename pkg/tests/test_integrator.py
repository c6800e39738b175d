import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import central_fd, rel_err
from msim.elastic import InversionError, MaterialParams
from msim.integrator import (ConvergenceError, ExternalForces, HalfSpace, Sphere, StepConfig,
                             StepError, eval_external, implicit_euler_step,
                             implicit_euler_step_direct, modified_potential, momentum_step,
                             reference_rollout)
from msim.mesh import Mesh, SimState, generate_cuboid, generate_sheet
from msim.velocity_projection import angular_momentum, linear_momentum

TRI = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)


def triangle(density):
    return Mesh.from_elements(TRI, [(0, 1, 2)], MaterialParams(1e3, 0.3, density, thickness=1.0))


def test_gravity_and_contact_forces():
    mesh = triangle(12.0)  # area 1/2, equal split: 2 kg per vertex
    state = mesh.rest_state()
    f = eval_external(mesh, state, ExternalForces([0, -10, 0]))
    np.testing.assert_allclose(f, np.tile([0, -20.0, 0], (3, 1)))
    ground = HalfSpace([0, 1.0, 0], -1.0, 1000.0)
    assert np.all(eval_external(mesh, state, ExternalForces(obstacles=[ground])) == 0)
    x = TRI.copy()
    x[0, 1] = -0.01
    f = eval_external(mesh, SimState(x, np.zeros((3, 3))),
                      ExternalForces(obstacles=[HalfSpace([0, 1.0, 0], 0.0, 1000.0)]))
    np.testing.assert_allclose(f[0], [0, 10.0, 0], rtol=1e-12)
    assert np.all(f[1:] == 0)


def test_sphere_contact_and_pins():
    mesh = triangle(12.0).with_pinned([False, True, False])
    ball = Sphere([0, 0, 0], 0.5, 100.0)
    f = eval_external(mesh, mesh.rest_state(), ExternalForces([0, -10, 0], [ball]))
    np.testing.assert_allclose(f[0], [0, -20.0, 0])  # at the centre: no defined normal, zero depth push
    assert np.all(f[1] == 0)
    with pytest.raises(ValueError):
        HalfSpace([0, 2.0, 0], 0.0, 1.0)


def test_momentum_step_examples():
    mesh = triangle(12.0)
    s = mesh.rest_state()
    assert np.array_equal(momentum_step(mesh, s, np.zeros((3, 3)), 0.1), s.positions)
    f = eval_external(mesh, s, ExternalForces([0, -10, 0]))
    xm = momentum_step(mesh, s, f, 0.1)
    np.testing.assert_allclose(xm - s.positions, np.tile([0, -0.1, 0], (3, 1)), atol=1e-15)
    pinned = mesh.with_pinned([True, False, False])
    xm = momentum_step(pinned, s, f, 0.1)
    assert np.array_equal(xm[0], s.positions[0])


@given(st.integers(0, 10_000))
def test_momentum_step_momenta(seed):
    rng = np.random.default_rng(seed)
    mesh = generate_sheet(3, 3)
    s = SimState(mesh.rest_positions + 0.1 * rng.standard_normal((9, 3)),
                 rng.standard_normal((9, 3)))
    f = rng.standard_normal((9, 3))
    dt = 0.05
    xm = momentum_step(mesh, s, f, dt)
    v = (xm - s.positions) / dt
    m = mesh.masses
    p = sum(m[i] * s.velocities[i] + dt * f[i] for i in range(9))
    L = sum(m[i] * np.cross(s.positions[i], s.velocities[i]) + dt * np.cross(s.positions[i], f[i])
            for i in range(9))
    np.testing.assert_allclose(linear_momentum(m, v), p, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(angular_momentum(m, s.positions, v), L, rtol=1e-12, atol=1e-14)


def test_modified_potential_quadratic_term():
    mesh = triangle(4.0)  # total mass 2
    x_m = TRI.copy()
    value, grad = modified_potential(mesh, x_m + [0.1, 0, 0], x_m, 0.1)
    assert value == pytest.approx(1.0, rel=1e-13)
    value, grad = modified_potential(mesh, x_m, x_m, 0.1)
    assert value == 0.0 and np.abs(grad).max() == 0.0


@given(st.integers(0, 10_000))
def test_modified_potential_gradient(seed):
    rng = np.random.default_rng(seed)
    mesh = generate_cuboid(2, 2, 2)
    x_m = mesh.rest_positions + 0.05 * rng.standard_normal((8, 3))
    x = x_m + 0.02 * rng.standard_normal((8, 3))
    _, g = modified_potential(mesh, x, x_m, 0.02)
    fd = central_fd(lambda y: modified_potential(mesh, y, x_m, 0.02)[0], x)
    assert rel_err(g, fd) < 1e-6


def test_pinned_gradient_masked():
    mesh = generate_sheet(3, 3).with_pinned([True] + [False] * 8)
    rng = np.random.default_rng(0)
    x = mesh.rest_positions + 0.01 * rng.standard_normal((9, 3))
    _, g = modified_potential(mesh, x, mesh.rest_positions, 0.01)
    assert np.all(g[0] == 0) and np.abs(g[1:]).max() > 0


def test_rest_is_fixed_point():
    mesh = generate_sheet(4, 4)
    s = mesh.rest_state()
    out = implicit_euler_step(mesh, s, ExternalForces(), StepConfig())
    assert np.abs(out.positions - s.positions).max() == 0.0


def test_free_flight_is_ballistic():
    mesh = generate_cuboid(3, 2, 2)
    v = np.tile([0.3, -0.2, 1.0], (mesh.n_vertices, 1))
    cfg = StepConfig(dt=0.01)
    out = implicit_euler_step(mesh, SimState(mesh.rest_positions, v), ExternalForces(), cfg)
    np.testing.assert_allclose(out.positions, mesh.rest_positions + 0.01 * v, atol=1e-14)
    np.testing.assert_allclose(out.velocities, v, atol=1e-12)


def test_newton_values_monotone_on_stretched_triangle():
    mesh = triangle(100.0)
    x = TRI.copy()
    x[1, 0] = 1.6
    state, info = implicit_euler_step(mesh, SimState(x, np.zeros((3, 3))), ExternalForces(),
                                      StepConfig(dt=0.05), return_info=True)
    assert info.iterations >= 1
    assert all(b <= a for a, b in zip(info.values, info.values[1:]))
    assert info.grad_norm <= StepConfig(dt=0.05).tolerance(mesh)


def test_pins_bit_identical():
    mesh = generate_sheet(4, 4)
    pins = np.zeros(16, bool)
    pins[12:] = True
    mesh = mesh.with_pinned(pins)
    traj = reference_rollout(mesh, mesh.rest_state(), ExternalForces([0, 0, -9.8]),
                             StepConfig(dt=0.02), 5)
    for s in traj.states:
        assert s.positions[pins].tobytes() == mesh.rest_positions[pins].tobytes()
    assert traj.states[-1].positions[0, 2] < 0


def test_zero_step_rollout():
    mesh = generate_sheet(2, 2)
    traj = reference_rollout(mesh, mesh.rest_state(), ExternalForces(), StepConfig(), 0)
    assert len(traj.states) == 1


def test_free_fall_velocity():
    mesh = generate_sheet(3, 3)
    g = np.array([0, 0, -9.81])
    cfg = StepConfig(dt=0.01)
    traj = reference_rollout(mesh, mesh.rest_state(), ExternalForces(g), cfg, 10)
    for k, s in enumerate(traj.states):
        np.testing.assert_allclose(s.velocities, np.tile(g * k * cfg.dt, (9, 1)), atol=1e-10)


def test_two_stage_matches_direct_solve():
    rng = np.random.default_rng(5)
    for mesh in (generate_sheet(3, 3), generate_cuboid(2, 2, 2)):
        s = SimState(mesh.rest_positions + 0.02 * rng.standard_normal(mesh.rest_positions.shape),
                     0.3 * rng.standard_normal(mesh.rest_positions.shape))
        forces = ExternalForces([0, -9.8, 0])
        cfg = StepConfig(dt=0.02)
        a = implicit_euler_step(mesh, s, forces, cfg)
        b = implicit_euler_step_direct(mesh, s, forces, cfg)
        assert np.abs(a.positions - b.positions).max() <= 10 * cfg.tolerance(mesh)


def test_step_errors():
    mesh = generate_cuboid(2, 2, 2)
    with pytest.raises(ConvergenceError):
        rng = np.random.default_rng(0)
        s = SimState(mesh.rest_positions + 0.1 * rng.standard_normal((8, 3)), np.zeros((8, 3)))
        implicit_euler_step(mesh, s, ExternalForces(), StepConfig(newton_max_iters=1))
    x = mesh.rest_positions.copy()
    x[:, 2] *= -1  # mirror: every tet inverted
    with pytest.raises(StepError) as exc:
        reference_rollout(mesh, SimState(x, np.zeros((8, 3))), ExternalForces(), StepConfig(), 3)
    assert exc.value.step == 0
    assert isinstance(exc.value.cause, InversionError)


def test_released_bar_momentum():
    mesh = generate_cuboid(4, 2, 2, (2.0, 0.5, 0.5))
    x = mesh.rest_positions * np.array([1.1, 1.0, 1.0])
    cfg = StepConfig(dt=0.01)
    traj = reference_rollout(mesh, SimState(x, np.zeros_like(x)), ExternalForces(), cfg, 20)
    p, _ = traj.momenta
    # force residual tol per DOF turns into at most N * dt * tol momentum error per step
    bound = mesh.n_vertices * cfg.dt * cfg.tolerance(mesh)
    assert np.abs(np.diff(p, axis=0)).max() <= bound
