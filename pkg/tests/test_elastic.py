import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import central_fd, random_rotation, rel_err
from msim.elastic import (ElasticError, InversionError, MaterialParams, discrete_shell_bend,
                          neo_hookean_tet, neo_hookean_tets, stvk_triangle, tet_rest_frame,
                          total_internal)
from msim.geometry import dihedral_angle
from msim.mesh import generate_cuboid, generate_sheet

SHELL = MaterialParams(1e4, 0.3, 100.0, thickness=0.01, bending_stiffness=0.1)
SOLID = MaterialParams(1e4, 0.3, 100.0, name="neohookean")
UNIT_TRI = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
UNIT_TET = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
HINGE = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, -1, 0]], float)


def lame(p):
    E, nu = p.youngs_modulus, p.poisson_ratio
    return E / (2 * (1 + nu)), E * nu / ((1 + nu) * (1 - 2 * nu))


def test_lame_conversion():
    mu, lam = SHELL.lame
    assert (mu, lam) == pytest.approx(lame(SHELL), rel=1e-15)


def test_invalid_material_rejected():
    with pytest.raises(ValueError):
        MaterialParams(1e4, 0.5, 1.0)
    with pytest.raises(ValueError):
        MaterialParams(-1.0, 0.3, 1.0)


# --- StVK -----------------------------------------------------------------

def test_stvk_rest_is_zero():
    r = stvk_triangle(UNIT_TRI, np.eye(2), SHELL)
    assert r.value == 0.0
    assert np.abs(r.gradient).max() == 0.0


def test_stvk_rotated_rest_is_zero(rng):
    R = random_rotation(rng)
    r = stvk_triangle(UNIT_TRI @ R.T + 3.0, np.eye(2), SHELL)
    assert abs(r.value) < 1e-12


def test_stvk_uniaxial_stretch_closed_form():
    x = UNIT_TRI * np.array([1.2, 1.0, 1.0])
    mu, lam = lame(SHELL)
    e11 = 0.5 * (1.2**2 - 1.0)
    expected = (mu * e11**2 + 0.5 * lam * e11**2) * 0.5 * SHELL.thickness
    r = stvk_triangle(x, np.eye(2), SHELL)
    assert r.value == pytest.approx(expected, rel=1e-13)
    fd = central_fd(lambda y: stvk_triangle(y, np.eye(2), SHELL).value, x)
    assert rel_err(r.gradient, fd) < 1e-6


def test_stvk_degenerate_rest_raises():
    with pytest.raises(ElasticError):
        stvk_triangle(UNIT_TRI, np.array([[1.0, 2.0], [0.0, 0.0]]), SHELL)


def test_stvk_collapsed_deformed_triangle_is_finite():
    x = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float)
    r = stvk_triangle(x, np.eye(2), SHELL)
    assert np.isfinite(r.value) and np.isfinite(r.gradient).all()


# --- Neo-Hookean ----------------------------------------------------------

def test_neo_hookean_rest_and_rotation(rng):
    r = neo_hookean_tet(UNIT_TET, np.eye(3), SOLID)
    assert abs(r.value) < 1e-15 and np.abs(r.gradient).max() < 1e-10
    R = random_rotation(rng)
    assert abs(neo_hookean_tet(UNIT_TET @ R.T, np.eye(3), SOLID).value) < 1e-12


def test_neo_hookean_isotropic_scale_closed_form():
    mu, lam = lame(SOLID)
    J = 1.1**3
    psi = 0.5 * mu * (3 * 1.1**2 - 3) - mu * np.log(J) + 0.5 * lam * np.log(J) ** 2
    r = neo_hookean_tet(1.1 * UNIT_TET, np.eye(3), SOLID)
    assert r.value == pytest.approx(psi / 6.0, rel=1e-13)
    fd = central_fd(lambda y: neo_hookean_tet(y, np.eye(3), SOLID).value, 1.1 * UNIT_TET)
    assert rel_err(r.gradient, fd) < 1e-6


def test_neo_hookean_inversion_raises():
    x = UNIT_TET.copy()
    x[3, 2] = -0.5
    with pytest.raises(InversionError):
        neo_hookean_tet(x, np.eye(3), SOLID)


def test_neo_hookean_extension_is_c1_at_junction():
    Dm, vol = tet_rest_frame(UNIT_TET[None])
    Dinv = np.linalg.inv(Dm)

    def energy(z, j_min):
        x = UNIT_TET.copy()
        x[3, 2] = z
        return neo_hookean_tets(x[None], Dinv, vol, SOLID, j_min)[0][0]

    j_min = 0.05
    # above the junction the extension is the plain energy
    assert energy(0.3, j_min) == pytest.approx(energy(0.3, None), rel=1e-14)
    h = 1e-7
    left = (energy(j_min, j_min) - energy(j_min - h, j_min)) / h
    right = (energy(j_min + h, j_min) - energy(j_min, j_min)) / h
    assert left == pytest.approx(right, rel=1e-4)
    assert np.isfinite(energy(-0.5, j_min))


# --- bending --------------------------------------------------------------

def test_bend_flat_and_at_rest_angle_are_zero():
    r = discrete_shell_bend(HINGE, 0.0, 1.0, 1.0, SHELL)
    assert r.value == 0.0 and np.abs(r.gradient).max() == 0.0


def test_bend_at_theta0_plus_tenth():
    x = HINGE.copy()
    x[3] = [1.0, -np.cos(0.1), np.sin(0.1)]
    # the sign of theta depends on the orientation convention
    theta = dihedral_angle(x[None])[0]
    assert abs(abs(theta) - 0.1) < 1e-14
    assert discrete_shell_bend(x, theta, 1.0, 1.0, SHELL).value == 0.0
    r = discrete_shell_bend(x, theta - 0.1, 1.0, 1.0, SHELL)
    # unit-square hinge: |e0| = 1, heights 1 + 1, hbar = 2/3
    expected = SHELL.bending_stiffness * 0.1**2 * 1.0 / (2.0 / 3.0)
    assert r.value == pytest.approx(expected, rel=1e-12)
    fd = central_fd(lambda y: discrete_shell_bend(y, theta - 0.1, 1.0, 1.0, SHELL).value, x)
    assert rel_err(r.gradient, fd) < 1e-6


# --- whole mesh -----------------------------------------------------------

MESHES = {"sheet": generate_sheet(3, 3, material=SHELL),
          "cuboid": generate_cuboid(2, 2, 3, material=SOLID)}


@pytest.mark.parametrize("name", sorted(MESHES))
def test_total_internal_rest_and_rigid(name, rng):
    mesh = MESHES[name]
    assert abs(total_internal(mesh, mesh.rest_positions).value) < 1e-14
    R = random_rotation(rng)
    moved = mesh.rest_positions @ R.T + rng.standard_normal(3)
    assert abs(total_internal(mesh, moved).value) < 1e-10


@pytest.mark.parametrize("name", sorted(MESHES))
@given(seed=st.integers(0, 10_000))
def test_total_internal_properties(name, seed):
    mesh = MESHES[name]
    rng = np.random.default_rng(seed)
    x = mesh.rest_positions + 0.03 * rng.standard_normal(mesh.rest_positions.shape)
    rep = total_internal(mesh, x)
    # rigid invariance
    R = random_rotation(rng)
    moved = total_internal(mesh, x @ R.T + rng.standard_normal(3)).value
    assert abs(moved - rep.value) <= 1e-10 * abs(rep.value)
    # null force and torque
    g = rep.gradient
    gs = max(1.0, np.abs(g).max())
    assert np.abs(g.sum(axis=0)).max() <= 1e-10 * gs
    assert np.abs(np.cross(x, g).sum(axis=0)).max() <= 1e-10 * gs
    # gradient consistency
    fd = central_fd(lambda y: total_internal(mesh, y).value, x)
    assert np.abs(g - fd).max() / max(1.0, np.abs(g).max()) <= 1e-5
