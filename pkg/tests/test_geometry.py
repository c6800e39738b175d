import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import central_fd, random_rotation, rel_err
from msim.geometry import (DegenerateGeometryError, diameter, dihedral_angle,
                           dihedral_angle_and_gradient, edge_vectors)

SQUARE = np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, -1, 0]]], float)


def folded(angle):
    # rotate the second wing about the shared x-axis edge
    x = SQUARE.copy()
    c, s = np.cos(angle), np.sin(angle)
    x[0, 3] = [1.0, -c, s]
    return x


def test_flat_hinge_has_zero_angle():
    assert dihedral_angle(SQUARE)[0] == 0.0


def test_ninety_degree_fold_against_cross_product_oracle():
    x = folded(np.pi / 2)[0]
    nA = np.cross(x[1] - x[0], x[2] - x[0])
    nB = np.cross(x[3] - x[0], x[1] - x[0])
    oracle = np.arccos(nA @ nB / np.linalg.norm(nA) / np.linalg.norm(nB))
    theta = dihedral_angle(folded(np.pi / 2))[0]
    assert abs(abs(theta) - np.pi / 2) < 1e-14
    assert abs(abs(theta) - oracle) < 1e-14


def test_reflection_flips_sign():
    a = dihedral_angle(folded(0.7))[0]
    b = dihedral_angle(folded(-0.7))[0]
    assert a == pytest.approx(-b, abs=1e-15)
    assert abs(a) == pytest.approx(0.7, abs=1e-14)


def test_degenerate_wing_raises_with_index():
    x = np.concatenate([SQUARE, SQUARE], axis=0)
    x[1, 2] = x[1, 0] + 0.5 * (x[1, 1] - x[1, 0])
    with pytest.raises(DegenerateGeometryError) as exc:
        dihedral_angle(x, eps_area=1e-12)
    assert exc.value.index == 1


@given(st.integers(0, 10_000))
def test_dihedral_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    x = SQUARE + 0.2 * rng.standard_normal(SQUARE.shape)
    _, g = dihedral_angle_and_gradient(x)
    fd = central_fd(lambda y: dihedral_angle(y)[0], x)
    assert rel_err(g, fd) < 1e-6


@given(st.integers(0, 10_000))
def test_dihedral_gradient_is_translation_and_rotation_free(seed):
    rng = np.random.default_rng(seed)
    x = SQUARE + 0.2 * rng.standard_normal(SQUARE.shape)
    _, g = dihedral_angle_and_gradient(x)
    assert np.abs(g[0].sum(axis=0)).max() < 1e-12 * max(1, np.abs(g).max())
    assert np.abs(np.cross(x[0], g[0]).sum(axis=0)).max() < 1e-10


@given(st.integers(0, 10_000))
def test_dihedral_is_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    x = SQUARE + 0.2 * rng.standard_normal(SQUARE.shape)
    R = random_rotation(rng)
    y = x @ R.T + rng.standard_normal(3)
    assert dihedral_angle(y)[0] == pytest.approx(dihedral_angle(x)[0], abs=1e-12)


def test_edge_vectors_and_degenerate_edge():
    x = np.array([[2.0, 0, 0], [0, 0, 0], [1, 1, 0]])
    length, u = edge_vectors(x, np.array([[0, 1], [2, 1]]))
    np.testing.assert_allclose(length, [2.0, np.sqrt(2)])
    np.testing.assert_allclose(u, [[1, 0, 0], [1 / np.sqrt(2), 1 / np.sqrt(2), 0]])
    with pytest.raises(DegenerateGeometryError):
        edge_vectors(np.zeros((2, 3)), np.array([[0, 1]]))


def test_diameter_is_bounding_box_diagonal():
    x = np.array([[0, 0, 0], [3, 4, 0], [1, 1, 12.0]])
    assert diameter(x) == pytest.approx(13.0)
