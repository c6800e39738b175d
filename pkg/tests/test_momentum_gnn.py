import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_rotation
from msim.geometry import dihedral_angle_and_gradient, edge_vectors
from msim.integrator import ExternalForces, eval_external, momentum_step
from msim.mesh import SimState, generate_cuboid, generate_sheet
from msim.momentum_gnn import (BaselineGNN, LayerError, ModelConfig, MomentumGNN, Normalizer,
                               chain_graph, edge_geometry, hinge_geometry, input_features,
                               layer_accelerations, layered_update, load_model, save_model)
from msim.neural import Tensor
from msim.velocity_projection import angular_momentum, linear_momentum

DT = 1.0 / 60.0
SMALL = dict(layers=3, latent=12, hidden=12)


def random_state(mesh, rng, jitter=0.01, speed=0.3):
    x = mesh.rest_positions + jitter * rng.standard_normal(mesh.rest_positions.shape)
    return SimState(x, speed * rng.standard_normal(x.shape))


def model(kind="shell", zero=False, seed=0, **kw):
    return MomentumGNN(ModelConfig(kind=kind, zero_decoders=zero, seed=seed, **{**SMALL, **kw}))


def test_differentiable_geometry_matches_numpy(rng):
    mesh = generate_sheet(4, 3)
    x = mesh.rest_positions + 0.1 * rng.standard_normal(mesh.rest_positions.shape)
    length, u = edge_geometry(Tensor(x), mesh.edges)
    ref_len, ref_u = edge_vectors(x, mesh.edges)
    np.testing.assert_allclose(length.data[:, 0], ref_len, rtol=1e-14)
    np.testing.assert_allclose(u.data, ref_u, rtol=1e-13, atol=1e-15)
    theta, grads = hinge_geometry(Tensor(x), mesh.hinge_vertices)
    ref_t, ref_g = dihedral_angle_and_gradient(x[mesh.hinge_vertices])
    np.testing.assert_allclose(theta.data[:, 0], ref_t, atol=1e-14)
    for k in range(4):
        np.testing.assert_allclose(grads[k].data, ref_g[:, k], rtol=1e-10, atol=1e-12)


def test_zero_decoders_give_momentum_step(rng):
    for mesh in (generate_sheet(4, 4), generate_cuboid(2, 3, 2)):
        net = model(mesh.kind, zero=True)
        s = random_state(mesh, rng)
        forces = ExternalForces([0, -9.8, 0])
        out = net(mesh, s, forces, DT)
        x_m = momentum_step(mesh, s, eval_external(mesh, s, forces), DT)
        assert np.abs(out.positions.data - x_m).max() <= 1e-14 * max(1.0, np.abs(x_m).max())


def test_layer_accelerations_examples(rng):
    mesh = generate_sheet(3, 3)
    x = Tensor(random_state(mesh, rng).positions)
    zero = layer_accelerations(mesh, x, np.zeros((len(mesh.edges), 1)),
                               np.zeros((len(mesh.hinges), 1)), DT)
    assert np.all(zero.data == 0)
    w = np.zeros((len(mesh.edges), 1))
    w[3] = 2.0
    a = layer_accelerations(mesh, x, w, None, DT).data
    i, j = mesh.edges[3]
    others = np.delete(np.arange(9), [i, j])
    assert np.all(a[others] == 0)
    np.testing.assert_allclose(mesh.masses[i] * a[i], -mesh.masses[j] * a[j], rtol=1e-14)
    d = x.data[i] - x.data[j]
    assert np.linalg.norm(np.cross(a[i], d)) <= 1e-12 * np.linalg.norm(a[i]) * np.linalg.norm(d)


@given(st.integers(0, 10_000))
def test_layer_accelerations_conserve(seed):
    rng = np.random.default_rng(seed)
    mesh = generate_sheet(4, 3)
    x = random_state(mesh, rng, 0.05).positions
    ws = rng.standard_normal((len(mesh.edges), 1))
    wb = rng.standard_normal((len(mesh.hinges), 1))
    ma = mesh.masses[:, None] * layer_accelerations(mesh, Tensor(x), ws, wb, DT).data
    scale = np.abs(ma).max()
    assert np.abs(ma.sum(axis=0)).max() <= 1e-10 * scale
    assert np.abs(np.cross(x, ma).sum(axis=0)).max() <= 1e-10 * scale


def test_pinned_vertices_get_no_acceleration(rng):
    mesh = generate_sheet(3, 3).with_pinned([True] + [False] * 8)
    ws = rng.standard_normal((len(mesh.edges), 1))
    a = layer_accelerations(mesh, Tensor(mesh.rest_positions), ws, None, DT).data
    assert np.all(a[0] == 0) and np.abs(a[1:]).max() > 0


@pytest.mark.parametrize("kind", ["shell", "solid"])
def test_random_model_conserves_momentum(kind, rng):
    mesh = generate_sheet(5, 4) if kind == "shell" else generate_cuboid(3, 2, 2)
    net = model(kind, seed=3, impulse_scale=0.5)
    s = random_state(mesh, rng)
    out = net(mesh, s, None, DT)
    m = mesh.masses
    assert np.abs(out.positions.data - out.x_m).max() > 1e-6  # the network does act
    p0 = linear_momentum(m, s.velocities)
    scale = mesh.total_mass * mesh.diameter / DT
    assert np.abs(linear_momentum(m, out.v_fd) - p0).max() <= 1e-9 * scale
    L0 = angular_momentum(m, s.positions, s.velocities)
    L1 = angular_momentum(m, out.positions.data, out.velocities)
    assert np.abs(L1 - L0).max() <= 1e-10 * scale * mesh.diameter
    assert np.abs(linear_momentum(m, out.velocities) - p0).max() <= 1e-10 * scale
    # every intermediate layer conserves linear momentum as well
    for xl in out.layer_positions:
        pl = linear_momentum(m, (xl.data - s.positions) / DT)
        assert np.abs(pl - p0).max() <= 1e-9 * scale


def test_rotation_equivariance(rng):
    mesh = generate_sheet(4, 4)
    net = model(seed=5, impulse_scale=0.5)
    s = random_state(mesh, rng, 0.05)
    R = random_rotation(rng)
    t = rng.standard_normal(3)
    out = net(mesh, s, None, DT)
    out_r = net(mesh, SimState(s.positions @ R.T + t, s.velocities @ R.T), None, DT)
    np.testing.assert_allclose(out_r.positions.data, out.positions.data @ R.T + t, atol=1e-9)
    np.testing.assert_allclose(out_r.velocities, out.velocities @ R.T, atol=1e-9)


def test_features_are_rigid_invariant(rng):
    mesh = generate_cuboid(2, 2, 3)
    s = random_state(mesh, rng, 0.03)
    R = random_rotation(rng)
    f = np.zeros_like(s.positions)
    a = input_features(mesh, s, s.positions + DT * s.velocities, f)
    sr = SimState(s.positions @ R.T + 1.0, s.velocities @ R.T)
    b = input_features(mesh, sr, sr.positions + DT * sr.velocities, f)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, atol=1e-12)


def test_decoders_symmetric_under_direction_swap(rng):
    mesh = generate_sheet(3, 3)
    net = model(seed=1)
    s = random_state(mesh, rng)
    x_m = s.positions + DT * s.velocities
    feats = net.encode(mesh, s, x_m, np.zeros_like(x_m))
    ne = len(mesh.edges)
    swapped = type(feats)(feats.r, Tensor(np.concatenate([feats.s.data[ne:], feats.s.data[:ne]])),
                          feats.x)
    np.testing.assert_array_equal(net.decode_stretch(0, feats, mesh).data,
                                  net.decode_stretch(0, swapped, mesh).data)
    np.testing.assert_array_equal(net.decode_bend(0, feats, mesh).data,
                                  net.decode_bend(0, swapped, mesh).data)


def test_zero_decoder_returns_bias(rng):
    mesh = generate_sheet(3, 3)
    net = model(zero=True)
    net.stretch_decoders[0].out.bias.data[:] = 0.25
    net.bend_decoders[0].out.bias.data[:] = -0.5
    s = random_state(mesh, rng)
    feats = net.encode(mesh, s, s.positions, np.zeros_like(s.positions))
    assert np.all(net.decode_stretch(0, feats, mesh).data == 0.25)
    assert np.all(net.decode_bend(0, feats, mesh).data == -0.5)


def test_bend_decoder_rejects_non_hinge(rng):
    mesh = generate_sheet(3, 3)
    net = model()
    s = random_state(mesh, rng)
    feats = net.encode(mesh, s, s.positions, np.zeros_like(s.positions))
    boundary = np.setdiff1d(np.arange(len(mesh.edges)), mesh.hinges[:, 0])[0]
    with pytest.raises(ValueError, match="not a hinge"):
        net.decode_bend(0, feats, mesh, edge_ids=[boundary])
    assert net.decode_bend(0, feats, mesh, edge_ids=[mesh.hinges[0, 0]]).shape == (1, 1)
    with pytest.raises(ValueError):
        model("solid").decode_bend(0, feats, mesh)


def test_zero_message_mlps_leave_features(rng):
    mesh = generate_sheet(3, 3)
    net = model()
    for mlp in net.edge_mlps + net.vertex_mlps:
        mlp.out.weight.data[:] = 0
        mlp.out.bias.data[:] = 0
    s = random_state(mesh, rng)
    feats = net.encode(mesh, s, s.positions, np.zeros_like(s.positions))
    strain, dihedral = net._intrinsics(mesh, feats.x)
    out = net.message_layer(0, feats, mesh, strain, dihedral)
    assert np.array_equal(out.r.data, feats.r.data) and np.array_equal(out.s.data, feats.s.data)


def test_directed_messages_differ(rng):
    mesh = generate_sheet(3, 3)
    net = model(seed=2)
    s = random_state(mesh, rng, 0.05)
    feats = net.encode(mesh, s, s.positions, np.zeros_like(s.positions))
    strain, dihedral = net._intrinsics(mesh, feats.x)
    out = net.message_layer(0, feats, mesh, strain, dihedral)
    ne = len(mesh.edges)
    assert np.abs(out.s.data[:ne] - out.s.data[ne:]).max() > 1e-6


def test_chain_layer_reach():
    # x1..x4 on the x axis; the momentum step lifts x1 only
    g = chain_graph(4)
    x_m = g.positions.copy()
    x_m[0, 1] = 0.2
    reach = []
    for L in (1, 2, 3):
        y = layered_update(g, x_m, 0.1, [np.ones(3)] * L)[-1][:, 1]
        reach.append(int(np.max(np.flatnonzero(y != 0.0))))
    # a vertex d hops from x1 moves vertically only with at least d layers
    assert reach == [1, 2, 3]


def test_layer_error_on_degenerate_edge(rng):
    mesh = generate_sheet(3, 3)
    x = mesh.rest_positions.copy()
    i, j = mesh.edges[0]
    x[j] = x[i]
    with pytest.raises(LayerError) as exc:
        model()(mesh, SimState(x, np.zeros_like(x)), None, DT)
    assert exc.value.layer == 0


def test_kind_mismatch():
    with pytest.raises(ValueError):
        model("solid")(generate_sheet(3, 3), generate_sheet(3, 3).rest_state(), None, DT)


def test_baseline_zero_init_and_contrast(rng):
    mesh = generate_sheet(4, 4)
    s = random_state(mesh, rng)
    base = BaselineGNN(ModelConfig(zero_decoders=True, **SMALL))
    base.decoder.out.bias.data[:] = [0.0, -1.0, 2.0]
    out = base(mesh, s, None, DT)
    expect = s.positions + DT * s.velocities + DT**2 * np.array([0.0, -1.0, 2.0])
    np.testing.assert_allclose(out.positions.data, expect, rtol=1e-14)
    rand = BaselineGNN(ModelConfig(zero_decoders=False, seed=4, **SMALL))
    v = rand(mesh, s, None, DT).v_fd
    assert np.abs(linear_momentum(mesh.masses, v - s.velocities)).max() > 1e-6


def test_save_load_round_trip(tmp_path, rng):
    mesh = generate_sheet(3, 3)
    net = model(seed=9)
    net.normalizer = Normalizer(np.arange(4.0), np.ones(4) * 2, np.arange(6.0), np.ones(6) * 3)
    save_model(net, tmp_path / "m.ckpt")
    back, _, manifest = load_model(tmp_path / "m.ckpt")
    assert manifest["config"]["layers"] == SMALL["layers"]
    s = random_state(mesh, rng)
    a = net(mesh, s, None, DT).positions.data
    b = back(mesh, s, None, DT).positions.data
    assert a.tobytes() == b.tobytes()
    base = BaselineGNN(ModelConfig(zero_decoders=False, **SMALL))
    save_model(base, tmp_path / "b.ckpt")
    assert isinstance(load_model(tmp_path / "b.ckpt")[0], BaselineGNN)


def test_pinned_mesh_skips_projection(rng):
    mesh = generate_sheet(3, 3).with_pinned([True] + [False] * 8)
    s = random_state(mesh, rng)
    out = model(seed=1)(mesh, s, ExternalForces([0, 0, -9.8]), DT)
    assert out.projection is None
    assert np.array_equal(out.velocities, out.v_fd)
    assert np.array_equal(out.positions.data[0], s.positions[0])
