import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from angiorecon import autodiff as ad
from angiorecon.errors import InvalidInputError, NumericalError
from angiorecon.features import (ConvWeights, FeaturePyramid, GcnWeights, assemble_vertex_features,
                                 extract_features, gcn_forward, gcn_layer, load_checkpoint, normalized_adjacency,
                                 refine_mesh, save_checkpoint)
from angiorecon.geometry import projection_from_geometry
from angiorecon.losses import LossConfig, total_loss
from angiorecon.mesh import build_tube, normalize_mesh
from angiorecon.phantom import default_view_pair

from fd import numeric_grad, rel_err


def toy_tube(n_rings=5, n_slots=8):
    z = np.linspace(0, 4, n_rings)
    pts = np.stack([0.3 * np.sin(z), 0.2 * z, z], axis=1)
    return build_tube(pts, np.linspace(0.8, 1.2, n_rings), n_slots)


def test_zero_image_gives_zero_pyramid():
    pyr = extract_features(np.zeros((32, 32)), ConvWeights.init(np.random.default_rng(0), (4, 4, 4, 4)))
    vals = pyr.values()
    assert len(vals) == 4
    assert [v.shape for v in vals] == [(4, 32 >> k, 32 >> k) for k in range(4)]
    assert all(np.all(v == 0) for v in vals)


def test_identity_kernel_level_zero():
    conv = ConvWeights.init(np.random.default_rng(0), (1, 1, 1, 1))
    ident = np.zeros((1, 1, 3, 3))
    ident[0, 0, 1, 1] = 1.0
    conv = ConvWeights([ident.copy() for _ in range(8)], [np.zeros(1) for _ in range(8)])
    img = np.random.default_rng(1).uniform(size=(16, 16))
    assert np.array_equal(extract_features(img, conv).values()[0][0], np.maximum(img, 0))


def test_image_size_rejected():
    with pytest.raises(InvalidInputError):
        extract_features(np.zeros((8, 8)), ConvWeights.init(np.random.default_rng(0), (2, 2, 2, 2)))


def test_conv_weight_gradient_matches_fd():
    rng = np.random.default_rng(2)
    conv = ConvWeights.init(rng, (2, 2, 2, 2))
    img = rng.uniform(size=(16, 16))
    probes = [rng.normal(size=(2, 16 >> k, 16 >> k)) for k in range(4)]
    idx = 2  # kernel of the second level-0 convolution

    def readout(arrays, tape):
        pyr = extract_features(img, arrays)
        out = None
        for lvl, p in zip(pyr.levels, probes):
            t = ad.sum_(lvl * p)
            out = t if out is None else out + t
        return out

    def f(w):
        tape = ad.Tape()
        arrs = conv.arrays()
        vars_ = [tape.var(w if k == idx else a) for k, a in enumerate(arrs)]
        return float(readout(vars_, tape).value)

    tape = ad.Tape()
    vars_ = [tape.var(a) for a in conv.arrays()]
    g = tape.gradient(readout(vars_, tape), [vars_[idx]])[0]
    assert rel_err(g, numeric_grad(f, conv.arrays()[idx])) < 1e-4


def _const_pyramid(c, channels, res):
    return FeaturePyramid([np.full((ch, res >> k, res >> k), c) for k, ch in enumerate(channels)])


def _norm_tube():
    z = np.linspace(-15, 15, 100)
    mesh = build_tube(np.stack([np.zeros(100), 0.1 * z, z], axis=1), np.full(100, 2.0))
    return normalize_mesh(mesh)


def test_constant_pyramid_features():
    ga, gb = default_view_pair()
    mesh_n, norm = _norm_tube()
    pyr = _const_pyramid(0.7, (60, 60, 60, 60), 512)
    f = assemble_vertex_features(mesh_n, pyr, pyr, projection_from_geometry(ga), projection_from_geometry(gb), norm)
    assert f.shape == (6000, 483)
    assert np.max(np.abs(f[:, :480] - 0.7)) < 1e-15
    assert np.array_equal(f[:, 480:], mesh_n.vertices)


@settings(max_examples=10)
@given(st.lists(st.integers(1, 5), min_size=4, max_size=4))
def test_feature_width_for_any_channels(channels):
    ga, gb = default_view_pair()
    mesh_n, norm = _norm_tube()
    pyr = _const_pyramid(1.0, channels, 512)
    f = assemble_vertex_features(mesh_n, pyr, pyr, projection_from_geometry(ga), projection_from_geometry(gb), norm)
    assert f.shape[1] == 2 * sum(channels) + 3


def test_detector_shift_is_a_feature_shift():
    ga, gb = default_view_pair()
    mesh_n, norm = _norm_tube()
    ramp = np.broadcast_to(np.arange(512, dtype=float), (512, 512))
    pyr = FeaturePyramid([ramp[None] / 2 ** k for k in range(1)] +
                         [np.zeros((1, 512 >> k, 512 >> k)) for k in range(1, 4)])
    op_b = projection_from_geometry(gb)
    f0 = assemble_vertex_features(mesh_n, pyr, pyr, projection_from_geometry(ga), op_b, norm)
    f1 = assemble_vertex_features(mesh_n, pyr, pyr, projection_from_geometry(ga.with_shift((1.0, 0.0))), op_b,
                                  norm)
    assert np.allclose(f1[:, 0] - f0[:, 0], 1.0, atol=1e-9)
    assert np.array_equal(f1[:, 4:], f0[:, 4:])


def test_adjacency_small_graphs():
    a1 = normalized_adjacency((1, np.zeros((0, 2))))
    assert a1.toarray().tolist() == [[1.0]]
    a2 = normalized_adjacency((2, [[0, 1]]))
    assert np.allclose(a2.toarray(), 0.5, atol=0, rtol=1e-15)


def test_tube_adjacency_diagonal():
    adj = normalized_adjacency(build_tube(np.stack([np.zeros(100), np.zeros(100), np.arange(100.0)], 1),
                                          np.ones(100)))
    d = adj.diagonal().reshape(100, 60)
    # four neighbours plus the self-loop inside; the first and last rings lack one axial neighbour
    assert np.allclose(d[1:-1], 1 / 5)
    assert np.allclose(d[[0, -1]], 1 / 4)
    assert abs(adj - adj.T).max() < 1e-12


def _random_graph(rng, n):
    m = int(rng.integers(0, n * 3))
    e = rng.integers(0, n, size=(m, 2))
    return e[e[:, 0] != e[:, 1]]


def _dense_adj(n, edges):
    a = np.eye(n)
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return d[:, None] * a * d[None, :]


def test_gcn_layer_examples():
    adj1 = normalized_adjacency((1, np.zeros((0, 2))))
    h = np.array([[-2.0, 3.0]])
    assert np.array_equal(gcn_layer(h, adj1, np.eye(2)), np.maximum(h, 0))
    adj2 = normalized_adjacency((2, [[0, 1]]))
    assert np.allclose(gcn_layer(np.eye(2), adj2, np.eye(2)), 0.5)
    with pytest.raises(InvalidInputError):
        gcn_layer(np.eye(2), adj2, np.eye(3))


def test_gcn_layer_equals_dense_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(1, 200))
        edges = _random_graph(rng, n)
        adj = normalized_adjacency((n, edges.reshape(-1, 2)))
        dense = _dense_adj(n, edges)
        assert np.max(np.abs(adj.toarray() - dense)) < 1e-12
        h = rng.normal(size=(n, 5))
        w = rng.normal(size=(5, 4))
        for act in (True, False):
            ref = dense @ h @ w
            ref = np.maximum(ref, 0) if act else ref
            assert np.max(np.abs(gcn_layer(h, adj, w, act) - ref)) < 1e-12
        if n <= 60:
            ev = np.linalg.eigvalsh(dense)
            assert ev.min() >= -1 - 1e-9 and ev.max() <= 1 + 1e-9


def test_zero_weights_are_identity_and_topology_kept():
    mesh = toy_tube()
    feats = np.random.default_rng(0).normal(size=(len(mesh.vertices), 7))
    out = refine_mesh(mesh, feats, GcnWeights.zeros(in_dim=7, hidden=6))
    assert np.array_equal(out.vertices, mesh.vertices)
    assert out.quads is mesh.quads and np.array_equal(out.triangles, mesh.triangles)
    # the seeded init has a zero head, so it is the identity as well
    out2 = refine_mesh(mesh, feats, GcnWeights.init(np.random.default_rng(1), in_dim=7, hidden=6))
    assert np.array_equal(out2.vertices, mesh.vertices)


def test_nan_features_raise():
    mesh = toy_tube()
    feats = np.ones((len(mesh.vertices), 7))
    feats[3, 2] = np.nan
    w = GcnWeights.init(np.random.default_rng(1), in_dim=7, hidden=6)
    with pytest.raises(NumericalError, match="input layer"):
        refine_mesh(mesh, feats, w)


def test_total_loss_gradient_wrt_gcn_weights():
    rng = np.random.default_rng(11)
    mesh = toy_tube()
    gt = mesh.vertices + rng.normal(scale=0.05, size=mesh.vertices.shape)
    feats = rng.normal(size=(len(mesh.vertices), 7))
    w = GcnWeights.init(rng, in_dim=7, hidden=6)
    w = w.replace(w.arrays()[:-1] + [rng.normal(scale=0.5, size=(6, 3))])
    adj = normalized_adjacency(mesh)
    cfg = LossConfig(w_seg=0.0)

    def loss_np(arrays):
        pred = gcn_forward(feats, adj, arrays, base=mesh.vertices)
        return total_loss(pred, gt, mesh.triangles, mesh.edges, cfg=cfg)[1]["total"]

    tape = ad.Tape()
    vars_ = [tape.var(a) for a in w.arrays()]
    pred = gcn_forward(feats, adj, vars_, base=mesh.vertices)
    total, _ = total_loss(pred, gt, mesh.triangles, mesh.edges, cfg=cfg)
    grads = tape.gradient(total, vars_)
    for k, a in enumerate(w.arrays()):
        def f(x, k=k):
            arrs = list(w.arrays())
            arrs[k] = x
            return loss_np(arrs)
        assert rel_err(grads[k], numeric_grad(f, a)) < 1e-4, k


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    conv = ConvWeights.init(rng, (2, 3, 2, 1))
    gcn = GcnWeights.init(rng, in_dim=19, hidden=5)
    save_checkpoint(tmp_path / "w.bin", conv, gcn, {"seed": 3})
    c2, g2, meta = load_checkpoint(tmp_path / "w.bin")
    assert meta == {"seed": 3} and c2.channels == (2, 3, 2, 1)
    assert all(np.array_equal(a, b) for a, b in zip(conv.arrays() + gcn.arrays(), c2.arrays() + g2.arrays()))
    raw = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-8])
    with pytest.raises(InvalidInputError):
        load_checkpoint(tmp_path / "bad.bin")
