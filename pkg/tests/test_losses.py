import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from angiorecon import autodiff as ad
from angiorecon.errors import InvalidInputError, NumericalError
from angiorecon.losses import (LossConfig, bce_dice_loss, breakdown_line, edge_loss, laplacian, laplacian_loss,
                               mse_loss, normal_loss, soft_silhouette, total_loss, vertex_normals)
from angiorecon.mesh import build_tube

from fd import numeric_grad, rel_err


def toy_tube(n_rings=5, n_slots=8, seed=None):
    z = np.linspace(0, 4, n_rings)
    pts = np.stack([0.3 * np.sin(z), 0.2 * z, z], axis=1)
    m = build_tube(pts, np.linspace(0.8, 1.2, n_rings), n_slots)
    if seed is not None:
        m = m.with_vertices(m.vertices + np.random.default_rng(seed).normal(scale=0.05, size=m.vertices.shape))
    return m


def straight_unit(d=0.5):
    z = np.arange(100) * d
    return build_tube(np.stack([np.zeros(100), np.zeros(100), z], axis=1), np.ones(100))


# ---------------------------------------------------------------------------
# pointwise losses against loop oracles


def test_mse_examples_and_loop_oracle():
    x = np.random.default_rng(0).normal(size=(10, 3))
    assert mse_loss(x, x) == 0.0
    assert mse_loss(np.array([[1.0, 0, 0]]), np.zeros((1, 3))) == 1.0
    y = np.random.default_rng(1).normal(size=(10, 3))
    loop = 0.0
    for i in range(10):
        loop += sum((x[i, k] - y[i, k]) ** 2 for k in range(3))
    assert abs(mse_loss(x, y) - loop / 10) < 1e-15
    with pytest.raises(InvalidInputError):
        mse_loss(x, y[:9])


def test_cylinder_normals_are_radial():
    m = build_tube(np.stack([np.zeros(100), np.zeros(100), np.linspace(0, 30, 100)], 1), np.ones(100))
    n = vertex_normals(m.vertices, m.triangles).reshape(100, 60, 3)[1:-1]
    assert np.max(np.abs(n[..., 2])) < 0.05
    radial = m.rings()[1:-1].copy()
    radial[..., 2] = 0
    assert np.min(np.abs(np.einsum("ijk,ijk->ij", n, radial))) > 0.99


def test_flat_fan_normal_and_winding_flip():
    v = np.array([[0, 0, 0], [1, 0, 0], [0.5, 1, 0], [-0.7, 0.6, 0], [-0.2, -1, 0]], dtype=float)
    t = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1]])
    n = vertex_normals(v, t)
    assert np.array_equal(n[0], [0.0, 0.0, 1.0])
    assert np.array_equal(vertex_normals(v, t[:, ::-1])[0], [0.0, 0.0, -1.0])


def test_degenerate_normal():
    v = np.zeros((3, 3))
    with pytest.raises(NumericalError):
        vertex_normals(v, np.array([[0, 1, 2]]))


def _normals_loop(v, tris):
    out = []
    for i in range(len(v)):
        acc = np.zeros(3)
        k = 0
        for a, b, c in tris:
            if i in (a, b, c):
                f = np.cross(v[b] - v[a], v[c] - v[a])
                acc += f / np.linalg.norm(f)
                k += 1
        acc /= k
        out.append(acc / np.linalg.norm(acc))
    return np.array(out)


def test_normal_loss_examples_and_loop():
    a = toy_tube()
    assert 0.0 <= normal_loss(a.vertices, a.vertices, a.triangles) < 1e-15
    b = toy_tube(seed=4)
    na = _normals_loop(b.vertices, b.triangles)
    nb = _normals_loop(a.vertices, a.triangles)
    loop = np.mean([1 - abs(np.dot(na[i], nb[i])) for i in range(len(na))])
    assert abs(normal_loss(b.vertices, a.vertices, a.triangles) - loop) < 1e-15
    # a flat patch in xy against the same patch in xz: normals orthogonal everywhere
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    w = v[:, [0, 2, 1]]
    assert normal_loss(v, w, np.array([[0, 1, 2]])) == 1.0


def test_edge_loss_examples():
    assert edge_loss(np.zeros((3, 3)), np.array([[0, 1], [1, 2]])) == 0.0
    assert edge_loss(np.array([[0, 0, 0], [2.0, 0, 0]]), np.array([[0, 1]])) == 4.0
    d = 0.5
    m = straight_unit(d)
    expected = (6000 * (2 * math.sin(math.pi / 60)) ** 2 + 5940 * d * d) / 11940
    direct = sum(float(np.sum((m.vertices[i] - m.vertices[j]) ** 2)) for i, j in m.edges) / len(m.edges)
    assert edge_loss(m.vertices, m.edges) == pytest.approx(expected, rel=1e-12)
    assert direct == pytest.approx(expected, rel=1e-12)


def test_laplacian_examples():
    v = np.array([[1.0, 0, 0], [0, 0, 0], [0, 0, 0]])
    assert np.array_equal(laplacian(v, np.array([[0, 1], [0, 2]]), 0), [1.0, 0, 0])
    c = np.array([[0.5, 0.5, 0], [0, 0, 0], [1, 1, 0]])
    assert np.allclose(laplacian(c, np.array([[0, 1], [0, 2]]), 0), 0)
    with pytest.raises(InvalidInputError):
        laplacian(v, np.array([[1, 2]]), 0)
    m = toy_tube(seed=1)
    n_slots = 8
    vid = 2 * n_slots + 3
    nb = [vid - 1, vid + 1, vid - n_slots, vid + n_slots]
    hand = m.vertices[vid] - m.vertices[nb].mean(axis=0)
    assert np.allclose(laplacian(m.vertices, m.edges, vid), hand, atol=1e-15)


def test_laplacian_loss_examples_and_loop():
    a, b = toy_tube(), toy_tube(seed=2)
    assert laplacian_loss(a.vertices, a.vertices, a.edges) == 0.0
    assert laplacian_loss(a.vertices + [3.0, -1.0, 2.0], a.vertices, a.edges) < 1e-28
    loop = np.mean([np.sum((laplacian(b.vertices, a.edges, i) - laplacian(a.vertices, a.edges, i)) ** 2)
                    for i in range(len(a.vertices))])
    assert abs(laplacian_loss(b.vertices, a.vertices, a.edges) - loop) < 1e-15
    with pytest.raises(InvalidInputError):
        laplacian_loss(b.vertices[:-1], a.vertices, a.edges)


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_translation_invariance(shift):
    a, b = toy_tube(), toy_tube(seed=3)
    s = np.array(shift)
    assert laplacian_loss(b.vertices + s, a.vertices, a.edges) == pytest.approx(
        laplacian_loss(b.vertices, a.vertices, a.edges), rel=1e-6, abs=1e-12)
    assert edge_loss(b.vertices + s, b.edges) == pytest.approx(edge_loss(b.vertices, b.edges), rel=1e-9)
    if np.linalg.norm(s) > 1e-3:
        assert mse_loss(b.vertices + s, b.vertices) > 0


def test_bce_dice_examples():
    g = (np.random.default_rng(0).uniform(size=(16, 16)) > 0.5).astype(float)
    assert bce_dice_loss(np.where(g > 0, 1.0, 0.0), g) < 1e-5
    p = np.full(g.shape, 0.5)
    bce = -np.mean(g * np.log(p) + (1 - g) * np.log(1 - p))
    assert bce == pytest.approx(math.log(2), rel=1e-15)
    dice = (2 * (p * g).sum() + 1e-6) / (p.sum() + g.sum() + 1e-6)
    assert bce_dice_loss(p, g) == pytest.approx(math.log(2) + 1 - dice, rel=1e-12)
    with pytest.raises(InvalidInputError):
        bce_dice_loss(p[:3], g)


def test_bce_dice_gradient():
    rng = np.random.default_rng(1)
    g = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
    p = rng.uniform(0.05, 0.95, size=(8, 8))
    t = ad.Tape()
    v = t.var(p)
    grad = t.gradient(bce_dice_loss(v, g), [v])[0]
    assert rel_err(grad, numeric_grad(lambda x: bce_dice_loss(x, g), p)) < 1e-5


# ---------------------------------------------------------------------------
# soft rasterizer


BIG = np.array([[0.05, 0.05], [0.95, 0.1], [0.5, 0.95]])
TRI = np.array([[0, 1, 2]])


def test_deep_inside_saturates():
    sil = soft_silhouette(BIG, TRI, 1e-4, 64)
    # pixel center (u, v) = ((j + 0.5) / 64, (i + 0.5) / 64); the centroid is deep inside
    assert 1 - sil[int(0.37 * 64), int(0.5 * 64)] < 1e-6
    assert np.all((sil >= 0) & (sil <= 1))
    assert sil[0, -1] < 1e-6


def test_pixel_on_edge_is_half():
    # horizontal edge exactly on the pixel-center row v = 8.5 / 16
    y = 8.5 / 16
    xy = np.array([[0.1, y], [0.9, y], [0.5, 0.95]])
    sil = soft_silhouette(xy, TRI, 1e-4, 16)
    assert sil[8, 8] == pytest.approx(0.5, abs=1e-12)


def test_sharper_sigma_is_closer_to_binary():
    soft = soft_silhouette(BIG, TRI, 1e-2, 64)
    sharp = soft_silhouette(BIG, TRI, 1e-4, 64)
    dist = lambda s: np.minimum(s, 1 - s)
    far = dist(sharp) < 0.49
    assert np.all(dist(sharp)[far] <= dist(soft)[far] + 1e-15)


def test_empty_projection_warns():
    with pytest.warns(RuntimeWarning):
        sil = soft_silhouette(np.zeros((3, 2)), TRI, 1e-4, 8)
    assert np.all(sil == 0)


def test_silhouette_gradient_at_random_pixels():
    rng = np.random.default_rng(5)
    m = toy_tube()
    xy = m.vertices[:, :2] * 0.12 + np.array([0.45, 0.2])
    pix = rng.integers(0, 32, size=(20, 2))
    sigma = 1e-2
    base = soft_silhouette(xy, m.triangles, sigma, 32)
    # keep pixels where the silhouette is not saturated
    pix = np.array([p for p in np.argwhere((base > 1e-3) & (base < 1 - 1e-3))[rng.permutation(400)[:20] % max(
        1, len(np.argwhere((base > 1e-3) & (base < 1 - 1e-3))))]])
    weights = np.zeros((32, 32))
    weights[pix[:, 0], pix[:, 1]] = rng.normal(size=len(pix))
    t = ad.Tape()
    v = t.var(xy)
    g = t.gradient(ad.sum_(soft_silhouette(v, m.triangles, sigma, 32) * weights), [v])[0]
    num = numeric_grad(lambda x: float((soft_silhouette(x, m.triangles, sigma, 32) * weights).sum()), xy, h=1e-6)
    assert rel_err(g, num) < 1e-3


# ---------------------------------------------------------------------------
# total loss


def test_fixed_point_is_edge_term():
    gt = toy_tube()
    sil = np.where(np.arange(64)[:, None] < 32, 1 - 1e-9, 1e-9) * np.ones((1, 64))
    mask = (sil > 0.5).astype(float)
    total, br = total_loss(gt.vertices, gt.vertices, gt.triangles, gt.edges, [sil], [mask])
    assert br["mse"] == 0 and 0 <= br["norm"] < 1e-15 and br["lap"] == 0
    assert br["seg"] < 1e-5
    assert total == pytest.approx(2.5 * edge_loss(gt.vertices, gt.edges) + 0.0002 * br["seg"], rel=1e-12)
    assert total == pytest.approx(2.5 * edge_loss(gt.vertices, gt.edges), rel=1e-5)


def test_mse_only_weights():
    a, b = toy_tube(), toy_tube(seed=6)
    cfg = LossConfig(w_norm=0, w_edge=0, w_lap=0, w_seg=0)
    total, _ = total_loss(b.vertices, a.vertices, a.triangles, a.edges, cfg=cfg)
    assert total == mse_loss(b.vertices, a.vertices)


def test_recombination_and_breakdown(tmp_path):
    a, b = toy_tube(), toy_tube(seed=7)
    cfg = LossConfig()
    sil = soft_silhouette(b.vertices[:, :2] * 0.1 + 0.4, b.triangles, cfg.raster_sigma, 32)
    mask = (soft_silhouette(a.vertices[:, :2] * 0.1 + 0.4, a.triangles, cfg.raster_sigma, 32) > 0.5) * 1.0
    total, br = total_loss(b.vertices, a.vertices, a.triangles, a.edges, [sil, sil], [mask, mask], cfg)
    hand = (mse_loss(b.vertices, a.vertices) + 0.01 * normal_loss(b.vertices, a.vertices, a.triangles)
            + 2.5 * edge_loss(b.vertices, a.edges) + 100 * laplacian_loss(b.vertices, a.vertices, a.edges)
            + 0.0002 * bce_dice_loss(sil, mask))
    assert abs(total - hand) < 1e-12
    rec = breakdown_line(3, br)
    assert '"epoch": 3' in rec and '"total"' in rec


def test_relative_edge_needs_init():
    a = toy_tube()
    with pytest.raises(InvalidInputError):
        total_loss(a.vertices, a.vertices, a.triangles, a.edges, cfg=LossConfig(edge_relative=True))
    _, br = total_loss(a.vertices, a.vertices, a.triangles, a.edges, cfg=LossConfig(edge_relative=True),
                       init=a.vertices)
    assert 0.0 <= br["total"] < 1e-16


def test_config_validation():
    with pytest.raises(InvalidInputError):
        LossConfig(w_edge=-1)
    with pytest.raises(InvalidInputError):
        LossConfig(raster_sigma=0)


@pytest.mark.parametrize("edge_relative", [False, True])
def test_full_chain_vertex_gradient(edge_relative):
    a, b = toy_tube(), toy_tube(seed=8)
    cfg = LossConfig(w_seg=0.0, edge_relative=edge_relative)
    init = a.vertices

    def f(x):
        return total_loss(x, a.vertices, a.triangles, a.edges, cfg=cfg, init=init)[1]["total"]

    t = ad.Tape()
    v = t.var(b.vertices)
    total, _ = total_loss(v, a.vertices, a.triangles, a.edges, cfg=cfg, init=init)
    g = t.gradient(total, [v])[0]
    assert rel_err(g, numeric_grad(f, b.vertices)) < 1e-4


def test_full_chain_with_raster_term():
    a, b = toy_tube(), toy_tube(seed=9)
    cfg = LossConfig(w_seg=1.0, raster_sigma=1e-2, raster_resolution=24)
    to_xy = lambda x: x[:, :2] * 0.12 + np.array([0.45, 0.2])
    mask = (soft_silhouette(to_xy(a.vertices), a.triangles, 1e-4, 24) > 0.5).astype(float)

    def f(x):
        sil = soft_silhouette(to_xy(x), a.triangles, cfg.raster_sigma, 24)
        return total_loss(x, a.vertices, a.triangles, a.edges, [sil], [mask], cfg)[1]["total"]

    t = ad.Tape()
    v = t.var(b.vertices)
    xy = ad.matmul(v, np.array([[0.12, 0], [0, 0.12], [0, 0]])) + np.array([0.45, 0.2])
    sil = soft_silhouette(xy, a.triangles, cfg.raster_sigma, 24)
    total, _ = total_loss(v, a.vertices, a.triangles, a.edges, [sil], [mask], cfg)
    g = t.gradient(total, [v])[0]
    assert rel_err(g, numeric_grad(f, b.vertices)) < 1e-3
