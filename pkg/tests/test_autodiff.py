import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from angiorecon import autodiff as ad
from angiorecon.errors import InvalidInputError, NumericalError
from angiorecon.optim import AdamState, adam_step, clip_global_norm, lr_schedule

from fd import numeric_grad, rel_err


def tape_grad(fn, x):
    t = ad.Tape()
    v = t.var(x)
    out = fn(v)
    return t.gradient(out, [v])[0]


def scalar(fn):
    return lambda x: float(fn(ad.Tape().var(x)).value)


def test_square_at_three():
    assert tape_grad(lambda v: ad.square(v), 3.0) == 6.0
    assert tape_grad(lambda v: v * v, 3.0) == 6.0


def test_relu_matmul_matches_fd():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(8, 8))
    x = rng.normal(size=8)
    while np.min(np.abs(w @ x)) < 1e-3:
        x = rng.normal(size=8)
    f = lambda v: ad.sum_(ad.relu(ad.matmul(w, v)))
    assert rel_err(tape_grad(f, x), numeric_grad(scalar(f), x)) < 1e-6
    g = lambda wv: ad.sum_(ad.relu(ad.matmul(wv, x)))
    assert rel_err(tape_grad(g, w), numeric_grad(scalar(g), w)) < 1e-6


def test_norm_of_normalized_has_zero_gradient():
    v = np.array([0.3, -1.2, 2.0])
    g = tape_grad(lambda x: ad.sum_(ad.l2norm(ad.normalize(x))), v)
    assert np.max(np.abs(g)) < 1e-15


SMOOTH = {
    "add": lambda x: ad.sum_(x + x * 2.0),
    "sub": lambda x: ad.sum_(1.0 - x),
    "div": lambda x: ad.sum_(x / (ad.square(x) + 1.0)),
    "sigmoid": lambda x: ad.sum_(ad.sigmoid(x) * x),
    "softplus": lambda x: ad.sum_(ad.softplus(x * 3.0)),
    "exp_log": lambda x: ad.sum_(ad.log(ad.exp(x) + 1.0)),
    "mean_axis": lambda x: ad.sum_(ad.square(ad.mean(x, axis=0))),
    "l2norm": lambda x: ad.sum_(ad.l2norm(x)),
    "normalize": lambda x: ad.sum_(ad.normalize(x) * np.array([1.0, 2.0, 3.0])),
    "cross": lambda x: ad.sum_(ad.square(ad.cross(x, x[::-1] * 1.0 + 0.5))),
    "reshape_T": lambda x: ad.sum_(ad.square(ad.transpose(ad.reshape(x, (3, 4))) @ np.ones((3, 2)))),
    "concat": lambda x: ad.sum_(ad.square(ad.concat([x, x * 2.0], axis=1))),
    "gather": lambda x: ad.sum_(ad.square(x[np.array([0, 2, 2, 3])])),
    "slice": lambda x: ad.sum_(ad.square(x[(slice(None), slice(1, 3))])),
    "scatter": lambda x: ad.sum_(ad.square(ad.scatter_add(x, np.array([1, 0, 1, 4]), 6))),
    "spmm": lambda x: ad.sum_(ad.square(ad.spmm(sp.random(5, 4, 0.5, random_state=1), x))),
}


@pytest.mark.parametrize("name", sorted(SMOOTH))
def test_smooth_primitives_match_fd(name):
    x = np.random.default_rng(abs(hash(name)) % 2**32).normal(size=(4, 3))
    f = SMOOTH[name]
    assert rel_err(tape_grad(f, x), numeric_grad(scalar(f), x)) < 1e-6


def test_clip_and_abs_away_from_kinks():
    x = np.array([-2.0, -0.5, 0.3, 1.7])
    f = lambda v: ad.sum_(ad.clip(v, -1.0, 1.0) * ad.abs_(v))
    assert rel_err(tape_grad(f, x), numeric_grad(scalar(f), x)) < 1e-6


def test_conv_and_pool_match_fd():
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    probe = rng.normal(size=(3, 3, 3))

    def f_w(wv):
        t = ad.Tape()
        return float(ad.sum_(ad.avg_pool2(ad.conv2d(t.var(img), t.var(wv), t.var(b))) * probe).value)

    t = ad.Tape()
    xi, wi, bi = t.var(img), t.var(w), t.var(b)
    out = ad.sum_(ad.avg_pool2(ad.conv2d(xi, wi, bi)) * probe)
    gx, gw, gb = t.gradient(out, [xi, wi, bi])
    assert rel_err(gw, numeric_grad(f_w, w)) < 1e-6

    def f_x(xv):
        t2 = ad.Tape()
        return float(ad.sum_(ad.avg_pool2(ad.conv2d(t2.var(xv), t2.var(w), t2.var(b))) * probe).value)

    assert rel_err(gx, numeric_grad(f_x, img)) < 1e-6
    # every output pixel feeds one pooled cell with weight 1/4, four pixels per cell
    assert np.allclose(gb, probe.sum(axis=(1, 2)))


def test_bilinear_exact_and_midpoint():
    fmap = np.arange(12, dtype=float).reshape(1, 3, 4)
    t = ad.Tape()
    m = t.const(fmap)
    assert ad.bilinear_sample(m, np.array([2.0]), np.array([1.0])).value[0, 0] == fmap[0, 1, 2]
    mid = ad.bilinear_sample(m, np.array([1.5]), np.array([2.0])).value[0, 0]
    assert mid == (fmap[0, 2, 1] + fmap[0, 2, 2]) / 2
    # border clamp
    assert ad.bilinear_sample(m, np.array([-3.0]), np.array([9.0])).value[0, 0] == fmap[0, 2, 0]


def test_bilinear_coordinate_gradients_match_fd():
    rng = np.random.default_rng(5)
    fmap = rng.normal(size=(2, 12, 14))
    u = rng.uniform(0.1, 12.9, size=100)
    v = rng.uniform(0.1, 10.9, size=100)
    # keep samples away from texel edges where the interpolant has a kink
    u = np.where(np.abs(u - np.round(u)) < 1e-3, u + 0.01, u)
    v = np.where(np.abs(v - np.round(v)) < 1e-3, v + 0.01, v)
    probe = rng.normal(size=(100, 2))
    t = ad.Tape()
    uv_, vv_, fv = t.var(u), t.var(v), t.var(fmap)
    out = ad.sum_(ad.bilinear_sample(fv, uv_, vv_) * probe)
    gu, gv, gf = t.gradient(out, [uv_, vv_, fv])

    def ev(uu, vv, ff):
        mat, _ = ad.bilinear_weights(12, 14, uu, vv)
        return float((mat @ ff.reshape(2, -1).T * probe).sum())

    assert rel_err(gu, numeric_grad(lambda x: ev(x, v, fmap), u)) < 1e-6
    assert rel_err(gv, numeric_grad(lambda x: ev(u, x, fmap), v)) < 1e-6
    assert rel_err(gf, numeric_grad(lambda x: ev(u, v, x), fmap)) < 1e-6


@given(st.permutations(list(range(7))))
def test_sum_gradient_is_permutation_invariant(perm):
    x = np.linspace(-1, 1, 7)
    g1 = tape_grad(lambda v: ad.sum_(ad.square(v)), x)
    g2 = tape_grad(lambda v: ad.sum_(ad.square(v[np.array(perm)])), x)
    assert np.array_equal(g1, g2)


def test_non_scalar_output_and_unsupported_ops():
    t = ad.Tape()
    v = t.var(np.ones(3))
    with pytest.raises(InvalidInputError):
        t.gradient(v * 2.0, [v])
    with pytest.raises(InvalidInputError):
        t.record("fft", np.ones(3), [v], lambda g, n: [g])
    with pytest.raises(TypeError):
        np.exp(v)


def test_check_finite():
    t = ad.Tape()
    with pytest.raises(NumericalError):
        ad.check_finite(t.var(np.array([1.0, np.nan])), "here")


def test_release_clears_record():
    t = ad.Tape()
    v = t.var(2.0)
    out = ad.square(v)
    assert t.gradient(out, [v])[0] == 4.0
    t.release()
    assert len(t) == 0


# ---------------------------------------------------------------------------
# Adam and schedules


def test_lr_schedule():
    assert lr_schedule(0) == 0.001
    assert lr_schedule(1, decay=0.99) == pytest.approx(0.00099, rel=1e-15)
    assert lr_schedule(100, decay=0.96) == pytest.approx(0.001 * 0.96 ** 100, rel=1e-12)


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    fresh = AdamState.for_params(p)
    out, _ = adam_step(p, [np.zeros(2)], fresh)
    assert np.array_equal(out[0], p[0])
    # after a real step the moments decay geometrically under zero gradients
    st_ = AdamState.for_params(p)
    adam_step(p, [np.array([0.5, -1.0])], st_)
    m, v = st_.m[0].copy(), st_.v[0].copy()
    adam_step(p, [np.zeros(2)], st_)
    assert np.allclose(st_.m[0], 0.9 * m) and np.allclose(st_.v[0], 0.999 * v)


def test_adam_first_step_is_sign_step():
    p = [np.array([1.0, -2.0, 0.5])]
    g = [np.array([3.0, -0.01, 200.0])]
    st_ = AdamState.for_params(p, lr=0.001)
    out, _ = adam_step(p, g, st_)
    step = (out[0] - p[0]) / 0.001
    # bias-corrected m/sqrt(v) = g/|g| up to epsilon
    assert np.allclose(step, -np.sign(g[0]), atol=1e-5)


def test_adam_mirror_symmetry_and_zero_lr():
    g = np.array([0.3, -1.0, 2.0])
    a, b = [np.zeros(3)], [np.zeros(3)]
    sa, sb = AdamState.for_params(a), AdamState.for_params(b)
    for _ in range(2):
        a, _ = adam_step(a, [g], sa)
        b, _ = adam_step(b, [-g], sb)
    assert np.array_equal(a[0], -b[0])
    p = [np.array([1.0, 2.0])]
    s0 = AdamState.for_params(p, lr=0.0)
    assert np.array_equal(adam_step(p, [np.ones(2)], s0)[0][0], p[0])


def test_adam_nan_names_block():
    p = [np.zeros(2), np.zeros(2)]
    with pytest.raises(NumericalError, match="second"):
        adam_step(p, [np.zeros(2), np.array([np.nan, 0.0])], AdamState.for_params(p), names=["first", "second"])


def test_clip_global_norm():
    g = [np.array([3.0, 0.0]), np.array([0.0, 4.0])]
    clipped, norm = clip_global_norm(g, 1.0)
    assert norm == 5.0
    assert np.linalg.norm(np.concatenate(clipped)) == pytest.approx(1.0)
    same, _ = clip_global_norm(g, 10.0)
    assert all(np.array_equal(a, b) for a, b in zip(same, g))
