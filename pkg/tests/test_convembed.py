import numpy as np
import pytest

from glmnet import diffcore as dc
from glmnet.config import TrainConfig
from glmnet.convembed import (
    EmbeddingPair,
    LayerParams,
    coaffinity,
    cross_graph_layer,
    embed,
    forward_pipeline,
    init_params,
    sharpening_layer,
    smoothing_layer,
)
from glmnet.datasynth import SynthConfig, generate_pair
from glmnet.errors import ContractError, DimensionError


def const(a):
    return dc.constant(np.asarray(a, dtype=np.float64))


def pair_of(x, y=None):
    return EmbeddingPair(const(x), const(x if y is None else y))


def test_smoothing_small_gamma_limit():
    rng = np.random.default_rng(0)
    e = rng.normal(size=(4, 3))
    tn, te = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    params = LayerParams(theta_n=const(tn), theta_e=const(te))
    out = smoothing_layer(pair_of(e), params, gamma=1e-9)
    np.testing.assert_allclose(out.x.value, np.maximum(e @ tn, 0.0), atol=1e-6)


@pytest.mark.parametrize("layer,coef", [(smoothing_layer, 0.5), (sharpening_layer, 0.75)])
def test_identity_support_fixed_point(layer, coef):
    e = np.abs(np.random.default_rng(1).normal(size=(4, 4)))
    params = LayerParams(theta_n=const(np.eye(4)), theta_e=const(np.eye(4)))
    out = layer(pair_of(e), params, coef, supports=(np.eye(4), np.eye(4)))
    np.testing.assert_allclose(out.x.value, e, atol=1e-14)
    np.testing.assert_allclose(out.y.value, e, atol=1e-14)


def test_smoothing_matches_dense_formula():
    rng = np.random.default_rng(2)
    e = rng.normal(size=(5, 3))
    tn, te = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    sup = (rng.uniform(size=(5, 5)) < 0.5) + np.eye(5)
    a = sup / sup.sum(axis=1, keepdims=True)
    params = LayerParams(theta_n=const(tn), theta_e=const(te))
    out = smoothing_layer(pair_of(e), params, 0.3, supports=(sup, sup))
    np.testing.assert_allclose(out.x.value, np.maximum(0.7 * e @ tn + 0.3 * a @ e @ te, 0.0), rtol=1e-12)
    sharp = sharpening_layer(pair_of(e), params, 0.3, supports=(sup, sup))
    np.testing.assert_allclose(sharp.x.value, np.maximum(1.3 * e @ tn - 0.3 * a @ e @ te, 0.0), rtol=1e-12)


def test_gamma_range_checked():
    params = LayerParams(theta_n=const(np.eye(2)), theta_e=const(np.eye(2)))
    with pytest.raises(ContractError):
        smoothing_layer(pair_of(np.ones((2, 2))), params, gamma=1.0)
    with pytest.raises(ContractError):
        sharpening_layer(pair_of(np.ones((2, 2))), params, gamma_s=0.0)


def test_coaffinity_zero_w_uniform():
    rng = np.random.default_rng(3)
    c_xy, c_yx = coaffinity(pair_of(rng.normal(size=(3, 4)), rng.normal(size=(5, 4))), const(np.zeros((4, 4))), 2.0)
    np.testing.assert_allclose(c_xy.value, np.full((3, 5), 0.2))
    np.testing.assert_allclose(c_yx.value, np.full((5, 3), 1 / 3))


def test_coaffinity_orthonormal_diagonal_dominant():
    q, _ = np.linalg.qr(np.random.default_rng(4).normal(size=(3, 3)))
    delta = 2.0
    c_xy, _ = coaffinity(pair_of(q), const(delta * np.eye(3)), delta)
    # X W Y^T / delta = I, so each row is softmax of a unit vector
    e = np.e
    np.testing.assert_allclose(np.diag(c_xy.value), e / (e + 2), rtol=1e-12)
    assert (c_xy.value.argmax(axis=1) == np.arange(3)).all()


def test_coaffinity_width_mismatch():
    with pytest.raises(DimensionError):
        coaffinity(pair_of(np.ones((2, 3)), np.ones((2, 4))), const(np.eye(3)), 1.0)


def test_cross_layer_passthrough():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    select_self = np.vstack([np.zeros((2, 2)), np.eye(2)])
    params = LayerParams(w=const(rng.normal(size=(2, 2))), theta_xy=const(select_self), theta_yx=const(select_self))
    out = cross_graph_layer(pair_of(x, y), params, 1.0)
    np.testing.assert_allclose(out.x.value, x)
    np.testing.assert_allclose(out.y.value, y)


def test_cross_layer_singleton():
    rng = np.random.default_rng(6)
    x, y = rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
    t = rng.normal(size=(4, 3))
    params = LayerParams(w=const(rng.normal(size=(2, 2))), theta_xy=const(t), theta_yx=const(t))
    c_xy, _ = coaffinity(pair_of(x, y), params.w, 1.0)
    np.testing.assert_array_equal(c_xy.value, [[1.0]])
    out = cross_graph_layer(pair_of(x, y), params, 1.0)
    np.testing.assert_allclose(out.x.value, np.concatenate([y, x], axis=1) @ t)


def _small_config(**kw):
    return TrainConfig(widths=(16, 16, 16), **kw)


def test_pipeline_shapes_and_finite():
    rng = np.random.default_rng(7)
    cfg = _small_config()
    store = init_params(8, cfg)
    emb = embed(rng.normal(size=(5, 8)), rng.normal(size=(5, 8)), store.constants(), cfg)
    assert emb.x.shape == (5, 16) and emb.y.shape == (5, 16)
    assert np.isfinite(emb.x.value).all() and np.isfinite(emb.y.value).all()


def test_pipeline_rectangular_with_supports():
    pair = generate_pair(SynthConfig(n_inliers=6, n_outliers=2, knn_k=3, feature_dim=8), 0)
    cfg = _small_config()
    emb = forward_pipeline(pair, init_params(8, cfg).constants(), cfg)
    assert emb.x.shape == (8, 16) and emb.y.shape == (8, 16)


@pytest.mark.parametrize("sharpening", [True, False])
def test_pipeline_symmetry(sharpening):
    x = np.random.default_rng(8).normal(size=(5, 8))
    cfg = _small_config(sharpening=sharpening)
    store = init_params(8, cfg)
    # cross weights shared between directions so the two sides see the same map
    store.values["cross.theta_yx"] = store.values["cross.theta_xy"]
    store.values["cross.w"] = store.values["cross.w"] + store.values["cross.w"].T
    emb = embed(x, x, store.constants(), cfg)
    np.testing.assert_allclose(emb.x.value, emb.y.value, rtol=1e-12)


def test_pipeline_width_mismatch():
    cfg = _small_config()
    with pytest.raises(DimensionError):
        embed(np.ones((3, 7)), np.ones((3, 7)), init_params(8, cfg).constants(), cfg)


def test_init_params_layout():
    cfg = _small_config()
    store = init_params(8, cfg)
    assert store.values["layer1.theta_n"].shape == (8, 16)
    assert store.values["layer1.graph"].shape == (16, 1)
    assert store.values["cross.theta_xy"].shape == (32, 16)
    assert store.values["layer3.graph"].shape == (32, 1)
    assert store.values["affinity.m"].shape == (16, 16)
    unshared = init_params(8, cfg.replace(share_graph_theta=False))
    assert {"layer1.graph_x", "layer1.graph_y"} <= set(unshared.names)
    off = init_params(8, cfg.replace(graph_learning=False))
    assert not any("graph" in n for n in off.names)


def test_init_params_deterministic():
    cfg = _small_config(seed=3)
    a, b = init_params(8, cfg), init_params(8, cfg)
    for name in a.names:
        np.testing.assert_array_equal(a.values[name], b.values[name])


def test_smoothing_preserves_consensus():
    rng = np.random.default_rng(9)
    e = np.repeat(rng.normal(size=(1, 3)), 4, axis=0)
    params = LayerParams(theta_n=const(rng.normal(size=(3, 5))), theta_e=const(rng.normal(size=(3, 5))))
    out = smoothing_layer(pair_of(e), params, 0.5, supports=(np.ones((4, 4)), np.ones((4, 4)))).x.value
    np.testing.assert_allclose(out, np.repeat(out[:1], 4, axis=0), atol=1e-14)


def test_sharpening_row_mean_with_uniform_graph():
    rng = np.random.default_rng(10)
    e = rng.normal(size=(6, 3))
    tn, te = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    a = np.full((6, 6), 1 / 6)
    pre = 1.75 * e @ tn - 0.75 * a @ e @ te
    mean = e.mean(axis=0, keepdims=True)
    np.testing.assert_allclose(pre.mean(axis=0, keepdims=True), 1.75 * mean @ tn - 0.75 * mean @ te, atol=1e-12)
    params = LayerParams(theta_n=const(tn), theta_e=const(te))
    out = sharpening_layer(pair_of(e), params, 0.75, supports=(np.ones((6, 6)), np.ones((6, 6)))).x.value
    np.testing.assert_allclose(out, np.maximum(pre, 0.0), atol=1e-12)


def test_cross_aggregation_in_convex_hull():
    rng = np.random.default_rng(11)
    x, y = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
    c_xy, _ = coaffinity(pair_of(x, y), const(rng.normal(size=(3, 3))), 1.0)
    agg = c_xy.value @ y
    assert (c_xy.value >= 0).all()
    np.testing.assert_allclose(c_xy.value.sum(axis=1), 1.0, atol=1e-12)
    assert (agg <= y.max(axis=0) + 1e-12).all() and (agg >= y.min(axis=0) - 1e-12).all()


def test_cross_layer_swap_symmetry():
    rng = np.random.default_rng(12)
    x, y = rng.normal(size=(3, 2)), rng.normal(size=(5, 2))
    w = rng.normal(size=(2, 2))
    txy, tyx = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    out = cross_graph_layer(pair_of(x, y), LayerParams(w=const(w), theta_xy=const(txy), theta_yx=const(tyx)), 1.3)
    # swapping the graphs also transposes the bilinear score, hence W^T
    swapped = cross_graph_layer(pair_of(y, x), LayerParams(w=const(w.T), theta_xy=const(tyx), theta_yx=const(txy)), 1.3)
    np.testing.assert_allclose(out.x.value, swapped.y.value, atol=1e-14)
    np.testing.assert_allclose(out.y.value, swapped.x.value, atol=1e-14)


@pytest.mark.parametrize("sharpening", [True, False])
def test_pipeline_gradient_check(sharpening):
    pair = generate_pair(SynthConfig(n_inliers=4, n_outliers=1, knn_k=2, feature_dim=5, seed=2), 0)
    cfg = TrainConfig(widths=(6, 6, 6), graph_theta_scale=1.0, sharpening=sharpening)
    store = init_params(5, cfg)

    def forward(p):
        emb = forward_pipeline(pair, p, cfg)
        return dc.sum(dc.square(dc.concat_cols(dc.transpose(emb.x), dc.transpose(emb.y))))

    rep = dc.grad_check(forward, store, tol=1e-4)
    assert rep.passed, rep.lines()
