import math

import numpy as np
import pytest

from mxml.gradcheck import check_gradients
from mxml.tensor import Tensor, no_grad
from mxml.wpn import (
    ClassGaussian,
    WpnParams,
    class_gaussians,
    encode_class_distribution,
    encode_query_latent,
    kl_diag_gaussian,
    load_wpn,
    pairwise_kl_term,
    query_density_term,
    save_wpn,
    wpn_score,
)


def _unit(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _gauss(mu, lv):
    return ClassGaussian(Tensor(np.atleast_1d(np.asarray(mu, float))), Tensor(np.atleast_1d(np.asarray(lv, float))))


def _score(theta, support, query, transductive=True):
    with no_grad():
        return float(wpn_score(theta, support, query, transductive).data)


def test_zero_init_gives_standard_normal():
    theta = WpnParams(8, 4, zero=True)
    g = encode_class_distribution(theta, _unit(np.random.default_rng(0), 3, 8))
    np.testing.assert_array_equal(g.mu.data, 0.0)
    np.testing.assert_array_equal(g.log_var.data, 0.0)


def test_class_encoding_pools_the_group():
    theta = WpnParams(8, 4, rng=np.random.default_rng(1))
    h = _unit(np.random.default_rng(2), 8)
    one = encode_class_distribution(theta, h[None])
    many = encode_class_distribution(theta, np.repeat(h[None], 5, axis=0))
    np.testing.assert_allclose(many.mu.data, one.mu.data, atol=1e-15)
    np.testing.assert_allclose(many.log_var.data, one.log_var.data, atol=1e-15)
    group = _unit(np.random.default_rng(3), 5, 8)
    a = encode_class_distribution(theta, group)
    b = encode_class_distribution(theta, group[::-1])
    np.testing.assert_allclose(a.mu.data, b.mu.data, atol=1e-12)
    np.testing.assert_allclose(a.log_var.data, b.log_var.data, atol=1e-12)


def test_log_var_is_clamped():
    theta = WpnParams(2, 1, zero=True)
    theta.class_b.data = np.array([0.0, 1e3])
    mu, lv = class_gaussians(theta, np.ones((1, 1, 2)))
    assert lv.data[0, 0] == pytest.approx(math.log(1e6))


def test_query_projection_is_linear():
    theta = WpnParams(6, 3, rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal(6), rng.standard_normal(6)
    lhs = encode_query_latent(theta, 2.0 * a + 3.0 * b).data
    rhs = 2.0 * encode_query_latent(theta, a).data + 3.0 * encode_query_latent(theta, b).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_kl_identity_and_hand_value():
    p = _gauss([0.3, -1.0], [0.2, -0.5])
    assert float(kl_diag_gaussian(p, p).data) == 0.0
    assert float(kl_diag_gaussian(_gauss(1.0, 0.0), _gauss(0.0, 0.0)).data) == 0.5


def test_kl_gibbs_inequality():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        d = rng.integers(1, 9)
        p = _gauss(rng.normal(size=d), rng.normal(size=d))
        q = _gauss(rng.normal(size=d), rng.normal(size=d))
        assert float(kl_diag_gaussian(p, q).data) >= 0.0


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    d = 3
    mp, lp, mq, lq = rng.normal(size=d), 0.5 * rng.normal(size=d), rng.normal(size=d), 0.5 * rng.normal(size=d)
    x = mp + np.exp(0.5 * lp) * rng.standard_normal((10**6, d))

    def logpdf(x, m, lv):
        return -0.5 * np.sum(np.log(2 * np.pi) + lv + (x - m) ** 2 / np.exp(lv), axis=1)

    mc = np.mean(logpdf(x, mp, lp) - logpdf(x, mq, lq))
    closed = float(kl_diag_gaussian(_gauss(mp, lp), _gauss(mq, lq)).data)
    assert abs(mc - closed) < 0.01


def test_pairwise_term_cases():
    same = [_gauss([0.5, 0.5], [0.1, 0.1]) for _ in range(4)]
    assert float(pairwise_kl_term(same).data) == 0.0
    g1, g2 = _gauss([0.0, 1.0], [0.0, 0.3]), _gauss([1.0, -1.0], [0.5, -0.2])
    a, b = float(kl_diag_gaussian(g1, g2).data), float(kl_diag_gaussian(g2, g1).data)
    assert float(pairwise_kl_term([g1, g2]).data) == pytest.approx((a + b) / 4, abs=1e-12)
    rng = np.random.default_rng(0)
    gs = [_gauss(rng.normal(size=3), rng.normal(size=3)) for _ in range(5)]
    perm = [gs[i] for i in (3, 0, 4, 2, 1)]
    assert float(pairwise_kl_term(gs).data) == pytest.approx(float(pairwise_kl_term(perm).data), abs=1e-12)


def test_pairwise_term_agrees_with_elementwise_kl():
    rng = np.random.default_rng(4)
    gs = [_gauss(rng.normal(size=4), rng.normal(size=4)) for _ in range(4)]
    brute = sum(float(kl_diag_gaussian(p, q).data) for p in gs for q in gs) / 16
    assert float(pairwise_kl_term(gs).data) == pytest.approx(brute, abs=1e-12)


def test_density_term_single_gaussian_and_hand_value():
    rng = np.random.default_rng(0)
    g = _gauss(rng.normal(size=2), rng.normal(size=2))
    z = rng.normal(size=(3, 2))
    var = np.exp(g.log_var.data)
    exact = np.sum(-0.5 * np.sum(np.log(2 * np.pi * var) + (z - g.mu.data) ** 2 / var, axis=1))
    assert float(query_density_term(z, [g]).data) == pytest.approx(exact, abs=1e-12)

    near, far = _gauss(0.0, 0.0), _gauss(100.0, 0.0)
    value = float(query_density_term(np.array([[0.0]]), [near, far]).data)
    assert value == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-9)
    assert value == pytest.approx(-0.9189, abs=1e-4)


def test_density_term_is_additive_in_queries():
    rng = np.random.default_rng(2)
    gs = [_gauss(rng.normal(size=3), rng.normal(size=3)) for _ in range(4)]
    z = rng.normal(size=(5, 3))
    total = float(query_density_term(z, gs).data)
    parts = sum(float(query_density_term(z[k], gs).data) for k in range(5))
    assert total == pytest.approx(parts, abs=1e-10)
    extra = rng.normal(size=(1, 3))
    grown = float(query_density_term(np.vstack([z, extra]), gs).data)
    assert grown - total == pytest.approx(float(query_density_term(extra, gs).data), abs=1e-10)


def test_score_lambda_zero_and_identical_classes():
    rng = np.random.default_rng(0)
    support, query = _unit(rng, 3, 2, 6), _unit(rng, 7, 6)
    theta = WpnParams(6, 4, lam=0.0, rng=np.random.default_rng(1))
    assert _score(theta, support, query, True) == _score(theta, support, query, False)
    same = np.repeat(support[:1], 3, axis=0)
    assert _score(theta, same, query) == 0.0


def test_score_gradient_on_toy_episode():
    rng = np.random.default_rng(0)
    support, query = _unit(rng, 2, 2, 4), _unit(rng, 3, 4)
    theta = WpnParams(4, 3, lam=0.1, rng=np.random.default_rng(1))

    def fn(cw, cb, qw):
        t = WpnParams(4, 3, lam=0.1, zero=True)
        t.class_w, t.class_b, t.query_w = cw, cb, qw
        return wpn_score(t, support, query)

    assert check_gradients(fn, [p.data for p in theta.params]) < 1e-4


def test_score_invariances():
    rng = np.random.default_rng(3)
    support, query = _unit(rng, 4, 3, 8), _unit(rng, 6, 8)
    theta = WpnParams(8, 5, lam=0.1, rng=np.random.default_rng(4))
    base = _score(theta, support, query)
    assert abs(_score(theta, support[[2, 0, 3, 1]], query) - base) <= 1e-10
    assert abs(_score(theta, support[:, [1, 2, 0]], query) - base) <= 1e-10
    assert abs(_score(theta, support, query[::-1]) - base) <= 1e-10
    other = _unit(rng, 11, 8)
    assert _score(theta, support, query, False) == _score(theta, support, other, False)


def test_wpn_checkpoint_round_trip(tmp_path):
    theta = WpnParams(6, 3, lam=0.25, rng=np.random.default_rng(0))
    back = load_wpn(save_wpn(theta, tmp_path / "w.json"))
    assert (back.d_h, back.d_z, back.lam) == (6, 3, 0.25)
    for a, b in zip(theta.params, back.params):
        np.testing.assert_array_equal(a.data, b.data)


def test_dimension_errors():
    theta = WpnParams(4, 2)
    with pytest.raises(ValueError):
        class_gaussians(theta, np.ones((2, 2, 5)))
    with pytest.raises(ValueError):
        pairwise_kl_term([_gauss(0.0, 0.0)])
    with pytest.raises(ValueError):
        kl_diag_gaussian(_gauss([0.0, 0.0], [0.0, 0.0]), _gauss(0.0, 0.0))
