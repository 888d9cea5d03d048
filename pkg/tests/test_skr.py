import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gramnet import autodiff as ad
from gramnet.errors import DecompositionFailure
from gramnet.skr import RegConfig, sample_variance_scale, skr_sample

from conftest import random_pd


def draws(g, cfg, n, seed):
    rng = np.random.default_rng(seed)
    return np.stack([skr_sample(g, cfg, rng) for _ in range(n)])


def test_eval_mode_adds_jitter_exactly():
    out = skr_sample(np.eye(2), RegConfig(gamma=4, jitter=0.1), None, mode="eval")
    np.testing.assert_array_equal(out, 1.1 * np.eye(2))


def test_disabled_matches_eval():
    g = np.diag([1.0, 2.0])
    cfg = RegConfig(gamma=4, jitter=0.3, enabled=False)
    np.testing.assert_array_equal(skr_sample(g, cfg, np.random.default_rng(0), "train"),
                                  skr_sample(g, cfg, None, "eval"))


def test_eval_path_is_sample_free(rng):
    g = random_pd(rng, 4)
    cfg = RegConfig(gamma=2, jitter=0.1)
    a = skr_sample(g, cfg, np.random.default_rng(1), "eval")
    b = skr_sample(g, cfg, np.random.default_rng(2), "eval")
    np.testing.assert_array_equal(a, b)


def test_monte_carlo_mean():
    g = np.diag([1.0, 2.0])
    mean = draws(g, RegConfig(gamma=4), 20000, 0).mean(axis=0)
    assert np.linalg.norm(mean - g) < 0.05


def test_gamma_one_gives_rank_one(rng):
    g = random_pd(rng, 5)
    s = skr_sample(g, RegConfig(gamma=1), rng)
    eig = np.linalg.eigvalsh(s)
    assert eig[-2] < 1e-10


def test_sample_rank_bounded_by_gamma(rng):
    g = random_pd(rng, 8)
    s = skr_sample(g, RegConfig(gamma=3), rng)
    assert np.linalg.matrix_rank(s, tol=1e-10) == 3


def test_variance_scale_values():
    assert sample_variance_scale(1) == 1.0
    assert sample_variance_scale(4) == 0.25
    with pytest.raises(ValueError):
        sample_variance_scale(0)


def test_diagonal_variance_halves_when_gamma_doubles():
    v4 = draws(np.eye(3), RegConfig(gamma=4), 20000, 3)[:, 0, 0].var()
    v8 = draws(np.eye(3), RegConfig(gamma=8), 20000, 4)[:, 0, 0].var()
    assert v4 / v8 == pytest.approx(2.0, rel=0.1)
    # Var of a chi-square(gamma)/gamma entry is 2/gamma
    assert v4 == pytest.approx(2 * sample_variance_scale(4), rel=0.1)


def test_mean_error_shrinks_like_root_n():
    g = np.diag([1.0, 2.0, 0.5])
    cfg = RegConfig(gamma=2)
    err = {}
    for n in (2000, 8000):
        errs = [np.linalg.norm(draws(g, cfg, n, 100 * n + r).mean(axis=0) - g) for r in range(12)]
        err[n] = np.sqrt(np.mean(np.square(errs)))
    assert err[2000] / err[8000] == pytest.approx(2.0, abs=0.5)


def test_same_seed_reproduces_bitwise(rng):
    g = random_pd(rng, 6)
    cfg = RegConfig(gamma=3, jitter=0.1)
    np.testing.assert_array_equal(draws(g, cfg, 5, 9), draws(g, cfg, 5, 9))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 8), gamma=st.integers(1, 12),
       jitter=st.floats(0.0, 1.0))
def test_sample_symmetric_with_jitter_floor(seed, n, gamma, jitter):
    rng = np.random.default_rng(seed)
    s = skr_sample(random_pd(rng, n), RegConfig(gamma=gamma, jitter=jitter), rng)
    np.testing.assert_allclose(s, s.T, rtol=0, atol=1e-12)
    assert np.linalg.eigvalsh(s).min() >= jitter - 1e-8


def test_indefinite_input_rejected():
    with pytest.raises(DecompositionFailure):
        skr_sample(np.diag([1.0, -1.0]), RegConfig(gamma=2), np.random.default_rng(0))
    with pytest.raises(DecompositionFailure):
        skr_sample(np.diag([1.0, -1.0]), RegConfig(gamma=2), None, "eval")


def test_gamma_for_ratio():
    assert RegConfig(gamma_ratio=0.25).gamma_for(100) == 25
    assert RegConfig(gamma=7, gamma_ratio=0.25).gamma_for(100) == 7
    assert RegConfig().gamma_for(9) == 9
    with pytest.raises(ValueError):
        RegConfig(gamma=0)
    with pytest.raises(ValueError):
        RegConfig(jitter=float("nan"))


def test_gradient_flows_through_sample(rng):
    b = rng.standard_normal((3, 3))
    cfg = RegConfig(gamma=5, jitter=0.1)

    def loss(p):
        low = ad.cholesky(ad.add(ad.matmul(p["b"], ad.transpose(p["b"])), np.eye(3)))
        g = ad.matmul(low, ad.transpose(low))
        s = skr_sample(g, cfg, np.random.default_rng(4), chol=low)
        return ad.sum_(ad.square(s))

    rep = ad.grad_check(loss, {"b": b}, step=1e-6)
    assert rep["b"].max_rel_error < 1e-6
