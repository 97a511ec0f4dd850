import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import multivariate_normal

from locolab.errors import DomainError, ModelError
from locolab.molrg import (SubspaceModel, component_log_densities, forward_noise,
                           load_model, localized_model, log_density, random_model,
                           sample_batch, sample_x0, save_model, score)
from locolab.schedule import LINEAR


def dense_log_density(model, x, t):
    """Oracle: average of dense Gaussian pdfs, no Woodbury shortcuts."""
    a = model.alpha(t)
    dens = [multivariate_normal(np.zeros(model.d), a * M @ M.T + (1 - a) * np.eye(model.d)).pdf(x)
            for M in model.bases]
    return np.log(np.mean(dens))


def test_random_model_properties():
    m = random_model(10, [1, 2, 3], seed=4)
    assert (m.d, m.K, m.ranks, m.total_rank) == (10, 3, (1, 2, 3), 6)
    M = m.stacked
    np.testing.assert_allclose(M.T @ M, np.eye(6), atol=1e-12)


def test_seeded_construction_is_reproducible():
    assert random_model(8, [2, 2], seed=1) == random_model(8, [2, 2], seed=1)
    assert random_model(8, [2, 2], seed=1) != random_model(8, [2, 2], seed=2)


def test_bases_are_immutable():
    m = random_model(6, [2], seed=0)
    with pytest.raises(ValueError):
        m.bases[0][0, 0] = 1.0


@pytest.mark.parametrize("bases", [
    (np.ones((4, 1)),),                                       # not normalized
    (np.eye(4)[:, :2], np.eye(4)[:, 1:3]),                    # overlapping
    (np.eye(3)[:, :2], np.eye(3)[:, 1:2] + 0, np.eye(3)),     # total rank too big
])
def test_invalid_bases_rejected(bases):
    with pytest.raises(ModelError):
        SubspaceModel(bases)


def test_rank_overflow_rejected():
    with pytest.raises(ModelError):
        random_model(3, [2, 2])
    with pytest.raises(ModelError):
        random_model(3, [0])


def test_localized_model_support():
    m = localized_model(12, [2, 3], [range(0, 5), range(5, 12)], seed=0)
    assert np.all(m.bases[0][5:] == 0) and np.all(m.bases[1][:5] == 0)
    with pytest.raises(ModelError):
        localized_model(12, [2, 2], [range(0, 6), range(5, 12)])


def test_sampling_lies_on_subspaces(rng):
    m = random_model(9, [2, 3], seed=1)
    s = sample_x0(m, rng)
    M = m.bases[s.cls]
    np.testing.assert_allclose(M @ (M.T @ s.x0), s.x0, atol=1e-12)
    np.testing.assert_allclose(M @ s.coeff, s.x0)
    x0, cls = sample_batch(m, 500, rng)
    for k, M in enumerate(m.bases):
        pts = x0[cls == k]
        np.testing.assert_allclose(pts @ M @ M.T, pts, atol=1e-12)
    assert set(np.unique(cls)) == {0, 1}


def test_forward_noise_endpoints(rng):
    m = random_model(5, [2], seed=0)
    x0 = sample_x0(m, rng).x0
    np.testing.assert_array_equal(forward_noise(m, x0, 0.0, rng), x0)
    xt, eps = forward_noise(m, x0, 1.0, rng, return_noise=True)
    np.testing.assert_array_equal(xt, eps)


@pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
def test_log_density_matches_dense_oracle(t, rng):
    m = random_model(6, [1, 2], seed=5)
    for x in rng.standard_normal((5, 6)):
        assert log_density(m, x, t) == pytest.approx(dense_log_density(m, x, t), rel=1e-10)


def test_log_density_is_normalized_at_t_one(rng):
    m = random_model(4, [1, 2], seed=0)
    x = rng.standard_normal(4)
    expect = -0.5 * (4 * math.log(2 * math.pi) + x @ x)
    assert log_density(m, x, 1.0) == pytest.approx(expect, rel=1e-13)


def test_density_undefined_at_t_zero():
    m = random_model(4, [1], seed=0)
    with pytest.raises(DomainError):
        log_density(m, np.zeros(4), 0.0)
    with pytest.raises(DomainError):
        score(m, np.zeros(4), 0.0)


@given(t=st.floats(0.05, 0.95), seed=st.integers(0, 10**6))
def test_score_matches_finite_difference(t, seed):
    m = random_model(6, [2, 1], seed=seed % 17)
    x = np.random.default_rng(seed).standard_normal(6)
    h = 1e-5
    fd = np.array([(log_density(m, x + h * e, t) - log_density(m, x - h * e, t)) / (2 * h)
                   for e in np.eye(6)])
    np.testing.assert_allclose(score(m, x, t), fd, rtol=1e-5, atol=1e-6)


def test_single_component_score_is_linear(rng):
    m = random_model(5, [2], seed=0)
    t = 0.4
    a = m.alpha(t)
    M = m.bases[0]
    x = rng.standard_normal(5)
    expect = -(x - a * M @ (M.T @ x)) / (1 - a)
    np.testing.assert_allclose(score(m, x, t), expect, rtol=1e-13)


def test_batched_evaluation(rng):
    m = random_model(6, [1, 2], seed=3)
    X = rng.standard_normal((3, 4, 6))
    assert component_log_densities(m, X, 0.3).shape == (3, 4, 2)
    assert log_density(m, X, 0.3).shape == (3, 4)
    np.testing.assert_allclose(score(m, X, 0.3)[1, 2], score(m, X[1, 2], 0.3))


def test_model_file_roundtrip(tmp_path):
    m = random_model(7, [1, 3], seed=11, schedule=LINEAR)
    path = tmp_path / "model.txt"
    save_model(m, path)
    assert path.read_text().splitlines()[0] == "7 2 1 3"
    assert load_model(path, LINEAR) == m


@pytest.mark.parametrize("text", ["", "4 2 1\n1 0 0 0\n", "4 1 1\n1 0 0\n", "4 1 x\n"])
def test_malformed_model_file(tmp_path, text):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(ModelError):
        load_model(path)
