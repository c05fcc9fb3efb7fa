import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dclgan.errors import ConfigError, NumericalError
from dclgan.evaluation import (
    FeatureStats,
    collect_stats,
    diversity_score,
    frechet_distance,
    random_projection_embedder,
    stats_from_embeddings,
    translate_folder,
)
from dclgan.networks import build_netbundle
from dclgan.config import AblationFlags, NetConfig

from conftest import write_images


def commuting_fd(mu_a, var_a, mu_b, var_b):
    """Closed form for diagonal covariances: |dmu|^2 + sum (sqrt(a) - sqrt(b))^2."""
    return float(np.sum((mu_a - mu_b) ** 2) + np.sum((np.sqrt(var_a) - np.sqrt(var_b)) ** 2))


def random_cov(rng, d, rank=None):
    a = rng.normal(size=(d, rank or d))
    return a @ a.T / (rank or d)


def test_stats_worked_example():
    s = stats_from_embeddings(np.array([[0.0, 0.0], [2.0, 2.0]]))
    np.testing.assert_allclose(s.mean, [1, 1])
    np.testing.assert_allclose(s.cov, [[2, 2], [2, 2]])
    assert s.n == 2


def test_stats_need_two_samples():
    emb = random_projection_embedder(dim=4, pool=2)
    with pytest.raises(ValueError):
        collect_stats([torch.zeros(3, 8, 8)], emb)


def test_fd_identical_is_exact_zero():
    rng = np.random.default_rng(0)
    s = FeatureStats(rng.normal(size=5), random_cov(rng, 5), 10)
    assert frechet_distance(s, s) == 0.0


def test_fd_worked_examples():
    eye = np.eye(2)
    assert frechet_distance(FeatureStats([0, 0], eye, 2), FeatureStats([1, 1], eye, 2)) == pytest.approx(2.0, abs=1e-12)
    assert frechet_distance(FeatureStats([0, 0], 4 * eye, 2), FeatureStats([0, 0], eye, 2)) == pytest.approx(2.0, abs=1e-12)


def test_fd_commuting_closed_form():
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = int(rng.integers(1, 12))
        mu_a, mu_b = rng.normal(size=d), rng.normal(size=d)
        var_a, var_b = rng.uniform(0, 3, d), rng.uniform(0, 3, d)
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        fd = frechet_distance(
            FeatureStats(mu_a, q @ np.diag(var_a) @ q.T, 2), FeatureStats(mu_b, q @ np.diag(var_b) @ q.T, 2)
        )
        assert fd == pytest.approx(commuting_fd(mu_a, var_a, mu_b, var_b), rel=1e-6, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_fd_symmetric_and_nonnegative(d, seed):
    rng = np.random.default_rng(seed)
    a = FeatureStats(rng.normal(size=d), random_cov(rng, d, rank=int(rng.integers(1, d + 1))), 2)
    b = FeatureStats(rng.normal(size=d), random_cov(rng, d), 2)
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= 0
    assert ab == pytest.approx(ba, rel=1e-8, abs=1e-8)


def test_fd_rejects_indefinite_covariance():
    bad = FeatureStats([0, 0], [[1, 0], [0, -1]], 2)
    with pytest.raises(NumericalError, match="eigenvalue"):
        frechet_distance(bad, FeatureStats([0, 0], np.eye(2), 2))


def test_fd_dimension_mismatch():
    with pytest.raises(ValueError):
        frechet_distance(FeatureStats([0], [[1]], 2), FeatureStats([0, 0], np.eye(2), 2))


def test_embedder_deterministic_and_named():
    a, b = random_projection_embedder(), random_projection_embedder()
    img = torch.rand(3, 32, 32)
    np.testing.assert_array_equal(a(img), b(img))
    assert a.name == "randproj64-pool16-seed0" and a(img).shape == (64,)


def test_diversity_score():
    assert diversity_score([torch.zeros(3, 4, 4)] * 5) == 0.0
    assert diversity_score([torch.zeros(3, 2, 2), torch.ones(3, 2, 2), -torch.ones(3, 2, 2)]) == pytest.approx(4 / 3)
    with pytest.raises(ValueError):
        diversity_score([torch.zeros(3, 2, 2)])


@pytest.fixture
def small_bundle():
    torch.manual_seed(0)
    return build_netbundle("DCL", AblationFlags(), NetConfig(base_width=8), ("down1", "down2", "res1", "res5"))


def test_translate_folder(tmp_path, small_bundle):
    write_images(tmp_path / "in", 3, 40, seed=0)
    m1 = translate_folder(small_bundle, tmp_path / "in", "XtoY", tmp_path / "o1", crop_size=32)
    m2 = translate_folder(small_bundle, tmp_path / "in", "XtoY", tmp_path / "o2", crop_size=32)
    assert len(m1) == 3 and (tmp_path / "o1" / "manifest.tsv").exists()
    for (_, a), (_, b) in zip(m1, m2):
        assert open(a, "rb").read() == open(b, "rb").read()
    m3 = translate_folder(small_bundle, tmp_path / "in", "YtoX", tmp_path / "o3", crop_size=32)
    assert len(m3) == 3


def test_translate_empty_folder_warns(tmp_path, small_bundle, caplog):
    (tmp_path / "empty").mkdir()
    with caplog.at_level(logging.WARNING):
        assert translate_folder(small_bundle, tmp_path / "empty", "XtoY", tmp_path / "o", crop_size=32) == []
    assert "no images" in caplog.text


def test_translate_direction_validation(tmp_path, small_bundle):
    with pytest.raises(ConfigError, match="direction"):
        translate_folder(small_bundle, tmp_path, "sideways", tmp_path / "o")
    single = build_netbundle("DCL", AblationFlags(single_direction=True), NetConfig(base_width=8), ("down1",))
    with pytest.raises(ConfigError, match="single-direction"):
        translate_folder(single, tmp_path, "YtoX", tmp_path / "o")
