import logging

import numpy as np
import pytest
from scipy.stats import chisquare

from d3defense import dictionary as dio
from d3defense.data import desk_corpus
from d3defense.dictionary import Dictionary, DictionarySet
from d3defense.dl import (
    LearnConfig, PatchSampler, admission_ratio, admission_test, build_dictionaries, learn_dictionaries,
    sample_patch, window_weights,
)
from d3defense.errors import DimensionError, LearningError
from d3defense.mp import PIXEL_OFFSET, DenoiseConfig, mp_denoise_patch
from d3defense.saliency import gradient_magnitude_saliency, uniform_saliency


@pytest.fixture(scope="module")
def desk():
    return desk_corpus(500, 32, seed=0)


@pytest.fixture(scope="module")
def built(desk):
    return build_dictionaries(desk, uniform_saliency, LearnConfig(8, eta=64, kappa=2, seed=3))


def test_tiled_single_patch_corpus():
    tile = np.array([[0.1, 0.9], [0.6, 0.3]])
    img = np.tile(tile, (4, 4))
    dset = learn_dictionaries([img], cfg=LearnConfig(2, eta=1, kappa=1))
    drawn = dset[1].atom(0)
    # every window of a 2-periodic tiling is one of the four cyclic shifts of the tile
    shifts = [np.roll(np.roll(tile, -r, 0), -c, 1).reshape(-1) - PIXEL_OFFSET for r in (0, 1) for c in (0, 1)]
    assert any(np.allclose(drawn, s / np.linalg.norm(s), atol=1e-6) for s in shifts)
    one = np.full((4, 4), 0.8)
    dset = learn_dictionaries([one], cfg=LearnConfig(4, eta=1))
    np.testing.assert_allclose(dset[1].atom(0), np.full(16, 0.25), atol=1e-7)


def test_admission_geometry(rng):
    s = rng.standard_normal(10)
    s /= np.linalg.norm(s)
    atoms = s[:, None]
    assert admission_test(None, rng.standard_normal(10), 0.85)
    assert admission_ratio(np.zeros((10, 0)), s) == 1.0
    assert not admission_test(atoms, s, 0.85)
    assert admission_ratio(atoms, 1.7 * s) == pytest.approx(0.0, abs=1e-12)
    orth = rng.standard_normal(10)
    orth -= (orth @ s) * s
    assert admission_ratio(atoms, orth) == pytest.approx(1.0)
    assert admission_test(atoms, orth, 0.99)
    u = orth / np.linalg.norm(orth)
    for theta in np.linspace(0.05, np.pi / 2, 25):
        cand = np.cos(theta) * s + np.sin(theta) * u
        assert admission_test(atoms, cand, 0.85) == (np.sin(theta) > 0.85)
        assert admission_ratio(Dictionary(atoms, 1), cand) == pytest.approx(np.sin(theta))


def test_uniform_sampling_chi_square():
    img = np.random.default_rng(0).random((5, 5))
    sampler = PatchSampler(img, uniform_saliency(img), 3, PIXEL_OFFSET)
    rng = np.random.default_rng(1)
    counts = np.zeros(9)
    for _ in range(10_000):
        r, c = sampler.draw_index(rng)
        counts[3 * r + c] += 1
    assert chisquare(counts).pvalue > 0.01


def test_weighted_sampling_follows_window_mass():
    img = np.random.default_rng(0).random((6, 6))
    w = np.zeros((6, 6))
    w[0, 0] = 3.0
    w[5, 5] = 1.0
    sampler = PatchSampler(img, w, 4)
    rng = np.random.default_rng(2)
    counts = np.zeros((3, 3))
    for _ in range(8000):
        counts[sampler.draw_index(rng)] += 1
    assert counts[0, 0] / counts[2, 2] == pytest.approx(3.0, rel=0.1)
    assert counts.sum() == counts[0, 0] + counts[2, 2]


def test_delta_saliency_always_same_window():
    img = np.random.default_rng(0).random((8, 8))
    w = np.zeros((8, 8))
    w[5, 2] = 1.0  # one salient pixel lies in 9 of the 3x3 windows
    mass = window_weights(img, w, 3)
    assert (mass > 0).sum() == 9
    w_win = np.zeros((8, 8))
    w_win[0, 0] = 1.0
    rng = np.random.default_rng(5)
    for _ in range(20):
        np.testing.assert_array_equal(sample_patch(img, w_win, 3, rng), img[:3, :3].reshape(-1))


def test_sampling_seeded():
    img = np.random.default_rng(0).random((9, 9))
    a = [sample_patch(img, uniform_saliency(img), 4, np.random.default_rng(7)) for _ in range(3)]
    b = [sample_patch(img, uniform_saliency(img), 4, np.random.default_rng(7)) for _ in range(3)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_zero_saliency_falls_back_to_uniform(caplog):
    img = np.full((6, 6), 0.7)
    with caplog.at_level(logging.WARNING):
        mass = window_weights(img, gradient_magnitude_saliency(img), 3, PIXEL_OFFSET)
    assert np.all(mass == 1.0)
    assert "uniformly" in caplog.text


def test_zero_windows_are_excluded():
    img = np.full((6, 6), PIXEL_OFFSET)
    img[4:, 4:] = 0.9
    mass = window_weights(img, uniform_saliency(img), 3, PIXEL_OFFSET)
    assert mass[0, 0] == 0 and mass[3, 3] > 0
    with pytest.raises(DimensionError):
        sample_patch(np.full((4, 4), PIXEL_OFFSET), np.ones((4, 4)), 2, np.random.default_rng(0), PIXEL_OFFSET)


def test_learn_config_validation():
    for bad in (dict(epsilon=0.0), dict(epsilon=1.0), dict(kappa=0), dict(eta=0), dict(eta=10, max_attempts=5)):
        with pytest.raises(ValueError):
            LearnConfig(8, **bad)
    assert LearnConfig(8, eta=(3, 4), kappa=2).etas() == (3, 4)
    assert LearnConfig(8, eta=5).attempts_for(5) == 1000


def test_exhaustion_raises_learning_error():
    img = np.tile(np.array([[0.2, 0.8], [0.8, 0.2]]), (5, 5))
    with pytest.raises(LearningError, match=r"level 1: only \d+/50"):
        learn_dictionaries([img], cfg=LearnConfig(2, eta=50, max_attempts=60))


def test_corpus_checks():
    with pytest.raises(DimensionError):
        learn_dictionaries([], cfg=LearnConfig(4))
    with pytest.raises(DimensionError):
        learn_dictionaries([np.zeros((3, 8))], cfg=LearnConfig(4))


def test_exact_eta_and_unit_norms(built):
    dset = built.dictionaries
    assert [d.eta for d in dset.levels] == [64, 64]
    for d in dset.levels:
        np.testing.assert_allclose(d.norms(), 1.0, atol=1e-5)
    assert dset.epsilon == 0.85 and dset.seed == 3


def test_pairwise_diversity(built):
    for d in built.dictionaries.levels:
        M = d.matrix
        for i in range(d.eta):
            for j in range(d.eta):
                if i != j:
                    assert admission_ratio(M[:, [j]], M[:, i]) > 0.85


def test_level_two_atoms_replay(built, desk):
    dset = built.dictionaries
    level1 = DictionarySet(8, 1, (dset[1],))
    checked = 0
    for k, adm in enumerate(a for a in built.admissions if a.level == 2):
        s = desk[adm.image_index][adm.row:adm.row + 8, adm.col:adm.col + 8].reshape(-1) - PIXEL_OFFSET
        r = s - mp_denoise_patch(level1, s, DenoiseConfig())[0]
        assert np.max(np.abs(r / np.linalg.norm(r) - dset[2].atom(k))) <= 1e-5
        checked += 1
    assert checked == 64


def test_level_one_atoms_replay(built, desk):
    for k, adm in enumerate(a for a in built.admissions if a.level == 1):
        s = desk[adm.image_index][adm.row:adm.row + 8, adm.col:adm.col + 8].reshape(-1) - PIXEL_OFFSET
        np.testing.assert_allclose(s / np.linalg.norm(s), built.dictionaries[1].atom(k), atol=1e-6)


def test_build_is_byte_deterministic(desk):
    cfg = LearnConfig(8, eta=32, kappa=2, seed=9)
    a = learn_dictionaries(desk[:100], cfg=cfg)
    b = learn_dictionaries(desk[:100], cfg=cfg)
    assert dio.to_bytes(a) == dio.to_bytes(b)
    c = learn_dictionaries(desk[:100], cfg=LearnConfig(8, eta=32, kappa=2, seed=10))
    assert dio.to_bytes(a) != dio.to_bytes(c)


def test_report_counts(built):
    rep = built.report()
    lv = rep["levels"][0]
    assert lv["admitted"] == 64
    assert lv["attempts"] == lv["admitted"] + lv["rejected"] + lv["skipped"]
