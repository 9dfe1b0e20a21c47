import logging

import numpy as np
import pytest

from d3defense.attack import (
    AttackSpec, ToyClassifier, ThreatModel, accuracy, deepfool, evaluate_defense, fgsm, fgsm_flip_budget,
    load_model, perturbation, save_model, train_toy, transform_dataset,
)
from d3defense.data import gaussian_blobs
from d3defense.dictionary import Dictionary, DictionarySet
from d3defense.errors import D3IOError, FormatError, TrainingError
from d3defense.mp import DenoiseConfig, Randomized, denoise_image

from conftest import random_set


def random_model(rng, arch, d=12, k=4, h=7):
    m = ToyClassifier.init(arch, d, k, h, seed=int(rng.integers(1 << 31)))
    for p in m.params():
        p += rng.normal(0, 0.5, p.shape)
    return m


def central_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("arch", ["linear", "mlp"])
def test_input_gradient_matches_finite_differences(rng, arch):
    for _ in range(10):
        m = random_model(rng, arch)
        x = rng.standard_normal(12)
        y = int(rng.integers(4))
        num = central_diff(lambda u: m.loss(u, y), x)
        ana = m.input_gradient(x, y)
        assert np.linalg.norm(ana - num) <= 1e-4 * max(np.linalg.norm(num), 1e-12)
        J = m.logit_jacobian(x)
        for c in range(4):
            np.testing.assert_allclose(J[c], central_diff(lambda u: m.logits(u)[c], x), atol=1e-7)


@pytest.mark.parametrize("arch", ["linear", "mlp"])
def test_parameter_gradients_match_finite_differences(rng, arch):
    m = random_model(rng, arch)
    X = rng.standard_normal((5, 12))
    y = rng.integers(4, size=5)
    _, grads = m.batch_grads(X, y)
    for p, g in zip(m.params(), grads):
        def f(val, p=p):
            old = p.copy()
            p[...] = val
            out = m.batch_grads(X, y)[0]
            p[...] = old
            return out
        np.testing.assert_allclose(g, central_diff(f, p.copy()), atol=1e-7)


def test_training_separable_blobs():
    X, y = gaussian_blobs(50, n_classes=2, size=8, amplitude=0.4, noise=0.02, seed=1)
    for arch in ("linear", "mlp"):
        m = train_toy(X, y, arch, epochs=40, lr=1e-2, seed=0)
        assert accuracy(m, X, y) >= 0.99


def test_zero_epochs_and_seed_determinism():
    X, y = gaussian_blobs(10, n_classes=3, size=6, seed=0)
    m0 = train_toy(X, y, "mlp", epochs=0, seed=4, hidden=5)
    init = ToyClassifier.init("mlp", 36, 3, 5, seed=4)
    for a, b in zip(m0.params(), init.params()):
        np.testing.assert_array_equal(a, b.astype(np.float32))
    a = train_toy(X, y, "mlp", epochs=3, seed=2)
    b = train_toy(X, y, "mlp", epochs=3, seed=2)
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))


def test_training_loss_decreases(caplog):
    X, y = gaussian_blobs(30, n_classes=4, size=8, seed=3)
    with caplog.at_level(logging.INFO, logger="d3defense.attack"):
        train_toy(X, y, "mlp", epochs=5, seed=0)
    losses = [float(r.getMessage().split()[-1]) for r in caplog.records if "loss" in r.getMessage()]
    assert len(losses) == 5 and losses[-1] < losses[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    X, y = gaussian_blobs(10, n_classes=2, size=4, seed=0)
    with pytest.raises(TrainingError, match="smaller learning rate"):
        train_toy(X * 1e200, y, "linear", epochs=5, lr=1e200)


def test_model_file_round_trip(tmp_path, rng):
    for arch in ("linear", "mlp"):
        m = random_model(rng, arch)
        for p in m.params():
            p[...] = p.astype(np.float32)
        save_model(m, tmp_path / "m.d3m")
        again = load_model(tmp_path / "m.d3m")
        assert again.arch == arch
        assert all(np.array_equal(p, q) for p, q in zip(m.params(), again.params()))
    buf = (tmp_path / "m.d3m").read_bytes()
    assert buf[:8] == b"D3MODL01"
    (tmp_path / "bad.d3m").write_bytes(b"XXXXXXXX" + buf[8:])
    with pytest.raises(FormatError):
        load_model(tmp_path / "bad.d3m")
    (tmp_path / "short.d3m").write_bytes(buf[:-4])
    with pytest.raises(FormatError):
        load_model(tmp_path / "short.d3m")
    with pytest.raises(D3IOError):
        load_model(tmp_path / "none.d3m")


def test_fgsm_linear_closed_form(rng):
    w0, w1 = rng.standard_normal((2, 10))
    m = ToyClassifier("linear", np.stack([w0, w1]), np.zeros(2))
    x = rng.uniform(0.2, 0.8, 10)
    v = fgsm(m, x, 0, 0.06)
    # d CE / dx for label 0 is p1 * (w1 - w0): its sign is sign(w1 - w0)
    np.testing.assert_array_equal(np.sign(v), np.sign(w1 - w0))
    assert np.linalg.norm(v) / np.linalg.norm(x) == pytest.approx(0.06, abs=1e-6)


def test_fgsm_budget_contract(rng):
    m = random_model(rng, "mlp")
    for _ in range(20):
        x = rng.uniform(0, 1, 12)
        v = fgsm(m, x, int(rng.integers(4)), 0.06)
        assert abs(np.linalg.norm(v) / np.linalg.norm(x) - 0.06) <= 1e-6


def test_fgsm_zero_gradient(caplog):
    m = ToyClassifier("linear", np.zeros((3, 4)), np.zeros(3))
    with caplog.at_level(logging.WARNING):
        v = fgsm(m, np.ones(4), 1)
    assert not v.any() and "zero" in caplog.text


def test_fgsm_hurts_undefended_linear_model():
    X, y = gaussian_blobs(40, n_classes=4, size=8, seed=5)
    m = train_toy(X, y, "linear", epochs=30, seed=0)
    adv = np.stack([x + fgsm(m, x, int(t), 0.06) for x, t in zip(X, y)])
    assert accuracy(m, adv, y) < accuracy(m, X, y)


def test_deepfool_binary_linear_closed_form(rng):
    for _ in range(20):
        w0, w1 = rng.standard_normal((2, 9))
        b = rng.standard_normal(2)
        m = ToyClassifier("linear", np.stack([w0, w1]), b)
        x = rng.standard_normal(9)
        res = deepfool(m, x, overshoot=0.02)
        w, f = w1 - w0, (w1 - w0) @ x + b[1] - b[0]
        assert res.iterations == 1 and res.flipped
        np.testing.assert_allclose(res.raw, -f * w / (w @ w), atol=1e-10)
        np.testing.assert_allclose(res.v, 1.02 * res.raw)


def test_deepfool_on_boundary_is_tiny(rng):
    w = rng.standard_normal(6)
    m = ToyClassifier("linear", np.stack([np.zeros(6), w]), np.zeros(2))
    x = rng.standard_normal(6)
    x -= (w @ x) / (w @ w) * w - 1e-12 * w  # just on the class-1 side
    assert np.linalg.norm(deepfool(m, x).v) < 1e-9


def test_deepfool_beats_fgsm_flip_budget(rng):
    wins = trials = 0
    for _ in range(60):
        m = ToyClassifier.init("mlp", 64, 3, 32, seed=int(rng.integers(1 << 31)))
        x = rng.uniform(0, 1, 64)
        label = m.predict(x)
        res = deepfool(m, x)
        budget = fgsm_flip_budget(m, x, label)
        if not res.flipped or budget is None:
            continue
        trials += 1
        wins += np.linalg.norm(res.v) <= budget * np.linalg.norm(x)
    assert trials >= 20 and wins / trials >= 0.9


def test_deepfool_reports_failure():
    m = ToyClassifier("linear", np.zeros((2, 3)), np.array([1.0, 0.0]))
    res = deepfool(m, np.ones(3), max_iter=5)
    assert not res.flipped and res.iterations == 0


def test_attack_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec("cw")
    with pytest.raises(ValueError):
        AttackSpec(budget=-0.1)


@pytest.fixture(scope="module")
def small_task():
    rng = np.random.default_rng(0)
    X, y = gaussian_blobs(12, n_classes=3, size=8, seed=2)
    levels = []
    for i in (1, 2):
        a = rng.standard_normal((16, 24))
        levels.append(Dictionary(a / np.linalg.norm(a, axis=0), i))
    dset = DictionarySet(4, 1, tuple(levels))
    m = train_toy(X, y, "mlp", epochs=20, seed=0, hidden=16)
    return dset, m, X, y


def test_budget_zero_leaves_accuracies_unchanged(small_task):
    dset, m, X, y = small_task
    for threat in ThreatModel:
        rep = evaluate_defense(m, dset, DenoiseConfig(), X, y, AttackSpec(budget=0.0), threat, surrogate=m)
        assert rep.attacked_with_defense == rep.clean
        assert rep.attacked_no_defense == rep.clean_no_defense


def test_identity_defense_transmits_noise(small_task):
    _, m, X, y = small_task
    dset = DictionarySet(4, 1, tuple(Dictionary(np.eye(16), i) for i in range(1, 17)))
    X = np.clip(X, 0.01, 0.99)
    rep = evaluate_defense(m, dset, DenoiseConfig(stride=1), X, y, AttackSpec(), "grey")
    assert rep.attacked_with_defense == pytest.approx(rep.attacked_no_defense, abs=1 / len(y))
    assert rep.clean == rep.clean_no_defense


def test_white_box_uses_transformed_gradient(small_task):
    dset, m, X, y = small_task
    x = X[0]
    tx = denoise_image(dset, x, DenoiseConfig()).reshape(x.shape)
    v = perturbation(m, x, int(y[0]), AttackSpec(), grad_at=tx)
    np.testing.assert_array_equal(np.sign(v), np.sign(m.input_gradient(tx, int(y[0]))))
    df = perturbation(m, x, int(y[0]), AttackSpec("deepfool"), grad_at=tx)
    assert np.linalg.norm(df) / np.linalg.norm(x) == pytest.approx(0.06)


def test_randomized_defense_is_non_degenerate(small_task):
    dset, m, X, y = small_task
    cfg = DenoiseConfig(mode=Randomized())
    x = X[0] + fgsm(m, X[0], int(y[0]))
    a = denoise_image(dset, x, DenoiseConfig(mode=Randomized(seed=1)))
    b = denoise_image(dset, x, DenoiseConfig(mode=Randomized(seed=2)))
    assert not np.array_equal(a, b)
    Xb, yb = gaussian_blobs(100, n_classes=3, size=8, seed=2)
    r1 = evaluate_defense(m, dset, cfg, Xb, yb, AttackSpec(), "white", seed=0)
    r2 = evaluate_defense(m, dset, cfg, Xb, yb, AttackSpec(), "white", seed=1000)
    assert abs(r1.clean - r2.clean) < 0.02


def test_black_box_needs_surrogate(small_task):
    dset, m, X, y = small_task
    with pytest.raises(ValueError):
        evaluate_defense(m, dset, DenoiseConfig(), X, y, threat="black")


def test_transform_dataset_seeds_per_image(small_task):
    dset, _, X, _ = small_task
    cfg = DenoiseConfig(mode=Randomized())
    T = transform_dataset(dset, cfg, X[:3], seed=5)
    np.testing.assert_array_equal(T[1], denoise_image(dset, X[1], DenoiseConfig(mode=Randomized(seed=6))))
