import math

import numpy as np
import pytest

from sreseg.invariants import _randomize_norm
from sreseg.model import (CNNClassifier, ModelConfig, Network, TrainConfig, build_model, cosine_lr, nhwc_to_nchw,
                          predict_logits, train)
from sreseg.nn import SRE, STANDARD, BatchNorm2d, rot90

TINY = dict(stage_channels=(4, 4, 8, 8), sre_kernel_sizes=(5, 3, 3, 3), input_size=16)


def _randomized(model, seed=0):
    rng = np.random.default_rng(seed)
    for _, layer in model.named_layers():
        if isinstance(layer, BatchNorm2d):
            _randomize_norm(layer, rng)
    model.fc.params["weight"] = rng.standard_normal(model.fc.params["weight"].shape).astype(model.dtype)
    return model


def test_default_tap_shapes():
    x = np.zeros((1, 3, 64, 64), dtype=np.float32)
    sre, std = build_model(variant=SRE), build_model(variant=STANDARD)
    for layer, side, ch in [(1, 64, 16), (2, 32, 32), (3, 16, 64), (4, 8, 128)]:
        a, b = sre.forward_features(x, layer), std.forward_features(x, layer)
        assert a.shape == b.shape == (1, ch, side, side)


def test_sre_has_fewer_parameters():
    assert build_model(variant=SRE).param_count() < build_model(variant=STANDARD).param_count()


def test_bad_config():
    with pytest.raises(ValueError):
        ModelConfig(variant="other")
    with pytest.raises(ValueError):
        ModelConfig(sre_kernel_sizes=(9, 8, 5, 5))
    with pytest.raises(ValueError):
        build_model().forward_features(np.zeros((1, 3, 60, 60)), 4)
    with pytest.raises(ValueError):
        build_model().forward_features(np.zeros((1, 64, 64, 3)), 1)


@pytest.mark.parametrize("dtype, tol", [(np.float32, 1e-4), (np.float64, 1e-10)])
def test_sre_taps_are_equivariant(dtype, tol):
    model = _randomized(build_model(variant=SRE, dtype=dtype, seed=3))
    x = np.random.default_rng(1).standard_normal((2, 3, 64, 64)).astype(dtype)
    for layer in (1, 2, 3, 4):
        for q in (1, 2, 3):
            err = np.abs(rot90(model.forward_features(x, layer), q) - model.forward_features(rot90(x, q), layer))
            assert err.max() <= tol


def test_standard_tap4_is_not_equivariant():
    model = _randomized(build_model(variant=STANDARD, seed=3))
    x = np.random.default_rng(1).standard_normal((2, 3, 64, 64)).astype(np.float32)
    err = np.abs(rot90(model.forward_features(x, 4)) - model.forward_features(rot90(x), 4))
    assert err.max() > 1e-2


def test_sre_logits_rotation_invariant():
    model = _randomized(build_model(variant=SRE, seed=4, **TINY))
    x = np.random.default_rng(2).standard_normal((8, 3, 16, 16)).astype(np.float32)
    a, b = model.forward_logits(x), model.forward_logits(rot90(x))
    top2 = np.sort(a, axis=1)[:, -2:]
    sure = top2[:, 1] - top2[:, 0] > 1e-3
    assert np.array_equal(a.argmax(1)[sure], b.argmax(1)[sure])


def test_untrained_logits_uniform():
    logits = build_model(**TINY).forward_logits(np.random.default_rng(0).random((5, 3, 16, 16)).astype(np.float32))
    assert logits.shape == (5, 4) and np.all(np.isfinite(logits))
    assert np.all(logits == logits[:, :1])


def test_same_input_bitwise_identical():
    model = build_model(**TINY)
    x = np.random.default_rng(0).random((2, 3, 16, 16)).astype(np.float32)
    assert np.array_equal(model.forward_features(x, 4), model.forward_features(x, 4))


def test_cosine_schedule():
    assert cosine_lr(2e-2, 0, 10) == 2e-2
    assert cosine_lr(2e-2, 9, 10) <= 2e-2 * (1 + math.cos(math.pi * 9 / 10)) / 2 + 1e-18
    assert TrainConfig().base_lr == 2e-2 and TrainConfig().batch_size == 24


def _toy(n=48, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = rng.random((n, 3, 16, 16)).astype(np.float32) * 0.2
    X += np.where(y == 1, 0.8, 0.0)[:, None, None, None].astype(np.float32)
    return X, y


@pytest.mark.parametrize("variant", [SRE, STANDARD])
def test_separable_toy_reaches_full_accuracy(variant):
    X, y = _toy()
    model = build_model(variant=variant, num_classes=2, seed=1, **TINY)
    _, hist = train(model, X, y, TrainConfig(epochs=20, batch_size=8), seed=2)
    assert hist[-1]["accuracy"] == 1.0
    assert (predict_logits(model, X).argmax(1) == y).all()


def test_training_is_deterministic():
    X, y = _toy(24)
    params = []
    for _ in range(2):
        m = build_model(num_classes=2, seed=5, **TINY)
        train(m, X, y, TrainConfig(epochs=2, batch_size=8), seed=6)
        params.append(m.state_dict())
    for k in params[0]:
        assert np.array_equal(params[0][k], params[1][k])


def test_save_load_and_astype(tmp_path):
    X, y = _toy(16)
    m = build_model(variant=STANDARD, num_classes=2, seed=7, **TINY)
    train(m, X, y, TrainConfig(epochs=1, batch_size=8), seed=1)
    m.save(tmp_path / "m")
    back = Network.load(tmp_path / "m")
    assert back.config == m.config
    assert np.array_equal(back.forward_logits(X), m.forward_logits(X))
    wide = back.astype(np.float64)
    assert wide.dtype == np.float64
    assert np.allclose(wide.forward_logits(X.astype(np.float64)), m.forward_logits(X), atol=1e-4)


def test_classifier_estimator(rng):
    X = nhwc_to_nchw(np.zeros((1, 2, 2, 3)))
    assert X.shape == (1, 3, 2, 2)
    Xt, y = _toy(32)
    Xnhwc = Xt.transpose(0, 2, 3, 1)
    labels = np.where(y == 1, "b", "a")
    clf = CNNClassifier(epochs=15, batch_size=8, random_state=0, **{k: v for k, v in TINY.items()
                                                                      if k != "input_size"})
    clf.fit(Xnhwc, labels)
    assert set(clf.predict(Xnhwc)) <= {"a", "b"}
    assert clf.score(Xnhwc, labels) == 1.0
    assert np.allclose(clf.predict_proba(Xnhwc).sum(1), 1.0, atol=1e-6)
    assert clf.transform(Xnhwc).shape == (32, 8)
