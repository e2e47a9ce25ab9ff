"""Executable invariants: kernel symmetry, adjointness, quarter-turn
commutation of every layer and of the full network, and finite-difference
gradient checks.

Each check returns a :class:`Check`; :func:`run_suite` runs them all.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .kernel import expand_kernel, fold_gradient, ring_index_map
from .model import ResidualBlock, build_model

EQUIV_TOL = {np.dtype(np.float32): 1e-4, np.dtype(np.float64): 1e-10}
GRAD_TOL = 1e-4
GRAD_STEP = 1e-5
NEGATIVE_CONTROL_MIN = 1e-2


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    limit: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: value={self.value:.3g} limit={self.limit:.3g} {self.detail}".rstrip()


def _symmetries(a):
    """All seven non-identity D4 images of the last two axes."""
    r1 = np.rot90(a, 1, axes=(-2, -1))
    return [r1, np.rot90(a, 2, axes=(-2, -1)), np.rot90(a, 3, axes=(-2, -1)),
            a[..., ::-1, :], a[..., :, ::-1], np.swapaxes(a, -1, -2), r1[..., ::-1, :]]


def check_kernel_symmetry(ks=(1, 3, 5, 9), trials=100, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in ks:
        rmap = ring_index_map(k)
        for _ in range(trials):
            dense = expand_kernel(rng.standard_normal(rmap.bands), rmap)
            for img in _symmetries(dense):
                worst = max(worst, float(np.abs(img - dense).max()))
    return Check("kernel symmetry", worst == 0.0, worst, 0.0, f"k={list(ks)} trials={trials}")


def check_adjoint(ks=(1, 3, 5, 9), trials=100, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(trials):
        rmap = ring_index_map(ks[t % len(ks)])
        w = rng.standard_normal(rmap.bands)
        G = rng.standard_normal((rmap.k, rmap.k))
        lhs = float(np.sum(expand_kernel(w, rmap) * G))
        rhs = float(np.dot(w, fold_gradient(G, rmap)))
        worst = max(worst, abs(lhs - rhs))
    return Check("expand/fold adjoint", worst <= 1e-12, worst, 1e-12, f"trials={trials}")


def _equivariance_layers(dtype, rng):
    seed = lambda: int(rng.integers(2**31))  # noqa: E731
    norm_eval = nn.BatchNorm2d(4, dtype=dtype)
    _randomize_norm(norm_eval, rng)
    # (name, layer, input channels, forward kwargs)
    return [
        ("sre conv k9", nn.SREConv2d(3, 4, 9, rng=seed(), dtype=dtype), 3, {}),
        ("sre conv k5", nn.SREConv2d(4, 4, 5, rng=seed(), dtype=dtype), 4, {}),
        ("conv 1x1", nn.Conv2d(4, 6, 1, rng=seed(), dtype=dtype), 4, {}),
        ("avg_pool2", nn.AvgPool2(), 4, {}),
        ("norm train", nn.BatchNorm2d(4, dtype=dtype), 4, {"train": True}),
        ("norm eval", norm_eval, 4, {"train": False}),
        ("relu", nn.ReLU(), 4, {}),
        ("global_avg_pool", nn.GlobalAvgPool(), 4, {}),
    ]


def layer_equivariance_error(layer, x, **kw):
    """Largest |rot90(layer(x)) - layer(rot90(x))| over quarter turns 1..3."""
    base = layer.forward(x, **kw)
    worst = 0.0
    for q in (1, 2, 3):
        diff = nn.rot90(base, q) - layer.forward(nn.rot90(x, q).copy(), **kw)
        worst = max(worst, float(np.abs(diff).max()))
    return worst


def check_layer_equivariance(dtype=np.float64, seed=0):
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    tol = EQUIV_TOL[dtype]
    out = []
    for name, layer, cin, kw in _equivariance_layers(dtype, rng):
        x = rng.standard_normal((2, cin, 8, 8)).astype(dtype)
        err = layer_equivariance_error(layer, x, **kw)
        out.append(Check(f"equivariance {name} ({dtype.name})", err <= tol, err, tol))
    return out


def model_tap_errors(model, x):
    """Per-tap quarter-turn commutation error of the eval-mode feature extractor."""
    errs = {}
    for L in (1, 2, 3, 4):
        base = model.forward_features(x, L)
        worst = 0.0
        for q in (1, 2, 3):
            diff = nn.rot90(base, q) - model.forward_features(nn.rot90(x, q).copy(), L)
            worst = max(worst, float(np.abs(diff).max()))
        errs[L] = worst
    return errs


def _randomize_norm(layer, rng):
    # non-trivial running statistics and affine terms so eval mode is exercised
    c, dtype = layer.channels, layer.params["gamma"].dtype
    layer.state["running_mean"] = (0.1 * rng.standard_normal(c)).astype(dtype)
    layer.state["running_var"] = rng.uniform(0.5, 2.0, c).astype(dtype)
    layer.params["gamma"] = rng.uniform(0.5, 1.5, c).astype(dtype)
    layer.params["beta"] = (0.1 * rng.standard_normal(c)).astype(dtype)


def check_model_equivariance(n_inputs=10, size=64, seed=0):
    """SRE taps commute with rot90 in float32; the standard twin must not (negative control)."""
    rng = np.random.default_rng(seed)
    sre = build_model(variant=nn.SRE, seed=seed)
    std = build_model(variant=nn.STANDARD, seed=seed)
    for model in (sre, std):
        for _, layer in model.named_layers():
            if isinstance(layer, nn.BatchNorm2d):
                _randomize_norm(layer, rng)
    worst_sre = {L: 0.0 for L in (1, 2, 3, 4)}
    worst_std = 0.0
    for _ in range(n_inputs):
        x = rng.random((1, 3, size, size)).astype(np.float32)
        for L, e in model_tap_errors(sre, x).items():
            worst_sre[L] = max(worst_sre[L], e)
        base = std.forward_features(x, 4)
        worst_std = max(worst_std, float(np.abs(nn.rot90(base, 1) - std.forward_features(nn.rot90(x, 1).copy(), 4)).max()))
    tol = EQUIV_TOL[np.dtype(np.float32)]
    checks = [Check(f"sre tap {L} equivariance (float32)", e <= tol, e, tol, f"inputs={n_inputs}")
              for L, e in worst_sre.items()]
    checks.append(Check("standard tap 4 breaks equivariance", worst_std > NEGATIVE_CONTROL_MIN,
                        worst_std, NEGATIVE_CONTROL_MIN, "negative control, value must exceed limit"))
    return checks


# ---------------------------------------------------------------------------
# gradient checks


def _rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)


def gradient_check(layer, x, rng, step=GRAD_STEP, train=True, max_entries=None):
    """Relative errors of analytic vs central-difference gradients.

    Loss is ``sum(layer(x) * g)`` for a fixed random ``g``.  Returns a dict
    keyed by ``"x"`` and every parameter name.
    """
    out = layer.forward(x, train=train, need_grad=True)
    g = rng.standard_normal(out.shape)
    dx = layer.backward(g)
    analytic = {"x": dx, **{p: layer.grads[p].copy() for p in layer.params}}

    def loss():
        return float(np.sum(layer.forward(x, train=train, need_grad=False) * g))

    errors = {}
    targets = [("x", x)] + [(p, layer.params[p]) for p in layer.params]
    for name, arr in targets:
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            up = loss()
            flat[i] = old - step
            down = loss()
            flat[i] = old
            num[j] = (up - down) / (2 * step)
        errors[name] = _rel_err(analytic[name].reshape(-1)[idx], num)
    return errors


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def gradient_layers(rng):
    seed = lambda: int(rng.integers(2**31))  # noqa: E731
    f64 = np.float64
    block_factory = (lambda: nn.SREConv2d(2, 2, 3, rng=seed(), dtype=f64))
    bn = nn.BatchNorm2d(3, dtype=f64)
    bn.params["gamma"] = rng.uniform(0.5, 1.5, 3)
    bn.params["beta"] = rng.standard_normal(3)
    bn_eval = nn.BatchNorm2d(3, dtype=f64)
    _randomize_norm(bn_eval, rng)
    return [
        ("sre conv k5 (ring)", nn.SREConv2d(2, 3, 5, rng=seed(), dtype=f64), (2, 2, 6, 6), True),
        ("sre conv k5 (dense)", nn.SREConv2d(2, 3, 5, rng=seed(), dtype=f64, method="dense"), (2, 2, 6, 6), True),
        ("sre conv k9", nn.SREConv2d(1, 2, 9, rng=seed(), dtype=f64), (1, 1, 8, 8), True),
        ("conv k3", nn.Conv2d(2, 3, 3, rng=seed(), dtype=f64), (2, 2, 5, 5), True),
        ("conv 1x1", nn.Conv2d(3, 2, 1, rng=seed(), dtype=f64), (2, 3, 4, 4), True),
        ("avg_pool2", nn.AvgPool2(), (2, 2, 4, 6), True),
        ("global_avg_pool", nn.GlobalAvgPool(), (2, 3, 3, 4), True),
        ("norm train", bn, (3, 3, 3, 3), True),
        ("norm eval", bn_eval, (2, 3, 3, 3), False),
        ("relu", nn.ReLU(), (2, 3, 4, 4), True),
        ("linear", nn.Linear(5, 3, rng=seed(), dtype=f64), (4, 5), True),
        ("residual block", ResidualBlock(block_factory, 2, f64), (2, 2, 5, 5), True),
    ]


class _CrossEntropyProbe(nn.Layer):
    """Wraps the loss so it fits the layer gradient checker (output = loss)."""

    def __init__(self, labels):
        super().__init__()
        self.labels = labels

    def forward(self, x, train=False, need_grad=None):
        loss, self._cache = nn.softmax_cross_entropy(x, self.labels)
        return np.asarray(loss)

    def backward(self, dout):
        return self._cache * dout


def check_gradients(seed=0):
    rng = np.random.default_rng(seed)
    checks = []
    for name, layer, shape, train in gradient_layers(rng):
        x = _away_from_zero(rng, shape)
        errs = gradient_check(layer, x, rng, train=train)
        worst = max(errs.values())
        which = max(errs, key=errs.get)
        checks.append(Check(f"gradient {name}", worst <= GRAD_TOL, worst, GRAD_TOL, f"worst={which}"))
    probe = _CrossEntropyProbe(rng.integers(0, 4, 5))
    errs = gradient_check(probe, rng.standard_normal((5, 4)), rng)
    checks.append(Check("gradient softmax cross-entropy", errs["x"] <= GRAD_TOL, errs["x"], GRAD_TOL))
    return checks


def run_suite(seed=0, log=None):
    """Run every check; returns (checks, elapsed seconds)."""
    start = time.perf_counter()
    checks = [check_kernel_symmetry(seed=seed), check_adjoint(seed=seed)]
    checks += check_layer_equivariance(np.float64, seed)
    checks += check_layer_equivariance(np.float32, seed)
    checks += check_model_equivariance(seed=seed)
    checks += check_gradients(seed)
    if log:
        for c in checks:
            log(c.line())
    return checks, time.perf_counter() - start
