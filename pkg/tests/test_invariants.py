import numpy as np

from sreseg import invariants
from sreseg.invariants import Check, check_adjoint, check_kernel_symmetry, check_layer_equivariance


def test_kernel_checks_pass():
    assert check_kernel_symmetry().passed
    assert check_adjoint().passed


def test_layer_equivariance_both_precisions():
    for dtype in (np.float32, np.float64):
        assert all(c.passed for c in check_layer_equivariance(dtype))


def test_check_line_format():
    assert Check("x", True, 0.5, 1.0).line() == "PASS x: value=0.5 limit=1"
    assert Check("y", False, 2.0, 1.0, "worst=w").line().startswith("FAIL y:")


def test_symmetry_check_detects_asymmetry(monkeypatch):
    def lopsided(w, rmap):
        d = np.zeros(w.shape[:-1] + (rmap.k, rmap.k))
        d[..., 0, -1] = 1.0
        return d

    monkeypatch.setattr(invariants, "expand_kernel", lopsided)
    assert not check_kernel_symmetry(ks=(3,), trials=2).passed
