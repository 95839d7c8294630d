from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wjko.kernels import (
    certify_radial_lambda,
    convolve_min_subgrad,
    kernel_from_spec,
    make_abs_kernel,
    make_morse_kernel,
    make_quadratic_capped_kernel,
    make_zero_kernel,
    validate_kernel,
)
from wjko.measures import DiscreteMeasure

ALL = [
    make_abs_kernel(0.7),
    make_morse_kernel(1.0, 1.0, 0.5, 2.0),
    make_quadratic_capped_kernel(0.5, 2.0),
    make_quadratic_capped_kernel(4.0, 1.5),
    make_zero_kernel(),
]


@pytest.mark.parametrize("K", ALL, ids=lambda k: repr(k))
def test_claimed_constants_hold_on_samples(K):
    for dim in (1, 2):
        rep = validate_kernel(K, samples=1500, radius=6.0, dim=dim)
        assert rep.passed, rep.failures


@pytest.mark.parametrize("K", ALL, ids=lambda k: repr(k))
def test_gradient_and_hessian_match_finite_differences(K, rng):
    x = rng.normal(size=(20, 2)) * 2.0
    x = x[np.linalg.norm(x, axis=1) > 0.1]
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (K.eval(x + e) - K.eval(x - e)) / (2 * h)
        assert np.allclose(K.min_subgrad(x)[:, j], fd, atol=1e-6)
        fdh = (K.min_subgrad(x + e) - K.min_subgrad(x - e)) / (2 * h)
        assert np.allclose(K.hessian(x)[:, :, j], fdh, atol=1e-5)


def test_abs_cusp_has_zero_minimal_subgradient():
    K = make_abs_kernel(2.0)
    assert np.allclose(K.min_subgrad(np.zeros((1, 3))), 0.0)
    assert K(np.array([3.0, 4.0])) == pytest.approx(10.0)


def test_morse_constants():
    K = make_morse_kernel(1.0, 1.0, 0.5, 2.0)
    # radial curvature is -C_a/l_a^2 + C_r/l_r^2 = -0.875 at r = 0+ and increases from there
    assert K.lam == pytest.approx(-0.875, abs=1e-5)
    assert K.lam <= -0.875
    assert K.lip == pytest.approx(1.25)
    assert K(np.zeros(2)) == 0.0
    assert K.satisfies_self


def test_morse_with_concave_kink_is_not_semiconvex():
    K = make_morse_kernel(0.5, 2.0, 1.0, 1.0)
    assert K.lam == -math.inf and not K.satisfies_self


def test_certificate_from_second_differences_agrees_with_exact_curvature():
    g = lambda r: np.cos(r)  # noqa: E731 - radial profile with g'(0) = 0
    dg = lambda r: -np.sin(r)  # noqa: E731
    lam_fd = certify_radial_lambda(g, dg, 10.0)
    lam_exact = certify_radial_lambda(g, dg, 10.0, curvature=lambda r: -np.cos(r))
    assert lam_exact == pytest.approx(-1.0 - 1e-6)
    assert lam_fd == pytest.approx(lam_exact, abs=1e-6)


def test_quadratic_capped_is_convex_and_linear_outside():
    K = make_quadratic_capped_kernel(2.0, 1.0)
    assert K.lam == 0.0 and K.lip == 2.0
    assert K(np.array([0.5])) == pytest.approx(0.25)
    assert K(np.array([3.0])) == pytest.approx(2.0 * 3.0 - 1.0)


def test_kernel_from_spec():
    K = kernel_from_spec({"kind": "morse", "C_a": 1, "l_a": 1, "C_r": 0.5, "l_r": 2})
    assert K.name == "morse" and K.to_json()["l_r"] == 2.0
    assert kernel_from_spec(K.to_json()).params == K.params
    with pytest.raises(ValueError, match="unknown kernel kind"):
        kernel_from_spec({"kind": "yukawa"})
    with pytest.raises(ValueError, match="missing parameter"):
        kernel_from_spec({"kind": "abs"})
    with pytest.raises(ValueError, match="unexpected"):
        kernel_from_spec({"kind": "abs", "a": 1, "b": 2})
    with pytest.raises(ValueError):
        make_abs_kernel(-1.0)


def test_convolution_skips_coincident_atoms():
    K = make_abs_kernel(1.0)
    mu = DiscreteMeasure([[0.0], [1.0], [1.0]], [0.5, 0.25, 0.25])
    g = convolve_min_subgrad(K, mu, mu.points)
    assert np.allclose(g.ravel(), [-0.5, 0.5, 0.5])
    assert np.allclose(convolve_min_subgrad(K, mu, [0.5]), [0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=2))
def test_radial_kernels_are_even(z):
    z = np.array(z)
    for K in ALL:
        assert K(z) == pytest.approx(K(-z), abs=1e-13)
        assert np.allclose(K.min_subgrad(z), -K.min_subgrad(-z))


def test_validation_catches_false_claims():
    from dataclasses import replace

    morse = make_morse_kernel(1.0, 1.0, 0.5, 2.0)
    assert not validate_kernel(replace(morse, lam=0.0)).passed
    assert not validate_kernel(replace(morse, lip=0.3)).passed
    assert not validate_kernel(replace(morse, lower_bound=0.1)).passed
