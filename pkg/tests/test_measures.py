from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wjko.measures import (
    PIECEWISE_LINEAR,
    ControlCurve,
    DiscreteMeasure,
    flat_distance,
    push_forward,
    second_moment,
    total_mass,
)


def test_construction_and_validation():
    mu = DiscreteMeasure([[0.0, 1.0], [2.0, 3.0]], [0.25, 0.75])
    assert mu.dim == 2 and len(mu) == 2
    assert mu.is_probability()
    with pytest.raises(ValueError):
        DiscreteMeasure([[0.0]], [-1.0])
    with pytest.raises(ValueError):
        DiscreteMeasure([[0.0], [1.0]], [1.0])
    with pytest.raises(ValueError):
        DiscreteMeasure([[np.nan]], [1.0])
    with pytest.raises(ValueError):
        mu.points[0, 0] = 5.0  # read-only storage


def test_zero_and_dirac():
    z = DiscreteMeasure.zero(3)
    assert z.dim == 3 and z.total_mass == 0.0 and len(z) == 0
    d = DiscreteMeasure.dirac([1.0, 2.0], mass=0.5)
    assert d.total_mass == 0.5 and d.radius() == pytest.approx(math.sqrt(5))


def test_moments_and_push_forward():
    mu = DiscreteMeasure.uniform([[-1.0], [1.0]])
    assert total_mass(mu) == 1.0
    assert second_moment(mu) == pytest.approx(1.0)
    shifted = push_forward(mu, lambda x: x + 2.0)
    assert np.allclose(shifted.points.ravel(), [1.0, 3.0])


def test_json_roundtrip():
    mu = DiscreteMeasure([[0.1, 0.2], [0.3, 0.4]], [0.4, 0.6])
    back = DiscreteMeasure.from_json(mu.to_json())
    assert np.array_equal(back.points, mu.points) and np.array_equal(back.weights, mu.weights)


@pytest.mark.parametrize("x, expected", [(0.5, 0.5), (1.5, 1.5), (3.0, 2.0), (10.0, 2.0)])
def test_flat_distance_two_diracs(x, expected):
    # sup f(0) - f(x) over |f| <= 1, Lip f <= 1 is min(|x|, 2)
    assert flat_distance(DiscreteMeasure.dirac([0.0]), DiscreteMeasure.dirac([x])) == pytest.approx(expected, abs=1e-12)


def test_flat_distance_mass_change():
    a = DiscreteMeasure.dirac([0.0, 0.0], 1.0)
    b = DiscreteMeasure.dirac([0.0, 0.0], 0.3)
    assert flat_distance(a, b) == pytest.approx(0.7, abs=1e-12)
    assert flat_distance(a, DiscreteMeasure.zero(2)) == pytest.approx(1.0, abs=1e-12)


def test_flat_distance_translation_bound():
    # translating mass m by a distance v costs at most m v
    pts = np.array([[0.0, 0.0], [1.0, 0.5], [-0.5, 2.0]])
    mu = DiscreteMeasure(pts, [0.2, 0.3, 0.5])
    nu = mu.with_points(pts + [0.1, -0.05])
    assert flat_distance(mu, nu) <= np.hypot(0.1, 0.05) + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=4), st.lists(st.floats(-3, 3), min_size=1, max_size=4))
def test_flat_distance_is_a_metric_on_the_line(xs, ys):
    mu = DiscreteMeasure.uniform(np.array(xs)[:, None])
    nu = DiscreteMeasure.uniform(np.array(ys)[:, None]).scaled(0.5)
    d = flat_distance(mu, nu)
    assert d >= 0
    assert d == pytest.approx(flat_distance(nu, mu), abs=1e-9)
    assert d <= mu.total_mass + nu.total_mass + 1e-9
    z = DiscreteMeasure.zero(1)
    assert d <= flat_distance(mu, z) + flat_distance(z, nu) + 1e-9


def test_control_curve_piecewise_constant_and_linear():
    a, b = DiscreteMeasure.dirac([0.0]), DiscreteMeasure.dirac([1.0])
    pc = ControlCurve([0.0, 1.0, 2.0], [a, b, b], lip=2.0, mass=1.0, radius=1.0)
    assert pc.at(0.5).points[0, 0] == 0.0 and pc.at(1.0).points[0, 0] == 1.0
    pl = ControlCurve([0.0, 2.0], [a, b], PIECEWISE_LINEAR, lip=1.0, mass=1.0, radius=1.0)
    assert pl.at(0.5).points[0, 0] == pytest.approx(0.25)
    assert pl.at(5.0).points[0, 0] == pytest.approx(1.0)
    assert pl.horizon == 2.0 and pl.dim == 1
    back = ControlCurve.from_json(pl.to_json())
    assert back.mode == PIECEWISE_LINEAR and back.lip == 1.0


def test_control_curve_invariants():
    a, b = DiscreteMeasure.dirac([0.0]), DiscreteMeasure.dirac([1.0])
    with pytest.raises(ValueError, match="inadmissible"):
        ControlCurve([0.0, 0.5], [a, b], PIECEWISE_LINEAR, lip=1.0, mass=1.0, radius=1.0)  # needs lip 2
    with pytest.raises(ValueError, match="inadmissible"):
        ControlCurve([0.0, 1.0], [a, b], lip=1.0, mass=1.0, radius=0.5)  # support
    with pytest.raises(ValueError, match="inadmissible"):
        ControlCurve([0.0, 1.0], [a, a.scaled(2.0)], lip=1.0, mass=1.0, radius=1.0)  # mass
    with pytest.raises(ValueError):
        ControlCurve([0.5, 1.0], [a, b])
    with pytest.raises(ValueError):
        ControlCurve([0.0, 1.0], [a, DiscreteMeasure.dirac([0.0, 0.0])])
    bad = ControlCurve([0.0, 0.5], [a, b], lip=1.0, mass=1.0, radius=1.0, check=False)
    assert bad.violations()


def test_constant_control_certificate():
    nu = ControlCurve.constant(DiscreteMeasure.dirac([3.0, 4.0], 0.5), 2.0)
    assert nu.lip == 0.0 and nu.mass == 0.5 and nu.radius == pytest.approx(5.0)
    assert not nu.violations()
