import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from waveguide_gap.cross_section import (check_period_admissibility, cross_section_spectrum,
                                         normal_derivative_at, rescale_for_period, richardson)
from waveguide_gap.fem import PreconditionError
from waveguide_gap.geometry import CrossSectionShape

J01 = 2.404825557695773


@pytest.fixture(scope="module")
def square():
    return cross_section_spectrum(CrossSectionShape.rectangle(), 32)


def test_square_eigenvalues(square):
    assert_allclose(square.M[:3], [2 * math.pi ** 2, 5 * math.pi ** 2, 5 * math.pi ** 2],
                    rtol=5e-3)
    assert square.M1 < square.M2


def test_richardson_removes_second_order_error():
    coarse = cross_section_spectrum(CrossSectionShape.rectangle(), 16)
    fine = cross_section_spectrum(CrossSectionShape.rectangle(), 32)
    ex = richardson(coarse.M, fine.M)
    assert abs(ex[0] / (2 * math.pi ** 2) - 1) < 1e-4
    assert abs(ex[1] / (5 * math.pi ** 2) - 1) < 1e-3


def test_richardson_exact_on_quadratic_error():
    exact = 3.0
    assert_allclose(richardson(exact + 4.0 * 0.1 ** 2, exact + 4.0 * 0.05 ** 2), exact)


def test_v1_normalised_and_positive(square):
    m = square.mesh
    from waveguide_gap.fem import assemble
    p = assemble(m)
    u = square.V1[p.free_nodes]
    assert_allclose(u @ (p.M @ u), 1.0, rtol=1e-10)
    assert np.all(u > 0)


def test_normal_derivative_oracle(square):
    assert square.dnV1_at_anchor < 0
    assert abs(square.dnV1_at_anchor / (-2 * math.pi) - 1) < 0.02


def test_normal_derivative_reflection(square):
    top = normal_derivative_at(square, square.mesh, (0.5, 1.0))
    assert_allclose(top, square.dnV1_at_anchor, rtol=1e-6)


def test_normal_derivative_sign_elsewhere(square):
    for p in [(0.25, 0.0), (1.0, 0.5), (0.0, 0.75)]:
        assert normal_derivative_at(square, square.mesh, p) < 0


def test_normal_derivative_rejects_interior_point(square):
    with pytest.raises(PreconditionError):
        normal_derivative_at(square, square.mesh, (0.5, 0.5))


def test_gap_condition_and_threshold(square):
    assert square.gap_condition_ok
    assert_allclose(square.T_threshold, 1 / math.sqrt(3), rtol=5e-3)
    assert check_period_admissibility(square, 1.0).ok
    assert not check_period_admissibility(square, 0.5).ok
    assert not check_period_admissibility(square, square.T_threshold).ok


def test_disk_spectrum():
    d = cross_section_spectrum(CrossSectionShape.disk(), 24)
    assert_allclose(d.M1, J01 ** 2, rtol=3e-3)
    # V1 = J0(j r) / (sqrt(pi) |J1(j)|), so dn V1 = -j / sqrt(pi) on the circle
    assert_allclose(d.dnV1_at_anchor, -J01 / math.sqrt(math.pi), rtol=1e-2)


def test_thin_rectangle_violates_gap_condition():
    # M2 - M1 = 3 pi^2 / a^2 for a wide strip of height 1 is smaller than pi^2 when a > sqrt 3
    s = cross_section_spectrum(CrossSectionShape.rectangle(width=2.0, height=1.0), 12)
    assert not s.gap_condition_ok


def test_period_rescaling():
    s = rescale_for_period(CrossSectionShape.rectangle(), 0.5)
    assert (s.width, s.height) == (2.0, 2.0)
    with pytest.raises(PreconditionError):
        rescale_for_period(CrossSectionShape.rectangle(), 0.0)
