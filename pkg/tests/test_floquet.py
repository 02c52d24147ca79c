import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from waveguide_gap.experiments import loglog_fit
from waveguide_gap.fem import PreconditionError, assemble_full
from waveguide_gap.floquet import (BandDiagram, band_edges, check_bracketing,
                                   compute_band_diagram, conjugation_defect, gaps_between,
                                   make_eta_grid, unperturbed_branches)
from waveguide_gap.geometry import CavernSpec, CrossSectionShape, build_cell_mesh

M_SQ = np.array([2, 5, 5, 8]) * math.pi ** 2


@pytest.fixture(scope="module")
def plain_diagram():
    m = build_cell_mesh(CrossSectionShape.rectangle(), None, resolution=12)
    return compute_band_diagram(m, make_eta_grid(16, 0), p_max=3)


def test_band_edges_example():
    rep = band_edges([(10, 20), (18, 30), (35, 40)])
    assert rep.gaps == [(30.0, 35.0)]
    assert rep.first_gap_length == 5.0


def test_gaps_merge_touching_bands():
    assert gaps_between([(0, 1), (1 + 1e-12, 2)], merge_tol=1e-9) == []
    assert gaps_between([(0, 1), (1.5, 2)]) == [(1.0, 1.5)]


def test_collapsed_band_is_flagged():
    rep = band_edges([(1.0, 1.0), (2.0, 3.0)])
    assert rep.flags and "band 1" in rep.flags[0]
    assert rep.gaps == [(1.0, 2.0)]


def test_empty_input_rejected():
    with pytest.raises(PreconditionError):
        band_edges([])


def test_eta_grid_contents():
    g = make_eta_grid(33, 17, P_hat=8 * math.pi ** 3, h=0.2)
    assert np.any(np.abs(g - math.pi) < 1e-15)
    assert np.all(np.diff(g) > 0)
    assert g[0] == 0.0 and g[-1] < 2 * math.pi
    half = 4 * 8 * math.pi ** 3 * 0.008 / (2 * math.pi)
    inside = g[np.abs(g - math.pi) <= half + 1e-12]
    assert len(inside) >= 17
    assert len(make_eta_grid(33, 0)) == 34  # pi appended to an odd uniform grid
    assert len(make_eta_grid(32, 0)) == 32


def test_eta_grid_window_clipped():
    g = make_eta_grid(9, 5, P_hat=1e6, h=1.0)
    assert g.min() >= 0.0 and g.max() < 2 * math.pi


def test_grid_preconditions():
    m = build_cell_mesh(CrossSectionShape.rectangle(), None, resolution=3)
    with pytest.raises(PreconditionError):
        compute_band_diagram(m, np.linspace(0, 2 * math.pi, 5, endpoint=False))
    with pytest.raises(PreconditionError):
        compute_band_diagram(m, np.linspace(0.1, 6.0, 10))


def test_unperturbed_branches_formula():
    vals = unperturbed_branches([0.0, math.pi], M_SQ, 3)
    assert_allclose(vals[:, 0], [2 * math.pi ** 2, 5 * math.pi ** 2, 5 * math.pi ** 2])
    # crossing of q = 0 and q = 1 at eta = pi
    assert_allclose(vals[:2, 1], [3 * math.pi ** 2] * 2)


def test_cylinder_matches_branches(plain_diagram):
    exact = unperturbed_branches(plain_diagram.eta_grid, M_SQ, 3)
    assert np.all(np.abs(plain_diagram.lambdas / exact - 1) < 3e-2)
    # Q1 eigenvalues approximate from above
    assert np.all(plain_diagram.lambdas >= exact * (1 - 1e-10))


def test_cylinder_has_no_gap_in_first_window(plain_diagram):
    rep = band_edges(plain_diagram, 1e-8)
    lo, hi = plain_diagram.lambdas.min(), 2 * math.pi ** 2 + 4 * math.pi ** 2
    assert all(g[1] <= lo or g[0] >= hi for g in rep.gaps)


def test_conjugation_symmetry(plain_diagram):
    assert conjugation_defect(plain_diagram) == 0.0
    assert plain_diagram.diagnostics["n_solves"] == 9


def test_bracketing_at_zero_scale(plain_diagram):
    rep = check_bracketing(plain_diagram, plain_diagram)
    assert rep.ok and rep.max_violation == 0.0
    assert rep.C == [0.0] * 3


def test_bracketing_with_cavern():
    m = build_cell_mesh(CrossSectionShape.rectangle(), CavernSpec(h=0.25), resolution=4,
                        refinement_levels=1, fill_cavern=True)
    ops = assemble_full(m)
    grid = make_eta_grid(8, 0)
    dh = compute_band_diagram(m, grid, 2, operators=ops)
    d0 = compute_band_diagram(m, grid, 2, operators=ops, constrain_cavern=False)
    rep = check_bracketing(dh, d0)
    assert rep.ok and rep.max_violation < 0
    assert all(c > 0 for c in rep.C)
    assert dh.h == 0.25 and d0.h == 0.0


def test_bracketing_shape_mismatch(plain_diagram):
    other = BandDiagram(plain_diagram.eta_grid, plain_diagram.lambdas[:2])
    with pytest.raises(PreconditionError):
        check_bracketing(plain_diagram, other)


def test_csv_round_trip(tmp_path, plain_diagram):
    p = tmp_path / "bands.csv"
    plain_diagram.write_csv(p)
    back = BandDiagram.read_csv(p)
    assert_allclose(back.lambdas, plain_diagram.lambdas, rtol=1e-11)
    assert_allclose(back.eta_grid, plain_diagram.eta_grid, rtol=1e-11)
    assert p.read_text().splitlines()[0] == "eta,Lambda_1,Lambda_2,Lambda_3"


def test_at_requires_grid_point(plain_diagram):
    assert_allclose(plain_diagram.at(math.pi)[:2], plain_diagram.lambdas[:2, 8])
    with pytest.raises(KeyError):
        plain_diagram.at(0.1234)


def test_loglog_slope_synthetic():
    h = np.array([0.05, 0.1, 0.15, 0.2])
    fit = loglog_fit(h, 2 * 8 * math.pi ** 3 * h ** 3)
    assert_allclose(fit.slope, 3.0, atol=1e-12)
    assert fit.ci[0] <= 3.0 <= fit.ci[1]


def test_remainder_exponent_synthetic():
    h = np.array([0.05, 0.1, 0.15, 0.2])
    fit = loglog_fit(h, 7.0 * h ** 3.5)
    assert_allclose(fit.slope, 3.5, atol=1e-12)
