import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from waveguide_gap.geometry import (DIRICHLET, PERIODIC_LO, TRUNCATION, CavernSpec,
                                    CrossSectionShape, GeometryError, InvalidResolutionError,
                                    TruncationTooTightError, build_cell_mesh,
                                    build_cross_section_mesh, build_halfspace_mesh, check_mesh,
                                    graded_axis, load_mesh, save_mesh)


def test_square_grid_counts():
    m = build_cross_section_mesh(CrossSectionShape.rectangle(), 16)
    assert m.n_nodes == 17 * 17
    assert m.n_elements == 256
    assert np.all(m.facet_tags == DIRICHLET)
    assert_allclose(m.nodes[m.anchor_node], [0.5, 0.0])


def test_resolution_below_two_rejected():
    with pytest.raises(InvalidResolutionError):
        build_cross_section_mesh(CrossSectionShape.rectangle(), 1)


def test_disk_mesh_boundary_on_circle():
    m = build_cross_section_mesh(CrossSectionShape.disk(), 16)
    assert (m.n_nodes, m.n_elements) == (1313, 1280)  # frozen regression values
    b = m.nodes_with(tag=DIRICHLET)
    assert_allclose(np.linalg.norm(m.nodes[b], axis=1), 1.0, atol=1e-10)
    assert_allclose(m.nodes[m.anchor_node], [0.0, -1.0], atol=1e-12)
    check_mesh(m)


def test_anchor_must_be_inside_a_side():
    with pytest.raises(GeometryError):
        CrossSectionShape.rectangle(anchor=(0.0, 0.0))
    with pytest.raises(GeometryError):
        CrossSectionShape.rectangle(anchor=(0.5, 0.5))


def test_graded_axis_contains_required_points():
    ax = graded_axis(0.0, 1.0, [0.1, 0.37], (0.0, 0.2), 0.01, 0.1)
    assert ax[0] == 0.0 and ax[-1] == 1.0
    for p in (0.1, 0.37):
        assert np.min(np.abs(ax - p)) < 1e-14
    assert np.all(np.diff(ax) > 0)
    assert np.diff(ax)[0] <= 0.01 + 1e-12


def test_plain_cell_pairing():
    m = build_cell_mesh(CrossSectionShape.rectangle(), None, resolution=4)
    assert len(m.facets_with(tag=TRUNCATION)) == 0
    lo = m.nodes_with(tag=PERIODIC_LO)
    assert_allclose(np.sort(m.periodic_pairs[:, 0]), lo)
    d = m.nodes[m.periodic_pairs[:, 1]] - m.nodes[m.periodic_pairs[:, 0]]
    assert_allclose(d, np.tile([0.0, 0.0, 1.0], (len(d), 1)), atol=0)
    rep = check_mesh(m)
    assert rep["n_pairs"] == len(lo)


def test_pairing_round_trip():
    m = build_cell_mesh(CrossSectionShape.rectangle(), CavernSpec(h=0.2), resolution=4)
    fwd = dict(m.periodic_pairs)
    back = {v: k for k, v in fwd.items()}
    assert all(back[fwd[k]] == k for k in fwd)


def test_hemisphere_cell_excludes_cavern():
    h = 0.2
    m = build_cell_mesh(CrossSectionShape.rectangle(), CavernSpec(h=h), resolution=6)
    O = np.array([0.5, 0.0, 0.0])
    r = np.linalg.norm(m.nodes - O, axis=1)
    assert r.min() >= h - 1e-10
    cav = m.nodes_with(label="cavern")
    assert_allclose(r[cav], h, atol=1e-12)
    assert np.all(m.nodes[cav, 1] >= -1e-14)
    check_mesh(m)


def test_filled_cell_has_cavern_region():
    m = build_cell_mesh(CrossSectionShape.rectangle(), CavernSpec(h=0.2), resolution=4,
                        fill_cavern=True)
    assert m.has_cavern_fill
    inner = m.cavern_nodes()
    O = np.array([0.5, 0.0, 0.0])
    assert np.all(np.linalg.norm(m.nodes[inner] - O, axis=1) <= 0.2 + 1e-12)
    stripped = m.without_cavern_fill()
    assert stripped.n_nodes < m.n_nodes
    assert not stripped.has_cavern_fill


def test_oversized_cavern_rejected():
    with pytest.raises(GeometryError):
        build_cell_mesh(CrossSectionShape.rectangle(), CavernSpec(h=0.6))


def test_disk_cell_mesh_valid():
    m = build_cell_mesh(CrossSectionShape.disk(), CavernSpec(h=0.2), resolution=4)
    check_mesh(m)
    cav = m.nodes_with(label="cavern")
    O = np.array([0.0, -1.0, 0.0])
    # the patch map bends the cavern slightly: O(h^2) away from the exact sphere
    assert_allclose(np.linalg.norm(m.nodes[cav] - O, axis=1), 0.2, atol=0.2 ** 2)


def test_halfspace_mesh_tags():
    m = build_halfspace_mesh(CavernSpec(h=1.0), 8.0, fit_radii=[3, 4, 5])
    assert set(m.facet_labels) == {"cavern", "flat", "outer"}
    assert len(m.facets_with(tag=TRUNCATION)) > 0
    outer = m.nodes_with(label="outer")
    assert_allclose(np.linalg.norm(m.nodes[outer], axis=1), 8.0, rtol=1e-12)
    assert np.all(m.nodes[:, 0] <= 0.0)
    check_mesh(m)


def test_halfspace_truncation_too_tight():
    with pytest.raises(TruncationTooTightError):
        build_halfspace_mesh(CavernSpec(h=1.0), 2.0)


def test_box_cavern_in_lower_halfspace():
    cav = CavernSpec("box", h=1.0, extents=(0.5, 0.5, 0.5))
    m = build_halfspace_mesh(cav, 8.0, fit_radii=[3, 4, 5])
    nodes = m.nodes[m.nodes_with(label="cavern")]
    assert np.all(nodes[:, 0] <= 1e-14)
    assert np.all(cav.contains(nodes, tol=1e-9))


def test_save_load_round_trip(tmp_path):
    m = build_cell_mesh(CrossSectionShape.rectangle(), CavernSpec(h=0.25), resolution=3,
                        fill_cavern=True)
    path = tmp_path / "cell.mesh"
    save_mesh(m, path)
    back = load_mesh(path)
    assert_allclose(back.nodes, m.nodes, rtol=0, atol=0)
    assert np.array_equal(back.elements, m.elements)
    assert np.array_equal(back.periodic_pairs, m.periodic_pairs)
    assert np.array_equal(back.element_region, m.element_region)
    assert list(back.facet_labels) == list(m.facet_labels)


def test_load_rejects_unknown_header(tmp_path):
    p = tmp_path / "bad.mesh"
    p.write_text("something-else 7\n")
    with pytest.raises(GeometryError):
        load_mesh(p)


def test_rescaled_shape_threshold_geometry():
    s = CrossSectionShape.rectangle().scaled(2.0)
    assert (s.width, s.height) == (2.0, 2.0)
    assert s.anchor == (1.0, 0.0)
    assert math.isclose(s.diameter, 2 * math.sqrt(2))
