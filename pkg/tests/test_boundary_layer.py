import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from waveguide_gap.boundary_layer import (ExteriorField, compute_polarization,
                                          extract_polarization, hemisphere_moment, solve_exterior)
from waveguide_gap.fem import PreconditionError
from waveguide_gap.geometry import CavernSpec, build_halfspace_mesh

UNIT = CavernSpec("hemisphere", h=1.0)


@pytest.fixture(scope="module")
def field():
    mesh = build_halfspace_mesh(UNIT, 8.0, resolution=4, fit_radii=[3, 4, 5])
    return solve_exterior(mesh, UNIT)


def test_cavern_data_imposed(field):
    cav = field.mesh.nodes_with(label="cavern")
    assert_allclose(field.values[cav], -field.mesh.nodes[cav, 0], rtol=0, atol=0)
    flat = field.mesh.nodes_with(label="flat")
    assert np.all(field.values[flat] == 0)


def test_maximum_principle(field):
    assert field.values.min() >= -1e-12
    assert field.values.max() <= 1.0 + 1e-12


def test_dirichlet_energy(field):
    # dipole -xi_1/|xi|^3 in the half space: 4 pi / 3, minus the truncation effect
    assert_allclose(field.energy, 4 * math.pi / 3, rtol=3e-2)


def test_exact_dipole_moment(field):
    mesh = field.mesh
    r = np.linalg.norm(mesh.nodes, axis=1)
    dipole = -mesh.nodes[:, 0] / r ** 3
    fake = ExteriorField(mesh=mesh, cavern=UNIT, values=dipole, energy=0.0,
                         truncation_radius=1e12)
    for R in (3.0, 4.0, 5.0):
        R_used, M = hemisphere_moment(fake, R)
        assert R_used == R
        assert_allclose(M, -2 * math.pi / 3, rtol=1e-3)
    pol = extract_polarization(fake, [3.0, 4.0, 5.0])
    assert_allclose(pol.P_theta, 2 * math.pi, rtol=5e-3)


def test_hemisphere_polarization(field):
    pol = extract_polarization(field, [3.0, 4.0, 5.0])
    assert pol.P_theta > 0
    assert abs(pol.P_theta / (2 * math.pi) - 1) < 0.05
    assert pol.extrapolated
    assert len(pol.moment_samples) == 3


def test_cubic_scaling():
    p1 = compute_polarization(CavernSpec(radius=1.0), resolution=3).P_theta
    p2 = compute_polarization(CavernSpec(radius=2.0), resolution=3).P_theta
    assert 7.2 <= p2 / p1 <= 8.8


def test_truncation_radius_convergence():
    a = compute_polarization(UNIT, truncation_radius=8.0, fit_radii=[3, 4, 5], resolution=3)
    b = compute_polarization(UNIT, truncation_radius=16.0, fit_radii=[3, 4, 5], resolution=3)
    assert abs(a.P_theta / b.P_theta - 1) < 0.02


def test_box_polarization_positive():
    pol = compute_polarization(CavernSpec("box", extents=(0.5, 0.5, 0.5)), resolution=2)
    assert pol.P_theta > 0


def test_fit_radius_out_of_range(field):
    with pytest.raises(PreconditionError):
        extract_polarization(field, [3.0, 7.9])
    with pytest.raises(PreconditionError):
        extract_polarization(field, [0.5, 3.0])
    with pytest.raises(PreconditionError):
        extract_polarization(field, [3.0])
