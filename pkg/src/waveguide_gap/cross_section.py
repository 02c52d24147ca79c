"""Dirichlet eigenproblem of the cross-section and the data it feeds downstream."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import LinearNDInterpolator

from .fem import DEFAULT_TOL, PreconditionError, assemble, solve_lowest
from .geometry import (CrossSectionShape, GeometryError, Mesh, build_cross_section_mesh)

log = logging.getLogger(__name__)


@dataclass
class CrossSectionSpectrum:
    """Lowest eigenvalues ``M_k`` of the cross-section and the normalised ``V_1``.

    ``V1`` holds nodal values on ``mesh`` with unit L2 norm (mass matrix) and
    positive sign inside; ``dnV1_at_anchor`` is the outward normal derivative
    at the anchor point (negative).
    """

    M: np.ndarray
    V1: np.ndarray
    dnV1_at_anchor: float
    mesh: Mesh
    shape: Optional[CrossSectionShape] = None
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def M1(self) -> float:
        return float(self.M[0])

    @property
    def M2(self) -> float:
        return float(self.M[1])

    @property
    def gap_condition_ok(self) -> bool:
        """Whether ``M1 + pi^2 < M2``: the two lowest cell bands cannot overlap."""
        return self.M1 + math.pi ** 2 < self.M2

    @property
    def T_threshold(self) -> float:
        return math.pi / math.sqrt(self.M2 - self.M1)

    def to_dict(self):
        return {"M": [float(m) for m in self.M], "dnV1_at_anchor": self.dnV1_at_anchor,
                "gap_condition_ok": self.gap_condition_ok, "T_threshold": self.T_threshold,
                "n_nodes": self.mesh.n_nodes, "resolution": self.mesh.info.get("resolution")}


def solve_cross_section(mesh: Mesh, k: int = 3, tol: float = DEFAULT_TOL,
                        seed: int = 0) -> CrossSectionSpectrum:
    """Lowest ``k`` Dirichlet eigenpairs of the 2D mesh (``k >= 2``)."""
    if mesh.dim != 2:
        raise PreconditionError("cross-section problems need a 2D mesh")
    if k < 2:
        raise PreconditionError("at least two eigenvalues are needed")
    pencil = assemble(mesh)
    res = solve_lowest(pencil, k, tol, seed=seed)
    V = np.real(pencil.expand(res.vectors[:, :1]))[:, 0]
    V /= math.sqrt(float(np.real(np.vdot(res.vectors[:, 0], pencil.M @ res.vectors[:, 0]))))
    # sign: positive at the interior node closest to the centroid
    interior = np.setdiff1d(np.arange(mesh.n_nodes), pencil.constrained_dofs)
    centroid = mesh.nodes.mean(axis=0)
    ref = interior[np.argmin(np.linalg.norm(mesh.nodes[interior] - centroid, axis=1))]
    if V[ref] < 0:
        V = -V
    if res.values[1] - res.values[0] <= 10 * tol * res.values[1]:
        log.warning("lowest cross-section eigenvalue looks multiple: %s", res.values[:2])
    shape = mesh.info.get("cross_section")
    spec = CrossSectionSpectrum(M=res.values, V1=V, dnV1_at_anchor=float("nan"), mesh=mesh,
                                shape=shape, residuals=res.residuals)
    if shape is not None and mesh.anchor_node is not None:
        spec.dnV1_at_anchor = normal_derivative_at(spec, mesh, shape.anchor)
    return spec


def cross_section_spectrum(shape: CrossSectionShape, resolution: int, k: int = 3,
                           tol: float = DEFAULT_TOL) -> CrossSectionSpectrum:
    return solve_cross_section(build_cross_section_mesh(shape, resolution), k, tol)


def normal_derivative_at(spectrum: CrossSectionSpectrum, mesh: Mesh, point,
                         n_samples: int = 3) -> float:
    """Outward normal derivative of ``V1`` at a boundary node.

    ``V1`` is sampled at ``n_samples`` points spaced by the local mesh size
    along the inward normal and fitted by ``c1 t + c2 t^2`` (the Dirichlet
    value at ``t = 0`` is built in); the result is ``-c1``.
    """
    if spectrum.shape is None:
        raise PreconditionError("spectrum carries no cross-section shape")
    point = np.asarray(point, dtype=float)
    try:
        local = dataclasses.replace(spectrum.shape, anchor=tuple(point))
    except GeometryError as exc:
        raise PreconditionError(f"point {point} is not on the boundary: {exc}") from exc
    dist = np.linalg.norm(mesh.nodes - point, axis=1)
    node = int(np.argmin(dist))
    if dist[node] > 1e-9 * local.diameter:
        raise PreconditionError(f"point {point} is not a mesh node")
    _, _, nu = local.frame()
    # local mesh size: shortest edge leaving the boundary node
    neigh = np.unique(mesh.elements[np.any(mesh.elements == node, axis=1)])
    neigh = neigh[neigh != node]
    step = float(np.min(np.linalg.norm(mesh.nodes[neigh] - point, axis=1)))
    t = step * np.arange(1, n_samples + 1)
    samples = point[None, :] + t[:, None] * nu[None, :]
    interp = LinearNDInterpolator(mesh.nodes, spectrum.V1)
    vals = interp(samples)
    if np.any(np.isnan(vals)):
        raise PreconditionError("normal samples leave the mesh")
    A = np.column_stack([t, t * t])
    coef, *_ = np.linalg.lstsq(A, vals, rcond=None)
    return float(-coef[0])


def richardson(coarse, fine, order: float = 2.0, ratio: float = 2.0):
    """One Richardson step for values at mesh sizes ``H`` and ``H / ratio``."""
    coarse, fine = np.asarray(coarse, dtype=float), np.asarray(fine, dtype=float)
    return fine + (fine - coarse) / (ratio ** order - 1.0)


@dataclass
class AdmissibilityReport:
    ok: bool
    period: float
    threshold: float

    def to_dict(self):
        return dataclasses.asdict(self)


def check_period_admissibility(spectrum: CrossSectionSpectrum, T: float) -> AdmissibilityReport:
    """A period ``T`` keeps the lowest band gap iff ``T > pi / sqrt(M2 - M1)``."""
    if not T > 0:
        raise PreconditionError("period must be positive")
    thr = spectrum.T_threshold
    return AdmissibilityReport(ok=bool(T > thr), period=float(T), threshold=thr)


def rescale_for_period(shape: CrossSectionShape, T: float) -> CrossSectionShape:
    """Cross-section of the unit-period problem equivalent to period ``T``."""
    if not T > 0:
        raise PreconditionError("period must be positive")
    return shape.scaled(1.0 / T)
