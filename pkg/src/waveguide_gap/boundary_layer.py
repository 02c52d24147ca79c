"""Exterior half-space problem and the polarization coefficient of the cavern.

In stretched coordinates ``xi`` the boundary layer solves

    -Laplace W = 0 in {xi_1 < 0} minus the cavern,
    W = -xi_1 on the cavern surface,  W = 0 on the flat face xi_1 = 0,

and decays like ``-(P / 2 pi) xi_1 / |xi|^3``.  ``P`` is read off from the
hemispherical moment ``M_R = int W xi_1 / R dS = -P / 3``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse.linalg as spla

from .fem import (NumericalBreakdownError, PreconditionError, assemble_full, gauss_rule,
                  shape_functions)
from .geometry import TRUNCATION, CavernSpec, Mesh, build_halfspace_mesh, element_faces

log = logging.getLogger(__name__)

DEFAULT_TRUNCATION = 8.0
DEFAULT_FIT = (3.0, 4.0, 5.0)


@dataclass(eq=False)
class ExteriorField:
    mesh: Mesh
    cavern: CavernSpec
    values: np.ndarray
    energy: float
    truncation_radius: float


@dataclass
class PolarizationResult:
    P_theta: float
    moment_samples: list
    extrapolated: bool
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {"P_theta": self.P_theta,
                "moment_samples": [[float(r), float(m)] for r, m in self.moment_samples],
                "extrapolated": self.extrapolated, "diagnostics": self.diagnostics}


def solve_exterior(mesh: Mesh, cavern: CavernSpec) -> ExteriorField:
    """Discrete harmonic W with W = -xi_1 on the cavern and 0 elsewhere on the boundary."""
    if len(mesh.facets_with(tag=TRUNCATION)) == 0:
        raise PreconditionError("half-space mesh without a truncation boundary")
    ops = assemble_full(mesh)
    n = mesh.n_nodes
    g = np.zeros(n)
    fixed = np.zeros(n, dtype=bool)
    cav = mesh.nodes_with(label="cavern")
    g[cav] = -mesh.nodes[cav, 0]
    fixed[cav] = True
    for label in ("flat", "outer"):
        idx = mesh.nodes_with(label=label)
        fixed[idx] = True
        g[idx] = 0.0
    free = np.nonzero(~fixed)[0]
    K = ops.K.tocsr()
    Kff = K[free][:, free].tocsc()
    rhs = -(K[free] @ g)
    try:
        lu = spla.splu(Kff, permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise NumericalBreakdownError(f"exterior solve failed: {exc}", {"n": len(free)}) from exc
    W = g.copy()
    W[free] = lu.solve(rhs)
    energy = float(W @ (K @ W))
    return ExteriorField(mesh=mesh, cavern=cavern, values=W, energy=energy,
                         truncation_radius=float(mesh.info["truncation_radius"]))


def _shell_faces(mesh: Mesh, radius: float):
    """Quadrilateral faces forming the mesh sphere nearest to ``radius``."""
    rho = mesh.info["shell_pre_radius"]
    levels = np.unique(np.round(rho, 12))
    r_min = mesh.info["r_ref"] if mesh.info["cavern"] == "hemisphere" else 0.0
    levels = levels[levels >= r_min]
    level = levels[np.argmin(np.abs(levels - radius))]
    on = np.abs(rho - level) < 1e-9 * max(level, 1.0)
    faces = element_faces(mesh.elements).reshape(-1, 4)
    faces = faces[on[faces].all(axis=1)]
    key = np.sort(faces, axis=1)
    _, first = np.unique(key, axis=0, return_index=True)
    return faces[np.sort(first)], float(level)


def _surface_integrals(nodes, faces, values):
    """``int W xi_1 dS`` and ``int xi_1^2 dS`` over bilinear faces (2x2 Gauss)."""
    pts, wts = gauss_rule(2, 2)
    N, dN = shape_functions(pts, 2)
    X = nodes[faces]
    Xq = np.einsum("qa,fai->fqi", N, X)
    t1 = np.einsum("qa,fai->fqi", dN[:, :, 0], X)
    t2 = np.einsum("qa,fai->fqi", dN[:, :, 1], X)
    dS = np.linalg.norm(np.cross(t1, t2), axis=2) * wts[None, :]
    Wq = np.einsum("qa,fa->fq", N, values[faces])
    x1 = Xq[:, :, 0]
    return float(np.sum(Wq * x1 * dS)), float(np.sum(x1 * x1 * dS))


def hemisphere_moment(field: ExteriorField, radius: float):
    """Raw moment ``M_R`` on the mesh sphere nearest ``radius``; returns (R, M_R)."""
    faces, R = _shell_faces(field.mesh, radius)
    if len(faces) == 0:
        raise PreconditionError(f"no mesh sphere near radius {radius:g}")
    num, den = _surface_integrals(field.mesh.nodes, faces, field.values)
    # normalise by the exact second moment to cancel the facet area error
    exact = 2.0 * np.pi * R ** 4 / 3.0
    return R, num / R * exact / den


def extract_polarization(field: ExteriorField, fit_radii: Sequence[float]) -> PolarizationResult:
    """Polarization coefficient from moments on several spheres, extrapolated in 1/R.

    The homogeneous condition on the truncation sphere ``R_inf`` turns the
    dipole into ``xi_1 (|xi|^-3 - R_inf^-3)``, so each moment is divided by
    ``1 - (R / R_inf)^3`` before the linear fit in ``1/R``.
    """
    radii = sorted(float(r) for r in fit_radii)
    if len(radii) < 2:
        raise PreconditionError("at least two fit radii are needed")
    R_inf = field.truncation_radius
    rho = field.mesh.info["shell_pre_radius"]
    layer = R_inf - np.unique(np.round(rho, 12))[-2]
    r_ref = field.cavern.with_h(1.0).r_ref
    for r in radii:
        if not (r > r_ref and r < R_inf - layer + 1e-12):
            raise PreconditionError(
                f"fit radius {r:g} outside ({r_ref:g}, {R_inf - layer:g})")
    samples, P_corr = [], []
    for r in radii:
        R, M = hemisphere_moment(field, r)
        samples.append((R, M))
        P_corr.append(-3.0 * M / (1.0 - (R / R_inf) ** 3))
    inv = np.array([1.0 / R for R, _ in samples])
    A = np.column_stack([np.ones_like(inv), inv])
    coef, *_ = np.linalg.lstsq(A, np.array(P_corr), rcond=None)
    resid = np.array(P_corr) - A @ coef
    diag = {"truncation_radius": R_inf, "fit_radii": [R for R, _ in samples],
            "P_raw": [-3.0 * M for _, M in samples], "P_corrected": P_corr,
            "fit_residual": float(np.linalg.norm(resid)), "slope_1_over_R": float(coef[1]),
            "energy": field.energy}
    return PolarizationResult(P_theta=float(coef[0]), moment_samples=samples,
                              extrapolated=True, diagnostics=diag)


def compute_polarization(cavern: CavernSpec, truncation_radius: Optional[float] = None,
                         fit_radii: Optional[Sequence[float]] = None, resolution: int = 4,
                         growth: float = 1.25) -> PolarizationResult:
    """Build the half-space mesh, solve and extract ``P_theta`` for a unit-scale cavern."""
    unit = cavern.with_h(1.0)
    r_ref = unit.r_ref
    R_inf = DEFAULT_TRUNCATION * r_ref if truncation_radius is None else float(truncation_radius)
    radii = [f * r_ref for f in DEFAULT_FIT] if fit_radii is None else list(fit_radii)
    mesh = build_halfspace_mesh(unit, R_inf, resolution=resolution, fit_radii=radii,
                                growth=growth)
    field = solve_exterior(mesh, unit)
    result = extract_polarization(field, radii)
    result.diagnostics.update(n_nodes=mesh.n_nodes, resolution=resolution)
    if result.P_theta <= 0:
        log.warning("nonpositive polarization %.4g: mesh too coarse?", result.P_theta)
    return result
