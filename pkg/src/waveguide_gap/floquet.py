"""Band diagrams of the periodicity cell, band edges and spectral gaps."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fem import (DEFAULT_TOL, FullOperators, PreconditionError, assemble, assemble_full,
                  solve_lowest)
from .geometry import Mesh

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi


def solve_cell(mesh: Mesh, eta: float, p_max: int = 3, tol: float = DEFAULT_TOL, *,
               constrain_cavern: bool = True, operators: Optional[FullOperators] = None,
               seed: int = 0) -> np.ndarray:
    """The ``p_max`` lowest eigenvalues of the cell problem at Floquet parameter ``eta``."""
    pencil = assemble(mesh, eta, constrain_cavern=constrain_cavern, operators=operators)
    return solve_lowest(pencil, p_max, tol, seed=seed).values


def make_eta_grid(n_uniform: int = 33, n_refined: int = 17, P_hat: Optional[float] = None,
                  h: float = 0.0, window_factor: float = 4.0) -> np.ndarray:
    """Uniform grid on [0, 2 pi) plus a refined patch centred at pi.

    The patch has half width ``window_factor * P_hat * h^3 / (2 pi)`` (clipped
    to the period), which covers the region where the two lowest branches
    interact.  ``pi`` is always a grid point.
    """
    grid = [np.linspace(0.0, TWO_PI, n_uniform, endpoint=False), [math.pi]]
    if P_hat is not None and h > 0 and n_refined > 0:
        half = min(window_factor * P_hat * h ** 3 / TWO_PI, math.pi * (1 - 1e-9))
        n = n_refined + (1 - n_refined % 2)  # odd, so that pi is included
        grid.append(math.pi + half * np.linspace(-1.0, 1.0, n))
    out = np.unique(np.concatenate(grid))
    # drop near-duplicates from the overlay
    keep = np.concatenate([[True], np.diff(out) > 1e-12])
    return out[keep]


def _mirror(eta):
    """Representative of ``eta`` modulo 2 pi in [0, pi] (the spectrum is even in eta)."""
    e = math.fmod(float(eta), TWO_PI)
    if e < 0:
        e += TWO_PI
    return min(e, TWO_PI - e)


@dataclass
class BandDiagram:
    """``lambdas[p, i]`` is the (p+1)-th eigenvalue at ``eta_grid[i]``."""

    eta_grid: np.ndarray
    lambdas: np.ndarray
    h: float = 0.0
    p_max: int = 0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.eta_grid = np.asarray(self.eta_grid, dtype=float)
        self.lambdas = np.asarray(self.lambdas, dtype=float)
        self.p_max = self.lambdas.shape[0]

    def at(self, eta: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.eta_grid - eta)))
        if abs(self.eta_grid[i] - eta) > 1e-12:
            raise KeyError(f"eta = {eta} is not a grid point")
        return self.lambdas[:, i]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eta"] + [f"Lambda_{p + 1}" for p in range(self.p_max)])
            for i, eta in enumerate(self.eta_grid):
                w.writerow([f"{eta:.12g}"] + [f"{v:.12g}" for v in self.lambdas[:, i]])

    @classmethod
    def read_csv(cls, path, h: float = 0.0) -> "BandDiagram":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(eta_grid=data[:, 0], lambdas=data[:, 1:].T, h=h)

    def to_dict(self):
        return {"h": self.h, "p_max": self.p_max, "eta": self.eta_grid.tolist(),
                "lambdas": self.lambdas.tolist(), "diagnostics": self.diagnostics}


def compute_band_diagram(mesh: Mesh, eta_grid: Sequence[float], p_max: int = 3,
                         tol: float = DEFAULT_TOL, *, constrain_cavern: bool = True,
                         workers: int = 1, seed: int = 0, h: Optional[float] = None,
                         operators: Optional[FullOperators] = None) -> BandDiagram:
    """Cell eigenvalues over ``eta_grid``.

    Since the discrete spectrum is 2 pi periodic and even in ``eta``, each
    grid point is mapped to its representative in [0, pi] and every distinct
    representative is solved once.
    """
    grid = np.asarray(eta_grid, dtype=float)
    if len(grid) < 8:
        raise PreconditionError("the eta grid needs at least 8 points")
    if not np.any(np.abs(grid - math.pi) < 1e-12):
        raise PreconditionError("the eta grid must contain pi")
    if np.any(np.diff(grid) <= 0):
        raise PreconditionError("the eta grid must be strictly ascending")
    ops = operators if operators is not None else assemble_full(mesh)
    reps = np.array([_mirror(e) for e in grid])
    keys = np.round(reps, 13)
    unique, inverse = np.unique(keys, return_inverse=True)
    # solve with the exact representative of the first grid point in each class
    first = {k: reps[i] for i, k in reversed(list(enumerate(keys)))}

    def job(key):
        return solve_cell(mesh, first[key], p_max, tol, constrain_cavern=constrain_cavern,
                          operators=ops, seed=seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(job, unique))
    else:
        values = [job(k) for k in unique]
    lam = np.array(values).T[:, inverse]
    if h is None:
        h = float(mesh.info.get("h", 0.0)) if constrain_cavern else 0.0
    diag = {"n_solves": len(unique), "n_free_nodes": mesh.n_nodes, "tol": tol,
            "cavern_constrained": constrain_cavern}
    return BandDiagram(eta_grid=grid, lambdas=lam, h=h, diagnostics=diag)


# ---------------------------------------------------------------------------
# band edges and gaps
# ---------------------------------------------------------------------------


@dataclass
class GapReport:
    bands: list
    gaps: list
    first_gap_length: Optional[float]
    flags: list = field(default_factory=list)

    @property
    def first_gap(self):
        return self.gaps[0] if self.gaps else None

    def to_dict(self):
        return {"bands": [list(map(float, b)) for b in self.bands],
                "gaps": [list(map(float, g)) for g in self.gaps],
                "first_gap_length": self.first_gap_length, "flags": self.flags}


def gaps_between(bands, merge_tol: float = 0.0):
    """Open intervals between the union of closed ``bands``.

    Bands closer than ``merge_tol`` are merged first.
    """
    segs = sorted((float(lo), float(hi)) for lo, hi in bands)
    if not segs:
        return []
    gaps = []
    cur_hi = segs[0][1]
    for lo, hi in segs[1:]:
        if lo > cur_hi + merge_tol:
            gaps.append((cur_hi, lo))
        cur_hi = max(cur_hi, hi)
    return gaps


def band_edges(diagram, tol: float = DEFAULT_TOL) -> GapReport:
    """Band segments ``[min, max]`` per branch and the gaps of their union.

    ``diagram`` is a BandDiagram or a sequence of (lo, hi) segments.  Merging
    uses ``3 tol`` relative to the largest band edge; bands narrower than
    that are reported in ``flags`` (a band may collapse to a point).
    """
    if isinstance(diagram, BandDiagram):
        if diagram.lambdas.size == 0:
            raise PreconditionError("empty band diagram")
        bands = [(float(row.min()), float(row.max())) for row in diagram.lambdas]
    else:
        bands = [(float(lo), float(hi)) for lo, hi in diagram]
        if not bands:
            raise PreconditionError("no bands given")
    scale = max(abs(hi) for _, hi in bands)
    merge = 3.0 * tol * scale
    flags = [f"band {p + 1} has near-zero width {hi - lo:.3g}"
             for p, (lo, hi) in enumerate(bands) if hi - lo < merge]
    gaps = gaps_between(bands, merge)
    return GapReport(bands=bands, gaps=gaps,
                     first_gap_length=(gaps[0][1] - gaps[0][0]) if gaps else None, flags=flags)


# ---------------------------------------------------------------------------
# verification helpers
# ---------------------------------------------------------------------------


@dataclass
class BracketingReport:
    ok: bool
    max_violation: float
    C: list
    n_checked: int
    tolerance: float

    def to_dict(self):
        return {"ok": self.ok, "max_violation": self.max_violation, "C": self.C,
                "n_checked": self.n_checked, "tolerance": self.tolerance}


def check_bracketing(diagram_h: BandDiagram, diagram_0: BandDiagram, tol: float = DEFAULT_TOL,
                     factor: float = 10.0) -> BracketingReport:
    """Check ``Lambda_p^0 <= Lambda_p^h`` pointwise and record ``C_p = max (Lambda^h - Lambda^0) / h^3``.

    The lower bound is tested up to ``factor * tol`` relative.  ``max_violation``
    is the largest relative amount by which it fails (negative if it holds).
    """
    if diagram_h.lambdas.shape != diagram_0.lambdas.shape or not np.allclose(
            diagram_h.eta_grid, diagram_0.eta_grid, rtol=0, atol=1e-14):
        raise PreconditionError("diagrams must share the eta grid and the number of bands")
    lh, l0 = diagram_h.lambdas, diagram_0.lambdas
    rel = (l0 - lh) / np.abs(lh)
    max_violation = float(rel.max())
    h = diagram_h.h
    C = ((lh - l0).max(axis=1) / h ** 3).tolist() if h > 0 else [0.0] * len(lh)
    return BracketingReport(ok=bool(max_violation <= factor * tol), max_violation=max_violation,
                            C=[float(c) for c in C], n_checked=int(lh.size),
                            tolerance=factor * tol)


def conjugation_defect(diagram: BandDiagram) -> float:
    """Largest relative difference between ``Lambda(eta)`` and ``Lambda(2 pi - eta)`` on the grid."""
    worst = 0.0
    for i, eta in enumerate(diagram.eta_grid):
        j = np.nonzero(np.abs(diagram.eta_grid - (TWO_PI - eta) % TWO_PI) < 1e-12)[0]
        if len(j):
            a, b = diagram.lambdas[:, i], diagram.lambdas[:, j[0]]
            worst = max(worst, float(np.max(np.abs(a - b) / np.abs(a))))
    return worst


def unperturbed_branches(eta, M, p_max: int, q_range: int = 3) -> np.ndarray:
    """Sorted values ``M_k + (eta - 2 pi q)^2`` of the cylinder: the lowest ``p_max`` per eta."""
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    q = np.arange(-q_range, q_range + 1)
    vals = (np.asarray(M)[None, :, None] + (eta[:, None, None] - TWO_PI * q[None, None, :]) ** 2)
    vals = np.sort(vals.reshape(len(eta), -1), axis=1)[:, :p_max]
    return vals.T


def save_gap_report(report: GapReport, path, extra: Optional[dict] = None) -> None:
    data = report.to_dict()
    if extra:
        data.update(extra)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
