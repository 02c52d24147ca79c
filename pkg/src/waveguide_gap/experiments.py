"""End-to-end studies driven by an ExperimentConfig.

Each ``run_*`` function computes, writes its CSV/JSON files into the output
directory and returns an in-memory result.  Plots are optional and go next
to the data.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import __version__
from .asymptotics import (OutsideValidityWarning, coupling_constant, coupling_matrix,
                          fit_remainder_constant, make_prediction, predict_eigenvalues)
from .boundary_layer import PolarizationResult, compute_polarization
from .config import ExperimentConfig, ensure_output_dir
from .cross_section import CrossSectionSpectrum, cross_section_spectrum, richardson
from .fem import FullOperators, assemble_full
from .floquet import (BandDiagram, band_edges, check_bracketing, compute_band_diagram,
                      conjugation_defect, make_eta_grid, solve_cell, unperturbed_branches)
from .geometry import CavernSpec, build_cell_mesh

log = logging.getLogger(__name__)


def fmt(x) -> str:
    """Decimal with 12 significant digits (the CSV convention)."""
    return f"{float(x):.12g}"


def module_versions() -> dict:
    import matplotlib
    import scipy
    import yaml

    return {"waveguide_gap": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__, "pyyaml": yaml.__version__,
            "python": platform.python_version()}


def write_report(out: Path, cfg: ExperimentConfig, command: str, payload: dict,
                 name: str = "report.json") -> Path:
    data = {"command": command, "config_hash": cfg.digest(), "versions": module_versions(),
            "config": cfg.to_dict(), "results": payload}
    path = out / name
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_json_default)
    return path


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not serialisable: {type(obj)}")


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, int, np.floating, np.integer))
                        and not isinstance(v, bool) else v for v in row])


def _plots(cfg):
    if not cfg.output.plots:
        return None
    from . import plotting
    return plotting


# ---------------------------------------------------------------------------
# cross-section
# ---------------------------------------------------------------------------


@dataclass
class CrossSectionStudy:
    spectra: list
    M_extrapolated: np.ndarray
    dnV1: float
    gap_condition_ok: bool
    T_threshold: float

    @property
    def finest(self) -> CrossSectionSpectrum:
        return self.spectra[-1]

    def to_dict(self):
        return {"resolutions": [s.mesh.info["resolution"] for s in self.spectra],
                "M": [[float(m) for m in s.M] for s in self.spectra],
                "M_extrapolated": [float(m) for m in self.M_extrapolated],
                "dnV1_at_anchor": self.dnV1, "gap_condition_ok": self.gap_condition_ok,
                "T_threshold": self.T_threshold}


def cross_section_study(cfg: ExperimentConfig, k: int = 3) -> CrossSectionStudy:
    shape = cfg.cross_section.shape()
    res = sorted(int(r) for r in cfg.mesh.cross_section_resolutions)
    spectra = [cross_section_spectrum(shape, r, k, cfg.solver.tol) for r in res]
    if len(spectra) >= 2 and res[-1] == 2 * res[-2]:
        M = richardson(spectra[-2].M, spectra[-1].M)
    else:
        M = spectra[-1].M.copy()
    fin = spectra[-1]
    return CrossSectionStudy(spectra=spectra, M_extrapolated=M, dnV1=fin.dnV1_at_anchor,
                             gap_condition_ok=bool(M[0] + math.pi ** 2 < M[1]),
                             T_threshold=float(math.pi / math.sqrt(M[1] - M[0])))


def run_cross_section(cfg: ExperimentConfig, out=None) -> CrossSectionStudy:
    out = ensure_output_dir(out or cfg.output.directory)
    study = cross_section_study(cfg)
    rows = []
    for s in study.spectra:
        for i, m in enumerate(s.M):
            rows.append((s.mesh.info["resolution"], i + 1, float(m)))
    for i, m in enumerate(study.M_extrapolated):
        rows.append(("extrapolated", i + 1, float(m)))
    _write_rows(out / "cross_section.csv", ["resolution", "k", "M_k"], rows)
    write_report(out, cfg, "cross-section", study.to_dict())
    plotting = _plots(cfg)
    if plotting:
        plotting.plot_cross_section(study.finest, out / "cross_section_V1.png")
    return study


# ---------------------------------------------------------------------------
# polarization
# ---------------------------------------------------------------------------


def polarization_for(cfg: ExperimentConfig) -> PolarizationResult:
    cav = cfg.cavern.spec()
    r_ref = cav.r_ref
    return compute_polarization(cav, truncation_radius=cfg.polarization.truncation_factor * r_ref,
                                fit_radii=[f * r_ref for f in cfg.polarization.fit_factors],
                                resolution=cfg.polarization.resolution)


def run_polarization(cfg: ExperimentConfig, out=None) -> PolarizationResult:
    out = ensure_output_dir(out or cfg.output.directory)
    pol = polarization_for(cfg)
    d = pol.diagnostics
    rows = [(R, M, praw, pc) for (R, M), praw, pc in
            zip(pol.moment_samples, d["P_raw"], d["P_corrected"])]
    _write_rows(out / "polarization.csv", ["R", "M_R", "P_raw", "P_corrected"], rows)
    write_report(out, cfg, "polarization", pol.to_dict())
    plotting = _plots(cfg)
    if plotting:
        plotting.plot_polarization(pol, out / "polarization.png")
    return pol


# ---------------------------------------------------------------------------
# band diagrams
# ---------------------------------------------------------------------------


@dataclass
class CellStudy:
    """Perturbed and unperturbed diagrams of one cavern scale on a shared mesh."""

    h: float
    diagram: BandDiagram
    unperturbed: Optional[BandDiagram]
    mesh_nodes: int
    gap: object = None
    bracketing: object = None


def cell_mesh(cfg: ExperimentConfig, h: float):
    return build_cell_mesh(cfg.cross_section.shape(), cfg.cavern.spec(h),
                           refinement_levels=cfg.mesh.refinement_levels,
                           resolution=cfg.mesh.cell_resolution, fill_cavern=True)


def cell_study(cfg: ExperimentConfig, h: float, P_hat: Optional[float], *, workers: int = 1,
               with_unperturbed: bool = True) -> CellStudy:
    mesh = cell_mesh(cfg, h)
    ops = assemble_full(mesh)
    g = cfg.eta_grid
    grid = make_eta_grid(g.n_uniform, g.n_refined, P_hat, h, g.window_factor)
    kw = dict(p_max=cfg.solver.p_max, tol=cfg.solver.tol, workers=workers, seed=cfg.seed,
              operators=ops)
    diag = compute_band_diagram(mesh, grid, h=h, **kw)
    d0 = None
    study = CellStudy(h=h, diagram=diag, unperturbed=None, mesh_nodes=mesh.n_nodes)
    if with_unperturbed:
        d0 = compute_band_diagram(mesh, grid, constrain_cavern=False, h=0.0, **kw)
        study.unperturbed = d0
        study.bracketing = check_bracketing(diag, d0, cfg.solver.tol)
    study.gap = band_edges(diag, cfg.solver.tol)
    return study


def unperturbed_cylinder(cfg: ExperimentConfig, grid, workers: int = 1) -> BandDiagram:
    """Diagram of the cell without cavern on a uniform mesh."""
    mesh = build_cell_mesh(cfg.cross_section.shape(), None,
                           resolution=cfg.mesh.unperturbed_resolution)
    return compute_band_diagram(mesh, grid, cfg.solver.p_max, cfg.solver.tol, workers=workers,
                                seed=cfg.seed, h=0.0)


def coupling_from(cfg: ExperimentConfig):
    """Computed cross-section data, polarization and coupling constant."""
    cs = cross_section_study(cfg)
    pol = polarization_for(cfg)
    P = coupling_constant(pol.P_theta, cs.dnV1)
    return cs, pol, P


def run_bands(cfg: ExperimentConfig, out=None, workers: int = 1) -> dict:
    out = ensure_output_dir(out or cfg.output.directory)
    cs, pol, P = coupling_from(cfg)
    plotting = _plots(cfg)
    payload = {"cross_section": cs.to_dict(), "P_theta": pol.P_theta, "P": P, "cells": []}
    g = cfg.eta_grid
    base_grid = make_eta_grid(g.n_uniform, 0)
    cyl = unperturbed_cylinder(cfg, base_grid, workers)
    cyl.write_csv(out / "bands_unperturbed.csv")
    exact = unperturbed_branches(cyl.eta_grid, cs.M_extrapolated, cyl.p_max)
    payload["unperturbed"] = {"max_relative_error_vs_branches":
                              float(np.max(np.abs(cyl.lambdas - exact) / exact)),
                              "gaps": band_edges(cyl, cfg.solver.tol).to_dict()}
    for h in cfg.cavern.h:
        st = cell_study(cfg, h, P, workers=workers)
        st.diagram.write_csv(out / f"bands_h{h:g}.csv")
        st.unperturbed.write_csv(out / f"bands_h{h:g}_shared_unperturbed.csv")
        payload["cells"].append({"h": h, "n_nodes": st.mesh_nodes, "gap": st.gap.to_dict(),
                                 "bracketing": st.bracketing.to_dict(),
                                 "conjugation_defect": conjugation_defect(st.diagram)})
        if plotting:
            plotting.plot_bands(st.diagram, out / f"bands_h{h:g}.png", reference=st.unperturbed,
                                gap=st.gap)
    write_report(out, cfg, "bands", payload)
    return payload


# ---------------------------------------------------------------------------
# gap scaling
# ---------------------------------------------------------------------------


@dataclass
class LogLogFit:
    slope: float
    intercept: float
    ci: tuple
    n: int


def loglog_fit(x, y, level: float = 0.95) -> LogLogFit:
    """Least squares of ``ln y`` against ``ln x`` with a t-based interval on the slope."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    n = len(lx)
    if n < 2:
        raise ValueError("need at least two points")
    A = np.column_stack([lx, np.ones(n)])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    if n > 2:
        resid = ly - A @ coef
        s2 = float(resid @ resid) / (n - 2)
        se = math.sqrt(s2 / float(np.sum((lx - lx.mean()) ** 2)))
        q = stats.t.ppf(0.5 + level / 2, n - 2)
        ci = (float(coef[0] - q * se), float(coef[0] + q * se))
    else:
        ci = (float("nan"), float("nan"))
    return LogLogFit(slope=float(coef[0]), intercept=float(coef[1]), ci=ci, n=n)


@dataclass
class ScalingStudyResult:
    """Rows ``(h, l_measured, l_predicted, ratio, Lambda_1(pi), Lambda_2(pi))`` and fits."""

    rows: list
    P: float
    M1: float
    slope: Optional[float] = None
    slope_ci: Optional[tuple] = None
    remainder_exponent: Optional[float] = None
    C_Lambda: Optional[float] = None
    failures: dict = field(default_factory=dict)
    details: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def scaling_fits(result: ScalingStudyResult) -> ScalingStudyResult:
    ok = [r for r in result.rows if r[1] is not None and r[1] > 0]
    if len(ok) >= 3:
        h = [r[0] for r in ok]
        fit = loglog_fit(h, [r[1] for r in ok])
        result.slope, result.slope_ci = fit.slope, fit.ci
        rem = [abs(r[1] - r[2]) for r in ok]
        if all(v > 0 for v in rem):
            result.remainder_exponent = loglog_fit(h, rem).slope
        result.C_Lambda = fit_remainder_constant(h, [r[1] for r in ok], [r[2] for r in ok])
    return result


def run_gap_scan(cfg: ExperimentConfig, out=None, workers: int = 1) -> ScalingStudyResult:
    out = ensure_output_dir(out or cfg.output.directory)
    cs, pol, P = coupling_from(cfg)
    M1 = float(cs.M_extrapolated[0])
    result = ScalingStudyResult(rows=[], P=P, M1=M1)
    plotting = _plots(cfg)
    diagrams = []
    for h in cfg.cavern.h:
        try:
            st = cell_study(cfg, h, P, workers=workers, with_unperturbed=False)
        except Exception as exc:  # recorded, the study continues
            log.error("h = %g failed: %s", h, exc)
            result.failures[str(h)] = f"{type(exc).__name__}: {exc}"
            continue
        st.diagram.write_csv(out / f"bands_h{h:g}.csv")
        diagrams.append(st.diagram)
        lam_pi = st.diagram.at(math.pi)
        gap = st.gap.first_gap
        l_meas = (gap[1] - gap[0]) if gap else 0.0
        l_pred = 2.0 * P * h ** 3
        result.rows.append((h, l_meas, l_pred, l_meas / l_pred, float(lam_pi[0]),
                            float(lam_pi[1])))
        result.details.append({
            "h": h, "gap": st.gap.to_dict(), "n_nodes": st.mesh_nodes,
            "gap_above_first_band": bool(gap is not None
                                         and abs(gap[0] - st.gap.bands[0][1]) <= 1e-12),
            "lower_edge_relative_to_M1_plus_pi2":
                (gap[0] / (M1 + math.pi ** 2) - 1.0) if gap else None,
            "n_solves": st.diagram.diagnostics["n_solves"]})
    if not result.rows:
        raise RuntimeError("every h value failed")
    scaling_fits(result)
    _write_rows(out / "scaling.csv", ["h", "l_measured", "l_predicted", "ratio"],
                [r[:4] for r in result.rows])
    payload = result.to_dict()
    payload.update(cross_section=cs.to_dict(), polarization=pol.to_dict())
    write_report(out, cfg, "gap-scan", payload)
    if cfg.output.dat:
        with open(out / "scaling.dat", "w") as fh:
            fh.write("# h l_measured l_predicted ratio\n")
            for r in result.rows:
                fh.write(" ".join(fmt(v) for v in r[:4]) + "\n")
    if plotting:
        plotting.plot_scaling(result, out / "scaling.png")
        for d in diagrams:
            plotting.plot_bands(d, out / f"bands_h{d.h:g}.png")
    return result


# ---------------------------------------------------------------------------
# avoided crossing
# ---------------------------------------------------------------------------


@dataclass
class BetaSweep:
    """Measured and predicted branch offsets from the centre value at ``eta = pi + beta h^3``."""

    h: float
    P: float
    centre: float
    beta: np.ndarray
    measured: np.ndarray  # (2, n): lower, upper branch minus centre
    predicted: np.ndarray
    deviation: np.ndarray  # (2, n): |measured - predicted| / predicted splitting
    mirror_defect: float

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in asdict(self).items()}


def beta_sweep(cfg: ExperimentConfig, h: float, P: float, betas, *,
               operators: Optional[FullOperators] = None, mesh=None) -> BetaSweep:
    """Sweep ``beta`` on the shared mesh of scale ``h``.

    The centre ``M1 + pi^2`` is the mean of the two unperturbed eigenvalues at
    ``eta = pi`` on the same mesh, so the discretisation error of the
    unperturbed problem cancels.  Deviations are measured relative to the
    predicted branch splitting ``2 h^3 sqrt(P^2 + 4 pi^2 beta^2)``, the only
    scale that is nonzero for both branches at ``beta = 0``.
    """
    mesh = mesh if mesh is not None else cell_mesh(cfg, h)
    ops = operators if operators is not None else assemble_full(mesh)
    tol, seed = cfg.solver.tol, cfg.seed
    lam0 = solve_cell(mesh, math.pi, 2, tol, constrain_cavern=False, operators=ops, seed=seed)
    centre = float(lam0.mean())
    betas = np.asarray(betas, dtype=float)
    meas = np.empty((2, len(betas)))
    mirror = 0.0
    cache = {}
    for i, b in enumerate(betas):
        key = round(abs(b), 12)
        if key not in cache:
            cache[key] = solve_cell(mesh, math.pi + abs(b) * h ** 3, 2, tol, operators=ops,
                                    seed=seed)
        meas[:, i] = cache[key] - centre
    # evenness, checked directly on a few points with the negative sign
    for b in betas[betas > 0][:3]:
        lp = cache[round(b, 12)]
        lm = solve_cell(mesh, math.pi - b * h ** 3, 2, tol, operators=ops, seed=seed)
        mirror = max(mirror, float(np.max(np.abs(lp - lm) / lp)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OutsideValidityWarning)
        lo, hi = predict_eigenvalues(h, betas, 0.0, P, warn=False)
    pred = np.vstack([lo, hi]) - math.pi ** 2
    split = 2.0 * h ** 3 * np.hypot(P, 2.0 * math.pi * betas)
    dev = np.abs(meas - pred) / split[None, :]
    return BetaSweep(h=h, P=P, centre=centre, beta=betas, measured=meas, predicted=pred,
                     deviation=dev, mirror_defect=mirror)


# ---------------------------------------------------------------------------
# verification suite
# ---------------------------------------------------------------------------


@dataclass
class Check:
    name: str
    ok: bool
    detail: dict


ALL_CHECKS = ("cross_section", "polarization", "coupling", "symmetry", "bracketing")


def run_verify(cfg: ExperimentConfig, out=None, checks: Optional[Sequence[str]] = None,
               workers: int = 1) -> list:
    """Invariant suite; returns a list of Check.  An empty selection does nothing."""
    out = ensure_output_dir(out or cfg.output.directory)
    selected = list(ALL_CHECKS if checks is None else checks)
    unknown = set(selected) - set(ALL_CHECKS)
    if unknown:
        raise ValueError(f"unknown checks {sorted(unknown)}")
    if not selected:
        warnings.warn("no checks selected", UserWarning)
    results: list = []
    tol = cfg.solver.tol
    cs = pol = None
    if "cross_section" in selected or "bracketing" in selected or "symmetry" in selected:
        cs = cross_section_study(cfg)
    if "cross_section" in selected:
        M = cs.M_extrapolated
        results.append(Check("cross_section.simple_first", bool(M[1] - M[0] > 10 * tol * M[1]),
                             {"M1": float(M[0]), "M2": float(M[1])}))
        results.append(Check("cross_section.normal_derivative_negative", bool(cs.dnV1 < 0),
                             {"dnV1": cs.dnV1}))
        res = cs.spectra
        if len(res) >= 2:
            mono = bool(np.all(res[-1].M <= res[-2].M * (1 + 10 * tol)))
            results.append(Check("cross_section.refinement_monotone", mono,
                                 {"coarse": res[-2].M.tolist(), "fine": res[-1].M.tolist()}))
    if "polarization" in selected:
        pol = polarization_for(cfg)
        results.append(Check("polarization.positive", bool(pol.P_theta > 0),
                             {"P_theta": pol.P_theta}))
        cav = cfg.cavern.spec()
        if cav.shape == "hemisphere":
            exact = 2.0 * math.pi * cav.radius ** 3
            rel = abs(pol.P_theta / exact - 1.0)
            results.append(Check("polarization.hemisphere_oracle", bool(rel <= 0.05),
                                 {"P_theta": pol.P_theta, "exact": exact, "rel_error": rel}))
    if "coupling" in selected:
        rng = np.random.default_rng(cfg.seed)
        worst = 0.0
        for _ in range(100):
            b, P = rng.uniform(-20.0, 20.0), rng.uniform(0.1, 500.0)
            c = coupling_matrix(b, P)
            V = c.vectors
            worst = max(worst, abs(c.values.sum() / (2 * P) - 1),
                        float(np.abs(V.T @ V - np.eye(2)).max()),
                        float(np.abs(c.matrix @ V - V * c.values).max() / np.abs(c.matrix).max()))
            if b != 0:
                worst = max(worst, abs(c.values.prod() / (-4 * math.pi ** 2 * b * b) - 1))
        results.append(Check("coupling.identities", bool(worst <= 1e-12), {"worst": worst}))
    if "symmetry" in selected or "bracketing" in selected:
        h = float(cfg.cavern.h[len(cfg.cavern.h) // 2])
        mesh = cell_mesh(cfg, h)
        ops = assemble_full(mesh)
        if "symmetry" in selected:
            eta = 1.1
            a = solve_cell(mesh, eta, cfg.solver.p_max, tol, operators=ops, seed=cfg.seed)
            b = solve_cell(mesh, eta + 2 * math.pi, cfg.solver.p_max, tol, operators=ops,
                           seed=cfg.seed)
            c = solve_cell(mesh, 2 * math.pi - eta, cfg.solver.p_max, tol, operators=ops,
                           seed=cfg.seed)
            gauge = float(np.max(np.abs(a - b) / a))
            conj = float(np.max(np.abs(a - c) / a))
            results.append(Check("floquet.gauge_periodicity", gauge <= 10 * tol,
                                 {"h": h, "defect": gauge}))
            results.append(Check("floquet.conjugation_symmetry", conj <= 10 * tol,
                                 {"h": h, "defect": conj}))
            split = solve_cell(mesh, math.pi, 2, tol, operators=ops, seed=cfg.seed)
            results.append(Check("floquet.avoided_crossing", bool(split[1] - split[0]
                                                                  > 10 * tol * split[1]),
                                 {"h": h, "split": float(split[1] - split[0])}))
        if "bracketing" in selected:
            g = cfg.eta_grid
            grid = make_eta_grid(g.n_uniform, 0)
            kw = dict(p_max=cfg.solver.p_max, tol=tol, workers=workers, seed=cfg.seed,
                      operators=ops)
            dh = compute_band_diagram(mesh, grid, h=h, **kw)
            d0 = compute_band_diagram(mesh, grid, constrain_cavern=False, h=0.0, **kw)
            br = check_bracketing(dh, d0, tol)
            results.append(Check("floquet.bracketing", br.ok, br.to_dict()))
            results.append(Check("floquet.positivity", bool(np.all(dh.lambdas > 0)),
                                 {"min": float(dh.lambdas.min())}))
    payload = {"checks": [asdict(c) for c in results],
               "passed": all(c.ok for c in results), "selected": selected}
    write_report(out, cfg, "verify", payload)
    return results
