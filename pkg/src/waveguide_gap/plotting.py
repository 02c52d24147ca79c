"""Matplotlib figures written next to the CSV/JSON output."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_bands(diagram, path, reference=None, gap=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    for p in range(diagram.p_max):
        ax.plot(diagram.eta_grid, diagram.lambdas[p], "o-", ms=2.5, lw=1,
                label=f"$\\Lambda_{p + 1}$" if p < 3 else None)
    if reference is not None:
        for p in range(reference.p_max):
            ax.plot(reference.eta_grid, reference.lambdas[p], "k:", lw=0.8,
                    label="no cavern" if p == 0 else None)
    if gap is not None and gap.first_gap is not None:
        lo, hi = gap.first_gap
        ax.axhspan(lo, hi, color="tab:orange", alpha=0.25, label="first gap")
    ax.axvline(math.pi, color="grey", lw=0.5)
    ax.set_xlabel(r"$\eta$")
    ax.set_ylabel(r"$\Lambda_p(\eta)$")
    ax.set_title(f"cell spectrum, h = {diagram.h:g}")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_scaling(result, path):
    rows = [r for r in result.rows if r[1] and r[1] > 0]
    h = np.array([r[0] for r in rows])
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(h, [r[1] for r in rows], "o", label="measured gap")
    hh = np.linspace(h.min() * 0.9, h.max() * 1.1, 50)
    ax.loglog(hh, 2 * result.P * hh ** 3, "--", label=r"$2\mathcal{P}h^3$")
    if result.slope is not None:
        ax.set_title(f"fitted slope {result.slope:.2f}")
    ax.set_xlabel("h")
    ax.set_ylabel("gap length")
    ax.legend()
    _save(fig, path)


def plot_polarization(pol, path):
    R = np.array([r for r, _ in pol.moment_samples])
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(1 / R, pol.diagnostics["P_raw"], "o", label="raw")
    ax.plot(1 / R, pol.diagnostics["P_corrected"], "s", label="truncation corrected")
    ax.axhline(pol.P_theta, color="k", lw=0.8, label=f"extrapolated {pol.P_theta:.4g}")
    ax.set_xlabel("1 / R")
    ax.set_ylabel("P(R)")
    ax.legend()
    _save(fig, path)


def plot_cross_section(spectrum, path):
    mesh = spectrum.mesh
    fig, ax = plt.subplots(figsize=(5, 4.5))
    tri = []
    for q in mesh.elements:
        tri.append(q[[0, 1, 2]])
        tri.append(q[[0, 2, 3]])
    c = ax.tricontourf(mesh.nodes[:, 0], mesh.nodes[:, 1], np.array(tri), spectrum.V1, 30)
    fig.colorbar(c, ax=ax)
    ax.plot(*spectrum.shape.anchor, "r*", ms=10)
    ax.set_aspect("equal")
    ax.set_title(f"$V_1$, $M_1$ = {spectrum.M1:.5g}")
    _save(fig, path)
