"""Q1 finite elements and constrained Hermitian eigenproblems.

The cell problem is discretised in Bloch form: ``u = exp(i eta z) U`` turns
the shifted form ``((grad + i eta e3) U, (grad + i eta e3) V)`` into the plain
Dirichlet form ``(grad u, grad v)`` on quasi-periodic functions with
``u(y, 1/2) = exp(i eta) u(y, -1/2)``.  The phase is imposed on the paired
nodes of the periodic faces, so the discrete spectrum depends on ``eta`` only
through ``exp(i eta)``.
"""

from __future__ import annotations

import gc
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Mesh

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DENSE_LIMIT = 800


class ConfigurationError(ValueError):
    """Inconsistent problem set-up (e.g. a Floquet parameter on a 2D mesh)."""


class PreconditionError(ValueError):
    pass


class NumericalBreakdownError(RuntimeError):
    """Factorisation or eigen-iteration failure; ``diagnostics`` holds details."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# reference elements
# ---------------------------------------------------------------------------


def _reference_nodes(dim):
    if dim == 2:
        return np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    base = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    return np.vstack([np.column_stack([base, -np.ones(4)]), np.column_stack([base, np.ones(4)])])


def shape_functions(points, dim):
    """Q1 shape values (nq, nv) and reference gradients (nq, nv, dim) at ``points``."""
    ref = _reference_nodes(dim)
    pts = np.atleast_2d(points)
    fac = 0.5 * (1.0 + pts[:, None, :] * ref[None, :, :])  # (nq, nv, dim)
    N = fac.prod(axis=2)
    dN = np.empty(fac.shape)
    for j in range(dim):
        others = np.delete(fac, j, axis=2).prod(axis=2)
        dN[:, :, j] = 0.5 * ref[None, :, j] * others
    return N, dN


def gauss_rule(dim, order=2):
    g, w = np.polynomial.legendre.leggauss(order)
    grids = np.meshgrid(*([g] * dim), indexing="ij")
    wgrid = np.meshgrid(*([w] * dim), indexing="ij")
    pts = np.stack([x.ravel() for x in grids], axis=1)
    wts = np.prod(np.stack([x.ravel() for x in wgrid], axis=1), axis=1)
    return pts, wts


def corner_jacobians(nodes, elements):
    """Jacobian determinants at the element corners, shape (E, nv)."""
    dim = nodes.shape[1]
    _, dN = shape_functions(_reference_nodes(dim), dim)
    X = nodes[elements]
    J = np.einsum("eai,qaj->eqij", X, dN)
    return np.linalg.det(J)


def element_matrices(nodes, elements, order=2):
    """Element stiffness and mass matrices of the Laplacian, shape (E, nv, nv)."""
    dim = nodes.shape[1]
    pts, wts = gauss_rule(dim, order)
    N, dN = shape_functions(pts, dim)
    X = nodes[elements]
    J = np.einsum("eai,qaj->eqij", X, dN)
    det = np.linalg.det(J)
    if np.any(det <= 0):
        raise NumericalBreakdownError("element with nonpositive Jacobian",
                                      {"min_det": float(det.min())})
    inv = np.linalg.inv(J)
    G = np.einsum("qaj,eqji->eqai", dN, inv)
    dv = det * wts[None, :]
    Ke = np.einsum("eq,eqai,eqbi->eab", dv, G, G)
    Me = np.einsum("eq,qa,qb->eab", dv, N, N)
    return Ke, Me


@dataclass(frozen=True, eq=False)
class FullOperators:
    """Unconstrained stiffness and mass matrices over all mesh nodes."""

    K: sp.csr_matrix
    M: sp.csr_matrix


def assemble_full(mesh: Mesh) -> FullOperators:
    Ke, Me = element_matrices(mesh.nodes, mesh.elements)
    nv = mesh.elements.shape[1]
    rows = np.repeat(mesh.elements, nv, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, nv)).ravel()
    n = mesh.n_nodes
    K = sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))
    M = sp.csr_matrix((Me.ravel(), (rows, cols)), shape=(n, n))
    K = 0.5 * (K + K.T)
    M = 0.5 * (M + M.T)
    return FullOperators(K.tocsr(), M.tocsr())


# ---------------------------------------------------------------------------
# constrained pencils
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HermitianPencil:
    """Constrained pair (K, M) on the free degrees of freedom.

    ``prolongation`` maps free coefficients to nodal values (including the
    Bloch phase on the upper periodic face and zeros on constrained nodes).
    """

    K: sp.spmatrix
    M: sp.spmatrix
    constrained_dofs: np.ndarray
    eta: Optional[float]
    prolongation: sp.csr_matrix
    free_nodes: np.ndarray

    @property
    def n_free(self) -> int:
        return self.K.shape[0]

    def expand(self, vectors):
        """Nodal values of free-dof vectors (columns)."""
        return self.prolongation @ vectors


def bloch_phase(eta):
    """``exp(i eta)`` with exact real values at multiples of pi."""
    c, s = math.cos(eta), math.sin(eta)
    if abs(s) < 1e-14:
        return complex(round(c), 0.0)
    if abs(c) < 1e-14:
        return complex(0.0, round(s))
    return complex(c, s)


def assemble(mesh: Mesh, eta: Optional[float] = None, *, constrain_cavern: bool = True,
             operators: Optional[FullOperators] = None) -> HermitianPencil:
    """Constrained pencil of the cell (``eta`` given) or a plain Dirichlet problem.

    Dirichlet nodes are eliminated.  With ``constrain_cavern=False`` the
    nodes of a filled cavern stay free, giving the unperturbed cell on the
    same mesh.
    """
    pairs = mesh.periodic_pairs
    if eta is not None and (mesh.dim != 3 or len(pairs) == 0):
        raise ConfigurationError("a Floquet parameter needs a 3D cell mesh with periodic pairing")
    if eta is None and len(pairs):
        raise ConfigurationError("a periodic cell mesh needs a Floquet parameter eta")
    ops = operators if operators is not None else assemble_full(mesh)
    n = mesh.n_nodes
    constrained = mesh.dirichlet_nodes(include_cavern=constrain_cavern)
    is_con = np.zeros(n, dtype=bool)
    is_con[constrained] = True
    is_hi = np.zeros(n, dtype=bool)
    if len(pairs):
        is_hi[pairs[:, 1]] = True
    free = np.nonzero(~is_con & ~is_hi)[0]
    dof = -np.ones(n, dtype=np.int64)
    dof[free] = np.arange(len(free))
    rows = [free]
    cols = [np.arange(len(free))]
    phase = 1.0 if eta is None else bloch_phase(eta)
    vals = [np.ones(len(free), dtype=complex)]
    if len(pairs):
        lo, hi = pairs[:, 0], pairs[:, 1]
        ok = dof[lo] >= 0
        rows.append(hi[ok])
        cols.append(dof[lo[ok]])
        vals.append(np.full(ok.sum(), phase, dtype=complex))
    data = np.concatenate(vals)
    if np.all(data.imag == 0):
        data = data.real
    P = sp.csr_matrix((data, (np.concatenate(rows), np.concatenate(cols))), shape=(n, len(free)))
    PH = P.conj().T.tocsr()
    K = PH @ ops.K @ P
    M = PH @ ops.M @ P
    K = (0.5 * (K + K.conj().T)).tocsr()
    M = (0.5 * (M + M.conj().T)).tocsr()
    return HermitianPencil(K=K, M=M, constrained_dofs=constrained, eta=eta,
                           prolongation=P, free_nodes=free)


# ---------------------------------------------------------------------------
# eigen solver
# ---------------------------------------------------------------------------


@dataclass
class EigenResult:
    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    iterations: dict = field(default_factory=dict)


def _rayleigh_ritz(K, M, V, k):
    Kr = V.conj().T @ (K @ V)
    Mr = V.conj().T @ (M @ V)
    Kr = 0.5 * (Kr + Kr.conj().T)
    Mr = 0.5 * (Mr + Mr.conj().T)
    w, Y = sla.eigh(Kr, Mr)
    return w[:k], V @ Y[:, :k]


def _residuals(K, M, values, vectors):
    KU = K @ vectors
    R = KU - (M @ vectors) * values[None, :]
    return np.linalg.norm(R, axis=0) / np.maximum(np.linalg.norm(KU, axis=0), 1e-300)


def solve_lowest(pencil: HermitianPencil, k: int, tol: float = DEFAULT_TOL, *, seed: int = 0,
                 method: str = "auto", memory_cap: int = 2_000_000) -> EigenResult:
    """The ``k`` smallest eigenpairs of ``K u = lambda M u`` on the free dofs.

    ``method`` is ``dense``, ``shift-invert`` (sparse LU about 0) or
    ``lobpcg``; ``auto`` picks dense for small problems and falls back to
    LOBPCG when the number of free dofs exceeds ``memory_cap``.
    """
    n = pencil.n_free
    if k < 1 or k > n:
        raise PreconditionError(f"requested {k} eigenpairs but only {n} free dofs")
    if not tol > 0:
        raise PreconditionError("tol must be positive")
    K, M = pencil.K, pencil.M
    if method == "auto":
        method = "dense" if n <= DENSE_LIMIT else ("shift-invert" if n <= memory_cap else "lobpcg")
    if method == "dense":
        try:
            w, V = sla.eigh(K.toarray(), M.toarray(), subset_by_index=[0, k - 1])
        except np.linalg.LinAlgError as exc:
            raise NumericalBreakdownError(f"dense eigensolve failed: {exc}", {"n": n}) from exc
        info = {"method": "dense", "n": n}
    elif method == "shift-invert":
        w, V, info = _shift_invert(K, M, k, tol, seed)
    elif method == "lobpcg":
        w, V, info = _lobpcg(K, M, k, tol, seed)
    else:
        raise ValueError(f"unknown eigen method {method!r}")
    order = np.argsort(w)
    w, V = np.asarray(w)[order].real, V[:, order]
    res = _residuals(K, M, w, V)
    info["max_residual"] = float(res.max())
    if res.max() > tol:
        raise NumericalBreakdownError(
            f"eigen residual {res.max():.2e} exceeds tolerance {tol:.1e}", info)
    return EigenResult(values=w, vectors=V, residuals=res, iterations=info)


def _start_vector(n, dtype, seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    if np.issubdtype(dtype, np.complexfloating):
        v = v + 1j * rng.standard_normal(n)
    return v


def _shift_invert(K, M, k, tol, seed, sigma=0.0):
    n = K.shape[0]
    dtype = np.result_type(K.dtype, M.dtype)
    A = (K - sigma * M).tocsc()
    try:
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A",
                       options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise NumericalBreakdownError(f"sparse factorisation failed: {exc}",
                                      {"n": n, "sigma": sigma}) from exc
    op = spla.LinearOperator((n, n), matvec=lu.solve, dtype=dtype)
    extra = min(n - k - 1, max(2, k // 2))
    kk = k + max(extra, 0)
    v0 = _start_vector(n, dtype, seed)
    try:
        if np.issubdtype(dtype, np.complexfloating):
            w, V = spla.eigs(K, k=kk, M=M, sigma=sigma, OPinv=op, v0=v0, tol=tol * 1e-3,
                             which="LM")
        else:
            w, V = spla.eigsh(K, k=kk, M=M, sigma=sigma, OPinv=op, v0=v0, tol=tol * 1e-3,
                              which="LM")
    except spla.ArpackError as exc:
        raise NumericalBreakdownError(f"ARPACK failed: {exc}", {"n": n}) from exc
    w, V = _rayleigh_ritz(K, M, V, k)
    info = {"method": "shift-invert", "n": n, "krylov_vectors": kk,
            "lu_nnz": int(lu.L.nnz + lu.U.nnz)}
    # ARPACK keeps the operator in reference cycles; free the factor now
    del op, lu
    gc.collect()
    return w, V, info


def _lobpcg(K, M, k, tol, seed):
    n = K.shape[0]
    dtype = np.result_type(K.dtype, M.dtype)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, k + 2))
    if np.issubdtype(dtype, np.complexfloating):
        X = X + 1j * rng.standard_normal((n, k + 2))
    d = K.diagonal().real
    prec = spla.LinearOperator((n, n), matvec=lambda x: x / d[:, None] if x.ndim > 1 else x / d,
                               matmat=lambda x: x / d[:, None], dtype=dtype)
    w, V = spla.lobpcg(K, X, B=M, M=prec, tol=tol * 1e-2, maxiter=2000, largest=False)
    w, V = _rayleigh_ritz(K, M, V, k)
    return w, V, {"method": "lobpcg", "n": n}


def m_inner(pencil: HermitianPencil, u, v):
    return np.vdot(u, pencil.M @ v)
