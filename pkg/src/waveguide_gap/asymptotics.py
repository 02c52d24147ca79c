"""Closed-form predictions for the avoided crossing at eta = pi.

Near ``eta = pi + beta h^3`` the first two cell eigenvalues behave like

    M1 + pi^2 + h^3 (P -/+ sqrt(P^2 + 4 pi^2 beta^2)),

the eigenvalues of the 2x2 coupling matrix ``[[2 pi beta + P, P], [P, -2 pi beta + P]]``,
where ``P = P_theta |dn V1(O')|^2``.  At ``beta = 0`` the branches are
``2 P h^3`` apart, which is the predicted gap.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .fem import PreconditionError

log = logging.getLogger(__name__)

BETA0 = 0.5
H0 = 0.3


class NotAdmissibleError(ValueError):
    """The cross-section violates M1 + pi^2 < M2: the lowest bands overlap and no gap opens."""


class OutsideValidityWarning(UserWarning):
    pass


def coupling_constant(P_theta: float, dnV1: float) -> float:
    """``P = P_theta * dnV1^2``."""
    if not P_theta > 0:
        raise PreconditionError("polarization coefficient must be positive")
    if dnV1 == 0 or not np.isfinite(dnV1):
        raise PreconditionError("normal derivative must be finite and nonzero")
    return float(P_theta * dnV1 * dnV1)


@dataclass
class CouplingSpectrum:
    matrix: np.ndarray
    values: np.ndarray  # (Lambda'_-, Lambda'_+)
    vectors: np.ndarray  # columns a_-, a_+


def coupling_matrix(beta: float, P: float) -> CouplingSpectrum:
    """The 2x2 matrix, its eigenvalues ``P -/+ sqrt(P^2 + 4 pi^2 beta^2)`` and eigenvectors.

    The eigenvector of ``P +/- s`` is ``(P, s - 2 pi beta)`` resp.
    ``(P, -s - 2 pi beta)`` normalised; the second entries are evaluated
    without cancellation for large ``|beta|``.
    """
    if not P > 0:
        raise PreconditionError("coupling constant must be positive")
    b = 2.0 * math.pi * beta
    A = np.array([[b + P, P], [P, -b + P]])
    s = math.hypot(P, b)
    # P - s rewritten without cancellation
    values = np.array([-b * b / (P + s), P + s])
    y_plus = P * P / (s + b) if b >= 0 else s - b
    y_minus = -(s + b) if b >= 0 else -P * P / (s - b)
    a_plus = np.array([P, y_plus]) / math.hypot(P, y_plus)
    a_minus = np.array([P, y_minus]) / math.hypot(P, y_minus)
    return CouplingSpectrum(matrix=A, values=values, vectors=np.column_stack([a_minus, a_plus]))


def _check_window(h, beta, beta0, h0):
    if h > h0:
        warnings.warn(f"h = {h:g} exceeds h0 = {h0:g}: outside the asymptotic regime",
                      OutsideValidityWarning, stacklevel=3)
    if np.any(np.abs(beta) > beta0 * h ** (-1.25)):
        warnings.warn(f"|beta| beyond the validity window {beta0:g} h^(-5/4)",
                      OutsideValidityWarning, stacklevel=3)


def predict_eigenvalues(h: float, beta, M1: float, P: float, beta0: float = BETA0,
                        h0: float = H0, warn: bool = True):
    """Leading terms of the two lowest eigenvalues at ``eta = pi + beta h^3``.

    Returns ``(lower, upper)``; ``beta`` may be an array.
    """
    if not h > 0:
        raise PreconditionError("h must be positive")
    if not P > 0:
        raise PreconditionError("coupling constant must be positive")
    beta = np.asarray(beta, dtype=float)
    if warn:
        _check_window(h, beta, beta0, h0)
    s = np.hypot(P, 2.0 * math.pi * beta)
    base = M1 + math.pi ** 2
    lower = base + h ** 3 * (P - s)
    upper = base + h ** 3 * (P + s)
    if lower.ndim == 0:
        return float(lower), float(upper)
    return lower, upper


def simple_point_correction(P: float) -> float:
    """First-order coefficient of ``h^3`` at a simple eigenvalue away from ``eta = pi``."""
    if not P > 0:
        raise PreconditionError("coupling constant must be positive")
    return float(P)


@dataclass
class GapPrediction:
    lower: float
    upper: float
    length: float
    certified: Optional[tuple]
    C_Lambda: Optional[float]

    def to_dict(self):
        return asdict(self)


def predict_gap(h: float, M1: float, P: float, M2: Optional[float] = None,
                C_Lambda: Optional[float] = None) -> GapPrediction:
    """Nominal gap ``(M1 + pi^2, M1 + pi^2 + 2 P h^3)``.

    With ``C_Lambda`` the window shrunk by ``C_Lambda h^(7/2)`` on both sides
    is reported too (``None`` if it is empty).  ``M2`` enables the
    admissibility check.
    """
    if not h > 0:
        raise PreconditionError("h must be positive")
    if not P > 0:
        raise PreconditionError("coupling constant must be positive")
    if M2 is not None and not M1 + math.pi ** 2 < M2:
        raise NotAdmissibleError(
            f"M1 + pi^2 = {M1 + math.pi ** 2:.6g} >= M2 = {M2:.6g}: the first two bands "
            "overlap and the gap does not open")
    lo = M1 + math.pi ** 2
    length = 2.0 * P * h ** 3
    certified = None
    if C_Lambda is not None:
        r = C_Lambda * h ** 3.5
        if lo + r < lo + length - r:
            certified = (lo + r, lo + length - r)
    return GapPrediction(lower=lo, upper=lo + length, length=length, certified=certified,
                         C_Lambda=C_Lambda)


@dataclass
class AsymptoticPrediction:
    M1: float
    P_theta: float
    dnV1: float
    P: float
    h: float
    beta_window: float
    predicted_gap: tuple
    predicted_gap_length: float

    def to_dict(self):
        return asdict(self)


def make_prediction(M1: float, P_theta: float, dnV1: float, h: float,
                    beta0: float = BETA0, M2: Optional[float] = None) -> AsymptoticPrediction:
    P = coupling_constant(P_theta, dnV1)
    gap = predict_gap(h, M1, P, M2=M2)
    return AsymptoticPrediction(M1=M1, P_theta=P_theta, dnV1=dnV1, P=P, h=h,
                                beta_window=beta0 * h ** (-1.25),
                                predicted_gap=(gap.lower, gap.upper),
                                predicted_gap_length=gap.length)


def fit_remainder_constant(h, measured, predicted, exponent: float = 3.5) -> float:
    """Smallest ``C`` with ``|measured - predicted| <= C h^exponent`` on the samples."""
    h = np.asarray(h, dtype=float)
    diff = np.abs(np.asarray(measured, dtype=float) - np.asarray(predicted, dtype=float))
    return float(np.max(diff / h ** exponent))
