"""Scalar observables of scattered/reference state pairs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import ScaledState
from .errors import ConfigError, DeadStateError, IllConditionedError
from .lattice import BIORTH_MAX_L, SpectralData

__all__ = [
    "FtleSeries",
    "eta",
    "epsilon",
    "ftle",
    "ftle_series",
    "instantaneous_growth",
    "cumulative_difference",
    "biorth_coefficients",
]

_ETA_CLAMP = 1e-14


def _frame(psi, phi):
    """Bring both states into a common frame and return the two vectors."""
    if isinstance(psi, ScaledState) and isinstance(phi, ScaledState):
        shift = max(psi.log_amp, phi.log_amp)
        return (psi.vec * math.exp(psi.log_amp - shift),
                phi.vec * math.exp(phi.log_amp - shift))
    if isinstance(psi, ScaledState):
        psi = psi.to_vector()
    if isinstance(phi, ScaledState):
        phi = phi.to_vector()
    return np.asarray(psi, dtype=complex), np.asarray(phi, dtype=complex)


def eta(psi, phi) -> float:
    """Profile mismatch ``1 - |<psi|phi>|^2 / (<psi|psi><phi|phi>)``; amplitude-blind."""
    a, b = _frame(psi, phi)
    na = np.vdot(a, a).real
    nb = np.vdot(b, b).real
    if na == 0 or nb == 0:
        raise DeadStateError("eta is undefined for a zero-norm state")
    val = 1.0 - abs(np.vdot(a, b)) ** 2 / (na * nb)
    if -_ETA_CLAMP <= val < 0:
        return 0.0
    if 1.0 < val <= 1.0 + _ETA_CLAMP:
        return 1.0
    return float(val)


def epsilon(psi, phi) -> float:
    """Relative deviation ``|psi - phi|^2 / |phi|^2``."""
    a, b = _frame(psi, phi)
    nb = np.vdot(b, b).real
    if nb == 0:
        raise DeadStateError("epsilon is undefined for a zero reference state")
    d = a - b
    return float(np.vdot(d, d).real / nb)


def ftle(log_norm_sq, t):
    """Finite-time Lyapunov exponent ``log_norm_sq / (2 t)``."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("FTLE needs t > 0")
    out = np.asarray(log_norm_sq, dtype=float) / (2.0 * t)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class FtleSeries:
    times: np.ndarray
    lam: np.ndarray
    source: str = "psi"

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or len(t) != len(self.lam):
            raise ValueError("times and lam must be 1-D and of equal length")
        if np.any(t <= 0) or np.any(np.diff(t) <= 0):
            raise ValueError("FTLE times must be positive and strictly increasing")


def ftle_series(times, log_norm_sq, source="psi") -> FtleSeries:
    times = np.asarray(times, dtype=float)
    return FtleSeries(times, ftle(log_norm_sq, times), source)


def instantaneous_growth(times, log_norm_sq) -> np.ndarray:
    """``d ln N / dt`` by second-order differences, one-sided at the ends."""
    times = np.asarray(times, dtype=float)
    y = np.asarray(log_norm_sq, dtype=float)
    if len(times) < 3:
        raise ValueError("need at least three samples")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    return np.gradient(y, times, edge_order=1)


def cumulative_difference(lam_xi: FtleSeries, lam_phi: FtleSeries) -> np.ndarray:
    """``t * (lambda_xi - lambda_phi)``."""
    if len(lam_xi.times) != len(lam_phi.times) or not np.array_equal(lam_xi.times, lam_phi.times):
        raise ValueError("FTLE series are sampled on different grids")
    return lam_xi.times * (lam_xi.lam - lam_phi.lam)


def biorth_coefficients(
    spec: SpectralData,
    state,
    max_L: int = BIORTH_MAX_L,
    allow_large: bool = False,
    return_residual: bool = False,
):
    """Expansion coefficients ``C_n = <L_n|state>`` in the right eigenbasis.

    Parameters
    ----------
    spec : SpectralData
    state : ScaledState or array
    max_L : int
        Chains longer than this are refused unless ``allow_large``.
    return_residual : bool
        Also return ``|sum_n C_n R_n - state| / |state|``.
    """
    if spec.size > max_L and not allow_large:
        raise ConfigError(
            f"biorthogonal expansion limited to L <= {max_L} (got {spec.size}); "
            "pass allow_large=True to override"
        )
    if spec.cond_estimate > 1e12:
        raise IllConditionedError(
            f"eigenvector matrix too ill-conditioned (cond ~ {spec.cond_estimate:.3g})",
            spec.cond_estimate,
        )
    if isinstance(state, ScaledState):
        vec = state.vec
        amp = math.exp(state.log_amp)
    else:
        vec = np.asarray(state, dtype=complex)
        amp = 1.0
    C = spec.left.conj().T @ vec
    if not return_residual:
        return amp * C
    resid = np.linalg.norm(spec.right @ C - vec) / np.linalg.norm(vec)
    return amp * C, float(resid)
