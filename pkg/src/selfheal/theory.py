"""Closed-form predictions for weak and strong noise.

Strong noise: the ensemble density obeys a master equation whose continuum
limit is the drift-diffusion equation ``rho_t = S rho + v rho_x + D rho_xx``
with ``S, v, D`` all proportional to the noise kernel ``Q(t)``. Weak noise:
first-order perturbation theory in the biorthogonal eigenbasis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from .errors import (
    ConfigError,
    InstabilityError,
    NonConvergentModeError,
    NumericError,
    UnsupportedModelError,
)
from .lattice import BoundaryCondition, HoppingModel, SpectralData
from .metrics import FtleSeries
from .noise import OUParams

__all__ = [
    "TransportCoefficients",
    "DriftDiffusionSolution",
    "OneOverTFit",
    "transport_coefficients",
    "lambda_infty_obc",
    "lambda_infty_pbc",
    "correlation_length",
    "sine_coefficients",
    "drift_diffusion_density",
    "effective_time",
    "master_rate_matrix",
    "master_equation_step",
    "solve_master_equation",
    "asymptotic_zeta",
    "IMAG_TOL",
    "weak_noise_K",
    "weak_noise_variance_infty",
    "weak_noise_variance_init",
    "dissipation_rate",
    "short_time_xi_slope",
    "one_over_t_fit",
]


@dataclass(frozen=True)
class TransportCoefficients:
    """Q-independent parts of the source, drift and diffusion.

    ``S = 2 Q S_bar``, ``v = 2 Q v_bar``, ``D = 2 Q D_bar``.
    """

    S_bar: float
    v_bar: float
    D_bar: float

    def at(self, Q: float) -> tuple[float, float, float]:
        return 2.0 * Q * self.S_bar, 2.0 * Q * self.v_bar, 2.0 * Q * self.D_bar

    @property
    def rate_bracket(self) -> float:
        """``S_bar - v_bar**2 / (4 D_bar)``; the infinite-chain exponent per unit Q."""
        return self.S_bar - self.v_bar**2 / (4.0 * self.D_bar)


def _pairs(model: HoppingModel):
    for n in range(1, model.bandwidth + 1):
        yield n, model.hop(n), model.hop(-n)


def transport_coefficients(model: HoppingModel) -> TransportCoefficients:
    if not model.is_real:
        raise UnsupportedModelError(
            "strong-noise transport theory needs real hopping amplitudes"
        )
    a = model.lattice_constant
    S = v = D = 0.0
    for n, tp, tm in _pairs(model):
        tp, tm = tp.real, tm.real
        S += (tm - tp) ** 2
        v += n * (tm**2 - tp**2)
        D += n**2 * (tm**2 + tp**2)
    return TransportCoefficients(S, a * v, 0.5 * a**2 * D)


def lambda_infty_obc(tc: TransportCoefficients, Q_inf: float, L: float = math.inf) -> float:
    """``S/2 - v^2/(8D) - D pi^2/(2 L^2)``; the last term vanishes for ``L = inf``."""
    if Q_inf < 0:
        raise ValueError("Q_inf must be non-negative")
    if Q_inf == 0:
        return 0.0
    S, v, D = tc.at(Q_inf)
    lam = S / 2.0 - v**2 / (8.0 * D)
    if math.isfinite(L):
        lam -= D * math.pi**2 / (2.0 * L**2)
    return lam


def lambda_infty_pbc(tc: TransportCoefficients, Q_inf: float) -> float:
    return Q_inf * tc.S_bar


def correlation_length(model: HoppingModel) -> float:
    """Decay length ``D0 / v0`` of the steady skin envelope; ``inf`` for reciprocal hopping."""
    v0 = D0 = 0.0
    for n, tp, tm in _pairs(model):
        v0 += n * (abs(tm) ** 2 - abs(tp) ** 2)
        D0 += 0.5 * n**2 * (abs(tm) ** 2 + abs(tp) ** 2)
    if v0 == 0:
        return math.inf
    return D0 / v0


# ---------------------------------------------------------------------------
# drift-diffusion solution under absorbing boundaries


@dataclass(frozen=True)
class DriftDiffusionSolution:
    """Fourier-sine solution ``rho = exp(alpha x + beta t) sum c_n sin(n pi x/L) exp(-D (n pi/L)^2 t)``.

    ``S, v, D`` are evaluated at the reference kernel value ``Q_ref``; time
    arguments are effective times (see :func:`effective_time`).
    """

    alpha: float
    beta: float
    c: np.ndarray
    length: float
    S: float
    v: float
    D: float
    Q_ref: float
    tail_estimate: float

    @property
    def n_modes(self) -> int:
        return len(self.c)


def sine_coefficients(x, f, tc: TransportCoefficients, Q_ref: float,
                      length: float | None = None, n_modes: int = 64) -> DriftDiffusionSolution:
    """Project an initial density sampled on a uniform grid onto the sine modes.

    ``c_n = (2/L) int_0^L f(x) exp(v x / 2D) sin(n pi x / L) dx`` by composite
    Simpson quadrature.
    """
    x = np.asarray(x, dtype=float)
    f = np.asarray(f, dtype=float)
    if x.shape != f.shape or x.ndim != 1 or len(x) < 3:
        raise ValueError("x and f must be matching 1-D grids with at least 3 points")
    h = np.diff(x)
    if np.any(h <= 0) or np.ptp(h) > 1e-9 * h.mean():
        raise ValueError("x must be a uniform increasing grid")
    length = float(x[-1]) if length is None else float(length)
    S, v, D = tc.at(Q_ref)
    if D <= 0:
        raise NumericError("diffusion coefficient must be positive")
    k = v / (2.0 * D)
    if abs(k) * length > 700:
        raise NumericError(
            f"weight exp(v x / 2D) overflows (|v/2D| L = {abs(k) * length:.1f}); "
            "shorten the domain or rescale the density"
        )
    weighted = f * np.exp(k * x)
    n = np.arange(1, n_modes + 1)
    basis = np.sin(np.outer(n, x) * math.pi / length)
    c = (2.0 / length) * integrate.simpson(weighted[None, :] * basis, x=x, axis=1)
    tail = float(np.max(np.abs(c[-min(4, n_modes):])))
    return DriftDiffusionSolution(-k, S - v**2 / (4.0 * D), c, length, S, v, D, Q_ref, tail)


def drift_diffusion_density(sol: DriftDiffusionSolution, x, t_effective: float):
    x = np.asarray(x, dtype=float)
    if t_effective < 0:
        raise ValueError("effective time must be non-negative")
    n = np.arange(1, sol.n_modes + 1)
    kn = n * math.pi / sol.length
    decay = np.exp(-sol.D * kn**2 * t_effective)
    modes = np.sin(np.multiply.outer(x, kn)) @ (sol.c * decay)
    out = np.exp(sol.alpha * x + sol.beta * t_effective) * modes
    return out if out.ndim else float(out)


def effective_time(coh: Callable, t: float, Q_ref: float) -> float:
    """Time at which constant-``Q_ref`` dynamics matches ``Q(t)`` dynamics: ``int_0^t Q / Q_ref``."""
    from .noise import kernel_Q_integral

    return kernel_Q_integral(coh, t) / Q_ref


# ---------------------------------------------------------------------------
# discrete master equation


def master_rate_matrix(model: HoppingModel, L: int, bc=BoundaryCondition.OBC,
                       variant: str = "reconciled", edge: str = "full") -> np.ndarray:
    """Rate matrix ``G`` with ``dP/dt = 2 Q(t) G P``.

    variant : ``reconciled`` uses loss ``t_n t_-n`` (reproduces the source term
        of the continuum limit); ``printed`` uses loss ``|t_-n|^2`` and
        conserves total probability.
    edge : ``full`` applies the loss on every site; ``corrected`` drops loss
        channels whose intermediate site lies outside an open chain.
    """
    if not model.is_real:
        raise UnsupportedModelError("master equation is defined for real hoppings")
    if variant not in ("reconciled", "printed"):
        raise ConfigError(f"unknown master-equation variant {variant!r}")
    if edge not in ("full", "corrected"):
        raise ConfigError(f"unknown edge handling {edge!r}")
    bc = BoundaryCondition.parse(bc)
    G = np.zeros((L, L))
    j = np.arange(L)
    for n, t in model.hops.items():
        src = j - n
        if bc is BoundaryCondition.PBC:
            np.add.at(G, (j, src % L), abs(t) ** 2)
        else:
            ok = (src >= 0) & (src < L)
            G[j[ok], src[ok]] += abs(t) ** 2
        loss = (t * model.hop(-n)).real if variant == "reconciled" else abs(model.hop(-n)) ** 2
        if bc is BoundaryCondition.OBC and edge == "corrected":
            mid = j + n
            present = (mid >= 0) & (mid < L)
            G[j[present], j[present]] -= loss
        else:
            G[j, j] -= loss
    return G


def _q_at(Q_t, t):
    return Q_t(t) if callable(Q_t) else float(Q_t)


def _rk4_master(P, G, Q_t, t, dt):
    q0 = _q_at(Q_t, t)
    qh = _q_at(Q_t, t + 0.5 * dt)
    q1 = _q_at(Q_t, t + dt)
    k1 = 2 * q0 * (G @ P)
    k2 = 2 * qh * (G @ (P + 0.5 * dt * k1))
    k3 = 2 * qh * (G @ (P + 0.5 * dt * k2))
    k4 = 2 * q1 * (G @ (P + dt * k3))
    out = P + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    scale = max(float(np.max(np.abs(out))), 1e-300)
    if np.min(out) < -1e-12 * scale:
        raise InstabilityError(f"negative density {np.min(out):.3g}; reduce dt")
    return out


def master_equation_step(P, model: HoppingModel, Q_t, dt: float,
                         bc=BoundaryCondition.OBC, t: float = 0.0,
                         variant: str = "reconciled", edge: str = "full") -> np.ndarray:
    """One RK4 step of the master equation.

    ``Q_t`` is either a constant or a callable evaluated at the RK4 stage times
    starting from ``t``.
    """
    P = np.asarray(P, dtype=float)
    G = master_rate_matrix(model, len(P), bc, variant, edge)
    return _rk4_master(P, G, Q_t, t, dt)


def solve_master_equation(P0, model: HoppingModel, Q_t, t_out, dt: float = 0.01,
                          bc=BoundaryCondition.OBC, variant: str = "reconciled",
                          edge: str = "full") -> np.ndarray:
    """Densities at the (increasing) times ``t_out``, shape ``(len(t_out), L)``."""
    P = np.asarray(P0, dtype=float).copy()
    G = master_rate_matrix(model, len(P), bc, variant, edge)
    t_out = np.asarray(t_out, dtype=float)
    if np.any(np.diff(t_out) < 0) or (len(t_out) and t_out[0] < 0):
        raise ValueError("output times must be non-negative and increasing")
    out = np.empty((len(t_out), len(P)))
    t = 0.0
    for i, target in enumerate(t_out):
        n = int(round((target - t) / dt))
        h = (target - t) / n if n else 0.0
        for _ in range(n):
            P = _rk4_master(P, G, Q_t, t, h)
            t += h
        t = target
        out[i] = P
    return out


def asymptotic_zeta(tc: TransportCoefficients, Q_t: float, L: float) -> float:
    """Long-time instantaneous norm growth rate ``S - v^2/4D - D pi^2/L^2``."""
    if Q_t == 0:
        return 0.0
    S, v, D = tc.at(Q_t)
    out = S - v**2 / (4.0 * D)
    if math.isfinite(L):
        out -= D * math.pi**2 / L**2
    return out


# ---------------------------------------------------------------------------
# weak noise


IMAG_TOL = 1e-9


def weak_noise_K(spec: SpectralData, m: int, init, ou: OUParams) -> float:
    """``K_m = (sigma^2/2 theta) sum_j |<L_m|j><j|phi(0)>|^2``.

    ``init`` is either a sorted mode index (the initial state is that right
    eigenvector) or an explicit initial vector.
    """
    phi0 = spec.right[:, init] if isinstance(init, (int, np.integer)) else np.asarray(init)
    amp = spec.left[:, m].conj() * phi0
    return ou.stationary_variance * float(np.sum(np.abs(amp) ** 2))


def weak_noise_variance_infty(spec: SpectralData, m: int, init: int, ou: OUParams) -> float:
    """Saturated ``<|C_m|^2>`` for a mode that outgrows the initial one.

    Requires ``Im(E_m - E_init) > 0``; otherwise the double integral diverges.
    """
    if m == init:
        raise NonConvergentModeError("the initial mode grows without bound; use weak_noise_variance_init")
    dE = spec.energies[m] - spec.energies[init]
    # real-spectrum pairs leave Im(dE) at rounding level; treat them as marginal
    if not dE.imag > IMAG_TOL * max(1.0, abs(spec.energies[init])):
        raise NonConvergentModeError(
            f"mode {m} has Im(E_m - E_init) = {dE.imag:.3g}; its coefficient does not saturate"
        )
    K = weak_noise_K(spec, m, init, ou)
    th = ou.theta
    val = (1.0 / (th - 1j * np.conj(dE))) * (1.0 / (2.0 * dE.imag) - 1.0 / (th - 1j * dE))
    return float(2.0 * K * val.real)


def weak_noise_variance_init(K_init: float, ou: OUParams, t):
    """``(2 K / theta) (t - (1 - exp(-theta t)) / theta)``."""
    t = np.asarray(t, dtype=float)
    th = ou.theta
    out = (2.0 * K_init / th) * (t + np.expm1(-th * t) / th)
    return out if out.ndim else float(out)


def dissipation_rate(H0: np.ndarray, xi) -> float:
    """``<xi| i (H0^dag - H0) |xi>``, the instantaneous change of ``|xi|^2``."""
    xi = np.asarray(xi, dtype=complex)
    A = 1j * (H0.conj().T - H0)
    return float(np.vdot(xi, A @ xi).real)


def short_time_xi_slope(norm_sq_t1: float, Gamma_rate: float, t1: float):
    """Intercept and slope of ``lambda_xi(t1 + dt)`` to first order in ``dt``."""
    if not t1 > 0:
        raise ValueError("t1 must be positive")
    if not norm_sq_t1 > 0:
        raise ValueError("norm must be positive")
    ln = math.log(norm_sq_t1)
    intercept = ln / (2.0 * t1)
    slope = Gamma_rate / (2.0 * t1 * norm_sq_t1) - ln / (2.0 * t1**2)
    return intercept, slope


# ---------------------------------------------------------------------------
# 1/t convergence


@dataclass(frozen=True)
class OneOverTFit:
    lambda_inf: float
    coeff: float
    r2: float
    stderr_lambda: float
    stderr_coeff: float
    n: int


def one_over_t_fit(lam: FtleSeries, window) -> OneOverTFit:
    """Least-squares fit of ``lambda(t) = lambda_inf + coeff / t`` on ``window``."""
    t_a, t_b = window
    if not t_a > 0:
        raise ValueError("window must start at t > 0")
    t = np.asarray(lam.times, dtype=float)
    y = np.asarray(lam.lam, dtype=float)
    sel = (t >= t_a) & (t <= t_b) & np.isfinite(y)
    n = int(sel.sum())
    if n < 10:
        raise ValueError(f"window [{t_a}, {t_b}] holds only {n} samples (need >= 10)")
    A = np.column_stack([np.ones(n), 1.0 / t[sel]])
    coef, *_ = np.linalg.lstsq(A, y[sel], rcond=None)
    resid = y[sel] - A @ coef
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y[sel] - y[sel].mean()) ** 2))
    if ss_tot == 0:
        raise ValueError("degenerate window: lambda is constant")
    r2 = 1.0 - ss_res / ss_tot
    dof = max(n - 2, 1)
    cov = np.linalg.inv(A.T @ A) * ss_res / dof
    return OneOverTFit(float(coef[0]), float(coef[1]), r2,
                       float(math.sqrt(cov[0, 0])), float(math.sqrt(cov[1, 1])), n)
