"""On-site noise processes and the phase-coherence kernels they induce."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy import integrate

from .errors import ConfigError, NumericError

__all__ = [
    "OUParams",
    "WhiteNoiseParams",
    "NoiseField",
    "ou_init_stationary",
    "ou_step",
    "ou_transition",
    "coherence_sq_ou",
    "coherence_sq_white",
    "coherence_function",
    "kernel_Q",
    "q_infinity",
    "delta_integral",
    "kernel_Q_integral",
    "write_kernel_csv",
]


@dataclass(frozen=True)
class OUParams:
    """Ornstein-Uhlenbeck noise with correlation ``sigma**2/(2 theta) exp(-theta |tau|)``."""

    theta: float
    sigma: float

    def __post_init__(self):
        if not self.theta > 0:
            raise ConfigError("OU relaxation rate theta must be positive")
        if not self.sigma >= 0:
            raise ConfigError("OU strength sigma must be non-negative")

    @property
    def stationary_variance(self) -> float:
        return self.sigma**2 / (2.0 * self.theta)


@dataclass(frozen=True)
class WhiteNoiseParams:
    """Delta-correlated noise, ``<xi(t) xi(t')> = gamma_w delta(t - t')``."""

    gamma_w: float

    def __post_init__(self):
        if not self.gamma_w >= 0:
            raise ConfigError("white-noise strength must be non-negative")


@dataclass(frozen=True)
class NoiseField:
    """Current per-site OU values together with the generator that advances them."""

    values: np.ndarray
    params: OUParams
    rng: np.random.Generator


def ou_init_stationary(params: OUParams, L: int, rng: np.random.Generator) -> NoiseField:
    g = rng.standard_normal(L)
    return NoiseField(math.sqrt(params.stationary_variance) * g, params, rng)


def ou_transition(params: OUParams, dt: float) -> tuple[float, float]:
    """Decay factor and conditional standard deviation of the exact OU kernel over ``dt``."""
    decay = math.exp(-params.theta * dt)
    std = params.sigma * math.sqrt(-math.expm1(-2.0 * params.theta * dt) / (2.0 * params.theta))
    return decay, std


def ou_step(field: NoiseField, dt: float, g=None) -> NoiseField:
    """Advance every site by ``dt`` with the exact transition kernel.

    ``g`` optionally supplies the standard normals (one per site); otherwise
    they are drawn from the field's generator.
    """
    if not dt > 0:
        raise ConfigError("dt must be positive")
    decay, std = ou_transition(field.params, dt)
    if g is None:
        g = field.rng.standard_normal(field.values.shape)
    return replace(field, values=decay * field.values + std * np.asarray(g))


def coherence_sq_ou(params: OUParams, t):
    """``|C(t)|^2 = exp{-(sigma/theta)^2 [t - (1 - exp(-theta t))/theta]}``."""
    t = np.asarray(t, dtype=float)
    th = params.theta
    # -expm1 keeps the bracket accurate for theta*t << 1
    bracket = t + np.expm1(-th * t) / th
    out = np.exp(-(params.sigma / th) ** 2 * bracket)
    return out if out.ndim else float(out)


def coherence_sq_white(params: WhiteNoiseParams, t):
    out = np.exp(-params.gamma_w * np.asarray(t, dtype=float))
    return out if out.ndim else float(out)


def coherence_function(params) -> Callable[[float], float]:
    """Squared coherence as a one-argument callable for the kernel integrals."""
    if isinstance(params, OUParams):
        fn = lambda t: coherence_sq_ou(params, t)  # noqa: E731
        # asymptotic log-slope of the OU coherence
        fn.decay_rate = (params.sigma / params.theta) ** 2
        return fn
    if isinstance(params, WhiteNoiseParams):
        fn = lambda t: coherence_sq_white(params, t)  # noqa: E731
        fn.decay_rate = params.gamma_w
        return fn
    raise TypeError(f"no coherence function for {type(params).__name__}")


def _quad(f, a, b, quad_tol):
    val, err = integrate.quad(f, a, b, epsabs=0.0, epsrel=quad_tol, limit=500)
    if not np.isfinite(val) or err > max(100 * quad_tol * abs(val), 1e-12):
        raise NumericError(f"quadrature did not converge on [{a}, {b}] (err {err:.2g})")
    return val


def kernel_Q(coh: Callable, t: float, quad_tol: float = 1e-9) -> float:
    """``Q(t) = int_0^t |C(tau)|^2 dtau`` by adaptive quadrature."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return 0.0
    if math.isinf(t):
        return q_infinity(coh, quad_tol)
    cut = _cutoff(coh)
    if t > cut:
        # coherence is below 1e-14 past the cutoff
        return _quad(coh, 0.0, cut, quad_tol) + _tail(coh, cut) - _tail(coh, t)
    return _quad(coh, 0.0, t, quad_tol)


def _decay_rate(coh, t):
    rate = getattr(coh, "decay_rate", None)
    if rate is not None:
        return rate
    h = max(1e-3, 1e-3 * t)
    return -(math.log(coh(t + h)) - math.log(coh(t - h))) / (2 * h)


def _cutoff(coh) -> float:
    """Smallest power-of-two time where the coherence drops below 1e-14."""
    t = 1.0
    while coh(t) >= 1e-14:
        t *= 2.0
        if t > 1e12:
            raise NumericError("coherence does not decay; Q(inf) is infinite")
    return t


def _tail(coh, t):
    """Exponential-tail estimate of ``int_t^inf |C|^2``."""
    c = coh(t)
    if c == 0.0:
        return 0.0
    rate = _decay_rate(coh, t)
    if not rate > 0:
        raise NumericError("coherence tail is not decaying")
    return c / rate


def q_infinity(coh: Callable, quad_tol: float = 1e-9) -> float:
    """Saturated kernel ``Q(inf)``: quadrature to the cutoff plus an exponential tail."""
    rate = getattr(coh, "decay_rate", None)
    if rate == 0:
        raise NumericError("noise-free coherence never decays; Q(inf) is infinite")
    cut = _cutoff(coh)
    return _quad(coh, 0.0, cut, quad_tol) + _tail(coh, cut)


def delta_integral(coh: Callable, t: float, quad_tol: float = 1e-9) -> float:
    """``int_0^t [Q(inf) - Q(tau)] dtau``.

    Evaluated as ``int_0^inf min(s, t) |C(s)|^2 ds`` to avoid cancellation.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return 0.0
    cut = _cutoff(coh)
    if math.isinf(t):
        rate = _decay_rate(coh, cut)
        c = coh(cut)
        tail = c * (cut / rate + 1.0 / rate**2)
        return _quad(lambda s: s * coh(s), 0.0, cut, quad_tol) + tail
    upper = min(t, cut)
    first = _quad(lambda s: s * coh(s), 0.0, upper, quad_tol)
    if t < cut:
        return first + t * (_quad(coh, t, cut, quad_tol) + _tail(coh, cut))
    # for t past the cutoff, int_cut^t s c(s) ds is below roundoff
    return first + t * _tail(coh, t)


def kernel_Q_integral(coh: Callable, t: float, quad_tol: float = 1e-9) -> float:
    """``int_0^t Q(tau) dtau = t Q(inf) - int_0^t Delta``."""
    if t == 0:
        return 0.0
    return t * q_infinity(coh, quad_tol) - delta_integral(coh, t, quad_tol)


def write_kernel_csv(path, coh: Callable, times) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "Q"])
        for t in times:
            w.writerow([repr(float(t)), repr(kernel_Q(coh, float(t)))])
