"""Non-Hermitian tight-binding chains: Hamiltonians, spectra and localization.

Convention: ``hops[d]`` is the amplitude for a hop by ``+d`` sites, i.e. the
matrix element ``H[j + d, j] = hops[d]``. With stronger leftward hopping
(``|t_{-n}| > |t_n|``) the open-chain eigenstates pile up at site 0.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import (
    DegenerateSpectrumError,
    InvalidModelError,
    InvalidWindowError,
    OnContourError,
)

__all__ = [
    "HoppingModel",
    "BoundaryCondition",
    "ScatteringWindow",
    "SpectralData",
    "build_hamiltonian",
    "bloch_symbol",
    "spectral_winding",
    "eigensystem",
    "select_eigenstate",
    "corner_weight",
    "max_imag_energy",
    "write_spectrum_csv",
]

# biorthogonal workflows are reliable only on short chains
BIORTH_MAX_L = 60


@dataclass(frozen=True)
class HoppingModel:
    """Table of hopping amplitudes keyed by signed displacement.

    Parameters
    ----------
    hops : mapping of int to complex
        Amplitude for a hop by ``d`` sites. Displacement 0 is not allowed.
    """

    hops: Mapping[int, complex]
    lattice_constant: float = 1.0

    def __post_init__(self):
        clean = {}
        for d, t in dict(self.hops).items():
            d = int(d)
            if d == 0:
                raise InvalidModelError("displacement 0 is not a hopping term")
            t = complex(t)
            if not (math.isfinite(t.real) and math.isfinite(t.imag)):
                raise InvalidModelError(f"non-finite amplitude for d={d}")
            if t != 0:
                clean[d] = t
        if not clean:
            raise InvalidModelError("model needs at least one nonzero amplitude")
        object.__setattr__(self, "hops", dict(sorted(clean.items())))

    @classmethod
    def from_pairs(cls, *amplitudes):
        """Build from ``(t_1, t_-1, t_2, t_-2, ...)``."""
        if len(amplitudes) % 2:
            raise InvalidModelError("amplitudes must come in (t_n, t_-n) pairs")
        hops = {}
        for i in range(0, len(amplitudes), 2):
            n = i // 2 + 1
            hops[n] = amplitudes[i]
            hops[-n] = amplitudes[i + 1]
        return cls(hops)

    @property
    def bandwidth(self) -> int:
        return max(abs(d) for d in self.hops)

    @property
    def is_real(self) -> bool:
        return all(t.imag == 0 for t in self.hops.values())

    def hop(self, d: int) -> complex:
        return self.hops.get(int(d), 0j)

    def describe(self) -> str:
        return ", ".join(f"{d}:{_fmt_complex(t)}" for d, t in self.hops.items())


def _fmt_complex(z: complex) -> str:
    if z.imag == 0:
        return repr(z.real)
    return repr(z).strip("()")


class BoundaryCondition(enum.Enum):
    OBC = "obc"
    PBC = "pbc"

    @classmethod
    def parse(cls, value) -> "BoundaryCondition":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise InvalidModelError(f"unknown boundary condition {value!r}") from None


@dataclass(frozen=True)
class ScatteringWindow:
    """Absorbing potential ``-i*gamma`` on ``extent`` sites during ``(t_on, t_off]``.

    ``first_site`` is 0-based; the default 0 targets the left boundary.
    """

    gamma: float
    extent: int
    t_on: float
    t_off: float
    first_site: int = 0

    def __post_init__(self):
        if isinstance(self.gamma, complex) or not math.isfinite(self.gamma):
            raise InvalidWindowError("gamma must be a finite real number")
        if self.extent < 1:
            raise InvalidWindowError("extent must be at least one site")
        if not self.t_on < self.t_off:
            raise InvalidWindowError("t_on must precede t_off")
        if self.first_site < 0:
            raise InvalidWindowError("first_site must be non-negative")

    def sites(self, L: int) -> np.ndarray:
        if self.first_site + self.extent > L:
            raise InvalidWindowError(
                f"window [{self.first_site}, {self.first_site + self.extent}) exceeds L={L}"
            )
        return np.arange(self.first_site, self.first_site + self.extent)

    def active_at(self, t_mid: float) -> bool:
        """Whether a step with midpoint ``t_mid`` feels the potential."""
        return self.t_on < t_mid <= self.t_off


def build_hamiltonian(
    model: HoppingModel,
    L: int,
    bc: BoundaryCondition = BoundaryCondition.OBC,
    scat: ScatteringWindow | None = None,
    active: bool = False,
    loss: float = 0.0,
) -> np.ndarray:
    """Dense ``L x L`` Hamiltonian of the chain.

    Parameters
    ----------
    model : HoppingModel
    L : int
        Number of sites.
    bc : BoundaryCondition
    scat : ScatteringWindow, optional
        Added to the diagonal only when ``active`` is true.
    active : bool
    loss : float
        Uniform on-site loss ``kappa``; adds ``-i*kappa`` to every diagonal entry.

    Returns
    -------
    H : (L, L) complex ndarray
    """
    bc = BoundaryCondition.parse(bc)
    if L < 2:
        raise InvalidModelError("need at least two sites")
    if model.bandwidth >= L:
        raise InvalidModelError(f"bandwidth {model.bandwidth} must be smaller than L={L}")
    H = np.zeros((L, L), dtype=complex)
    j = np.arange(L)
    for d, t in model.hops.items():
        target = j + d
        if bc is BoundaryCondition.PBC:
            H[target % L, j] += t
        else:
            ok = (target >= 0) & (target < L)
            H[target[ok], j[ok]] = t
    if loss:
        H[j, j] -= 1j * loss
    if scat is not None:
        sites = scat.sites(L)
        if active:
            H[sites, sites] -= 1j * scat.gamma
    return H


def bloch_symbol(model: HoppingModel, k):
    """``h(k) = sum_d t_d exp(-i k d)``; vectorized over ``k``."""
    k = np.asarray(k, dtype=float)
    out = np.zeros(k.shape, dtype=complex)
    for d, t in model.hops.items():
        out = out + t * np.exp(-1j * k * d)
    return out if out.ndim else complex(out)


def spectral_winding(model: HoppingModel, E_ref: complex = 0.0, n_k: int = 1024) -> int:
    """Winding number of ``h(k) - E_ref`` as ``k`` runs over ``[0, 2*pi)``."""
    if n_k < 64:
        raise ValueError("n_k must be at least 64")
    k = np.linspace(0.0, 2.0 * np.pi, n_k + 1)
    z = bloch_symbol(model, k) - E_ref
    if np.min(np.abs(z)) < 1e-12:
        raise OnContourError(f"E_ref={E_ref} lies on the PBC spectral curve")
    dphi = np.angle(z[1:] / z[:-1])
    return int(round(dphi.sum() / (2.0 * np.pi)))


@dataclass(frozen=True)
class SpectralData:
    """Biorthogonal eigensystem with ``left[:, m].conj() @ right[:, n] == delta_mn``."""

    energies: np.ndarray
    right: np.ndarray
    left: np.ndarray
    cond_estimate: float
    biorth_error: float = field(default=float("nan"))
    residual: float = field(default=float("nan"))

    @property
    def size(self) -> int:
        return len(self.energies)


def eigensystem(H: np.ndarray, tol: float = 1e-8) -> SpectralData:
    """Full biorthogonal eigendecomposition of a square matrix.

    Right eigenvectors are normalized to unit Euclidean norm. Left eigenvectors
    come from the inverse of the right-eigenvector matrix, so biorthonormality
    holds up to the conditioning of that matrix. ``tol`` is only enforced for
    ``L <= BIORTH_MAX_L``; larger chains report ``biorth_error`` without raising.
    """
    H = np.asarray(H, dtype=complex)
    if H.ndim != 2 or H.shape[0] != H.shape[1] or H.shape[0] < 2:
        raise ValueError("H must be a square matrix with L >= 2")
    L = H.shape[0]
    E, R = np.linalg.eig(H)
    order = np.lexsort((E.imag, E.real))
    E = E[order]
    R = R[:, order]
    R = R / np.linalg.norm(R, axis=0)
    cond = float(np.linalg.cond(R))
    if not math.isfinite(cond) or cond * np.finfo(float).eps > 1e-2:
        raise DegenerateSpectrumError(
            f"eigenvector matrix is numerically singular (cond ~ {cond:.3g})", cond
        )
    Linv = np.linalg.inv(R)
    left = Linv.conj().T
    err = float(np.max(np.abs(left.conj().T @ R - np.eye(L))))
    scale = np.linalg.norm(H, 2)
    resid = float(np.max(np.linalg.norm(H @ R - R * E, axis=0)) / max(scale, 1e-300))
    if L <= BIORTH_MAX_L and err > tol:
        raise DegenerateSpectrumError(
            f"biorthonormality error {err:.3g} exceeds {tol:g}", cond
        )
    return SpectralData(E, R, left, cond, err, resid)


def select_eigenstate(spec: SpectralData, E_target: complex):
    """Index and right eigenvector of the mode closest to ``E_target``.

    ``argmin`` returns the first minimum, which breaks ties towards lower index.
    """
    idx = int(np.argmin(np.abs(spec.energies - E_target)))
    return idx, spec.right[:, idx].copy()


def corner_weight(state, delta: float = 10.0) -> float:
    """Signed skin corner weight; negative for left-, positive for right-localized states."""
    psi = np.asarray(state)
    L = psi.size
    r = np.arange(1, L + 1)
    p4 = np.abs(psi) ** 4
    w_left = np.exp(-np.abs(r - 1) / delta)
    w_right = np.exp(-np.abs(r - L) / delta)
    return float(np.sum(p4 * (w_right - w_left)))


def max_imag_energy(spec: SpectralData) -> float:
    return float(np.max(spec.energies.imag))


def write_spectrum_csv(path, spec: SpectralData, delta: float = 10.0) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "re_E", "im_E", "corner_weight"])
        for n, E in enumerate(spec.energies):
            cw = corner_weight(spec.right[:, n], delta)
            w.writerow([n, repr(float(E.real)), repr(float(E.imag)), repr(cw)])
