"""Time evolution of scaled wavefunctions under noisy non-Hermitian generators.

States are stored as ``exp(log_amp) * vec`` so that exponential norm growth
never overflows. Reference (phi) and scattered (psi) trajectories share one
noise path and one rescaling factor, which makes ``psi - phi`` exact in the
shared frame.

The batched engine evolves ``B`` realizations as the columns of an ``(L, B)``
array; each column draws its noise from its own generator, so a column's
result does not depend on which other realizations share the batch.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DeadStateError, NumericError
from .lattice import (
    BoundaryCondition,
    HoppingModel,
    ScatteringWindow,
    build_hamiltonian,
    eigensystem,
    select_eigenstate,
)
from .noise import OUParams, WhiteNoiseParams, ou_transition

__all__ = [
    "Integrator",
    "ScaledState",
    "InitialState",
    "EvolutionConfig",
    "TrajectoryRecord",
    "matrix_exponential",
    "propagate_step",
    "initial_vector",
    "evolve_pair",
    "evolve_single",
    "evolve_batch",
    "write_trajectory_csv",
    "write_density_csv",
]


class Integrator(enum.Enum):
    EXPM = "expm"
    STRANG = "strang"
    RK4 = "rk4"

    @classmethod
    def parse(cls, value) -> "Integrator":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigError(f"unknown integrator {value!r}") from None


# ---------------------------------------------------------------------------
# matrix exponential: scaling and squaring with diagonal Pade approximants

_PADE_COEFFS = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0,
         670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
         960960.0, 16380.0, 182.0, 1.0),
}
# largest 1-norm for which each degree meets double-precision backward error
_PADE_THETA = (
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
)
_THETA_13 = 5.371920351148152


def _pade_low(A, m):
    b = _PADE_COEFFS[m]
    n = A.shape[0]
    ident = np.eye(n, dtype=A.dtype)
    A2 = A @ A
    power = ident
    U = b[1] * ident
    V = b[0] * ident
    for k in range(1, m // 2 + 1):
        power = power @ A2
        U = U + b[2 * k + 1] * power
        V = V + b[2 * k] * power
    return A @ U, V


def _pade13(A):
    b = _PADE_COEFFS[13]
    ident = np.eye(A.shape[0], dtype=A.dtype)
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A2 @ A4
    U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
             + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
    V = (A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
         + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident)
    return U, V


def matrix_exponential(M) -> np.ndarray:
    """``exp(M)`` for a square complex matrix.

    Uses the lowest Pade degree whose accuracy threshold covers the 1-norm of
    ``M``; above the degree-13 threshold the matrix is scaled by ``2**-s``
    first and the result squared ``s`` times.
    """
    A = np.array(M, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix_exponential needs a square matrix")
    if not np.all(np.isfinite(A)):
        raise NumericError("matrix has non-finite entries")
    norm1 = np.linalg.norm(A, 1)
    for m, theta in _PADE_THETA:
        if norm1 <= theta:
            U, V = _pade_low(A, m)
            return np.linalg.solve(V - U, V + U)
    s = max(0, int(math.ceil(math.log2(norm1 / _THETA_13))))
    A = A / 2.0**s
    U, V = _pade13(A)
    X = np.linalg.solve(V - U, V + U)
    for _ in range(s):
        X = X @ X
    return X


# ---------------------------------------------------------------------------
# states


@dataclass(frozen=True)
class ScaledState:
    """The vector ``exp(log_amp) * vec``."""

    vec: np.ndarray
    log_amp: float = 0.0

    @classmethod
    def from_vector(cls, v) -> "ScaledState":
        v = np.asarray(v, dtype=complex)
        n = np.linalg.norm(v)
        if n == 0 or not np.isfinite(n):
            raise DeadStateError("cannot scale a zero or non-finite vector")
        return cls(v / n, math.log(n))

    @property
    def log_norm_sq(self) -> float:
        return 2.0 * self.log_amp + 2.0 * math.log(np.linalg.norm(self.vec))

    def to_vector(self) -> np.ndarray:
        return math.exp(self.log_amp) * self.vec

    def rescaled(self) -> "ScaledState":
        n = np.linalg.norm(self.vec)
        if n == 0 or not np.isfinite(n):
            raise DeadStateError("state norm underflowed to zero")
        return ScaledState(self.vec / n, self.log_amp + math.log(n))


# ---------------------------------------------------------------------------
# single-step propagation


class _Stepper:
    """Applies one step of ``exp(-i (H + diag(noise)) dt)`` to column vectors."""

    def __init__(self, H_by_phase: dict, dt: float, integrator: Integrator):
        self.H = H_by_phase
        self.dt = dt
        self.integrator = integrator
        if integrator is Integrator.STRANG:
            self.P = {k: matrix_exponential(-1j * H * dt) for k, H in H_by_phase.items()}

    def __call__(self, v, diag, phase):
        dt = self.dt
        H = self.H[phase]
        if self.integrator is Integrator.STRANG:
            P = self.P[phase]
            if diag is None:
                return P @ v
            half = np.exp(-0.5j * dt * diag)
            return half * (P @ (half * v))
        if self.integrator is Integrator.EXPM:
            if diag is None:
                return matrix_exponential(-1j * H * dt) @ v
            if v.ndim == 1:
                return matrix_exponential(-1j * (H + np.diag(diag)) * dt) @ v
            out = np.empty_like(v)
            for b in range(v.shape[1]):
                U = matrix_exponential(-1j * (H + np.diag(diag[:, b])) * dt)
                out[:, b] = U @ v[:, b]
            return out
        # classical RK4 on i dv/dt = (H + diag) v
        def f(w):
            hw = H @ w
            if diag is not None:
                hw = hw + diag * w
            return -1j * hw

        k1 = f(v)
        k2 = f(v + 0.5 * dt * k1)
        k3 = f(v + 0.5 * dt * k2)
        k4 = f(v + dt * k3)
        return v + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def propagate_step(
    state: ScaledState,
    H_const: np.ndarray,
    noise_diag,
    dt: float,
    integrator: Integrator = Integrator.STRANG,
    propagator: np.ndarray | None = None,
) -> ScaledState:
    """One step with the noise frozen over the step, followed by a rescale.

    ``propagator`` may carry a precomputed ``exp(-i H_const dt)`` for the
    Strang scheme.
    """
    integrator = Integrator.parse(integrator)
    diag = None if noise_diag is None else np.asarray(noise_diag, dtype=float)
    if integrator is Integrator.STRANG and propagator is not None:
        half = 1.0 if diag is None else np.exp(-0.5j * dt * diag)
        vec = half * (propagator @ (half * state.vec))
    else:
        vec = _Stepper({0: np.asarray(H_const, dtype=complex)}, dt, integrator)(
            state.vec, diag, 0
        )
    return ScaledState(vec, state.log_amp).rescaled()


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class InitialState:
    """Initial-state recipe.

    kind : ``eigenstate`` (nearest to ``energy``), ``eigen_index`` (sorted
    index ``index``), ``delta`` (0-based ``site``) or ``gaussian``
    (``center`` in 0-based site units, ``width`` = standard deviation in sites).
    ``scale`` sets the initial norm.
    """

    kind: str = "eigenstate"
    energy: complex = complex(-0.35, 0.1)
    index: int = 0
    site: int = 0
    center: float | None = None
    width: float = 5.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("eigenstate", "eigen_index", "delta", "gaussian"):
            raise ConfigError(f"unknown initial state kind {self.kind!r}")
        if not self.scale > 0:
            raise ConfigError("initial scale must be positive")
        if self.kind == "gaussian" and not self.width > 0:
            raise ConfigError("gaussian width must be positive")


@dataclass(frozen=True)
class EvolutionConfig:
    model: HoppingModel
    L: int
    bc: BoundaryCondition = BoundaryCondition.OBC
    scat: ScatteringWindow | None = None
    noise: OUParams | WhiteNoiseParams | None = None
    dt: float = 0.1
    t_max: float = 60.0
    sample_stride: int = 1
    integrator: Integrator = Integrator.STRANG
    init: InitialState = field(default_factory=InitialState)
    loss: float = 0.0
    snapshot_times: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "bc", BoundaryCondition.parse(self.bc))
        object.__setattr__(self, "integrator", Integrator.parse(self.integrator))
        object.__setattr__(self, "snapshot_times", tuple(float(t) for t in self.snapshot_times))
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.t_max > 0:
            raise ConfigError("t_max must be positive")
        if self.sample_stride < 1:
            raise ConfigError("sample_stride must be at least 1")
        if self.scat is not None:
            if self.scat.t_off > self.t_max:
                raise ConfigError("scattering window ends after t_max")
            self.scat.sites(self.L)
        n = self.t_max / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ConfigError("t_max must be an integer multiple of dt")
        for t in self.snapshot_times:
            if not 0 <= t <= self.t_max:
                raise ConfigError(f"snapshot time {t} outside [0, t_max]")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    @property
    def noisy(self) -> bool:
        if self.noise is None:
            return False
        if isinstance(self.noise, OUParams):
            return self.noise.sigma > 0
        return self.noise.gamma_w > 0

    def hamiltonian(self, active: bool = False) -> np.ndarray:
        return build_hamiltonian(self.model, self.L, self.bc, self.scat, active, self.loss)

    def sample_steps(self) -> np.ndarray:
        return np.arange(self.sample_stride, self.n_steps + 1, self.sample_stride)

    def snapshot_steps(self) -> np.ndarray:
        return np.array([int(round(t / self.dt)) for t in self.snapshot_times], dtype=int)


def initial_vector(config: EvolutionConfig) -> np.ndarray:
    """Initial wavefunction with Euclidean norm ``config.init.scale``."""
    init = config.init
    L = config.L
    if init.kind in ("eigenstate", "eigen_index"):
        spec = eigensystem(config.hamiltonian(False))
        if init.kind == "eigenstate":
            _, v = select_eigenstate(spec, init.energy)
        else:
            if not 0 <= init.index < L:
                raise ConfigError(f"eigenstate index {init.index} out of range")
            v = spec.right[:, init.index].copy()
    elif init.kind == "delta":
        if not 0 <= init.site < L:
            raise ConfigError(f"delta site {init.site} out of range")
        v = np.zeros(L, dtype=complex)
        v[init.site] = 1.0
    else:
        center = (L - 1) / 2.0 if init.center is None else init.center
        x = np.arange(L)
        v = np.exp(-((x - center) ** 2) / (4.0 * init.width**2)).astype(complex)
    v = v / np.linalg.norm(v)
    return init.scale * v


# ---------------------------------------------------------------------------
# noise streams


class _NoiseStreams:
    """Per-realization on-site noise, piecewise constant over each step.

    Every generator is consumed as: ``L`` normals for the stationary initial
    OU field, then ``L`` normals per step. Draws are made in blocks of rows,
    which yields the same numbers as one call per row.
    """

    BLOCK = 256

    def __init__(self, params, L: int, dt: float, rngs):
        self.params = params
        self.L = L
        self.rngs = list(rngs)
        self._buf = None
        self._pos = self.BLOCK
        if isinstance(params, OUParams):
            self.decay, self.std = ou_transition(params, dt)
            g = self._normals()
            self.values = math.sqrt(params.stationary_variance) * g
        elif isinstance(params, WhiteNoiseParams):
            self.amp = math.sqrt(params.gamma_w / dt)
            self.values = self.amp * self._normals()
        else:
            raise TypeError(f"unsupported noise parameters {params!r}")

    def _normals(self) -> np.ndarray:
        if self._pos == self.BLOCK:
            self._buf = np.stack(
                [rng.standard_normal((self.BLOCK, self.L)) for rng in self.rngs], axis=-1
            )
            self._pos = 0
        g = self._buf[self._pos]
        self._pos += 1
        return g

    def advance(self) -> None:
        g = self._normals()
        if isinstance(self.params, OUParams):
            self.values = self.decay * self.values + self.std * g
        else:
            self.values = self.amp * g


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class TrajectoryRecord:
    """Sampled observables of one trajectory (pair or single).

    Pair runs fill every series; single runs only ``log_norm_psi_sq``.
    Snapshots hold normalized densities and the scaled states themselves.
    """

    times: np.ndarray
    log_norm_psi_sq: np.ndarray
    log_norm_phi_sq: np.ndarray | None = None
    log_norm_xi_sq: np.ndarray | None = None
    eta: np.ndarray | None = None
    epsilon: np.ndarray | None = None
    snapshot_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    density_phi: np.ndarray | None = None
    density_psi: np.ndarray | None = None
    states_phi: tuple = ()
    states_psi: tuple = ()

    @property
    def is_pair(self) -> bool:
        return self.log_norm_phi_sq is not None


@dataclass
class _BatchResult:
    times: np.ndarray
    log_norm_psi_sq: np.ndarray
    log_norm_phi_sq: np.ndarray | None
    log_norm_xi_sq: np.ndarray | None
    eta: np.ndarray | None
    epsilon: np.ndarray | None
    snapshot_times: np.ndarray
    snap_phi: np.ndarray | None  # (n_snap, L, B)
    snap_psi: np.ndarray | None
    snap_log_amp: np.ndarray | None  # (n_snap, B)

    def record(self, b: int) -> TrajectoryRecord:
        def col(a):
            return None if a is None else a[:, b].copy()

        dens_phi = dens_psi = None
        states_phi = states_psi = ()
        if self.snap_psi is not None and len(self.snapshot_times):
            psi = self.snap_psi[:, :, b]
            dens_psi = _normalized_density(psi)
            states_psi = tuple(
                ScaledState(psi[i].copy(), float(self.snap_log_amp[i, b]))
                for i in range(len(self.snapshot_times))
            )
            if self.snap_phi is not None:
                phi = self.snap_phi[:, :, b]
                dens_phi = _normalized_density(phi)
                states_phi = tuple(
                    ScaledState(phi[i].copy(), float(self.snap_log_amp[i, b]))
                    for i in range(len(self.snapshot_times))
                )
        return TrajectoryRecord(
            times=self.times.copy(),
            log_norm_psi_sq=col(self.log_norm_psi_sq),
            log_norm_phi_sq=col(self.log_norm_phi_sq),
            log_norm_xi_sq=col(self.log_norm_xi_sq),
            eta=col(self.eta),
            epsilon=col(self.epsilon),
            snapshot_times=self.snapshot_times.copy(),
            density_phi=dens_phi,
            density_psi=dens_psi,
            states_phi=states_phi,
            states_psi=states_psi,
        )


def _normalized_density(v):
    p = np.abs(v) ** 2
    return p / p.sum(axis=-1, keepdims=True)


def _log_norm_sq(v):
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.abs(v) ** 2, axis=0))


def evolve_batch(config: EvolutionConfig, rngs, pair: bool = True) -> _BatchResult:
    """Evolve ``len(rngs)`` independent realizations side by side.

    With ``pair`` true, phi evolves without and psi with the scattering
    potential, both driven by the same noise and rescaled by ``|phi|``.
    Otherwise a single state psi evolves under the full generator and is
    rescaled by its own norm.
    """
    rngs = list(rngs)
    B = len(rngs)
    if B == 0:
        raise ConfigError("need at least one realization")
    L = config.L
    dt = config.dt
    H_by_phase = {False: config.hamiltonian(False)}
    if config.scat is not None:
        H_by_phase[True] = config.hamiltonian(True)
    stepper = _Stepper(H_by_phase, dt, config.integrator)
    noise = _NoiseStreams(config.noise, L, dt, rngs) if config.noisy else None

    v0 = initial_vector(config)
    scale = np.linalg.norm(v0)
    lead = np.tile((v0 / scale)[:, None], (1, B))
    log_amp = np.full(B, math.log(scale))
    follower = lead.copy() if pair else None

    steps = config.sample_steps()
    n_samp = len(steps)
    sample_at = {int(k): i for i, k in enumerate(steps)}
    snap_steps = config.snapshot_steps()
    snap_at = {}
    for i, k in enumerate(snap_steps):
        snap_at.setdefault(int(k), []).append(i)
    n_snap = len(snap_steps)

    out_lead = np.empty((n_samp, B))
    if pair:
        out_follow = np.empty((n_samp, B))
        out_xi = np.empty((n_samp, B))
        out_eta = np.empty((n_samp, B))
        out_eps = np.empty((n_samp, B))
    snap_lead = np.empty((n_snap, L, B), dtype=complex) if n_snap else None
    snap_follow = np.empty((n_snap, L, B), dtype=complex) if (n_snap and pair) else None
    snap_amp = np.empty((n_snap, B)) if n_snap else None

    def take_snapshot(k):
        for i in snap_at.get(k, ()):
            snap_lead[i] = lead
            snap_amp[i] = log_amp
            if pair:
                snap_follow[i] = follower

    take_snapshot(0)
    scat = config.scat
    for k in range(config.n_steps):
        diag = None if noise is None else noise.values
        active = scat is not None and scat.active_at((k + 0.5) * dt)
        if pair:
            lead = stepper(lead, diag, False)
            follower = stepper(follower, diag, active)
        else:
            lead = stepper(lead, diag, active)
        nrm = np.linalg.norm(lead, axis=0)
        if not np.all(np.isfinite(nrm)) or np.any(nrm == 0):
            raise DeadStateError(f"state norm left floating-point range at step {k + 1}")
        lead = lead / nrm
        log_amp = log_amp + np.log(nrm)
        if pair:
            follower = follower / nrm
        if noise is not None:
            noise.advance()
        step = k + 1
        take_snapshot(step)
        i = sample_at.get(step)
        if i is None:
            continue
        n_lead = np.sum(np.abs(lead) ** 2, axis=0)
        out_lead[i] = 2.0 * log_amp + np.log(n_lead)
        if pair:
            n_follow = np.sum(np.abs(follower) ** 2, axis=0)
            diff = np.sum(np.abs(follower - lead) ** 2, axis=0)
            overlap = np.abs(np.sum(follower.conj() * lead, axis=0)) ** 2
            out_follow[i] = 2.0 * log_amp + np.log(n_follow)
            with np.errstate(divide="ignore"):
                out_xi[i] = 2.0 * log_amp + np.log(diff)
            out_eps[i] = diff / n_lead
            out_eta[i] = np.clip(1.0 - overlap / (n_follow * n_lead), 0.0, 1.0)

    times = steps * dt
    snap_times = snap_steps * dt
    if pair:
        return _BatchResult(times, out_follow, out_lead, out_xi, out_eta, out_eps,
                            snap_times, snap_lead, snap_follow, snap_amp)
    return _BatchResult(times, out_lead, None, None, None, None,
                        snap_times, None, snap_lead, snap_amp)


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def evolve_pair(config: EvolutionConfig, rng=None) -> TrajectoryRecord:
    """Reference and scattered trajectories driven by one noise realization."""
    return evolve_batch(config, [_as_rng(rng)], pair=True).record(0)


def evolve_single(config: EvolutionConfig, rng=None) -> TrajectoryRecord:
    """Single trajectory under the full generator, for FTLE studies."""
    return evolve_batch(config, [_as_rng(rng)], pair=False).record(0)


# ---------------------------------------------------------------------------
# export

TRAJECTORY_HEADER = ["t", "eta", "epsilon", "log_norm_phi_sq", "log_norm_xi_sq"]


def write_trajectory_csv(path, rec: TrajectoryRecord) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if rec.is_pair:
            w.writerow(TRAJECTORY_HEADER)
            for row in zip(rec.times, rec.eta, rec.epsilon, rec.log_norm_phi_sq, rec.log_norm_xi_sq):
                w.writerow([repr(float(x)) for x in row])
        else:
            w.writerow(["t", "log_norm_psi_sq"])
            for row in zip(rec.times, rec.log_norm_psi_sq):
                w.writerow([repr(float(x)) for x in row])


def write_density_csv(path, times, densities) -> None:
    densities = np.asarray(densities)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"P{j}" for j in range(densities.shape[1])])
        for t, row in zip(times, densities):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in row])
