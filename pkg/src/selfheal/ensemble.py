"""Noise-averaged observables over many independent realizations.

Realizations are grouped in fixed-size chunks. Each chunk is evolved as one
batch and reduced to streaming statistics; chunk statistics are then merged.
Because chunk boundaries and seeds depend only on the realization index, the
deterministic reduction gives bit-identical results for any worker count.

Seeding: realization ``i`` of master seed ``s`` uses
``numpy.random.SeedSequence(s, spawn_key=(i,))``, i.e. exactly the stream
``SeedSequence(s).spawn(...)[i]`` would give.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import FIRST_EXCEPTION, ProcessPoolExecutor, as_completed, wait
from dataclasses import dataclass, field

import numpy as np

from .dynamics import EvolutionConfig, evolve_batch
from .errors import ConfigError, NumericError, PartialResultError
from .noise import OUParams, WhiteNoiseParams

__all__ = [
    "EnsembleConfig",
    "EnsembleRecord",
    "RunningStats",
    "EstimatorTable",
    "seed_for",
    "rng_for",
    "run_ensemble",
    "estimator_comparison",
    "config_to_dict",
    "write_ensemble_csv",
    "write_ensemble_json",
    "WORKERS_ENV",
]

WORKERS_ENV = "SELFHEAL_WORKERS"
CHUNK_SIZE = 25


def seed_for(master_seed: int, index: int) -> int:
    """128-bit stream seed for one realization; stateless and stable."""
    if index < 0:
        raise ValueError("realization index must be non-negative")
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    words = ss.generate_state(2, np.uint64)
    return int(words[0]) | (int(words[1]) << 64)


def rng_for(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(seed_for(master_seed, index))


# ---------------------------------------------------------------------------
# streaming statistics


@dataclass
class RunningStats:
    """Per-sample count, mean and sum of squared deviations.

    ``-inf`` entries (a vanishing norm under the logarithm) are counted apart;
    any such entry makes the reported mean ``-inf`` and the variance ``inf``.
    """

    n: np.ndarray
    mean: np.ndarray
    m2: np.ndarray
    n_neginf: np.ndarray

    @classmethod
    def from_batch(cls, x) -> "RunningStats":
        """Statistics of the columns of ``x`` with shape ``(n_samples, B)``."""
        x = np.asarray(x, dtype=float)
        neginf = np.isneginf(x)
        finite = np.isfinite(x)
        if np.any(~finite & ~neginf):
            raise NumericError("NaN or +inf in ensemble observable")
        n = finite.sum(axis=1).astype(float)
        xs = np.where(finite, x, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(n > 0, xs.sum(axis=1) / n, 0.0)
        dev = np.where(finite, x - mean[:, None], 0.0)
        return cls(n, mean, np.sum(dev * dev, axis=1), neginf.sum(axis=1).astype(float))

    def merge(self, other: "RunningStats") -> "RunningStats":
        """Chan et al. pairwise combination."""
        n = self.n + other.n
        delta = other.mean - self.mean
        with np.errstate(invalid="ignore", divide="ignore"):
            w = np.where(n > 0, other.n / n, 0.0)
            cross = np.where(n > 0, delta * delta * self.n * other.n / n, 0.0)
        return RunningStats(n, self.mean + delta * w, self.m2 + other.m2 + cross,
                            self.n_neginf + other.n_neginf)

    @property
    def count(self) -> np.ndarray:
        return self.n + self.n_neginf

    def final_mean(self) -> np.ndarray:
        return np.where(self.n_neginf > 0, -np.inf, self.mean)

    def final_var(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            var = np.where(self.n > 1, self.m2 / np.maximum(self.n - 1, 1), 0.0)
        return np.where(self.n_neginf > 0, np.inf, var)


@dataclass
class _DensityAcc:
    """Log-scaled running sum of ``|state_j|^2`` and of normalized profiles."""

    log_scale: np.ndarray  # (n_snap,)
    total: np.ndarray  # (n_snap, L), true density = total * exp(log_scale)
    profile: np.ndarray  # (n_snap, L)
    count: int

    @classmethod
    def from_batch(cls, vecs, log_amp) -> "_DensityAcc":
        dens = np.abs(vecs) ** 2  # (n_snap, L, B)
        w = 2.0 * log_amp  # (n_snap, B)
        m = w.max(axis=1)
        total = np.einsum("slb,sb->sl", dens, np.exp(w - m[:, None]))
        norms = dens.sum(axis=1, keepdims=True)
        return cls(m, total, (dens / norms).sum(axis=2), vecs.shape[2])

    def merge(self, other: "_DensityAcc") -> "_DensityAcc":
        m = np.maximum(self.log_scale, other.log_scale)
        total = (self.total * np.exp(self.log_scale - m)[:, None]
                 + other.total * np.exp(other.log_scale - m)[:, None])
        return _DensityAcc(m, total, self.profile + other.profile, self.count + other.count)

    def finalize(self):
        mass = self.total.sum(axis=1)
        log_mass = self.log_scale + np.log(mass) - math.log(self.count)
        return self.total / mass[:, None], log_mass, self.profile / self.count


_PAIR_SERIES = ("log_norm_psi_sq", "log_norm_phi_sq", "log_norm_xi_sq", "eta", "epsilon", "log_epsilon")


@dataclass
class _Partial:
    stats: dict
    dens_phi: _DensityAcc | None
    dens_psi: _DensityAcc | None
    n: int

    def merge(self, other: "_Partial") -> "_Partial":
        def m(a, b):
            return None if a is None else a.merge(b)

        return _Partial({k: v.merge(other.stats[k]) for k, v in self.stats.items()},
                        m(self.dens_phi, other.dens_phi), m(self.dens_psi, other.dens_psi),
                        self.n + other.n)


def _run_chunk(base: EvolutionConfig, pair: bool, master_seed: int, start: int, stop: int) -> _Partial:
    rngs = [rng_for(master_seed, i) for i in range(start, stop)]
    res = evolve_batch(base, rngs, pair=pair)
    stats = {"log_norm_psi_sq": RunningStats.from_batch(res.log_norm_psi_sq)}
    if pair:
        stats["log_norm_phi_sq"] = RunningStats.from_batch(res.log_norm_phi_sq)
        stats["log_norm_xi_sq"] = RunningStats.from_batch(res.log_norm_xi_sq)
        stats["eta"] = RunningStats.from_batch(res.eta)
        stats["epsilon"] = RunningStats.from_batch(res.epsilon)
        with np.errstate(divide="ignore"):
            stats["log_epsilon"] = RunningStats.from_batch(np.log(res.epsilon))
    dens_phi = dens_psi = None
    if len(res.snapshot_times):
        if pair:
            dens_phi = _DensityAcc.from_batch(res.snap_phi, res.snap_log_amp)
        dens_psi = _DensityAcc.from_batch(res.snap_psi, res.snap_log_amp)
    return _Partial(stats, dens_phi, dens_psi, stop - start)


def _tree_merge(parts):
    parts = list(parts)
    while len(parts) > 1:
        nxt = [parts[i].merge(parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


# ---------------------------------------------------------------------------
# configuration and results


@dataclass(frozen=True)
class EnsembleConfig:
    """Ensemble run description.

    workers : int or None
        ``None`` reads ``SELFHEAL_WORKERS`` and falls back to the CPU count.
    reduction : ``deterministic`` merges chunk statistics in a fixed pairwise
        tree; ``fast`` merges them as they arrive.
    pair : evolve reference/scattered pairs (default) or single trajectories.
    """

    base: EvolutionConfig
    n_realizations: int
    master_seed: int = 0
    reduction: str = "deterministic"
    workers: int | None = None
    pair: bool = True
    chunk_size: int = CHUNK_SIZE

    def __post_init__(self):
        if self.n_realizations < 1:
            raise ConfigError("n_realizations must be at least 1")
        if self.reduction not in ("deterministic", "fast"):
            raise ConfigError(f"unknown reduction {self.reduction!r}")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be at least 1")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be at least 1")

    def resolved_workers(self) -> int:
        if self.workers is not None:
            return self.workers
        env = os.environ.get(WORKERS_ENV)
        if env:
            try:
                val = int(env)
            except ValueError:
                raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
            if val < 1:
                raise ConfigError(f"{WORKERS_ENV} must be at least 1")
            return val
        return os.cpu_count() or 1


@dataclass(frozen=True)
class EnsembleRecord:
    """Noise-averaged series; ``var_*`` are unbiased sample variances."""

    times: np.ndarray
    n_realizations: int
    mean_log_norm_psi_sq: np.ndarray
    var_log_norm_psi_sq: np.ndarray
    mean_log_norm_phi_sq: np.ndarray | None = None
    var_log_norm_phi_sq: np.ndarray | None = None
    mean_log_norm_xi_sq: np.ndarray | None = None
    var_log_norm_xi_sq: np.ndarray | None = None
    mean_eta: np.ndarray | None = None
    var_eta: np.ndarray | None = None
    mean_epsilon: np.ndarray | None = None
    var_epsilon: np.ndarray | None = None
    mean_log_epsilon: np.ndarray | None = None
    var_log_epsilon: np.ndarray | None = None
    snapshot_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mean_density_phi: np.ndarray | None = None
    log_mass_phi: np.ndarray | None = None
    mean_profile_phi: np.ndarray | None = None
    mean_density_psi: np.ndarray | None = None
    log_mass_psi: np.ndarray | None = None
    mean_profile_psi: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def is_pair(self) -> bool:
        return self.mean_log_norm_phi_sq is not None

    @property
    def lambda_psi(self) -> np.ndarray:
        return self.mean_log_norm_psi_sq / (2.0 * self.times)

    @property
    def lambda_phi(self) -> np.ndarray:
        return self.mean_log_norm_phi_sq / (2.0 * self.times)

    @property
    def lambda_xi(self) -> np.ndarray:
        return self.mean_log_norm_xi_sq / (2.0 * self.times)

    @property
    def t_lambda_diff(self) -> np.ndarray:
        """``t (lambda_xi - lambda_phi)``."""
        return 0.5 * (self.mean_log_norm_xi_sq - self.mean_log_norm_phi_sq)

    @property
    def estimator(self) -> np.ndarray:
        """``exp{2 t (lambda_xi - lambda_phi)}``."""
        return np.exp(2.0 * self.t_lambda_diff)


def config_to_dict(cfg: EvolutionConfig) -> dict:
    """JSON-ready description of an evolution config."""
    def cplx(z):
        z = complex(z)
        return z.real if z.imag == 0 else [z.real, z.imag]

    noise = None
    if isinstance(cfg.noise, OUParams):
        noise = {"kind": "ou", "theta": cfg.noise.theta, "sigma": cfg.noise.sigma}
    elif isinstance(cfg.noise, WhiteNoiseParams):
        noise = {"kind": "white", "gamma_w": cfg.noise.gamma_w}
    scat = None
    if cfg.scat is not None:
        s = cfg.scat
        scat = {"gamma": s.gamma, "extent": s.extent, "t_on": s.t_on, "t_off": s.t_off,
                "first_site": s.first_site}
    init = cfg.init
    return {
        "hops": {str(d): cplx(t) for d, t in cfg.model.hops.items()},
        "lattice_constant": cfg.model.lattice_constant,
        "L": cfg.L,
        "bc": cfg.bc.value,
        "scattering": scat,
        "noise": noise,
        "dt": cfg.dt,
        "t_max": cfg.t_max,
        "sample_stride": cfg.sample_stride,
        "integrator": cfg.integrator.value,
        "init": {"kind": init.kind, "energy": cplx(init.energy), "index": init.index,
                 "site": init.site, "center": init.center, "width": init.width,
                 "scale": init.scale},
        "loss": cfg.loss,
        "snapshot_times": list(cfg.snapshot_times),
    }


def _chunks(n: int, size: int):
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def run_ensemble(config: EnsembleConfig) -> EnsembleRecord:
    """Evolve ``n_realizations`` seeded realizations and reduce them to averages."""
    t0 = time.perf_counter()
    chunks = _chunks(config.n_realizations, config.chunk_size)
    workers = min(config.resolved_workers(), len(chunks))
    args = (config.base, config.pair, config.master_seed)
    if workers == 1:
        parts = []
        for a, b in chunks:
            try:
                parts.append(_run_chunk(*args, a, b))
            except Exception as exc:
                done = sum(p.n for p in parts)
                raise PartialResultError(f"realizations {a}..{b - 1} failed: {exc}", done) from exc
        merged = _tree_merge(parts) if config.reduction == "deterministic" else _fold(parts)
    else:
        merged = _run_parallel(config, chunks, workers, args)
    rec = _finalize(merged, config)
    prov = dict(rec.provenance)
    prov.update(workers=workers, wall_time_s=time.perf_counter() - t0)
    object.__setattr__(rec, "provenance", prov)
    return rec


def _fold(parts):
    acc = parts[0]
    for p in parts[1:]:
        acc = acc.merge(p)
    return acc


def _run_parallel(config, chunks, workers, args):
    results = {}
    acc = None
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futs = {pool.submit(_run_chunk, *args, a, b): i for i, (a, b) in enumerate(chunks)}
        try:
            for fut in as_completed(futs):
                part = fut.result()
                if config.reduction == "fast":
                    acc = part if acc is None else acc.merge(part)
                else:
                    results[futs[fut]] = part
        except Exception as exc:
            for f in futs:
                f.cancel()
            wait(futs, return_when=FIRST_EXCEPTION)
            done = sum(chunks[i][1] - chunks[i][0] for f, i in futs.items()
                       if f.done() and not f.cancelled() and f.exception() is None)
            raise PartialResultError(f"worker failed: {exc}", done) from exc
    if config.reduction == "fast":
        return acc
    return _tree_merge(results[i] for i in range(len(chunks)))


def _finalize(p: _Partial, config: EnsembleConfig) -> EnsembleRecord:
    base = config.base
    times = base.sample_steps() * base.dt
    kw = {}
    for name in _PAIR_SERIES:
        st = p.stats.get(name)
        if st is None:
            continue
        kw[f"mean_{name}"] = st.final_mean()
        kw[f"var_{name}"] = st.final_var()
    for tag, acc in (("phi", p.dens_phi), ("psi", p.dens_psi)):
        if acc is not None:
            dens, log_mass, profile = acc.finalize()
            kw[f"mean_density_{tag}"] = dens
            kw[f"log_mass_{tag}"] = log_mass
            kw[f"mean_profile_{tag}"] = profile
    from . import __version__

    prov = {
        "config": config_to_dict(base),
        "master_seed": int(config.master_seed),
        "n_realizations": config.n_realizations,
        "reduction": config.reduction,
        "chunk_size": config.chunk_size,
        "pair": config.pair,
        "seeding": "numpy SeedSequence(master_seed, spawn_key=(index,))",
        "version": __version__,
    }
    return EnsembleRecord(times=times, n_realizations=p.n,
                          snapshot_times=base.snapshot_steps() * base.dt,
                          provenance=prov, **kw)


# ---------------------------------------------------------------------------
# estimator comparison and export


@dataclass(frozen=True)
class EstimatorTable:
    times: np.ndarray
    eps_mean: np.ndarray
    estimator: np.ndarray
    eta_mean: np.ndarray
    max_abs_diff: float


def estimator_comparison(record: EnsembleRecord) -> EstimatorTable:
    """Align ``<eps>``, the FTLE estimator and ``<eta>``."""
    if not record.is_pair:
        raise ConfigError("estimator comparison needs a pair ensemble")
    est = record.estimator
    diff = np.abs(record.mean_eta - est)
    return EstimatorTable(record.times, record.mean_epsilon, est, record.mean_eta,
                          float(np.max(diff)) if len(diff) else 0.0)


ENSEMBLE_HEADER = ["t", "lambda_phi", "lambda_xi", "t_lambda_diff", "eta_mean", "eps_mean", "estimator"]


def write_ensemble_csv(path, record: EnsembleRecord) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if record.is_pair:
            w.writerow(ENSEMBLE_HEADER)
            cols = (record.times, record.lambda_phi, record.lambda_xi, record.t_lambda_diff,
                    record.mean_eta, record.mean_epsilon, record.estimator)
        else:
            w.writerow(["t", "lambda_psi"])
            cols = (record.times, record.lambda_psi)
        for row in zip(*cols):
            w.writerow([repr(float(x)) for x in row])


def write_ensemble_json(path, record: EnsembleRecord, include_timing: bool = True) -> None:
    prov = dict(record.provenance)
    if not include_timing:
        prov.pop("wall_time_s", None)
    with open(path, "w") as fh:
        json.dump(prov, fh, indent=2, sort_keys=True)
        fh.write("\n")
