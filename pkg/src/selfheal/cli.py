"""Command line for self-healing simulations in non-Hermitian lattices.

Configuration is an INI file (sections ``model``, ``lattice``, ``scattering``,
``noise``, ``evolution``, ``init``, ``ensemble``, ``sweep``, ``spectrum``,
``output``) layered over built-in defaults; ``--set section.key=value`` and the
dedicated flags override the file. Every run writes ``resolved.ini`` and an
atomically replaced ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import (
    EvolutionConfig,
    InitialState,
    Integrator,
    evolve_batch,
    write_density_csv,
    write_trajectory_csv,
)
from .ensemble import (
    EnsembleConfig,
    estimator_comparison,
    rng_for,
    run_ensemble,
    write_ensemble_csv,
    write_ensemble_json,
)
from .errors import ConfigError, NumericError, PartialResultError, SelfHealError
from .lattice import (
    BoundaryCondition,
    HoppingModel,
    ScatteringWindow,
    build_hamiltonian,
    corner_weight,
    eigensystem,
    max_imag_energy,
    write_spectrum_csv,
)
from .metrics import ftle
from .noise import OUParams, WhiteNoiseParams, coherence_function, q_infinity
from .theory import (
    correlation_length,
    lambda_infty_obc,
    lambda_infty_pbc,
    transport_coefficients,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# seed for the "randomly selected" eigenstates marked in the spectrum presets
SELECTION_SEED = 2025
S8_REFERENCE = -0.3549

DEFAULTS = {
    "model": {"hops": "0.7, 1, 0.8, 1", "lattice_constant": "1.0"},
    "lattice": {"L": "100", "bc": "obc", "loss": "0"},
    "scattering": {"enabled": "true", "gamma": "10", "extent": "10", "t_on": "2",
                   "t_off": "4", "first_site": "0"},
    "noise": {"kind": "ou", "theta": "1", "sigma": "0.1", "gamma_w": "4"},
    "evolution": {"dt": "0.1", "t_max": "60", "sample_stride": "1", "integrator": "strang",
                  "snapshot_times": ""},
    "init": {"kind": "eigenstate", "energy": "-0.35+0.1j", "index": "0", "site": "0",
             "center": "", "width": "5", "scale": "1"},
    "ensemble": {"n_realizations": "100", "seed": "0", "reduction": "deterministic",
                 "workers": "", "chunk_size": "25"},
    "sweep": {"stride": "4", "T": "60"},
    "spectrum": {"delta": "10", "color": "corner_weight"},
    "output": {"svg": "true"},
}

NOISE_LEVELS = {
    "none": {"kind": "none"},
    "weak": {"kind": "ou", "theta": "1", "sigma": "0.1"},
    "strong": {"kind": "ou", "theta": "5", "sigma": "10"},
}

# preset name -> (description, config overrides)
PRESETS = {
    "fig1": ("main model: spectrum, eta sweep and five marked eigenstates", {}),
    "fig2": ("main model: FTLEs and cumulative difference for E_init = -0.35+0.1i", {}),
    "sm-s4": ("hoppings (0.5, 1, 0.4, 0.8)", {"model": {"hops": "0.5, 1, 0.4, 0.8"}}),
    "sm-s5": ("hoppings (0.6, 1, 0.7, 0.8)", {"model": {"hops": "0.6, 1, 0.7, 0.8"}}),
    "sm-s6": ("hoppings (0.2, 0.5, 0.6, 1, 0.1, 0.3)",
              {"model": {"hops": "0.2, 0.5, 0.6, 1, 0.1, 0.3"}}),
    "sm-s8": ("complex-hopping chain with loss: short-time FTLE plateau", {
        "model": {"hops": "-0.8j, 1.2j, 0.05j, 0.35j"},
        "lattice": {"L": "100", "loss": "0.35"},
        "scattering": {"enabled": "false"},
        "noise": {"kind": "ou", "theta": "1", "sigma": "0.01"},
        "evolution": {"dt": "0.05", "t_max": "60"},
        "init": {"kind": "delta", "site": "4"},
        "ensemble": {"n_realizations": "100"},
    }),
    "sm-s10": ("bulk self-healing of a central Gaussian packet, L = 500", {
        "lattice": {"L": "500"},
        "scattering": {"gamma": "10", "extent": "5", "t_on": "0", "t_off": "2",
                       "first_site": "248"},
        "noise": {"kind": "ou", "theta": "1"},
        "evolution": {"t_max": "100"},
        "init": {"kind": "gaussian", "center": "250", "width": "5"},
        "ensemble": {"n_realizations": "1000"},
    }),
    "sm-eta-avg": ("strong noise: <eps>, FTLE estimator and <eta> for six eigenstates", {
        "noise": NOISE_LEVELS["strong"],
        "evolution": {"t_max": "1000"},
        "ensemble": {"n_realizations": "1000"},
    }),
}
S10_SIGMAS = (0.0, 0.01, 0.05, 0.1)
QUICK = {"ensemble": {"n_realizations": "4"}, "evolution": {"t_max": "6"}, "sweep": {"T": "6", "stride": "25"}}


# ---------------------------------------------------------------------------
# configuration


def _parse_complex(text: str) -> complex:
    s = text.strip().replace(" ", "").replace("i", "j")
    try:
        return complex(s)
    except ValueError:
        raise ConfigError(f"cannot parse number {text!r}") from None


def _parse_hops(text: str) -> HoppingModel:
    """``t1, t-1, t2, t-2, ...`` pairs, or explicit ``d:t`` entries."""
    items = [x for x in (p.strip() for p in text.split(",")) if x]
    if items and all(":" in x for x in items):
        hops = {}
        for x in items:
            d, t = x.split(":", 1)
            try:
                hops[int(d)] = _parse_complex(t)
            except ValueError:
                raise ConfigError(f"bad hopping entry {x!r}") from None
        return HoppingModel(hops)
    return HoppingModel.from_pairs(*(_parse_complex(x) for x in items))


class RunConfig:
    """Typed view of the layered configuration."""

    def __init__(self, parser: configparser.ConfigParser):
        self.cp = parser

    @classmethod
    def load(cls, path=None, layers=()):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_dict(DEFAULTS)
        for layer in layers:
            cp.read_dict(layer)
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            try:
                cp.read(p)
            except configparser.Error as exc:
                raise ConfigError(f"malformed config file {p}: {exc}") from None
        return cls(cp)

    def apply(self, overrides: dict):
        self.cp.read_dict(overrides)

    def set(self, dotted: str, value):
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        if not self.cp.has_section(section):
            raise ConfigError(f"unknown config section {section!r}")
        self.cp.set(section, key, str(value))

    def get(self, section, key) -> str:
        try:
            return self.cp.get(section, key)
        except (configparser.NoSectionError, configparser.NoOptionError):
            raise ConfigError(f"missing config value {section}.{key}") from None

    def num(self, section, key, kind=float):
        raw = self.get(section, key)
        try:
            return kind(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key} = {raw!r} is not a valid {kind.__name__}") from None

    def flag(self, section, key) -> bool:
        try:
            return self.cp.getboolean(section, key)
        except ValueError:
            raise ConfigError(f"{section}.{key} must be a boolean") from None

    def as_dict(self) -> dict:
        return {s: dict(self.cp[s]) for s in self.cp.sections()}

    def write(self, path):
        with open(path, "w") as fh:
            self.cp.write(fh)

    # builders ------------------------------------------------------------

    def model(self) -> HoppingModel:
        m = _parse_hops(self.get("model", "hops"))
        a = self.num("model", "lattice_constant")
        return HoppingModel(m.hops, a)

    @property
    def L(self) -> int:
        return self.num("lattice", "L", int)

    def bc(self) -> BoundaryCondition:
        return BoundaryCondition.parse(self.get("lattice", "bc"))

    def noise(self):
        kind = self.get("noise", "kind").strip().lower()
        if kind == "none":
            return None
        if kind == "ou":
            return OUParams(self.num("noise", "theta"), self.num("noise", "sigma"))
        if kind == "white":
            return WhiteNoiseParams(self.num("noise", "gamma_w"))
        raise ConfigError(f"unknown noise kind {kind!r}")

    def scattering(self):
        if not self.flag("scattering", "enabled"):
            return None
        return ScatteringWindow(
            self.num("scattering", "gamma"),
            self.num("scattering", "extent", int),
            self.num("scattering", "t_on"),
            self.num("scattering", "t_off"),
            self.num("scattering", "first_site", int),
        )

    def init(self) -> InitialState:
        center = self.get("init", "center").strip()
        return InitialState(
            kind=self.get("init", "kind").strip(),
            energy=_parse_complex(self.get("init", "energy")),
            index=self.num("init", "index", int),
            site=self.num("init", "site", int),
            center=float(center) if center else None,
            width=self.num("init", "width"),
            scale=self.num("init", "scale"),
        )

    def evolution(self, **changes) -> EvolutionConfig:
        snaps = [float(x) for x in self.get("evolution", "snapshot_times").split(",") if x.strip()]
        kw = dict(
            model=self.model(),
            L=self.L,
            bc=self.bc(),
            scat=self.scattering(),
            noise=self.noise(),
            dt=self.num("evolution", "dt"),
            t_max=self.num("evolution", "t_max"),
            sample_stride=self.num("evolution", "sample_stride", int),
            integrator=Integrator.parse(self.get("evolution", "integrator")),
            init=self.init(),
            loss=self.num("lattice", "loss"),
            snapshot_times=tuple(snaps),
        )
        kw.update(changes)
        return EvolutionConfig(**kw)

    def ensemble(self, base: EvolutionConfig, pair: bool = True) -> EnsembleConfig:
        workers = self.get("ensemble", "workers").strip()
        return EnsembleConfig(
            base=base,
            n_realizations=self.num("ensemble", "n_realizations", int),
            master_seed=self.num("ensemble", "seed", int),
            reduction=self.get("ensemble", "reduction").strip(),
            workers=int(workers) if workers else None,
            pair=pair,
            chunk_size=self.num("ensemble", "chunk_size", int),
        )

    @property
    def seed(self) -> int:
        return self.num("ensemble", "seed", int)


# ---------------------------------------------------------------------------
# outputs


class Outputs:
    """Output directory plus the list of files written into it."""

    def __init__(self, directory, svg: bool = True):
        self.dir = Path(directory)
        self.svg = svg
        self.files = []
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {self.dir}: {exc}") from exc

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.files.append(p)
        return p


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Outputs, command: str, argv, cfg: RunConfig, started: float, extra=None) -> Path:
    """Write ``manifest.json`` atomically (temporary file, then rename)."""
    resolved = out.path("resolved.ini")
    cfg.write(resolved)
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.as_dict(),
        "outputs": {p.name: _sha256(p) for p in out.files if p.exists()},
        "timing": {"started_unix": started, "wall_time_s": time.time() - started},
    }
    if extra:
        manifest.update(extra)
    target = out.dir / "manifest.json"
    fd, tmp = tempfile.mkstemp(dir=out.dir, prefix=".manifest-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return target


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "selfheal"
    fig, ax = plt.subplots(figsize=(6, 4))
    return plt, fig, ax


def _save(plt, fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_spectrum(path, energies, values, label):
    plt, fig, ax = _figure()
    sc = ax.scatter(energies.real, energies.imag, c=values, s=14, cmap="viridis")
    fig.colorbar(sc, ax=ax, label=label)
    ax.set_xlabel("Re E")
    ax.set_ylabel("Im E")
    _save(plt, fig, path)


def plot_lines(path, x, series, xlabel, ylabel, hlines=(), logy=False):
    """``series``: list of (label, y); ``hlines``: list of (label, value, style)."""
    plt, fig, ax = _figure()
    for label, y in series:
        ax.plot(x, y, label=label, lw=1.2)
    for label, value, style in hlines:
        ax.axhline(value, ls=style, color="k", lw=0.8, label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    _save(plt, fig, path)


# ---------------------------------------------------------------------------
# commands


def cmd_spectrum(cfg: RunConfig, out: Outputs, marked=()):
    L = cfg.L
    H = build_hamiltonian(cfg.model(), L, cfg.bc(), loss=cfg.num("lattice", "loss"))
    spec = eigensystem(H)
    delta = cfg.num("spectrum", "delta")
    write_spectrum_csv(out.path("spectrum.csv"), spec, delta)
    if out.svg:
        color = cfg.get("spectrum", "color").strip()
        if color == "corner_weight":
            vals = np.array([corner_weight(spec.right[:, n], delta) for n in range(L)])
        elif color == "im_E":
            vals = spec.energies.imag
        else:
            raise ConfigError(f"unknown spectrum colouring {color!r}")
        plot_spectrum(out.path("spectrum.svg"), spec.energies, vals, color)
    return spec


def _ensemble_outputs(rec, out: Outputs, prefix: str, extra_lines=()):
    write_ensemble_csv(out.path(f"{prefix}ensemble.csv"), rec)
    write_ensemble_json(out.path(f"{prefix}ensemble.json"), rec)
    if not out.svg:
        return
    t = rec.times
    if rec.is_pair:
        plot_lines(out.path(f"{prefix}eta.svg"), t,
                   [("<eta>", rec.mean_eta), ("<eps>", rec.mean_epsilon),
                    ("exp 2t(lam_xi - lam_phi)", rec.estimator)],
                   "t", "deviation", logy=True)
        plot_lines(out.path(f"{prefix}lambda.svg"), t,
                   [("lambda_phi", rec.lambda_phi), ("lambda_xi", rec.lambda_xi)],
                   "t", "FTLE", hlines=extra_lines)
        plot_lines(out.path(f"{prefix}tdl.svg"), t,
                   [("t (lambda_xi - lambda_phi)", rec.t_lambda_diff)],
                   "t", "t (lambda_xi - lambda_phi)", hlines=[("0", 0.0, ":")])
    else:
        plot_lines(out.path(f"{prefix}lambda.svg"), t, [("lambda_psi", rec.lambda_psi)],
                   "t", "FTLE", hlines=extra_lines)


def cmd_evolve(cfg: RunConfig, out: Outputs, single: bool = False):
    base = cfg.evolution()
    res = evolve_batch(base, [rng_for(cfg.seed, 0)], pair=not single)
    rec = res.record(0)
    write_trajectory_csv(out.path("trajectory.csv"), rec)
    if len(rec.snapshot_times):
        dens = rec.density_psi if single else rec.density_phi
        write_density_csv(out.path("density.csv"), rec.snapshot_times, dens)
    if out.svg:
        if rec.is_pair:
            plot_lines(out.path("eta.svg"), rec.times, [("eta", rec.eta), ("eps", rec.epsilon)],
                       "t", "deviation", logy=True)
        else:
            plot_lines(out.path("lambda.svg"), rec.times,
                       [("lambda", ftle(rec.log_norm_psi_sq, rec.times))], "t", "FTLE")
    return rec


def cmd_ensemble(cfg: RunConfig, out: Outputs, single: bool = False, prefix: str = ""):
    base = cfg.evolution()
    rec = run_ensemble(cfg.ensemble(base, pair=not single))
    _ensemble_outputs(rec, out, prefix)
    return rec


def theory_rows(cfg: RunConfig):
    """``(name, value)`` rows; raises UnsupportedModelError for complex hoppings."""
    model = cfg.model()
    tc = transport_coefficients(model)
    rows = [("S_bar", tc.S_bar), ("v_bar", tc.v_bar), ("D_bar", tc.D_bar),
            ("xi", correlation_length(model))]
    noise = cfg.noise()
    if noise is None or getattr(noise, "sigma", 1.0) == 0:
        rows += [("Q_inf", math.inf), ("lambda_inf_obc", math.nan),
                 ("lambda_inf_obc_L", math.nan), ("lambda_inf_pbc", math.nan)]
        return rows
    q = q_infinity(coherence_function(noise))
    rows += [("Q_inf", q), ("lambda_inf_obc", lambda_infty_obc(tc, q)),
             ("lambda_inf_obc_L", lambda_infty_obc(tc, q, cfg.L)),
             ("lambda_inf_pbc", lambda_infty_pbc(tc, q))]
    return rows


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "∞" if v > 0 else "-∞"
    if math.isnan(v):
        return "n/a"
    return f"{v:.5f}"


def cmd_theory(cfg: RunConfig, fmt: str = "table", stream=None):
    stream = stream or sys.stdout
    rows = theory_rows(cfg)
    if fmt == "csv":
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["quantity", "value"])
        for name, v in rows:
            w.writerow([name, repr(float(v))])
    else:
        width = max(len(n) for n, _ in rows)
        for name, v in rows:
            stream.write(f"{name:<{width}}  {_fmt(v)}\n")
    return rows


def cmd_sweep(cfg: RunConfig, out: Outputs, prefix: str = ""):
    """``<eta>`` at time ``T`` for every ``stride``-th eigenstate."""
    L = cfg.L
    T = cfg.num("sweep", "T")
    stride = cfg.num("sweep", "stride", int)
    if stride < 1:
        raise ConfigError("sweep.stride must be at least 1")
    base = cfg.evolution(t_max=T)
    n_steps = base.n_steps
    spec = eigensystem(base.hamiltonian(False))
    rows = []
    for idx in range(0, L, stride):
        run = cfg.evolution(t_max=T, sample_stride=n_steps,
                            init=InitialState(kind="eigen_index", index=idx))
        rec = run_ensemble(cfg.ensemble(run))
        E = spec.energies[idx]
        rows.append((idx, E.real, E.imag, float(rec.mean_eta[-1])))
    path = out.path(f"{prefix}sweep.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "re_E", "im_E", "eta_at_T"])
        for idx, re, im, e in rows:
            w.writerow([idx, repr(float(re)), repr(float(im)), repr(e)])
    if out.svg:
        arr = np.array(rows)
        plot_spectrum(out.path(f"{prefix}sweep.svg"), arr[:, 1] + 1j * arr[:, 2], arr[:, 3],
                      f"<eta>(T={T:g})")
    return rows


def selected_states(L: int, k: int = 5, seed: int = SELECTION_SEED) -> list:
    """Fixed pseudo-random choice of ``k`` eigenstate indices, ascending."""
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(L, size=k, replace=False))


def _noise_layer(level: str) -> dict:
    if level not in NOISE_LEVELS:
        raise ConfigError(f"unknown noise level {level!r}")
    return {"noise": dict(NOISE_LEVELS[level])}


def _noise_time(level: str) -> dict:
    if level == "strong":
        return {"evolution": {"t_max": "1000"}, "sweep": {"T": "1000"},
                "ensemble": {"n_realizations": "1000"}}
    n = "1" if level == "none" else "1000"
    return {"evolution": {"t_max": "60"}, "sweep": {"T": "60"}, "ensemble": {"n_realizations": n}}


def run_preset(name: str, cfg: RunConfig, out: Outputs, noise: str | None):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    if name in ("fig1", "fig2", "sm-s4", "sm-s5", "sm-s6"):
        level = noise or ("strong" if name == "fig2" else "weak")
        if level == "none":
            cfg.set("ensemble.n_realizations", "1")
        if name == "fig2":
            _fig2(cfg, out, level)
        else:
            _spectrum_preset(cfg, out, level)
    elif name == "sm-s8":
        _s8(cfg, out)
    elif name == "sm-s10":
        _s10(cfg, out)
    else:
        _eta_avg(cfg, out)


def _reference_lines(cfg: RunConfig, spec, E_init, level):
    lines = [("max Im E", max_imag_energy(spec), "--"), ("Im E_init", E_init.imag, "-.")]
    if level == "strong":
        tc = transport_coefficients(cfg.model())
        q = q_infinity(coherence_function(cfg.noise()))
        lines.append(("lambda_inf theory", lambda_infty_obc(tc, q), ":"))
    return lines


def _fig2(cfg: RunConfig, out: Outputs, level: str):
    base = cfg.evolution()
    spec = eigensystem(base.hamiltonian(False))
    idx = int(np.argmin(np.abs(spec.energies - base.init.energy)))
    rec = run_ensemble(cfg.ensemble(base))
    _ensemble_outputs(rec, out, f"{level}_",
                      _reference_lines(cfg, spec, spec.energies[idx], level))


def _spectrum_preset(cfg: RunConfig, out: Outputs, level: str):
    cmd_spectrum(cfg, out)
    cmd_sweep(cfg, out, prefix=f"{level}_")
    picks = selected_states(cfg.L)
    spec = eigensystem(cfg.evolution().hamiltonian(False))
    for rank, idx in enumerate(picks):
        run = cfg.evolution(init=InitialState(kind="eigen_index", index=idx))
        rec = run_ensemble(cfg.ensemble(run))
        lines = _reference_lines(cfg, spec, spec.energies[idx], level) if rank == 2 else ()
        _ensemble_outputs(rec, out, f"{level}_state{idx}_", lines)


def _s8(cfg: RunConfig, out: Outputs):
    quiet = cfg.evolution(noise=None)
    clean = evolve_batch(quiet, [rng_for(cfg.seed, 0)], pair=False).record(0)
    noisy_cfg = cfg.evolution()
    noisy = evolve_batch(noisy_cfg, [rng_for(cfg.seed, 0)], pair=False).record(0)
    rec = run_ensemble(cfg.ensemble(noisy_cfg, pair=False))
    t = clean.times
    # (1/t) ln |psi| = ln |psi|^2 / (2t)
    series = [("noiseless", ftle(clean.log_norm_psi_sq, t)),
              ("single noisy realization", ftle(noisy.log_norm_psi_sq, t)),
              ("ensemble average", rec.lambda_psi)]
    path = out.path("s8_ftle.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "ftle_noiseless", "ftle_single", "ftle_ensemble"])
        for row in zip(t, *(y for _, y in series)):
            w.writerow([repr(float(x)) for x in row])
    if out.svg:
        plot_lines(out.path("s8_ftle.svg"), t, series, "t", "(1/t) ln |psi|",
                   hlines=[(f"reference {S8_REFERENCE}", S8_REFERENCE, "--")])


def _s10(cfg: RunConfig, out: Outputs):
    series_single, series_avg = [], []
    t = None
    for sigma in S10_SIGMAS:
        cfg.set("noise.sigma", repr(sigma))
        base = cfg.evolution()
        single = evolve_batch(base, [rng_for(cfg.seed, 0)], pair=True).record(0)
        ens = run_ensemble(cfg.ensemble(base))
        t = ens.times
        series_single.append((f"sigma={sigma:g}", single.eta))
        series_avg.append((f"sigma={sigma:g}", ens.mean_eta))
        _ensemble_outputs(ens, out, f"s10_sigma{sigma:g}_")
    path = out.path("s10_eta.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"eta_single_{lab}" for lab, _ in series_single]
                   + [f"eta_mean_{lab}" for lab, _ in series_avg])
        for i in range(len(t)):
            w.writerow([repr(float(t[i]))] + [repr(float(y[i])) for _, y in series_single]
                       + [repr(float(y[i])) for _, y in series_avg])
    if out.svg:
        plot_lines(out.path("s10_eta_single.svg"), t, series_single, "t", "eta", logy=True)
        plot_lines(out.path("s10_eta_mean.svg"), t, series_avg, "t", "<eta>", logy=True)


def _eta_avg(cfg: RunConfig, out: Outputs):
    rows = []
    for idx in selected_states(cfg.L, k=6, seed=SELECTION_SEED + 1):
        run = cfg.evolution(init=InitialState(kind="eigen_index", index=idx))
        rec = run_ensemble(cfg.ensemble(run))
        tab = estimator_comparison(rec)
        _ensemble_outputs(rec, out, f"etaavg_state{idx}_")
        rows.append((idx, tab.max_abs_diff))
    path = out.path("etaavg_summary.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "max_abs_eta_minus_estimator"])
        for idx, d in rows:
            w.writerow([idx, repr(d)])


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a configuration value (repeatable)")
    p.add_argument("--out", default="selfheal-out", help="output directory")
    p.add_argument("--no-svg", action="store_true", help="skip SVG plots")
    p.add_argument("--L", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--t-max", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--n-realizations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)


_FLAG_KEYS = {
    "L": "lattice.L", "dt": "evolution.dt", "t_max": "evolution.t_max",
    "theta": "noise.theta", "sigma": "noise.sigma",
    "n_realizations": "ensemble.n_realizations", "seed": "ensemble.seed",
    "workers": "ensemble.workers",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfheal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"selfheal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("spectrum", "OBC spectrum with corner weights"),
                            ("evolve", "one noise realization"),
                            ("ensemble", "noise-averaged observables"),
                            ("theory", "closed-form coefficient table"),
                            ("sweep", "<eta> at time T across the spectrum")):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        if name in ("evolve", "ensemble"):
            p.add_argument("--single", action="store_true",
                           help="evolve one state under the full generator (FTLE only)")
        if name == "theory":
            p.add_argument("--format", choices=("table", "csv"), default="table")
    p = sub.add_parser("preset", help="reproduce a figure with embedded settings")
    p.add_argument("name", choices=sorted(PRESETS))
    p.add_argument("--noise", choices=sorted(NOISE_LEVELS))
    p.add_argument("--quick", action="store_true", help="tiny smoke-test scale")
    _common(p)
    return parser


def _resolve(args) -> RunConfig:
    layers = []
    if args.command == "preset":
        layers.append(PRESETS[args.name][1])
        if args.name in ("fig1", "fig2", "sm-s4", "sm-s5", "sm-s6"):
            level = args.noise or ("strong" if args.name == "fig2" else "weak")
            layers += [_noise_layer(level), _noise_time(level)]
        elif args.noise:
            layers.append(_noise_layer(args.noise))
        if args.quick:
            layers.append(QUICK)
    cfg = RunConfig.load(args.config, layers)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    for attr, key in _FLAG_KEYS.items():
        val = getattr(args, attr, None)
        if val is not None:
            cfg.set(key, val)
    return cfg


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.time()
    try:
        cfg = _resolve(args)
        if args.command == "theory":
            cmd_theory(cfg, args.format)
            return EXIT_OK
        out = Outputs(args.out, svg=not args.no_svg and cfg.flag("output", "svg"))
        if args.command == "spectrum":
            cmd_spectrum(cfg, out)
        elif args.command == "evolve":
            cmd_evolve(cfg, out, args.single)
        elif args.command == "ensemble":
            cmd_ensemble(cfg, out, args.single)
        elif args.command == "sweep":
            cmd_sweep(cfg, out)
        else:
            run_preset(args.name, cfg, out, args.noise)
        write_manifest(out, args.command, argv, cfg, started)
    except ConfigError as exc:
        print(f"selfheal: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PartialResultError as exc:
        print(f"selfheal: {exc} ({exc.completed} realizations completed)", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"selfheal: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"selfheal: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SelfHealError as exc:
        print(f"selfheal: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
