"""Batch experiments: config validation, figure pipelines and run manifests.

Each experiment writes its data files into one output directory together
with ``manifest.json`` (resolved inputs, seed, library version, SHA-256 of
every data file and a summary of derived numbers). Nothing time-dependent is
written, so rerunning a config reproduces every file byte for byte.
"""

from __future__ import annotations

import copy
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from . import __version__
from . import io
from .heat_forward import (
    Field, GaussianSource, PhantomSpec, SurfaceRecord, add_noise, make_phantom,
    pad_scene, required_padding, simulate_surface, solve_heat,
)
from .lattice_walk import (
    LatticeSpec, OccupationSeries, displacement_variance, empirical_moments,
    equilibrium_stats, gaussian_profile, parity_windows, simulate_occupation, simulate_trajectories,
)
from .resolution import (
    PsfGrid, delta_r_time, k_cut, psf_2d, psf_widths, report_depth, report_time,
    entropy_trace, sinc_reconstruction,
)
from .saft import ReconstructionGrid, averaging_gain, saft_backproject
from .spectral import (
    NoiseSpec, build_drift_matrix, integrate_langevin, lattice_propagator, spectral_system, stability_limit,
)
from .virtual_wave import RegularizerConfig, build_kernel, default_tp_grid, virtual_field

EXPERIMENT_IDS = (
    "walk", "occupation", "langevin", "entropy", "psf1d", "psf2d", "phantom-pipeline", "gain-table",
)


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


# ---------------------------------------------------------------- defaults

THREE_SOURCES = [
    {"center": [50.0, 4.0], "amplitude": 1.0, "width": 2.0},
    {"center": [100.0, 8.0], "amplitude": 1.0, "width": 2.0},
    {"center": [150.0, 12.0], "amplitude": 1.0, "width": 2.0},
]

DEFAULTS: dict[str, dict] = {
    "walk": {
        "half_width": 20, "n_walkers": 500, "n_steps": 200, "compare_times": [20, 100],
        "min_expected": 5.0,
    },
    "occupation": {
        "n_cells": 40, "n_walkers": 5000, "t": 1000, "n_realizations": 400,
        "equilibrium": {"n_equilibrium": 10000, "n_injected": 1000, "t": 20, "n_realizations": 5000},
    },
    "langevin": {
        "sizes": [2, 8, 40, 128], "n_cells": 40, "n0": 1000.0, "t_final": 20.0,
        "dts": [0.2, 0.1, 0.05, 0.025], "noise_variance": 25.0, "noise_model": "fdt",
        "noisy_steps": 2000, "noisy_dt": 0.2, "record_every": 10,
    },
    "entropy": {"n_profiles": 10, "n_cells": 40, "t_max": 200.0, "n_samples": 201},
    "psf1d": {
        "snr": 1000.0, "alpha": 0.5, "t": 100.0, "depth": 10.0, "alphas": [0.1, 0.5, 2.0],
        "n_grid": 40001, "extent": 8.0,
    },
    "psf2d": {
        "snrs": [1000.0, 100.0], "n_x": 512, "n_z": 512, "x_extent": 2.5, "z_range": [0.0, 2.0],
        "taper": False,
    },
    "phantom-pipeline": {
        "phantom": {"shape": [200, 16], "sources": THREE_SOURCES},
        "dt": 0.5, "t_max": 300.0, "dtp": 0.25, "tp_max": 40.0, "c": 1.0, "alpha": 0.5,
        "snr": 1000.0, "methods": ["tsvd"], "regularizer": {}, "padding": None,
        "peak_window": 20, "kernel_diagnostics": None,
    },
    "gain-table": {"n_detectors": [1, 4, 16, 64, 200, 256]},
}

KERNEL_DIAGNOSTIC_DEFAULTS = {"n_t": 200, "n_tp": 200, "t_max": 400.0}


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"{where}.{key}: unknown parameter (allowed: {', '.join(sorted(defaults))})")
        ref = defaults[key]
        if isinstance(ref, dict) and isinstance(value, dict) and key not in ("regularizer",):
            out[key] = _merge(ref, value, f"{where}.{key}") if ref else value
        else:
            out[key] = _coerce(value, ref, f"{where}.{key}")
    return out


def _coerce(value, ref, where: str):
    if ref is None or isinstance(ref, (dict, list)):
        if isinstance(ref, list) and not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return value
    if isinstance(ref, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(ref, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(ref, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(ref, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def _require(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def _guard(where: str, build: Callable):
    """Run a module constructor, reporting its precondition failure as a config error."""
    try:
        return build()
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _check_params(exp: str, p: dict) -> None:
    w = "params"
    if exp == "walk":
        _require(p["half_width"] >= 1, f"{w}.half_width", "must be >= 1")
        _require(p["n_walkers"] >= 2, f"{w}.n_walkers", "must be >= 2")
        _require(p["n_steps"] >= 1, f"{w}.n_steps", "must be >= 1")
        for t in p["compare_times"]:
            _require(isinstance(t, int) and 1 <= t <= p["n_steps"], f"{w}.compare_times", f"{t!r} not in [1, n_steps]")
    elif exp == "occupation":
        _guard(f"{w}.n_cells", lambda: LatticeSpec(p["n_cells"]))
        for key in ("n_walkers", "t", "n_realizations"):
            _require(p[key] >= (2 if key == "n_realizations" else 1), f"{w}.{key}", "too small")
        eq = p["equilibrium"]
        if eq is not None:
            for key in ("n_equilibrium", "t", "n_realizations"):
                _require(isinstance(eq[key], int) and eq[key] >= 1, f"{w}.equilibrium.{key}", "must be a positive integer")
            _require(isinstance(eq["n_injected"], int) and eq["n_injected"] >= 0, f"{w}.equilibrium.n_injected", "must be >= 0")
    elif exp == "langevin":
        for n in p["sizes"]:
            _guard(f"{w}.sizes", lambda n=n: spectral_system(n))
        _guard(f"{w}.n_cells", lambda: LatticeSpec(p["n_cells"]))
        limit = 1.0 / (2 * spectral_system(p["n_cells"]).gamma.max())
        dts = p["dts"]
        _require(len(dts) >= 2, f"{w}.dts", "need at least two step sizes")
        for dt in dts + [p["noisy_dt"]]:
            _require(isinstance(dt, (int, float)) and 0 < dt <= limit, f"{w}.dts",
                     f"step {dt!r} outside (0, {limit:.6g}] (stability bound)")
        for dt in dts:
            _require(abs(p["t_final"] / dt - round(p["t_final"] / dt)) < 1e-9, f"{w}.dts",
                     f"t_final must be a multiple of {dt}")
        _guard(f"{w}.noise_variance", lambda: NoiseSpec(p["noise_variance"]))
        _require(p["noise_model"] in ("fdt", "white"), f"{w}.noise_model", "must be 'fdt' or 'white'")
        _require(p["record_every"] >= 1 and p["noisy_steps"] >= 1, f"{w}.noisy_steps", "must be >= 1")
    elif exp == "entropy":
        _require(p["n_profiles"] >= 1, f"{w}.n_profiles", "must be >= 1")
        _guard(f"{w}.n_cells", lambda: spectral_system(p["n_cells"]))
        _require(p["t_max"] > 0 and p["n_samples"] >= 2, f"{w}.t_max", "need t_max > 0 and n_samples >= 2")
    elif exp == "psf1d":
        _guard(f"{w}.snr", lambda: report_time(p["alpha"], p["t"], p["snr"]))
        for a in p["alphas"]:
            _guard(f"{w}.alphas", lambda a=a: report_depth(a, p["depth"], p["snr"]))
        _require(p["n_grid"] >= 101 and p["extent"] > 1, f"{w}.n_grid", "need n_grid >= 101 and extent > 1")
    elif exp == "psf2d":
        _require(len(p["snrs"]) >= 1, f"{w}.snrs", "need at least one SNR")
        for s in p["snrs"]:
            _require(isinstance(s, (int, float)) and s > 1, f"{w}.snrs", f"SNR {s!r} must exceed 1")
        _require(p["n_x"] >= 16 and p["n_z"] >= 16, f"{w}.n_x", "grid must be at least 16x16")
        _require(len(p["z_range"]) == 2 and p["z_range"][1] > p["z_range"][0], f"{w}.z_range", "need [z0, z1] with z1 > z0")
    elif exp == "phantom-pipeline":
        spec = _guard(f"{w}.phantom", lambda: PhantomSpec.from_dict(p["phantom"]))
        _require(len(spec.shape) == 2, f"{w}.phantom.shape", "must be 2D [n_x, n_z]")
        _require(len(spec.sources) >= 1, f"{w}.phantom.sources", "need at least one source")
        for key in ("dt", "t_max", "dtp", "tp_max", "c", "alpha", "snr"):
            _require(p[key] > 0, f"{w}.{key}", "must be positive")
        _require(p["snr"] > 1, f"{w}.snr", "must exceed 1")
        _require(p["t_max"] >= 2 * p["dt"] and p["tp_max"] >= 2 * p["dtp"], f"{w}.t_max", "grids need >= 2 samples")
        methods = p["methods"]
        _require(1 <= len(methods) <= 2 and len(set(methods)) == len(methods) and set(methods) <= {"tsvd", "admm"},
                 f"{w}.methods", "one or two distinct entries of 'tsvd', 'admm'")
        _guard(f"{w}.regularizer", lambda: RegularizerConfig.from_dict(p["regularizer"]))
        if p["padding"] is not None:
            _require(isinstance(p["padding"], int) and p["padding"] >= 0, f"{w}.padding", "must be a nonnegative integer")
        _require(p["peak_window"] >= 1, f"{w}.peak_window", "must be >= 1")
        if p["kernel_diagnostics"] is not None:
            p["kernel_diagnostics"] = _merge(KERNEL_DIAGNOSTIC_DEFAULTS, p["kernel_diagnostics"], f"{w}.kernel_diagnostics")
            kd = p["kernel_diagnostics"]
            _require(kd["n_t"] >= 2 and kd["n_tp"] >= 2 and kd["t_max"] > 0, f"{w}.kernel_diagnostics", "invalid sizes")
    elif exp == "gain-table":
        for n in p["n_detectors"]:
            _require(isinstance(n, int) and n >= 1, f"{w}.n_detectors", f"{n!r} must be an integer >= 1")


@dataclass
class ExperimentConfig:
    experiment: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    out: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be a JSON object")
        allowed = {"experiment", "params", "seed", "out"}
        extra = set(data) - allowed
        if extra:
            raise ConfigError(f"config: unknown field(s) {sorted(extra)}")
        if "experiment" not in data:
            raise ConfigError("experiment: missing")
        seed = data.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed: expected a nonnegative integer, got {seed!r}")
        params = data.get("params", {})
        if not isinstance(params, dict):
            raise ConfigError("params: must be an object")
        cfg = cls(data["experiment"], params, seed, data.get("out"))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config: file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def validate(self) -> None:
        """Merge defaults and check every parameter before any computation."""
        if self.experiment not in EXPERIMENT_IDS:
            raise ConfigError(f"experiment: unknown id {self.experiment!r} (known: {', '.join(EXPERIMENT_IDS)})")
        self.params = _merge(DEFAULTS[self.experiment], self.params, "params")
        _check_params(self.experiment, self.params)

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "params": self.params, "seed": self.seed}


# ---------------------------------------------------------------- helpers


def _parallel_map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*items)))


def _occupation_piece(n_cells, t, n_source, n_uniform, seed, n_real, first):
    series = simulate_occupation(
        LatticeSpec(n_cells), t, n_source=n_source, n_uniform=n_uniform, seed=seed,
        record_times=[t], n_realizations=n_real, first_realization=first,
    )
    return series.counts


def simulate_stack(n_cells, t, n_source, n_uniform, seed, n_real, jobs=1) -> OccupationSeries:
    """Occupations at time ``t`` for ``n_real`` realizations, split across ``jobs`` processes.

    The result does not depend on ``jobs``.
    """
    pieces = np.array_split(np.arange(n_real), max(1, min(jobs, n_real)))
    items = [(n_cells, t, n_source, n_uniform, seed, int(pc.size), int(pc[0])) for pc in pieces if pc.size]
    counts = np.concatenate(_parallel_map(_occupation_piece, items, jobs), axis=1)
    return OccupationSeries(counts, LatticeSpec(n_cells), np.array([t]), seed)


def fwhm_1d(profile, index: int, spacing: float = 1.0) -> float:
    """Width at half of ``profile[index]`` by linear interpolation; NaN if a side never drops."""
    p = np.asarray(profile, dtype=float)
    half = p[index] / 2
    if not half > 0:
        return float("nan")
    left = index
    while left > 0 and p[left] > half:
        left -= 1
    right = index
    while right < p.size - 1 and p[right] > half:
        right += 1
    if p[left] > half or p[right] > half:
        return float("nan")
    xl = left + (half - p[left]) / (p[left + 1] - p[left])
    xr = right - 1 + (p[right - 1] - half) / (p[right - 1] - p[right])
    return float((xr - xl) * spacing)


def equivalent_fwhm(values: np.ndarray, index: tuple[int, int], dx: float = 1.0, dz: float = 1.0) -> float:
    """Diameter of the disc whose area equals the connected half-maximum region around ``index``."""
    v = np.asarray(values, dtype=float)
    peak = v[index]
    if not peak > 0:
        return float("nan")
    labels, _ = ndimage.label(v >= peak / 2)
    area = np.count_nonzero(labels == labels[index]) * dx * dz
    return float(2 * np.sqrt(area / np.pi))


def locate_peaks(grid: ReconstructionGrid, centers, window: float) -> list[tuple[int, int]]:
    """Index of the maximum within ``+/- window`` laterally of each centre (full depth)."""
    out = []
    for cx, _ in centers:
        cols = np.flatnonzero(np.abs(grid.xs - cx) <= window)
        if cols.size == 0:
            raise ValueError(f"no grid columns within {window} of x={cx}")
        sub = grid.values[cols]
        i, j = np.unravel_index(int(np.argmax(sub)), sub.shape)
        out.append((int(cols[i]), int(j)))
    return out


def image_contrast(values: np.ndarray, index) -> float:
    """Value at ``index`` over the RMS of the whole image."""
    v = np.asarray(values, dtype=float)
    rms = float(np.sqrt(np.mean(v**2)))
    return float(v[index] / rms) if rms > 0 else float("nan")


def record_contrast(record: SurfaceRecord, x: float) -> float:
    """Largest value of the detector trace nearest ``x`` over the RMS of the whole record."""
    d = int(np.argmin(np.abs(record.detectors - x)))
    return image_contrast(record.values, (d, int(np.argmax(record.values[d]))))


@dataclass
class SourceComparison:
    center: tuple[float, float]
    peak_a: tuple[float, float]
    peak_b: tuple[float, float]
    error_a: float
    error_b: float
    fwhm_a: float
    fwhm_b: float
    axial_fwhm_a: float
    axial_fwhm_b: float
    lateral_fwhm_a: float
    lateral_fwhm_b: float

    @property
    def b_narrower(self) -> bool:
        return bool(self.fwhm_b < self.fwhm_a)


@dataclass
class ComparisonReport:
    label_a: str
    label_b: str
    sources: list[SourceComparison]
    background_rms_a: float
    background_rms_b: float

    @property
    def b_narrower_all(self) -> bool:
        return all(s.b_narrower for s in self.sources)

    def to_dict(self) -> dict:
        return {
            "label_a": self.label_a, "label_b": self.label_b,
            "background_rms_a": self.background_rms_a, "background_rms_b": self.background_rms_b,
            "b_narrower_all": self.b_narrower_all,
            "sources": [{**vars(s), "b_narrower": s.b_narrower} for s in self.sources],
        }


def _background_rms(grid: ReconstructionGrid, centers, radius: float) -> float:
    X, Z = np.meshgrid(grid.xs, grid.zs, indexing="ij")
    mask = np.ones(X.shape, dtype=bool)
    for cx, cz in centers:
        mask &= (X - cx) ** 2 + (Z - cz) ** 2 > radius**2
    return float(np.sqrt(np.mean(grid.values[mask] ** 2))) if mask.any() else float("nan")


def compare_reconstructions(
    a: ReconstructionGrid, b: ReconstructionGrid, centers, window: float = 20.0,
    background_radius: float = 6.0, labels: tuple[str, str] = ("a", "b"),
) -> ComparisonReport:
    """Per-source peak error and main-lobe widths of two reconstructions of the same scene.

    ``fwhm_*`` is the equivalent-disc diameter of the half-maximum region; the
    axial and lateral FWHM through the peak are reported alongside (NaN when
    the lobe runs off the grid). Background RMS excludes discs of
    ``background_radius`` around the true centres.
    """
    if a.values.shape != b.values.shape or not (np.allclose(a.xs, b.xs) and np.allclose(a.zs, b.zs)):
        raise ValueError("reconstructions are on different grids")
    centers = [tuple(float(v) for v in c) for c in centers]
    dx = float(a.xs[1] - a.xs[0]) if a.xs.size > 1 else 1.0
    dz = float(a.zs[1] - a.zs[0]) if a.zs.size > 1 else 1.0
    rows = []
    peaks_a = locate_peaks(a, centers, window)
    peaks_b = locate_peaks(b, centers, window)
    for c, pa, pb in zip(centers, peaks_a, peaks_b):
        def stats(g, p):
            pos = (float(g.xs[p[0]]), float(g.zs[p[1]]))
            err = float(np.hypot(pos[0] - c[0], pos[1] - c[1]))
            return (pos, err, equivalent_fwhm(g.values, p, dx, dz),
                    fwhm_1d(g.values[p[0], :], p[1], dz), fwhm_1d(g.values[:, p[1]], p[0], dx))
        sa, sb = stats(a, pa), stats(b, pb)
        rows.append(SourceComparison(c, sa[0], sb[0], sa[1], sb[1], sa[2], sb[2], sa[3], sb[3], sa[4], sb[4]))
    return ComparisonReport(
        labels[0], labels[1], rows,
        _background_rms(a, centers, background_radius), _background_rms(b, centers, background_radius),
    )


def _manifest(cfg: ExperimentConfig, out: Path, files: list[Path], summary: dict) -> dict:
    return {
        "experiment": cfg.experiment,
        "inputs": cfg.params,
        "seed": cfg.seed,
        "version": __version__,
        "files": {f.name: io.sha256(f) for f in sorted(files)},
        "summary": summary,
    }


# ---------------------------------------------------------------- experiments


def _run_walk(p: dict, seed: int, out: Path, jobs: int):
    hw = p["half_width"]
    lattice = LatticeSpec(2 * hw + 1)
    traj = simulate_trajectories(lattice, p["n_walkers"], p["n_steps"], seed)
    files = [io.write_table(out / "trajectories.csv", ["step"] + [f"w_{i}" for i in range(traj.shape[1])],
                            [np.arange(traj.shape[0])] + list((traj - lattice.center).T), fmt="%d")]
    steps = np.arange(traj.shape[0])
    var = displacement_variance(traj, lattice.center)
    files.append(io.write_table(out / "spread.csv", ["step", "variance", "free_variance"], [steps, var, steps.astype(float)]))

    initial = np.zeros(lattice.n_cells)
    initial[lattice.center] = 1.0
    det = solve_heat(Field(initial, alpha=0.5), p["compare_times"])
    cross = {}
    n = p["n_walkers"]
    for t, f in zip(p["compare_times"], det):
        hist = np.bincount(traj[t], minlength=lattice.n_cells).astype(float)
        start = (lattice.center + t) % 2
        centres, ref = parity_windows(f.values, start)
        _, mc = parity_windows(hist / n, start)
        _, mc2 = parity_windows(hist / n, start, weight_power=2)
        # Monte Carlo standard error of the mean window weight per walker
        sigma = np.sqrt(np.maximum(mc2 - mc**2, 0.0) * n / (n - 1) / n)
        checked = (n * ref >= p["min_expected"]) & (sigma > 0)
        z = np.where(checked, np.abs(mc - ref) / np.where(sigma > 0, sigma, 1.0), 0.0)
        files.append(io.write_table(
            out / f"cross_model_t{t}.csv", ["centre", "deterministic", "monte_carlo", "sigma", "checked"],
            [centres - lattice.center, ref, mc, sigma, checked.astype(float)],
        ))
        cross[str(t)] = {"max_abs_z": float(z.max()), "n_checked_bins": int(checked.sum())}
    return files, {"n_cells": lattice.n_cells, "cross_model": cross, "final_spread_variance": float(var[-1])}


def _max_z(dev: np.ndarray, se: np.ndarray) -> float:
    """Largest |dev| / se; a cell with no spread counts as 0 if exact, else inf."""
    dev = np.abs(dev)
    z = np.where(se > 0, dev / np.where(se > 0, se, 1.0), np.where(dev > 0, np.inf, 0.0))
    return float(z.max())


def _run_occupation(p: dict, seed: int, out: Path, jobs: int):
    n, nw, t = p["n_cells"], p["n_walkers"], p["t"]
    stack = simulate_stack(n, t, nw, 0, seed, p["n_realizations"], jobs)
    mom = empirical_moments(stack)
    mean, var = mom.mean[0], mom.variance[0]
    se = mom.standard_error()[0]
    level = nw / n
    exact = nw * lattice_propagator(n, t)[:, LatticeSpec(n).center]
    files = list(io.write_occupation_bin(out / "occupation_uniform.bin", stack))
    files.append(io.write_table(out / "uniform_moments.csv", ["cell", "mean", "variance", "standard_error", "exact_mean"],
                                [np.arange(n), mean, var, se, exact]))
    summary = {
        "uniform": {
            "expected_mean": level,
            "max_abs_z": _max_z(mean - level, se),
            "max_abs_z_exact": _max_z(mean - exact, se),
            "max_exact_deviation": float(np.max(np.abs(exact - level))),
            "variance_mean_ratio": float(var.sum() / mean.sum()),
            "expected_ratio": 1 - 1 / n,
        }
    }
    eq = p["equilibrium"]
    if eq is not None:
        lattice = LatticeSpec(n)
        st = simulate_stack(n, eq["t"], eq["n_injected"], eq["n_equilibrium"], seed + 1, eq["n_realizations"], jobs)
        m = empirical_moments(st)
        g = gaussian_profile(eq["t"], cells=lattice.offsets())
        theory = equilibrium_stats(eq["n_equilibrium"], n, eq["n_injected"], g)
        files += list(io.write_occupation_bin(out / "occupation_equilibrium.bin", st))
        files.append(io.write_table(
            out / "equilibrium_moments.csv", ["cell", "mean", "variance", "approx_variance", "approx_valid"],
            [np.arange(n), m.mean[0], m.variance[0], theory.approx_variance, theory.approx_valid.astype(float)],
        ))
        valid = theory.approx_valid
        lvl = eq["n_equilibrium"] / n
        rel = np.abs(m.variance[0][valid] - lvl) / lvl
        summary["equilibrium"] = {
            "level": lvl,
            "n_valid_cells": int(valid.sum()),
            "max_rel_variance_deviation": float(rel.max()) if rel.size else float("nan"),
        }
    return files, summary


def _langevin_errors(n_cells: int, n0: float, t_final: float, dts) -> np.ndarray:
    M = build_drift_matrix(n_cells)
    system = spectral_system(n_cells)
    initial = np.zeros(n_cells)
    initial[n_cells // 2] = n0
    exact = system.inverse(system.forward(initial) * np.exp(-system.gamma * t_final))
    errs = []
    for dt in dts:
        steps = int(round(t_final / dt))
        series = integrate_langevin(initial, M, None, dt, steps, record_every=steps)
        errs.append(np.max(np.abs(series.counts[-1] - exact)))
    return np.array(errs)


def _run_langevin(p: dict, seed: int, out: Path, jobs: int):
    diag = []
    for n in p["sizes"]:
        s = spectral_system(n)
        F = s.basis
        diag.append(np.max(np.abs(F @ build_drift_matrix(n) @ F.T - np.diag(s.gamma))))
    files = [io.write_table(out / "diagonalization.csv", ["n_cells", "max_error"], [np.array(p["sizes"]), np.array(diag)])]
    system = spectral_system(p["n_cells"])
    files.append(io.write_spectrum_csv(out / "spectrum.csv", system))

    dts = np.array(p["dts"], dtype=float)
    errs = _langevin_errors(p["n_cells"], p["n0"], p["t_final"], dts)
    orders = np.log2(errs[:-1] / errs[1:]) / np.log2(dts[:-1] / dts[1:])
    files.append(io.write_table(out / "convergence.csv", ["dt", "max_error"], [dts, errs]))

    M = build_drift_matrix(p["n_cells"])
    initial = np.zeros(p["n_cells"])
    initial[p["n_cells"] // 2] = p["n0"]
    series = integrate_langevin(
        initial, M, NoiseSpec(p["noise_variance"], seed), p["noisy_dt"], p["noisy_steps"],
        record_every=p["record_every"], noise_model=p["noise_model"],
    )
    files.append(io.write_occupation_csv(out / "langevin.csv", series))
    summary = {
        "max_diagonalization_error": float(max(diag)),
        "diagonalization_errors": dict(zip(map(str, p["sizes"]), map(float, diag))),
        "errors": errs.tolist(),
        "observed_orders": orders.tolist(),
        "observed_order": float(np.mean(orders)),
        "stability_limit": stability_limit(M),
        "total_drift": float(np.max(np.abs(series.totals - series.totals[0]))),
    }
    return files, summary


def random_profiles(n_profiles: int, n_cells: int, seed: int) -> np.ndarray:
    """Positive normalized profiles: half dense uniform draws, half sparse (a few occupied cells)."""
    rng = np.random.default_rng(seed)
    out = rng.random((n_profiles, n_cells))
    for i in range(1, n_profiles, 2):
        keep = rng.random(n_cells) < 0.15
        keep[rng.integers(n_cells)] = True
        out[i] *= keep
    return out / out.sum(axis=1, keepdims=True)


def _run_entropy(p: dict, seed: int, out: Path, jobs: int):
    profiles = random_profiles(p["n_profiles"], p["n_cells"], seed)
    times = np.linspace(0.0, p["t_max"], p["n_samples"])
    traces = [entropy_trace(pr, times)[1] for pr in profiles]
    files = [io.write_table(out / "entropy.csv", ["t"] + [f"profile_{i}" for i in range(len(traces))], [times] + traces)]
    incs = [float(np.min(np.diff(tr))) for tr in traces]
    return files, {
        "min_increment": min(incs), "min_increment_per_profile": incs,
        "max_entropy": float(np.log(p["n_cells"])), "final_entropy": [float(tr[-1]) for tr in traces],
    }


def _run_psf1d(p: dict, seed: int, out: Path, jobs: int):
    kc = k_cut(p["snr"], p["alpha"], p["t"])
    dr = delta_r_time(p["alpha"], p["t"], p["snr"])
    half = p["extent"] * dr
    xs = np.linspace(-half, half, p["n_grid"])
    prof = sinc_reconstruction(1.0, kc, xs)
    # nearest sign changes either side of the centre
    sign = np.signbit(prof)
    right = int(np.argmax(sign[xs > 0])) + int(np.count_nonzero(xs <= 0))
    left_part = sign[xs < 0][::-1]
    left = int(np.count_nonzero(xs < 0)) - 1 - int(np.argmax(left_part))

    def root(i):  # linear interpolation between i-1 and i
        return xs[i - 1] - prof[i - 1] * (xs[i] - xs[i - 1]) / (prof[i] - prof[i - 1])

    zero_spacing = float(root(right) - root(left + 1))
    files = [io.write_table(out / "sinc.csv", ["x", "value"], [xs, prof])]
    reports = {"time": report_time(p["alpha"], p["t"], p["snr"]).to_dict()}
    depth = {str(a): report_depth(a, p["depth"], p["snr"]).to_dict() for a in p["alphas"]}
    reports["depth"] = depth
    files.append(io.write_json(out / "resolution_report.json", reports))
    drs = np.array([d["delta_r"] for d in depth.values()])
    return files, {
        "k_cut": kc, "delta_r": dr, "delta_r_times_k_cut": dr * kc,
        "zero_spacing": zero_spacing, "expected_zero_spacing": 2 * np.pi / kc,
        "grid_step": float(xs[1] - xs[0]),
        "delta_r_depth_spread": float(drs.max() - drs.min()),
    }


def _psf_piece(snr, n_x, n_z, x_extent, z0, z1, taper):
    grid = PsfGrid(n_x, n_z, x_extent, (z0, z1))
    return psf_2d(snr, 1.0, grid, taper=taper)


def _run_psf2d(p: dict, seed: int, out: Path, jobs: int):
    items = [(float(s), p["n_x"], p["n_z"], p["x_extent"], *p["z_range"], p["taper"]) for s in p["snrs"]]
    images = _parallel_map(_psf_piece, items, jobs)
    files, summary = [], {}
    for snr, img in zip(p["snrs"], images):
        files += io.write_psf(out / f"psf_snr{snr:g}", img)
        w = psf_widths(img)
        summary[f"{snr:g}"] = {
            "peak": list(img.peak),
            "axial_window": list(w.axial_window),
            "axial_fwhm": w.axial.fwhm, "lateral_fwhm": w.lateral.fwhm,
            "axial_zero_width": w.axial.zero_width, "lateral_zero_width": w.lateral.zero_width,
            "fwhm_ratio": w.fwhm_ratio, "zero_ratio": w.zero_ratio,
        }
    return files, summary


@dataclass
class PipelineResult:
    """Arrays of one phantom run (the four panels) plus derived numbers."""

    phantom: Field
    spec: PhantomSpec
    clean: SurfaceRecord
    record: SurfaceRecord
    virtual: dict
    reconstructions: dict
    info: dict


def run_pipeline(p: dict, seed: int) -> PipelineResult:
    """Phantom, surface record with noise, virtual waves per method and SAFT images."""
    spec = PhantomSpec.from_dict(p["phantom"])
    n_x, n_z = spec.shape
    phantom = make_phantom(spec, alpha=p["alpha"])
    times = p["dt"] * np.arange(1, int(round(p["t_max"] / p["dt"])) + 1)
    pad = required_padding(spec, times[-1], p["alpha"]) if p["padding"] is None else p["padding"]
    detectors = np.arange(n_x, dtype=float)
    surf = simulate_surface(pad_scene(phantom, pad, pad), detectors + pad, times)
    clean = SurfaceRecord(detectors, times, surf.values)
    record = add_noise(clean, p["snr"], seed)
    tp = p["dtp"] * np.arange(int(round(p["tp_max"] / p["dtp"])) + 1)
    K = build_kernel(times, tp, p["c"], p["alpha"])
    grid = ReconstructionGrid.regular(n_x, n_z)
    virtual, recon, info = {}, {}, {"padding": pad}
    for method in p["methods"]:
        cfg = RegularizerConfig.from_dict({**p["regularizer"], "method": method})
        snr = p["snr"] if method == "tsvd" and "tsvd_rel_threshold" not in p["regularizer"] else None
        vf, inv = virtual_field(K, record, cfg, snr=snr)
        virtual[method] = vf
        recon[method] = saft_backproject(vf, detectors, grid, p["c"])
        info[method] = inv
    return PipelineResult(phantom, spec, clean, record, virtual, recon, info)


def kernel_diagnostics(n_t: int, n_tp: int, t_max: float, c: float = 1.0, alpha: float = 0.5) -> dict:
    times = np.linspace(t_max / n_t, t_max, n_t)
    K = build_kernel(times, default_tp_grid(t_max, n_tp, c, alpha), c, alpha)
    rows = K.entries.sum(axis=1)
    late = times >= 10 * K.dt
    s = K.singular_values / K.singular_values[0]
    below = np.flatnonzero(s < 1e-3)
    return {
        "row_sums": rows, "times": times, "singular_values": K.singular_values,
        "max_row_sum_error": float(np.max(np.abs(rows[late] - 2) / 2)),
        "decades": float(np.log10(s[0] / s[-1])),
        "first_index_below_1e-3": int(below[0]) if below.size else -1,
    }


def _run_phantom(p: dict, seed: int, out: Path, jobs: int):
    res = run_pipeline(p, seed)
    files = list(io.write_field(out / "T0.bin", res.phantom))
    files.append(io.write_record_csv(out / "record.csv", res.record))
    centers = [s.center for s in res.spec.sources]
    deepest = int(np.argmax([c[1] for c in centers]))
    summary = {"padding": res.info["padding"], "methods": {}}
    rec_contrast = record_contrast(res.record, centers[deepest][0])
    for m in p["methods"]:
        files.append(io.write_virtual_csv(out / f"virtual_{m}.csv", res.virtual[m]))
        files += list(io.write_array(out / f"reconstruction_{m}.bin", res.reconstructions[m].values,
                                     {"spacing": 1.0, "x0": 0.0, "z0": 0.0}))
        grid = res.reconstructions[m]
        peaks = locate_peaks(grid, centers, p["peak_window"])
        summary["methods"][m] = {
            "inversion": res.info[m],
            "peaks": [[float(grid.xs[i]), float(grid.zs[j])] for i, j in peaks],
            "peak_errors": [[float(grid.xs[i] - c[0]), float(grid.zs[j] - c[1])] for (i, j), c in zip(peaks, centers)],
            "deepest_contrast": image_contrast(grid.values, peaks[deepest]),
            "min_value": float(grid.values.min()),
            "min_virtual": float(res.virtual[m].values.min()),
        }
    summary["record_deepest_contrast"] = rec_contrast
    if len(p["methods"]) == 2:
        a, b = p["methods"]
        report = compare_reconstructions(res.reconstructions[a], res.reconstructions[b], centers,
                                         window=p["peak_window"], labels=(a, b))
        files.append(io.write_json(out / "comparison.json", report.to_dict()))
        summary["comparison"] = {"b_narrower_all": report.b_narrower_all}
    if p["kernel_diagnostics"] is not None:
        kd = kernel_diagnostics(**p["kernel_diagnostics"], c=p["c"], alpha=p["alpha"])
        files.append(io.write_table(out / "kernel_rows.csv", ["t", "row_sum"], [kd["times"], kd["row_sums"]]))
        files.append(io.write_table(out / "kernel_spectrum.csv", ["index", "sigma"],
                                    [np.arange(kd["singular_values"].size), kd["singular_values"]]))
        summary["kernel"] = {k: kd[k] for k in ("max_row_sum_error", "decades", "first_index_below_1e-3")}
    return files, summary


def _run_gain(p: dict, seed: int, out: Path, jobs: int):
    ns = np.array(p["n_detectors"])
    gains = np.array([averaging_gain(int(n)) for n in ns])
    files = [io.write_table(out / "gain_table.csv", ["n_detectors", "snr_factor", "resolution_factor"],
                            [ns, gains[:, 0], gains[:, 1]])]
    return files, {str(n): list(g) for n, g in zip(ns, gains)}


RUNNERS = {
    "walk": _run_walk, "occupation": _run_occupation, "langevin": _run_langevin, "entropy": _run_entropy,
    "psf1d": _run_psf1d, "psf2d": _run_psf2d, "phantom-pipeline": _run_phantom, "gain-table": _run_gain,
}


def run_experiment(cfg: ExperimentConfig, out, jobs: int = 1) -> dict:
    """Run a validated config into ``out`` and return the manifest (also written there)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files, summary = RUNNERS[cfg.experiment](cfg.params, cfg.seed, out, max(1, int(jobs)))
    manifest = _manifest(cfg, out, [Path(f) for f in files], summary)
    io.write_json(out / "manifest.json", manifest)
    return manifest


def load_reconstruction(run_dir, method: str | None = None) -> tuple[ReconstructionGrid, list, str]:
    """Reconstruction image, source centres and method name from a pipeline run directory."""
    run_dir = Path(run_dir)
    manifest = io.read_json(run_dir / "manifest.json")
    if manifest.get("experiment") != "phantom-pipeline":
        raise ValueError(f"{run_dir} is not a phantom-pipeline run")
    methods = manifest["inputs"]["methods"]
    if method is None:
        if len(methods) != 1:
            raise ValueError(f"{run_dir} holds {methods}; choose one")
        method = methods[0]
    if method not in methods:
        raise ValueError(f"{run_dir} has no {method!r} reconstruction")
    values, meta = io.read_array(run_dir / f"reconstruction_{method}.bin")
    n_x, n_z = values.shape
    grid = ReconstructionGrid.regular(n_x, n_z, meta["spacing"], meta["x0"], meta["z0"]).with_values(values)
    centers = [s["center"] for s in manifest["inputs"]["phantom"]["sources"]]
    return grid, centers, method


__all__ = [
    "EXPERIMENT_IDS", "ConfigError", "ExperimentConfig", "run_experiment", "run_pipeline",
    "compare_reconstructions", "ComparisonReport", "SourceComparison", "kernel_diagnostics",
    "locate_peaks", "equivalent_fwhm", "fwhm_1d", "image_contrast", "record_contrast",
    "simulate_stack", "random_profiles", "load_reconstruction",
]
