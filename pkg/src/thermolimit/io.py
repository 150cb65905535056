"""File formats: CSV tables, little-endian float64 binaries with JSON sidecars, JSON blocks.

All writers are deterministic: floats are printed with 17 significant
digits and JSON keys are sorted, so identical data give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .heat_forward import Field, SurfaceRecord
from .lattice_walk import LatticeSpec, OccupationSeries
from .resolution import PsfImage
from .spectral import SpectralSystem
from .virtual_wave import VirtualField

FLOAT_FMT = "%.17g"


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dumps_json(data) -> str:
    return json.dumps(_to_jsonable(data), indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_json(path, data) -> Path:
    path = Path(path)
    path.write_text(dumps_json(data))
    return path


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_table(path, header: list[str], columns: list[np.ndarray], fmt: str = FLOAT_FMT) -> Path:
    path = Path(path)
    data = np.column_stack([np.asarray(c) for c in columns])
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, data, fmt=fmt, delimiter=",")
    return path


def read_table(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


# ---------------------------------------------------------------- binaries


def write_array(path, values: np.ndarray, meta: dict | None = None) -> tuple[Path, Path]:
    """Raw little-endian float64, row-major, plus ``<path>.json`` sidecar with ``dims``."""
    path = Path(path)
    arr = np.ascontiguousarray(values, dtype="<f8")
    path.write_bytes(arr.tobytes(order="C"))
    side = path.with_suffix(path.suffix + ".json")
    write_json(side, {"dims": list(arr.shape), "dtype": "float64", "byteorder": "little", **(meta or {})})
    return path, side


def read_array(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = read_json(path.with_suffix(path.suffix + ".json"))
    dims = tuple(meta["dims"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    if raw.size != int(np.prod(dims)):
        raise ValueError(f"{path}: {raw.size} values, sidecar dims {dims}")
    return raw.reshape(dims).astype(float), meta


def write_field(path, field: Field, extra: dict | None = None) -> tuple[Path, Path]:
    return write_array(path, field.values, {"spacing": field.spacing, "alpha": field.alpha, **(extra or {})})


def read_field(path) -> Field:
    values, meta = read_array(path)
    return Field(values, spacing=meta["spacing"], alpha=meta["alpha"])


# ---------------------------------------------------------------- tables


def write_occupation_csv(path, series: OccupationSeries) -> Path:
    """Rows ``time,cell_0,...``; stacked realizations add a ``realization`` column."""
    n = series.lattice.n_cells
    cells = [f"cell_{i}" for i in range(n)]
    counts = np.asarray(series.counts)
    fmt = "%d" if np.issubdtype(counts.dtype, np.integer) else FLOAT_FMT
    if counts.ndim == 2:
        return write_table(path, ["time"] + cells, [series.times] + list(counts.T), fmt=fmt)
    n_t, n_r, _ = counts.shape
    flat = counts.reshape(n_t * n_r, n)
    return write_table(
        path,
        ["time", "realization"] + cells,
        [np.repeat(series.times, n_r), np.tile(np.arange(n_r), n_t)] + list(flat.T),
        fmt=fmt,
    )


def read_occupation_csv(path, lattice: LatticeSpec | None = None) -> OccupationSeries:
    header, data = read_table(path)
    cells = [h for h in header if h.startswith("cell_")]
    lattice = lattice or LatticeSpec(len(cells))
    counts = data[:, -len(cells):]
    if np.all(counts == np.round(counts)):
        counts = counts.astype(np.int64)
    if header[1] == "realization":
        times = np.unique(data[:, 0])
        n_r = int(data[:, 1].max()) + 1
        return OccupationSeries(counts.reshape(times.size, n_r, len(cells)), lattice, times)
    return OccupationSeries(counts, lattice, data[:, 0])


def write_occupation_bin(path, series: OccupationSeries) -> tuple[Path, Path]:
    path = Path(path)
    arr = np.ascontiguousarray(series.counts, dtype="<i8")
    path.write_bytes(arr.tobytes(order="C"))
    side = path.with_suffix(path.suffix + ".json")
    write_json(side, {
        "dims": list(arr.shape), "dtype": "int64", "byteorder": "little",
        "times": series.times, "n_cells": series.lattice.n_cells,
        "boundary": series.lattice.boundary, "seed": series.seed,
    })
    return path, side


def read_occupation_bin(path) -> OccupationSeries:
    path = Path(path)
    meta = read_json(path.with_suffix(path.suffix + ".json"))
    counts = np.frombuffer(path.read_bytes(), dtype="<i8").reshape(meta["dims"]).astype(np.int64)
    lattice = LatticeSpec(meta["n_cells"], boundary=meta["boundary"])
    return OccupationSeries(counts, lattice, np.asarray(meta["times"]), seed=meta["seed"])


def write_spectrum_csv(path, system: SpectralSystem) -> Path:
    return write_table(path, ["k", "gamma"], [system.k, system.gamma])


def write_record_csv(path, record: SurfaceRecord) -> Path:
    header = ["t"] + [f"det_{i}" for i in range(record.detectors.size)]
    return write_table(path, header, [record.times] + list(record.values))


def read_record_csv(path, detectors=None) -> SurfaceRecord:
    header, data = read_table(path)
    n_det = len(header) - 1
    det = np.arange(n_det, dtype=float) if detectors is None else np.asarray(detectors, dtype=float)
    return SurfaceRecord(det, data[:, 0], data[:, 1:].T)


def write_virtual_csv(path, virtual: VirtualField) -> Path:
    header = ["tp"] + [f"det_{i}" for i in range(virtual.values.shape[0])]
    return write_table(path, header, [virtual.tp] + list(virtual.values))


def read_virtual_csv(path, c: float = 1.0, detectors=None) -> VirtualField:
    _, data = read_table(path)
    return VirtualField(data[:, 1:].T, data[:, 0], c, detectors)


def write_psf(stem, image: PsfImage) -> list[Path]:
    """``<stem>.bin`` (+ sidecar) and ``<stem>_profiles.csv`` through the peak."""
    stem = Path(stem)
    b, side = write_array(stem.with_suffix(".bin"), image.values, {
        "snr": image.snr, "peak": list(image.peak),
        "x_axis": [float(image.xs[0]), float(image.xs[1] - image.xs[0])],
        "z_axis": [float(image.zs[0]), float(image.zs[1] - image.zs[0])],
    })
    n = max(image.xs.size, image.zs.size)
    pad = lambda a: np.pad(np.asarray(a, float), (0, n - len(a)), constant_values=np.nan)  # noqa: E731
    prof = write_table(
        stem.parent / (stem.name + "_profiles.csv"),
        ["z", "axial", "x", "lateral"],
        [pad(image.zs), pad(image.axial_profile()), pad(image.xs), pad(image.lateral_profile())],
    )
    return [b, side, prof]
