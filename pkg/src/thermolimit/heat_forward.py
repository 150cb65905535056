"""Deterministic heat diffusion on 1D/2D grids with adiabatic boundaries.

Fields are propagated exactly in time in the cosine basis of each axis. The
modal rates are those of the cell-centred finite-difference Laplacian,
``alpha * 4 sin^2(k h / 2) / h^2``. That keeps the solution positive, exactly
conservative and a semigroup, and coincides with the drift matrix of the
Langevin model for ``alpha = 1/2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.fft import dctn, idct, idctn
from scipy.special import erfcinv


@dataclass
class Field:
    values: np.ndarray
    spacing: float = 1.0
    alpha: float = 0.5

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class SurfaceRecord:
    """Temperature traces ``values[detector, time]`` at surface detectors."""

    detectors: np.ndarray
    times: np.ndarray
    values: np.ndarray
    snr: float | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        self.detectors = np.asarray(self.detectors, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.detectors.size, self.times.size):
            raise ValueError(f"values shape {self.values.shape} != ({self.detectors.size}, {self.times.size})")
        if self.times.size > 1:
            steps = np.diff(self.times)
            if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-9, atol=0):
                raise ValueError("times must be strictly increasing and uniform")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("record values must be finite")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0


@dataclass(frozen=True)
class GaussianSource:
    center: tuple[float, ...]
    amplitude: float
    width: float


@dataclass
class PhantomSpec:
    """Sum of isotropic Gaussian sources on a grid of ``shape`` cells.

    Source centres are in cell units; for 2D grids the axes are ``(x, z)``
    with ``z = 0`` the surface row.
    """

    shape: tuple[int, ...]
    sources: list[GaussianSource] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.shape = tuple(int(n) for n in self.shape)
        if any(n < 1 for n in self.shape):
            raise ValueError(f"invalid grid shape {self.shape}")
        self.sources = [s if isinstance(s, GaussianSource) else GaussianSource(**s) for s in self.sources]
        for s in self.sources:
            if len(s.center) != len(self.shape):
                raise ValueError(f"source centre {s.center} does not match {len(self.shape)}D grid")
            if not all(0 <= c <= n - 1 for c, n in zip(s.center, self.shape)):
                raise ValueError(f"source centre {s.center} outside grid {self.shape}")
            if not s.width > 0:
                raise ValueError(f"source width must be positive, got {s.width}")
            if not s.amplitude > 0:
                raise ValueError(f"source amplitude must be positive, got {s.amplitude}")

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        return cls(
            shape=tuple(data["shape"]),
            sources=[
                GaussianSource(tuple(s["center"]), float(s["amplitude"]), float(s["width"]))
                for s in data.get("sources", [])
            ],
        )

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "sources": [
                {"center": list(s.center), "amplitude": s.amplitude, "width": s.width} for s in self.sources
            ],
        }


@dataclass(frozen=True)
class ThermalWaveParams:
    omega: float
    alpha: float

    def __post_init__(self) -> None:
        if not (self.omega > 0 and self.alpha > 0):
            raise ValueError("omega and alpha must be positive")

    @property
    def mu(self) -> float:
        """Thermal diffusion length ``sqrt(2 alpha / omega)``."""
        return float(np.sqrt(2 * self.alpha / self.omega))

    @property
    def sigma(self) -> complex:
        return (1 + 1j) / self.mu


def modal_rates(shape: Sequence[int], alpha: float, spacing: float = 1.0) -> np.ndarray:
    """Decay rate of every cosine mode of a grid, broadcast to ``shape``."""
    rates = np.zeros(tuple(shape))
    for axis, n in enumerate(shape):
        k = np.pi * np.arange(n) / n
        r = alpha * 4 * np.sin(k / 2) ** 2 / spacing**2
        rates = rates + r.reshape([-1 if a == axis else 1 for a in range(len(shape))])
    return rates


def solve_heat(initial: Field, t_samples: Sequence[float]) -> list[Field]:
    """Diffuse ``initial`` to each time in ``t_samples`` (adiabatic box)."""
    times = np.asarray(t_samples, dtype=float)
    if np.any(times < 0):
        raise ValueError("times must be nonnegative")
    if times.size > 1 and np.any(np.diff(times) < 0):
        raise ValueError("times must be sorted")
    modes = dctn(initial.values, type=2, norm="ortho")
    rates = modal_rates(initial.shape, initial.alpha, initial.spacing)
    out = []
    for t in times:
        if t == 0:
            values = initial.values.copy()
        else:
            values = idctn(modes * np.exp(-rates * t), type=2, norm="ortho")
        out.append(Field(values, initial.spacing, initial.alpha))
    return out


def thermal_wave(x, t, params: ThermalWaveParams, T0: float = 1.0):
    """``T0 exp(-x/mu) cos(x/mu - omega t)`` for depths ``x >= 0``."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("depth must be nonnegative")
    u = x / params.mu
    return T0 * np.exp(-u) * np.cos(u - params.omega * np.asarray(t, dtype=float))


def make_phantom(spec: PhantomSpec, spacing: float = 1.0, alpha: float = 0.5) -> Field:
    axes = np.meshgrid(*[np.arange(n, dtype=float) for n in spec.shape], indexing="ij")
    values = np.zeros(spec.shape)
    for src in spec.sources:
        r2 = sum((ax - c) ** 2 for ax, c in zip(axes, src.center))
        values += src.amplitude * np.exp(-r2 / (2 * src.width**2))
    return Field(values, spacing, alpha)


def _detector_columns(detector_xs, n_x: int, spacing: float) -> np.ndarray:
    xs = np.asarray(detector_xs, dtype=float)
    cols = np.rint(xs / spacing).astype(int)
    if np.any(np.abs(cols * spacing - xs) > 1e-9 * max(1.0, spacing)) or np.any((cols < 0) | (cols >= n_x)):
        raise ValueError("detector positions must lie on grid points of the surface row")
    return cols


def sample_surface(fields: Sequence[Field], detector_xs, times: Sequence[float]) -> SurfaceRecord:
    """Read the ``z = 0`` row of 2D fields at detector positions."""
    if len(fields) != len(times):
        raise ValueError("one field per time sample required")
    if not fields:
        raise ValueError("no fields given")
    first = fields[0]
    if first.values.ndim != 2:
        raise ValueError("surface sampling needs 2D fields")
    cols = _detector_columns(detector_xs, first.shape[0], first.spacing)
    values = np.stack([f.values[cols, 0] for f in fields], axis=1)
    return SurfaceRecord(detectors=np.asarray(detector_xs, dtype=float), times=np.asarray(times), values=values)


def simulate_surface(initial: Field, detector_xs, times: Sequence[float]) -> SurfaceRecord:
    """Surface record of a 2D field without materialising full fields.

    Equivalent to :func:`solve_heat` followed by :func:`sample_surface`.
    """
    if initial.values.ndim != 2:
        raise ValueError("surface simulation needs a 2D field")
    times = np.asarray(times, dtype=float)
    if np.any(times < 0) or np.any(np.diff(times) <= 0):
        raise ValueError("times must be nonnegative and increasing")
    n_x, n_z = initial.shape
    cols = _detector_columns(detector_xs, n_x, initial.spacing)
    modes = dctn(initial.values, type=2, norm="ortho")
    rx = modal_rates((n_x,), initial.alpha, initial.spacing)
    rz = modal_rates((n_z,), initial.alpha, initial.spacing)
    # value of each z-mode at the surface cell
    kz = np.pi * np.arange(n_z) / n_z
    surf_z = np.cos(kz * 0.5) * np.where(np.arange(n_z) == 0, np.sqrt(1 / n_z), np.sqrt(2 / n_z))
    out = np.empty((cols.size, times.size))
    for i, t in enumerate(times):
        row_modes = (modes * np.exp(-rz * t)[None, :]) @ surf_z
        row = idct(row_modes * np.exp(-rx * t), type=2, norm="ortho")
        out[:, i] = row[cols]
    return SurfaceRecord(detectors=np.asarray(detector_xs, dtype=float), times=times, values=out)


def add_noise(record: SurfaceRecord, snr: float, seed: int) -> SurfaceRecord:
    """Add white Gaussian noise with std ``max|values| / snr``."""
    if not snr > 0:
        raise ValueError(f"snr must be positive, got {snr}")
    if record.snr is not None:
        raise ValueError("record already carries noise")
    peak = float(np.max(np.abs(record.values)))
    rng = np.random.default_rng(seed)
    noisy = record.values + (peak / snr) * rng.standard_normal(record.values.shape)
    return SurfaceRecord(record.detectors, record.times, noisy, snr=float(snr), seed=int(seed))


def required_padding(spec: PhantomSpec, t_max: float, alpha: float = 0.5, leak: float = 1e-3) -> int:
    """Cells to add beyond the phantom so at most ``leak`` of each source's heat
    crosses the lateral/bottom box walls by ``t_max``."""
    if not spec.sources:
        return 0
    width = max(s.width for s in spec.sources)
    sigma = np.sqrt(width**2 + 2 * alpha * t_max)
    # one-sided Gaussian tail mass beyond distance D is erfc(D / (sqrt(2) sigma)) / 2
    return int(np.ceil(np.sqrt(2) * sigma * erfcinv(2 * leak)))


def pad_scene(field_2d: Field, pad_x: int, pad_z: int) -> Field:
    """Embed a 2D ``(x, z)`` field in a larger box, keeping ``z = 0`` as the surface."""
    values = np.pad(field_2d.values, ((pad_x, pad_x), (0, pad_z)))
    return Field(values, field_2d.spacing, field_2d.alpha)
