"""Delay-and-sum back-projection of virtual waves onto an image grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .virtual_wave import VirtualField


@dataclass
class ReconstructionGrid:
    """Image samples ``values[ix, iz]`` at coordinates ``xs`` (lateral) and ``zs`` (depth)."""

    xs: np.ndarray
    zs: np.ndarray
    values: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.xs = np.asarray(self.xs, dtype=float)
        self.zs = np.asarray(self.zs, dtype=float)
        for name, ax in (("xs", self.xs), ("zs", self.zs)):
            if ax.size > 1 and np.any(np.diff(ax) <= 0):
                raise ValueError(f"{name} must be increasing (spacing > 0)")
        if self.values is None:
            self.values = np.zeros((self.xs.size, self.zs.size))
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.xs.size, self.zs.size):
            raise ValueError("values do not match grid axes")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @classmethod
    def regular(cls, n_x: int, n_z: int, spacing: float = 1.0, x0: float = 0.0, z0: float = 0.0):
        if not spacing > 0:
            raise ValueError("spacing must be positive")
        return cls(x0 + spacing * np.arange(n_x), z0 + spacing * np.arange(n_z))

    def with_values(self, values: np.ndarray) -> "ReconstructionGrid":
        return ReconstructionGrid(self.xs, self.zs, values)


def saft_backproject(
    virtual: VirtualField, detector_xs, grid: ReconstructionGrid, c: float | None = None
) -> ReconstructionGrid:
    """Average each detector's virtual trace at delay ``|r - r_d| / c``.

    Detectors sit on ``z = 0``. Delays outside the virtual-time grid
    contribute zero.
    """
    det = np.asarray(detector_xs, dtype=float)
    if det.size == 0:
        raise ValueError("need at least one detector")
    if virtual.values.shape[0] != det.size:
        raise ValueError(f"{virtual.values.shape[0]} virtual traces for {det.size} detectors")
    c = virtual.c if c is None else c
    if not np.isclose(c, virtual.c):
        raise ValueError(f"speed c={c} inconsistent with virtual field c={virtual.c}")

    tp = virtual.tp
    z2 = grid.zs[None, :] ** 2
    out = np.zeros((grid.xs.size, grid.zs.size))
    for trace, xd in zip(virtual.values, det):
        delay = np.sqrt((grid.xs[:, None] - xd) ** 2 + z2) / c
        out += np.interp(delay, tp, trace, left=0.0, right=0.0)
    return grid.with_values(out / det.size)


def averaging_gain(n_detectors: int) -> tuple[float, float]:
    """SNR gain ``sqrt(n)`` and resolution gain ``ln sqrt(n)`` from averaging ``n`` signals."""
    if n_detectors < 1:
        raise ValueError("n_detectors must be >= 1")
    snr = float(np.sqrt(n_detectors))
    return snr, float(np.log(snr))
