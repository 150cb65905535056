"""Thermal-to-virtual-wave conversion.

A surface temperature trace ``T(t)`` and the virtual wave ``T_virt(t')``
at the same detector are related by

    T(t) = int T_virt(t') c / sqrt(pi alpha t) exp(-c^2 t'^2 / (4 alpha t)) dt'.

The kernel is even in ``t'``, so the unknowns live on ``t' >= 0`` and the
quadrature weight is doubled. The discrete operator is severely
ill-conditioned and is inverted either by truncated SVD or by ADMM with an
L1 penalty and an optional nonnegativity constraint.

Caveat: a nonnegative initial temperature does not make the virtual wave
itself nonnegative (its Abel transform is). The constraint is nevertheless
applied to the virtual trace directly; it sharpens sparse scenes but can
bias traces whose true virtual wave has negative lobes.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import cho_factor, cho_solve

log = logging.getLogger(__name__)


def kernel_value(t, tp, c: float = 1.0, alpha: float = 0.5):
    """``c / sqrt(pi alpha t) * exp(-c^2 tp^2 / (4 alpha t))`` for ``t > 0``."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("kernel is defined for t > 0 only")
    tp = np.asarray(tp, dtype=float)
    return c / np.sqrt(np.pi * alpha * t) * np.exp(-(c**2) * tp**2 / (4 * alpha * t))


def _uniform_step(grid: np.ndarray, name: str) -> float:
    if grid.ndim != 1 or grid.size < 2:
        raise ValueError(f"{name} must be a 1D grid with at least two points")
    steps = np.diff(grid)
    if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
        raise ValueError(f"{name} must be uniform and increasing")
    return float(steps[0])


@dataclass
class KernelMatrix:
    t_grid: np.ndarray
    tp_grid: np.ndarray
    entries: np.ndarray
    c: float
    alpha: float

    @property
    def dt(self) -> float:
        return float(self.t_grid[1] - self.t_grid[0])

    @property
    def dtp(self) -> float:
        return float(self.tp_grid[1] - self.tp_grid[0])

    @cached_property
    def svd(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        u, s, vt = np.linalg.svd(self.entries, full_matrices=False)
        return u, s, vt

    @property
    def singular_values(self) -> np.ndarray:
        return self.svd[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Forward map on the last axis: virtual traces to temperature traces."""
        return np.asarray(x) @ self.entries.T


def build_kernel(t_grid, tp_grid, c: float = 1.0, alpha: float = 0.5) -> KernelMatrix:
    """Discretise the kernel on uniform grids with ``tp_grid[0] == 0``.

    ``entries[i, j] = 2 kernel(t_i, tp_j) dtp``, halved at ``tp = 0``.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    tp_grid = np.asarray(tp_grid, dtype=float)
    _uniform_step(t_grid, "t_grid")
    dtp = _uniform_step(tp_grid, "tp_grid")
    if abs(tp_grid[0]) > 1e-12:
        raise ValueError("tp_grid must start at 0")
    if t_grid[0] <= 0:
        raise ValueError("t_grid must be positive")
    weights = np.full(tp_grid.size, 2 * dtp)
    weights[0] = dtp
    entries = kernel_value(t_grid[:, None], tp_grid[None, :], c, alpha) * weights
    return KernelMatrix(t_grid, tp_grid, entries, float(c), float(alpha))


def default_tp_grid(t_max: float, n_tp: int, c: float = 1.0, alpha: float = 0.5) -> np.ndarray:
    """Virtual-time grid reaching five kernel widths at ``t_max``."""
    tp_max = 5 * np.sqrt(2 * alpha * t_max) / c
    return np.linspace(0.0, tp_max, n_tp)


@dataclass
class AdmmConfig:
    """ADMM settings.

    ``lam`` is the L1 weight. When it is None, ``lam_fraction * lam_max`` is
    used, where ``lam_max = ||K^T y||_inf``. ``rho`` defaults to
    ``rho_scale * sigma_max^2``.
    """

    lam: float | None = None
    lam_fraction: float = 0.01
    rho: float | None = None
    rho_scale: float = 1e-3
    max_iters: int = 500
    primal_tol: float = 1e-6
    dual_tol: float = 1e-6
    nonnegative: bool = True

    def __post_init__(self) -> None:
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not self.lam_fraction >= 0:
            raise ValueError("lam_fraction must be >= 0")
        if self.rho is not None and not self.rho > 0:
            raise ValueError("rho must be positive")
        if not (self.primal_tol > 0 and self.dual_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class RegularizerConfig:
    method: str = "tsvd"
    tsvd_rel_threshold: float = 1e-3
    admm: AdmmConfig = field(default_factory=AdmmConfig)

    def __post_init__(self) -> None:
        if self.method not in ("tsvd", "admm"):
            raise ValueError(f"unknown method {self.method!r}")
        if not self.tsvd_rel_threshold > 0:
            raise ValueError("tsvd_rel_threshold must be positive")
        if isinstance(self.admm, dict):
            self.admm = AdmmConfig(**self.admm)

    @classmethod
    def from_dict(cls, data: dict) -> "RegularizerConfig":
        data = dict(data)
        admm = AdmmConfig(**data.pop("admm", {}))
        return cls(admm=admm, **data)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "tsvd_rel_threshold": self.tsvd_rel_threshold,
            "admm": dict(vars(self.admm)),
        }


@dataclass
class TsvdResult:
    trace: np.ndarray
    rank: int
    all_truncated: bool = False


def invert_tsvd(K: KernelMatrix, signal: np.ndarray, rel_threshold: float) -> TsvdResult:
    """Truncated-SVD solution keeping ``sigma_i >= rel_threshold * sigma_max``.

    ``signal`` is one trace of length ``n_t`` or a stack ``(n_det, n_t)``.
    """
    y = np.asarray(signal, dtype=float)
    if y.shape[-1] != K.t_grid.size:
        raise ValueError(f"signal length {y.shape[-1]} != {K.t_grid.size} kernel rows")
    if rel_threshold < 0:
        raise ValueError("rel_threshold must be >= 0")
    u, s, vt = K.svd
    keep = s >= rel_threshold * s[0]
    rank = int(keep.sum())
    if rank == 0:
        warnings.warn("all singular values below threshold; returning zero solution", RuntimeWarning)
        return TsvdResult(np.zeros(y.shape[:-1] + (K.tp_grid.size,)), 0, True)
    coeffs = (y @ u[:, keep]) / s[keep]
    return TsvdResult(coeffs @ vt[keep], rank)


@dataclass
class AdmmResult:
    trace: np.ndarray
    x: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    diverged: np.ndarray
    primal_residual: np.ndarray
    dual_residual: np.ndarray
    lam: np.ndarray
    history: list[tuple[float, float]] = field(default_factory=list)


def lambda_max(K: KernelMatrix, signal: np.ndarray) -> np.ndarray:
    """Smallest L1 weight for which ``x = 0`` is optimal (per trace)."""
    return np.max(np.abs(np.asarray(signal, dtype=float) @ K.entries), axis=-1)


def objective(K: KernelMatrix, signal, x, lam: float) -> float:
    r = K.entries @ x - signal
    return 0.5 * float(r @ r) + lam * float(np.abs(x).sum())


def invert_admm(K: KernelMatrix, signal: np.ndarray, config: RegularizerConfig | AdmmConfig) -> AdmmResult:
    """Scaled-form ADMM for ``min 1/2||Kx - y||^2 + lam ||x||_1 (+ x >= 0)``.

    Traces in a stack are solved independently: each column stops at its own
    convergence iteration, so batching does not change any result.
    """
    cfg = config.admm if isinstance(config, RegularizerConfig) else config
    if isinstance(config, RegularizerConfig) and config.method != "admm":
        raise ValueError("config.method must be 'admm'")
    y = np.asarray(signal, dtype=float)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    if Y.shape[-1] != K.t_grid.size:
        raise ValueError(f"signal length {Y.shape[-1]} != {K.t_grid.size} kernel rows")
    A = K.entries
    n = A.shape[1]
    n_tr = Y.shape[0]

    lam = np.full(n_tr, cfg.lam) if cfg.lam is not None else cfg.lam_fraction * lambda_max(K, Y)
    rho = cfg.rho if cfg.rho is not None else cfg.rho_scale * K.singular_values[0] ** 2
    factor = cho_factor(A.T @ A + rho * np.eye(n))
    Aty = Y @ A  # (n_tr, n)

    x = np.zeros((n_tr, n))
    z = np.zeros((n_tr, n))
    u = np.zeros((n_tr, n))
    active = np.ones(n_tr, dtype=bool)
    converged = np.zeros(n_tr, dtype=bool)
    diverged = np.zeros(n_tr, dtype=bool)
    iters = np.zeros(n_tr, dtype=int)
    r_norm = np.zeros(n_tr)
    s_norm = np.zeros(n_tr)
    res_log: list[np.ndarray] = []
    history = []

    for it in range(1, cfg.max_iters + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa = cho_solve(factor, (Aty[idx] + rho * (z[idx] - u[idx])).T).T
        v = xa + u[idx]
        thr = (lam[idx] / rho)[:, None]
        if cfg.nonnegative:
            za = np.maximum(v - thr, 0.0)
        else:
            za = np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)
        dz = za - z[idx]
        u[idx] = v - za
        x[idx] = xa
        z[idx] = za
        iters[idx] = it

        r = np.linalg.norm(xa - za, axis=1)
        s = rho * np.linalg.norm(dz, axis=1)
        r_norm[idx] = r
        s_norm[idx] = s
        scale_p = np.maximum(np.linalg.norm(xa, axis=1), np.linalg.norm(za, axis=1))
        scale_d = rho * np.linalg.norm(u[idx], axis=1)
        done = (r <= cfg.primal_tol * np.maximum(scale_p, 1e-300)) & (s <= cfg.dual_tol * np.maximum(scale_d, 1e-300))
        # an all-zero iterate with zero residuals is converged
        done |= (r == 0) & (s == 0)
        if single:
            history.append((float(r[0]), float(s[0])))

        total = np.zeros(n_tr)
        total[idx] = r + s
        res_log.append(total)
        if it > 50:
            # 10x growth that also climbs above the starting residual; transient
            # spikes on active-set changes stay far below it
            old = res_log[-51]
            grow = active & (old > 0) & (total > 10 * old) & (total > res_log[0])
            if np.any(grow):
                diverged |= grow
                log.warning("ADMM residuals grew 10x over 50 iterations for %d trace(s)", int(grow.sum()))
                active &= ~grow
        converged[idx[done]] = True
        active[idx[done]] = False

    if np.any(~converged & ~diverged):
        log.info("ADMM hit max_iters=%d for %d trace(s)", cfg.max_iters, int((~converged & ~diverged).sum()))
    out = AdmmResult(
        trace=z, x=x, iterations=iters, converged=converged, diverged=diverged,
        primal_residual=r_norm, dual_residual=s_norm, lam=lam, history=history,
    )
    if single:
        out.trace, out.x = z[0], x[0]
    return out


def discrepancy_lambda(
    K: KernelMatrix,
    signal: np.ndarray,
    noise_norm: float,
    config: AdmmConfig,
    lo_fraction: float = 1e-6,
    n_bisect: int = 30,
) -> float:
    """L1 weight whose ADMM residual ``||Kx - y||`` matches ``noise_norm`` (log-bisection)."""
    y = np.asarray(signal, dtype=float)
    lmax = float(lambda_max(K, y))
    if lmax == 0:
        return 0.0
    lo, hi = np.log(lo_fraction * lmax), np.log(lmax)

    def residual(log_lam):
        cfg = AdmmConfig(**{**vars(config), "lam": float(np.exp(log_lam))})
        res = invert_admm(K, y, cfg)
        return np.linalg.norm(K.entries @ res.trace - y)

    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        if residual(mid) > noise_norm:
            hi = mid
        else:
            lo = mid
    return float(np.exp(lo))


@dataclass
class VirtualField:
    """Virtual-wave traces ``values[detector, tp]``."""

    values: np.ndarray
    tp: np.ndarray
    c: float
    detectors: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.tp = np.asarray(self.tp, dtype=float)
        if self.values.shape[-1] != self.tp.size:
            raise ValueError("values do not match tp grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("virtual field must be finite")

    @property
    def dtp(self) -> float:
        return float(self.tp[1] - self.tp[0])


def virtual_field(K: KernelMatrix, record, config: RegularizerConfig, snr: float | None = None) -> tuple[VirtualField, dict]:
    """Invert every detector trace of a surface record.

    For T-SVD the relative threshold is ``1/snr`` when ``snr`` is given,
    otherwise ``config.tsvd_rel_threshold``.
    """
    if not np.allclose(record.times, K.t_grid):
        raise ValueError("record times do not match the kernel time grid")
    if config.method == "tsvd":
        thr = 1.0 / snr if snr is not None else config.tsvd_rel_threshold
        res = invert_tsvd(K, record.values, thr)
        info = {"method": "tsvd", "rel_threshold": thr, "rank": res.rank}
        values = res.trace
    else:
        res = invert_admm(K, record.values, config)
        info = {
            "method": "admm",
            "converged": int(res.converged.sum()),
            "diverged": int(res.diverged.sum()),
            "max_iterations": int(res.iterations.max()),
        }
        values = res.trace
    return VirtualField(values, K.tp_grid, K.c, record.detectors), info
