"""Monte Carlo random walk on a 1D lattice with reflecting ends.

Every walker takes a +/-1 step per time step with equal probability. A step
that would leave the lattice is rejected and the walker stays put, so the
uniform distribution is stationary and particle number is conserved exactly.

Step directions come from a counter-based generator: the bit for walker ``w``
at step ``s`` is a pure function of ``(seed, w, s)``. Results therefore do not
depend on how walkers or realizations are chunked or distributed over
workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_INIT_SALT = np.uint64(0xD1B54A32D192ED03)
_MASK64 = (1 << 64) - 1


def _splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def walker_keys(seed: int, walker_ids: np.ndarray) -> np.ndarray:
    """Per-walker stream keys derived from the master seed."""
    ids = np.asarray(walker_ids, dtype=np.uint64)
    base = _splitmix64(np.array([seed & _MASK64], dtype=np.uint64))
    return _splitmix64(_splitmix64(ids) ^ base)


def _step_words(keys: np.ndarray, block: int) -> np.ndarray:
    # 64 step bits per walker and block
    return _splitmix64(keys + np.uint64((block * int(_GOLDEN)) & _MASK64))


@dataclass(frozen=True)
class LatticeSpec:
    """Bounded lattice of ``n_cells`` bins indexed ``0..n_cells-1``.

    ``source`` is the injection cell, ``n_cells // 2`` unless given (cell 20
    for the 40-cell lattice).
    """

    n_cells: int
    boundary: str = "reflecting"
    source: int | None = None

    def __post_init__(self) -> None:
        if int(self.n_cells) != self.n_cells or self.n_cells < 2:
            raise ValueError(f"n_cells must be an integer >= 2, got {self.n_cells}")
        if self.boundary != "reflecting":
            raise ValueError(f"unsupported boundary {self.boundary!r}")
        if self.source is not None and not 0 <= self.source < self.n_cells:
            raise ValueError(f"source cell {self.source} outside lattice")

    @property
    def center(self) -> int:
        return self.n_cells // 2 if self.source is None else self.source

    def offsets(self) -> np.ndarray:
        """Cell indices relative to the source cell."""
        return np.arange(self.n_cells) - self.center


@dataclass
class WalkerEnsemble:
    positions: np.ndarray
    seed: int
    time: int = 0
    first_id: int = 0  # global index of walker 0, selects its RNG stream

    @property
    def n_walkers(self) -> int:
        return self.positions.size

    def walker_ids(self) -> np.ndarray:
        return np.arange(self.first_id, self.first_id + self.n_walkers, dtype=np.uint64)


@dataclass
class OccupationSeries:
    """Counts per cell over time.

    ``counts`` has shape ``(n_times, n_cells)``. Batched simulations may add a
    realization axis in the middle, ``(n_times, n_real, n_cells)``.
    """

    counts: np.ndarray
    lattice: LatticeSpec
    times: np.ndarray = field(default=None)
    seed: int | None = None

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts)
        if self.times is None:
            self.times = np.arange(self.counts.shape[0])
        self.times = np.asarray(self.times)
        if self.counts.shape[-1] != self.lattice.n_cells:
            raise ValueError("counts do not match lattice size")
        if self.times.shape[0] != self.counts.shape[0]:
            raise ValueError("times do not match counts")

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=-1)

    def realization(self, r: int) -> "OccupationSeries":
        if self.counts.ndim != 3:
            raise ValueError("series has no realization axis")
        return OccupationSeries(self.counts[:, r, :], self.lattice, self.times, self.seed)


@dataclass(frozen=True)
class ProbabilityProfile:
    """Occupation probability per cell; ``cells`` are offsets from the source."""

    p: np.ndarray
    time: float
    cells: np.ndarray

    def __post_init__(self) -> None:
        if np.any(self.p < 0):
            raise ValueError("probabilities must be nonnegative")
        if self.p.sum() > 1 + 1e-12:
            raise ValueError(f"probabilities sum to {self.p.sum()} > 1")


def make_ensemble(
    lattice: LatticeSpec,
    n_source: int = 0,
    n_uniform: int = 0,
    seed: int = 0,
    first_id: int = 0,
) -> WalkerEnsemble:
    """Ensemble with ``n_source`` walkers at the source and ``n_uniform`` spread uniformly.

    Uniform walkers get independent uniform cells from their own streams,
    i.e. a draw from the stationary distribution.
    """
    if n_source < 0 or n_uniform < 0 or n_source + n_uniform == 0:
        raise ValueError("need a positive number of walkers")
    ids = np.arange(first_id, first_id + n_source + n_uniform, dtype=np.uint64)
    positions = np.full(ids.size, lattice.center, dtype=np.int64)
    if n_uniform:
        draws = _splitmix64(walker_keys(seed, ids[n_source:]) ^ _INIT_SALT)
        positions[n_source:] = (draws % np.uint64(lattice.n_cells)).astype(np.int64)
    return WalkerEnsemble(positions=positions, seed=seed, time=0, first_id=first_id)


def _advance(positions, keys, start, n_steps, n_cells, on_step=None):
    """Advance ``positions`` in place by ``n_steps`` starting at absolute step ``start``."""
    words = None
    for s in range(start, start + n_steps):
        block, bit = divmod(s, 64)
        if words is None or bit == 0:
            words = _step_words(keys, block)
        up = ((words >> np.uint64(bit)) & np.uint64(1)).astype(np.int64)
        moved = positions + 2 * up - 1
        stay = (moved < 0) | (moved >= n_cells)
        np.copyto(moved, positions, where=stay)
        positions[:] = moved
        if on_step is not None:
            on_step(s + 1, positions)


@njit(cache=True)
def _mix(x):
    z = x + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _walk_kernel(keys, positions, real_index, n_cells, record_times, counts):
    # walker-major loop; same bit stream as _advance
    golden = np.uint64(0x9E3779B97F4A7C15)
    n_rec = record_times.size
    for w in range(keys.size):
        pos = positions[w]
        r = real_index[w]
        key = keys[w]
        word = np.uint64(0)
        rec = 0
        if record_times[0] == 0:
            counts[0, r, pos] += 1
            rec = 1
        t_end = record_times[n_rec - 1]
        for s in range(t_end):
            bit = s % 64
            if bit == 0:
                word = _mix(key + np.uint64(s // 64) * golden)
            d = 2 * np.int64((word >> np.uint64(bit)) & np.uint64(1)) - 1
            moved = pos + d
            pos = moved - d * ((moved < 0) | (moved >= n_cells))
            if rec < n_rec and record_times[rec] == s + 1:
                counts[rec, r, pos] += 1
                rec += 1


def step_ensemble(ensemble: WalkerEnsemble, lattice: LatticeSpec) -> WalkerEnsemble:
    """Return a new ensemble advanced by one step."""
    pos = np.array(ensemble.positions, dtype=np.int64)
    if pos.size and (pos.min() < 0 or pos.max() >= lattice.n_cells):
        raise ValueError("walker positions outside lattice")
    keys = walker_keys(ensemble.seed, ensemble.walker_ids())
    _advance(pos, keys, ensemble.time, 1, lattice.n_cells)
    return WalkerEnsemble(pos, ensemble.seed, ensemble.time + 1, ensemble.first_id)


def simulate_occupation(
    lattice: LatticeSpec,
    n_steps: int,
    n_source: int = 0,
    n_uniform: int = 0,
    seed: int = 0,
    record_times: Iterable[int] | None = None,
    n_realizations: int | None = None,
    chunk_walkers: int = 1_000_000,
    first_realization: int = 0,
) -> OccupationSeries:
    """Simulate walkers and histogram them at ``record_times`` (default every step).

    Realization ``r`` uses global walker ids ``r*n + 0 .. r*n + n-1`` under
    the same master seed, so any chunking yields identical counts. With
    ``n_realizations`` set, counts have shape ``(n_times, n_real, n_cells)``.
    ``first_realization`` offsets the realization index, so a run can be
    split into consecutive pieces that concatenate to the full result.
    """
    n_walk = n_source + n_uniform
    if n_walk <= 0:
        raise ValueError("need a positive number of walkers")
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    times = np.arange(n_steps + 1) if record_times is None else np.unique(np.asarray(list(record_times), dtype=int))
    if times.size == 0 or times[0] < 0 or times[-1] > n_steps:
        raise ValueError(f"record_times must lie in [0, {n_steps}]")
    n_real = 1 if n_realizations is None else int(n_realizations)
    if n_real < 1:
        raise ValueError("n_realizations must be >= 1")
    if first_realization < 0:
        raise ValueError("first_realization must be >= 0")
    off = int(first_realization)

    n_cells = lattice.n_cells
    counts = np.zeros((times.size, n_real, n_cells), dtype=np.int64)
    real_per_chunk = max(1, chunk_walkers // n_walk)
    for r0 in range(0, n_real, real_per_chunk):
        r1 = min(n_real, r0 + real_per_chunk)
        positions = np.concatenate(
            [make_ensemble(lattice, n_source, n_uniform, seed, first_id=(off + r) * n_walk).positions for r in range(r0, r1)]
        )
        keys = walker_keys(seed, np.arange((off + r0) * n_walk, (off + r1) * n_walk, dtype=np.uint64))
        real_index = np.arange(r0, r1, dtype=np.int64).repeat(n_walk)
        _walk_kernel(keys, positions, real_index, n_cells, times.astype(np.int64), counts)

    if n_realizations is None:
        counts = counts[:, 0, :]
    return OccupationSeries(counts=counts, lattice=lattice, times=times, seed=seed)


def simulate_trajectories(lattice: LatticeSpec, n_walkers: int, n_steps: int, seed: int = 0) -> np.ndarray:
    """Positions of independent walkers started at the source, shape ``(n_steps+1, n_walkers)``."""
    ens = make_ensemble(lattice, n_source=n_walkers, seed=seed)
    keys = walker_keys(seed, ens.walker_ids())
    out = np.empty((n_steps + 1, n_walkers), dtype=np.int64)
    out[0] = ens.positions

    def record(t, pos):
        out[t] = pos

    _advance(ens.positions, keys, 0, n_steps, lattice.n_cells, on_step=record)
    return out


def gaussian_profile(t: float, alpha: float = 0.5, cells: Sequence[int] | np.ndarray | None = None) -> ProbabilityProfile:
    """Continuum Gaussian ``exp(-i^2/(4 alpha t)) / sqrt(4 pi alpha t)`` at integer offsets.

    Default ``cells`` covers +/- 12 standard deviations. When ``alpha t`` is
    so small that the sampled Gaussian sums above one (undersampled, roughly
    ``alpha t < 0.7``) it is renormalized to unit sum.
    """
    if not t > 0:
        raise ValueError(f"t must be positive, got {t}")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if cells is None:
        half = int(np.ceil(12 * np.sqrt(2 * alpha * t))) + 1
        cells = np.arange(-half, half + 1)
    cells = np.asarray(cells)
    p = np.exp(-(cells.astype(float) ** 2) / (4 * alpha * t)) / np.sqrt(4 * np.pi * alpha * t)
    if p.sum() > 1:
        p = p / p.sum()
    return ProbabilityProfile(p=p, time=float(t), cells=cells)


@dataclass(frozen=True)
class OccupationMoments:
    mean: np.ndarray
    variance: np.ndarray
    approx_variance: np.ndarray
    approx_valid: np.ndarray


def occupation_stats(n: int, p: ProbabilityProfile | np.ndarray, small: float = 0.05) -> OccupationMoments:
    """Binomial occupation moments ``n p`` and ``n p (1-p)``.

    ``approx_variance`` is the Poisson approximation ``var ~ mean``, flagged
    valid where ``p <= small``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    p = np.asarray(p.p if isinstance(p, ProbabilityProfile) else p, dtype=float)
    mean = n * p
    return OccupationMoments(mean, mean * (1 - p), mean.copy(), p <= small)


def equilibrium_stats(
    n_equi: int, n_cells: int, n_0: int, p_gauss: ProbabilityProfile | np.ndarray, small: float = 0.05
) -> OccupationMoments:
    """Moments for a uniform background of ``n_equi`` walkers plus ``n_0`` injected ones.

    The approximation ``var ~ n_equi / n_cells`` is flagged valid where the
    diffusing term ``n_0 p`` is at most ``small`` times the background level.
    """
    if n_equi <= 0 or n_cells <= 0 or n_0 < 0:
        raise ValueError("n_equi and n_cells must be positive, n_0 nonnegative")
    p = np.asarray(p_gauss.p if isinstance(p_gauss, ProbabilityProfile) else p_gauss, dtype=float)
    level = n_equi / n_cells
    diffusing = n_0 * p
    mean = level + diffusing
    var = mean * (1 - mean / (n_equi + n_0))
    return OccupationMoments(mean, var, np.full_like(mean, level), diffusing <= small * level)


def covariance_analytic(i: int, j: int, t: float, tau: float, n: int, alpha: float = 0.5) -> float:
    """``Cov(N_i(t), N_j(t+tau)) = n p_i(t) (p_{i-j}(tau) - p_j(t+tau))`` with Gaussian ``p``.

    Cells are offsets from the source. At ``tau = 0`` the transition term is
    the Kronecker delta.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if tau < 0:
        raise ValueError("tau must be nonnegative")

    def g(x, s):
        return gaussian_profile(s, alpha, [x]).p[0]

    move = float(i == j) if tau == 0 else g(i - j, tau)
    return n * g(i, t) * (move - g(j, t + tau))


def covariance_lattice(lattice: LatticeSpec, i: int, j: int, t: int, tau: int, n: int) -> float:
    """Exact covariance for the bounded +/-1 walk (absolute cell indices)."""
    from .spectral import lattice_propagator

    p_t = lattice_propagator(lattice.n_cells, t)[:, lattice.center]
    p_tt = lattice_propagator(lattice.n_cells, t + tau)[:, lattice.center]
    move = lattice_propagator(lattice.n_cells, tau)[j, i]
    return n * p_t[i] * (move - p_tt[j])


@dataclass
class EmpiricalMoments:
    """Unbiased sample moments over realizations (axis 1 of ``stack``)."""

    stack: np.ndarray  # (n_times, n_real, n_cells)
    mean: np.ndarray
    variance: np.ndarray

    @property
    def n_realizations(self) -> int:
        return self.stack.shape[1]

    def standard_error(self) -> np.ndarray:
        return np.sqrt(self.variance / self.n_realizations)

    def covariance(self, i: int, j: int, t_index: int, lag: int) -> float:
        a = self.stack[t_index, :, i].astype(float)
        b = self.stack[t_index + lag, :, j].astype(float)
        return float(np.sum((a - a.mean()) * (b - b.mean())) / (a.size - 1))


def empirical_moments(series: OccupationSeries | Sequence[OccupationSeries]) -> EmpiricalMoments:
    """Sample mean, variance and covariances from repeated realizations.

    Accepts either a list of single-realization series or one batched series.
    """
    if isinstance(series, OccupationSeries):
        if series.counts.ndim != 3:
            raise ValueError("a single series needs a realization axis")
        stack = series.counts
    else:
        series = list(series)
        if len(series) < 2:
            raise ValueError("need at least 2 realizations")
        shapes = {s.counts.shape for s in series}
        if len(shapes) != 1 or len({s.lattice.n_cells for s in series}) != 1:
            raise ValueError(f"realizations have mismatched shapes {sorted(shapes)}")
        stack = np.stack([s.counts for s in series], axis=1)
    if stack.shape[1] < 2:
        raise ValueError("need at least 2 realizations")
    data = stack.astype(float)
    return EmpiricalMoments(stack=stack, mean=data.mean(axis=1), variance=data.var(axis=1, ddof=1))


def pair_bins(values: np.ndarray, start: int = 0) -> np.ndarray:
    """Sum adjacent cells ``(start+2m, start+2m+1)`` along the last axis.

    A +/-1 walk only visits cells of one parity at a given time, so per-cell
    histograms are compared with smooth profiles on 2-cell bins.
    """
    v = np.asarray(values)[..., start:]
    n = v.shape[-1] - v.shape[-1] % 2
    v = v[..., :n]
    return v.reshape(*v.shape[:-1], n // 2, 2).sum(axis=-1)


def parity_windows(values: np.ndarray, start: int, weight_power: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Sums over 3-cell windows centred on cells ``start, start+2, ...`` with weights ``(1/2, 1, 1/2)``.

    Centring on the parity a +/-1 walk occupies at a given time avoids the
    half-cell offset of plain pair bins. ``weight_power=2`` uses squared
    weights ``(1/4, 1, 1/4)``, which gives the second moment of a walker's
    window weight. Returns ``(centres, sums)`` along the last axis.
    """
    v = np.asarray(values, dtype=float)
    n = v.shape[-1]
    if not 0 <= start < n:
        raise ValueError(f"start must lie in [0, {n})")
    side = 0.5**weight_power
    pad = np.concatenate([np.zeros(v.shape[:-1] + (1,)), v, np.zeros(v.shape[:-1] + (1,))], axis=-1)
    c = np.arange(start, n, 2)
    return c, side * pad[..., c] + pad[..., c + 1] + side * pad[..., c + 2]


def displacement_variance(trajectories: np.ndarray, start: int) -> np.ndarray:
    """Sample variance of walker displacement per time step."""
    return np.var(np.asarray(trajectories, dtype=float) - start, axis=1, ddof=1)
