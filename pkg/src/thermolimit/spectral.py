"""Mesoscopic Langevin model of lattice diffusion and its cosine-mode decomposition.

The drift matrix ``M`` couples neighbouring cells with reflecting ends. It is
diagonalised by the orthonormal DCT-II, with modal decay rates
``gamma_k = 2 sin^2(k/2)``. Noise can be injected either as independent white
noise per cell, or in the fluctuation-dissipation consistent form where mode
``k`` receives variance ``2 gamma_k Var``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dct, idct

from .lattice_walk import LatticeSpec, OccupationSeries

NOISE_MODELS = ("fdt", "white")


@dataclass(frozen=True)
class SpectralSystem:
    """Cosine basis and modal decay rates of an ``n_cells`` lattice.

    Attributes:
        basis: Orthonormal DCT-II matrix ``F``; ``F @ v`` gives modal amplitudes.
        gamma: Decay rate per mode (1/step).
        k: Wavenumbers ``pi/n * (0..n-1)`` in rad/cell.
    """

    basis: np.ndarray
    gamma: np.ndarray
    k: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.gamma.size

    @property
    def gamma_continuum(self) -> np.ndarray:
        return self.k**2 / 2.0

    def forward(self, values: np.ndarray) -> np.ndarray:
        """Cell space to mode space along the last axis."""
        return dct(np.asarray(values, dtype=float), type=2, norm="ortho", axis=-1)

    def inverse(self, modes: np.ndarray) -> np.ndarray:
        return idct(np.asarray(modes, dtype=float), type=2, norm="ortho", axis=-1)


@dataclass(frozen=True)
class NoiseSpec:
    variance: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.variance >= 0:
            raise ValueError(f"noise variance must be >= 0, got {self.variance}")


def _check_cells(n_cells: int) -> None:
    if int(n_cells) != n_cells or n_cells < 2:
        raise ValueError(f"n_cells must be an integer >= 2, got {n_cells}")


def build_drift_matrix(n_cells: int) -> np.ndarray:
    """Return the symmetric, row-conserving drift matrix ``M``.

    Interior rows are ``(-1/2, 1, -1/2)``; the reflecting end rows are
    ``(1/2, -1/2)``.
    """
    _check_cells(n_cells)
    main = np.ones(n_cells)
    main[[0, -1]] = 0.5
    off = np.full(n_cells - 1, -0.5)
    return np.diag(main) + np.diag(off, 1) + np.diag(off, -1)


def wavenumbers(n_cells: int) -> np.ndarray:
    _check_cells(n_cells)
    return np.pi / n_cells * np.arange(n_cells)


def singular_values(n_cells: int) -> np.ndarray:
    """Exact modal decay rates ``2 sin^2(k/2)`` (continuum limit ``k^2/2``)."""
    return 2.0 * np.sin(wavenumbers(n_cells) / 2.0) ** 2


def dct_basis(n_cells: int) -> np.ndarray:
    _check_cells(n_cells)
    return dct(np.eye(n_cells), type=2, norm="ortho", axis=0)


def spectral_system(n_cells: int) -> SpectralSystem:
    return SpectralSystem(
        basis=dct_basis(n_cells), gamma=singular_values(n_cells), k=wavenumbers(n_cells)
    )


def lattice_propagator(n_cells: int, steps: int) -> np.ndarray:
    """Exact ``steps``-step transition matrix of the reflecting +/-1 walk.

    The one-step matrix is ``I - M`` (a rejected step keeps the walker in
    place), whose eigenvalues are ``cos(k)``. Entry ``[j, i]`` is the
    probability of moving from cell ``i`` to cell ``j``.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    system = spectral_system(n_cells)
    eig = np.cos(system.k) ** int(steps)
    return system.basis.T @ (eig[:, None] * system.basis)


def stability_limit(M: np.ndarray) -> float:
    """Largest allowed Euler-Maruyama step, ``1 / (2 max gamma)``."""
    return 1.0 / (2.0 * np.max(np.linalg.eigvalsh(M)))


def integrate_langevin(
    initial: np.ndarray,
    M: np.ndarray,
    noise: NoiseSpec | None,
    dt: float,
    n_steps: int,
    record_every: int = 1,
    noise_model: str = "fdt",
) -> OccupationSeries:
    """Euler-Maruyama integration of ``dN = -M N dt + noise``.

    ``initial`` may be a single state of shape ``(n_cells,)`` or a batch of
    independent realizations ``(n_real, n_cells)``. With ``noise_model="white"``
    every cell receives independent increments of variance ``Var dt``. With
    ``"fdt"`` the increments are drawn in mode space with variance
    ``2 gamma_k Var dt``, which conserves the total count and makes the
    stationary variance of every non-constant mode equal ``Var``.

    The returned series holds the states at steps ``0, record_every, ...``;
    for batched input ``counts`` has shape ``(n_records, n_real, n_cells)``.
    """
    if noise_model not in NOISE_MODELS:
        raise ValueError(f"unknown noise_model {noise_model!r}; expected one of {NOISE_MODELS}")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    limit = stability_limit(M)
    if dt > limit * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds the stability bound dt <= {limit:.6g}")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")

    state = np.array(initial, dtype=float)
    n_cells = M.shape[0]
    if state.shape[-1] != n_cells:
        raise ValueError(f"initial state has {state.shape[-1]} cells, drift matrix has {n_cells}")

    rng = None
    noisy = noise is not None and noise.variance > 0
    if noisy:
        rng = np.random.default_rng(noise.seed)
        if noise_model == "fdt":
            system = spectral_system(n_cells)
            modal_std = np.sqrt(2.0 * system.gamma * noise.variance * dt)
        else:
            cell_std = np.sqrt(noise.variance * dt)

    propagate = np.eye(n_cells) - dt * M
    records = [state.copy()]
    times = [0.0]
    for step in range(1, n_steps + 1):
        state = state @ propagate  # propagate is symmetric
        if noisy:
            eps = rng.standard_normal(state.shape)
            if noise_model == "fdt":
                state += system.inverse(modal_std * eps)
            else:
                state += cell_std * eps
        if step % record_every == 0:
            records.append(state.copy())
            times.append(step * dt)

    return OccupationSeries(
        counts=np.array(records),
        lattice=LatticeSpec(n_cells),
        times=np.array(times),
        seed=noise.seed if noise is not None else None,
    )


def evolve_kspace(
    initial_hat: np.ndarray,
    t: float,
    system: SpectralSystem,
    noise: NoiseSpec | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Propagate modal amplitudes over time ``t``.

    Noiseless evolution is ``N_k(0) exp(-gamma_k t)``. With noise, the exact
    Ornstein-Uhlenbeck transition is sampled: the mean is the same and the
    per-mode variance is ``Var (1 - exp(-2 gamma_k t))``.
    """
    amp = np.asarray(initial_hat, dtype=float)
    if amp.shape[-1] != system.n_cells:
        raise ValueError(f"expected {system.n_cells} modal amplitudes, got {amp.shape[-1]}")
    if t < 0:
        raise ValueError("t must be >= 0")
    decay = np.exp(-system.gamma * t)
    mean = amp * decay
    if noise is None or noise.variance == 0:
        return mean
    if rng is None:
        rng = np.random.default_rng(noise.seed)
    std = np.sqrt(noise.variance * (1.0 - decay**2))
    return mean + std * rng.standard_normal(mean.shape)
