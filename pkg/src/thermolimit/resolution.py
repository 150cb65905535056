"""Resolution limits imposed by diffusion and noise.

Covers cutoff wavenumbers and frequencies, the band-limited (sinc)
reconstruction of a point, 1D and 2D thermal point-spread functions,
entropy of occupation profiles and main-lobe width measurement.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import roots_legendre


def _check_snr(snr: float) -> None:
    if not snr > 1:
        raise ValueError(f"SNR must exceed 1 (nothing is above the noise otherwise), got {snr}")


def k_cut(snr_k: float, alpha: float, t: float) -> float:
    """Largest wavenumber whose decayed amplitude still exceeds the noise: ``sqrt(ln SNR / (alpha t))``."""
    _check_snr(snr_k)
    if not (alpha > 0 and t > 0):
        raise ValueError("alpha and t must be positive")
    return float(np.sqrt(np.log(snr_k) / (alpha * t)))


def sinc_reconstruction(n0: float, kcut: float, xs) -> np.ndarray:
    """``(n0/pi) sin(kcut x) / x``, with value ``n0 kcut / pi`` at ``x = 0``."""
    if not kcut > 0:
        raise ValueError("kcut must be positive")
    x = np.asarray(xs, dtype=float)
    return n0 * kcut / np.pi * np.sinc(kcut * x / np.pi)


def delta_r_time(alpha: float, t: float, snr_k: float) -> float:
    """Resolution after diffusing for ``t``: ``pi / k_cut``."""
    return float(np.pi / k_cut(snr_k, alpha, t))


class CutoffFrequency(NamedTuple):
    omega_cut: float
    mu_cut: float


def omega_cut(alpha: float, snr: float, x: float) -> CutoffFrequency:
    """Cutoff angular frequency for a source at depth ``x``.

    ``mu_cut = x / ln(SNR)`` solves ``SNR exp(-x / mu_cut) = 1`` and
    ``omega_cut = 2 alpha / mu_cut^2``.
    """
    _check_snr(snr)
    if not (alpha > 0 and x > 0):
        raise ValueError("alpha and depth must be positive")
    mu = x / np.log(snr)
    return CutoffFrequency(float(2 * alpha / mu**2), float(mu))


def delta_r_depth(x: float, snr: float) -> float:
    """Depth-limited resolution ``pi x / ln(SNR)`` (independent of diffusivity)."""
    _check_snr(snr)
    if not x > 0:
        raise ValueError("depth must be positive")
    return float(np.pi * x / np.log(snr))


@dataclass
class ResolutionReport:
    k_cut: float
    omega_cut: float
    delta_r: float
    snr_used: float
    regime: str

    def __post_init__(self) -> None:
        if self.regime not in ("time-domain k-space", "depth-domain frequency"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if not all(v > 0 for v in (self.k_cut, self.omega_cut, self.delta_r, self.snr_used)):
            raise ValueError("report entries must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def report_time(alpha: float, t: float, snr_k: float) -> ResolutionReport:
    kc = k_cut(snr_k, alpha, t)
    # the frequency that carries wavenumber kc as a thermal wave, k = sqrt(omega / 2 alpha)
    return ResolutionReport(kc, 2 * alpha * kc**2, np.pi / kc, snr_k, "time-domain k-space")


def report_depth(alpha: float, x: float, snr: float) -> ResolutionReport:
    om, mu = omega_cut(alpha, snr, x)
    return ResolutionReport(1 / mu, om, delta_r_depth(x, snr), snr, "depth-domain frequency")


# ---------------------------------------------------------------- main lobes


class MainLobeError(ValueError):
    """Profile has no well-defined main lobe."""


@dataclass
class MainLobe:
    peak_index: int
    peak: float
    fwhm: float
    zero_width: float
    half_left: float
    half_right: float
    zero_left: float
    zero_right: float

    @property
    def rayleigh(self) -> float:
        """Mean peak-to-first-null distance."""
        return self.zero_width / 2


def _crossing(axis, prof, i_from, step, level):
    # walk from the peak until prof drops to `level`; linear interpolation
    i = i_from
    n = prof.size
    while 0 <= i + step < n:
        j = i + step
        if prof[j] <= level:
            f = (prof[i] - level) / (prof[i] - prof[j])
            return axis[i] + f * (axis[j] - axis[i])
        i = j
    return None


def measure_mainlobe(profile, axis) -> MainLobe:
    """FWHM and first-zero-to-first-zero width of the lobe around the global maximum.

    Raises :class:`MainLobeError` for plateau maxima, maxima on the edge or
    profiles that never fall to zero on either side.
    """
    prof = np.asarray(profile, dtype=float)
    axis = np.asarray(axis, dtype=float)
    if prof.shape != axis.shape or prof.ndim != 1 or prof.size < 3:
        raise MainLobeError("profile and axis must be equal-length 1D arrays")
    i = int(np.argmax(prof))
    peak = prof[i]
    if not peak > 0:
        raise MainLobeError("profile maximum must be positive")
    ties = np.flatnonzero(prof == peak)
    if ties.size > 2 or (ties.size == 2 and ties[1] - ties[0] != 1):
        raise MainLobeError("plateau maximum: main lobe undefined")
    if i == 0 or i == prof.size - 1:
        raise MainLobeError("maximum on the profile edge: monotone profile")
    hl = _crossing(axis, prof, i, -1, peak / 2)
    hr = _crossing(axis, prof, i, 1, peak / 2)
    zl = _crossing(axis, prof, i, -1, 0.0)
    zr = _crossing(axis, prof, i, 1, 0.0)
    if hl is None or hr is None:
        raise MainLobeError("profile does not fall to half maximum on both sides")
    if zl is None or zr is None:
        raise MainLobeError("no zero crossing on both sides of the peak")
    return MainLobe(i, float(peak), hr - hl, zr - zl, hl, hr, zl, zr)


# ---------------------------------------------------------------- PSFs


@dataclass
class PsfGrid:
    """Image sampling in units of the source depth ``d``."""

    n_x: int = 512
    n_z: int = 512
    x_extent: float = 2.5  # lateral half-width
    z_range: tuple[float, float] = (0.0, 2.0)

    # sample points include x = 0 and, for the default range, z = 1

    @property
    def xs(self) -> np.ndarray:
        return (np.arange(self.n_x) - self.n_x // 2) * (2 * self.x_extent / self.n_x)

    @property
    def zs(self) -> np.ndarray:
        z0, z1 = self.z_range
        return z0 + np.arange(self.n_z) * ((z1 - z0) / self.n_z)


@dataclass
class PsfImage:
    values: np.ndarray  # (n_x, n_z)
    xs: np.ndarray  # lateral, units of d
    zs: np.ndarray  # depth, units of d
    snr: float
    peak: tuple[float, float]

    def axial_profile(self) -> np.ndarray:
        return self.values[int(np.argmin(np.abs(self.xs - self.peak[0]))), :]

    def lateral_profile(self) -> np.ndarray:
        return self.values[:, int(np.argmin(np.abs(self.zs - self.peak[1])))]


def psf_1d(snr: float, d: float, zs) -> np.ndarray:
    """Axial PSF of a 1D (layered) problem: sinc with ``k_cut = ln(SNR)/d``, peak 1 at ``z = d``."""
    _check_snr(snr)
    kc = np.log(snr) / d
    return sinc_reconstruction(np.pi / kc, kc, np.asarray(zs, dtype=float) - d)


def _psf_hard(snr: float, d: float, xs: np.ndarray, zs: np.ndarray, n_quad: int) -> np.ndarray:
    # Pass band: disc k <= K cos(theta) (centre (0, K/2), radius K/2) plus its mirror.
    # kz = K/2 (1 - cos phi), half chord a = K/2 sin phi; lateral integral in closed form.
    K = np.log(snr) / d
    nodes, weights = roots_legendre(n_quad)
    phi = 0.5 * np.pi * (nodes + 1)
    w = 0.5 * np.pi * weights * (K / 2) * np.sin(phi)
    kz = K / 2 * (1 - np.cos(phi))
    a = K / 2 * np.sin(phi)
    lateral = 2 * a[None, :] * np.sinc(a[None, :] * xs[:, None] / np.pi)  # int_{-a}^{a} e^{i kx x} dkx
    axial = 2 * np.cos(kz[:, None] * (zs[None, :] - d))  # disc plus mirror disc
    return (lateral * w[None, :]) @ axial / (4 * np.pi**2)


def _psf_taper(snr: float, d: float, xs: np.ndarray, zs: np.ndarray, n_k: int, n_theta: int) -> np.ndarray:
    # smooth filter A^2/(A^2+1) with surface amplitude A = SNR exp(-k d / cos theta)
    K = np.log(snr) / d
    kn, kw = roots_legendre(n_k)
    tn, tw = roots_legendre(n_theta)
    theta = 0.5 * np.pi * tn
    wt = 0.5 * np.pi * tw
    out = np.zeros((xs.size, zs.size))
    for th, wth in zip(theta, wt):
        kmax = 3.0 * K * np.cos(th)
        k = 0.5 * kmax * (kn + 1)
        wk = 0.5 * kmax * kw
        filt = 1.0 / (1.0 + np.exp(2 * (k * d / np.cos(th) - np.log(snr))))
        kx = k * np.sin(th)
        kzz = k * np.cos(th)
        # real part of e^{i(kx x + kz z')} summed with its mirror
        cx, sx = np.cos(np.outer(xs, kx)), np.sin(np.outer(xs, kx))
        cz, sz = np.cos(np.outer(kzz, zs - d)), np.sin(np.outer(kzz, zs - d))
        wgt = (wth * wk * k * filt * 2)[:, None]
        out += cx @ (wgt * cz) - sx @ (wgt * sz)
    return out / (4 * np.pi**2)


def psf_2d(snr: float, d: float = 1.0, grid: PsfGrid | None = None, taper: bool = False, n_quad: int = 256) -> PsfImage:
    """2D thermal PSF of a point source at depth ``d`` below a planar detector surface.

    The direction-dependent cutoff is ``k_cut(theta) = ln(SNR) cos(theta) / d``.
    The image is the real part of the inverse Fourier integral of the pass band
    and its Hermitian mirror, normalized to a unit peak, on coordinates in
    units of ``d``. ``taper=True`` replaces the hard cut by a smooth
    noise-weighted filter.
    """
    _check_snr(snr)
    if not d > 0:
        raise ValueError("d must be positive")
    grid = grid or PsfGrid()
    xs, zs = grid.xs, grid.zs
    dz = zs[1] - zs[0]
    predicted = delta_r_depth(1.0, snr)
    if predicted / dz < 16:
        raise ValueError(
            f"grid too coarse: {predicted / dz:.1f} samples across the predicted axial width, need >= 16"
        )
    # work in units of d
    if taper:
        img = _psf_taper(snr, 1.0, xs, zs, n_k=128, n_theta=128)
    else:
        img = _psf_hard(snr, 1.0, xs, zs, n_quad)
    ix, iz = np.unravel_index(int(np.argmax(img)), img.shape)
    img = img / img[ix, iz]
    return PsfImage(img, xs, zs, float(snr), (float(xs[ix]), float(zs[iz])))


@dataclass
class PsfWidths:
    axial: MainLobe
    lateral: MainLobe
    axial_window: tuple[float, float]

    @property
    def fwhm_ratio(self) -> float:
        return self.lateral.fwhm / self.axial.fwhm

    @property
    def zero_ratio(self) -> float:
        return self.lateral.zero_width / self.axial.zero_width


def psf_widths(image: PsfImage) -> PsfWidths:
    """Main lobes along both axes through the peak.

    ``axial_window`` is centred on the peak with width equal to the
    peak-to-first-null distance (the resolution length).
    """
    ax = measure_mainlobe(image.axial_profile(), image.zs)
    lat = measure_mainlobe(image.lateral_profile(), image.xs)
    zc = image.peak[1]
    return PsfWidths(ax, lat, (zc - ax.rayleigh / 2, zc + ax.rayleigh / 2))


# ---------------------------------------------------------------- entropy


def shannon_entropy(p) -> float:
    """``-sum p ln p`` in units of k_B, with ``0 ln 0 = 0``."""
    p = np.asarray(getattr(p, "p", p), dtype=float)
    if np.any(p < 0):
        raise ValueError("probabilities must be nonnegative")
    if abs(p.sum() - 1) > 1e-9:
        raise ValueError(f"profile not normalized (sum {p.sum():.12g})")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy_trace(initial, times, n_cells: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Entropy of a probability profile under drift-only evolution on the bounded lattice."""
    from .spectral import spectral_system

    p0 = np.asarray(initial, dtype=float)
    system = spectral_system(n_cells or p0.size)
    modes = system.forward(p0)
    times = np.asarray(times, dtype=float)
    ent = []
    for t in times:
        p = system.inverse(modes * np.exp(-system.gamma * t))
        p = np.clip(p, 0.0, None)
        ent.append(shannon_entropy(p / p.sum()))
    return times, np.array(ent)
