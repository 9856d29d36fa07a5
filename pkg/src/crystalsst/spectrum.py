"""Unitary 3D DFT, radially averaged spectrum and dominant band detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft
from scipy import ndimage

from .volume_io import ScalarVolume


class NoBandError(ValueError):
    """The radial spectrum carries no energy above the DC/trend cutoff."""


@dataclass(frozen=True, eq=False)
class SpectralVolume:
    """Fourier coefficients of a volume in numpy FFT order.

    Index ``k`` along an axis of length ``L`` corresponds to the frequency
    ``xi = k`` for ``k < L/2`` and ``xi = k - L`` otherwise, so every
    ``xi`` satisfies ``-L/2 <= xi < L/2``.
    """

    data: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def frequencies(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(
            np.fft.fftfreq(n, 1.0 / n).reshape([-1 if k == j else 1 for k in range(3)])
            for j, n in enumerate(self.dims)
        )

    def radius(self) -> np.ndarray:
        k1, k2, k3 = self.frequencies()
        return np.sqrt(k1**2 + k2**2 + k3**2)


@dataclass(frozen=True)
class RadialSpectrum:
    step: float
    r: np.ndarray
    values: np.ndarray

    def to_text(self) -> str:
        rows = "\n".join(f"{r:.6g}\t{e:.10g}" for r, e in zip(self.r, self.values))
        return "# r\tE(r)\n" + rows + "\n"


@dataclass(frozen=True)
class Band:
    r1: float
    r2: float
    wavenumber: float


def _as_array(vol) -> np.ndarray:
    return vol.data if isinstance(vol, ScalarVolume) else np.asarray(vol)


def forward_fourier(vol, workers: int | None = None) -> SpectralVolume:
    """f_hat(xi) = L^{-3/2} sum_x exp(-2 pi i x.xi) f(x).

    Complex input is accepted (plane-wave probes); real volumes give a
    conjugate-symmetric result.
    """
    arr = _as_array(vol)
    if arr.ndim != 3 or min(arr.shape) < 8:
        raise ValueError(f"need a 3D array with every dim >= 8, got {arr.shape}")
    return SpectralVolume(scipy.fft.fftn(arr, norm="ortho", workers=workers))


def inverse_fourier(spec: SpectralVolume, workers: int | None = None) -> np.ndarray:
    return scipy.fft.ifftn(spec.data, norm="ortho", workers=workers)


def noise_floor(spec: SpectralVolume) -> float:
    """Mean |f_hat| of white noise, estimated from the median magnitude over all modes.

    Crystal spectra are sparse, so the median is set by the noise; for
    complex Gaussian coefficients mean / median = sqrt(pi / (4 ln 2)).
    """
    return float(np.median(np.abs(spec.data)) * np.sqrt(np.pi / (4 * np.log(2))))


def noise_sigma(spec: SpectralVolume) -> float:
    """Per-mode noise standard deviation sqrt(E|f_hat|^2) from the median magnitude."""
    return float(np.median(np.abs(spec.data)) / np.sqrt(np.log(2)))


def radial_power_spectrum(spec: SpectralVolume, step: float = 1.0,
                          floor: float = 0.0) -> RadialSpectrum:
    """Shell sums of |f_hat| over D_n = [n*step, (n+1)*step), divided by r = n*step.

    The n = 0 shell is excluded.  Shells extend to the cube corners
    (|xi| up to sqrt(3) L / 2), not only to L / 2.  A per-mode ``floor``
    (see :func:`noise_floor`) is subtracted from every magnitude first.
    """
    if step < 0.5:
        raise ValueError("radial step must be >= 1/2")
    if floor < 0:
        raise ValueError("floor must be >= 0")
    idx = np.floor(spec.radius() / step).astype(np.int64).ravel()
    sums = np.bincount(idx, weights=np.abs(spec.data).ravel() - floor)
    n = np.arange(1, sums.size)
    r = n * step
    return RadialSpectrum(step=float(step), r=r, values=sums[1:] / r)


def _smooth(values: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return values.copy()
    padded = np.pad(values, width // 2, mode="edge")
    return np.convolve(padded, np.ones(width) / width, mode="valid")


def dominant_band(E: RadialSpectrum, tau: float = 0.1, r_min: float = 2.0,
                  smooth_width: int = 3, stop_at_valley: bool = True,
                  method: str = "prominence", background_width: int = 11) -> Band:
    """Support of the dominant bump of E above ``r_min``.

    ``method="peak"`` takes the maximum of the smoothed spectrum.
    ``method="prominence"`` first subtracts a running median of width
    ``background_width`` bins, so a narrow lattice bump wins over broadband
    content from defects or residual noise; the peak is the larger of the
    raw and smoothed excess.  The band then grows bin by bin
    while the (excess) value stays at or above ``tau`` times the peak; with
    ``stop_at_valley`` growth also stops at a local minimum, so a
    neighbouring harmonic that never drops under ``tau`` is not merged in.
    Returns ``[r1, r2]`` as the lower edge of the first and the upper edge of
    the last included shell.
    """
    if method not in ("peak", "prominence"):
        raise ValueError(f"unknown band method {method!r}")
    sm = _smooth(E.values, smooth_width)
    score = sm
    if method == "prominence":
        bg = ndimage.median_filter(E.values, size=background_width, mode="nearest")
        sm = sm - bg
        # a lattice peak can be a single shell, so locate it before smoothing
        score = np.maximum(E.values - bg, sm)
    valid = E.r > r_min
    if not np.any(valid) or not np.any(sm[valid] > 0):
        raise NoBandError("spectrum has no energy above r_min")
    cand = np.where(valid, score, -np.inf)
    peak = int(np.argmax(cand))
    level = tau * sm[peak]

    lo = peak
    while lo - 1 >= 0 and valid[lo - 1] and sm[lo - 1] >= level:
        if stop_at_valley and sm[lo - 1] > sm[lo]:
            break
        lo -= 1
    hi = peak
    while hi + 1 < sm.size and sm[hi + 1] >= level:
        if stop_at_valley and sm[hi + 1] > sm[hi]:
            break
        hi += 1
    r1 = float(E.r[lo])
    r2 = float(E.r[hi] + E.step)
    return Band(r1=r1, r2=r2, wavenumber=estimate_wavenumber(E, (r1, r2)))


def estimate_wavenumber(E: RadialSpectrum, band) -> float:
    """Energy-weighted mean radius over the band (trapezoidal rule on the bins)."""
    r1, r2 = (band.r1, band.r2) if isinstance(band, Band) else band
    sel = (E.r >= r1) & (E.r <= r2)
    r, e = E.r[sel], E.values[sel]
    if r.size == 0:
        raise NoBandError(f"no shells inside band [{r1}, {r2}]")
    if r.size == 1:
        if e[0] <= 0:
            raise NoBandError("zero spectral mass in band")
        return float(r[0])
    mass = np.trapezoid(e, r)
    if mass <= 0:
        raise NoBandError("zero spectral mass in band")
    return float(np.trapezoid(r * e, r) / mass)
