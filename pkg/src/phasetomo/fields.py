"""Complex 2D wave fields on a sampled lateral grid.

Provides the unitary Fourier-transform pair, angular-spectrum free-space
propagation, and the microscope transfer function. All operators here are
linear and, on their pass band, unitary; adjoints are available either as
the inverse (propagation) or as conjugate multiplication (transfer
function).

Conventions:
    * arrays are indexed ``(y, x)`` with x the fastest axis,
    * spatial frequencies ``q`` are in 1/Angstrom, stored in numpy fft
      order (DC at index 0),
    * the FFT pair is unitary (``norm="ortho"``) so that the adjoint of
      the transform equals its inverse and Parseval's identity holds
      without extra bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConfigurationError(ValueError):
    """Grid or microscope parameters are inconsistent."""


def _require_finite(values: np.ndarray, what: str = "field") -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"non-finite {what}")


@dataclass(frozen=True)
class GridSpec:
    """Lateral sampling grid shared by wave fields and transfer functions.

    Parameters
    ----------
    nx, ny : int
        Pixel counts; arrays on this grid have shape ``(ny, nx)``.
    pitch : float
        Real-space sampling in Angstrom, isotropic.
    wavelength : float
        Electron wavelength in Angstrom.
    """

    nx: int
    ny: int
    pitch: float
    wavelength: float

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ConfigurationError("grid needs at least 2 pixels per axis")
        if self.pitch <= 0.0:
            raise ConfigurationError("pitch must be positive")
        if self.wavelength <= 0.0:
            raise ConfigurationError("wavelength must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def nyquist(self) -> float:
        """Largest representable |q| component, 1/(2*pitch)."""
        return 1.0 / (2.0 * self.pitch)

    def frequency_grids(self) -> tuple[np.ndarray, np.ndarray]:
        """(qy, qx) broadcastable frequency coordinates in fft order."""
        qx = np.fft.fftfreq(self.nx, d=self.pitch)
        qy = np.fft.fftfreq(self.ny, d=self.pitch)
        return qy[:, None], qx[None, :]

    def q_squared(self) -> np.ndarray:
        qy, qx = self.frequency_grids()
        return qy * qy + qx * qx


@dataclass
class WaveField:
    """A complex scalar wave sampled on a :class:`GridSpec`."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"values shape {self.values.shape} does not match grid {self.grid.shape}"
            )

    @classmethod
    def plane_wave(cls, grid: GridSpec, amplitude: complex = 1.0) -> "WaveField":
        return cls(grid, np.full(grid.shape, amplitude, dtype=np.complex128))

    def power(self) -> float:
        """Total |psi|^2 over the grid."""
        return float(np.sum(np.abs(self.values) ** 2))


@dataclass
class TransferFunction:
    """Frequency-domain filter H(q) applied to exit waves.

    ``values`` are stored in fft order on the same grid as the waves they
    filter. |H| <= 1 everywhere; when ``aperture_qmax`` is set, H is zero
    beyond that radius.
    """

    grid: GridSpec
    values: np.ndarray
    aperture_qmax: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape != self.grid.shape:
            raise ValueError("transfer function shape does not match grid")
        _require_finite(self.values, "transfer function")
        if np.any(np.abs(self.values) > 1.0 + 1e-12):
            raise ValueError("|H(q)| must not exceed 1")
        if self.aperture_qmax is not None:
            outside = self.grid.q_squared() > self.aperture_qmax**2
            if np.any(self.values[outside] != 0):
                raise ValueError("H(q) must vanish beyond the aperture cutoff")

    @classmethod
    def identity(cls, grid: GridSpec, aperture_qmax: float | None = None) -> "TransferFunction":
        """H == 1, optionally truncated by a hard circular aperture."""
        values = np.ones(grid.shape, dtype=np.complex128)
        if aperture_qmax is not None:
            values[grid.q_squared() > aperture_qmax**2] = 0.0
        return cls(grid, values, aperture_qmax)


def forward_fft(f: WaveField) -> np.ndarray:
    """Unitary 2D DFT of the field, returned in fft order."""
    _require_finite(f.values)
    return np.fft.fft2(f.values, norm="ortho")


def inverse_fft(spectrum: np.ndarray, grid: GridSpec) -> WaveField:
    """Inverse of :func:`forward_fft`."""
    _require_finite(spectrum, "spectrum")
    return WaveField(grid, np.fft.ifft2(spectrum, norm="ortho"))


def propagation_kernel(grid: GridSpec, dz: float) -> np.ndarray:
    """Angular-spectrum factor exp[i 2 pi dz sqrt(1/lambda^2 - |q|^2)].

    Frequencies beyond 1/lambda (evanescent) are zeroed rather than
    attenuated, which keeps the propagator exactly unitary on its band
    and makes the adjoint equal to propagation by ``-dz``.
    """
    lam = grid.wavelength
    q2 = grid.q_squared()
    kz2 = 1.0 / lam**2 - q2
    band = kz2 > 0.0
    kernel = np.zeros(grid.shape, dtype=np.complex128)
    kernel[band] = np.exp(2j * np.pi * dz * np.sqrt(kz2[band]))
    return kernel


def band_mask(grid: GridSpec, fraction: float = 2.0 / 3.0) -> np.ndarray:
    """Boolean circular mask |q| <= fraction * Nyquist, in fft order.

    Multislice anti-aliasing uses the conventional 2/3 band limit after
    each transmittance multiplication.
    """
    qmax = fraction * grid.nyquist
    return grid.q_squared() <= qmax**2


def propagate(f: WaveField, dz: float) -> WaveField:
    """Free-space propagation by ``dz`` Angstrom (negative allowed)."""
    spectrum = forward_fft(f)
    spectrum *= propagation_kernel(f.grid, dz)
    return inverse_fft(spectrum, f.grid)


def band_limit(f: WaveField, fraction: float = 2.0 / 3.0) -> WaveField:
    """Zero all spatial frequencies beyond ``fraction`` of Nyquist."""
    spectrum = forward_fft(f)
    spectrum[~band_mask(f.grid, fraction)] = 0.0
    return inverse_fft(spectrum, f.grid)


def apply_ctf(f: WaveField, h: TransferFunction) -> WaveField:
    """Pointwise spectral multiplication by H(q)."""
    if h.grid != f.grid:
        raise ValueError("transfer function grid does not match field grid")
    spectrum = forward_fft(f)
    spectrum *= h.values
    return inverse_fft(spectrum, f.grid)


def apply_ctf_adjoint(f: WaveField, h: TransferFunction) -> WaveField:
    """Adjoint of :func:`apply_ctf`: multiplication by conj(H)."""
    if h.grid != f.grid:
        raise ValueError("transfer function grid does not match field grid")
    spectrum = forward_fft(f)
    spectrum *= np.conj(h.values)
    return inverse_fft(spectrum, f.grid)
