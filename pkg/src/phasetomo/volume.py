"""3D potential volumes and the linear operators of the reconstruction loop.

A volume stores per-slice projected potential in volt*Angstrom: slice ``m``
(index along the first axis) is the 2D potential integrated over one voxel
pitch in z. Dividing a voxel value by the pitch converts it to volts.

The module provides:
    * y-axis rotation by a three-pass shear decomposition, plus its exact
      algebraic adjoint,
    * slice binning (summing groups of consecutive slices) and its adjoint,
    * the projected-potential -> transmittance map ``t = exp(i sigma W)``,
    * the relativistic electron wavelength / interaction constant,
    * the raw+JSON volume file format.

Array layout is ``(nz, ny, nx)`` with x fastest, matching the on-disk
format (x, then y, then z).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fields import ConfigurationError, GridSpec, WaveField, _require_finite

# CODATA 2018
_PLANCK_H = 6.62607015e-34        # J s
_ELECTRON_MASS = 9.1093837015e-31  # kg
_ELEMENTARY_CHARGE = 1.602176634e-19  # C
_HC_KEV_A = 12.398419843320026    # h*c in keV Angstrom
_M0C2_KEV = 510.99895000          # electron rest energy in keV


@dataclass
class PotentialVolume:
    """Real (or, transiently inside the solver, complex) 3D scalar field.

    ``values`` has shape (nz, ny, nx); ``pitch`` is the isotropic voxel
    size in Angstrom. Physical volumes are real and non-negative; the
    solver is allowed to carry complex intermediate iterates until its
    projection step.
    """

    values: np.ndarray
    pitch: float

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ValueError("volume values must be 3D (nz, ny, nx)")
        if self.pitch <= 0.0:
            raise ConfigurationError("pitch must be positive")

    @property
    def nz(self) -> int:
        return self.values.shape[0]

    @property
    def ny(self) -> int:
        return self.values.shape[1]

    @property
    def nx(self) -> int:
        return self.values.shape[2]

    @classmethod
    def zeros(cls, nz: int, ny: int, nx: int, pitch: float, dtype=np.float64) -> "PotentialVolume":
        return cls(np.zeros((nz, ny, nx), dtype=dtype), pitch)


@dataclass
class BinnedVolume:
    """Volume after summing groups of ``n_b`` consecutive slices."""

    values: np.ndarray
    pitch: float
    n_b: int

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ValueError("binned values must be 3D (n_slabs, ny, nx)")
        if self.n_b < 1:
            raise ValueError("binning factor must be >= 1")

    @property
    def n_slabs(self) -> int:
        return self.values.shape[0]

    @property
    def slab_thickness(self) -> float:
        return self.n_b * self.pitch


@dataclass(frozen=True)
class InteractionParams:
    """Beam-sample coupling constants.

    ``sigma`` is in rad/(V*Angstrom) so that ``sigma * W`` is a phase in
    radians when W is a projected potential in V*Angstrom.
    """

    sigma: float
    wavelength: float
    accel_voltage_kv: float

    def __post_init__(self):
        if self.sigma <= 0.0 or self.wavelength <= 0.0:
            raise ConfigurationError("sigma and wavelength must be positive")


def electron_wavelength(accel_voltage_kv: float) -> float:
    """Relativistic de Broglie wavelength in Angstrom for a kV beam."""
    if accel_voltage_kv <= 0.0:
        raise ConfigurationError("accelerating voltage must be positive")
    e_kev = accel_voltage_kv
    return _HC_KEV_A / np.sqrt(e_kev * (2.0 * _M0C2_KEV + e_kev))


def interaction_parameter(accel_voltage_kv: float) -> InteractionParams:
    """sigma = 2 pi m e lambda / h^2 with relativistic mass m = gamma m0."""
    lam = electron_wavelength(accel_voltage_kv)
    gamma = 1.0 + accel_voltage_kv / _M0C2_KEV
    sigma_si = (
        2.0 * np.pi * gamma * _ELECTRON_MASS * _ELEMENTARY_CHARGE * (lam * 1e-10)
        / _PLANCK_H**2
    )
    return InteractionParams(sigma=sigma_si * 1e-10, wavelength=lam,
                             accel_voltage_kv=accel_voltage_kv)


def interaction_from_wavelength(wavelength: float) -> InteractionParams:
    """Recover the accelerating voltage from lambda, then build sigma.

    The relation E(2 m0 c^2 + E) = (hc/lambda)^2 is inverted in closed
    form; useful when only the wavelength is recorded in a manifest.
    """
    if wavelength <= 0.0:
        raise ConfigurationError("wavelength must be positive")
    e_kev = -_M0C2_KEV + np.sqrt(_M0C2_KEV**2 + (_HC_KEV_A / wavelength) ** 2)
    return interaction_parameter(e_kev)


def max_slab_thickness(wavelength: float, pitch: float) -> float:
    """Axial Nyquist bound on the slab thickness, lambda/(1-sqrt(1-NA^2)).

    NA = lambda/pitch is the effective numerical aperture of the sampled
    grid. Slabs thinner than this support the axial resolution at every
    tilt angle.
    """
    na = wavelength / pitch
    if not 0.0 < na < 1.0:
        raise ConfigurationError("need 0 < wavelength/pitch < 1")
    return wavelength / (1.0 - np.sqrt(1.0 - na * na))


# ---------------------------------------------------------------------------
# rotation about the y axis
# ---------------------------------------------------------------------------

def _rot90_xz(values: np.ndarray, k: int) -> np.ndarray:
    """Exact rotation by k*90 degrees in the x-z plane (+x toward +z)."""
    k %= 4
    if k == 0:
        return values.copy()
    if values.shape[0] != values.shape[2]:
        raise ValueError("x-z rotation requires nx == nz")
    if k == 1:
        return np.ascontiguousarray(values.transpose(2, 1, 0)[:, :, ::-1])
    if k == 2:
        return np.ascontiguousarray(values[::-1, :, ::-1])
    return np.ascontiguousarray(values.transpose(2, 1, 0)[::-1, :, :])


def _sheared(values: np.ndarray, shift_axis: int, coord_axis: int, coeff: float) -> np.ndarray:
    """One shear pass: translate along ``shift_axis`` by coeff*(centered
    coordinate along ``coord_axis``), with linear interpolation and zero
    fill outside the volume.

    Each pass is exactly linear; its adjoint is the same pass with the
    coefficient negated.
    """
    if coeff == 0.0:
        return values.copy()
    n_shift = values.shape[shift_axis]
    n_coord = values.shape[coord_axis]
    offsets = coeff * (np.arange(n_coord) - (n_coord - 1) / 2.0)
    k = np.floor(offsets).astype(np.int64)
    frac = offsets - k

    idx = np.arange(n_shift)
    # source indices per (coord, shift) pair for the two interpolation taps
    src0 = idx[None, :] - k[:, None]
    src1 = src0 - 1

    def expand(arr2d: np.ndarray) -> np.ndarray:
        # lift a (coord, shift) array into broadcastable 3D index space,
        # matching the memory order of the target axes
        if shift_axis < coord_axis:
            arr2d = arr2d.T
        shape = [1, 1, 1]
        shape[coord_axis] = n_coord
        shape[shift_axis] = n_shift
        return np.ascontiguousarray(arr2d).reshape(shape)

    w1 = expand(np.broadcast_to(frac[:, None], src0.shape).copy())
    w0 = 1.0 - w1
    out = np.zeros_like(values)
    for src, w in ((src0, w0), (src1, w1)):
        valid = (src >= 0) & (src < n_shift)
        gathered = np.take_along_axis(
            values, expand(np.clip(src, 0, n_shift - 1)), axis=shift_axis
        )
        out += w * expand(valid) * gathered
    return out


def _split_angle(theta_deg: float) -> tuple[int, float]:
    """Reduce theta to an exact 90-degree multiple plus |phi| <= 45 deg."""
    theta = (theta_deg + 180.0) % 360.0 - 180.0
    k = int(round(theta / 90.0))
    return k, theta - 90.0 * k


def _shear_coeffs(phi_deg: float) -> tuple[float, float]:
    phi = np.deg2rad(phi_deg)
    return -np.tan(phi / 2.0), np.sin(phi)


def rotate(v: PotentialVolume, theta_deg: float) -> PotentialVolume:
    """Rotate the volume about the y axis by ``theta_deg``.

    Positive angles turn the +x axis toward +z. The rotation is an exact
    90-degree permutation composed with a three-pass (x, z, x) shear for
    the residual angle, so the residual shears stay well conditioned for
    any input angle. Voxels sheared outside the volume are dropped,
    vacated voxels are zero.
    """
    k, phi = _split_angle(theta_deg)
    if (k % 4 != 0 or phi != 0.0) and v.nx != v.nz:
        raise ValueError("rotation requires nx == nz")
    values = _rot90_xz(v.values, k)
    if phi != 0.0:
        alpha, beta = _shear_coeffs(phi)
        values = _sheared(values, 2, 0, alpha)
        values = _sheared(values, 0, 2, beta)
        values = _sheared(values, 2, 0, alpha)
    return PotentialVolume(values, v.pitch)


def rotate_adjoint(v: PotentialVolume, theta_deg: float) -> PotentialVolume:
    """Exact algebraic adjoint of :func:`rotate` at the same angle.

    Transposes each shear pass (negated coefficient) in reverse order,
    then inverts the 90-degree permutation.
    """
    k, phi = _split_angle(theta_deg)
    if (k % 4 != 0 or phi != 0.0) and v.nx != v.nz:
        raise ValueError("rotation requires nx == nz")
    values = v.values
    if phi != 0.0:
        alpha, beta = _shear_coeffs(phi)
        values = _sheared(values, 2, 0, -alpha)
        values = _sheared(values, 0, 2, -beta)
        values = _sheared(values, 2, 0, -alpha)
    values = _rot90_xz(values, -k)
    return PotentialVolume(values, v.pitch)


# ---------------------------------------------------------------------------
# slice binning
# ---------------------------------------------------------------------------

def bin_slices(v: PotentialVolume, n_b: int) -> BinnedVolume:
    """Sum every ``n_b`` consecutive slices into one slab.

    If nz is not divisible by n_b the volume is zero-padded in z at the
    far end, which keeps the operator linear and the adjoint pairing
    exact.
    """
    if n_b <= 0:
        raise ValueError("binning factor must be positive")
    values = v.values
    nz = values.shape[0]
    pad = (-nz) % n_b
    if pad:
        values = np.concatenate(
            [values, np.zeros((pad,) + values.shape[1:], dtype=values.dtype)], axis=0
        )
    n_slabs = values.shape[0] // n_b
    slabs = values.reshape(n_slabs, n_b, *values.shape[1:]).sum(axis=1)
    return BinnedVolume(slabs, v.pitch, n_b)


def bin_adjoint(vb: BinnedVolume, n_b: int, nz: int) -> PotentialVolume:
    """Adjoint of :func:`bin_slices`: replicate each slab to its slices."""
    if n_b <= 0:
        raise ValueError("binning factor must be positive")
    if n_b != vb.n_b:
        raise ValueError("binning factor does not match the binned volume")
    replicated = np.repeat(vb.values, n_b, axis=0)
    if nz > replicated.shape[0]:
        raise ValueError("target nz exceeds the binned extent")
    return PotentialVolume(replicated[:nz].copy(), vb.pitch)


def transmittance(slab: np.ndarray, params: InteractionParams, grid: GridSpec) -> WaveField:
    """Per-slab phase screen t = exp(i sigma W); |t| = 1 for real W."""
    slab = np.asarray(slab)
    _require_finite(slab, "slab")
    return WaveField(grid, np.exp(1j * params.sigma * slab))


# ---------------------------------------------------------------------------
# raw + JSON volume file format (shared, bit-exact)
# ---------------------------------------------------------------------------

def volume_sidecar_path(raw_path: str | Path) -> Path:
    return Path(raw_path).with_suffix(".json")


def write_volume(v: PotentialVolume, raw_path: str | Path, units: str = "V*A") -> None:
    """Write little-endian float32 raw data (x fastest) plus JSON sidecar."""
    raw_path = Path(raw_path)
    data = np.ascontiguousarray(np.real(v.values), dtype="<f4")
    raw_path.write_bytes(data.tobytes())
    meta = {
        "nx": v.nx,
        "ny": v.ny,
        "nz": v.nz,
        "pitch_angstrom": v.pitch,
        "units": units,
    }
    volume_sidecar_path(raw_path).write_text(json.dumps(meta, indent=2) + "\n")


def read_volume(raw_path: str | Path) -> PotentialVolume:
    """Read a raw+JSON volume, validating the byte count."""
    raw_path = Path(raw_path)
    meta = json.loads(volume_sidecar_path(raw_path).read_text())
    nx, ny, nz = int(meta["nx"]), int(meta["ny"]), int(meta["nz"])
    blob = raw_path.read_bytes()
    expected = 4 * nx * ny * nz
    if len(blob) != expected:
        raise ValueError(
            f"volume file has {len(blob)} bytes, expected {expected} for "
            f"{nx}x{ny}x{nz} float32"
        )
    values = np.frombuffer(blob, dtype="<f4").reshape(nz, ny, nx).astype(np.float64)
    return PotentialVolume(values, float(meta["pitch_angstrom"]))
