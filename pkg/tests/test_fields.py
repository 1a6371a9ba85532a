"""Wave-field arithmetic: FFT contract, propagation, transfer function."""

import numpy as np
import pytest

from phasetomo import (
    ConfigurationError,
    GridSpec,
    TransferFunction,
    WaveField,
    apply_ctf,
    apply_ctf_adjoint,
    band_limit,
    forward_fft,
    inverse_fft,
    propagate,
)

LAMBDA_300KV = 0.0196875  # Angstrom


def _grid(nx=8, ny=8, pitch=0.5, wavelength=LAMBDA_300KV):
    return GridSpec(nx, ny, pitch, wavelength)


def _random_field(grid, seed=0):
    rng = np.random.default_rng(seed)
    return WaveField(grid, rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape))


def test_grid_validation():
    with pytest.raises(ConfigurationError):
        GridSpec(1, 8, 0.5, LAMBDA_300KV)
    with pytest.raises(ConfigurationError):
        GridSpec(8, 8, -0.5, LAMBDA_300KV)
    with pytest.raises(ConfigurationError):
        GridSpec(8, 8, 0.5, 0.0)


def test_grid_frequency_range():
    grid = _grid(16, 16, 0.5)
    qy, qx = grid.frequency_grids()
    assert np.max(np.abs(qx)) == pytest.approx(1.0 / (2 * 0.5))
    assert grid.nyquist == pytest.approx(1.0)


def test_fft_constant_field_dc_only():
    grid = _grid(4, 4)
    spectrum = forward_fft(WaveField(grid, np.ones((4, 4))))
    assert spectrum[0, 0] == pytest.approx(4.0)  # nx*ny/sqrt(nx*ny)
    off_dc = spectrum.copy()
    off_dc[0, 0] = 0.0
    assert np.max(np.abs(off_dc)) < 1e-14


def test_fft_delta_is_flat():
    grid = _grid(8, 8)
    values = np.zeros((8, 8))
    values[0, 0] = 1.0
    spectrum = forward_fft(WaveField(grid, values))
    mags = np.abs(spectrum)
    assert np.allclose(mags, mags[0, 0], rtol=1e-13)


def test_fft_parseval_and_roundtrip():
    grid = _grid()
    f = _random_field(grid, 1)
    spectrum = forward_fft(f)
    assert np.sum(np.abs(f.values) ** 2) == pytest.approx(
        np.sum(np.abs(spectrum) ** 2), rel=1e-10
    )
    back = inverse_fft(spectrum, grid)
    assert np.max(np.abs(back.values - f.values)) < 1e-12 * np.max(np.abs(f.values))


def test_fft_rejects_non_finite():
    grid = _grid()
    values = np.ones(grid.shape, dtype=complex)
    values[3, 3] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        forward_fft(WaveField(grid, values))


def test_propagate_zero_distance_is_identity():
    grid = _grid()
    f = _random_field(grid, 2)
    out = propagate(f, 0.0)
    assert np.allclose(out.values, f.values, atol=1e-12)


def test_propagate_inverse_pair():
    grid = _grid()
    f = _random_field(grid, 3)
    out = propagate(propagate(f, 123.4), -123.4)
    assert np.max(np.abs(out.values - f.values)) < 1e-10 * np.max(np.abs(f.values))


def test_propagate_plane_wave_phase():
    grid = _grid()
    f = WaveField.plane_wave(grid)
    for dz in (17.0, -350.0, 1e4):
        out = propagate(f, dz)
        expected = np.exp(2j * np.pi * dz / grid.wavelength)
        assert np.allclose(out.values, expected, atol=1e-9)


def test_propagate_energy_conservation():
    grid = GridSpec(64, 64, 0.5, LAMBDA_300KV)
    f = _random_field(grid, 4)  # whole grid sits far below 1/lambda
    for dz in (1.0, -4321.0, 1e4):
        out = propagate(f, dz)
        assert out.power() == pytest.approx(f.power(), rel=1e-9)


def test_propagate_group_property():
    grid = GridSpec(64, 64, 0.5, LAMBDA_300KV)
    f = _random_field(grid, 5)
    a, b = 321.5, -77.25
    lhs = propagate(propagate(f, a), b)
    rhs = propagate(f, a + b)
    assert np.max(np.abs(lhs.values - rhs.values)) < 1e-9 * np.max(np.abs(rhs.values))


def test_propagate_adjoint_is_negative_distance():
    grid = _grid(16, 16)
    x = _random_field(grid, 6)
    y = _random_field(grid, 7)
    dz = 250.0
    lhs = np.vdot(y.values, propagate(x, dz).values)
    rhs = np.vdot(propagate(y, -dz).values, x.values)
    bound = 1e-9 * np.linalg.norm(x.values) * np.linalg.norm(y.values)
    assert abs(lhs - rhs) <= bound


def test_transfer_function_validation():
    grid = _grid()
    with pytest.raises(ValueError, match="exceed"):
        TransferFunction(grid, 2.0 * np.ones(grid.shape))
    h = TransferFunction.identity(grid, aperture_qmax=0.5)
    assert np.all(np.abs(h.values[grid.q_squared() > 0.25]) == 0)


def test_apply_ctf_identity():
    grid = _grid()
    f = _random_field(grid, 8)
    out = apply_ctf(f, TransferFunction.identity(grid))
    assert np.allclose(out.values, f.values, atol=1e-12)


def test_apply_ctf_aperture_kills_out_of_band_tone():
    grid = _grid(16, 16)
    qy, qx = grid.frequency_grids()
    # pure tone at the highest x frequency, well beyond a 0.3 cutoff
    x = np.arange(16)
    tone = np.exp(2j * np.pi * 0.5 * x)[None, :] * np.ones((16, 1))
    f = WaveField(grid, tone)
    h = TransferFunction.identity(grid, aperture_qmax=0.3)
    out = apply_ctf(f, h)
    assert np.max(np.abs(out.values)) < 1e-12


def test_apply_ctf_adjoint_identity():
    rng = np.random.default_rng(9)
    grid = _grid(16, 16)
    mag = rng.uniform(0, 1, grid.shape)
    phase = rng.uniform(0, 2 * np.pi, grid.shape)
    h = TransferFunction(grid, mag * np.exp(1j * phase))
    x = _random_field(grid, 10)
    y = _random_field(grid, 11)
    lhs = np.vdot(y.values, apply_ctf(x, h).values)
    rhs = np.vdot(apply_ctf_adjoint(y, h).values, x.values)
    bound = 1e-10 * np.linalg.norm(x.values) * np.linalg.norm(y.values)
    assert abs(lhs - rhs) <= bound


def test_apply_ctf_grid_mismatch():
    f = _random_field(_grid(8, 8), 12)
    h = TransferFunction.identity(_grid(16, 16))
    with pytest.raises(ValueError, match="grid"):
        apply_ctf(f, h)


def test_band_limit_removes_high_frequencies():
    grid = _grid(12, 12)
    f = _random_field(grid, 13)
    out = band_limit(f, fraction=2.0 / 3.0)
    spectrum = forward_fft(out)
    outside = grid.q_squared() > (2.0 / 3.0 * grid.nyquist) ** 2
    assert np.max(np.abs(spectrum[outside])) < 1e-13
    # projection: idempotent
    again = band_limit(out, fraction=2.0 / 3.0)
    assert np.allclose(again.values, out.values, atol=1e-12)
