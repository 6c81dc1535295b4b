import numpy as np
import oracles


def test_frozen_values_match_recomputation():
    f = oracles.FROZEN
    assert abs(oracles.mean_inv_b1() - f["mean_inv_b1"]) < 1e-15
    assert abs(oracles.harmonic_B() - f["harmonic_B"]) < 1e-15
    assert abs(oracles.mean_b2() - f["mean_b2"]) < 1e-15
    assert abs(oracles.mean_b2() / oracles.mean_inv_b1() - f["pure_fp_diffusion"]) < 1e-14
    assert np.allclose(oracles.energy_sin(), f["energy_sin"], rtol=1e-14)


def test_frozen_values_are_the_closed_forms():
    f = oracles.FROZEN
    assert abs(f["mean_inv_b1"] - 1 / np.sqrt(3)) < 1e-15
    assert abs(f["harmonic_B"] - np.sqrt(3)) < 1e-15
    assert abs(f["energy_sin"][1] - np.pi**2 / 2) < 1e-14


def test_chi_oracle_has_zero_mean_and_right_slope():
    y = np.arange(64) / 64
    chi = oracles.chi_harmonic(y)
    assert abs(chi.mean()) < 2e-3  # node mean of a smooth zero-integral function
    d = np.gradient(chi, y)[10]
    assert abs(d - (1 - np.sqrt(3) / (2 + np.cos(2 * np.pi * y[10])))) < 1e-2
