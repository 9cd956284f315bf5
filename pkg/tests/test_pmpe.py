import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shapetok.pmpe import (PEConfig, embed_points, gamma, gamma_pm, gamma_prime, modulated_phases,
                           similarity_profile)

CFG = PEConfig(20)


def test_gamma_at_zero_alternates():
    np.testing.assert_allclose(gamma(0.0, CFG), np.tile([1.0, 0.0], 10), atol=1e-15)


def test_gamma_spot_values():
    assert gamma(1.0, CFG)[1] == pytest.approx(0.0, abs=1e-12)         # i=2: sin(2 pi)
    assert gamma(0.25, CFG)[0] == pytest.approx(np.cos(np.pi / 4))     # i=1


def test_gamma_prime_last_channel():
    assert modulated_phases(CFG)[-1] == pytest.approx(4 * np.pi)
    assert gamma_prime(1.0, CFG)[-1] == pytest.approx(1.0)
    assert gamma_prime(0.0, CFG)[-1] == pytest.approx(0.0, abs=1e-12)


def test_gamma_prime_paper_scale_channel():
    big = PEConfig(128)
    assert modulated_phases(big)[63] == pytest.approx(9 * np.pi)
    assert gamma_prime(0.0, big)[63] == pytest.approx(0.0, abs=1e-12)


def test_gamma_pm_is_sum_and_has_3L_channels(rng):
    p = rng.uniform(-1, 1, size=(7, 3))
    enc = gamma_pm(p, CFG)
    assert enc.shape == (7, 60)
    for ax in range(3):
        np.testing.assert_allclose(enc[:, ax * 20:(ax + 1) * 20], gamma(p[:, ax], CFG) + gamma_prime(p[:, ax], CFG))
    assert embed_points(p, CFG).shape == (7, 63)


def test_collision_of_gamma_is_broken_by_phase_modulation():
    # gamma has period 2 in every channel; gamma' (frequency pi/2) has period 4,
    # so points 2 apart collide under gamma but not under gamma_pm. (Points 4
    # apart collide under both.)
    a, b = np.array([[0.3, -0.2, 0.1]]), np.array([[2.3, -0.2, 0.1]])
    np.testing.assert_allclose(gamma(a[:, 0], CFG), gamma(b[:, 0], CFG), atol=1e-12)
    assert np.abs(gamma_pm(a, CFG) - gamma_pm(b, CFG)).max() > 0.5


@settings(max_examples=30, deadline=None)
@given(p=st.floats(-1, 1), L=st.sampled_from([10, 20, 40, 128]))
def test_channel_ranges(p, L):
    cfg = PEConfig(L)
    assert np.all(np.abs(gamma(p, cfg)) <= 1) and np.all(np.abs(gamma_prime(p, cfg)) <= 1)
    assert np.all(np.abs(gamma_pm(np.array([p, p, p]), cfg)) <= 2)


@pytest.mark.parametrize("L", [10, 20, 128])
def test_modulated_phases_are_distinct(L):
    ph = np.mod(modulated_phases(PEConfig(L)), 2 * np.pi)
    assert len(np.unique(ph.round(9))) == L


def test_config_invariants():
    for bad in (dict(L=3), dict(L=0), dict(L=4), dict(L=20, beta=0.0)):
        with pytest.raises(ValueError):
            PEConfig(**bad)
    assert PEConfig.for_width(64).L == 10


def test_similarity_profiles():
    g = similarity_profile(lambda p: gamma(p, CFG), 256).correlation
    gp = similarity_profile(lambda p: gamma_prime(p, CFG), 256).correlation
    gpm = similarity_profile(lambda p: gamma(p, CFG) + gamma_prime(p, CFG), 256).correlation
    assert gp >= 0.9
    assert gpm > g


def test_constant_encoder_is_degenerate():
    prof = similarity_profile(lambda p: np.ones((len(p), 4)), 32)
    assert prof.correlation == 0 and prof.degenerate
