import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fsgsim.polarization import (CHANNELS, LCP, H, JonesVector, M45, NormalizationError, P45, RCP, V,
                                 AnalyzerChannel, analyzer_fractions, analyzer_split, channel_probabilities,
                                 hwp_matrix, hwp_rotate, malus_fraction, parse_polarization, route_photons,
                                 single_photon_route, state_for)
from fsgsim.rng import stream

angles = st.floats(-2 * math.pi, 2 * math.pi, allow_nan=False)
states = st.builds(JonesVector.elliptical, angles, st.floats(-math.pi / 4, math.pi / 4))
powers = st.floats(0, 1.0, allow_nan=False, allow_subnormal=False)


def split_list(p, s):
    d = analyzer_split(p, s)
    return [d[c] for c in CHANNELS]


def test_malus_examples():
    assert malus_fraction(H, H) == 1.0
    assert malus_fraction(H, V) == 0.0
    assert malus_fraction(H, P45) == pytest.approx(math.cos(math.pi / 4) ** 2, abs=1e-15)


def test_malus_rejects_unnormalized():
    with pytest.raises(NormalizationError):
        malus_fraction(JonesVector(1, 1), H)


def _close(a: JonesVector, b: JonesVector) -> bool:
    # equal up to a global phase
    return abs(abs(a.inner(b)) - 1) < 1e-12


def test_hwp_examples():
    assert _close(hwp_rotate(H, math.radians(22.5)), P45)
    assert _close(hwp_rotate(H, 0.0), H)
    # a half-wave plate is an involution; a 90 degree rotation needs the plate at 45 degrees
    oracle = hwp_matrix(math.radians(22.5)) @ hwp_matrix(math.radians(22.5))
    twice = hwp_rotate(hwp_rotate(H, math.radians(22.5)), math.radians(22.5))
    assert np.allclose(oracle, np.eye(2))
    assert _close(twice, H)
    assert _close(hwp_rotate(H, math.radians(45)), V)


def test_split_examples():
    assert split_list(1.0, H) == pytest.approx([0.5, 0.0, 0.25, 0.25], abs=1e-15)
    assert split_list(1.0, RCP) == pytest.approx([0.25] * 4, abs=1e-15)
    assert split_list(1.0, P45) == pytest.approx([0.25, 0.25, 0.5, 0.0], abs=1e-15)


def test_split_matches_malus_oracle():
    for s in (H, V, P45, M45, RCP, LCP, JonesVector.linear(0.3)):
        expect = [0.5 * malus_fraction(s, c.axis) for c in CHANNELS]
        assert split_list(1.0, s) == pytest.approx(expect, abs=1e-15)


@given(powers, states)
def test_split_conserves_energy_exactly(p, s):
    assert math.fsum(split_list(p, s)) == p


@given(powers, st.sampled_from(CHANNELS))
def test_orthogonal_channel_exactly_dark(p, c):
    out = analyzer_split(p, c.axis)
    assert out[c.orthogonal] == 0.0


@given(st.floats(0, 10, allow_nan=False), powers, states)
def test_split_linear_in_power(alpha, p, s):
    # the smaller share of each pair is a remainder, so compare on the scale of the total
    scaled = split_list(alpha * p, s)
    assert scaled == pytest.approx([alpha * x for x in split_list(p, s)], rel=1e-12, abs=4e-16 * alpha * p)


@given(states)
def test_vectorised_fractions_agree(s):
    assert analyzer_fractions(np.array([[s.h, s.v]]))[0] == pytest.approx(split_list(1.0, s), abs=1e-15)


def test_photon_routing_frequencies():
    n = 1_000_000
    for s in (H, P45, RCP):
        probs = channel_probabilities(s)
        got = np.bincount(route_photons(np.tile(probs, (n, 1)), stream(11, 1)), minlength=4) / n
        sigma = np.sqrt(probs * (1 - probs) / n)
        assert np.all(np.abs(got - probs) <= 3 * sigma + 1e-15), (s, got, probs)


def test_single_photon_route_never_orthogonal():
    rng = stream(5)
    seen = {single_photon_route(P45, rng) for _ in range(5000)}
    assert AnalyzerChannel.M45 not in seen
    assert seen == {AnalyzerChannel.H, AnalyzerChannel.V, AnalyzerChannel.P45}


def test_bb84_encoding():
    for basis in (0, 1):
        for bit in (0, 1):
            s = state_for(basis, bit)
            c = AnalyzerChannel.from_basis_bit(basis, bit)
            assert malus_fraction(s, c.axis) == pytest.approx(1.0)
            assert c.basis == basis and c.bit == bit


def test_parse_polarization():
    assert parse_polarization("RCP") == RCP
    assert parse_polarization([1, 0, 0, 0]) == H
    with pytest.raises(ValueError):
        parse_polarization("diagonal")
    with pytest.raises(ValueError):
        parse_polarization([1, 0, 1, 0])
