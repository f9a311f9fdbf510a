import math

import numpy as np
import pytest

from fsgsim import apd
from fsgsim.fsg import ControlDiagram, DiagramKind, FsgParams
from fsgsim.metrics import (ControlMatrix, EstimationError, Histogram, SyntheticSource, coincidence_histogram,
                            combined, deadtime_histograms, estimate_delay, fwhm, gap_curve, interval_minima,
                            measure_control_matrix, pair_differences)
from fsgsim.rng import stream
from fsgsim.timeline import ns, us

FWHM_PER_SIGMA = 2 * math.sqrt(2 * math.log(2))


def gaussian_hist(sigma, n, seed, bin_width=20):
    x = np.rint(stream(seed).normal(0, sigma, n)).astype(np.int64)
    return Histogram.of(x, bin_width, -ns(5), ns(5))


def random_stream(n, seed, rate_gap=us(1)):
    rg = stream(seed)
    t = np.cumsum(rg.integers(ns(100), rate_gap * 3, n)).astype(np.int64)
    return t, rg.integers(0, 4, n)


# -- histograms ----------------------------------------------------------------------

def test_histogram_bins_centred_on_multiples():
    h = Histogram.of(np.array([-11, -10, -9, 0, 9, 10, 11]), 20, -20, 20)
    assert h.centers.tolist() == [-20, 0, 20]
    # half-open bins: 10 belongs to the bin centred on 20
    assert h.counts.tolist() == [1, 4, 2]
    assert h.total == 7


def test_pair_differences_brute_force():
    rg = stream(1)
    a = np.sort(rg.integers(0, 10_000, 300))
    b = np.sort(rg.integers(0, 10_000, 300))
    brute = sorted(int(y - x) for x in a for y in b if -500 <= y - x <= 700)
    assert sorted(pair_differences(a, b, -500, 700).tolist()) == brute


def test_identical_streams_delta_at_zero():
    t, ch = random_stream(5000, 2)
    h = combined(coincidence_histogram(t, ch, t, ch, 20, (-ns(5), ns(5))), [(c, c) for c in range(4)])
    assert h.counts[h.centers == 0][0] == 5000
    assert h.total == 5000


def test_shift_moves_every_peak():
    t, ch = random_stream(5000, 3)
    hists = coincidence_histogram(t, ch, t + ns(212), ch, 1, (ns(200), ns(220)))
    assert estimate_delay(hists) == ns(212)
    for c in range(4):
        h = hists[(c, c)]
        assert h.centers[int(np.argmax(h.counts))] == ns(212)


def test_gaussian_pairs_give_761_ps():
    # sigma chosen so that 2.3548 sigma = 761 ps
    t, ch = random_stream(200_000, 4)
    jit = np.rint(stream(5).normal(0, 323.2, len(t))).astype(np.int64)
    h = combined(coincidence_histogram(t, ch, t + jit, ch))
    assert fwhm(h) == pytest.approx(FWHM_PER_SIGMA * 323.2, rel=0.02)
    assert FWHM_PER_SIGMA * 323.2 == pytest.approx(761, abs=0.5)


# -- fwhm ------------------------------------------------------------------------------

@pytest.mark.parametrize("n", [10_000, 100_000, 1_000_000])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fwhm_converges(n, seed):
    sigma = 323.2
    bound = 0.05 / math.sqrt(n / 1e4)
    assert fwhm(gaussian_hist(sigma, n, seed)) == pytest.approx(FWHM_PER_SIGMA * sigma, rel=bound)


def test_fwhm_gaussian_at_1e6_within_2_percent():
    sigma = 200.0
    assert fwhm(gaussian_hist(sigma, 1_000_000, 7)) == pytest.approx(FWHM_PER_SIGMA * sigma, rel=0.02)


def test_fwhm_rectangle():
    w, bw = 3000, 20
    x = stream(8).integers(-w // 2, w // 2, 200_000)
    assert abs(fwhm(Histogram.of(x, bw, -ns(5), ns(5))) - w) <= bw


def test_fwhm_quadrature_sum():
    n = 1_000_000
    rg = stream(9)
    x = rg.normal(0, apd.sigma_for_fwhm(761), n) + rg.normal(0, apd.sigma_for_fwhm(166.5), n)
    h = Histogram.of(np.rint(x).astype(np.int64), 20, -ns(5), ns(5))
    assert fwhm(h) == pytest.approx(math.hypot(761, 166.5), rel=0.02)
    assert math.hypot(761, 166.5) == pytest.approx(779, abs=0.5)


def test_fwhm_rejects_sparse_and_bimodal():
    with pytest.raises(EstimationError):
        fwhm(gaussian_hist(300, 500, 1))
    rg = stream(10)
    two = np.rint(np.concatenate([rg.normal(-2000, 200, 50_000), rg.normal(2000, 200, 50_000)])).astype(np.int64)
    with pytest.raises(EstimationError):
        fwhm(Histogram.of(two, 20, -ns(5), ns(5)))


# -- deadtimes -------------------------------------------------------------------------

def test_interval_minima_and_histograms():
    times = np.array([0, ns(100), us(2), us(2) + ns(600), us(5)])
    dets = np.array([0, 1, 0, 2, 0])
    m = interval_minima(times, dets)
    assert m[0, 0] == us(2)
    assert m[0, 1] == ns(100)
    assert m[0, 2] == ns(600)
    assert m[3, 3] == -1
    hists = deadtime_histograms(times, dets)
    assert len(hists) == 16
    assert sum(h.total for k, h in hists.items() if k[0] != k[1]) == len(times) - 1


# -- control matrix --------------------------------------------------------------------

def test_sub_threshold_pulses_give_zero_matrix():
    fsg = FsgParams.from_powers(1e-5, [0.0] * 4, [1e-4] * 4)
    m = measure_control_matrix(apd.default_bank(), fsg, ControlDiagram(DiagramKind.D2), 2000, seed=1)
    assert np.all(m.p == 0)


def test_matrix_invariants():
    fsg = FsgParams.from_powers(1e-5, [0.0] * 4, [3.3e-3] * 4)
    m = measure_control_matrix(apd.default_bank(), fsg, ControlDiagram(DiagramKind.D2), 10_000, seed=2)
    assert isinstance(m, ControlMatrix)
    assert np.all((m.p >= 0) & (m.p <= 1))
    assert np.all(m.radius() <= 0.01)
    assert np.all(m.counts == np.rint(m.p * m.n_trials))


def test_matrix_monotone_in_click_power():
    bank = apd.symmetric_bank()
    n = 4000
    prev = None
    for power in (2.2e-3, 2.4e-3, 2.6e-3, 3.0e-3):
        fsg = FsgParams.from_powers(1e-5, [0.0] * 4, [power] * 4)
        p = measure_control_matrix(bank, fsg, ControlDiagram(DiagramKind.D2), n, seed=3).p
        if prev is not None:
            # independent draws per power level, so allow binomial noise
            assert np.all(p >= prev - 4 * np.sqrt(0.25 / n))
        prev = p


def test_synthetic_source_defaults():
    s = SyntheticSource()
    assert s.period == us(100)
    t = s.triggers(3, t0=us(10))
    assert np.diff(t).tolist() == [us(100)] * 2


def test_gap_curve_matches_closed_form():
    p = apd.default_bank()[0]
    gaps = [ns(400), ns(560), ns(700)]
    n = 4000
    got = gap_curve(p, gaps, n, seed=5)
    want = np.array([apd.gap_click_probability(g, p) for g in gaps])
    assert np.all(np.abs(got - want) <= 4 * np.sqrt(want * (1 - want) / n) + 1e-9)
