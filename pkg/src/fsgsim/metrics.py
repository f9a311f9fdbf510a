"""Control matrices, timing histograms, FWHM estimation and the detectability report."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import apd, rng as rngmod
from .apd import DetectorState
from .fsg import ControlDiagram, FsgParams, respond
from .polarization import CHANNELS
from .timeline import TimePs, ns, us

DEFAULT_TRIALS = 10_000
JITTER_BIN = 20
DEADTIME_BIN = ns(10)
MIN_FWHM_EVENTS = 10_000


class EstimationError(ValueError):
    pass


# -- control matrix ------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSource:
    """Stand-in for Bob' during alignment: a pulse generator driving the FSG trigger."""
    rate: float = 10e3
    pulse_width: TimePs = ns(15)

    @property
    def period(self) -> TimePs:
        return int(round(1e12 / self.rate))

    def triggers(self, n: int, t0: TimePs = 0) -> np.ndarray:
        # The FSG fires on the leading edge; the pulse width only has to stay
        # below the trigger period.
        if self.pulse_width >= self.period:
            raise ValueError("synthetic pulses overlap")
        return t0 + np.arange(n, dtype=np.int64) * self.period


@dataclass
class ControlMatrix:
    """``p[target, detector]``: fraction of trials in which the detector clicked."""
    p: np.ndarray
    n_trials: int
    counts: np.ndarray

    def __post_init__(self):
        if np.any(self.p < 0) or np.any(self.p > 1):
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.p).copy()

    @property
    def off_diagonal(self) -> np.ndarray:
        return self.p[~np.eye(4, dtype=bool)]

    def radius(self, z: float = 1.0) -> np.ndarray:
        """Binomial confidence radius of every cell."""
        return z * np.sqrt(np.maximum(self.p * (1 - self.p), 0.25 / self.n_trials) / self.n_trials)

    def rows(self):
        for t in range(4):
            for d in range(4):
                yield CHANNELS[t].name, CHANNELS[d].name, float(self.p[t, d]), int(self.counts[t, d])


def trial_counts(bank, fsg: FsgParams, diagram: ControlDiagram, target: int, n_trials: int,
                 rngs, source: SyntheticSource = SyntheticSource()) -> np.ndarray:
    """Per-detector number of trials (out of ``n_trials``) with at least one click."""
    trig = source.triggers(n_trials, t0=us(30))
    out = respond((trig, np.full(n_trials, target)), diagram, fsg)
    t0, t1 = out.span
    states = [DetectorState.armed(t0)] * 4
    run = apd.bank_step(bank, states, out.waveform, t0, t1, rngs, fsg.output_transmittance)
    # A click belongs to the trial whose trigger precedes it.
    k = np.searchsorted(out.records.trigger_times, run.times, side="right") - 1
    counts = np.zeros(4, dtype=np.int64)
    for d in range(4):
        sel = (k >= 0) & (run.detectors == d)
        counts[d] = len(np.unique(k[sel]))
    return counts


def measure_control_matrix(bank, fsg: FsgParams, diagram: ControlDiagram, n_trials: int = DEFAULT_TRIALS,
                           seed: int = 0, source: SyntheticSource = SyntheticSource(),
                           chunk: int = 50_000) -> ControlMatrix:
    """Fire ``n_trials`` faked states per target at the source rate and tally clicks."""
    counts = np.zeros((4, 4), dtype=np.int64)
    for target in range(4):
        rngs = [rngmod.stream(seed, rngmod.MATRIX, target, d) for d in range(4)]
        done = 0
        while done < n_trials:
            m = min(chunk, n_trials - done)
            counts[target] += trial_counts(bank, fsg, diagram, target, m, rngs, source)
            done += m
    return ControlMatrix(counts / n_trials, n_trials, counts)


def gap_curve(params, gaps, trials: int, seed: int = 0, power: float | None = None,
              detector: int = 0) -> np.ndarray:
    """Measured probability of a gap-recovery click after each gap length in ``gaps``.

    The detector sits under CW ``power`` (default 5 x p_blind); each trial
    switches the light off for the gap and counts a click within 1 us of the
    light returning.
    """
    from .timeline import OpticalWaveform

    power = 5 * params.p_blind if power is None else power
    out = np.zeros(len(gaps))
    for g, gap in enumerate(gaps):
        gap = int(gap)
        # Spacing leaves room for the deadtime after a click before the next gap.
        spacing = gap + params.deadtime + us(2)
        starts = us(5) + np.arange(trials, dtype=np.int64) * spacing
        t_end = int(starts[-1]) + spacing
        on_start = np.concatenate([[0], starts + gap]) if gap else np.array([0])
        on_end = np.concatenate([starts, [t_end]]) if gap else np.array([t_end])
        w = OpticalWaveform(on_start, on_end, np.full(len(on_start), power), np.tile([1, 0], (len(on_start), 1)))
        t_click = apd.step(DetectorState.blinded(params, power), w, 0, t_end,
                           rngmod.stream(seed, rngmod.SWEEP, 1000 + detector, g), params)[1]
        times = np.array([c.time for c in t_click], dtype=np.int64)
        # Jitter can put a click slightly before its edge.
        k = np.searchsorted(starts + gap, times + ns(1), side="right") - 1
        ok = (k >= 0) & (np.abs(times - (starts[np.maximum(k, 0)] + gap)) < us(1))
        out[g] = len(np.unique(k[ok])) / trials
    return out


# -- histograms ----------------------------------------------------------------------

@dataclass
class Histogram:
    """Counts in bins of ``bin_width`` centred on ``lo + k * bin_width``."""
    bin_width: TimePs
    lo: TimePs
    counts: np.ndarray

    def __post_init__(self):
        if self.bin_width <= 0:
            raise ValueError("bin_width must be > 0")
        if np.any(self.counts < 0):
            raise ValueError("counts must be >= 0")

    @property
    def centers(self) -> np.ndarray:
        return self.lo + np.arange(len(self.counts), dtype=np.int64) * self.bin_width

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def range(self) -> tuple[TimePs, TimePs]:
        half = self.bin_width // 2
        return int(self.lo - half), int(self.lo + len(self.counts) * self.bin_width - half)

    @classmethod
    def of(cls, values: np.ndarray, bin_width: TimePs, lo: TimePs, hi: TimePs) -> Histogram:
        """Histogram of integer ``values`` with bins centred on multiples of ``bin_width``."""
        c_lo = int(math.floor(lo / bin_width)) * bin_width
        c_hi = int(math.ceil(hi / bin_width)) * bin_width
        n = (c_hi - c_lo) // bin_width + 1
        v = np.asarray(values, dtype=np.int64)
        # Bin k covers [c - w/2, c + w/2) around its centre c.
        idx = np.floor((v - c_lo + bin_width / 2) / bin_width).astype(np.int64)
        idx = idx[(idx >= 0) & (idx < n)]
        return cls(bin_width, c_lo, np.bincount(idx, minlength=n).astype(np.int64))

    def __add__(self, other: Histogram) -> Histogram:
        if (self.bin_width, self.lo, len(self.counts)) != (other.bin_width, other.lo, len(other.counts)):
            raise ValueError("histograms have different binning")
        return Histogram(self.bin_width, self.lo, self.counts + other.counts)

    def rows(self):
        for c, n in zip(self.centers.tolist(), self.counts.tolist()):
            yield c, n


def pair_differences(a: np.ndarray, b: np.ndarray, lo: TimePs, hi: TimePs, chunk: int = 1 << 20) -> np.ndarray:
    """All ``tb - ta`` in ``[lo, hi]`` for sorted time arrays ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    out = []
    for s in range(0, len(b), chunk):
        bb = b[s:s + chunk]
        first = np.searchsorted(a, bb - hi, side="left")
        last = np.searchsorted(a, bb - lo, side="right")
        n = last - first
        if not n.sum():
            continue
        rep_b = np.repeat(bb, n)
        offs = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
        out.append(rep_b - a[np.repeat(first, n) + offs])
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def coincidence_histogram(a_times, a_channels, b_times, b_channels, bin_width: TimePs = JITTER_BIN,
                          window: tuple[TimePs, TimePs] = (-ns(5), ns(5))) -> dict[tuple[int, int], Histogram]:
    """Time-difference histograms ``t_b - t_a`` for all 16 (a-channel, b-channel) pairs."""
    a_times, b_times = np.asarray(a_times, dtype=np.int64), np.asarray(b_times, dtype=np.int64)
    a_channels, b_channels = np.asarray(a_channels), np.asarray(b_channels)
    lo, hi = window
    out = {}
    for ca in range(4):
        ta = a_times[a_channels == ca]
        for cb in range(4):
            tb = b_times[b_channels == cb]
            out[(ca, cb)] = Histogram.of(pair_differences(ta, tb, lo, hi), bin_width, lo, hi)
    return out


def combined(hists, pairs=None) -> Histogram:
    keys = list(hists) if pairs is None else list(pairs)
    total = hists[keys[0]]
    for k in keys[1:]:
        total = total + hists[k]
    return total


def estimate_delay(hists: dict[tuple[int, int], Histogram]) -> TimePs:
    """Centre of the tallest bin of the summed same-channel histograms."""
    h = combined(hists, [(c, c) for c in range(4)])
    if not h.total:
        raise EstimationError("no coincidences")
    return int(h.centers[int(np.argmax(h.counts))])


def _crossing(x: np.ndarray, y: np.ndarray, level: float) -> float:
    """Where a local fit of the flank crosses ``level`` (fallback: two-point interpolation).

    The fit is quadratic in log(counts), weighted for Poisson noise.
    """
    if len(x) >= 4 and np.all(y > 0):
        c = np.polyfit(x - x.mean(), np.log(y), 2, w=np.sqrt(y))
        c[-1] -= math.log(level)
        roots = np.roots(c)
        roots = roots[np.isreal(roots)].real + x.mean()
        roots = roots[(roots >= x.min()) & (roots <= x.max())]
        if len(roots) == 1:
            return float(roots[0])
    i = int(np.argmin(np.abs(y - level)))
    j = i + 1 if i + 1 < len(y) and (y[i] - level) * (y[i + 1] - level) <= 0 else max(i - 1, 0)
    if y[j] == y[i]:
        return float(x[i])
    return float(x[i] + (level - y[i]) * (x[j] - x[i]) / (y[j] - y[i]))


def _peak_height(centers: np.ndarray, counts: np.ndarray, k: int) -> float:
    top = counts >= 0.4 * counts[k]
    lo, hi = k, k
    while lo > 0 and top[lo - 1]:
        lo -= 1
    while hi < len(counts) - 1 and top[hi + 1]:
        hi += 1
    if hi - lo < 2:
        return float(counts[k])
    x = centers[lo:hi + 1].astype(float)
    y = np.log(np.maximum(counts[lo:hi + 1], 1))
    a, b, c = np.polyfit(x - x.mean(), y, 2)
    if a >= 0:  # flat top: mean level
        return float(np.mean(counts[lo:hi + 1]))
    return float(math.exp(c - b * b / (4 * a)))


def fwhm(h: Histogram, min_events: int = MIN_FWHM_EVENTS) -> float:
    """Full width at half maximum of a unimodal histogram, in ps.

    The peak height comes from a log-parabola fit over the top of the peak;
    each half-maximum crossing from a local quadratic fit of the flank.
    """
    if h.total < min_events:
        raise EstimationError(f"need at least {min_events} events, got {h.total}")
    y = h.counts.astype(float)
    x = h.centers.astype(float)
    k = int(np.argmax(y))
    half = 0.5 * _peak_height(x, y, k)
    # Unimodality: after light smoothing the region above half maximum must be
    # a single contiguous run.
    smooth = np.convolve(y, np.ones(5) / 5, mode="same")
    above = np.flatnonzero(smooth >= half)
    if above.size == 0 or np.any(np.diff(above) > 1):
        raise EstimationError("histogram is not unimodal")
    lo_i, hi_i = max(int(above[0]) - 2, 0), min(int(above[-1]) + 2, len(y) - 1)
    raw = lo_i + np.flatnonzero(y[lo_i:hi_i + 1] >= half)
    li, ri = int(raw[0]), int(raw[-1])
    if li == 0 or ri == len(y) - 1:
        raise EstimationError("peak is not contained in the histogram range")

    peak = 2 * half

    def flank(i0: int, outward: int) -> float:
        # Band of the flank between 10% and 90% of the peak around the crossing.
        a = i0
        while 0 <= a + outward < len(y) and y[a + outward] >= 0.1 * peak:
            a += outward
        b = i0
        while 0 <= b - outward < len(y) and y[b - outward] <= 0.9 * peak:
            b -= outward
        lo, hi = sorted((a, b))
        idx = np.arange(lo, hi + 1)
        if len(idx) < 4:
            idx = np.array(sorted({i0, i0 + outward}))
        return _crossing(x[idx], y[idx], half)

    left = flank(li, -1)
    right = flank(ri, 1)
    return right - left


# -- deadtimes -------------------------------------------------------------------------

def deadtime_histograms(times, detectors, bin_width: TimePs = DEADTIME_BIN,
                        max_interval: TimePs = us(5)) -> dict[tuple[int, int], Histogram]:
    """Successive-click intervals: same-detector for (d, d), stream-adjacent for (a, b)."""
    times = np.asarray(times, dtype=np.int64)
    detectors = np.asarray(detectors)
    out = {}
    for (a, b), dt in click_intervals(times, detectors).items():
        out[(a, b)] = Histogram.of(dt, bin_width, 0, max_interval)
    return out


def click_intervals(times: np.ndarray, detectors: np.ndarray) -> dict[tuple[int, int], np.ndarray]:
    out = {}
    for d in range(4):
        out[(d, d)] = np.diff(times[detectors == d])
    dt = np.diff(times)
    a, b = detectors[:-1], detectors[1:]
    for ca in range(4):
        for cb in range(4):
            if ca != cb:
                out[(ca, cb)] = dt[(a == ca) & (b == cb)]
    return out


def interval_minima(times, detectors) -> np.ndarray:
    """4x4 minimum intervals (ps); -1 where a combination never occurs."""
    m = np.full((4, 4), -1, dtype=np.int64)
    for (a, b), dt in click_intervals(np.asarray(times, dtype=np.int64), np.asarray(detectors)).items():
        if len(dt):
            m[a, b] = int(dt.min())
    return m


# -- detectability ---------------------------------------------------------------------

def jitter_histogram(run, bin_width: TimePs = JITTER_BIN, half_window: TimePs = ns(5)) -> Histogram:
    """Sum of the 16 Alice-Bob coincidence peaks, centred on the expected delay."""
    d = run.expected_delay
    hists = coincidence_histogram(run.alice.times, run.alice.channels, run.bob.times - d, run.bob.detectors,
                                  bin_width, (-half_window, half_window))
    return combined(hists)


def measured_delay(run, bin_width: TimePs = 1, search: TimePs = ns(40)) -> TimePs:
    """Cross-correlation peak of Alice emissions against Bob clicks."""
    base = run.config.channel_delay
    hists = coincidence_histogram(run.alice.times, run.alice.channels, run.bob.times, run.bob.detectors,
                                  bin_width, (base - search, base + run_insertion(run) + search))
    return estimate_delay(hists)


def run_insertion(run) -> TimePs:
    return run.fsg.insertion_delay + max(run.fsg.trims) if run.fsg is not None else 0


def detectability_report(run, baseline=None, bank=None) -> dict:
    """Raw observables an alert Bob could watch, plus simple intrusion flags."""
    bank = bank or run.bank
    currents = [float(s.mean_photocurrent) for s in run.bob_states]
    ceilings = [float(apd.monitor_threshold(p)) for p in bank]
    delay = measured_delay(run) - run.config.channel_delay
    n = len(run.bob.times)
    share = [float(np.mean(run.bob.detectors == d)) if n else 0.0 for d in range(4)]
    try:
        width = fwhm(jitter_histogram(run))
    except EstimationError:
        width = None
    report = {
        "mean_photocurrent_A": currents,
        "photocurrent_ceiling_A": ceilings,
        "insertion_delay_ps": int(delay),
        "jitter_fwhm_ps": width,
        "double_click_count": int(run.stats["double_click_count"]),
        "bob_click_rate_hz": float(run.stats["bob_click_rate_hz"]),
        "click_share": share,
        "flashback": "not simulated",
    }
    flags = {
        "photocurrent": any(c > m for c, m in zip(currents, ceilings)),
        "insertion_delay": abs(delay) > ns(1),
    }
    if baseline is not None:
        base_rate = baseline.stats["bob_click_rate_hz"]
        ratio = report["bob_click_rate_hz"] / base_rate if base_rate else float("nan")
        try:
            base_width = fwhm(jitter_histogram(baseline))
        except EstimationError:
            base_width = None
        report["baseline_jitter_fwhm_ps"] = base_width
        report["rate_ratio"] = ratio
        flags["rate"] = not abs(ratio - 1) <= 0.01
        flags["jitter"] = (width is not None and base_width is not None and width > 1.01 * base_width)
    report["flags"] = flags
    report["intrusion"] = any(flags.values())
    return report
