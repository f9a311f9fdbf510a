"""Behavioral model of a passively-quenched avalanche photodiode.

The detector is a small state machine driven by a piecewise-constant incident
power. In Geiger mode (ARMED) photons and dark counts arrive as a Poisson
process; sustained power above ``p_blind`` turns it into a linear detector
(BLINDED) that only clicks on bright rising edges, or on the power returning
after a gap that let the bias partially recover (RECOVERING). A bright
pre-pulse pushes the bias further down (DEEP_BLINDED), which raises the
linear-mode thresholds by ``deep_factor`` for a while.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .polarization import AnalyzerChannel, analyzer_fractions
from .timeline import OpticalWaveform, TimePs, ns, piecewise_levels, us

PLANCK = 6.62607015e-34
LIGHT_SPEED = 299_792_458.0
WAVELENGTH = 808e-9
E_PHOTON = PLANCK * LIGHT_SPEED / WAVELENGTH

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

_NEVER = 2 ** 62


class Mode(enum.IntEnum):
    ARMED = 0
    DEAD = 1
    BLINDED = 2
    DEEP_BLINDED = 3
    RECOVERING = 4


class Origin(enum.IntEnum):
    GEIGER = 0
    BRIGHT_PULSE = 1
    GAP_RECOVERY = 2
    DARK = 3


def sigma_for_fwhm(fwhm_ps: float) -> float:
    return fwhm_ps / FWHM_PER_SIGMA


@dataclass(frozen=True)
class DetectorParams:
    """One APD, all quantities in SI units (times in integer ps).

    ``p_never``/``p_always`` are the total incident peak powers bounding the
    linear-mode click ramp of a blinded detector; ``p_deep`` is the incident
    power that pushes it into deep blinding.
    """

    p_blind: float = 2.0e-6
    eta: float = 0.5
    dark_rate: float = 200.0
    r_max: float = 1.0e6
    p_never: float = 1.0e-3
    p_always: float = 1.25e-3
    deep_factor: float = 2.0
    deep_duration: TimePs = ns(300)
    gap_t50: TimePs = ns(560)
    gap_slope: float = 9.0
    tau_recover: TimePs = us(10)
    deadtime: TimePs = us(1)
    jitter_sigma_geiger: float = sigma_for_fwhm(500.0)
    jitter_sigma_linear: float = sigma_for_fwhm(50.0)
    p_deep: float = 0.3e-3
    blind_onset: TimePs = ns(200)
    p_gap_off: float | None = None
    delay: TimePs = 0
    responsivity: float = 10.0
    dark_current: float = 1.0e-9
    avalanche_charge: float = 1.0e-12

    def __post_init__(self):
        if self.p_gap_off is None:
            object.__setattr__(self, "p_gap_off", self.p_blind)
        if not 0 < self.p_never < self.p_always:
            raise ValueError("need 0 < p_never < p_always")
        if not self.p_blind < self.p_never:
            raise ValueError("need p_blind < p_never")
        if self.p_gap_off > self.p_blind:
            raise ValueError("need p_gap_off <= p_blind")
        if self.deep_factor < 1:
            raise ValueError("deep_factor must be >= 1")
        if not 0 <= self.eta <= 1:
            raise ValueError("eta must lie in [0, 1]")
        if self.dark_rate < 0 or self.r_max <= 0:
            raise ValueError("rates must be non-negative (r_max > 0)")
        if self.jitter_sigma_linear < 0 or self.jitter_sigma_geiger < 0:
            raise ValueError("jitter sigmas must be >= 0")
        # Zero jitter everywhere is allowed for noiseless timing checks.
        if self.jitter_sigma_geiger > 0 and not self.jitter_sigma_linear < self.jitter_sigma_geiger:
            raise ValueError("linear-mode jitter must be below single-photon jitter")
        for name in ("deep_duration", "gap_t50", "tau_recover", "deadtime", "blind_onset"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.gap_slope <= 0:
            raise ValueError("gap_slope must be > 0")

    def with_(self, **changes) -> DetectorParams:
        return replace(self, **changes)


@dataclass(frozen=True)
class DetectorState:
    mode: Mode
    mode_since: TimePs
    photocurrent: float = 0.0
    # Internal bookkeeping, advanced only by `step`.
    t: TimePs = 0
    regime: Mode = Mode.ARMED
    dead_until: TimePs = -_NEVER
    bright_since: TimePs | None = None
    gap_start: TimePs = 0
    deep_until: TimePs = -_NEVER
    power: float = 0.0
    charge: float = 0.0
    elapsed: TimePs = 0

    @classmethod
    def armed(cls, t: TimePs = 0) -> DetectorState:
        return cls(Mode.ARMED, t, t=t)

    @classmethod
    def blinded(cls, params: DetectorParams, power: float, t: TimePs = 0) -> DetectorState:
        """Steady state under CW ``power`` >= p_blind, as if blinded long ago."""
        if power < params.p_blind:
            raise ValueError("power below p_blind cannot hold the detector blinded")
        regime = Mode.DEEP_BLINDED if power >= params.p_deep else Mode.BLINDED
        return cls(regime, t, _photocurrent(params, regime, power), t=t, regime=regime,
                   deep_until=_NEVER if regime == Mode.DEEP_BLINDED else -_NEVER, power=power)

    @property
    def mean_photocurrent(self) -> float:
        return self.charge / (self.elapsed * 1e-12) if self.elapsed else self.photocurrent


@dataclass(frozen=True)
class Click:
    detector: AnalyzerChannel
    time: TimePs
    origin: Origin


# -- closed-form response functions ------------------------------------------------

def count_rate(p: float, params: DetectorParams) -> float:
    """Steady Geiger-mode count rate (Hz) under CW power ``p``."""
    if p < 0:
        raise ValueError("power must be >= 0")
    if p >= params.p_blind:
        return 0.0
    r_lin = params.dark_rate + params.eta * p / E_PHOTON
    r = r_lin / (1.0 + r_lin / params.r_max)
    half = 0.5 * params.p_blind
    if p >= half:
        x = (p - half) / half
        r *= math.cos(0.5 * math.pi * x) ** 2
    return r


def _effective_thresholds(mode: Mode, params: DetectorParams) -> tuple[float, float]:
    if mode == Mode.DEEP_BLINDED:
        return params.p_never * params.deep_factor, params.p_always * params.deep_factor
    if mode == Mode.BLINDED:
        return params.p_never, params.p_always
    raise ValueError(f"linear click probability is defined for blinded modes, not {mode.name}")


def linear_click_probability(peak: float, mode: Mode, params: DetectorParams) -> float:
    if peak < 0:
        raise ValueError("peak power must be >= 0")
    lo, hi = _effective_thresholds(Mode(mode), params)
    if peak <= lo:
        return 0.0
    if peak >= hi:
        return 1.0
    return (peak - lo) / (hi - lo)


def gap_click_probability(gap: TimePs, params: DetectorParams) -> float:
    """Click probability when blinding returns after a ``gap`` of darkness.

    A logistic curve in log(gap): exactly zero at gap 0, one half at
    ``gap_t50``, steepness ``gap_slope``.
    """
    if gap < 0:
        raise ValueError("gap must be >= 0")
    if gap == 0:
        return 0.0
    return 1.0 / (1.0 + (params.gap_t50 / gap) ** params.gap_slope)


def jitter_sigma(origin: Origin, params: DetectorParams) -> float:
    if origin in (Origin.GEIGER, Origin.DARK):
        return params.jitter_sigma_geiger
    return params.jitter_sigma_linear


def apply_jitter(t: TimePs, origin: Origin, params: DetectorParams, rng: np.random.Generator) -> TimePs:
    sigma = jitter_sigma(origin, params)
    if sigma <= 0:
        return t
    return t + int(round(rng.normal(0.0, sigma)))


def steady_regime(params: DetectorParams, power: float) -> Mode:
    """Regime reached under long-lasting CW ``power``."""
    if power < params.p_blind:
        return Mode.ARMED
    return Mode.DEEP_BLINDED if power >= params.p_deep else Mode.BLINDED


def edge_click_probability(params: DetectorParams, regime: Mode, peak: float) -> float:
    """Probability that a rising edge to ``peak`` launches a click in ``regime``.

    An armed detector hit by a pulse this bright clicks with certainty (the
    mean photon number in even a nanosecond is astronomically large).
    """
    if regime == Mode.ARMED:
        return 1.0 if peak > 0 else 0.0
    return linear_click_probability(peak, regime, params)


def _photocurrent(params: DetectorParams, regime: Mode, power: float) -> float:
    if regime == Mode.ARMED:
        return params.dark_current + params.avalanche_charge * count_rate(power, params)
    return params.dark_current + params.responsivity * power


def monitor_threshold(params: DetectorParams) -> float:
    """Highest bias current a detector can draw while counting single photons."""
    return params.dark_current + params.avalanche_charge * params.r_max


# -- event engine ---------------------------------------------------------------

class _Engine:
    """Mutable working copy of a DetectorState while a step is in progress."""

    __slots__ = ("p", "rng", "regime", "mode_since", "dead_until", "bright_since", "gap_start",
                 "deep_until", "power", "charge", "elapsed", "times", "origins", "_sig_g", "_sig_l")

    def __init__(self, params: DetectorParams, state: DetectorState, rng):
        self.p = params
        self.rng = rng
        self.regime = state.regime
        self.mode_since = state.mode_since
        self.dead_until = state.dead_until
        self.bright_since = state.bright_since
        self.gap_start = state.gap_start
        self.deep_until = state.deep_until
        self.power = state.power
        self.charge = state.charge
        self.elapsed = state.elapsed
        self.times: list[int] = []
        self.origins: list[int] = []
        self._sig_g = params.jitter_sigma_geiger
        self._sig_l = params.jitter_sigma_linear

    def _emit(self, t: int, origin: int) -> bool:
        sigma = self._sig_g if origin == 0 or origin == 3 else self._sig_l
        tj = t + int(round(self.rng.normal(0.0, sigma))) if sigma > 0 else t
        # Dead at the instant the avalanche would register: the click is lost.
        if tj < self.dead_until:
            return False
        self.times.append(tj + self.p.delay)
        self.origins.append(origin)
        self.dead_until = tj + self.p.deadtime
        return True

    def _geiger(self, start: int, end: int, power: float):
        p = self.p
        photon_rate = p.eta * power / E_PHOTON
        rate = p.dark_rate + photon_rate
        if rate <= 0:
            return
        mean_wait = 1e12 / rate
        rng = self.rng
        cursor = start
        while True:
            if cursor < self.dead_until:
                cursor = self.dead_until
            te = cursor + int(rng.exponential(mean_wait))
            if te >= end:
                return
            dark = photon_rate == 0 or rng.random() * rate < p.dark_rate
            self._emit(te, 3 if dark else 0)
            cursor = te + 1

    def run(self, times: np.ndarray, levels: np.ndarray, t1: int):
        p = self.p
        rng = self.rng
        p_blind, p_gap_off, p_deep = p.p_blind, p.p_gap_off, p.p_deep
        n = len(times)
        tl = times.tolist()
        ll = levels.tolist()
        for i in range(n):
            t = tl[i]
            P = ll[i]
            t_next = tl[i + 1] if i + 1 < n else t1
            old = self.power
            regime = self.regime
            # Lazy expiry of deep blinding.
            if regime == 3 and self.deep_until <= t:
                regime = self.regime = Mode.BLINDED
                self.mode_since = self.deep_until
            # ---- edge at t -------------------------------------------------
            if regime == 2 or regime == 3:
                if P < p_gap_off:
                    self.regime = Mode.RECOVERING
                    self.gap_start = t
                    self.mode_since = t
                elif P > old:
                    prob = linear_click_probability(P, regime, p)
                    if prob > 0 and t >= self.dead_until and (prob >= 1.0 or rng.random() < prob):
                        self._emit(t, 1)
                    if P >= p_deep:
                        if regime != 3:
                            self.mode_since = t
                        self.regime = Mode.DEEP_BLINDED
                        self.deep_until = _NEVER
                elif regime == 3 and old >= p_deep > P:
                    self.deep_until = t + p.deep_duration
            elif regime == 4:
                if P >= p_blind:
                    gap = t - self.gap_start
                    pg = gap_click_probability(gap, p)
                    pl = linear_click_probability(P, Mode.BLINDED, p)
                    if t >= self.dead_until and (pg > 0 or pl > 0):
                        u = rng.random()
                        if u < pg:
                            self._emit(t, 2)
                        elif u < 1.0 - (1.0 - pg) * (1.0 - pl):
                            self._emit(t, 1)
                    self.mode_since = t
                    if P >= p_deep:
                        self.regime = Mode.DEEP_BLINDED
                        self.deep_until = _NEVER
                    else:
                        self.regime = Mode.BLINDED
            else:  # ARMED
                if P >= p_blind:
                    if self.bright_since is None:
                        self.bright_since = t
                else:
                    self.bright_since = None
            self.power = P
            # ---- interval [t, t_next) ----------------------------------------
            regime = self.regime
            if regime == 4 and self.gap_start + p.tau_recover < t_next:
                t_r = max(t, self.gap_start + p.tau_recover)
                self.regime = Mode.ARMED
                self.mode_since = t_r
                self.bright_since = None
                self._geiger(t_r, t_next, P)
            elif regime == 0:
                end = t_next
                if self.bright_since is not None:
                    t_b = self.bright_since + p.blind_onset
                    if t_b < t_next:
                        end = max(t, t_b)
                self._geiger(t, end, P)
                if end < t_next:
                    self.bright_since = None
                    self.mode_since = end
                    if P >= p_deep:
                        self.regime = Mode.DEEP_BLINDED
                        self.deep_until = _NEVER
                    else:
                        self.regime = Mode.BLINDED
            dt = t_next - t
            self.charge += _photocurrent(p, self.regime, P) * dt * 1e-12
            self.elapsed += dt

    def state(self, t1: int) -> DetectorState:
        regime = self.regime
        since = self.mode_since
        if regime == Mode.DEEP_BLINDED and self.deep_until <= t1:
            regime, since = Mode.BLINDED, self.deep_until
        mode = Mode.DEAD if t1 < self.dead_until else regime
        return DetectorState(mode, since, _photocurrent(self.p, regime, self.power), t=t1,
                             regime=regime, dead_until=self.dead_until, bright_since=self.bright_since,
                             gap_start=self.gap_start, deep_until=self.deep_until, power=self.power,
                             charge=self.charge, elapsed=self.elapsed)


def advance_levels(params: DetectorParams, state: DetectorState, times: np.ndarray, levels: np.ndarray,
                   t1: TimePs, rng: np.random.Generator) -> tuple[DetectorState, np.ndarray, np.ndarray]:
    """Step over precomputed ``(times, levels)``; returns state and click (times, origins)."""
    if len(times) and times[0] < state.t:
        raise ValueError("cannot step backwards in time")
    eng = _Engine(params, state, rng)
    eng.run(times, levels, t1)
    return (eng.state(t1), np.asarray(eng.times, dtype=np.int64), np.asarray(eng.origins, dtype=np.int8))


def step(state: DetectorState, incident: OpticalWaveform, t0: TimePs, t1: TimePs,
         rng: np.random.Generator, params: DetectorParams,
         detector: AnalyzerChannel = AnalyzerChannel.H) -> tuple[DetectorState, list[Click]]:
    """Advance one detector over ``[t0, t1)`` under the power it receives.

    ``incident`` is the light already routed to this detector; polarization is
    ignored.
    """
    if not t0 < t1:
        raise ValueError("need t0 < t1")
    times, levels = piecewise_levels(incident, None, t0, t1)
    new, ct, co = advance_levels(params, state, times, levels, t1, rng)
    clicks = [Click(detector, int(t), Origin(int(o))) for t, o in zip(ct, co)]
    return new, clicks


# -- four-detector bank ---------------------------------------------------------------

Bank = tuple[DetectorParams, DetectorParams, DetectorParams, DetectorParams]


@dataclass
class BankRun:
    """Click output of a bank over one stepping window."""
    times: np.ndarray
    detectors: np.ndarray
    origins: np.ndarray
    states: list[DetectorState] = field(default_factory=list)


def bank_step(bank, states, waveform: OpticalWaveform, t0: TimePs, t1: TimePs, rngs,
              transmittance: float = 1.0) -> BankRun:
    """Route ``waveform`` through the analyzer and step all four detectors."""
    fractions = analyzer_fractions(waveform.jones) if len(waveform) else np.zeros((0, 4))
    new_states, all_t, all_d, all_o = [], [], [], []
    for ch in range(4):
        times, levels = piecewise_levels(waveform, fractions[:, ch] * transmittance, t0, t1)
        st, ct, co = advance_levels(bank[ch], states[ch], times, levels, t1, rngs[ch])
        new_states.append(st)
        all_t.append(ct)
        all_d.append(np.full(len(ct), ch, dtype=np.int8))
        all_o.append(co)
    t = np.concatenate(all_t)
    order = np.argsort(t, kind="stable")
    return BankRun(t[order], np.concatenate(all_d)[order], np.concatenate(all_o)[order], new_states)


def default_bank() -> Bank:
    """Mismatched four-detector bank.

    Three detectors leave a diagram-2 alignment window; the -45 detector needs
    so much peak power to click reliably that its conjugate-basis neighbours
    fire first, so it has no window without pre-pulses.
    """
    return (
        DetectorParams(p_blind=1.8e-6, eta=0.50, p_never=1.00e-3, p_always=1.25e-3,
                       gap_t50=ns(530), gap_slope=9.0, p_deep=0.30e-3),
        DetectorParams(p_blind=2.0e-6, eta=0.46, p_never=1.10e-3, p_always=1.30e-3,
                       gap_t50=ns(550), gap_slope=9.0, p_deep=0.32e-3),
        DetectorParams(p_blind=2.2e-6, eta=0.54, p_never=1.05e-3, p_always=1.20e-3,
                       gap_t50=ns(565), gap_slope=9.5, p_deep=0.30e-3),
        DetectorParams(p_blind=1.9e-6, eta=0.48, p_never=1.20e-3, p_always=2.20e-3,
                       gap_t50=ns(580), gap_slope=9.5, p_deep=0.33e-3),
    )


def symmetric_bank(params: DetectorParams | None = None) -> Bank:
    p = params or DetectorParams()
    return (p, p, p, p)
