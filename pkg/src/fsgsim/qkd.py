"""Prepare-and-measure BB84 over a lossy channel, with an optional eavesdropper.

Alice emits one single photon per clock slot. Without Eve the photons reach
Bob's passive four-detector receiver directly. With Eve, her own receiver
(Bob') measures every photon she couples in, and either resends a single
photon in the measured state (naive intercept-resend) or drives the
faked-state generator, whose bright output Bob's blinded bank answers through
the full detector state machine. Bob's clicks pass through a time-stamp unit
before the public sifting step.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import apd, rng as rngmod
from .apd import DetectorState, Origin
from .fsg import ControlDiagram, FsgParams, FsgRecords, ScheduleError, compile_train, schedule
from .polarization import JonesVector, analyzer_fractions, route_photons, state_for
from .timeline import TimePs, ns, piecewise_levels, us

HV, DIAG = 0, 1
CHUNK_EVENTS = 20_000


class UndefinedRate(ValueError):
    pass


class EveMode(enum.Enum):
    FAKED_STATE = "faked-state"
    INTERCEPT_RESEND = "intercept-resend"


@dataclass(frozen=True)
class AliceEvent:
    time: TimePs
    bit: int
    basis: int
    state: JonesVector

    def __post_init__(self):
        if self.state != state_for(self.basis, self.bit):
            raise ValueError("state does not encode (bit, basis)")


@dataclass
class AliceStream:
    times: np.ndarray
    bits: np.ndarray
    bases: np.ndarray

    @property
    def channels(self) -> np.ndarray:
        return (2 * self.bases + self.bits).astype(np.int8)

    def __len__(self) -> int:
        return len(self.times)

    def event(self, i: int) -> AliceEvent:
        b, s = int(self.bits[i]), int(self.bases[i])
        return AliceEvent(int(self.times[i]), b, s, state_for(s, b))


@dataclass(frozen=True)
class LinkConfig:
    pulse_rate: float = 10e6
    channel_transmittance: float = 0.1
    channel_delay: TimePs = ns(1450)
    eve_present: bool = False
    eve_input_coupling: float = 1.0
    eve_mode: EveMode = EveMode.FAKED_STATE
    coincidence_window: TimePs = ns(3)
    timestamp_cross_deadtime: TimePs = ns(520)
    timestamp_min_resolution_deadtime: TimePs = ns(80)

    def __post_init__(self):
        object.__setattr__(self, "eve_mode", EveMode(self.eve_mode))
        for name in ("channel_transmittance", "eve_input_coupling"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.pulse_rate <= 0:
            raise ValueError("pulse_rate must be > 0")
        if self.coincidence_window < 0 or self.timestamp_min_resolution_deadtime < 0:
            raise ValueError("time-stamp windows must be >= 0")
        if 2 * self.coincidence_window >= self.period:
            raise ValueError("coincidence window must be well below the clock period")

    @property
    def period(self) -> TimePs:
        return int(round(1e12 / self.pulse_rate))

    def with_(self, **changes) -> LinkConfig:
        return replace(self, **changes)


@dataclass
class ClickStream:
    """Time-sorted click record: (detector, time_ps, origin) per row."""
    times: np.ndarray
    detectors: np.ndarray
    origins: np.ndarray

    @classmethod
    def empty(cls) -> ClickStream:
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int8), np.zeros(0, np.int8))

    @classmethod
    def from_clicks(cls, clicks) -> ClickStream:
        clicks = sorted(clicks, key=lambda c: (c.time, int(c.detector)))
        return cls(np.array([c.time for c in clicks], dtype=np.int64),
                   np.array([int(c.detector) for c in clicks], dtype=np.int8),
                   np.array([int(c.origin) for c in clicks], dtype=np.int8))

    @classmethod
    def merge(cls, parts) -> ClickStream:
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        t = np.concatenate([p.times for p in parts])
        d = np.concatenate([p.detectors for p in parts])
        o = np.concatenate([p.origins for p in parts])
        order = np.lexsort((d, t))
        return cls(t[order], d[order], o[order])

    def __len__(self) -> int:
        return len(self.times)

    def rows(self):
        for d, t, o in zip(self.detectors.tolist(), self.times.tolist(), self.origins.tolist()):
            yield d, t, Origin(o).name


@dataclass
class SiftedKeys:
    alice_bits: np.ndarray
    bob_bits: np.ndarray
    eve_bits: np.ndarray | None
    double_click_flags: np.ndarray
    slots: np.ndarray
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.alice_bits)
        if len(self.bob_bits) != n or len(self.double_click_flags) != n or len(self.slots) != n:
            raise ValueError("sifted key columns must have equal length")
        if self.eve_bits is not None and len(self.eve_bits) != n:
            raise ValueError("eve_bits must align with the sifted key")

    def __len__(self) -> int:
        return len(self.alice_bits)


# -- Alice -------------------------------------------------------------------------

def alice_source(n_pulses: int, cfg: LinkConfig, seed: int) -> AliceStream:
    rg = rngmod.stream(seed, rngmod.ALICE)
    bits = rg.integers(0, 2, n_pulses, dtype=np.int8)
    bases = rg.integers(0, 2, n_pulses, dtype=np.int8)
    times = np.arange(n_pulses, dtype=np.int64) * cfg.period
    return AliceStream(times, bits, bases)


# -- single-photon receivers ---------------------------------------------------------

_CHANNEL_PROBS = np.vstack([analyzer_fractions(np.array([[s.h, s.v]])) for s in
                            (state_for(0, 0), state_for(0, 1), state_for(1, 0), state_for(1, 1))])


def apply_deadtime(times: np.ndarray, deadtime: TimePs) -> np.ndarray:
    """Mask of clicks kept by a non-paralysable detector with the given deadtime."""
    keep = np.zeros(len(times), dtype=bool)
    if not len(times):
        return keep
    dt = np.diff(times)
    if deadtime <= 0 or np.all(dt >= deadtime):
        keep[:] = True
        return keep
    last = None
    for i, t in enumerate(times.tolist()):
        if last is None or t - last >= deadtime:
            keep[i] = True
            last = t
    return keep


def geiger_receiver(arrivals: np.ndarray, channels: np.ndarray, bank, transmittance: float,
                    t_span: tuple[TimePs, TimePs], seed: int, ns_key: int) -> ClickStream:
    """Single photons in bases/bits ``channels`` arriving at a four-detector receiver."""
    rg = rngmod.stream(seed, ns_key, 0)
    n = len(arrivals)
    arrived = rg.random(n) < transmittance
    t_arr, ch = arrivals[arrived], channels[arrived]
    det = route_photons(_CHANNEL_PROBS[ch], rg)
    parts = []
    span = t_span[1] - t_span[0]
    for d, p in enumerate(bank):
        rd = rngmod.stream(seed, ns_key, 1 + d)
        mine = t_arr[(det == d)]
        mine = mine[rd.random(len(mine)) < p.eta]
        n_dark = rd.poisson(p.dark_rate * span * 1e-12)
        dark = t_span[0] + rd.integers(0, max(span, 1), n_dark)
        t = np.concatenate([mine, dark]).astype(np.int64)
        org = np.concatenate([np.full(len(mine), int(Origin.GEIGER), np.int8),
                              np.full(n_dark, int(Origin.DARK), np.int8)])
        if p.jitter_sigma_geiger > 0:
            t = t + np.rint(rd.normal(0.0, p.jitter_sigma_geiger, len(t))).astype(np.int64)
        order = np.argsort(t, kind="stable")
        t, org = t[order], org[order]
        keep = apply_deadtime(t, p.deadtime)
        parts.append(ClickStream(t[keep] + p.delay, np.full(int(keep.sum()), d, np.int8), org[keep]))
    return ClickStream.merge(parts)


def geiger_states(stream: ClickStream, bank, t_span) -> list[DetectorState]:
    """End states of armed detectors that produced ``stream``, with integrated bias charge."""
    T = t_span[1] - t_span[0]
    out = []
    for d, p in enumerate(bank):
        n = int(np.sum(stream.detectors == d))
        charge = p.dark_current * T * 1e-12 + p.avalanche_charge * n
        rate = n / (T * 1e-12) if T else 0.0
        out.append(DetectorState(apd.Mode.ARMED, t_span[0], p.dark_current + p.avalanche_charge * rate,
                                 t=t_span[1], charge=charge, elapsed=T))
    return out


# -- time-stamp unit -------------------------------------------------------------------

def timestamp_unit(raw: ClickStream, window: TimePs, min_deadtime: TimePs) -> ClickStream:
    """Bob's click registration.

    Clicks within ``window`` of the first click of an event are latched as one
    multi-channel event at that first time; after an event nothing is recorded
    on any channel for ``min_deadtime``.
    """
    if not len(raw):
        return raw
    t = raw.times.tolist()
    i, n = 0, len(t)
    keep = np.zeros(n, dtype=bool)
    event_time = np.zeros(n, dtype=np.int64)
    last_event = None
    while i < n:
        t0 = t[i]
        if last_event is not None and t0 - last_event < min_deadtime:
            i += 1
            continue
        j = i
        while j < n and t[j] - t0 <= window:
            keep[j] = True
            event_time[j] = t0
            j += 1
        last_event = t0
        i = j
    out = ClickStream(event_time[keep], raw.detectors[keep], raw.origins[keep])
    # One row per channel: repeated channels within an event collapse.
    key = out.times * 8 + out.detectors
    _, first = np.unique(key, return_index=True)
    first.sort()
    return ClickStream(out.times[first], out.detectors[first], out.origins[first])


# -- sifting ---------------------------------------------------------------------------

def resolve_double_clicks(channels, rng: np.random.Generator) -> tuple[int, bool]:
    """Bit for a set of clicked channels within one basis; random when both bits clicked."""
    chans = sorted({int(c) for c in channels})
    if not chans:
        raise ValueError("no clicks")
    if len({c // 2 for c in chans}) != 1:
        raise ValueError("clicks span both bases")
    if len(chans) == 1:
        return chans[0] % 2, False
    return int(rng.integers(0, 2)), True


def slot_events(stream: ClickStream, offsets: np.ndarray, period: TimePs, window: TimePs):
    """Map clicks to Alice slots; returns (slots, channel masks, n_unmatched)."""
    if not len(stream):
        return np.zeros(0, np.int64), np.zeros(0, np.int64), 0
    rel = stream.times - offsets[stream.detectors.astype(np.int64)]
    slot = np.floor_divide(rel + period // 2, period)
    resid = rel - slot * period
    ok = np.abs(resid) <= window
    slot = slot[ok]
    mask = (1 << stream.detectors[ok].astype(np.int64))
    order = np.argsort(slot, kind="stable")
    slot, mask = slot[order], mask[order]
    uniq, first = np.unique(slot, return_index=True)
    masks = np.bitwise_or.reduceat(mask, first) if len(first) else mask[:0]
    return uniq, masks, int((~ok).sum())


def sift(alice: AliceStream, bob: ClickStream, offsets, cfg: LinkConfig, rng: np.random.Generator,
         eve_slots: np.ndarray | None = None, eve_channels: np.ndarray | None = None) -> SiftedKeys:
    """Public basis reconciliation over a perfect classical channel."""
    offsets = np.broadcast_to(np.asarray(offsets, dtype=np.int64), (4,))
    slots, masks, unmatched = slot_events(bob, offsets, cfg.period, cfg.coincidence_window)
    inside = (slots >= 0) & (slots < len(alice))
    unmatched += int((~inside).sum())
    slots, masks = slots[inside], masks[inside]
    hv, dg = masks & 3, (masks >> 2) & 3
    one_basis = (hv == 0) != (dg == 0)
    multi_det = np.array([bin(int(m)).count("1") >= 2 for m in masks], dtype=bool) if len(masks) else \
        np.zeros(0, bool)
    basis = np.where(hv != 0, HV, DIAG)
    bits_mask = np.where(basis == HV, hv, dg)
    double = one_basis & (bits_mask == 3)
    bob_bits = np.where(bits_mask == 2, 1, 0).astype(np.int8)
    if double.any():
        bob_bits[double] = rng.integers(0, 2, int(double.sum())).astype(np.int8)
    match = one_basis & (basis == alice.bases[slots])
    sel = slots[match]
    eve_bits = None
    if eve_slots is not None:
        eb = np.full(len(alice), -1, dtype=np.int8)
        ok = (eve_slots >= 0) & (eve_slots < len(alice))
        eb[eve_slots[ok]] = (eve_channels[ok] % 2).astype(np.int8)
        eve_bits = eb[sel]
    stats = {
        "bob_slots": int(len(slots)),
        "unmatched": unmatched,
        "both_bases_dropped": int((~one_basis).sum()),
        "basis_mismatch_dropped": int((one_basis & ~match).sum()),
        "double_click_count": int(multi_det.sum()),
        "sifted_double_clicks": int(double[match].sum()),
    }
    return SiftedKeys(alice.bits[sel].astype(np.int8), bob_bits[match], eve_bits, double[match], sel, stats)


def qber(keys: SiftedKeys) -> float:
    if not len(keys):
        raise UndefinedRate("empty sifted key")
    return float(np.mean(keys.alice_bits != keys.bob_bits))


def eve_knowledge(keys: SiftedKeys) -> float:
    if keys.eve_bits is None:
        raise ValueError("no eavesdropper bits in this key")
    if not len(keys):
        raise UndefinedRate("empty sifted key")
    return float(np.mean(keys.eve_bits == keys.bob_bits))


# -- the link --------------------------------------------------------------------------

@dataclass
class LinkResult:
    config: LinkConfig
    bank: tuple
    fsg: FsgParams | None
    diagram: ControlDiagram | None
    alice: AliceStream
    bob_prime: ClickStream
    eve: FsgRecords | None
    bob_raw: ClickStream
    bob: ClickStream
    keys: SiftedKeys
    bob_states: list
    stats: dict

    @property
    def expected_delay(self) -> TimePs:
        d = self.config.channel_delay
        if self.config.eve_present:
            d += self.fsg.insertion_delay
        return d


def _initial_bank_states(bank, diagram, fsg, t0) -> list[DetectorState]:
    probe = compile_train(np.zeros(0, np.int64), np.zeros(0, np.int64), diagram, fsg, (t0, t0 + 1))
    fr = analyzer_fractions(probe.jones)
    out = []
    for d, p in enumerate(bank):
        _, levels = piecewise_levels(probe, fr[:, d] * fsg.output_transmittance, t0, t0 + 1)
        P = float(levels[0])
        out.append(DetectorState.blinded(p, P, t0) if P >= p.p_blind else DetectorState.armed(t0))
    return out


def _drive_bank(bank, rec: FsgRecords, diagram: ControlDiagram, fsg: FsgParams, span, seed: int,
                chunk_events: int = CHUNK_EVENTS):
    """Step Bob's bank through Eve's output, a chunk of faked states at a time."""
    order = np.argsort(rec.fire_times, kind="stable")
    fire, targets = rec.fire_times[order], rec.targets[order].astype(np.int64)
    lead, tail = diagram.lead_time, diagram.tail_time
    if len(fire) > 1 and np.any(fire[1:] - lead < fire[:-1] + tail):
        raise ScheduleError("consecutive faked states overlap")
    t_start, t_end = span
    rngs = [rngmod.stream(seed, rngmod.BOB, d) for d in range(4)]
    states = _initial_bank_states(bank, diagram, fsg, t_start)
    bounds = [t_start] + [int(fire[s]) - lead for s in range(chunk_events, len(fire), chunk_events)] + [t_end]
    parts = []
    for k in range(len(bounds) - 1):
        sl = slice(k * chunk_events, (k + 1) * chunk_events)
        wave = compile_train(targets[sl], fire[sl], diagram, fsg, (bounds[k], bounds[k + 1]))
        run = apd.bank_step(bank, states, wave, bounds[k], bounds[k + 1], rngs, fsg.output_transmittance)
        states = run.states
        parts.append(ClickStream(run.times, run.detectors, run.origins))
    return ClickStream.merge(parts), states


def run_link(cfg: LinkConfig, bank, fsg: FsgParams | None = None, diagram: ControlDiagram | None = None,
             n_pulses: int = 100_000, seed: int = 0, eve_bank=None) -> LinkResult:
    """One BB84 run of ``n_pulses`` clock slots; fully determined by ``seed``."""
    if cfg.eve_present and cfg.eve_mode == EveMode.FAKED_STATE and (fsg is None or diagram is None):
        raise ValueError("a faked-state run needs FSG parameters and a control diagram")
    if cfg.eve_present and fsg is not None and not fsg.calibrated:
        from .fsg import NotCalibrated
        raise NotCalibrated("FSG parameters have not been calibrated")
    eve_bank = eve_bank or bank
    alice = alice_source(n_pulses, cfg, seed)
    channels = alice.channels
    arrivals = alice.times + cfg.channel_delay
    span = (int(arrivals[0]) - us(10), int(arrivals[-1]) + us(10)) if n_pulses else (0, 1)
    bob_prime, eve_rec = ClickStream.empty(), None
    eve_slots = eve_channels = None
    offsets = np.array([cfg.channel_delay + p.delay for p in bank], dtype=np.int64)
    if not cfg.eve_present:
        bob_raw = geiger_receiver(arrivals, channels, bank, cfg.channel_transmittance, span, seed, rngmod.BOB)
        states = geiger_states(bob_raw, bank, span)
    else:
        # Eve's receiver sits in Bob's time frame; the FSG output reaches Bob
        # `insertion_delay` after her own detection.
        bob_prime = geiger_receiver(arrivals, channels, eve_bank, cfg.eve_input_coupling, span, seed,
                                    rngmod.BOB_PRIME)
        ins = fsg.insertion_delay if fsg is not None else FsgParams().insertion_delay
        if cfg.eve_mode == EveMode.INTERCEPT_RESEND:
            keep = apply_deadtime(bob_prime.times, 1)
            t_bp, d_bp = bob_prime.times[keep], bob_prime.detectors[keep].astype(np.int64)
            eve_slots = np.floor_divide(t_bp - cfg.channel_delay + cfg.period // 2, cfg.period)
            eve_channels = d_bp
            span_b = (span[0], span[1] + ins)
            bob_raw = geiger_receiver(t_bp + ins, d_bp.astype(np.int8), bank, cfg.channel_transmittance,
                                      span_b, seed, rngmod.BOB)
            states = geiger_states(bob_raw, bank, span_b)
            eve_rec = FsgRecords(t_bp, d_bp.astype(np.int8), t_bp + ins, n_input=len(bob_prime))
        else:
            eve_rec = schedule((bob_prime.times, bob_prime.detectors), diagram, fsg,
                               holdoff=cfg.timestamp_cross_deadtime, rng=rngmod.stream(seed, rngmod.FSG))
            eve_slots = np.floor_divide(eve_rec.trigger_times - cfg.channel_delay + cfg.period // 2, cfg.period)
            eve_channels = eve_rec.targets.astype(np.int64)
            span_b = (span[0] - diagram.lead_time, span[1] + ins + max(fsg.trims) + us(10))
            bob_raw, states = _drive_bank(bank, eve_rec, diagram, fsg, span_b, seed)
        offsets = offsets + ins
        if cfg.eve_mode == EveMode.FAKED_STATE:
            offsets = offsets + np.asarray(fsg.trims, dtype=np.int64)
    bob = timestamp_unit(bob_raw, cfg.coincidence_window, cfg.timestamp_min_resolution_deadtime)
    keys = sift(alice, bob, offsets, cfg, rngmod.stream(seed, rngmod.SIFT), eve_slots, eve_channels)
    duration = n_pulses * cfg.period * 1e-12
    stats = dict(keys.stats)
    stats.update({
        "n_pulses": int(n_pulses),
        "duration_s": duration,
        "bob_prime_clicks": int(len(bob_prime)),
        "faked_states": int(len(eve_rec)) if eve_rec is not None else 0,
        "fsg_dropped": int(eve_rec.n_dropped) if eve_rec is not None else 0,
        "bob_raw_clicks": int(len(bob_raw)),
        "bob_clicks": int(len(bob)),
        "bob_click_rate_hz": len(bob) / duration if duration else 0.0,
        "sifted_bits": int(len(keys)),
        "qber": qber(keys) if len(keys) else None,
        "eve_knowledge": eve_knowledge(keys) if keys.eve_bits is not None and len(keys) else None,
    })
    return LinkResult(cfg, tuple(bank), fsg, diagram, alice, bob_prime, eve_rec, bob_raw, bob, keys,
                      states, stats)


def match_eve_coupling(cfg: LinkConfig, bank, fsg: FsgParams, diagram: ControlDiagram, n_pulses: int,
                       seed: int, *, tol: float = 0.005, max_iter: int = 8, eve_bank=None) -> tuple[float, float]:
    """Eve's input coupling that reproduces Bob's no-Eve click rate.

    Proportional updates on pilot runs (Bob's rate under attack is close to
    linear in the coupling well below saturation). Returns (coupling, ratio).
    """
    base = run_link(cfg.with_(eve_present=False), bank, n_pulses=n_pulses, seed=seed)
    target = base.stats["bob_click_rate_hz"]
    if target <= 0:
        raise UndefinedRate("no clicks without Eve")
    coupling = cfg.channel_transmittance
    ratio = float("nan")
    for _ in range(max_iter):
        res = run_link(cfg.with_(eve_present=True, eve_input_coupling=coupling), bank, fsg, diagram,
                       n_pulses, seed, eve_bank=eve_bank)
        rate = res.stats["bob_click_rate_hz"]
        ratio = rate / target
        if abs(ratio - 1) <= tol:
            break
        if rate <= 0:
            coupling = min(1.0, coupling * 10)
            continue
        new = min(1.0, coupling / ratio)
        if new == coupling:
            break
        coupling = new
    return coupling, ratio
