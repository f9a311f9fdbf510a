"""Eve's faked-state generator (FSG).

Nine logical lasers: one circular (or elliptical) blinding diode, four
pre-pulse diodes and four click-launch diodes, each linear and aligned to
one of Bob's analyzer axes. A control diagram turns each of Eve's Bob'
clicks into an optical pattern timed so that the induced click at Bob lands
``insertion_delay`` after Eve's own detection.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .polarization import CHANNELS, RCP, AnalyzerChannel, JonesVector
from .timeline import OpticalWaveform, TimePs, ns, us

P_MAX_OUTPUT = 12e-3
MIN_INSERTION_DELAY = ns(10)
DEFAULT_WARMUP = us(20)


class ScheduleError(ValueError):
    pass


class NotCalibrated(RuntimeError):
    pass


class DiagramKind(enum.Enum):
    D1 = "D1"
    D2 = "D2"
    D3 = "D3"

    @classmethod
    def parse(cls, value) -> DiagramKind:
        if isinstance(value, DiagramKind):
            return value
        key = str(value).strip().upper()
        if key in ("1", "2", "3"):
            key = "D" + key
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown control diagram {value!r}") from None


class LaserRole(enum.Enum):
    BLIND = "blind"
    PREPULSE = "prepulse"
    CLICK = "click"
    GAP = "gap"


@dataclass(frozen=True)
class LaserSetting:
    power: float
    polarization: JonesVector
    role: LaserRole
    target: AnalyzerChannel | None = None

    def __post_init__(self):
        if self.power < 0:
            raise ValueError("laser power must be >= 0")


@dataclass(frozen=True)
class ControlDiagram:
    kind: DiagramKind = DiagramKind.D3
    gap_width: TimePs = ns(600)
    prepulse_lead: TimePs = ns(100)
    prepulse_width: TimePs = ns(50)
    click_width: TimePs = ns(10)

    def __post_init__(self):
        object.__setattr__(self, "kind", DiagramKind.parse(self.kind))
        if self.gap_width < 0:
            raise ValueError("gap_width must be >= 0")
        if self.prepulse_width <= 0 or self.click_width <= 0:
            raise ValueError("pulse widths must be > 0")

    def validate(self):
        if self.kind == DiagramKind.D3 and self.prepulse_lead < self.prepulse_width:
            raise ScheduleError("pre-pulse would overlap the click-launch pulse "
                                f"(lead {self.prepulse_lead} ps < width {self.prepulse_width} ps)")

    @property
    def lead_time(self) -> TimePs:
        """How long before the induced click the pattern starts."""
        if self.kind == DiagramKind.D1:
            return self.gap_width
        if self.kind == DiagramKind.D3:
            return self.prepulse_lead
        return 0

    @property
    def tail_time(self) -> TimePs:
        return 0 if self.kind == DiagramKind.D1 else self.click_width

    @property
    def effective_pulse_train_length(self) -> TimePs:
        return self.lead_time + self.tail_time


def _settings(role: LaserRole, powers, polarize) -> tuple[LaserSetting, ...]:
    return tuple(LaserSetting(float(p), polarize(ch), role, ch) for ch, p in zip(CHANNELS, powers))


@dataclass(frozen=True)
class FsgParams:
    blinding: LaserSetting = LaserSetting(1e-5, RCP, LaserRole.BLIND)
    prepulse: tuple[LaserSetting, ...] = _settings(LaserRole.PREPULSE, [0.0] * 4, lambda c: c.orthogonal.axis)
    click: tuple[LaserSetting, ...] = _settings(LaserRole.CLICK, [0.0] * 4, lambda c: c.axis)
    gap_power: float = 0.0
    insertion_delay: TimePs = ns(212)
    fsg_jitter_sigma: float = 0.0
    trims: tuple[TimePs, TimePs, TimePs, TimePs] = (0, 0, 0, 0)
    output_transmittance: float = 1.0
    p_max_output: float = P_MAX_OUTPUT
    calibrated: bool = False

    def __post_init__(self):
        if self.insertion_delay < MIN_INSERTION_DELAY:
            raise ValueError(f"insertion_delay must be >= {MIN_INSERTION_DELAY} ps")
        if len(self.prepulse) != 4 or len(self.click) != 4 or len(self.trims) != 4:
            raise ValueError("need one pre-pulse, click laser and trim per detector")
        lasers = [self.blinding, *self.prepulse, *self.click]
        for laser in lasers:
            if laser.power > self.p_max_output:
                raise ValueError(f"{laser.role.value} laser power {laser.power} W exceeds "
                                 f"p_max_output {self.p_max_output} W")
        if self.gap_power > self.p_max_output:
            raise ValueError("gap laser power exceeds p_max_output")
        if not 0 <= self.output_transmittance <= 1:
            raise ValueError("output_transmittance must lie in [0, 1]")
        if self.fsg_jitter_sigma < 0:
            raise ValueError("fsg_jitter_sigma must be >= 0")

    @classmethod
    def from_powers(cls, blinding_power: float, prepulse_powers: Sequence[float],
                    click_powers: Sequence[float], *, blinding_polarization: JonesVector = RCP,
                    gap_power: float = 0.0, **kw) -> FsgParams:
        return cls(
            blinding=LaserSetting(float(blinding_power), blinding_polarization, LaserRole.BLIND),
            prepulse=_settings(LaserRole.PREPULSE, prepulse_powers, lambda c: c.orthogonal.axis),
            click=_settings(LaserRole.CLICK, click_powers, lambda c: c.axis),
            gap_power=float(gap_power), calibrated=True, **kw)

    def with_(self, **changes) -> FsgParams:
        return replace(self, **changes)

    def laser_power_ceiling(self, diagram: ControlDiagram) -> float:
        """Largest instantaneous output power any schedule can reach."""
        if diagram.kind == DiagramKind.D1:
            return 4 * self.gap_power
        total = self.blinding.power + max(c.power for c in self.click)
        if diagram.kind == DiagramKind.D3:
            total += max(p.power for p in self.prepulse)
        return total


@dataclass
class FsgRecords:
    """Eve's time-stamp records: one row per faked state actually emitted."""
    trigger_times: np.ndarray
    targets: np.ndarray
    fire_times: np.ndarray
    n_input: int = 0

    def __len__(self) -> int:
        return len(self.trigger_times)

    @property
    def n_dropped(self) -> int:
        return self.n_input - len(self)


def _segments(starts, ends, power, jones) -> OpticalWaveform:
    starts = np.asarray(starts, dtype=np.int64)
    ends = np.asarray(ends, dtype=np.int64)
    if np.isscalar(power) or np.ndim(power) == 0:
        power = np.full(len(starts), float(power))
    jones = np.asarray(jones, dtype=complex)
    if jones.ndim == 1:
        jones = np.broadcast_to(jones, (len(starts), 2))
    keep = (ends > starts) & (np.asarray(power) > 0)
    return OpticalWaveform(starts[keep], ends[keep], np.asarray(power)[keep], jones[keep])


def _axis_table() -> np.ndarray:
    return np.array([[c.axis.h, c.axis.v] for c in CHANNELS], dtype=complex)


def compile_train(targets: np.ndarray, fire_times: np.ndarray, diagram: ControlDiagram,
                  params: FsgParams, span: tuple[TimePs, TimePs]) -> OpticalWaveform:
    """Eve's full output for a sequence of faked states.

    ``fire_times`` are the instants the induced Bob clicks should occur; the
    blinding light (for D1 the four CW lasers) covers ``span`` and the
    per-state features are cut into or added onto it.
    """
    diagram.validate()
    targets = np.asarray(targets, dtype=np.int64)
    fire = np.asarray(fire_times, dtype=np.int64)
    t_on, t_off = int(span[0]), int(span[1])
    if len(fire) and (fire.min() - diagram.lead_time < t_on or fire.max() + diagram.tail_time > t_off):
        raise ScheduleError("faked states extend beyond the blinding span")
    axes = _axis_table()
    parts = []
    if diagram.kind == DiagramKind.D1:
        # Laser k is dark during the gap unless it is the one orthogonal to the target.
        for k in range(4):
            sel = (targets ^ 1) != k
            g_end = fire[sel]
            g_start = g_end - diagram.gap_width
            order = np.argsort(g_start, kind="stable")
            g_start, g_end = g_start[order], g_end[order]
            starts = np.concatenate([[t_on], g_end])
            ends = np.concatenate([g_start, [t_off]])
            parts.append(_segments(starts, ends, params.gap_power, axes[k]))
    else:
        b = params.blinding
        parts.append(_segments([t_on], [t_off], b.power, [b.polarization.h, b.polarization.v]))
        click_p = np.array([c.power for c in params.click])
        parts.append(_segments(fire, fire + diagram.click_width, click_p[targets], axes[targets]))
        if diagram.kind == DiagramKind.D3:
            pre_p = np.array([p.power for p in params.prepulse])
            pre_start = fire - diagram.prepulse_lead
            parts.append(_segments(pre_start, pre_start + diagram.prepulse_width,
                                   pre_p[targets], axes[targets ^ 1]))
    return OpticalWaveform(
        np.concatenate([w.t_start for w in parts]),
        np.concatenate([w.t_end for w in parts]),
        np.concatenate([w.power for w in parts]),
        np.concatenate([w.jones for w in parts]),
    )


def fire_time(target: AnalyzerChannel, t_click: TimePs, params: FsgParams) -> TimePs:
    return t_click + params.insertion_delay + params.trims[int(target)]


def build_faked_state(target: AnalyzerChannel, diagram: ControlDiagram, params: FsgParams,
                      t_click: TimePs, span: tuple[TimePs, TimePs] | None = None,
                      jitter: TimePs = 0) -> OpticalWaveform:
    """Eve's output for one intercepted click.

    Without ``span`` the blinding light covers just this state, from ``t_click``
    to the end of the click-launch pulse.
    """
    target = AnalyzerChannel.parse(target)
    diagram.validate()
    t_fire = fire_time(target, t_click, params) + jitter
    if t_fire - diagram.lead_time < t_click:
        raise ScheduleError(f"insertion delay {params.insertion_delay} ps is too short for a "
                            f"{diagram.lead_time} ps lead in {diagram.kind.value}")
    if span is None:
        span = (t_click, t_fire + max(diagram.tail_time, 1))
    return compile_train(np.array([int(target)]), np.array([t_fire]), diagram, params, span)


@dataclass
class FsgOutput:
    waveform: OpticalWaveform
    records: FsgRecords
    span: tuple[TimePs, TimePs]


def accept_triggers(times: np.ndarray, busy: TimePs) -> np.ndarray:
    """Indices of triggers the FSG acts on; later ones inside ``busy`` are dropped."""
    keep = []
    last = None
    for i, t in enumerate(times.tolist()):
        if last is None or t - last >= busy:
            keep.append(i)
            last = t
    return np.asarray(keep, dtype=np.int64)


def schedule(clicks, diagram: ControlDiagram, params: FsgParams, *, holdoff: TimePs = 0,
             rng: np.random.Generator | None = None) -> FsgRecords:
    """Which Bob' clicks get a faked state, and when each induced click should occur.

    ``clicks`` is a list of :class:`Click` or a ``(times, detectors)`` pair,
    sorted by time. A click arriving while the previous pattern (or
    ``holdoff``) is still running is dropped and not recorded.
    """
    if not params.calibrated:
        raise NotCalibrated("FSG parameters have not been calibrated")
    diagram.validate()
    if isinstance(clicks, tuple):
        times, dets = (np.asarray(c) for c in clicks)
    else:
        times = np.array([c.time for c in clicks], dtype=np.int64)
        dets = np.array([int(c.detector) for c in clicks], dtype=np.int64)
    times = times.astype(np.int64).reshape(-1)
    dets = dets.astype(np.int64).reshape(-1)
    if len(times) > 1 and np.any(np.diff(times) < 0):
        raise ValueError("Bob' clicks must be sorted by time")
    if np.any((dets < 0) | (dets > 3)):
        raise ValueError("unknown target detector")
    trims = np.asarray(params.trims, dtype=np.int64)
    if np.any(params.insertion_delay + trims - diagram.lead_time < 0):
        raise ScheduleError(f"insertion delay {params.insertion_delay} ps is too short for a "
                            f"{diagram.lead_time} ps lead in {diagram.kind.value}")
    busy = max(diagram.effective_pulse_train_length, holdoff, 1)
    idx = accept_triggers(times, busy)
    trig, targets = times[idx], dets[idx]
    fire = trig + params.insertion_delay + trims[targets]
    if params.fsg_jitter_sigma > 0 and len(fire):
        if rng is None:
            raise ValueError("an rng is required when fsg_jitter_sigma > 0")
        fire = fire + np.rint(rng.normal(0.0, params.fsg_jitter_sigma, len(fire))).astype(np.int64)
    return FsgRecords(trig, targets.astype(np.int8), fire, n_input=len(times))


def respond(clicks, diagram: ControlDiagram, params: FsgParams, *, holdoff: TimePs = 0,
            span: tuple[TimePs, TimePs] | None = None, rng: np.random.Generator | None = None,
            warmup: TimePs = DEFAULT_WARMUP) -> FsgOutput:
    """Eve's full output for a stream of Bob' clicks, plus her time-stamp records."""
    rec = schedule(clicks, diagram, params, holdoff=holdoff, rng=rng)
    fire = rec.fire_times
    if span is None:
        if len(fire):
            span = (int(fire.min()) - diagram.lead_time - warmup, int(fire.max()) + diagram.tail_time + warmup)
        else:
            span = (0, 1)
    wave = compile_train(rec.targets.astype(np.int64), fire, diagram, params, span)
    return FsgOutput(wave, rec, span)
