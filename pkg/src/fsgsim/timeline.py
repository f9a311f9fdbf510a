"""Integer-picosecond time base and piecewise-constant polarized waveforms.

All times are signed integer picoseconds. A waveform is an unordered bag of
rectangular beam segments; overlapping segments add incoherently, so the
power at an instant is the plain sum of the covering segment powers.
Segments are half-open, ``[t_start, t_end)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .polarization import JonesVector

TimePs = int

PS_PER_NS = 1_000
PS_PER_US = 1_000_000

# Integer power quantum used when building piecewise levels (1 aW).
_POWER_QUANTUM = 1e-18


def ns(x: float) -> TimePs:
    return int(round(x * PS_PER_NS))


def us(x: float) -> TimePs:
    return int(round(x * PS_PER_US))


class InvalidInterval(ValueError):
    pass


@dataclass(frozen=True)
class BeamSegment:
    t_start: TimePs
    t_end: TimePs
    power: float
    polarization: JonesVector

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError(f"segment must have t_start < t_end, got {self.t_start}..{self.t_end}")
        if not math.isfinite(self.power) or self.power < 0:
            raise ValueError(f"segment power must be finite and >= 0, got {self.power}")


class OpticalWaveform:
    """Immutable, t_start-sorted collection of beam segments.

    Stored column-wise so that faked-state trains with millions of pulses stay
    cheap; iterate to get :class:`BeamSegment` objects.
    """

    __slots__ = ("t_start", "t_end", "power", "jones")

    def __init__(self, t_start, t_end, power, jones, *, _sorted: bool = False):
        t_start = np.asarray(t_start, dtype=np.int64).reshape(-1)
        t_end = np.asarray(t_end, dtype=np.int64).reshape(-1)
        power = np.asarray(power, dtype=np.float64).reshape(-1)
        jones = np.asarray(jones, dtype=np.complex128).reshape(-1, 2)
        n = len(t_start)
        if not (len(t_end) == len(power) == len(jones) == n):
            raise ValueError("waveform columns must have equal length")
        if n:
            if np.any(t_end <= t_start):
                raise ValueError("every segment needs t_start < t_end")
            if not np.all(np.isfinite(power)) or np.any(power < 0):
                raise ValueError("segment powers must be finite and non-negative")
        if not _sorted and n > 1:
            order = np.argsort(t_start, kind="stable")
            t_start, t_end, power, jones = t_start[order], t_end[order], power[order], jones[order]
        for arr in (t_start, t_end, power, jones):
            arr.setflags(write=False)
        object.__setattr__(self, "t_start", t_start)
        object.__setattr__(self, "t_end", t_end)
        object.__setattr__(self, "power", power)
        object.__setattr__(self, "jones", jones)

    def __setattr__(self, name, value):
        raise AttributeError("OpticalWaveform is immutable")

    @classmethod
    def empty(cls) -> OpticalWaveform:
        return cls([], [], [], np.zeros((0, 2)))

    @classmethod
    def from_segments(cls, segments: Iterable[BeamSegment]) -> OpticalWaveform:
        segs = list(segments)
        if not segs:
            return cls.empty()
        return cls(
            [s.t_start for s in segs],
            [s.t_end for s in segs],
            [s.power for s in segs],
            [(s.polarization.h, s.polarization.v) for s in segs],
        )

    def __len__(self) -> int:
        return len(self.t_start)

    def __iter__(self):
        for i in range(len(self)):
            h, v = self.jones[i]
            yield BeamSegment(int(self.t_start[i]), int(self.t_end[i]), float(self.power[i]),
                              JonesVector(complex(h), complex(v)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, OpticalWaveform):
            return NotImplemented
        return (np.array_equal(self.t_start, other.t_start) and np.array_equal(self.t_end, other.t_end)
                and np.array_equal(self.power, other.power) and np.array_equal(self.jones, other.jones))

    def __repr__(self) -> str:
        if not len(self):
            return "OpticalWaveform(<empty>)"
        return (f"OpticalWaveform({len(self)} segments, "
                f"{int(self.t_start.min())}..{int(self.t_end.max())} ps)")

    @property
    def span(self) -> tuple[TimePs, TimePs] | None:
        if not len(self):
            return None
        return int(self.t_start[0]), int(self.t_end.max())

    def scaled(self, factor: float) -> OpticalWaveform:
        """Uniform attenuation (e.g. Eve-to-Bob transmittance)."""
        if factor < 0:
            raise ValueError("attenuation factor must be >= 0")
        return OpticalWaveform(self.t_start, self.t_end, self.power * factor, self.jones, _sorted=True)

    def shifted(self, dt: TimePs) -> OpticalWaveform:
        return OpticalWaveform(self.t_start + dt, self.t_end + dt, self.power, self.jones, _sorted=True)


def power_at(w: OpticalWaveform, t: TimePs) -> float:
    """Total power of the segments covering ``t``."""
    if not len(w):
        return 0.0
    # Segments are sorted by start, so only the prefix can cover t.
    k = int(np.searchsorted(w.t_start, t, side="right"))
    covering = w.power[:k][w.t_end[:k] > t]
    return math.fsum(covering.tolist())


def superpose(a: OpticalWaveform, b: OpticalWaveform) -> OpticalWaveform:
    if not len(a):
        return b
    if not len(b):
        return a
    return OpticalWaveform(
        np.concatenate([a.t_start, b.t_start]),
        np.concatenate([a.t_end, b.t_end]),
        np.concatenate([a.power, b.power]),
        np.concatenate([a.jones, b.jones]),
    )


def superpose_all(waveforms: Sequence[OpticalWaveform]) -> OpticalWaveform:
    parts = [w for w in waveforms if len(w)]
    if not parts:
        return OpticalWaveform.empty()
    if len(parts) == 1:
        return parts[0]
    return OpticalWaveform(
        np.concatenate([w.t_start for w in parts]),
        np.concatenate([w.t_end for w in parts]),
        np.concatenate([w.power for w in parts]),
        np.concatenate([w.jones for w in parts]),
    )


def energy(w: OpticalWaveform, t0: TimePs, t1: TimePs) -> float:
    """Energy in joules delivered over ``[t0, t1]``."""
    if t0 > t1:
        raise InvalidInterval(f"t0={t0} > t1={t1}")
    if not len(w) or t0 == t1:
        return 0.0
    overlap = np.minimum(w.t_end, t1) - np.maximum(w.t_start, t0)
    mask = overlap > 0
    # Each product is exact up to one rounding; fsum keeps the sum order-free.
    return math.fsum((w.power[mask] * overlap[mask]).tolist()) * 1e-12


def piecewise_levels(w: OpticalWaveform, weights: np.ndarray | None, t0: TimePs, t1: TimePs
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Breakpoints and power levels of ``sum(weight_i * segment_i)`` on ``[t0, t1)``.

    Returns ``(times, levels)`` with ``times[0] == t0``; ``levels[i]`` holds on
    ``[times[i], times[i+1])`` (the last one up to ``t1``). Consecutive equal
    levels are merged. Powers are accumulated as integer attowatts so a level
    returns exactly to zero once every covering segment has ended.
    """
    if t1 <= t0:
        raise InvalidInterval(f"need t0 < t1, got {t0}..{t1}")
    if not len(w):
        return np.array([t0], dtype=np.int64), np.zeros(1)
    p = w.power if weights is None else w.power * weights
    start = np.maximum(w.t_start, t0)
    end = np.minimum(w.t_end, t1)
    q = np.rint(p / _POWER_QUANTUM).astype(np.int64)
    keep = (end > start) & (q != 0)
    if not np.any(keep):
        return np.array([t0], dtype=np.int64), np.zeros(1)
    start, end, q = start[keep], end[keep], q[keep]
    times = np.concatenate([start, end, [t0]])
    deltas = np.concatenate([q, -q, [0]])
    order = np.argsort(times, kind="stable")
    times, deltas = times[order], deltas[order]
    uniq, first = np.unique(times, return_index=True)
    summed = np.add.reduceat(deltas, first)
    level_q = np.cumsum(summed)
    # Drop the closing breakpoint at t1 and merge repeats.
    inside = uniq < t1
    uniq, level_q = uniq[inside], level_q[inside]
    change = np.ones(len(level_q), dtype=bool)
    change[1:] = level_q[1:] != level_q[:-1]
    return uniq[change], level_q[change] * _POWER_QUANTUM


# -- text format --------------------------------------------------------------

def write_waveform(w: OpticalWaveform, fh: TextIO | str | Path, header: str | None = None) -> None:
    """``t_start_ps t_end_ps power_W jones_hx_re jones_hx_im jones_vy_re jones_vy_im`` per line."""
    if isinstance(fh, (str, Path)):
        with open(fh, "w") as f:
            write_waveform(w, f, header)
        return
    if header:
        for line in header.splitlines():
            fh.write(f"# {line}\n")
    for i in range(len(w)):
        h, v = w.jones[i]
        fh.write(f"{int(w.t_start[i])} {int(w.t_end[i])} {float(w.power[i])!r} "
                 f"{float(h.real)!r} {float(h.imag)!r} {float(v.real)!r} {float(v.imag)!r}\n")


def read_waveform(fh: TextIO | str | Path) -> OpticalWaveform:
    if isinstance(fh, (str, Path)):
        with open(fh) as f:
            return read_waveform(f)
    ts, te, pw, jv = [], [], [], []
    for lineno, line in enumerate(fh, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"line {lineno}: expected 7 fields, got {len(parts)}")
        ts.append(int(parts[0]))
        te.append(int(parts[1]))
        pw.append(float(parts[2]))
        hr, hi, vr, vi = map(float, parts[3:])
        jv.append((complex(hr, hi), complex(vr, vi)))
    if not ts:
        return OpticalWaveform.empty()
    return OpticalWaveform(ts, te, pw, jv)
