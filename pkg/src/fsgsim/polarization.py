"""Jones vectors and Bob's passive four-detector polarization analyzer.

The analyzer is a lossless 50/50 beamsplitter choosing the basis, followed
by a PBS in the H/V arm and a PBS behind a 22.5 deg half-wave plate in the
diagonal arm. Classical light splits deterministically; single photons are
routed at random with the same probabilities.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
import numpy as np

NORM_TOL = 1e-9
SNAP = 8 * np.finfo(float).eps


class NormalizationError(ValueError):
    pass


@dataclass(frozen=True)
class JonesVector:
    h: complex
    v: complex

    def __post_init__(self):
        object.__setattr__(self, "h", complex(self.h))
        object.__setattr__(self, "v", complex(self.v))
        n = abs(self.h) ** 2 + abs(self.v) ** 2
        if abs(n - 1.0) > NORM_TOL:
            raise NormalizationError(f"Jones vector must be unit norm, |h|^2+|v|^2 = {n}")

    @classmethod
    def normalized(cls, h: complex, v: complex) -> JonesVector:
        n = math.sqrt(abs(h) ** 2 + abs(v) ** 2)
        if n == 0:
            raise NormalizationError("zero Jones vector")
        return cls(h / n, v / n)

    @classmethod
    def linear(cls, angle: float) -> JonesVector:
        """Linear polarization at ``angle`` radians from horizontal."""
        return cls(math.cos(angle), math.sin(angle))

    @classmethod
    def elliptical(cls, azimuth: float, ellipticity: float) -> JonesVector:
        """Ellipse with major axis at ``azimuth`` and ellipticity angle ``ellipticity``.

        ``ellipticity = +pi/4`` is right-circular, ``0`` is linear.
        """
        c, s = math.cos(ellipticity), math.sin(ellipticity)
        ca, sa = math.cos(azimuth), math.sin(azimuth)
        return cls.normalized(ca * c + 1j * sa * s, sa * c - 1j * ca * s)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.h.real, self.h.imag, self.v.real, self.v.imag)

    def inner(self, other: JonesVector) -> complex:
        """<self|other>."""
        return self.h.conjugate() * other.h + self.v.conjugate() * other.v

    def orthogonal(self) -> JonesVector:
        return JonesVector(-self.v.conjugate(), self.h.conjugate())


_R2 = 1 / math.sqrt(2)

H = JonesVector(1, 0)
V = JonesVector(0, 1)
P45 = JonesVector(_R2, _R2)
M45 = JonesVector(_R2, -_R2)
# Sign convention: RCP = (H - iV)/sqrt(2).
RCP = JonesVector(_R2, -1j * _R2)
LCP = JonesVector(_R2, 1j * _R2)

NAMED_STATES = {"H": H, "V": V, "P45": P45, "M45": M45, "RCP": RCP, "LCP": LCP}


class AnalyzerChannel(enum.IntEnum):
    H = 0
    V = 1
    P45 = 2
    M45 = 3

    @property
    def axis(self) -> JonesVector:
        return _AXES[self]

    @property
    def basis(self) -> int:
        """0 for the H/V basis, 1 for the diagonal basis."""
        return int(self) // 2

    @property
    def bit(self) -> int:
        return int(self) % 2

    @property
    def orthogonal(self) -> AnalyzerChannel:
        return AnalyzerChannel(int(self) ^ 1)

    @classmethod
    def parse(cls, value) -> AnalyzerChannel:
        if isinstance(value, AnalyzerChannel):
            return value
        if isinstance(value, str):
            key = value.strip().upper().replace("+45", "P45").replace("-45", "M45")
            try:
                return cls[key]
            except KeyError:
                raise ValueError(f"unknown analyzer channel {value!r}") from None
        return cls(int(value))

    @classmethod
    def from_basis_bit(cls, basis: int, bit: int) -> AnalyzerChannel:
        return cls(2 * basis + bit)


CHANNELS = tuple(AnalyzerChannel)
_AXES = {AnalyzerChannel.H: H, AnalyzerChannel.V: V,
         AnalyzerChannel.P45: P45, AnalyzerChannel.M45: M45}


def parse_polarization(spec) -> JonesVector:
    """Named state (H, V, P45, M45, RCP, LCP) or an ``(h_re, h_im, v_re, v_im)`` 4-tuple."""
    if isinstance(spec, JonesVector):
        return spec
    if isinstance(spec, str):
        key = spec.strip().upper().replace("+45", "P45").replace("-45", "M45")
        if key not in NAMED_STATES:
            raise ValueError(f"unknown polarization name {spec!r}")
        return NAMED_STATES[key]
    vals = [float(x) for x in spec]
    if len(vals) != 4:
        raise ValueError(f"explicit Jones polarization needs 4 numbers, got {len(vals)}")
    return JonesVector(complex(vals[0], vals[1]), complex(vals[2], vals[3]))


def _check_norm(x: JonesVector):
    n = abs(x.h) ** 2 + abs(x.v) ** 2
    if abs(n - 1.0) > NORM_TOL:
        raise NormalizationError(f"not unit norm: {n}")


def _snap(f: np.ndarray) -> np.ndarray:
    # Rounding in |<a|s>|^2 must not leak light into an orthogonal channel.
    f = np.clip(f, 0.0, 1.0)
    return np.where(f < SNAP, 0.0, np.where(f > 1.0 - SNAP, 1.0, f))


def malus_fraction(state: JonesVector, axis: JonesVector) -> float:
    _check_norm(state)
    _check_norm(axis)
    return float(_snap(np.array(abs(axis.inner(state)) ** 2)))


def hwp_matrix(plate_angle: float) -> np.ndarray:
    c, s = math.cos(2 * plate_angle), math.sin(2 * plate_angle)
    return np.array([[c, s], [s, -c]], dtype=complex)


def hwp_rotate(state: JonesVector, plate_angle: float) -> JonesVector:
    """Half-wave plate with fast axis at ``plate_angle`` (radians)."""
    _check_norm(state)
    h, v = hwp_matrix(plate_angle) @ np.array([state.h, state.v])
    return JonesVector.normalized(complex(h), complex(v))


def _split_pair(total: float, frac: float) -> tuple[float, float]:
    # The larger share is computed by multiplication, the smaller as the exact
    # remainder (Sterbenz), so each pair sums to `total` with no rounding.
    if frac >= 0.5:
        big = total * frac
        return big, total - big
    big = total * (1.0 - frac)
    return total - big, big


def analyzer_split(power: float, state: JonesVector) -> dict[AnalyzerChannel, float]:
    if power < 0:
        raise ValueError("power must be >= 0")
    half = power * 0.5
    fh = malus_fraction(state, H)
    fd = malus_fraction(state, P45)
    ph, pv = _split_pair(half, fh)
    pp, pm = _split_pair(half, fd)
    return {AnalyzerChannel.H: ph, AnalyzerChannel.V: pv,
            AnalyzerChannel.P45: pp, AnalyzerChannel.M45: pm}


def analyzer_fractions(jones: np.ndarray) -> np.ndarray:
    """Per-detector power fractions, shape (N, 4), for an (N, 2) array of Jones vectors."""
    jones = np.asarray(jones, dtype=complex).reshape(-1, 2)
    h, v = jones[:, 0], jones[:, 1]
    fh = _snap(np.abs(h) ** 2)
    fd = _snap(np.abs((h + v) * _R2) ** 2)
    out = np.empty((len(jones), 4))
    for col, f in ((0, fh), (2, fd)):
        big = np.where(f >= 0.5, 0.5 * f, 0.5 * (1.0 - f))
        small = 0.5 - big
        out[:, col] = np.where(f >= 0.5, big, small)
        out[:, col + 1] = np.where(f >= 0.5, small, big)
    return out


def channel_probabilities(state: JonesVector) -> np.ndarray:
    """Probabilities of a single photon ending in H, V, P45, M45."""
    return analyzer_fractions(np.array([[state.h, state.v]]))[0]


def single_photon_route(state: JonesVector, rng: np.random.Generator) -> AnalyzerChannel:
    _check_norm(state)
    basis = 0 if rng.random() < 0.5 else 1
    first = malus_fraction(state, H if basis == 0 else P45)
    bit = 0 if rng.random() < first else 1
    return AnalyzerChannel.from_basis_bit(basis, bit)


def route_photons(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorised routing; ``probs`` is (N, 4) channel probabilities. Returns int8 channel ids."""
    probs = np.asarray(probs)
    n = len(probs)
    basis = (rng.random(n) >= 0.5).astype(np.int8)
    first = np.where(basis == 0, probs[:, 0], probs[:, 2]) * 2.0
    bit = (rng.random(n) >= first).astype(np.int8)
    return (2 * basis + bit).astype(np.int8)


def state_for(basis: int, bit: int) -> JonesVector:
    return _AXES[AnalyzerChannel.from_basis_bit(basis, bit)]
