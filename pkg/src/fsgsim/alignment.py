"""Three-step alignment of the faked-state generator against a detector bank.

1. Pick the circular blinding power from diagram-2 threshold maps.
2. Raise each pre-pulse until something clicks, then back off.
3. Place every click-launch power inside its window (geometric mean of the
   edges) and validate the resulting control matrix through the full engine.

Threshold maps are Monte-Carlo estimates of edge click probabilities on a
(blinding power, click peak power) grid. Uniform draws are shared between
grid points, so the estimated probabilities are monotone wherever the true
ones are.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import apd, rng as rngmod
from .apd import DetectorParams, Mode
from .fsg import P_MAX_OUTPUT, ControlDiagram, DiagramKind, FsgParams, LaserRole, LaserSetting
from .polarization import CHANNELS, RCP, AnalyzerChannel, JonesVector, analyzer_fractions, parse_polarization

PREPULSE_BACKOFF = 0.8


class CalibrationError(RuntimeError):
    pass


class CalibrationInfeasible(CalibrationError):
    """No operating window; carries the best-effort point and maps for inspection."""

    def __init__(self, message: str, best_effort: OperatingPoint | None = None, maps=None):
        super().__init__(message)
        self.best_effort = best_effort
        self.maps = maps or []


def logspace(lo: float, hi: float, n: int) -> tuple[float, ...]:
    return tuple(float(x) for x in np.logspace(math.log10(lo), math.log10(hi), n))


@dataclass(frozen=True)
class SweepGrid:
    blinding_powers: tuple[float, ...] = logspace(1e-7, 1e-3, 25)
    peak_powers: tuple[float, ...] = logspace(1e-4, 5e-2, 25)
    trials_per_point: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "blinding_powers", tuple(float(x) for x in self.blinding_powers))
        object.__setattr__(self, "peak_powers", tuple(float(x) for x in self.peak_powers))
        if self.trials_per_point < 100:
            raise ValueError("trials_per_point must be >= 100")
        for name in ("blinding_powers", "peak_powers"):
            g = np.asarray(getattr(self, name))
            if len(g) == 0 or np.any(g <= 0) or np.any(np.diff(g) <= 0):
                raise ValueError(f"{name} must be positive and strictly increasing")


@dataclass
class ThresholdMap:
    """Click probabilities for one target: ``probs[i, j, d]`` at blinding i, peak j, detector d."""

    target: AnalyzerChannel
    kind: DiagramKind
    blinding_powers: np.ndarray
    peak_powers: np.ndarray
    probs: np.ndarray
    blinded: np.ndarray
    trials: int

    def zero_boundary(self, detector: int) -> np.ndarray:
        """Highest peak power of the silent prefix per blinding power (NaN if never silent)."""
        silent = self.probs[:, :, detector] == 0
        out = np.full(len(self.blinding_powers), np.nan)
        for i in range(len(out)):
            if not self.blinded[i]:
                continue
            n_silent = int(np.argmin(silent[i])) if not silent[i].all() else len(self.peak_powers)
            if n_silent:
                out[i] = self.peak_powers[n_silent - 1]
        return out

    def full_boundary(self) -> np.ndarray:
        """Lowest peak power where the target clicked in every trial (NaN if none)."""
        full = self.probs[:, :, int(self.target)] == 1
        out = np.full(len(self.blinding_powers), np.nan)
        for i in range(len(out)):
            if self.blinded[i] and full[i].any():
                out[i] = self.peak_powers[int(np.argmax(full[i]))]
        return out

    def illuminated(self) -> list[int]:
        """Detectors that see any of the click-launch pulse (all but the orthogonal one)."""
        return [d for d in range(4) if d != (int(self.target) ^ 1)]

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """``(lo, hi)`` per blinding power: target 100% edge and nearest non-target 0% edge."""
        lo = self.full_boundary()
        others = [d for d in self.illuminated() if d != int(self.target)]
        hi = np.full(len(lo), np.nan)
        for i in range(len(lo)):
            if not self.blinded[i]:
                continue
            vals = [self.zero_boundary(d)[i] for d in others]
            # A detector that already clicks at the lowest grid peak has no silent edge.
            hi[i] = 0.0 if any(np.isnan(v) for v in vals) else min(vals)
        return lo, hi

    def ratio(self) -> np.ndarray:
        lo, hi = self.edges()
        with np.errstate(invalid="ignore", divide="ignore"):
            r = hi / lo
        r[np.isnan(lo)] = np.nan
        return r

    def rows(self):
        """CSV rows ``(blinding_W, peak_W, detector, p_click)``."""
        for i, b in enumerate(self.blinding_powers):
            for j, pk in enumerate(self.peak_powers):
                for d in range(4):
                    yield float(b), float(pk), CHANNELS[d].name, float(self.probs[i, j, d])


@dataclass
class OperatingPoint:
    blinding_power: float
    prepulse_powers: list[float]
    click_powers: list[float]
    window_margin: float
    diagram: str = "D3"
    blinding_polarization: tuple[float, float, float, float] = RCP.as_tuple()
    margins: list[float] = field(default_factory=lambda: [0.0] * 4)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> OperatingPoint:
        d = json.loads(text)
        d["blinding_polarization"] = tuple(d["blinding_polarization"])
        # artifacts carry extra keys such as provenance
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def fsg_params(self, diagram: ControlDiagram, **kw) -> FsgParams:
        pol = parse_polarization(self.blinding_polarization)
        if diagram.kind == DiagramKind.D1:
            kw.setdefault("insertion_delay", diagram.gap_width + FsgParams().insertion_delay)
            return FsgParams.from_powers(0.0, [0.0] * 4, [0.0] * 4, gap_power=self.blinding_power,
                                         blinding_polarization=pol, **kw)
        pre = self.prepulse_powers if diagram.kind == DiagramKind.D3 else [0.0] * 4
        return FsgParams.from_powers(self.blinding_power, pre, self.click_powers,
                                     blinding_polarization=pol, **kw)


# -- closed-form single-edge response -----------------------------------------------

def _regimes(bank, base: np.ndarray, pre: np.ndarray | None) -> np.ndarray:
    """Regime of each detector (columns) before the click pulse, for base power rows."""
    out = np.empty(base.shape, dtype=np.int64)
    for d, p in enumerate(bank):
        b = base[..., d]
        reg = np.where(b >= p.p_blind, int(Mode.BLINDED), int(Mode.ARMED))
        deep = b >= p.p_deep
        if pre is not None:
            deep = deep | ((b >= p.p_blind) & (b + pre[..., d] >= p.p_deep))
        out[..., d] = np.where(deep & (reg == int(Mode.BLINDED)), int(Mode.DEEP_BLINDED), reg)
    return out


def _edge_probs(params: DetectorParams, regime: np.ndarray, base: np.ndarray, peak: np.ndarray) -> np.ndarray:
    lo = np.where(regime == int(Mode.DEEP_BLINDED), params.p_never * params.deep_factor, params.p_never)
    hi = np.where(regime == int(Mode.DEEP_BLINDED), params.p_always * params.deep_factor, params.p_always)
    ramp = np.clip((peak - lo) / (hi - lo), 0.0, 1.0)
    rising = peak > base
    armed = regime == int(Mode.ARMED)
    return np.where(rising, np.where(armed, 1.0, ramp), 0.0)


def sweep_thresholds(bank, target, grid: SweepGrid = SweepGrid(), diagram_kind=DiagramKind.D2, *,
                     prepulse_power: float = 0.0, blinding_polarization: JonesVector = RCP,
                     seed: int = 0) -> ThresholdMap:
    """Monte-Carlo threshold map for one target detector.

    The click-launch pulse is polarized along the target, so the orthogonal
    detector receives none of it. For D3 a pre-pulse of ``prepulse_power``
    (orthogonal to the target) sets the regimes the click pulse meets.
    """
    target = AnalyzerChannel.parse(target)
    kind = DiagramKind.parse(diagram_kind)
    B = np.asarray(grid.blinding_powers)
    Pk = np.asarray(grid.peak_powers)
    f_blind = analyzer_fractions(np.array([[blinding_polarization.h, blinding_polarization.v]]))[0]
    f_click = analyzer_fractions(np.array([[target.axis.h, target.axis.v]]))[0]
    f_pre = analyzer_fractions(np.array([[target.orthogonal.axis.h, target.orthogonal.axis.v]]))[0]
    base = B[:, None] * f_blind[None, :]
    blinded = np.all(base >= np.array([p.p_blind for p in bank])[None, :], axis=1)
    if not blinded.any():
        raise CalibrationInfeasible("no grid blinding power blinds all four detectors")
    pre = base * 0 + prepulse_power * f_pre[None, :] if kind == DiagramKind.D3 else None
    regime = _regimes(bank, base, pre)
    rg = rngmod.stream(seed, rngmod.SWEEP, int(target), int(kind.value[1]))
    probs = np.empty((len(B), len(Pk), 4))
    for d, p in enumerate(bank):
        b = base[:, d][:, None]
        peak = b + Pk[None, :] * f_click[d]
        true_p = _edge_probs(p, regime[:, d][:, None], np.broadcast_to(b, peak.shape), peak)
        # One set of uniforms per blinding row, reused along the peak axis.
        u = rg.random((len(B), grid.trials_per_point))
        probs[:, :, d] = (u[:, None, :] < true_p[:, :, None]).mean(axis=2)
    return ThresholdMap(target, kind, B, Pk, probs, blinded, grid.trials_per_point)


def find_window(maps) -> OperatingPoint | None:
    """Best common blinding power for one map or a set of per-target maps."""
    if isinstance(maps, ThresholdMap):
        maps = [maps]
    maps = list(maps)
    if not maps or any(len(m.blinding_powers) == 0 for m in maps):
        return None
    best = _best_row(maps)
    if best is None:
        return None
    i, score = best
    if not score > 1:
        return None
    return _point_at(maps, i)


def _best_row(maps) -> tuple[int, float] | None:
    ratios = np.vstack([m.ratio() for m in maps])
    ok = np.all(~np.isnan(ratios), axis=0)
    if not ok.any():
        return None
    score = np.where(ok, np.nanmin(np.where(np.isnan(ratios), np.inf, ratios), axis=0), -np.inf)
    # ratios on a log grid differ by rounding only; ties go to the lowest blinding power
    i = int(np.flatnonzero(score >= score.max() * (1 - 1e-9))[0])
    return i, float(score[i])


def _point_at(maps, i: int, kind: str | None = None) -> OperatingPoint:
    clicks, margins = [0.0] * 4, [0.0] * 4
    for m in maps:
        lo, hi = m.edges()
        t = int(m.target)
        if lo[i] > 0 and hi[i] > 0 and not np.isnan(lo[i]):
            clicks[t] = math.sqrt(lo[i] * hi[i])
            margins[t] = float(hi[i] / lo[i])
        elif not np.isnan(lo[i]):
            clicks[t] = float(lo[i])
    present = [margins[int(m.target)] for m in maps]
    return OperatingPoint(float(maps[0].blinding_powers[i]), [0.0] * 4, clicks, float(min(present)),
                          diagram=kind or maps[0].kind.value, margins=margins)


def _self_clicks(bank, blinding_power: float, blind_pol: JonesVector, target: AnalyzerChannel,
                 power: float, trials: int, rg: np.random.Generator) -> bool:
    """Whether a pre-pulse of ``power`` launched any click over ``trials`` trials."""
    f_blind = analyzer_fractions(np.array([[blind_pol.h, blind_pol.v]]))[0]
    pol = target.orthogonal.axis
    f_pre = analyzer_fractions(np.array([[pol.h, pol.v]]))[0]
    for d, p in enumerate(bank):
        b = blinding_power * f_blind[d]
        regime = apd.steady_regime(p, b)
        prob = apd.edge_click_probability(p, regime, b + power * f_pre[d]) if power * f_pre[d] > 0 else 0.0
        if prob > 0 and rg.binomial(trials, prob) > 0:
            return True
    return False


def calibrate_prepulse(bank, params: FsgParams, trials: int = 1000, seed: int = 0, *,
                       backoff: float = PREPULSE_BACKOFF, iterations: int = 40,
                       p_min: float = 1e-6) -> list[float]:
    """Largest click-free pre-pulse per target, times ``backoff``, capped at the laser maximum."""
    b = params.blinding
    p_max = params.p_max_output
    out = []
    for target in CHANNELS:
        rg = rngmod.stream(seed, rngmod.SWEEP, 100 + int(target))
        if _self_clicks(bank, b.power, b.polarization, target, p_min, trials, rg):
            raise CalibrationError(f"even a {p_min} W pre-pulse launches clicks (target {target.name})")
        if not _self_clicks(bank, b.power, b.polarization, target, p_max, trials, rg):
            out.append(p_max)
            continue
        lo, hi = math.log(p_min), math.log(p_max)
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            if _self_clicks(bank, b.power, b.polarization, target, math.exp(mid), trials, rg):
                hi = mid
            else:
                lo = mid
        out.append(math.exp(lo) * backoff)
    return out


def _d1_point(bank, grid: SweepGrid) -> OperatingPoint:
    # Each detector receives the full per-laser power P from the four lasers;
    # during a gap the conjugate pair keeps P/4 and must stay blinded.
    need = max(4 * p.p_gap_off for p in bank)
    ceiling = min(p.p_never for p in bank)
    for P in grid.blinding_powers:
        if need <= P < ceiling:
            margin = min(P / need, ceiling / P)
            return OperatingPoint(P, [0.0] * 4, [0.0] * 4, margin, diagram="D1", margins=[margin] * 4)
    raise CalibrationInfeasible("no per-laser power keeps the conjugate detectors blinded during the gap")


def calibrate_all(bank, diagram: ControlDiagram, grid: SweepGrid = SweepGrid(), *, seed: int = 0,
                  blinding_polarization: JonesVector = RCP, validate: bool = True,
                  validation_trials: int | None = None, return_maps: bool = False):
    """Run blinding, pre-pulse and click-pulse alignment in order.

    Raises :class:`CalibrationInfeasible` (with the best-effort point and the
    maps attached) when some target has no window or validation fails. With
    ``return_maps`` the result is ``(point, maps)``.
    """
    from .metrics import measure_control_matrix

    kind = diagram.kind
    if kind == DiagramKind.D1:
        op = _d1_point(bank, grid)
        op.blinding_polarization = blinding_polarization.as_tuple()
        return (op, []) if return_maps else op
    d2_maps = [sweep_thresholds(bank, t, grid, DiagramKind.D2, blinding_polarization=blinding_polarization,
                                seed=seed) for t in CHANNELS]
    best = _best_row(d2_maps)
    if best is None:
        raise CalibrationInfeasible("no blinding power gives a usable target edge", maps=d2_maps)
    row, score = best
    blinding = float(grid.blinding_powers[row])
    prepulse = [0.0] * 4
    if kind == DiagramKind.D3:
        def d3_maps(power):
            base = FsgParams(blinding=LaserSetting(power, blinding_polarization, LaserRole.BLIND))
            pre = calibrate_prepulse(bank, base, grid.trials_per_point, seed)
            return pre, [sweep_thresholds(bank, t, grid, DiagramKind.D3, prepulse_power=pre[int(t)],
                                          blinding_polarization=blinding_polarization, seed=seed)
                         for t in CHANNELS]
        prepulse, maps = d3_maps(blinding)
        # pre-pulses can open windows that D2 lacks, so the D3 maps pick the row
        refined = _best_row(maps)
        if refined is not None and refined[0] != row:
            row = refined[0]
            blinding = float(grid.blinding_powers[row])
            prepulse, maps = d3_maps(blinding)
    else:
        maps = d2_maps
    op = _point_at(maps, row, kind.value)
    op.prepulse_powers = [float(x) for x in prepulse]
    op.blinding_polarization = blinding_polarization.as_tuple()
    op.click_powers = [min(c, P_MAX_OUTPUT) for c in op.click_powers]
    bad = [CHANNELS[i].name for i in range(4) if not op.margins[i] > 1]
    if bad:
        raise CalibrationInfeasible(f"no {kind.value} window for detector(s) {', '.join(bad)} "
                                    f"at blinding {blinding:.3g} W", best_effort=op, maps=maps)
    if validate:
        n = validation_trials or grid.trials_per_point
        m = measure_control_matrix(bank, op.fsg_params(diagram), diagram, n, seed)
        off = m.p[~np.eye(4, dtype=bool)]
        if np.diag(m.p).min() < 0.99 or off.max() > 0:
            raise CalibrationInfeasible(f"validation failed: diagonal {np.diag(m.p).round(4).tolist()}, "
                                        f"largest off-diagonal {off.max():.4f}", best_effort=op, maps=maps)
        op.meta["validation_diagonal"] = [float(x) for x in np.diag(m.p)]
        op.meta["validation_trials"] = n
    return (op, maps) if return_maps else op
