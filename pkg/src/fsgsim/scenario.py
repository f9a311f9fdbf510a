"""Scenario files: one YAML document describing bank, link, FSG and run settings.

Times are integer picoseconds, powers watts, rates hertz. Unknown keys and
bad values raise :class:`ConfigError` with the line they came from.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import apd
from .alignment import SweepGrid, logspace
from .apd import DetectorParams
from .fsg import ControlDiagram, DiagramKind, FsgParams
from .polarization import CHANNELS, RCP, parse_polarization
from .qkd import LinkConfig


class ConfigError(ValueError):
    pass


class _LineDict(dict):
    """Mapping that remembers the source line of every key."""
    lines: dict
    line: int


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = _LineDict()
    out.lines = {}
    out.line = node.start_mark.line + 1
    for k_node, v_node in node.value:
        key = loader.construct_object(k_node, deep=True)
        if key in out:
            raise ConfigError(f"line {k_node.start_mark.line + 1}: duplicate key {key!r}")
        out[key] = loader.construct_object(v_node, deep=True)
        out.lines[key] = k_node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _line(d, key=None) -> str:
    if isinstance(d, _LineDict):
        n = d.lines.get(key, d.line) if key is not None else d.line
        return f"line {n}: "
    return ""


def _mapping(d, where: str):
    if d is None:
        return _LineDict()
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    return d


def _build(cls, d, where: str, convert=None, base=None, aliases=None):
    """Instantiate dataclass ``cls`` from mapping ``d``; unknown keys are errors.

    ``aliases`` maps a config key to ``(field, transform)``.
    """
    d = _mapping(d, where)
    names = {f.name for f in dataclasses.fields(cls)}
    aliases = aliases or {}
    kw = {}
    for key, value in d.items():
        try:
            if key in aliases:
                name, fn = aliases[key]
                kw[name] = fn(value)
            elif key in names:
                kw[key] = convert(key, value) if convert else value
            else:
                raise ConfigError(f"{_line(d, key)}unknown {where} key {key!r}")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{_line(d, key)}{where}.{key}: {exc}") from None
    try:
        return dataclasses.replace(base, **kw) if base is not None else cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{_line(d)}{where}: {exc}") from None


_TIME_FIELDS = {"deep_duration", "gap_t50", "tau_recover", "deadtime", "blind_onset", "delay",
                "channel_delay", "coincidence_window", "timestamp_cross_deadtime",
                "timestamp_min_resolution_deadtime", "insertion_delay", "gap_width", "prepulse_lead",
                "prepulse_width", "click_width"}


def _number(key, value):
    # YAML reads "1e-5" (no dot) as a string.
    if isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            return value
    if key in _TIME_FIELDS:
        if isinstance(value, bool) or float(value) != int(value):
            raise ValueError("times are integer picoseconds")
        return int(value)
    return value


def _fwhm(value) -> float:
    return apd.sigma_for_fwhm(float(value))


_DETECTOR_ALIASES = {"jitter_fwhm_geiger": ("jitter_sigma_geiger", _fwhm),
                     "jitter_fwhm_linear": ("jitter_sigma_linear", _fwhm)}


def _detector(d, where, base: DetectorParams) -> DetectorParams:
    return _build(DetectorParams, d, where, _number, base=base, aliases=_DETECTOR_ALIASES)


def parse_bank(spec, where="bank") -> tuple:
    """``default`` / ``symmetric`` preset, a list of four detector mappings, or
    ``{preset, all, H, V, P45, M45}`` overrides on a preset."""
    if spec is None:
        return apd.default_bank()
    if isinstance(spec, str):
        return _preset(spec, spec, where)
    if isinstance(spec, list):
        if len(spec) != 4:
            raise ConfigError(f"{where} needs exactly four detectors")
        return tuple(_detector(s, f"{where}[{i}]", DetectorParams()) for i, s in enumerate(spec))
    spec = _mapping(spec, where)
    extra = set(spec) - {"preset", "all", *(c.name for c in CHANNELS)}
    if extra:
        key = sorted(extra)[0]
        raise ConfigError(f"{_line(spec, key)}unknown {where} key {key!r}")
    bank = list(_preset(spec.get("preset", "default"), spec, where))
    if "all" in spec:
        bank = [_detector(spec["all"], f"{where}.all", p) for p in bank]
    for c in CHANNELS:
        if c.name in spec:
            bank[int(c)] = _detector(spec[c.name], f"{where}.{c.name}", bank[int(c)])
    return tuple(bank)


def _preset(name, holder, where):
    if name == "default":
        return apd.default_bank()
    if name == "symmetric":
        return apd.symmetric_bank()
    raise ConfigError(f"{_line(holder, 'preset') if isinstance(holder, dict) else ''}unknown {where} preset {name!r}")


def _link(d) -> LinkConfig:
    return _build(LinkConfig, d, "link", _number)


def _diagram(d) -> ControlDiagram:
    if d is None:
        return ControlDiagram()
    if isinstance(d, str):
        try:
            return ControlDiagram(kind=DiagramKind.parse(d))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return _build(ControlDiagram, d, "diagram", _number)


def _range(v, where):
    if isinstance(v, dict):
        try:
            return logspace(float(v["min"]), float(v["max"]), int(v["n"]))
        except KeyError:
            raise ConfigError(f"{_line(v)}{where} needs min, max and n") from None
    return tuple(float(x) for x in v)


def _grid(d) -> SweepGrid:
    d = _mapping(d, "grid")
    conv = {}
    for key, value in d.items():
        if key in ("blinding_powers", "peak_powers"):
            conv[key] = _range(value, f"grid.{key}")
        elif key == "trials_per_point":
            conv[key] = int(value)
        else:
            raise ConfigError(f"{_line(d, key)}unknown grid key {key!r}")
    try:
        return SweepGrid(**conv)
    except ValueError as exc:
        raise ConfigError(f"{_line(d)}grid: {exc}") from None


@dataclass
class FsgSpec:
    """Either calibrate (``auto``), load an operating point, or take explicit powers."""
    mode: str = "auto"
    operating_point: str | None = None
    settings: dict = field(default_factory=dict)


_FSG_PASS = {"insertion_delay", "fsg_jitter_sigma", "trims", "output_transmittance", "p_max_output"}


def _fsg(d) -> FsgSpec | None:
    if d is None:
        return None
    if d == "auto":
        return FsgSpec("auto")
    d = _mapping(d, "fsg")
    allowed = {"operating_point", "blinding_power", "blinding_polarization", "prepulse_powers",
               "click_powers", "gap_power", "fsg_jitter_fwhm", "auto"} | _FSG_PASS
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{_line(d, key)}unknown fsg key {key!r}")
    settings = dict(d)
    mode = "explicit"
    if settings.pop("auto", False):
        mode = "auto"
    op = settings.pop("operating_point", None)
    if op is not None:
        mode = "file"
    return FsgSpec(mode, op, settings)


@dataclass
class Scenario:
    name: str
    seed: int
    bank: tuple
    eve_bank: tuple | None
    link: LinkConfig
    diagram: ControlDiagram
    fsg: FsgSpec | None
    grid: SweepGrid
    n_pulses: int
    matrix_trials: int
    output_dir: Path
    digest: str
    base_dir: Path = Path(".")

    def fsg_extra(self) -> dict:
        """FSG knobs layered on top of a calibrated or loaded operating point."""
        if self.fsg is None:
            return {}
        s = self.fsg.settings
        kw = {k: (tuple(int(x) for x in s[k]) if k == "trims" else
                  int(s[k]) if k == "insertion_delay" else float(s[k])) for k in _FSG_PASS & set(s)}
        if "fsg_jitter_fwhm" in s:
            kw["fsg_jitter_sigma"] = apd.sigma_for_fwhm(float(s["fsg_jitter_fwhm"]))
        return kw

    def explicit_fsg(self) -> FsgParams:
        s = self.fsg.settings
        pol = parse_polarization(s.get("blinding_polarization", "RCP"))
        try:
            return FsgParams.from_powers(float(s.get("blinding_power", 0.0)),
                                         [float(x) for x in s.get("prepulse_powers", [0.0] * 4)],
                                         [float(x) for x in s.get("click_powers", [0.0] * 4)],
                                         blinding_polarization=pol, gap_power=float(s.get("gap_power", 0.0)),
                                         **self.fsg_extra())
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"fsg: {exc}") from None

    def operating_point_path(self) -> Path | None:
        if self.fsg is None or self.fsg.operating_point is None:
            return None
        p = Path(self.fsg.operating_point)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def blinding_polarization(self):
        if self.fsg is None:
            return RCP
        return parse_polarization(self.fsg.settings.get("blinding_polarization", "RCP"))


_TOP = {"name", "seed", "bank", "eve_bank", "link", "diagram", "fsg", "grid", "n_pulses", "matrix",
        "output_dir"}


def loads(text: str, name: str = "scenario", base_dir: Path = Path(".")) -> Scenario:
    try:
        doc = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}: " if mark else ""
        raise ConfigError(f"{where}{exc.problem}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(str(exc)) from None
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a mapping")
    for key in doc:
        if key not in _TOP:
            raise ConfigError(f"{_line(doc, key)}unknown top-level key {key!r}")
    if "seed" not in doc:
        raise ConfigError("seed is mandatory")
    seed = doc["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"{_line(doc, 'seed')}seed must be a non-negative integer")
    fsg = _fsg(doc.get("fsg"))
    if fsg is not None and fsg.mode == "auto" and "grid" not in doc:
        raise ConfigError(f"{_line(doc, 'fsg')}fsg: auto needs a grid section")
    matrix = _mapping(doc.get("matrix"), "matrix")
    for key in matrix:
        if key != "n_trials":
            raise ConfigError(f"{_line(matrix, key)}unknown matrix key {key!r}")
    try:
        n_pulses = int(doc.get("n_pulses", 100_000))
        trials = int(matrix.get("n_trials", 10_000))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return Scenario(
        name=str(doc.get("name", name)),
        seed=seed,
        bank=parse_bank(doc.get("bank")),
        eve_bank=parse_bank(doc["eve_bank"], "eve_bank") if doc.get("eve_bank") is not None else None,
        link=_link(doc.get("link")),
        diagram=_diagram(doc.get("diagram")),
        fsg=fsg,
        grid=_grid(doc.get("grid")),
        n_pulses=n_pulses,
        matrix_trials=trials,
        output_dir=Path(str(doc.get("output_dir", "out"))),
        digest=hashlib.sha256(text.encode()).hexdigest()[:16],
        base_dir=base_dir,
    )


def load(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return loads(text, path.stem, path.parent)
