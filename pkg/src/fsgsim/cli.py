"""Command-line runner: ``fsgsim <command> SCENARIO.yaml``.

Exit codes: 0 success, 2 configuration error, 3 calibration infeasible,
4 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, alignment, metrics, qkd
from .alignment import CalibrationInfeasible, OperatingPoint
from .fsg import ControlDiagram, DiagramKind, FsgParams, build_faked_state
from .polarization import CHANNELS, AnalyzerChannel
from .scenario import ConfigError, Scenario, load
from .timeline import write_waveform

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_RUNTIME = 0, 2, 3, 4


class Artifacts:
    """Writes provenance-stamped files named ``<scenario>_s<seed>_<what>.<ext>``."""

    def __init__(self, sc: Scenario, out: Path, command: str):
        self.sc = sc
        self.out = out
        self.command = command
        self.written: list[Path] = []
        out.mkdir(parents=True, exist_ok=True)

    @property
    def provenance(self) -> dict:
        return {"scenario": self.sc.name, "scenario_sha256": self.sc.digest, "seed": self.sc.seed,
                "version": __version__, "command": self.command}

    def path(self, what: str, ext: str) -> Path:
        return self.out / f"{self.sc.name}_s{self.sc.seed}_{what}.{ext}"

    def header(self) -> str:
        p = self.provenance
        return " ".join(f"{k}={p[k]}" for k in ("scenario", "scenario_sha256", "seed", "version", "command"))

    def json(self, what: str, obj: dict) -> Path:
        p = self.path(what, "json")
        doc = {"provenance": self.provenance, **obj}
        p.write_text(json.dumps(_plain(doc), indent=2, sort_keys=True) + "\n")
        self.written.append(p)
        return p

    def csv(self, what: str, columns, rows) -> Path:
        p = self.path(what, "csv")
        with open(p, "w", newline="") as fh:
            fh.write(f"# {self.header()}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([repr(x) if isinstance(x, float) else x for x in row])
        self.written.append(p)
        return p


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, float) and x != x:
        return None
    return x


def _diagram(sc: Scenario, override: str | None) -> ControlDiagram:
    if override is None:
        return sc.diagram
    return ControlDiagram(DiagramKind.parse(override), sc.diagram.gap_width, sc.diagram.prepulse_lead,
                          sc.diagram.prepulse_width, sc.diagram.click_width)


def resolve_fsg(sc: Scenario, diagram: ControlDiagram, op_path: str | None = None) -> tuple[FsgParams, OperatingPoint | None]:
    """FSG parameters from a CLI operating point, the scenario, or a fresh calibration."""
    path = Path(op_path) if op_path else sc.operating_point_path()
    if path is not None:
        try:
            op = OperatingPoint.from_json(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read operating point {path}: {exc.strerror}") from None
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"bad operating point {path}: {exc}") from None
        return op.fsg_params(diagram, **sc.fsg_extra()), op
    if sc.fsg is None:
        raise ConfigError("missing operating point: give --operating-point or an fsg section")
    if sc.fsg.mode == "explicit":
        return sc.explicit_fsg(), None
    op = alignment.calibrate_all(sc.bank, diagram, sc.grid, seed=sc.seed,
                                 blinding_polarization=sc.blinding_polarization)
    return op.fsg_params(diagram, **sc.fsg_extra()), op


def _write_maps(art: Artifacts, maps) -> None:
    for m in maps:
        art.csv(f"map_{m.kind.value}_{m.target.name}", ["blinding_W", "peak_W", "detector", "p_click"], m.rows())


def cmd_align(sc: Scenario, args, art: Artifacts) -> int:
    diagram = _diagram(sc, args.diagram)
    try:
        op, maps = alignment.calibrate_all(sc.bank, diagram, sc.grid, seed=sc.seed,
                                           blinding_polarization=sc.blinding_polarization, return_maps=True)
    except CalibrationInfeasible as exc:
        _write_maps(art, exc.maps)
        if exc.best_effort is not None:
            exc.best_effort.meta["feasible"] = False
            exc.best_effort.meta["reason"] = str(exc)
            art.json("operating_point", json.loads(exc.best_effort.to_json()))
        print(f"no window: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    _write_maps(art, maps)
    op.meta["feasible"] = True
    art.json("operating_point", json.loads(op.to_json()))
    return EXIT_OK


def _stream_csv(art: Artifacts, what: str, s: qkd.ClickStream) -> None:
    art.csv(what, ["detector", "time_ps", "origin"], ((CHANNELS[d].name, t, o) for d, t, o in s.rows()))


def _run(sc: Scenario, args, eve: bool | None = None) -> qkd.LinkResult:
    cfg = sc.link if eve is None else sc.link.with_(eve_present=eve)
    fsg = diagram = None
    if cfg.eve_present:
        diagram = _diagram(sc, getattr(args, "diagram", None))
        if cfg.eve_mode == qkd.EveMode.FAKED_STATE:
            fsg, _ = resolve_fsg(sc, diagram, getattr(args, "operating_point", None))
    return qkd.run_link(cfg, sc.bank, fsg, diagram, n_pulses=sc.n_pulses, seed=sc.seed, eve_bank=sc.eve_bank)


def cmd_simulate(sc: Scenario, args, art: Artifacts) -> int:
    res = _run(sc, args)
    art.json("stats", {"stats": res.stats})
    _stream_csv(art, "bob_clicks", res.bob)
    if sc.link.eve_present:
        _stream_csv(art, "bob_prime_clicks", res.bob_prime)
    if args.write_alice:
        a = res.alice
        art.csv("alice", ["time_ps", "basis", "bit"], zip(a.times.tolist(), a.bases.tolist(), a.bits.tolist()))
    return EXIT_OK


def cmd_matrix(sc: Scenario, args, art: Artifacts) -> int:
    diagram = _diagram(sc, args.diagram)
    fsg, _ = resolve_fsg(sc, diagram, args.operating_point)
    n = args.n_trials or sc.matrix_trials
    m = metrics.measure_control_matrix(sc.bank, fsg, diagram, n, sc.seed)
    tag = f"matrix_{diagram.kind.value}"
    art.csv(tag, ["target", "detector", "p_click", "clicks"], m.rows())
    art.json(tag, {"diagram": diagram.kind.value, "n_trials": n, "p": m.p})
    return EXIT_OK


def cmd_report(sc: Scenario, args, art: Artifacts) -> int:
    baseline = _run(sc, args, eve=False)
    runs = {"baseline": baseline}
    if sc.link.eve_present:
        runs["attack"] = _run(sc, args, eve=True)
    doc = {"baseline": metrics.detectability_report(baseline, baseline)}
    if "attack" in runs:
        doc["attack"] = metrics.detectability_report(runs["attack"], baseline)
    art.json("report", doc)
    for tag, run in runs.items():
        h = metrics.jitter_histogram(run)
        art.csv(f"jitter_{tag}", ["bin_center_ps", "count"], h.rows())
        hists = metrics.deadtime_histograms(run.bob.times, run.bob.detectors)
        rows = ((CHANNELS[a].name, CHANNELS[b].name, c, n) for (a, b), hh in sorted(hists.items())
                for c, n in hh.rows())
        art.csv(f"deadtime_{tag}", ["first", "second", "bin_center_ps", "count"], rows)
    return EXIT_OK


def cmd_dump_fsg(sc: Scenario, args, art: Artifacts) -> int:
    diagram = _diagram(sc, args.diagram)
    fsg, _ = resolve_fsg(sc, diagram, args.operating_point)
    target = AnalyzerChannel.parse(args.target)
    w = build_faked_state(target, diagram, fsg, int(args.t_click))
    p = art.path(f"fsg_{diagram.kind.value}_{target.name}", "txt")
    write_waveform(w, p, header=art.header())
    art.written.append(p)
    return EXIT_OK


def cmd_sweep(sc: Scenario, args, art: Artifacts) -> int:
    if args.kind == "gap":
        gaps = [int(g) for g in args.gaps]
        rows = []
        for d, p in enumerate(sc.bank):
            probs = metrics.gap_curve(p, gaps, args.trials, sc.seed, detector=d)
            rows += [(CHANNELS[d].name, g, float(pr), args.trials) for g, pr in zip(gaps, probs)]
        art.csv("gap_curve", ["detector", "gap_ps", "p_click", "trials"], rows)
        return EXIT_OK
    kind = DiagramKind.parse(args.diagram or "D2")
    pre = [0.0] * 4
    if kind == DiagramKind.D3:
        fsg, _ = resolve_fsg(sc, _diagram(sc, "D3"), args.operating_point)
        pre = [p.power for p in fsg.prepulse]
    for t in CHANNELS:
        m = alignment.sweep_thresholds(sc.bank, t, sc.grid, kind, prepulse_power=pre[int(t)],
                                       blinding_polarization=sc.blinding_polarization, seed=sc.seed)
        _write_maps(art, [m])
    return EXIT_OK


COMMANDS = {"align": cmd_align, "simulate-qkd": cmd_simulate, "matrix": cmd_matrix, "report": cmd_report,
            "dump-fsg": cmd_dump_fsg, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fsgsim", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("scenario", help="scenario YAML file")
        p.add_argument("--out", help="output directory (default: the scenario's output_dir)")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        return p

    p = add("align", "calibrate the FSG and write threshold maps and an operating point")
    p.add_argument("--diagram", choices=["D1", "D2", "D3"])
    p = add("simulate-qkd", "run a BB84 link and write stats and click streams")
    p.add_argument("--operating-point")
    p.add_argument("--diagram", choices=["D1", "D2", "D3"])
    p.add_argument("--write-alice", action="store_true", help="also write Alice's events")
    p = add("matrix", "measure a control matrix")
    p.add_argument("--operating-point")
    p.add_argument("--diagram", choices=["D1", "D2", "D3"])
    p.add_argument("--n-trials", type=int)
    p = add("report", "detectability report of a baseline and an attacked run")
    p.add_argument("--operating-point")
    p.add_argument("--diagram", choices=["D1", "D2", "D3"])
    p = add("dump-fsg", "write one faked state as a waveform text file")
    p.add_argument("--operating-point")
    p.add_argument("--diagram", choices=["D1", "D2", "D3"])
    p.add_argument("--target", default="H")
    p.add_argument("--t-click", type=int, default=0, help="Bob' click time in ps")
    p = add("sweep", "gap-recovery curve or threshold maps")
    p.add_argument("--kind", choices=["gap", "threshold"], default="gap")
    p.add_argument("--diagram", choices=["D2", "D3"])
    p.add_argument("--operating-point")
    p.add_argument("--gaps", nargs="+", type=int,
                   default=[0, 100_000, 200_000, 300_000, 400_000, 500_000, 600_000, 700_000, 800_000,
                            1_000_000, 2_000_000, 5_000_000])
    p.add_argument("--trials", type=int, default=10_000)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        sc = load(args.scenario)
        if args.seed is not None:
            sc.seed = args.seed
        out = Path(args.out) if args.out else sc.output_dir
        art = Artifacts(sc, out, args.command)
        code = COMMANDS[args.command](sc, args, art)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationInfeasible as exc:
        print(f"calibration infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for p in art.written:
        print(p)
    return code


if __name__ == "__main__":
    sys.exit(main())
