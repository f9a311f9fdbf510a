"""Shared helpers for the figure scripts: run the CLI and read its CSV output."""
import csv
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from fsgsim.cli import main  # noqa: E402

SCENARIOS = ROOT / "scenarios"
OUT = ROOT / "out" / "figures"


def cli(*argv) -> int:
    code = main([str(a) for a in argv])
    if code not in (0, 3):
        sys.exit(code)
    return code


def read_csv(path):
    with open(path) as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    return rows[0], rows[1:]


def show_matrix(title, p):
    names = ["H", "V", "P45", "M45"]
    print(title)
    print("target   " + "".join(f"{n:>8}" for n in names))
    for n, row in zip(names, p):
        print(f"{n:<9}" + "".join(f"{x:8.4f}" for x in row))
    print()
