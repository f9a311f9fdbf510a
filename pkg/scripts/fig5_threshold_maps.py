"""Threshold maps for diagrams 2 and 3 and the windows they leave open.

For each target the window runs from the lowest peak power where the target
always clicks to the highest peak power where no neighbour clicks yet.
"""
import sys
from collections import defaultdict

from _common import OUT, SCENARIOS, cli, read_csv

NEIGHBOURS = {"H": ("P45", "M45"), "V": ("P45", "M45"), "P45": ("H", "V"), "M45": ("H", "V")}


def windows(scenario, kind, blinding):
    rows = []
    for target, others in NEIGHBOURS.items():
        _, data = read_csv(OUT / f"{scenario}_s1_map_{kind}_{target}.csv")
        cell = defaultdict(dict)
        for b, peak, det, p in data:
            if abs(float(b) / blinding - 1) < 1e-6:
                cell[float(peak)][det] = float(p)
        peaks = sorted(cell)
        full = [pk for pk in peaks if cell[pk][target] == 1]
        silent = [pk for pk in peaks if all(cell[pk].get(o, 0) == 0 for o in others)]
        lo = full[0] if full else float("nan")
        hi = max((pk for pk in silent if all(cell[q].get(o, 0) == 0 for q in peaks if q <= pk for o in others)),
                 default=float("nan"))
        rows.append((target, lo, hi, hi / lo))
    return rows


if __name__ == "__main__":
    blinding = float(sys.argv[1]) if len(sys.argv) > 1 else 1e-5
    cli("align", SCENARIOS / "diagram2.yaml", "--out", OUT)
    cli("align", SCENARIOS / "attack_d3.yaml", "--out", OUT)
    for scenario, kind in (("diagram2", "D2"), ("attack_d3", "D3")):
        print(f"{kind} at blinding {blinding:g} W")
        print(f"{'target':<8}{'always (W)':>12}{'silent (W)':>12}{'ratio':>8}")
        for target, lo, hi, r in windows(scenario, kind, blinding):
            print(f"{target:<8}{lo:12.3e}{hi:12.3e}{r:8.3f}" + ("   no window" if not r > 1 else ""))
        print()
