"""Click probability after a gap in the blinding light, per detector."""
from collections import defaultdict

from _common import OUT, SCENARIOS, cli, read_csv

GAPS_NS = [0, 100, 200, 300, 400, 500, 600, 700, 800, 1000, 2000, 5000]

if __name__ == "__main__":
    cli("sweep", SCENARIOS / "diagram1.yaml", "--out", OUT, "--kind", "gap",
        "--gaps", *[g * 1000 for g in GAPS_NS], "--trials", 10_000)
    _, rows = read_csv(OUT / "diagram1_s1_gap_curve.csv")
    table = defaultdict(dict)
    for det, gap, p, _ in rows:
        table[int(gap)][det] = float(p)
    names = ["H", "V", "P45", "M45"]
    print(f"{'gap (ns)':>9}" + "".join(f"{n:>8}" for n in names))
    for g in sorted(table):
        print(f"{g / 1e3:9.0f}" + "".join(f"{table[g][n]:8.4f}" for n in names))
