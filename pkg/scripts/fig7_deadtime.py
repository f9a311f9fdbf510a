"""Inter-click interval histograms per detector pair, with and without Eve."""
from collections import defaultdict

from _common import OUT, SCENARIOS, cli, read_csv

if __name__ == "__main__":
    cli("report", SCENARIOS / "attack_d3.yaml", "--out", OUT)
    for tag in ("baseline", "attack"):
        _, rows = read_csv(OUT / f"attack_d3_s1_deadtime_{tag}.csv")
        first = defaultdict(lambda: None)
        for a, b, center, n in rows:
            if int(n) and first[a, b] is None:
                first[a, b] = int(center)
        print(f"{tag}: shortest populated interval bin (ns)")
        names = ["H", "V", "P45", "M45"]
        print("first\\next" + "".join(f"{n:>8}" for n in names))
        for a in names:
            cells = [first[a, b] for b in names]
            print(f"{a:<10}" + "".join(f"{c / 1e3:8.0f}" if c is not None else f"{'-':>8}" for c in cells))
        print()
