"""Control matrices for the three diagrams on the default bank.

Diagram 2 has no window on this bank, so its matrix is measured at the
best-effort operating point that `align` still writes.
"""
import json

from _common import OUT, SCENARIOS, cli, show_matrix


def matrix(scenario, diagram, op=None):
    sc = SCENARIOS / f"{scenario}.yaml"
    argv = ["matrix", sc, "--out", OUT, "--diagram", diagram]
    if op is not None:
        argv += ["--operating-point", op]
    cli(*argv)
    return json.loads((OUT / f"{scenario}_s1_matrix_{diagram}.json").read_text())["p"]


if __name__ == "__main__":
    show_matrix("diagram 1 (600 ns gap)", matrix("diagram1", "D1"))
    cli("align", SCENARIOS / "diagram2.yaml", "--out", OUT)
    show_matrix("diagram 2 (best effort, no window for M45)",
                matrix("diagram2", "D2", OUT / "diagram2_s1_operating_point.json"))
    show_matrix("diagram 3", matrix("attack_d3", "D3"))
