"""Alice-Bob coincidence peak with and without Eve (about 40 s for 10^7 pulses)."""
import json

from _common import OUT, SCENARIOS, cli

if __name__ == "__main__":
    cli("report", SCENARIOS / "timing.yaml", "--out", OUT)
    doc = json.loads((OUT / "timing_s3_report.json").read_text())
    a = doc["attack"]
    print(f"no Eve     FWHM {a['baseline_jitter_fwhm_ps']:.1f} ps")
    print(f"with Eve   FWHM {a['jitter_fwhm_ps']:.1f} ps")
    print(f"insertion delay {a['insertion_delay_ps'] / 1e3:.3f} ns")
    print(f"histograms: {OUT}/timing_s3_jitter_baseline.csv, {OUT}/timing_s3_jitter_attack.csv")
