""" Collects the per-seed reports under a runs directory into runs.csv and a median summary.csv

	python results.py runs/har """

import json
import sys
from pathlib import Path

import pandas as pd

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from stats_utils import median_over_seeds

runs_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs")
seed_dirs = sorted(d for d in runs_dir.glob("seed_*") if d.is_dir())

rows = []
for run in seed_dirs:
	seed = int(run.name.split("_")[1])

	student_report = run / "student_report.json"
	if student_report.is_file():
		report = json.loads(student_report.read_text())
		rows.append({"seed": seed, "method": "baseline", "accuracy": report["teacher"]["accuracy"],
					 "macro_f1": report["teacher"]["macro_f1"]})
		rows.append({"seed": seed, "method": "ssd", "accuracy": report["student"]["accuracy"],
					 "macro_f1": report["student"]["macro_f1"]})

	comparison = run / "comparison.csv"
	if comparison.is_file():
		df = pd.read_csv(comparison)
		df = df[~df["method"].isin(["baseline", "ssd"])] if student_report.is_file() else df
		for record in df[["method", "accuracy", "macro_f1"]].to_dict(orient="records"):
			rows.append({"seed": seed, **record})

runs = pd.DataFrame.from_records(rows, columns=["seed", "method", "accuracy", "macro_f1"])
runs.to_csv(runs_dir / "runs.csv", index=False)

summary = median_over_seeds(runs, "method", ["accuracy", "macro_f1"])
baseline = summary.loc[summary["method"] == "baseline", "accuracy"]
if len(baseline):
	summary["delta_vs_baseline"] = summary["accuracy"] - baseline.iloc[0]
summary.to_csv(runs_dir / "summary.csv", index=False)
print(summary.to_string(index=False))
