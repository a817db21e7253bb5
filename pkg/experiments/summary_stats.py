""" Descriptive statistics of runs.csv per method

	python summary_stats.py runs/har """

import sys
from pathlib import Path

import pandas as pd

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from stats_utils import describe_runs

runs_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs")
df = pd.read_csv(runs_dir / "runs.csv")

for method, group in df.groupby("method"):
	print(method)
	print(describe_runs(group, ["accuracy", "macro_f1"]))
