""" Plots the sweep tables written by `ssd.py ablate` and the per-seed runs.csv from results.py

	python plot_results.py runs/har_eps runs/har_dropout runs/har """

import json
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd
import seaborn as sns


sns.set_style("darkgrid")

AXES = ["p_t", "eps", "n", "lam", "h", "top_k"]
dirs = [Path(d) for d in sys.argv[1:]] or [Path("runs")]
plot_dir = Path("plotted_results")
plot_dir.mkdir(exist_ok=True)

for run_dir in dirs:
	ablation = run_dir / "ablation.csv"
	if ablation.is_file():
		df = pd.read_csv(ablation)
		swept = [axis for axis in AXES if axis in df.columns and df[axis].nunique() > 1]
		meta = run_dir / "ablation.json"
		baseline = json.loads(meta.read_text()).get("baseline_accuracy") if meta.is_file() else None

		for axis in swept:
			others = [a for a in swept if a != axis]
			plt.figure()
			plt.title(f"Student accuracy over {axis}")
			fig = sns.lineplot(data=df, x=axis, y="accuracy", hue=others[0] if others else None, marker="o")
			if baseline is not None:
				fig.axhline(baseline, ls="--", color="grey", label="teacher")
				fig.legend()
			fig.figure.savefig(plot_dir / f"{run_dir.name}_{axis}_accuracy.png")
			plt.close(fig.figure)

		if "p_t" in swept:
			plt.figure()
			plt.title("Teacher representation variance")
			fig = sns.lineplot(data=df, x="p_t", y="rep_variance", marker="o")
			fig.figure.savefig(plot_dir / f"{run_dir.name}_variance.png")
			plt.close(fig.figure)

	runs = run_dir / "runs.csv"
	if runs.is_file():
		df = pd.read_csv(runs)
		plt.figure()
		plt.title("Test accuracy per seed")
		fig = sns.boxplot(data=df, x="method", y="accuracy")
		fig.set_xticklabels(fig.get_xticklabels(), rotation=30)
		fig.figure.tight_layout()
		fig.figure.savefig(plot_dir / f"{run_dir.name}_methods.png")
		plt.close(fig.figure)
