"""
	Trains a teacher and its SSD student for a range of seeds, one run directory per seed.

	Sample usage
	- Seeds 0, 1 and 2 of the HAR recipe into runs/har/seed_0 ... seed_2:
		python seed_runs_script.py har.toml 0 3
	- Same, also building the comparison table (members are trained when missing):
		python seed_runs_script.py har.toml 0 3 compare"""

import logging
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import config_utils as cu
import ssd

config = Path(sys.argv[1])
start_seed, end_seed = int(sys.argv[2]), int(sys.argv[3])
with_compare = len(sys.argv) > 4 and sys.argv[4] == "compare"

base_dir = Path(cu.load_config(config).output.dir)
logger = logging.getLogger("seed_runs")

for seed in range(start_seed, end_seed):
	run_dir = base_dir / f"seed_{seed}"
	common = ["--config", str(config), "--output", str(run_dir), "--seed", str(seed)]
	commands = [["train-teacher"], ["train-student"]]
	if with_compare:
		commands.append(["compare", "--train-members"])

	for command in commands:
		code = ssd.main(command + common)
		if code != 0:
			logger.error("seed %d: %s exited with %d", seed, command[0], code)
			sys.exit(code)
