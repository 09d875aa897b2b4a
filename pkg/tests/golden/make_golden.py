"""Regenerate the frozen report fixtures.

    python3 tests/golden/make_golden.py

Runs three tiny BO searches and three tiny random searches, keeps their
history and summary files under ``runs/`` and writes the report CSVs they
produce under ``expected/``.  Only rerun this on purpose: the report test
compares against these files byte for byte.
"""

import shutil
import tempfile
from pathlib import Path

from spikeskip.harness.config import parse_config_text
from spikeskip.harness.experiments import run_experiment
from spikeskip.harness.report import emit_report

HERE = Path(__file__).resolve().parent

BASE = """
plan.depth = 3
plan.channels = 4
data.channels = 4
data.n_train = 48
data.n_test = 16
train.timesteps = 6
train.epochs = 3
train.batch_size = 4
train.lr = 0.1
search.budget = 8
search.k = 2
search.n = 1
"""


def main():
    runs = HERE / "runs"
    shutil.rmtree(runs, ignore_errors=True)
    with tempfile.TemporaryDirectory() as tmp:
        for kind, tag in (("bo_search", "bo"), ("random_search", "rs")):
            for seed in range(3):
                out = Path(tmp) / f"{tag}_s{seed}"
                cfg = parse_config_text(BASE + f"experiment = {kind}\nseed = {seed}\noutput_dir = \"{out}\"\n")
                run_experiment(cfg)
                dest = runs / out.name
                dest.mkdir(parents=True)
                for name in ("history.txt", "summary.txt"):
                    shutil.copy(out / name, dest / name)
    emit_report(sorted(runs.iterdir()), HERE / "expected")


if __name__ == "__main__":
    main()
