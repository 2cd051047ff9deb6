# -*- coding: utf-8 -*-
"""
The command-line pipeline
=========================

Write a scenario to TSV files, describe the run in one JSON config and
call every subcommand in order. Each command leaves a directory with its
artifacts, ``config.json`` and ``manifest.txt``.
"""

###########################################################################
# Data files.

import json
import tempfile
from pathlib import Path

from kgtransfer import generate_transfer_scenario
from kgtransfer.cli import COMMANDS, main

work = Path(tempfile.mkdtemp(prefix="kgtransfer-"))
generate_transfer_scenario(seed=0).write(work / "data")
print(sorted(p.name for p in (work / "data").iterdir()))

###########################################################################
# The config. Paths are relative to the config file.

config = {
    "setting": "pr4lp", "output_dir": "out", "seed": 1,
    "data": {"train": "data/train.tsv", "valid": "data/valid.tsv", "test": "data/test.tsv",
             "background": ["data/background.tsv"], "alignment": ["data/alignment.tsv"]},
    "encoder": {"kind": "rsn", "dim": 16, "dropout_rate": 0.0},
    "pretrain": {"epochs": 2, "batch_size": 256},
    "retrain": {"epochs": 2, "batch_size": 256},
    "distill": {"valid_every": 1},
}
(work / "run.json").write_text(json.dumps(config, indent=2))

###########################################################################
# Run the commands. A nonzero return is an exit code: 1 for config,
# 2 for data, 3 for numeric failures.

for command in COMMANDS:
    code = main([command, "--config", str(work / "run.json"), "--log-format", "text"])
    print(command, "->", code, sorted(p.name for p in (work / "out" / command).iterdir()))

###########################################################################
# Metrics from the eval step.

print((work / "out" / "eval" / "metrics.json").read_text())
