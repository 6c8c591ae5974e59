"""
The command-line pipeline
=========================

Run every stage of the smoke configuration through the ``sar2opt`` entry
point and print the run manifest. Equivalent shell usage::

    sar2opt init-config --smoke > smoke.yaml
    sar2opt synth --config smoke.yaml
    sar2opt train-teacher --config smoke.yaml
    ...
"""

import json
import sys
import tempfile
from pathlib import Path

from sar2opt.cli import main
from sar2opt.config import dump_config, smoke_config

workdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
cfg_path = workdir / "smoke.yaml"
workdir.mkdir(parents=True, exist_ok=True)
cfg_path.write_text(dump_config(smoke_config(workdir=str(workdir / "run"))))

for command in ("synth", "train-teacher", "distill", "train-translator", "translate", "evaluate"):
    code = main([command, "--config", str(cfg_path)])
    print(f"{command}: exit {code}")

manifest = json.loads((workdir / "run" / "run_manifest.json").read_text())
print("stages:", list(manifest["stages"]))
print("timings:", manifest["timings"])
