"""
End to end
==========

Runs the whole method at the ``smoke`` scale (seconds, meaningless numbers)
through the same entry point as ``stochuda run-all``. Use ``--preset toy`` on
the command line for the scale the acceptance suite uses.
"""

# %%
import json
import sys
from pathlib import Path

from stochuda import config, pipeline

root = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "workspace"
cfg = config.apply_overrides(config.preset("smoke"), ["seed=3"])
report = pipeline.run_pipeline(cfg, root)

# %%
# One row per round: the three members and their ensemble on target-val.
for r in report["rounds"]:
    print(r["round"], json.dumps({k: round(v, 3) for k, v in r["mIoU"].items()}))

# %%
# The translator checkpoint is shared by every round.
print("translator sha256:", report["translator_sha256"][:16], "...")
print("stage timings (s):", {k: round(v, 1) for k, v in pipeline.read_timings(root).items()})
