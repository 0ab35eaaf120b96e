"""Toy-scale workspaces shared by the benchmark-trend acceptance checks.

A full toy run takes tens of minutes per seed, so finished workspaces are kept
under ``.cache/acceptance/<key>/seed<N>`` where the key hashes the package
sources and the config. Any source edit therefore starts from scratch.
Set ``STOCHUDA_ACCEPTANCE_CACHE`` to use another directory.
"""

import hashlib
import os
from pathlib import Path

import stochuda
from stochuda import ablation, config, pipeline

SEEDS = (0, 1, 2)
KS = (1, 5, 10)
REPO = Path(__file__).resolve().parent.parent


def source_hash() -> str:
    h = hashlib.sha256()
    pkg = Path(stochuda.__file__).parent
    for p in sorted(pkg.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def toy_config(seed: int):
    return config.apply_overrides(config.preset("toy"), [f"seed={seed}"])


def cache_root() -> Path:
    base = Path(os.environ.get("STOCHUDA_ACCEPTANCE_CACHE", REPO / ".cache" / "acceptance"))
    key = hashlib.sha256((source_hash() + config.config_hash(toy_config(0))).encode()).hexdigest()[:16]
    return base / key


def run_seed(seed: int) -> dict:
    """Full pipeline plus ablations for one master seed (resumes or reuses cached stages)."""
    cfg = toy_config(seed)
    root = cache_root() / f"seed{seed}"
    report = pipeline.run_pipeline(cfg, root)
    results = ablation.run_ablations(cfg, root, ablation.EXPERIMENTS, KS)
    return {"root": root, "report": report, "ablation": results, "timings": pipeline.read_timings(root)}
