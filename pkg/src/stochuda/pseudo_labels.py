"""Monte-Carlo pseudo-labels, ensembling and class-wise rank thresholds.

Probability maps are numpy arrays with the class axis last: a single map is
(H, W, C), a dataset of maps is (N, H, W, C).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .synth import IGNORE_INDEX


@dataclass
class ClassThresholds:
    theta: np.ndarray  # (C,) confidence threshold per class
    r: float
    counts: np.ndarray  # (C,) pixels predicted as each class

    def to_dict(self):
        return {"r": self.r, "theta": [float(t) for t in self.theta], "counts": [int(n) for n in self.counts]}


@dataclass
class PseudoLabelMap:
    labels: np.ndarray  # (H, W) or (N, H, W) uint8, 255 = ignore
    source_round: int = 0
    provenance: list[str] = field(default_factory=list)


def mc_pseudo_label(x_t, translator, source_net, K, generator=None, sigma2=1.0, batch_size=50,
                    return_samples=False):
    """Average of ``source_net`` softmax over K target->source translations per image.

    ``x_t`` is (N, 3, H, W). Style codes are drawn per image and per sample from
    ``N(0, sigma2 I)`` using ``generator``. Returns (N, H, W, C) float64, plus the
    (K, N, H, W, C) float32 samples when ``return_samples`` is set.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    x_t = torch.as_tensor(x_t)
    source_net.eval()
    translator.eval()
    samples = []
    with torch.no_grad():
        for k in range(K):
            parts = []
            for i in range(0, x_t.shape[0], batch_size):
                xb = x_t[i:i + batch_size]
                v = translator.sample_styles(xb.shape[0], sigma2, generator, xb.dtype)
                x_ts = translator.translate(xb, "target", "source", v)
                parts.append(F.softmax(source_net(x_ts), 1).permute(0, 2, 3, 1).numpy())
            samples.append(np.concatenate(parts))
    stacked = np.stack(samples)
    mean = stacked.astype(np.float64).mean(0)
    return (mean, stacked) if return_samples else mean


def ensemble(maps, weights=None):
    """Weighted per-pixel mean of probability maps (uniform weights by default)."""
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise ValueError("ensemble needs at least one map")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError(f"shape mismatch among ensemble members: {[m.shape for m in maps]}")
    if weights is None:
        weights = np.full(len(maps), 1.0 / len(maps))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(maps),) or (weights < 0).any() or not math.isclose(weights.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("weights must be non-negative, one per map, and sum to 1")
    if len(maps) == 1:
        return maps[0]
    return sum(w * m for w, m in zip(weights, maps))


def class_thresholds(maps, r, max_threshold=None) -> ClassThresholds:
    """Per class c: sort max-probabilities of pixels predicted as c in descending
    order and take the one at 1-based rank ceil(r * N_c). Classes never predicted
    get 1.0. ``max_threshold`` optionally caps every threshold.
    """
    if not 0 < r <= 1:
        raise ValueError("r must lie in (0, 1]")
    p = np.asarray(maps) if not isinstance(maps, (list, tuple)) else np.stack([np.asarray(m) for m in maps])
    if p.size == 0:
        raise ValueError("class_thresholds needs at least one probability map")
    num_classes = p.shape[-1]
    p = p.reshape(-1, num_classes)
    pred = p.argmax(1)
    conf = p.max(1)
    theta = np.ones(num_classes)
    counts = np.bincount(pred, minlength=num_classes)
    for c in range(num_classes):
        n = counts[c]
        if n == 0:
            continue
        vals = np.sort(conf[pred == c])[::-1]
        # guard against r*n landing just above an integer in floating point
        k = max(1, math.ceil(r * n - 1e-9))
        theta[c] = vals[k - 1]
    if max_threshold is not None:
        theta = np.minimum(theta, max_threshold)
    return ClassThresholds(theta, float(r), counts)


def harden(p, th: ClassThresholds, source_round=0, provenance=()) -> PseudoLabelMap:
    """Argmax label where the max probability reaches its class threshold, else 255."""
    p = np.asarray(p)
    labels = p.argmax(-1)
    conf = p.max(-1)
    keep = conf >= np.asarray(th.theta)[labels]
    out = np.where(keep, labels, IGNORE_INDEX).astype(np.uint8)
    return PseudoLabelMap(out, source_round, list(provenance))


def write_store(root, round_index, ids, labels, meta) -> Path:
    """Write ``<root>/pseudo/R<k>/<id>.png`` plus ``meta.json``."""
    out = Path(root) / "pseudo" / f"R{round_index}"
    out.mkdir(parents=True, exist_ok=True)
    for i, lbl in zip(ids, labels):
        Image.fromarray(np.asarray(lbl, dtype=np.uint8), "L").save(out / f"{i}.png")
    (out / "meta.json").write_text(json.dumps({**meta, "ids": list(ids)}, indent=1, sort_keys=True))
    return out


def read_store(root, round_index) -> tuple[dict[str, np.ndarray], dict]:
    src = Path(root) / "pseudo" / f"R{round_index}"
    meta_path = src / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no pseudo-label store at {src}")
    meta = json.loads(meta_path.read_text())
    labels = {}
    for i in meta["ids"]:
        with Image.open(src / f"{i}.png") as im:
            labels[i] = np.array(im)
    return labels, meta
