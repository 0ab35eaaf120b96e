"""Ablation experiments run on top of a pipeline workspace.

``translation``
    Frozen-style vs sampled-style target networks trained through a
    translator without semantic consistency, next to the round-0
    ``F_t(sigma2=1)`` of the main run (same seed, translator with it).
``mc``
    Pixel accuracy on target-train of the Monte-Carlo source-network
    estimate for several K, using the round-0 ``F_s``.
``source_only``
    A network trained by the same recipe on raw source images with no
    adaptation at all (no translation, no entropy alignment).
``source_adv``
    Pseudo-label accuracy on target-train of the round-0 ``F_s`` against a
    twin trained without its entropy-adversarial term.

Results accumulate in ``<workspace>/ablation/results.json``; an experiment
whose entry already exists is not rerun.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import torch

from . import metrics, pseudo_labels, segmentation, synth, translation
from .config import PipelineConfig
from .pipeline import (Tensors, Workspace, derive_seed, ensure_dataset, init_workspace, run_round,
                       stage_pretrain, stage_translation, target_name, timed)

EXPERIMENTS = ("translation", "mc", "source_only", "source_adv")
DEFAULT_KS = (1, 5, 10)


def _results_path(ws: Workspace) -> Path:
    return ws.root / "ablation" / "results.json"


def load_results(root) -> dict:
    p = _results_path(Workspace(root))
    return json.loads(p.read_text()) if p.exists() else {}


def _store(ws: Workspace, results: dict):
    p = _results_path(ws)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_text(json.dumps(results, indent=1, sort_keys=True))
    tmp.replace(p)


def _val_miou(net, d: Tensors, batch_size) -> float:
    p = segmentation.predict(net, d.x["target-val"], batch_size)
    return metrics.miou(metrics.evaluate_probabilities(p, d.y["target-val"].numpy()))


def translation_ablation(cfg: PipelineConfig, ws: Workspace, r0) -> dict:
    name = target_name(1.0)
    no_sem = stage_translation(cfg, ws, tcfg=dataclasses.replace(cfg.translation, use_sem=False),
                               path=ws.root / "ablation" / "translator_nosem.ckpt")
    d = Tensors(ws.data, ["source-train", "target-train", "target-val"])
    seed = derive_seed(cfg.seed, f"R0/{name}")
    out = {}
    for mode in ("frozen", "stochastic"):
        with synth.training_guard():
            net, _, _ = segmentation.train_target_network(
                cfg.target, no_sem, d.x["source-train"], d.y["source-train"], d.x["target-train"], 1.0,
                style_mode=mode, seed=seed)
        out[f"{mode}_nosem"] = _val_miou(net, d, cfg.eval_batch_size)
    # the main run's round-0 member is the stochastic twin with semantic consistency
    out["stochastic_sem"] = r0.metrics[name]
    return out


def _mc_accuracy(cfg, translator, net, x, gt, k, seed_name):
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, seed_name))
    p = pseudo_labels.mc_pseudo_label(x, translator, net, k, gen, batch_size=cfg.eval_batch_size)
    return metrics.pixel_accuracy(metrics.evaluate_probabilities(p, gt))


def mc_ablation(cfg: PipelineConfig, ws: Workspace, ks=DEFAULT_KS) -> dict:
    translator = translation.load(ws.translator_ckpt)
    net = segmentation.load(ws.model_ckpt(0, "F_s"))[0]
    d = Tensors(ws.data, ["target-train", "target-val"])
    gts = {"target-train": metrics.ground_truth(ws.data, "target-train", d.ids["target-train"]),
           "target-val": d.y["target-val"].numpy()}
    return {split: {f"K{k}": _mc_accuracy(cfg, translator, net, d.x[split], gt, k, f"ablation/mc/{split}/K{k}")
                    for k in ks}
            for split, gt in gts.items()}


def source_only_ablation(cfg: PipelineConfig, ws: Workspace) -> dict:
    d = Tensors(ws.data, ["source-train", "target-train", "target-val"])
    with synth.training_guard():
        net, _, _ = segmentation.train_target_network(
            dataclasses.replace(cfg.target, entropy_adv=False), None, d.x["source-train"], d.y["source-train"],
            d.x["target-train"], style_mode="none", seed=derive_seed(cfg.seed, "ablation/source_only"))
    return {"source_only": _val_miou(net, d, cfg.eval_batch_size)}


def source_adv_ablation(cfg: PipelineConfig, ws: Workspace) -> dict:
    translator = translation.load(ws.translator_ckpt)
    d = Tensors(ws.data, ["source-train", "target-train"])
    with synth.training_guard():
        plain, _, _ = segmentation.train_source_network(
            dataclasses.replace(cfg.source, entropy_adv=False), translator, d.x["source-train"],
            d.y["source-train"], d.x["target-train"], seed=derive_seed(cfg.seed, "R0/F_s"))
    full = segmentation.load(ws.model_ckpt(0, "F_s"))[0]
    gt = metrics.ground_truth(ws.data, "target-train", d.ids["target-train"])
    x = d.x["target-train"]
    return {"with_adv": _mc_accuracy(cfg, translator, full, x, gt, cfg.K, "ablation/source_adv/mc"),
            "without_adv": _mc_accuracy(cfg, translator, plain, x, gt, cfg.K, "ablation/source_adv/mc")}


def run_ablations(cfg: PipelineConfig, root, experiments=EXPERIMENTS, ks=DEFAULT_KS) -> dict:
    """Run the requested experiments (prerequisite stages are built if missing)."""
    unknown = set(experiments) - set(EXPERIMENTS)
    if unknown:
        raise ValueError(f"unknown experiments {sorted(unknown)}; choose from {EXPERIMENTS}")
    ws = init_workspace(cfg, root)
    ensure_dataset(cfg, ws)
    stage_pretrain(cfg, ws)
    stage_translation(cfg, ws)
    r0 = run_round(cfg, ws, 0)
    results = load_results(root)
    for exp in experiments:
        key = exp if exp != "mc" else "mc_" + "_".join(map(str, ks))
        if key in results:
            continue
        with timed(ws, f"ablation/{key}"):
            if exp == "translation":
                results[key] = translation_ablation(cfg, ws, r0)
            elif exp == "mc":
                results[key] = mc_ablation(cfg, ws, ks)
            elif exp == "source_only":
                results[key] = source_only_ablation(cfg, ws)
            else:
                results[key] = source_adv_ablation(cfg, ws)
        _store(ws, results)
    return results
