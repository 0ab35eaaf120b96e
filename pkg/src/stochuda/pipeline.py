"""End-to-end orchestration: data -> semantic net -> translator -> self-training rounds.

Workspace layout (all paths relative to the workspace root)::

    config.json                    pipeline config echo
    data/                          generated benchmark (see synth)
    pretrain/F.ckpt, loss_log.csv  frozen semantic network
    translation/translator.ckpt    trained once, shared by every round
    rounds/R<k>/<model>.ckpt       the triplet of round k, plus loss logs
    rounds/R<k>/state.json         RoundState, written last (completion marker)
    pseudo/R<k>/                   pseudo-labels produced at the end of round k
    report/                        report.json, report.csv, plots

Each stage writes its artifacts atomically and is skipped when they already
exist, so an interrupted run resumes from the last completed stage. Every
stage seed is derived from the master seed and the stage name, so skipping a
stage never shifts the random streams of the others.
"""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics, pseudo_labels, segmentation, synth, translation
from .checkpoint import file_digest
from .config import PipelineConfig, config_hash, from_dict, to_dict

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


class SimulatedCrash(RuntimeError):
    """Raised by the crash-injection hook used in resume tests."""


def derive_seed(master: int, name: str) -> int:
    seq = np.random.SeedSequence([master, zlib.crc32(name.encode())])
    return int(seq.generate_state(1)[0] & 0x7FFFFFFF)


def target_name(sigma2: float) -> str:
    return f"F_t(sigma2={sigma2:g})"


def model_names(cfg: PipelineConfig) -> list[str]:
    return ["F_s"] + [target_name(s) for s in cfg.sigma2_list]


def _file_stem(name: str) -> str:
    return name.replace("(", "_").replace(")", "").replace("=", "").replace(".", "p")


@dataclass
class RoundState:
    round_index: int
    checkpoints: dict[str, str] = field(default_factory=dict)
    pseudo_store: str = ""
    metrics: dict[str, float] = field(default_factory=dict)
    pseudo_label_accuracy: float | None = None
    thresholds: dict = field(default_factory=dict)
    translator_sha256: str = ""

    def save(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        tmp.replace(path)

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    data = property(lambda self: self.root / "data")
    pretrain_ckpt = property(lambda self: self.root / "pretrain" / "F.ckpt")
    translator_ckpt = property(lambda self: self.root / "translation" / "translator.ckpt")
    report_dir = property(lambda self: self.root / "report")

    def round_dir(self, r: int) -> Path:
        return self.root / "rounds" / f"R{r}"

    def round_state(self, r: int) -> Path:
        return self.round_dir(r) / "state.json"

    def model_ckpt(self, r: int, name: str) -> Path:
        return self.round_dir(r) / f"{_file_stem(name)}.ckpt"


@contextlib.contextmanager
def timed(ws: Workspace, name: str):
    """Record a stage's wall time under ``timings/`` (outside the report, which must stay reproducible).

    One file per stage, so parallel triplet members never write the same file.
    """
    start = time.perf_counter()
    yield
    elapsed = time.perf_counter() - start
    out = ws.root / "timings"
    out.mkdir(parents=True, exist_ok=True)
    (out / (_file_stem(name.replace("/", "__").replace(":", "__")) + ".json")).write_text(
        json.dumps({"stage": name, "seconds": elapsed}))
    log.info("%s took %.1f s", name, elapsed)


def read_timings(root) -> dict[str, float]:
    out = Path(root) / "timings"
    entries = [json.loads(p.read_text()) for p in sorted(out.glob("*.json"))] if out.is_dir() else []
    return {e["stage"]: e["seconds"] for e in entries}


# -- data ----------------------------------------------------------------------

class Tensors:
    """In-memory tensors for the splits a stage needs; target-train never carries labels."""

    def __init__(self, root, splits):
        self.ids = {}
        self.x = {}
        self.y = {}
        for split in splits:
            items = synth.load_dataset(root, split)
            x, y = synth.stack(items)
            self.ids[split] = [it.id for it in items]
            self.x[split] = torch.from_numpy(x)
            self.y[split] = None if y is None else torch.from_numpy(y)


def ensure_dataset(cfg: PipelineConfig, ws: Workspace) -> dict:
    if (ws.data / "manifest.json").exists():
        manifest = synth.read_manifest(ws.data)
        if manifest["config_hash"] != config_hash(cfg.dataset):
            raise PipelineError(f"{ws.data} was generated with a different dataset config")
        return manifest
    with timed(ws, "datagen"):
        return synth.generate_dataset(cfg.dataset, ws.data)


# -- stages ----------------------------------------------------------------------

def stage_pretrain(cfg: PipelineConfig, ws: Workspace, force=False):
    if ws.pretrain_ckpt.exists() and not force:
        return segmentation.load(ws.pretrain_ckpt)[0]
    d = Tensors(ws.data, ["source-train", "target-train"])
    with timed(ws, "pretrain"), synth.training_guard():
        net, meta, curve = segmentation.pretrain_semantic_net(
            cfg.pretrain, d.x["source-train"], d.y["source-train"], d.x["target-train"],
            seed=derive_seed(cfg.seed, "pretrain"))
    translation.write_loss_log(ws.pretrain_ckpt.with_name("loss_log.csv"), curve)
    segmentation.save(net, ws.pretrain_ckpt, cfg.pretrain, meta)
    return net


def stage_translation(cfg: PipelineConfig, ws: Workspace, force=False, tcfg=None, path=None):
    tcfg = tcfg or cfg.translation
    path = Path(path or ws.translator_ckpt)
    if path.exists() and not force:
        return translation.load(path)
    if tcfg.use_sem and not ws.pretrain_ckpt.exists():
        raise PipelineError("semantic consistency needs the pretrained network; run pretrain-sem first")
    sem = segmentation.load(ws.pretrain_ckpt)[0] if tcfg.use_sem else None
    d = Tensors(ws.data, ["source-train", "target-train"])
    with timed(ws, f"translation:{path.name}"), synth.training_guard():
        model, _ = translation.train_translation(
            tcfg, d.x["source-train"], d.x["target-train"], sem, seed=derive_seed(cfg.seed, "translation"),
            checkpoint_path=path, log_path=path.with_name(path.stem + "_loss_log.csv"))
    return model


def _train_member(args):
    """Train one member of a round's triplet and checkpoint it (picklable for --jobs)."""
    cfg_dict, root, r, name, translator_path = args
    cfg = from_dict(PipelineConfig, cfg_dict)
    ws = Workspace(root)
    out = ws.model_ckpt(r, name)
    if out.exists():
        return str(out)
    translator = translation.load(translator_path)
    d = Tensors(ws.data, ["source-train", "target-train"])
    pseudo = None
    if r > 0:
        pseudo, _ = pseudo_labels.read_store(ws.root, r - 1)
    init = None
    if cfg.fine_tune_from_previous and r > 0:
        init = segmentation.load(ws.model_ckpt(r - 1, name))[0].state_dict()
    seed = derive_seed(cfg.seed, f"R{r}/{name}")
    x_s, y_s, x_t = d.x["source-train"], d.y["source-train"], d.x["target-train"]
    ids = d.ids["target-train"]
    with timed(ws, f"R{r}/{name}"), synth.training_guard():
        if name == "F_s":
            scfg = cfg.source
            net, meta, curve = segmentation.train_source_network(
                scfg, translator, x_s, y_s, x_t, target_ids=ids, pseudo_labels=pseudo, seed=seed, init_state=init)
        else:
            scfg = cfg.target
            sigma2 = dict((target_name(s), s) for s in cfg.sigma2_list)[name]
            net, meta, curve = segmentation.train_target_network(
                scfg, translator, x_s, y_s, x_t, sigma2, target_ids=ids, pseudo_labels=pseudo,
                seed=seed, init_state=init)
    translation.write_loss_log(out.with_name(out.stem + "_loss_log.csv"), curve)
    segmentation.save(net, out, scfg, {**meta, "round": r, "name": name})
    return str(out)


def model_probabilities(cfg: PipelineConfig, name, net, translator, x, seed_name):
    """Probability maps of one triplet member; the source network is read through MC translation."""
    if name == "F_s":
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, seed_name))
        return pseudo_labels.mc_pseudo_label(x, translator, net, cfg.K, gen, batch_size=cfg.eval_batch_size)
    return segmentation.predict(net, x, cfg.eval_batch_size).astype(np.float64)


def train_triplet(cfg: PipelineConfig, ws: Workspace, r: int, jobs: int = 1, crash_after=None):
    args = [(to_dict(cfg), str(ws.root), r, name, str(ws.translator_ckpt)) for name in model_names(cfg)]
    ws.round_dir(r).mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            list(ex.map(_train_member, args))
        return
    for a in args:
        _train_member(a)
        if crash_after == f"R{r}/{a[3]}":
            raise SimulatedCrash(crash_after)


def _round_members(cfg: PipelineConfig, ws: Workspace, r: int):
    missing = [n for n in model_names(cfg) if not ws.model_ckpt(r, n).exists()]
    if missing:
        raise PipelineError(f"round {r} is missing trained models: {missing}")
    translator = translation.load(ws.translator_ckpt)
    nets = {n: segmentation.load(ws.model_ckpt(r, n))[0] for n in model_names(cfg)}
    return translator, nets


def evaluate_round(cfg: PipelineConfig, ws: Workspace, r: int) -> dict[str, float]:
    """target-val mIoU of each triplet member and of their uniform ensemble."""
    translator, nets = _round_members(cfg, ws, r)
    d = Tensors(ws.data, ["target-val"])
    gt = d.y["target-val"].numpy()
    maps = {n: model_probabilities(cfg, n, net, translator, d.x["target-val"], f"R{r}/eval/{n}")
            for n, net in nets.items()}
    scores = {n: metrics.miou(metrics.evaluate_probabilities(m, gt)) for n, m in maps.items()}
    scores["ensemble"] = metrics.miou(metrics.evaluate_probabilities(pseudo_labels.ensemble(list(maps.values())), gt))
    return scores


def r_for_round(cfg: PipelineConfig, r: int) -> float:
    return cfg.r_schedule[min(r, len(cfg.r_schedule) - 1)] if cfg.r_schedule else 1.0


def write_pseudo_labels(cfg: PipelineConfig, ws: Workspace, r: int, score=True):
    """Ensemble the round-r triplet on target-train, threshold and write the pseudo store.

    Returns (store path, thresholds, pixel accuracy of the soft ensemble or None).
    """
    translator, nets = _round_members(cfg, ws, r)
    names = list(nets)
    d = Tensors(ws.data, ["target-train"])
    with synth.training_guard():
        maps = [model_probabilities(cfg, n, nets[n], translator, d.x["target-train"], f"R{r}/pseudo/{n}")
                for n in names]
        ens = pseudo_labels.ensemble(maps)
        del maps
        th = pseudo_labels.class_thresholds(ens, r_for_round(cfg, r), cfg.max_threshold)
        hard = pseudo_labels.harden(ens, th, r, names)
    ids = d.ids["target-train"]
    meta = {"round": r, **th.to_dict(), "K": cfg.K, "sigma2_list": cfg.sigma2_list, "seed": cfg.seed,
            "checkpoints": {n: str(ws.model_ckpt(r, n).relative_to(ws.root)) for n in names}}
    store = pseudo_labels.write_store(ws.root, r, ids, hard.labels, meta)
    accuracy = None
    if score:
        # diagnostic only: scored by the metrics module, never fed back to training
        gt = metrics.ground_truth(ws.data, "target-train", ids)
        accuracy = metrics.pixel_accuracy(metrics.evaluate_probabilities(ens, gt))
    return store, th, accuracy


def pseudolabel_round(cfg: PipelineConfig, ws: Workspace, r: int) -> RoundState:
    """Evaluate the triplet and its ensemble on target-val, then write round-r pseudo-labels."""
    state = RoundState(r, {n: str(ws.model_ckpt(r, n).relative_to(ws.root)) for n in model_names(cfg)},
                       translator_sha256=file_digest(ws.translator_ckpt))
    state.metrics = evaluate_round(cfg, ws, r)
    store, th, state.pseudo_label_accuracy = write_pseudo_labels(cfg, ws, r)
    state.pseudo_store = str(store.relative_to(ws.root))
    state.thresholds = th.to_dict()
    return state


def run_round(cfg: PipelineConfig, ws: Workspace, r: int, jobs: int = 1, crash_after=None) -> RoundState:
    if ws.round_state(r).exists():
        return RoundState.load(ws.round_state(r))
    if not ws.translator_ckpt.exists() or not ws.pretrain_ckpt.exists():
        raise PipelineError("round training needs the trained translator and semantic network")
    if r > 0 and not (ws.root / "pseudo" / f"R{r - 1}" / "meta.json").exists():
        raise PipelineError(f"round {r} needs the pseudo-labels of round {r - 1}")
    train_triplet(cfg, ws, r, jobs, crash_after)
    with timed(ws, f"R{r}/pseudolabel"):
        state = pseudolabel_round(cfg, ws, r)
    state.save(ws.round_state(r))
    if crash_after == f"R{r}":
        raise SimulatedCrash(crash_after)
    return state


def init_workspace(cfg: PipelineConfig, root) -> Workspace:
    """Create the workspace and pin its config; a workspace never mixes two configs."""
    ws = Workspace(root)
    ws.root.mkdir(parents=True, exist_ok=True)
    echo = ws.root / "config.json"
    if echo.exists():
        if json.loads(echo.read_text()) != to_dict(cfg):
            raise PipelineError(f"{ws.root} holds a run with a different config")
        return ws
    tmp = echo.with_name("config.json.tmp")
    tmp.write_text(json.dumps(to_dict(cfg), indent=1, sort_keys=True))
    tmp.replace(echo)
    return ws


def workspace_config(root) -> PipelineConfig | None:
    echo = Path(root) / "config.json"
    return from_dict(PipelineConfig, json.loads(echo.read_text())) if echo.exists() else None


def run_pipeline(cfg: PipelineConfig, root, jobs: int = 1, crash_after=None) -> dict:
    ws = init_workspace(cfg, root)
    ensure_dataset(cfg, ws)
    stage_pretrain(cfg, ws)
    if crash_after == "pretrain":
        raise SimulatedCrash(crash_after)
    stage_translation(cfg, ws)
    states = [run_round(cfg, ws, r, jobs, crash_after) for r in range(cfg.rounds + 1)]
    return write_report(cfg, ws, states)


# -- reporting -----------------------------------------------------------------

def collect_states(ws: Workspace) -> list[RoundState]:
    states, r = [], 0
    while ws.round_state(r).exists():
        states.append(RoundState.load(ws.round_state(r)))
        r += 1
    return states


def write_report(cfg: PipelineConfig, ws: Workspace, states=None, plots=True) -> dict:
    states = collect_states(ws) if states is None else states
    out = ws.report_dir
    out.mkdir(parents=True, exist_ok=True)
    report = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "translator_sha256": states[0].translator_sha256 if states else None,
        "rounds": [{"round": s.round_index, "mIoU": s.metrics, "pseudo_label_accuracy": s.pseudo_label_accuracy,
                    "thresholds": s.thresholds} for s in states],
    }
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["round", "model", "mIoU"])
        for s in states:
            for name, v in s.metrics.items():
                w.writerow([s.round_index, name, repr(v)])
    if plots and states:
        plot_rounds(states, out / "miou_by_round.png")
        plot_loss_curves(ws, out)
    return report


def plot_rounds(states, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(states[0].metrics)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(names), 1)
    for k, name in enumerate(names):
        ax.bar([s.round_index + k * width for s in states], [s.metrics[name] for s in states], width, label=name)
    ax.set_xticks([s.round_index + 0.4 - width / 2 for s in states])
    ax.set_xticklabels([f"R={s.round_index}" for s in states])
    ax.set_ylabel("target-val mIoU")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_loss_curves(ws: Workspace, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    logs = sorted(ws.root.glob("**/*loss_log.csv"))
    for p in logs:
        rows = translation.read_loss_log(p)
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for name in sorted({n for _, n, _ in rows}):
            it, v = translation.curve_series(rows, name)
            ax.plot(it, v, label=name, lw=0.8)
        ax.set_yscale("symlog", linthresh=1e-3)
        ax.set_xlabel("iteration")
        ax.legend(fontsize=6)
        rel = p.relative_to(ws.root).with_suffix("")
        fig.tight_layout()
        fig.savefig(Path(out_dir) / ("loss_" + "_".join(rel.parts) + ".png"), metadata={"Software": None})
        plt.close(fig)
