"""Command-line interface.

Every subcommand prints one JSON line on success. Exit status: 0 on success,
1 on a usage or configuration error (usage text goes to stderr), 2 when a
stage fails at runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import ablation, config, metrics, pipeline, pseudo_labels, segmentation, synth, translation
from .checkpoint import file_digest
from .config import ConfigError, GeneratorConfig, PipelineConfig

log = logging.getLogger("stochuda")


class UsageError(Exception):
    def __init__(self, message, usage=""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


def _common(p, workspace_required=True):
    p.add_argument("--config", type=Path, help="pipeline config JSON (defaults to the workspace echo, then built-ins)")
    p.add_argument("--preset", help=f"start from a named preset: {', '.join(sorted(config.PRESETS))}")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, value parsed as JSON; repeatable")
    p.add_argument("--seed", type=int, help="master seed (same as --set seed=N)")
    p.add_argument("--workspace", "-w", type=Path, required=workspace_required, help="workspace directory")
    p.add_argument("--verbose", "-v", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stochuda", description="Stochastic-translation domain adaptation toolkit.",
                     epilog="Run '<subcommand> --help' for options; 'schema' lists every config key.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    p = sub.add_parser("datagen", help="generate the two-domain benchmark")
    _common(p, workspace_required=False)
    p.add_argument("--out", type=Path, help="dataset root (default: <workspace>/data)")

    p = sub.add_parser("pretrain-sem", help="train the semantic network used by the translator")
    _common(p)
    p.add_argument("--force", action="store_true", help="retrain even if a checkpoint exists")

    p = sub.add_parser("train-translation", help="train the stochastic translator")
    _common(p)
    p.add_argument("--force", action="store_true", help="retrain even if a checkpoint exists")

    p = sub.add_parser("train-round", help="train one round's triplet, evaluate it and write its pseudo-labels")
    _common(p)
    p.add_argument("--round", type=int, required=True)
    p.add_argument("--jobs", type=int, default=1, help="train the triplet members in parallel processes")

    p = sub.add_parser("pseudolabel", help="(re)write the pseudo-label store of a trained round")
    _common(p)
    p.add_argument("--round", type=int, required=True)

    p = sub.add_parser("ensemble", help="score the triplet members and their ensemble on target-val")
    _common(p)
    p.add_argument("--round", type=int, required=True)

    p = sub.add_parser("eval", help="evaluate one segmentation checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="target-val", choices=synth.SPLITS)
    p.add_argument("--mc-k", type=int,
                   help="read the network through K target->source translations (default: K for source networks)")
    p.add_argument("--out", type=Path, help="report directory (default: <workspace>/report/eval)")

    p = sub.add_parser("run-all", help="data, pretraining, translation and every round, then the report")
    _common(p)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("report", help="write report.json/csv and plots from completed rounds")
    _common(p)

    p = sub.add_parser("ablate", help="ablation experiments on top of a workspace")
    _common(p)
    p.add_argument("--experiments", default=",".join(ablation.EXPERIMENTS),
                   help=f"comma-separated subset of {','.join(ablation.EXPERIMENTS)}")
    p.add_argument("--ks", default=",".join(map(str, ablation.DEFAULT_KS)), help="K values for the mc experiment")

    sub.add_parser("schema", help="list every config key with its default")
    return parser


def _read_config_file(path: Path) -> dict:
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise UsageError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    # a bare generator config is accepted wherever a pipeline config is
    gen_keys = {f for f in GeneratorConfig.__dataclass_fields__}
    if data and set(data) <= gen_keys:
        data = {"dataset": data}
    return data


def resolve_config(args) -> PipelineConfig:
    """Preset or config file or workspace echo or defaults, then --set, then --seed."""
    if args.config is not None and args.preset is not None:
        raise UsageError("--config and --preset are mutually exclusive")
    if args.config is not None:
        cfg = config.from_dict(PipelineConfig, _read_config_file(args.config))
    elif args.preset is not None:
        cfg = config.preset(args.preset)
    else:
        ws = getattr(args, "workspace", None)
        cfg = (pipeline.workspace_config(ws) if ws is not None else None) or PipelineConfig()
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return config.apply_overrides(cfg, overrides)


def _workspace(args, cfg) -> pipeline.Workspace:
    return pipeline.init_workspace(cfg, args.workspace)


def cmd_datagen(args, cfg):
    if args.out is None and args.workspace is None:
        raise UsageError("datagen needs --out or --workspace")
    root = args.out if args.out is not None else _workspace(args, cfg).data
    manifest = synth.generate_dataset(cfg.dataset, root)
    return {"manifest": str(Path(root) / "manifest.json"), "config_hash": manifest["config_hash"],
            "counts": {s: e["count"] for s, e in manifest["splits"].items()}}


def cmd_pretrain(args, cfg):
    ws = _workspace(args, cfg)
    pipeline.ensure_dataset(cfg, ws)
    pipeline.stage_pretrain(cfg, ws, force=args.force)
    return {"checkpoint": str(ws.pretrain_ckpt), "sha256": file_digest(ws.pretrain_ckpt)}


def cmd_translation(args, cfg):
    ws = _workspace(args, cfg)
    pipeline.ensure_dataset(cfg, ws)
    pipeline.stage_translation(cfg, ws, force=args.force)
    return {"checkpoint": str(ws.translator_ckpt), "sha256": file_digest(ws.translator_ckpt)}


def _check_round(cfg, r):
    if not 0 <= r <= cfg.rounds:
        raise UsageError(f"--round must lie in [0, {cfg.rounds}]")


def cmd_train_round(args, cfg):
    _check_round(cfg, args.round)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    ws = _workspace(args, cfg)
    state = pipeline.run_round(cfg, ws, args.round, jobs=args.jobs)
    return {"round": state.round_index, "mIoU": state.metrics, "pseudo_store": state.pseudo_store,
            "pseudo_label_accuracy": state.pseudo_label_accuracy}


def cmd_pseudolabel(args, cfg):
    _check_round(cfg, args.round)
    ws = _workspace(args, cfg)
    store, th, acc = pipeline.write_pseudo_labels(cfg, ws, args.round)
    return {"round": args.round, "pseudo_store": str(store), "thresholds": [float(t) for t in th.theta],
            "pseudo_label_accuracy": acc}


def cmd_ensemble(args, cfg):
    _check_round(cfg, args.round)
    ws = _workspace(args, cfg)
    scores = pipeline.evaluate_round(cfg, ws, args.round)
    out = ws.report_dir / f"ensemble_R{args.round}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(scores, indent=1, sort_keys=True))
    return {"round": args.round, "mIoU": scores, "report": str(out)}


def cmd_eval(args, cfg):
    ws = _workspace(args, cfg)
    net, meta = segmentation.load(args.checkpoint)
    d = pipeline.Tensors(ws.data, [args.split]) if args.split != "target-train" else None
    if d is None:
        # target-train labels exist only for diagnostics; images come through the normal loader
        d = pipeline.Tensors(ws.data, ["target-train"])
        gt = metrics.ground_truth(ws.data, "target-train", d.ids["target-train"])
    else:
        gt = d.y[args.split].numpy()
    x = d.x[args.split]
    k = args.mc_k if args.mc_k is not None else (cfg.K if meta.get("role") == "F_source" else 0)
    if k < 0:
        raise UsageError("--mc-k must be >= 0")
    if k > 0:
        translator = translation.load(ws.translator_ckpt)
        gen = torch.Generator().manual_seed(pipeline.derive_seed(cfg.seed, f"eval/{args.checkpoint.name}"))
        probs = pseudo_labels.mc_pseudo_label(x, translator, net, k, gen, batch_size=cfg.eval_batch_size)
    else:
        probs = segmentation.predict(net, x, cfg.eval_batch_size)
    cm = metrics.evaluate_probabilities(probs, gt)
    out = args.out or ws.report_dir / "eval"
    name = f"{args.checkpoint.stem}_{args.split}"
    summary = metrics.write_report(cm, out, name)
    metrics.plot_class_iou(cm, Path(out) / f"{name}.png", title=name)
    return {"checkpoint": str(args.checkpoint), "split": args.split, "mc_k": k, **summary,
            "report": str(Path(out) / f"{name}.json")}


def cmd_run_all(args, cfg):
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    report = pipeline.run_pipeline(cfg, args.workspace, jobs=args.jobs)
    return {"report": str(pipeline.Workspace(args.workspace).report_dir / "report.json"),
            "ensemble_mIoU": [r["mIoU"]["ensemble"] for r in report["rounds"]]}


def cmd_report(args, cfg):
    ws = _workspace(args, cfg)
    states = pipeline.collect_states(ws)
    if not states:
        raise pipeline.PipelineError(f"no completed rounds in {ws.root}")
    report = pipeline.write_report(cfg, ws, states)
    return {"report": str(ws.report_dir / "report.json"), "rounds": len(report["rounds"]),
            "ensemble_mIoU": [r["mIoU"]["ensemble"] for r in report["rounds"]]}


def cmd_ablate(args, cfg):
    exps = [e for e in args.experiments.split(",") if e]
    bad = set(exps) - set(ablation.EXPERIMENTS)
    if bad:
        raise UsageError(f"unknown experiments {sorted(bad)}; choose from {','.join(ablation.EXPERIMENTS)}")
    try:
        ks = tuple(int(k) for k in args.ks.split(","))
    except ValueError as e:
        raise UsageError(f"--ks must be comma-separated integers, got {args.ks!r}") from e
    if any(k < 1 for k in ks):
        raise UsageError("--ks values must be >= 1")
    results = ablation.run_ablations(cfg, args.workspace, exps, ks)
    return {"results": results, "file": str(Path(args.workspace) / "ablation" / "results.json")}


COMMANDS = {
    "datagen": cmd_datagen, "pretrain-sem": cmd_pretrain, "train-translation": cmd_translation,
    "train-round": cmd_train_round, "pseudolabel": cmd_pseudolabel, "ensemble": cmd_ensemble,
    "eval": cmd_eval, "run-all": cmd_run_all, "report": cmd_report, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required", parser.format_usage())
        if args.command == "schema":
            print(config.schema_help())
            return 0
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        cfg = resolve_config(args)
        summary = COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(e.usage or parser.format_usage(), end="", file=sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}\nvalid keys and defaults:\n{config.schema_help()}", file=sys.stderr)
        return 1
    except Exception as e:  # any stage failure
        log.debug("stage failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, "status": "ok", **summary}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
