"""Command-line entry point: reproducible runs driven by config files.

Subcommands::

    synth-gen     render a synthetic source/target dataset to disk
    train-source  supervised training on a labeled dataset
    adapt         source-free adaptation of a checkpoint to unlabeled images
    eval          score a checkpoint on a labeled dataset
    ablate        run the six-row switch matrix and tabulate mAP per row
    report        render tables and plots from a finished run directory
    rerun         re-execute a run bit-exactly from its manifest
    print-config  dump the fully-commented default config file

Every run writes a ``manifest.json`` (command, resolved config snapshot,
seed, paths, version, duration) into its output directory; ``rerun`` replays
it.  Relative ``--out`` paths resolve under ``$DOCADAPT_RUN_ROOT`` when that
variable is set.  Exit codes: 0 success, 2 usage, 3 configuration,
4 ingestion, 5 numeric, 6 I/O.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from . import adapt as adapt_mod
from . import config as config_mod
from . import detector as det
from . import labelspace
from . import synthdocs
from .errors import ConfigurationError, DocadaptError, RunIOError


def _resolve_out(out: str) -> Path:
    path = Path(out)
    root = os.environ.get("DOCADAPT_RUN_ROOT")
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _write_manifest(out_dir: Path, command: str, inputs: dict, config_snapshot, seed, started: float, outputs: list) -> None:
    manifest = {
        "command": command,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "config": config_snapshot,
        "seed": seed,
        "version": __version__,
        "duration_s": round(time.time() - started, 3),
        "outputs": [str(p) for p in outputs],
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    os.replace(tmp, out_dir / "manifest.json")


def _load_run_config(args) -> adapt_mod.AdaptConfig:
    prebuilt = getattr(args, "prebuilt_config", None)
    if prebuilt is not None:  # rerun path: config restored from a manifest
        return prebuilt
    values = config_mod.load_config_file(args.config) if args.config else {}
    values = config_mod.apply_overrides(values, args.set or [])
    return config_mod.build_adapt_config(values)


def _cmd_synth_gen(args) -> int:
    started = time.time()
    presets = dict(zip(("source", "target"), synthdocs.domain_presets()))
    if args.preset not in presets:
        raise ConfigurationError(f"unknown preset {args.preset!r}; choose from source, target")
    out_dir = _resolve_out(args.out)
    dataset = synthdocs.generate_dataset(presets[args.preset], args.n, args.seed, out_dir)
    _write_manifest(
        out_dir, "synth-gen",
        inputs={},
        config_snapshot={"preset": args.preset, "n": args.n},
        seed=args.seed,
        started=started,
        outputs=[out_dir / "annotations.json"],
    )
    print(f"wrote {len(dataset)} pages, {len(dataset.annotations)} annotations to {out_dir}")
    return 0


def _cmd_train_source(args) -> int:
    started = time.time()
    config = _load_run_config(args)
    dataset = labelspace.load_coco(args.data)
    eval_dataset = labelspace.load_coco(args.eval_data) if args.eval_data else None
    out_dir = _resolve_out(args.out)
    ckpt, report = adapt_mod.train_source(dataset, config, eval_dataset)
    ckpt_path = out_dir / "checkpoint.ckpt"
    det.save_checkpoint(ckpt, ckpt_path)
    report.checkpoint_path = ckpt_path.name  # run-dir-relative, keeps metrics byte-stable
    report.save(out_dir)
    _write_manifest(
        out_dir, "train-source",
        inputs={"data": args.data, "eval_data": args.eval_data or ""},
        config_snapshot=config_mod.adapt_config_to_dict(config),
        seed=config.seed,
        started=started,
        outputs=[ckpt_path, out_dir / "metrics.json", out_dir / "metrics.csv"],
    )
    if report.final_map50 is not None:
        print(f"final held-out mAP50: {report.final_map50:.4f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def _cmd_adapt(args) -> int:
    started = time.time()
    config = _load_run_config(args)
    target = labelspace.load_coco(args.target)
    eval_dataset = labelspace.load_coco(args.eval_data) if args.eval_data else None
    out_dir = _resolve_out(args.out)
    ckpt, report = adapt_mod.adapt(args.source_ckpt, target, config, eval_dataset)
    ckpt_path = out_dir / "adapted.ckpt"
    det.save_checkpoint(ckpt, ckpt_path)
    report.checkpoint_path = ckpt_path.name  # run-dir-relative, keeps metrics byte-stable
    report.save(out_dir)
    _write_manifest(
        out_dir, "adapt",
        inputs={"source_ckpt": args.source_ckpt, "target": args.target, "eval_data": args.eval_data or ""},
        config_snapshot=config_mod.adapt_config_to_dict(config),
        seed=config.seed,
        started=started,
        outputs=[ckpt_path, out_dir / "metrics.json", out_dir / "metrics.csv"],
    )
    if report.final_map50 is not None:
        print(f"adapted target mAP50: {report.final_map50:.4f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def _cmd_eval(args) -> int:
    started = time.time()
    ckpt = det.load_checkpoint(args.ckpt)
    dataset = labelspace.load_coco(args.data)
    out_dir = _resolve_out(args.out)
    result = adapt_mod.evaluate_model(ckpt.params, ckpt.config, dataset)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "map50": result.map50,
        "per_category_ap": {k: v for k, v in sorted(result.per_category_ap.items())},
        "gt_counts": {k: v for k, v in sorted(result.gt_counts.items())},
    }
    (out_dir / "eval.json").write_text(json.dumps(payload, sort_keys=True, indent=1))
    table = [f"{'category':<16} {'AP':>8} {'#gt':>6}"]
    for name in sorted(result.per_category_ap):
        table.append(f"{name:<16} {result.per_category_ap[name]:>8.4f} {result.gt_counts[name]:>6d}")
    table.append(f"{'mAP50':<16} {result.map50:>8.4f}")
    (out_dir / "eval.txt").write_text("\n".join(table) + "\n")
    _write_manifest(
        out_dir, "eval",
        inputs={"ckpt": args.ckpt, "data": args.data},
        config_snapshot={"detector": asdict(ckpt.config)},
        seed=None,
        started=started,
        outputs=[out_dir / "eval.json", out_dir / "eval.txt"],
    )
    print("\n".join(table))
    return 0


def _cmd_ablate(args) -> int:
    started = time.time()
    config = _load_run_config(args)
    target = labelspace.load_coco(args.target)
    eval_dataset = labelspace.load_coco(args.eval_data)
    out_dir = _resolve_out(args.out)
    result = adapt_mod.ablate(args.source_ckpt, target, config, adapt_mod.table_grid(), eval_dataset)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.csv").write_text(result.to_csv())
    (out_dir / "ablation.txt").write_text(result.to_text() + "\n")
    for row, _, report in result.rows:
        if report is not None:
            report.save(out_dir / row.name)
    _write_manifest(
        out_dir, "ablate",
        inputs={"source_ckpt": args.source_ckpt, "target": args.target, "eval_data": args.eval_data},
        config_snapshot=config_mod.adapt_config_to_dict(config),
        seed=config.seed,
        started=started,
        outputs=[out_dir / "ablation.csv", out_dir / "ablation.txt"],
    )
    print(result.to_text())
    return 0


def _plot_metrics(metrics: dict, out_dir: Path) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outputs = []
    epochs = [rec["epoch"] for rec in metrics["epochs"]]
    loss_terms = sorted({k for rec in metrics["epochs"] for k in rec["losses"]})
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for term in loss_terms:
        ax.plot(epochs, [rec["losses"].get(term) for rec in metrics["epochs"]], label=term)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    loss_png = out_dir / "loss_curves.png"
    fig.savefig(loss_png, dpi=110)
    plt.close(fig)
    outputs.append(loss_png)

    maps = [(rec["epoch"], rec["map50"]) for rec in metrics["epochs"] if rec.get("map50") is not None]
    if maps:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([m[0] for m in maps], [m[1] for m in maps], marker="o")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mAP@0.5")
        ax.set_ylim(0.0, 1.0)
        fig.tight_layout()
        map_png = out_dir / "map_curve.png"
        fig.savefig(map_png, dpi=110)
        plt.close(fig)
        outputs.append(map_png)
    return outputs


def _cmd_report(args) -> int:
    started = time.time()
    runs_dir = Path(args.runs)
    out_dir = _resolve_out(args.out) if args.out else runs_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    metrics_path = runs_dir / "metrics.json"
    if metrics_path.exists():
        metrics = json.loads(metrics_path.read_text())
        outputs += _plot_metrics(metrics, out_dir)
    ablation_csv = runs_dir / "ablation.csv"
    if ablation_csv.exists():
        text = (runs_dir / "ablation.txt").read_text() if (runs_dir / "ablation.txt").exists() else ablation_csv.read_text()
        (out_dir / "ablation_report.txt").write_text(text)
        outputs.append(out_dir / "ablation_report.txt")
        print(text)
    if not outputs:
        raise RunIOError(f"{runs_dir} contains neither metrics.json nor ablation.csv")
    _write_manifest(
        out_dir, "report",
        inputs={"runs": args.runs},
        config_snapshot={},
        seed=None,
        started=started,
        outputs=outputs,
    )
    print("report artifacts: " + ", ".join(str(p) for p in outputs))
    return 0


def _cmd_rerun(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    command = manifest["command"]
    inputs = manifest.get("inputs", {})
    ns = argparse.Namespace(set=[], config=None)
    if command == "synth-gen":
        ns.preset = manifest["config"]["preset"]
        ns.n = manifest["config"]["n"]
        ns.seed = manifest["seed"]
        ns.out = args.out
        return _cmd_synth_gen(ns)
    if command in ("train-source", "adapt", "ablate"):
        ns.prebuilt_config = config_mod.adapt_config_from_dict(manifest["config"])
        ns.out = args.out
        if command == "train-source":
            ns.data = inputs["data"]
            ns.eval_data = inputs.get("eval_data") or None
            return _cmd_train_source(ns)
        if command == "adapt":
            ns.source_ckpt = inputs["source_ckpt"]
            ns.target = inputs["target"]
            ns.eval_data = inputs.get("eval_data") or None
            return _cmd_adapt(ns)
        ns.source_ckpt = inputs["source_ckpt"]
        ns.target = inputs["target"]
        ns.eval_data = inputs["eval_data"]
        return _cmd_ablate(ns)
    if command == "eval":
        ns.ckpt = inputs["ckpt"]
        ns.data = inputs["data"]
        ns.out = args.out
        return _cmd_eval(ns)
    raise ConfigurationError(f"manifest command {command!r} cannot be re-run")


def _cmd_print_config(args) -> int:
    print(config_mod.default_config_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="docadapt",
        description="Source-free domain adaptation for document layout detection.",
        epilog="Run `docadapt print-config` to see every config key with its default.",
    )
    parser.add_argument("--version", action="version", version=f"docadapt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="render a synthetic dataset")
    p.add_argument("--preset", required=True, choices=("source", "target"))
    p.add_argument("--n", type=int, required=True, help="number of pages")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_synth_gen)

    def add_config_args(p):
        p.add_argument("--config", default=None, help="INI config file (see print-config)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value; repeatable")

    p = sub.add_parser("train-source", help="supervised training on labeled pages")
    p.add_argument("--data", required=True, help="annotations.json of the training set")
    p.add_argument("--eval-data", default=None, help="annotations.json of a held-out set")
    p.add_argument("--out", required=True)
    add_config_args(p)
    p.set_defaults(fn=_cmd_train_source)

    p = sub.add_parser("adapt", help="source-free adaptation to unlabeled target images")
    p.add_argument("--source-ckpt", required=True)
    p.add_argument("--target", required=True, help="annotations.json of the target set (labels ignored)")
    p.add_argument("--eval-data", default=None)
    p.add_argument("--out", required=True)
    add_config_args(p)
    p.set_defaults(fn=_cmd_adapt)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", help="run the six-row switch matrix")
    p.add_argument("--source-ckpt", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--out", required=True)
    add_config_args(p)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("report", help="render tables and plots from a run directory")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("rerun", help="re-execute a run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_rerun)

    p = sub.add_parser("print-config", help="print the default config file")
    p.set_defaults(fn=_cmd_print_config)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DocadaptError as exc:
        kind = type(exc).__name__
        print(f"error ({kind}): {exc}", file=sys.stderr)
        return exc.exit_code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
