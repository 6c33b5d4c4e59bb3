"""Command-line entry point.

Subcommands: gen-data, train, eval, report, curves. Exit codes are a stable
contract: 0 success, 2 usage/config error, 3 missing artifact or IO failure,
4 numeric abort during training, 5 inconsistent inputs across runs.

The default output root is $POSELAB_OUT_ROOT (falling back to ./poselab-out);
`train` consumes a JSON experiment descriptor that fully determines the run.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

from . import report as report_mod
from . import storage, transfer
from .datasets import DatasetError, generate_synthetic, split_train_val
from .evaluation import MetricError, MetricSpec, evaluate_model
from .hourglass import ArchError, HourglassArch
from .keypoints import SplitError, builtin_split, load_split
from .storage import CheckpointError, StorageError
from .training import NonFiniteLossError, RunHistory, TrainingConfig, TrainingError, run_training
from .transfer import MODE_LABELS, AssemblyError, TransferMode

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_INCONSISTENT = 5

ENV_OUT_ROOT = "POSELAB_OUT_ROOT"


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _out_root(override=None):
    if override:
        return Path(override)
    return Path(os.environ.get(ENV_OUT_ROOT, "poselab-out"))


def _load_split_spec(spec):
    """A split is either a builtin tag ('a'..'d') or {'file': path} / a path."""
    try:
        if isinstance(spec, dict):
            path = Path(spec["file"])
            if not path.exists():
                raise CliError(EXIT_IO, f"split file not found: {path}")
            return load_split(path), str(path)
        if isinstance(spec, str) and spec in "abcd" and len(spec) == 1:
            return builtin_split(spec), spec
        path = Path(str(spec))
        if path.suffix == ".json" and path.exists():
            return load_split(path), str(path)
        return builtin_split(str(spec)), str(spec)
    except SplitError as exc:
        raise CliError(EXIT_USAGE, f"invalid split: {exc}") from exc


# --- gen-data -------------------------------------------------------------------


def cmd_gen_data(args):
    if args.count <= 0:
        raise CliError(EXIT_USAGE, f"--count must be positive, got {args.count}")
    if args.resolution < 16:
        raise CliError(EXIT_USAGE, f"--resolution must be >= 16, got {args.resolution}")
    try:
        dataset = generate_synthetic(args.seed, args.count, args.resolution)
    except DatasetError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    try:
        out = storage.save_dataset(dataset, args.out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset to {args.out}: {exc}") from exc
    print(f"wrote {len(dataset)} samples at {dataset.resolution}x{dataset.resolution} "
          f"to {out}")
    return EXIT_OK


# --- train ----------------------------------------------------------------------


_DESCRIPTOR_REQUIRED = ("run_id", "mode", "split", "dataset", "val_count",
                        "val_seed", "arch", "seed")


def load_descriptor(path):
    path = Path(path)
    if not path.exists():
        raise CliError(EXIT_IO, f"descriptor not found: {path}")
    try:
        desc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_USAGE, f"descriptor is not valid JSON: {exc}") from exc
    for fieldname in _DESCRIPTOR_REQUIRED:
        if fieldname not in desc:
            raise CliError(EXIT_USAGE, f"descriptor missing required field {fieldname!r}")
    try:
        TransferMode(desc["mode"])
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"unknown mode {desc['mode']!r}") from exc
    return desc


def _arch_from_descriptor(desc, num_out):
    fields = dict(desc["arch"])
    fields["num_output_channels"] = num_out
    fields.setdefault("num_stacks", 4)
    try:
        return HourglassArch.from_dict(fields)
    except ArchError as exc:
        raise CliError(EXIT_USAGE, f"invalid arch: {exc}") from exc


def _training_config(desc, section, default_seed):
    cfg = dict(desc.get(section) or {})
    cfg.setdefault("seed", default_seed)
    try:
        return TrainingConfig.from_dict(cfg)
    except (TrainingError, TypeError) as exc:
        raise CliError(EXIT_USAGE, f"invalid {section} config: {exc}") from exc


def _stage1_cache_path(out_root, split, arch2, config, dataset_provenance,
                       val_count, val_seed):
    key = storage.canonical_json({
        "split": split.to_dict(),
        "arch": arch2.to_dict(),
        "training": config.to_dict(),
        "dataset": dataset_provenance,
        "val_count": val_count,
        "val_seed": val_seed,
    })
    import hashlib

    digest = hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]
    return out_root / "stage1" / f"{digest}.ckpt"


def cmd_train(args):
    desc = load_descriptor(args.config)
    mode = TransferMode(desc["mode"])
    split, split_tag = _load_split_spec(desc["split"])
    out_root = _out_root(desc.get("out_root"))
    run_dir = out_root / "runs" / str(desc["run_id"])
    if run_dir.exists() and any(run_dir.iterdir()):
        if not args.force:
            raise CliError(
                EXIT_USAGE,
                f"run directory {run_dir} already exists; pass --force to redo",
            )
        shutil.rmtree(run_dir)

    dataset_dir = Path(desc["dataset"])
    try:
        dataset = storage.load_dataset(dataset_dir)
    except StorageError as exc:
        raise CliError(EXIT_IO, f"cannot load dataset {dataset_dir}: {exc}") from exc
    try:
        train_ds, val_ds = split_train_val(dataset, int(desc["val_count"]),
                                           int(desc["val_seed"]))
    except DatasetError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc

    arch4 = _arch_from_descriptor(desc, num_out=len(split.s2))
    seed = int(desc["seed"])
    train_cfg = _training_config(desc, "training", seed)
    stage1_domain = desc.get("stage1_domain", "s1")

    stage1_ckpt = None
    if mode in (TransferMode.transfer_learning, TransferMode.frozen_weights):
        stage1_spec = desc.get("stage1")
        if not stage1_spec:
            raise CliError(
                EXIT_USAGE,
                f"mode {mode.value} requires a 'stage1' section "
                "(either {'checkpoint': path} or {'training': config})",
            )
        if "checkpoint" in stage1_spec:
            stage1_ckpt = Path(stage1_spec["checkpoint"])
            if not stage1_ckpt.exists():
                raise CliError(EXIT_IO, f"stage-1 checkpoint not found: {stage1_ckpt}")
        else:
            stage1_cfg = _training_config({"training": stage1_spec.get("training")},
                                          "training", seed)
            arch2 = transfer.stage1_arch(arch4, len(split.s1))
            stage1_ckpt = _stage1_cache_path(
                out_root, split, arch2, stage1_cfg, dataset.provenance,
                int(desc["val_count"]), int(desc["val_seed"]))
            if stage1_ckpt.exists():
                print(f"stage-1: reusing cached checkpoint {stage1_ckpt}")
            else:
                print(f"stage-1: training 2-stack network on S1 of split {split.name}")
                stage1_log = stage1_ckpt.with_suffix(".history.jsonl")
                try:
                    transfer.train_stage1(
                        split, arch2, stage1_cfg, train_ds, val_ds, stage1_ckpt,
                        results_sink=lambda rec: storage.append_result(stage1_log, rec),
                        record_meta={"run_id": f"stage1-{stage1_ckpt.stem}",
                                     "split_tag": split_tag, "mode": "stage1",
                                     "eval_subset": "s1"},
                    )
                except NonFiniteLossError as exc:
                    raise CliError(EXIT_NUMERIC, f"stage-1 training aborted: {exc}") from exc

    try:
        experiment = transfer.assemble(mode, split, stage1_ckpt, arch4, seed,
                                       stage1_domain=stage1_domain)
    except (AssemblyError, CheckpointError) as exc:
        raise CliError(EXIT_USAGE, f"cannot assemble experiment: {exc}") from exc

    run_dir.mkdir(parents=True, exist_ok=True)
    history_path = run_dir / "history.jsonl"
    # validation accuracy is always computed on S2 for cross-mode comparability
    meta = {"run_id": str(desc["run_id"]), "split_tag": split_tag,
            "mode": mode.value, "eval_subset": "s2"}
    print(f"training {mode.value} on split {split.name} "
          f"({len(train_ds)} train / {len(val_ds)} val samples)")
    try:
        net, history = run_training(
            experiment, train_ds, val_ds, train_cfg,
            results_sink=lambda rec: storage.append_result(history_path, rec),
            record_meta=meta,
        )
    except NonFiniteLossError as exc:
        raise CliError(EXIT_NUMERIC, f"training aborted: {exc}") from exc

    ckpt_path = run_dir / "best.ckpt"
    storage.save_checkpoint(ckpt_path, net, extra={"descriptor": desc})
    (run_dir / "descriptor.json").write_text(
        storage.canonical_json(desc) + "\n", encoding="utf-8")
    best = max(history.records, key=lambda r: (r["val_accuracy"], -r["epoch"]))
    print(f"finished after {len(history.records)} epochs; "
          f"best val accuracy {best['val_accuracy']:.2f} at epoch {best['epoch']}")
    print(f"artifacts in {run_dir}")
    return EXIT_OK


# --- eval -----------------------------------------------------------------------


def cmd_eval(args):
    ckpt_path = Path(args.checkpoint)
    try:
        net, header = storage.load_checkpoint(ckpt_path)
    except CheckpointError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    try:
        dataset = storage.load_dataset(args.dataset)
    except StorageError as exc:
        raise CliError(EXIT_IO, f"cannot load dataset {args.dataset}: {exc}") from exc
    split, _ = _load_split_spec(args.split)
    subset = split.s1 if args.subset == "s1" else split.s2
    try:
        spec = MetricSpec.parse(args.metric)
    except (MetricError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"invalid metric {args.metric!r}: {exc}") from exc

    label = header.get("extra", {}).get("descriptor", {}).get("mode", ckpt_path.stem)
    label = MODE_LABELS.get(_mode_or_none(label), label)
    try:
        result = evaluate_model(net, dataset, subset, spec)
    except MetricError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    text = report_mod.render_table({label: result})
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        out.with_suffix(".csv").write_text(report_mod.table_csv({label: result}),
                                           encoding="utf-8")
        print(f"report written to {out}")
    return EXIT_OK


def _mode_or_none(value):
    try:
        return TransferMode(value)
    except ValueError:
        return None


# --- report / curves ----------------------------------------------------------------


def _scan_runs(runs_dir):
    runs_dir = Path(runs_dir)
    if not runs_dir.exists():
        raise CliError(EXIT_IO, f"runs directory not found: {runs_dir}")
    found = []
    for child in sorted(runs_dir.iterdir()):
        if (child / "descriptor.json").exists():
            found.append(child)
    if not found:
        raise CliError(EXIT_IO, f"no completed runs under {runs_dir}")
    return found


def cmd_report(args):
    runs = _scan_runs(args.runs)
    spec = MetricSpec.parse(args.metric)
    reports = {}
    for run_dir in runs:
        desc = json.loads((run_dir / "descriptor.json").read_text(encoding="utf-8"))
        split, split_tag = _load_split_spec(desc["split"])
        if args.split and split_tag != args.split:
            continue
        ckpt = run_dir / "best.ckpt"
        if not ckpt.exists():
            raise CliError(EXIT_IO, f"missing checkpoint in {run_dir}")
        net, _ = storage.load_checkpoint(ckpt)
        dataset = storage.load_dataset(desc["dataset"])
        _, val_ds = split_train_val(dataset, int(desc["val_count"]),
                                    int(desc["val_seed"]))
        label = MODE_LABELS.get(_mode_or_none(desc["mode"]), desc["mode"])
        if label in reports:
            label = f"{label} ({desc['run_id']})"
        reports[label] = evaluate_model(net, val_ds, split.s2, spec)
    if not reports:
        raise CliError(EXIT_IO, f"no runs matched split {args.split!r}")
    try:
        text = report_mod.render_table(reports)
    except report_mod.ReportError as exc:
        raise CliError(EXIT_INCONSISTENT, str(exc)) from exc
    sys.stdout.write(text)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(text, encoding="utf-8")
        (out_dir / "report.csv").write_text(report_mod.table_csv(reports),
                                            encoding="utf-8")
        report_mod.plot_group_bars(reports, out_dir / "report.png")
        print(f"report files written to {out_dir}")
    return EXIT_OK


def cmd_curves(args):
    runs = _scan_runs(args.runs)
    histories = {}
    for run_dir in runs:
        history_path = run_dir / "history.jsonl"
        if not history_path.exists():
            raise CliError(EXIT_IO, f"missing history log in {run_dir}")
        desc = json.loads((run_dir / "descriptor.json").read_text(encoding="utf-8"))
        label = MODE_LABELS.get(_mode_or_none(desc["mode"]), desc["mode"])
        if label in histories:
            label = f"{label} ({desc['run_id']})"
        histories[label] = RunHistory(records=storage.read_results(history_path))
    csv_text = report_mod.curves_csv(histories)
    sys.stdout.write(csv_text)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "curves.csv").write_text(csv_text, encoding="utf-8")
        report_mod.plot_curves(histories, out_dir / "curves.png")
        print(f"curve files written to {out_dir}")
    return EXIT_OK


# --- entry point ----------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="poselab",
        description="Keypoint-subset domain transfer lab: data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic stick-figure dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--resolution", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run a training experiment from a descriptor")
    p.add_argument("--config", required=True, help="experiment descriptor JSON")
    p.add_argument("--force", action="store_true",
                   help="redo an existing run directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", required=True, help="builtin tag a-d or split JSON path")
    p.add_argument("--metric", default="pckh@0.5",
                   help="pckh@T or pck@T:normalization")
    p.add_argument("--subset", choices=("s1", "s2"), default="s2")
    p.add_argument("--out", help="write the report to this file")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="three-configuration comparison table")
    p.add_argument("--runs", required=True, help="directory containing run folders")
    p.add_argument("--split", default=None, help="restrict to runs of this split tag")
    p.add_argument("--metric", default="pckh@0.5")
    p.add_argument("--out", help="directory for report.txt/.csv/.png")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("curves", help="emit per-epoch convergence records")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", help="directory for curves.csv/.png")
    p.set_defaults(fn=cmd_curves)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors already; normalize other exits
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (StorageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
