"""Command-line entry point wiring the whole pipeline.

Subcommands: synth, preprocess, train, grade, loso, sweep, report.
Every command that writes an output directory drops a ``run.json``
manifest there (command, config echo, seed, paths, version, timings).
Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

Plot-ready data (training curve, sweep curve) is emitted as CSV; no
graphics dependency.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (
    ConfusionMatrix,
    LosoReport,
    compare_postprocessing,
    format_confusion,
    format_method_table,
    loso_evaluate,
    pool_training_segments,
    segment_length_sweep,
    sweep_to_csv,
)
from .grading import DECISION_CSV_HEADER, METHODS, grade_recording
from .model import build_network, load_checkpoint, save_checkpoint
from .signals import (
    EegRecording,
    ManifestEntry,
    RAW_RATE,
    TARGET_RATE,
    load_manifest,
    load_recording,
    load_recording_csv,
    preprocess_recording,
    save_manifest,
    save_recording,
)
from .synth import CorpusSpec, generate_corpus
from .training import TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

OUTPUT_DIR_ENV = "HIEGRADE_OUT"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _default_out(value: str | None) -> str | None:
    return value if value is not None else os.environ.get(OUTPUT_DIR_ENV)


def _write_run_manifest(out_dir: Path, command: str, config: dict,
                        seed, inputs: list[str], outputs: list[str],
                        started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "master_seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
        "started_unix": started,
        "wall_seconds": time.time() - started,
    }
    with open(out_dir / "run.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_any_recording(path: Path, sample_rate: int) -> EegRecording:
    if path.suffix.lower() == ".csv":
        return load_recording_csv(path, sample_rate=sample_rate)
    return load_recording(path)


def _load_corpus(manifest_path: Path) -> list[EegRecording]:
    entries = load_manifest(manifest_path)
    base = manifest_path.parent
    corpus = []
    for e in entries:
        rec = load_recording(base / e.path)
        if rec.grade is None:
            rec.grade = e.grade
        elif rec.grade != e.grade:
            raise ValueError(f"{e.path}: embedded grade {rec.grade} "
                             f"contradicts manifest grade {e.grade}")
        corpus.append(rec)
    return corpus


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        initial_lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        validation_fraction=args.val_fraction,
    )


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--segment-min", type=float, default=5.0)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = time.time()
    out = Path(args.out)
    spec = CorpusSpec(subjects_per_grade=args.per_grade,
                      duration_s=args.duration_min * 60.0,
                      sample_rate=args.rate,
                      master_seed=args.seed)
    entries = generate_corpus(spec, out)
    _write_run_manifest(out, "synth",
                        {"per_grade": args.per_grade,
                         "duration_min": args.duration_min,
                         "rate": args.rate},
                        args.seed, [], [e.path for e in entries] + ["manifest.csv"],
                        started)
    print(f"wrote {len(entries)} recordings and manifest.csv to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    in_path = Path(args.input)
    if in_path.is_dir():
        manifest = (load_manifest(in_path / "manifest.csv")
                    if (in_path / "manifest.csv").exists() else None)
        files = sorted(p for p in in_path.iterdir()
                       if p.suffix.lower() in (".neeg", ".csv")
                       and p.name != "manifest.csv")
    else:
        manifest = None
        files = [in_path]

    grades = {e.path: e.grade for e in manifest} if manifest else {}
    ok_entries, failures = [], []
    for path in files:
        try:
            rec = _load_any_recording(path, args.rate)
            if rec.sample_rate == TARGET_RATE and rec.n_channels == 8:
                print(f"{path.name}: already 64 Hz 8-channel, passed through")
            processed = preprocess_recording(rec)
            dest = out / (path.stem + ".neeg")
            save_recording(processed, dest)
            grade = processed.grade or grades.get(path.name)
            if grade is not None:
                ok_entries.append(ManifestEntry(processed.subject_id, grade,
                                                dest.name))
        except (ValueError, OSError) as exc:
            failures.append((path.name, str(exc)))
    if ok_entries:
        save_manifest(ok_entries, out / "manifest.csv")
    _write_run_manifest(out, "preprocess", {"rate": args.rate}, None,
                        [str(p) for p in files],
                        [e.path for e in ok_entries], started)
    print(f"preprocessed {len(ok_entries)} recording(s) to {out}")
    if failures:
        print(f"{len(failures)} failure(s):", file=sys.stderr)
        for name, msg in failures:
            print(f"  {name}: {msg}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = _load_corpus(Path(args.data))
    config = _train_config(args)
    segments = pool_training_segments(corpus, args.segment_min)
    spec = build_network(int(round(args.segment_min * 60 * TARGET_RATE)))
    params, curve = train(spec, segments, config)
    ckpt = out / "model.hien"
    save_checkpoint(params, ckpt)
    curve.to_csv(out / "curve.csv")
    _write_run_manifest(out, "train",
                        {"segment_min": args.segment_min,
                         **{k: getattr(args, k) for k in
                            ("epochs", "batch_size", "lr", "val_fraction")}},
                        args.seed, [args.data], ["model.hien", "curve.csv"],
                        started)
    print(f"trained on {len(segments)} segments; wrote {ckpt}")
    return EXIT_OK


def cmd_grade(args) -> int:
    params = load_checkpoint(args.checkpoint)
    rec = load_recording(args.recording)
    want = METHODS if args.method == "all" else (args.method,)
    minutes = params.spec.segment_samples / TARGET_RATE / 60
    decisions = grade_recording(params, rec, minutes, want)
    for method in want:
        d = decisions[method]
        probs = ", ".join(f"{v:.3f}" for v in d.normalized)
        print(f"{rec.subject_id}: grade {d.grade} [{method}; p=({probs}); "
              f"{d.n_segments_used} vectors]")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "decisions.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(DECISION_CSV_HEADER)
            for method in want:
                writer.writerow(decisions[method].csv_fields(rec.subject_id))
        with open(out / "decisions.json", "w") as fh:
            json.dump([decisions[m].to_json_dict(rec.subject_id)
                       for m in want], fh, indent=2)
            fh.write("\n")
    return EXIT_OK


def cmd_loso(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = _load_corpus(Path(args.data))
    config = _train_config(args)
    ckpt_dir = out / "checkpoints" if args.save_checkpoints else None
    report = loso_evaluate(corpus, config, segment_minutes=args.segment_min,
                           jobs=args.jobs, checkpoint_dir=ckpt_dir)
    report.save_json(out / "report.json")
    for method, matrix in report.matrices.items():
        matrix.to_csv(out / f"confusion_{method}.csv")
    _write_run_manifest(out, "loso",
                        {"segment_min": args.segment_min, "jobs": args.jobs,
                         **{k: getattr(args, k) for k in
                            ("epochs", "batch_size", "lr", "val_fraction")}},
                        args.seed, [args.data],
                        ["report.json"] +
                        [f"confusion_{m}.csv" for m in report.matrices],
                        started)
    print(format_method_table(compare_postprocessing(report)))
    print()
    print(format_confusion(report.matrices["two-step"]))
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = _load_corpus(Path(args.data))
    config = _train_config(args)
    lengths = [args.min_minutes + k * args.step_minutes
               for k in range(int((args.max_minutes - args.min_minutes)
                                  / args.step_minutes) + 1)]
    rows = segment_length_sweep(corpus, lengths, config, jobs=args.jobs)
    sweep_to_csv(rows, out / "sweep.csv")
    _write_run_manifest(out, "sweep",
                        {"min": args.min_minutes, "max": args.max_minutes,
                         "step": args.step_minutes, "jobs": args.jobs},
                        args.seed, [args.data], ["sweep.csv"], started)
    for r in rows:
        print(f"{r.segment_minutes:4.1f} min: {100 * r.accuracy:.1f}%")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.report:
        with open(args.report) as fh:
            data = json.load(fh)
        matrices = {m: ConfusionMatrix(np.array(counts))
                    for m, counts in data["matrices"].items()}
        rows = [(m, matrices[m].accuracy) for m in METHODS if m in matrices]
        print(format_method_table(rows))
        for method in METHODS:
            if method in matrices:
                print(f"\n[{method}]")
                print(format_confusion(matrices[method]))
    if args.confusion:
        matrix = ConfusionMatrix.from_csv(args.confusion)
        print(format_confusion(matrix))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hiegrade",
                     description="EEG grading pipeline: synthesize, "
                                 "preprocess, train, grade, evaluate.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    p.add_argument("--per-grade", type=int, default=3)
    p.add_argument("--duration-min", type=float, default=60.0)
    p.add_argument("--rate", type=int, default=RAW_RATE,
                   choices=(RAW_RATE, TARGET_RATE))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=_default_out(None), required=False)
    p.set_defaults(fn=cmd_synth, needs_out=True)

    p = sub.add_parser("preprocess",
                       help="montage + filter + decimate recordings")
    p.add_argument("input", help="recording file or corpus directory")
    p.add_argument("--rate", type=int, default=RAW_RATE,
                   help="sample rate assumed for CSV imports")
    p.add_argument("--out", default=_default_out(None))
    p.set_defaults(fn=cmd_preprocess, needs_out=True)

    p = sub.add_parser("train", help="fit the network on a labeled corpus")
    p.add_argument("--data", required=True, help="labels manifest CSV")
    _add_train_flags(p)
    p.add_argument("--out", default=_default_out(None))
    p.set_defaults(fn=cmd_train, needs_out=True)

    p = sub.add_parser("grade", help="grade one recording with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--recording", required=True)
    p.add_argument("--method", default="two-step",
                   choices=list(METHODS) + ["all"])
    p.add_argument("--out", default=None,
                   help="optional directory for decision CSV/JSON")
    p.set_defaults(fn=cmd_grade, needs_out=False)

    p = sub.add_parser("loso", help="leave-one-subject-out evaluation")
    p.add_argument("--data", required=True, help="labels manifest CSV")
    _add_train_flags(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--save-checkpoints", action="store_true",
                   help="keep each fold's trained model under checkpoints/")
    p.add_argument("--out", default=_default_out(None))
    p.set_defaults(fn=cmd_loso, needs_out=True)

    p = sub.add_parser("sweep", help="accuracy vs segment length")
    p.add_argument("--data", required=True)
    _add_train_flags(p)
    p.add_argument("--min-minutes", type=float, default=0.5)
    p.add_argument("--max-minutes", type=float, default=10.0)
    p.add_argument("--step-minutes", type=float, default=0.5)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=_default_out(None))
    p.set_defaults(fn=cmd_sweep, needs_out=True)

    p = sub.add_parser("report", help="render tables from saved results")
    p.add_argument("--report", help="LOSO report JSON")
    p.add_argument("--confusion", help="confusion matrix CSV")
    p.set_defaults(fn=cmd_report, needs_out=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_OK
    if getattr(args, "needs_out", False) and not args.out:
        print(f"hiegrade {args.command}: error: --out is required "
              f"(or set ${OUTPUT_DIR_ENV})", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "report" and not (args.report or args.confusion):
        print("hiegrade report: error: give --report and/or --confusion",
              file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"hiegrade {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort invariant guard
        print(f"hiegrade {args.command}: internal error: "
              f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
