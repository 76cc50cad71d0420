"""Leave-one-subject-out evaluation, confusion matrices, the
post-processing method comparison, and the segment-length sweep.

Each fold trains a fresh network on every other subject's segments
(pooled across channels) and grades the held-out subject with all three
aggregation methods. Fold seeds derive from the master seed and the
subject id, so results do not depend on corpus ordering or parallel
scheduling.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .grading import METHODS, grade_recording, segment_recording
from .model import build_network, save_checkpoint
from .signals import EegRecording, TARGET_RATE
from .training import LabeledSegment, TrainConfig, train

N_GRADES = 4


# ---------------------------------------------------------------------------
# confusion matrix
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """4x4 counts: rows are actual grades, columns predicted."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=int)
        if self.counts.shape != (N_GRADES, N_GRADES):
            raise ValueError(f"confusion matrix must be {N_GRADES}x{N_GRADES},"
                             f" got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("confusion matrix counts must be nonnegative")

    @classmethod
    def from_pairs(cls, pairs) -> "ConfusionMatrix":
        counts = np.zeros((N_GRADES, N_GRADES), dtype=int)
        for actual, predicted in pairs:
            if not (1 <= actual <= N_GRADES and 1 <= predicted <= N_GRADES):
                raise ValueError(f"grade pair ({actual}, {predicted}) out of "
                                 f"range 1..{N_GRADES}")
            counts[actual - 1, predicted - 1] += 1
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_correct(self) -> int:
        return int(np.trace(self.counts))

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.total if self.total else 0.0

    @property
    def accuracy_percent(self) -> float:
        """Display form, rounded to one decimal."""
        return round(100.0 * self.accuracy, 1)

    def per_class_recall(self) -> np.ndarray:
        row_sums = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            recall = np.diag(self.counts) / row_sums
        return np.where(row_sums > 0, recall, np.nan)

    @property
    def off_by_more_than_one(self) -> int:
        idx = np.arange(N_GRADES)
        far = np.abs(idx[:, None] - idx[None, :]) > 1
        return int(self.counts[far].sum())

    def to_csv(self, path) -> None:
        """Actual-by-predicted layout with per-row totals and miss counts."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["actual_grade", "pred_1", "pred_2", "pred_3",
                             "pred_4", "total", "false"])
            for g in range(N_GRADES):
                row = self.counts[g]
                writer.writerow([g + 1, *row.tolist(), int(row.sum()),
                                 int(row.sum() - row[g])])
            col = self.counts.sum(axis=0)
            writer.writerow(["total", *col.tolist(), self.total,
                             self.total - self.n_correct])

    @classmethod
    def from_csv(cls, path) -> "ConfusionMatrix":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[:5] != ["actual_grade", "pred_1",
                                                "pred_2", "pred_3", "pred_4"]:
                raise ValueError(f"{path}: not a confusion-matrix CSV")
            counts = np.zeros((N_GRADES, N_GRADES), dtype=int)
            for row in reader:
                if row and row[0] != "total":
                    counts[int(row[0]) - 1] = [int(v) for v in row[1:5]]
        return cls(counts)


# ---------------------------------------------------------------------------
# LOSO cross-validation
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    subject_id: str
    actual: int
    predicted: dict[str, int]              # method -> grade
    probabilities: dict[str, list[float]]  # method -> normalized aggregate


@dataclass
class LosoReport:
    folds: list[FoldResult]
    matrices: dict[str, ConfusionMatrix]
    config: TrainConfig
    segment_minutes: float

    def to_json_dict(self) -> dict:
        return {
            "segment_minutes": self.segment_minutes,
            "config": asdict(self.config),
            "folds": [
                {"subject_id": f.subject_id, "actual": f.actual,
                 "predicted": f.predicted, "probabilities": f.probabilities}
                for f in self.folds
            ],
            "matrices": {m: mat.counts.tolist()
                         for m, mat in self.matrices.items()},
            "accuracy": {m: mat.accuracy for m, mat in self.matrices.items()},
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def fold_seed(master_seed: int, subject_id: str) -> int:
    """Stable per-fold seed independent of corpus order."""
    digest = hashlib.sha256(f"{master_seed}:{subject_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def pool_training_segments(recordings: list[EegRecording],
                           segment_minutes: float) -> list[LabeledSegment]:
    """All channels' segments of all recordings as one labeled pool.

    Recordings are pooled in subject_id order so results never depend on
    how the corpus happened to be listed.
    """
    pool = []
    for rec in sorted(recordings, key=lambda r: r.subject_id):
        if rec.grade is None:
            raise ValueError(f"recording {rec.subject_id!r} is unlabeled")
        for seg in segment_recording(rec, segment_minutes):
            pool.append(LabeledSegment(rec.subject_id, rec.grade, seg.samples))
    return pool


def run_fold(corpus: list[EegRecording], test_subject: str,
             config: TrainConfig, segment_minutes: float,
             checkpoint_dir=None) -> FoldResult:
    """Train on every other subject and grade the held-out one."""
    test_rec = None
    train_recs = []
    for rec in corpus:
        if rec.subject_id == test_subject:
            test_rec = rec
        else:
            train_recs.append(rec)
    if test_rec is None:
        raise ValueError(f"subject {test_subject!r} not in corpus")

    segments = pool_training_segments(train_recs, segment_minutes)
    train_subjects = {s.subject_id for s in segments}
    assert test_subject not in train_subjects, \
        f"leakage: test subject {test_subject!r} found in training pool"

    spec = build_network(int(round(segment_minutes * 60 * TARGET_RATE)))
    cfg = replace(config, seed=fold_seed(config.seed, test_subject))
    params, _curve = train(spec, segments, cfg)
    if checkpoint_dir is not None:
        save_checkpoint(params, Path(checkpoint_dir) / f"{test_subject}.hien")
    decisions = grade_recording(params, test_rec, segment_minutes, METHODS)
    return FoldResult(
        subject_id=test_subject,
        actual=test_rec.grade,
        predicted={m: d.grade for m, d in decisions.items()},
        probabilities={m: [float(v) for v in d.normalized]
                       for m, d in decisions.items()},
    )


def _fold_worker(args) -> FoldResult:
    return run_fold(*args)


def loso_evaluate(corpus: list[EegRecording], config: TrainConfig,
                  segment_minutes: float = 5.0, jobs: int = 1,
                  checkpoint_dir=None) -> LosoReport:
    """Every subject held out once; aggregate confusion per method.

    ``checkpoint_dir`` keeps each fold's trained parameters on disk as
    ``<subject>.hien`` for reproducibility audits.
    """
    if len(corpus) < 2:
        raise ValueError(f"LOSO needs at least 2 subjects, got {len(corpus)}")
    ids = [rec.subject_id for rec in corpus]
    dupes = {s for s in ids if ids.count(s) > 1}
    if dupes:
        raise ValueError(f"duplicate subject_id(s) in corpus: {sorted(dupes)}")
    unlabeled = [rec.subject_id for rec in corpus if rec.grade is None]
    if unlabeled:
        raise ValueError(f"unlabeled subject(s): {unlabeled}")
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    subjects = sorted(ids)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(
                _fold_worker,
                [(corpus, s, config, segment_minutes, checkpoint_dir)
                 for s in subjects]))
    else:
        folds = [run_fold(corpus, s, config, segment_minutes, checkpoint_dir)
                 for s in subjects]

    matrices = {
        m: ConfusionMatrix.from_pairs(
            [(f.actual, f.predicted[m]) for f in folds])
        for m in METHODS
    }
    return LosoReport(folds=folds, matrices=matrices, config=config,
                      segment_minutes=segment_minutes)


def compare_postprocessing(report: LosoReport) -> list[tuple[str, float]]:
    """Accuracy per aggregation method, in the fixed method order."""
    missing = [m for m in METHODS if m not in report.matrices]
    if missing:
        raise ValueError(f"report lacks method(s) {missing}")
    return [(m, report.matrices[m].accuracy) for m in METHODS]


def format_method_table(rows: list[tuple[str, float]]) -> str:
    lines = ["method        accuracy", "-" * 23]
    for method, acc in rows:
        lines.append(f"{method:<13s} {100 * acc:5.1f}%")
    return "\n".join(lines)


def format_confusion(matrix: ConfusionMatrix) -> str:
    lines = ["actual \\ predicted    1    2    3    4   total  false"]
    for g in range(N_GRADES):
        row = matrix.counts[g]
        lines.append(f"grade {g + 1}            " +
                     "".join(f"{v:5d}" for v in row) +
                     f"  {int(row.sum()):5d}  {int(row.sum() - row[g]):5d}")
    lines.append(f"accuracy {matrix.accuracy_percent}% "
                 f"({matrix.n_correct}/{matrix.total} correct, "
                 f"{matrix.off_by_more_than_one} off by more than one grade)")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# segment-length sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    segment_minutes: float
    accuracy: float


def segment_length_sweep(corpus: list[EegRecording], lengths: list[float],
                         config: TrainConfig, jobs: int = 1,
                         method: str = "two-step") -> list[SweepRow]:
    """LOSO accuracy per segment length; lengths that do not fit every
    recording are skipped with a warning."""
    shortest = min(rec.duration_seconds for rec in corpus)
    rows = []
    for minutes in lengths:
        if minutes * 60 > shortest:
            warnings.warn(f"segment length {minutes:g} min exceeds the "
                          f"shortest recording ({shortest:.0f} s); skipped")
            continue
        report = loso_evaluate(corpus, config, segment_minutes=minutes,
                               jobs=jobs)
        rows.append(SweepRow(minutes, report.matrices[method].accuracy))
    return rows


def sweep_to_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment_minutes", "accuracy"])
        for r in rows:
            writer.writerow([f"{r.segment_minutes:g}", f"{r.accuracy:.10g}"])
