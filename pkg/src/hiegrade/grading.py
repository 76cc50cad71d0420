"""Overlapping segmentation of 64 Hz recordings, per-segment inference,
and the three post-processing schemes that turn segment probabilities
into one grade per recording.

The aggregation methods:
  raw-average  mean over every period-contained segment vector from all
               channels (144 for a one-hour recording), then argmax;
  one-step     mean of the per-channel ten-minute period vectors
               (6 x 8 = 48 for an hour), then argmax;
  two-step     per-period elementwise median across channels, mean of the
               period medians, then argmax.

Only segments fully contained in a ten-minute period take part in any
aggregation; with five-minute segments and 50% overlap that keeps 18 of
the 23 per-channel segments of an hour-long recording. Argmax ties break
toward the lower grade index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .model import ModelParams, forward
from .signals import EegRecording, TARGET_RATE

PERIOD_SECONDS = 600.0

METHODS = ("raw-average", "one-step", "two-step")


@dataclass(frozen=True)
class Segment:
    """A single-channel window: samples (length,) float64, microvolts."""

    channel_index: int
    start_time: float  # seconds from recording start
    samples: np.ndarray

    @property
    def duration(self) -> float:
        return len(self.samples) / TARGET_RATE


@dataclass
class SegmentProbabilities:
    """One grade-probability row per segment, tagged with its origin."""

    channels: np.ndarray      # (n,) int
    starts: np.ndarray        # (n,) float seconds
    probs: np.ndarray         # (n, 4)
    segment_seconds: float

    def __len__(self) -> int:
        return self.probs.shape[0]


@dataclass
class PeriodVectors:
    """Per-channel ten-minute probability vectors on a common period grid."""

    channel_ids: list[int]
    period_starts: np.ndarray    # (P,) seconds
    vectors: np.ndarray          # (n_channels, P, 4)
    segments_used: int           # contained segments across all channels

    @property
    def n_periods(self) -> int:
        return self.vectors.shape[1]


@dataclass
class GradeDecision:
    """Final grade with the aggregate behind it.

    ``probabilities`` is the raw aggregate (the two-step median/mean need
    not sum to one); ``normalized`` is a display copy scaled to sum one.
    ``n_segments_used`` counts the vectors entering the final averaging
    step: 144 / 48 / 6 for a one-hour recording under raw-average,
    one-step and two-step respectively.
    """

    grade: int
    probabilities: np.ndarray
    normalized: np.ndarray
    method: str
    per_period: np.ndarray  # (P, 4)
    n_segments_used: int

    def to_json_dict(self, subject_id: str) -> dict:
        return {
            "subject_id": subject_id,
            "method": self.method,
            "grade": self.grade,
            "probabilities": [float(v) for v in self.probabilities],
            "normalized": [float(v) for v in self.normalized],
            "n_segments_used": self.n_segments_used,
            "per_period": [[float(v) for v in row] for row in self.per_period],
        }

    def csv_fields(self, subject_id: str) -> list:
        return ([subject_id, self.method, self.grade]
                + [f"{v:.10g}" for v in self.normalized]
                + [self.n_segments_used])


DECISION_CSV_HEADER = ["subject_id", "method", "grade",
                       "p1", "p2", "p3", "p4", "n_segments_used"]


def _argmax_grade(vector: np.ndarray) -> int:
    # np.argmax returns the first maximum: ties break toward lower grades
    return int(np.argmax(vector)) + 1


def _normalize(vector: np.ndarray) -> np.ndarray:
    total = vector.sum()
    if total <= 0:  # degenerate all-zero aggregate (tiny toy inputs only)
        return np.full_like(vector, 1.0 / len(vector))
    return vector / total


# ---------------------------------------------------------------------------
# segmentation and inference
# ---------------------------------------------------------------------------

def segment_recording(rec: EegRecording, segment_minutes: float = 5.0,
                      overlap: float = 0.5) -> list[Segment]:
    """Slice every channel into fixed windows with the given overlap.

    Windows start at 0, stride, 2*stride, ... while they fit entirely in
    the recording; stride = window * (1 - overlap).
    """
    if rec.sample_rate != TARGET_RATE:
        raise ValueError(f"segmentation expects a {TARGET_RATE} Hz recording,"
                         f" got {rec.sample_rate} Hz")
    if not 0 < overlap < 1:
        raise ValueError(f"overlap must be in (0, 1), got {overlap}")
    window = int(round(segment_minutes * 60 * rec.sample_rate))
    if window < 1:
        raise ValueError(f"segment length {segment_minutes} min is empty")
    if rec.n_samples < window:
        raise ValueError(
            f"recording {rec.subject_id!r} ({rec.duration_seconds:.0f} s) is "
            f"shorter than one {segment_minutes:g}-minute segment")
    stride = max(1, int(round(window * (1 - overlap))))
    segments = []
    for ch in range(rec.n_channels):
        channel = rec.samples[ch].astype(np.float64)
        for start in range(0, rec.n_samples - window + 1, stride):
            segments.append(Segment(
                channel_index=ch,
                start_time=start / rec.sample_rate,
                samples=channel[start:start + window]))
    return segments


def segments_per_channel(n_samples: int, segment_minutes: float,
                         rate: int = TARGET_RATE) -> int:
    window = int(round(segment_minutes * 60 * rate))
    stride = window // 2
    return (n_samples - window) // stride + 1


def infer_segments(params: ModelParams, segments: list[Segment],
                   batch_size: int = 64) -> SegmentProbabilities:
    """Grade probabilities for each segment, order-preserving."""
    if not segments:
        raise ValueError("no segments to grade")
    length = params.spec.segment_samples
    for i, seg in enumerate(segments):
        if len(seg.samples) != length:
            raise ValueError(f"segment {i} has {len(seg.samples)} samples, "
                             f"model expects {length}")
    probs = np.empty((len(segments), model_mod.N_GRADES))
    for lo in range(0, len(segments), batch_size):
        chunk = segments[lo:lo + batch_size]
        batch = np.stack([s.samples for s in chunk])[:, :, None]
        probs[lo:lo + len(chunk)] = forward(params, batch, mode=model_mod.INFER)
    return SegmentProbabilities(
        channels=np.array([s.channel_index for s in segments]),
        starts=np.array([s.start_time for s in segments]),
        probs=probs,
        segment_seconds=length / TARGET_RATE,
    )


# ---------------------------------------------------------------------------
# ten-minute grouping
# ---------------------------------------------------------------------------

def _containment(starts: np.ndarray, segment_seconds: float,
                 duration: float) -> tuple[np.ndarray, np.ndarray]:
    """Period index per segment (-1 for boundary straddlers) and the
    starts of periods that could hold segments."""
    n_periods = int(np.ceil(duration / PERIOD_SECONDS))
    period = np.floor(starts / PERIOD_SECONDS).astype(int)
    contained = (starts >= period * PERIOD_SECONDS) & \
                (starts + segment_seconds <= (period + 1) * PERIOD_SECONDS)
    period = np.where(contained, period, -1)
    period_starts = np.arange(n_periods) * PERIOD_SECONDS
    return period, period_starts


def group_ten_minute(probs: SegmentProbabilities,
                     recording_duration: float) -> PeriodVectors:
    """Average the vectors of segments fully inside each ten-minute period.

    Boundary-straddling segments are excluded. A trailing partial period
    keeps whatever contained segments it has, or is dropped if empty.
    """
    period, period_starts = _containment(
        probs.starts, probs.segment_seconds, recording_duration)
    channel_ids = sorted(set(int(c) for c in probs.channels))
    n_periods = len(period_starts)
    sums = np.zeros((len(channel_ids), n_periods, probs.probs.shape[1]))
    counts = np.zeros((len(channel_ids), n_periods), dtype=int)
    ch_pos = {c: i for i, c in enumerate(channel_ids)}
    for i in range(len(probs)):
        p = period[i]
        if p < 0:
            continue
        c = ch_pos[int(probs.channels[i])]
        sums[c, p] += probs.probs[i]
        counts[c, p] += 1

    # keep only periods populated for every channel (identical grids per
    # channel make this all-or-nothing in practice)
    keep = np.all(counts > 0, axis=0)
    if not np.any(keep):
        raise ValueError("no ten-minute period holds a fully contained "
                         "segment; recording too short for this grouping")
    vectors = sums[:, keep] / counts[:, keep, None]
    return PeriodVectors(
        channel_ids=channel_ids,
        period_starts=period_starts[keep],
        vectors=vectors,
        segments_used=int(counts[:, keep].sum()),
    )


# ---------------------------------------------------------------------------
# voting
# ---------------------------------------------------------------------------

def vote_raw_average(probs: SegmentProbabilities,
                     recording_duration: float) -> GradeDecision:
    """Mean over all period-contained segment vectors, then argmax."""
    period, period_starts = _containment(
        probs.starts, probs.segment_seconds, recording_duration)
    mask = period >= 0
    if not np.any(mask):
        raise ValueError("no period-contained segments to average")
    used = probs.probs[mask]
    aggregate = used.mean(axis=0)
    per_period = []
    for k in range(len(period_starts)):
        rows = probs.probs[period == k]
        if len(rows):
            per_period.append(rows.mean(axis=0))
    return GradeDecision(
        grade=_argmax_grade(aggregate),
        probabilities=aggregate,
        normalized=_normalize(aggregate),
        method="raw-average",
        per_period=np.array(per_period),
        n_segments_used=int(mask.sum()),
    )


def vote_one_step(period_vectors: PeriodVectors) -> GradeDecision:
    """Mean of every (channel, period) vector, then argmax."""
    if period_vectors.vectors.size == 0:
        raise ValueError("no period vectors to vote on")
    aggregate = period_vectors.vectors.mean(axis=(0, 1))
    return GradeDecision(
        grade=_argmax_grade(aggregate),
        probabilities=aggregate,
        normalized=_normalize(aggregate),
        method="one-step",
        per_period=period_vectors.vectors.mean(axis=0),
        n_segments_used=period_vectors.vectors.shape[0]
        * period_vectors.n_periods,
    )


def vote_two_step(period_vectors: PeriodVectors) -> GradeDecision:
    """Median across channels per period, mean across periods, argmax.

    With an even channel count the median is the mean of the two middle
    order statistics. The aggregate need not sum to one; the normalized
    copy is for display.
    """
    if period_vectors.vectors.size == 0:
        raise ValueError("no period vectors to vote on")
    medians = np.median(period_vectors.vectors, axis=0)  # (P, 4)
    aggregate = medians.mean(axis=0)
    return GradeDecision(
        grade=_argmax_grade(aggregate),
        probabilities=aggregate,
        normalized=_normalize(aggregate),
        method="two-step",
        per_period=medians,
        n_segments_used=period_vectors.n_periods,
    )


def grade_recording(params: ModelParams, rec: EegRecording,
                    segment_minutes: float = 5.0,
                    methods: tuple[str, ...] = METHODS,
                    ) -> dict[str, GradeDecision]:
    """Segment, infer, and aggregate one recording with the given methods."""
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown voting method(s) {unknown}; "
                         f"choose from {list(METHODS)}")
    segments = segment_recording(rec, segment_minutes)
    probs = infer_segments(params, segments)
    duration = rec.duration_seconds
    decisions = {}
    need_periods = any(m in ("one-step", "two-step") for m in methods)
    period_vectors = group_ten_minute(probs, duration) if need_periods else None
    for m in methods:
        if m == "raw-average":
            decisions[m] = vote_raw_average(probs, duration)
        elif m == "one-step":
            decisions[m] = vote_one_step(period_vectors)
        else:
            decisions[m] = vote_two_step(period_vectors)
    return decisions
