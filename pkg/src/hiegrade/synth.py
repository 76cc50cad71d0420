"""Deterministic synthetic multi-channel EEG with four severity classes.

Each grade archetype pairs a background amplitude band with a
burst/suppression envelope: amplitudes fall and suppression intervals
lengthen as the grade number rises, echoing how background activity
degrades with injury severity. The background is band-limited 1/f noise
shared-envelope across electrodes, so bipolar derivations keep the
burst structure. All numbers are generator parameters with no claim of
clinical validity; the corpus exists so the pipeline can be verified
end to end at desk scale.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signals import (
    BIPOLAR_PAIRS,
    ELECTRODES,
    EegRecording,
    ManifestEntry,
    RAW_RATE,
    TARGET_RATE,
    save_manifest,
    save_recording,
)

# envelope gain inside a suppression interval, and the white sensor floor
SUPPRESSION_GAIN = 0.08
SENSOR_NOISE_UV = 0.5
RAMP_SECONDS = 0.5

LEFT_ELECTRODES = {"F3", "C3", "T3", "O1"}
RIGHT_ELECTRODES = {"F4", "C4", "T4", "O2"}


@dataclass(frozen=True)
class GradeArchetype:
    """Generator parameters for one severity class."""

    grade: int
    amplitude_uv: tuple[float, float]     # background RMS range during bursts
    suppression_s: tuple[float, float]    # inter-burst interval duration
    burst_s: tuple[float, float]          # burst duration
    discontinuity: float                  # target suppressed-time fraction
    asymmetry: float                      # hemisphere amplitude imbalance
    band_hz: tuple[float, float]          # dominant background band


DEFAULT_ARCHETYPES: dict[int, GradeArchetype] = {
    1: GradeArchetype(1, (30.0, 50.0), (0.0, 0.0), (0.0, 0.0), 0.00, 0.00,
                      (1.0, 12.0)),
    2: GradeArchetype(2, (20.0, 40.0), (2.0, 5.0), (20.0, 45.0), 0.10, 0.05,
                      (1.0, 10.0)),
    3: GradeArchetype(3, (10.0, 25.0), (5.0, 15.0), (10.0, 20.0), 0.40, 0.12,
                      (0.5, 6.0)),
    4: GradeArchetype(4, (3.0, 10.0), (10.0, 60.0), (2.0, 6.0), 0.75, 0.20,
                      (0.5, 3.0)),
}


@dataclass(frozen=True)
class CorpusSpec:
    subjects_per_grade: int = 3
    duration_s: float = 3600.0
    sample_rate: int = RAW_RATE  # 256 -> 9 electrodes; 64 -> 8 bipolar channels
    master_seed: int = 0

    def __post_init__(self):
        if self.subjects_per_grade < 1:
            raise ValueError("subjects_per_grade must be >= 1")
        if self.sample_rate not in (RAW_RATE, TARGET_RATE):
            raise ValueError(f"sample_rate must be {RAW_RATE} or "
                             f"{TARGET_RATE}, got {self.sample_rate}")
        if self.duration_s < 600:
            raise ValueError(f"duration must be >= 600 s, got {self.duration_s}")


def subject_seed(master_seed: int, subject_id: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{subject_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _band_limited_pink_noise(rng: np.random.Generator, n: int, rate: int,
                             band: tuple[float, float]) -> np.ndarray:
    """Unit-RMS noise with 1/f power inside the band, tapered to zero above."""
    lo, hi = band
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    shape = 1.0 / np.sqrt(np.maximum(freqs, lo))
    shape[freqs > 2 * hi] = 0.0
    taper = (freqs > hi) & (freqs <= 2 * hi)
    shape[taper] *= 0.5 * (1 + np.cos(np.pi * (freqs[taper] - hi) / hi))
    shape[0] = 0.0  # no DC
    x = np.fft.irfft(spectrum * shape, n)
    return x / np.sqrt(np.mean(x ** 2))


def _burst_suppression_envelope(rng: np.random.Generator, n: int, rate: int,
                                arch: GradeArchetype) -> np.ndarray:
    """Alternating burst/suppression gain profile with smooth ramps."""
    if arch.discontinuity == 0.0:
        return np.ones(n)
    env = np.empty(n)
    pos = 0
    in_burst = True
    while pos < n:
        dur_s = rng.uniform(*(arch.burst_s if in_burst else arch.suppression_s))
        length = max(1, int(round(dur_s * rate)))
        env[pos:pos + length] = 1.0 if in_burst else SUPPRESSION_GAIN
        pos += length
        in_burst = not in_burst
    ramp = max(1, int(RAMP_SECONDS * rate))
    kernel = np.hanning(2 * ramp + 1)
    kernel /= kernel.sum()
    return np.convolve(env, kernel, mode="same")


def _electrode_gain(label: str, asymmetry: float) -> float:
    if label in LEFT_ELECTRODES:
        return 1.0 - asymmetry
    if label in RIGHT_ELECTRODES:
        return 1.0 + asymmetry
    return 1.0


def generate_subject(archetype: GradeArchetype, duration_s: float, seed: int,
                     subject_id: str, sample_rate: int = RAW_RATE,
                     ) -> EegRecording:
    """One labeled recording: shared envelope, independent channel noise.

    At 256 Hz the nine scalp electrodes are emitted (montage still to be
    derived); at 64 Hz the eight bipolar channels are emitted directly.
    """
    if duration_s < 600:
        raise ValueError(f"duration must be >= 600 s, got {duration_s}")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    target_rms = rng.uniform(*archetype.amplitude_uv)
    envelope = _burst_suppression_envelope(rng, n, sample_rate, archetype)

    if sample_rate == RAW_RATE:
        labels = list(ELECTRODES)
        gains = [_electrode_gain(e, archetype.asymmetry) for e in labels]
    else:
        labels = [f"{a}-{b}" for a, b in BIPOLAR_PAIRS]
        gains = [1.0] * len(labels)

    samples = np.empty((len(labels), n), dtype=np.float32)
    for i, gain in enumerate(gains):
        noise = _band_limited_pink_noise(rng, n, sample_rate, archetype.band_hz)
        floor = rng.standard_normal(n) * SENSOR_NOISE_UV
        samples[i] = (target_rms * gain * noise * envelope + floor
                      ).astype(np.float32)
    return EegRecording(subject_id, sample_rate, labels, samples,
                        grade=archetype.grade)


def generate_corpus(spec: CorpusSpec, out_dir,
                    archetypes: dict[int, GradeArchetype] | None = None,
                    ) -> list[ManifestEntry]:
    """Write one NEEG file per subject plus the labels manifest.

    Subjects are independent given their derived seeds, so regeneration
    with the same master seed reproduces every byte.
    """
    archetypes = archetypes or DEFAULT_ARCHETYPES
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for grade in sorted(archetypes):
        for k in range(spec.subjects_per_grade):
            subject_id = f"g{grade}s{k:02d}"
            rec = generate_subject(
                archetypes[grade], spec.duration_s,
                subject_seed(spec.master_seed, subject_id),
                subject_id, spec.sample_rate)
            filename = f"{subject_id}.neeg"
            save_recording(rec, out_dir / filename)
            entries.append(ManifestEntry(subject_id, grade, filename))
    save_manifest(entries, out_dir / "manifest.csv")
    return entries
