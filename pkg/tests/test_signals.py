"""Recording formats, montage derivation, filtering, decimation."""

import struct

import numpy as np
import pytest

from hiegrade import signals as S


def electrode_recording(n=1024, rate=256, seed=0, subject="sub01", grade=2):
    rng = np.random.default_rng(seed)
    samples = rng.normal(0, 20, (9, n)).astype(np.float32)
    return S.EegRecording(subject, rate, list(S.ELECTRODES), samples, grade)


class TestRecordingType:
    def test_rejects_zero_rate(self):
        with pytest.raises(ValueError, match="sample_rate"):
            S.EegRecording("x", 0, ["a"], np.zeros((1, 4)))

    def test_rejects_label_count_mismatch(self):
        with pytest.raises(ValueError, match="labels"):
            S.EegRecording("x", 64, ["a", "b"], np.zeros((1, 4)))

    def test_rejects_nonfinite(self):
        bad = np.zeros((1, 4), dtype=np.float32)
        bad[0, 2] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            S.EegRecording("x", 64, ["a"], bad)

    def test_rejects_bad_grade(self):
        with pytest.raises(ValueError, match="grade"):
            S.EegRecording("x", 64, ["a"], np.zeros((1, 4)), grade=5)

    def test_duration(self):
        rec = S.EegRecording("x", 64, ["a"], np.zeros((1, 640)))
        assert rec.duration_seconds == 10.0


class TestNeegFormat:
    def test_round_trip_bitwise(self, tmp_path):
        rec = electrode_recording()
        path = tmp_path / "r.neeg"
        S.save_recording(rec, path)
        loaded = S.load_recording(path)
        assert loaded.subject_id == rec.subject_id
        assert loaded.sample_rate == rec.sample_rate
        assert loaded.channel_labels == rec.channel_labels
        assert loaded.grade == rec.grade
        np.testing.assert_array_equal(loaded.samples, rec.samples)

    def test_unlabeled_grade_round_trip(self, tmp_path):
        rec = electrode_recording()
        rec.grade = None
        S.save_recording(rec, tmp_path / "r.neeg")
        assert S.load_recording(tmp_path / "r.neeg").grade is None

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "r.neeg"
        path.write_bytes(b"WHAT" + b"\0" * 32)
        with pytest.raises(ValueError, match="magic"):
            S.load_recording(path)

    def test_zero_sample_rate_rejected(self, tmp_path):
        path = tmp_path / "r.neeg"
        # craft a header with sample_rate == 0
        path.write_bytes(S.RECORDING_MAGIC +
                         struct.pack("<HIHQ", S.RECORDING_VERSION, 0, 1, 4) +
                         struct.pack("<H", 1) + b"x" +
                         struct.pack("<H", 1) + b"a" +
                         b"\0" + b"\0" * 16)
        with pytest.raises(ValueError, match="sample_rate"):
            S.load_recording(path)

    def test_truncated_payload(self, tmp_path):
        rec = electrode_recording()
        path = tmp_path / "r.neeg"
        S.save_recording(rec, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-17])
        with pytest.raises(ValueError, match="truncated"):
            S.load_recording(path)

    def test_version_mismatch(self, tmp_path):
        rec = electrode_recording()
        path = tmp_path / "r.neeg"
        S.save_recording(rec, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 2
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            S.load_recording(path)


class TestCsvImport:
    def test_nine_labeled_columns(self, tmp_path):
        path = tmp_path / "r.csv"
        rng = np.random.default_rng(1)
        data = rng.normal(0, 10, (100, 9)).astype(np.float32)
        with open(path, "w") as fh:
            fh.write(",".join(S.ELECTRODES) + "\n")
            for row in data:
                fh.write(",".join(f"{v:.6g}" for v in row) + "\n")
        rec = S.load_recording_csv(path, sample_rate=256)
        assert rec.n_channels == 9
        assert rec.channel_labels == list(S.ELECTRODES)
        assert rec.n_samples == 100
        assert rec.subject_id == "r"

    def test_ragged_row_rejected(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("a,b\n1,2\n3\n")
        with pytest.raises(ValueError, match="2 labeled"):
            S.load_recording_csv(path)

    def test_empty_rejected(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("a,b\n")
        with pytest.raises(ValueError, match="no samples"):
            S.load_recording_csv(path)


class TestManifest:
    def test_round_trip(self, tmp_path):
        entries = [S.ManifestEntry("s1", 1, "s1.neeg"),
                   S.ManifestEntry("s2", 4, "s2.neeg")]
        S.save_manifest(entries, tmp_path / "manifest.csv")
        assert S.load_manifest(tmp_path / "manifest.csv") == entries

    def test_grade_out_of_range(self, tmp_path):
        (tmp_path / "m.csv").write_text("subject_id,grade,path\ns1,7,x\n")
        with pytest.raises(ValueError, match="out of range"):
            S.load_manifest(tmp_path / "m.csv")

    def test_missing_columns(self, tmp_path):
        (tmp_path / "m.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError, match="columns"):
            S.load_manifest(tmp_path / "m.csv")


class TestMontage:
    def test_eight_channels_with_expected_labels(self):
        out = S.derive_bipolar_montage(electrode_recording())
        assert out.n_channels == 8
        assert out.channel_labels == ["F4-C4", "F3-C3", "C4-O2", "C3-O1",
                                      "T4-C4", "C3-T3", "C4-Cz", "Cz-C3"]

    def test_equal_electrodes_cancel(self):
        rec = electrode_recording()
        idx = {lbl: i for i, lbl in enumerate(rec.channel_labels)}
        rec.samples[idx["F4"]] = rec.samples[idx["C4"]]
        out = S.derive_bipolar_montage(rec)
        np.testing.assert_array_equal(out.samples[0], 0.0)

    def test_antisymmetry(self):
        rec = electrode_recording(seed=2)
        out = S.derive_bipolar_montage(rec)
        idx = {lbl: i for i, lbl in enumerate(rec.channel_labels)}
        c3_cz = rec.samples[idx["C3"]] - rec.samples[idx["Cz"]]
        np.testing.assert_array_equal(out.samples[7], -c3_cz)

    def test_missing_electrode_named(self):
        rec = electrode_recording()
        rec.channel_labels[rec.channel_labels.index("Cz")] = "XX"
        with pytest.raises(ValueError, match="Cz"):
            S.derive_bipolar_montage(rec)

    def test_linearity(self):
        rec = electrode_recording(seed=3)
        scaled = S.EegRecording(rec.subject_id, rec.sample_rate,
                                rec.channel_labels, 2.0 * rec.samples,
                                rec.grade)
        np.testing.assert_allclose(
            S.derive_bipolar_montage(scaled).samples,
            2.0 * S.derive_bipolar_montage(rec).samples, rtol=1e-6)


class TestAntialiasFilter:
    @staticmethod
    @pytest.fixture(scope="class")
    def design():
        return S.design_antialias_filter()

    def test_dc_gain(self, design):
        assert design.taps.sum() == pytest.approx(1.0, abs=1e-3)

    def test_odd_symmetric(self, design):
        assert design.taps.size % 2 == 1
        np.testing.assert_allclose(design.taps, design.taps[::-1])

    def test_passband_tone(self, design):
        t = np.arange(256 * 20) / 256
        y = S.apply_filter(design, np.sin(2 * np.pi * 10 * t))
        amp = np.sqrt(2) * np.std(y[256:-256])
        assert amp == pytest.approx(1.0, abs=0.01)

    def test_stopband_tone(self, design):
        t = np.arange(256 * 20) / 256
        y = S.apply_filter(design, np.sin(2 * np.pi * 40 * t))
        amp = np.sqrt(2) * np.std(y[256:-256])
        assert 20 * np.log10(amp) < -40.0

    def test_transition_mask(self, design):
        assert abs(20 * np.log10(design.gain_at(24.0))) < 1.0
        assert 20 * np.log10(design.gain_at(32.0)) < -40.0

    def test_cutoff_above_nyquist_rejected(self):
        with pytest.raises(ValueError, match="Nyquist"):
            S.design_antialias_filter(cutoff_hz=140.0)

    def test_unmeetable_order_rejected(self):
        with pytest.raises(ValueError, match="mask"):
            S.design_antialias_filter(num_taps=15)

    def test_zero_phase(self, design):
        # an impulse comes back centered on itself: no group delay
        x = np.zeros(501)
        x[250] = 1.0
        y = S.apply_filter(design, x)
        assert int(np.argmax(y)) == 250


class TestDownsample:
    def test_length_arithmetic(self):
        rec = S.EegRecording("x", 256, ["a"],
                             np.zeros((1, 230400), dtype=np.float32))
        out = S.downsample(rec)
        assert out.n_samples == 57600
        assert out.sample_rate == 64

    def test_constant_preserved(self):
        rec = S.EegRecording("x", 256, ["a"],
                             np.full((1, 4096), 12.5, dtype=np.float32))
        out = S.downsample(rec)
        core = out.samples[0][64:-64]
        np.testing.assert_allclose(core, 12.5, rtol=1e-3)

    def test_rate_not_divisible(self):
        rec = S.EegRecording("x", 250, ["a"], np.zeros((1, 1000)))
        with pytest.raises(ValueError, match="divisible"):
            S.downsample(rec)

    def test_filter_rate_mismatch(self):
        rec = S.EegRecording("x", 512, ["a"], np.zeros((1, 1024)))
        with pytest.raises(ValueError, match="designed for"):
            S.downsample(rec, S.design_antialias_filter(sample_rate=256))

    def test_odd_length_floor(self):
        rec = S.EegRecording("x", 256, ["a"], np.zeros((1, 1001)))
        assert S.downsample(rec).n_samples == 250

    def test_length_arithmetic_exact_for_any_length(self):
        design = S.design_antialias_filter()
        for n in (512, 513, 514, 515, 1000, 2047):
            rec = S.EegRecording("x", 256, ["a"], np.zeros((1, n)))
            assert S.downsample(rec, design).n_samples == n // 4


class TestMicrovoltScalePreserved:
    def test_montage_filter_decimate_amplitude(self):
        # a 10 Hz tone on F4 with C4 silent must come through the whole
        # path at its original amplitude: no normalization anywhere
        rate, amp, seconds = 256, 42.0, 30
        t = np.arange(rate * seconds) / rate
        samples = np.zeros((9, t.size), dtype=np.float32)
        samples[0] = amp * np.sin(2 * np.pi * 10 * t)  # F4
        rec = S.EegRecording("tone", rate, list(S.ELECTRODES), samples)
        out = S.preprocess_recording(rec)
        assert out.sample_rate == 64 and out.n_channels == 8
        core = out.samples[0].astype(np.float64)[64:-64]  # F4-C4
        measured = np.sqrt(2) * np.std(core)
        assert measured == pytest.approx(amp, rel=0.01)

    def test_already_processed_passthrough(self):
        rec = S.EegRecording("x", 64, [f"{a}-{b}" for a, b in S.BIPOLAR_PAIRS],
                             np.zeros((8, 640), dtype=np.float32))
        assert S.preprocess_recording(rec) is rec
