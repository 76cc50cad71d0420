"""Acceptance suite: every shipping criterion at its stated tolerance.

Each test's first docstring line is the pass/fail label that conftest
prints in the terminal summary. Criteria 6 and 7 run the full synthetic
pipeline twice (corpus synthesis, preprocessing, leave-one-subject-out
training and grading) and together take tens of minutes; everything else
finishes in seconds.
"""

import time

import numpy as np
import pytest

from hiegrade import grading as G
from hiegrade import kernels as K
from hiegrade import model as M
from hiegrade import signals as S
from hiegrade.evaluation import ConfusionMatrix, loso_evaluate
from hiegrade.synth import CorpusSpec, generate_corpus
from hiegrade.training import TrainConfig

# configuration of the criterion-6/7 end-to-end run; the recipe favors
# stable convergence per unit of wall clock over the reference defaults
# (lr 0.01 / batch 128), which need several times the runtime budget on
# this corpus (see README and the training-throughput note there)
ACCEPT_MASTER_SEED = 7
ACCEPT_TRAIN = dict(initial_lr=0.003, batch_size=32, epochs=2,
                    decay_every=1, lr_decay=0.5, validation_fraction=0.0,
                    seed=ACCEPT_MASTER_SEED)
ACCEPT_BUDGET_SECONDS = 30 * 60


def miniature_spec():
    return M.ModelSpec(128, (
        M.LayerSpec("conv", taps=8, out_channels=4),
        M.LayerSpec("relu"),
        M.LayerSpec("maxpool", window=2, stride=2),
        M.LayerSpec("batchnorm", features=4),
        M.LayerSpec("conv", taps=4, out_channels=6),
        M.LayerSpec("relu"),
        M.LayerSpec("maxpool", window=2, stride=2),
        M.LayerSpec("conv", taps=4, out_channels=6),
        M.LayerSpec("relu"),
        M.LayerSpec("maxpool", window=2, stride=2),
        M.LayerSpec("conv", taps=3, out_channels=6),
        M.LayerSpec("relu"),
        M.LayerSpec("avgpool", window=2, stride=2),
        M.LayerSpec("maxpool", window=2, stride=2),
        M.LayerSpec("global_avg"),
        M.LayerSpec("fc", in_features=6, out_features=5),
        M.LayerSpec("fc", in_features=5, out_features=4),
        M.LayerSpec("softmax"),
    ))


class TestCriterion1:
    def test_architecture_conformance(self):
        """criterion 1: activation shapes and parameter counts exact"""
        t0 = time.perf_counter()
        spec = M.build_network(19200)
        assert spec.activation_shapes() == [
            (19200, 1), (19200, 10), (19200, 10), (4800, 10), (4800, 10),
            (4800, 20), (4800, 20), (1200, 20), (1200, 20), (1200, 20),
            (300, 20), (300, 20), (300, 20), (75, 20), (15, 20),
            (1, 20), (1, 20), (1, 4), (1, 4),
        ]
        params = M.init_params(spec, seed=0)
        probs = M.forward(params,
                          np.random.default_rng(0).normal(0, 20, (19200, 1)),
                          mode=K.TRAIN)
        M.validate_probabilities(probs)
        counts = M.count_parameters(params)
        assert counts.pairs() == [(640, 10), (10, 10), (6400, 20),
                                  (6400, 20), (3200, 20), (400, 20), (80, 4)]
        assert counts.total == 17234
        assert time.perf_counter() - t0 < 1.0


class TestCriterion2:
    def test_gradient_correctness(self):
        """criterion 2: finite-difference checks < 1e-4, layers + network"""
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        worst = {}

        # conv, both padding modes
        x = rng.uniform(-2, 2, (8, 2))
        bank = K.ConvFilterBank(rng.uniform(-1, 1, (3, 2, 2)),
                                rng.uniform(-1, 1, 2))
        for pad, out_len in ((K.PAD_SAME, 8), (K.PAD_VALID, 6)):
            r = rng.uniform(-1, 1, (out_len, 2))
            gx, gw, gb = K.conv1d_backward(x, bank, r, pad)
            rep = K.gradient_check(
                lambda: float((K.conv1d_forward(x, bank, pad) * r).sum()),
                {"x": x, "w": bank.weights, "b": bank.bias},
                {"x": gx, "w": gw, "b": gb})
            worst[f"conv-{pad}"] = rep.max_rel_error

        # relu away from its kink
        xr = rng.uniform(0.2, 2, (10,)) * rng.choice([-1.0, 1.0], 10)
        rr = rng.uniform(-1, 1, (10,))
        rep = K.gradient_check(lambda: float((K.relu(xr) * rr).sum()),
                               {"x": xr}, {"x": K.relu_backward(xr, rr)})
        worst["relu"] = rep.max_rel_error

        # pooling, both modes, overlapping and exact windows
        for window, stride in ((4, 4), (3, 2)):
            xp = rng.uniform(-2, 2, (2, 10, 3))
            out_len = (10 - window) // stride + 1
            rp = rng.uniform(-1, 1, (2, out_len, 3))
            for mode in ("max", "average"):
                g = K.pool1d_backward(xp, window, stride, mode, rp)
                rep = K.gradient_check(
                    lambda m=mode: float(
                        (K.pool1d(xp, window, stride, m) * rp).sum()),
                    {"x": xp}, {"x": g})
                worst[f"{mode}pool-{window}/{stride}"] = rep.max_rel_error

        # batch norm (train mode)
        xb = rng.uniform(-2, 2, (3, 6, 2))
        st = K.BatchNormState(rng.uniform(0.5, 1.5, 2),
                              rng.uniform(-0.5, 0.5, 2),
                              np.zeros(2), np.ones(2))
        rb = rng.uniform(-1, 1, (3, 6, 2))
        gx, gs, go = K.batchnorm_backward(xb, st, rb, K.TRAIN)
        rep = K.gradient_check(
            lambda: float((K.batchnorm_forward(xb, st, K.TRAIN) * rb).sum()),
            {"x": xb, "scale": st.scale, "offset": st.offset},
            {"x": gx, "scale": gs, "offset": go})
        worst["batchnorm"] = rep.max_rel_error

        # global average
        xg = rng.uniform(-2, 2, (2, 6, 3))
        rg = rng.uniform(-1, 1, (2, 1, 3))
        rep = K.gradient_check(
            lambda: float((K.global_average(xg) * rg).sum()),
            {"x": xg}, {"x": K.global_average_backward(xg, rg)})
        worst["global-avg"] = rep.max_rel_error

        # fully connected
        xf = rng.uniform(-2, 2, (2, 5))
        w = rng.uniform(-1, 1, (5, 4))
        b = rng.uniform(-1, 1, 4)
        rf = rng.uniform(-1, 1, (2, 4))
        gx, gw, gb = K.fully_connected_backward(xf, w, rf)
        rep = K.gradient_check(
            lambda: float((K.fully_connected(xf, w, b) * rf).sum()),
            {"x": xf, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb})
        worst["fc"] = rep.max_rel_error

        # softmax + cross-entropy at the logits
        z = rng.uniform(-2, 2, 4)
        rep = K.gradient_check(
            lambda: K.cross_entropy(K.softmax(z), 2),
            {"z": z}, {"z": K.softmax_cross_entropy_grad(K.softmax(z), 2)})
        worst["softmax-ce"] = rep.max_rel_error

        # miniature end-to-end network: 128 samples, all layer kinds
        spec = miniature_spec()
        params = M.init_params(spec, seed=11)
        xm = rng.uniform(-2, 2, (2, 128, 1))
        grades = np.array([2, 4])
        probs, tape = M.forward(params, xm, mode=K.TRAIN, return_tape=True)
        lg = K.softmax_cross_entropy_grad(probs, grades) / len(grades)
        grads, gin = M.backward(params, tape, lg, need_input_grad=True)
        rep = K.gradient_check(
            lambda: float(np.mean(K.cross_entropy(
                M.forward(params, xm, mode=K.TRAIN), grades))),
            {"input": xm, **dict(params.trainable())},
            {"input": gin, **grads})
        worst["end-to-end"] = rep.max_rel_error

        assert max(worst.values()) < 1e-4, worst
        assert time.perf_counter() - t0 < 60.0


class TestCriterion3:
    def test_segmentation_arithmetic(self):
        """criterion 3: 23/18/6/48/144 counts for a one-hour recording"""
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        rec = S.EegRecording(
            "hour", 64, [f"ch{i}" for i in range(8)],
            rng.normal(0, 10, (8, 230400)).astype(np.float32), grade=2)
        segments = G.segment_recording(rec, 5.0)
        assert len(segments) == 23 * 8
        per_channel = [s for s in segments if s.channel_index == 0]
        assert len(per_channel) == 23

        vecs = rng.uniform(0, 1, (len(segments), 4))
        vecs /= vecs.sum(axis=1, keepdims=True)
        probs = G.SegmentProbabilities(
            channels=np.array([s.channel_index for s in segments]),
            starts=np.array([s.start_time for s in segments]),
            probs=vecs, segment_seconds=300.0)
        pv = G.group_ten_minute(probs, rec.duration_seconds)
        assert pv.segments_used // 8 == 18      # contained per channel
        assert pv.n_periods == 6                # ten-minute vectors/channel
        assert pv.vectors.shape[0] * pv.n_periods == 48  # one-step inputs
        raw = G.vote_raw_average(probs, rec.duration_seconds)
        assert raw.n_segments_used == 144       # raw-average inputs
        assert time.perf_counter() - t0 < 1.0


class TestCriterion4:
    def test_voting_properties(self):
        """criterion 4: permutation/unanimity/tie-break on 1000 toys + oracle"""
        t0 = time.perf_counter()
        rng = np.random.default_rng(2)

        def median_oracle(values):
            # order-statistics median: mean of the middle two when even
            v = sorted(values)
            n = len(v)
            mid = n // 2
            return v[mid] if n % 2 else 0.5 * (v[mid - 1] + v[mid])

        for trial in range(1000):
            n_ch = int(rng.integers(2, 9))
            n_per = int(rng.integers(1, 7))
            vectors = rng.uniform(0, 1, (n_ch, n_per, 4))
            vectors /= vectors.sum(axis=2, keepdims=True)
            pv = G.PeriodVectors(list(range(n_ch)),
                                 np.arange(n_per) * 600.0, vectors,
                                 n_ch * n_per * 3)
            one, two = G.vote_one_step(pv), G.vote_two_step(pv)

            # channel permutation invariance
            perm = rng.permutation(n_ch)
            pv_p = G.PeriodVectors(pv.channel_ids, pv.period_starts,
                                   vectors[perm], pv.segments_used)
            assert G.vote_one_step(pv_p).grade == one.grade
            assert G.vote_two_step(pv_p).grade == two.grade
            np.testing.assert_allclose(
                G.vote_two_step(pv_p).probabilities, two.probabilities)

            # argmax consistency with lowest-index tie-breaking
            for d in (one, two):
                best = max(d.probabilities)
                assert d.grade - 1 == min(
                    i for i, v in enumerate(d.probabilities) if v == best)

        # unanimity fixed point
        for trial in range(50):
            v = rng.uniform(0, 1, 4)
            v /= v.sum()
            vectors = np.broadcast_to(v, (5, 6, 4)).copy()
            pv = G.PeriodVectors(list(range(5)), np.arange(6) * 600.0,
                                 vectors, 90)
            for d in (G.vote_one_step(pv), G.vote_two_step(pv)):
                assert d.grade == int(np.argmax(v)) + 1
                np.testing.assert_allclose(d.probabilities, v, atol=1e-12)

        # explicit tie: equal halves break to the lower grade
        tie = np.zeros((2, 1, 4))
        tie[:, :, 1] = 0.5
        tie[:, :, 3] = 0.5
        pv = G.PeriodVectors([0, 1], np.array([0.0]), tie, 6)
        assert G.vote_one_step(pv).grade == 2
        assert G.vote_two_step(pv).grade == 2

        # two-step vs order-statistics oracle, 3- and 8-channel toys
        for n_ch in (3, 8):
            for trial in range(200):
                vectors = rng.uniform(0, 1, (n_ch, 4, 4))
                vectors /= vectors.sum(axis=2, keepdims=True)
                pv = G.PeriodVectors(list(range(n_ch)),
                                     np.arange(4) * 600.0, vectors,
                                     n_ch * 12)
                got = G.vote_two_step(pv)
                med = np.array([[median_oracle(vectors[:, p, c])
                                 for c in range(4)] for p in range(4)])
                np.testing.assert_allclose(got.probabilities, med.mean(axis=0),
                                           atol=1e-12)
        assert time.perf_counter() - t0 < 10.0


class TestCriterion5:
    def test_signal_path(self):
        """criterion 5: filter tone mask, decimation lengths, montage zero"""
        t0 = time.perf_counter()
        design = S.design_antialias_filter()
        t = np.arange(256 * 20) / 256
        pass_amp = np.sqrt(2) * np.std(
            S.apply_filter(design, np.sin(2 * np.pi * 10 * t))[256:-256])
        assert abs(pass_amp - 1.0) <= 0.01
        stop_amp = np.sqrt(2) * np.std(
            S.apply_filter(design, np.sin(2 * np.pi * 40 * t))[256:-256])
        assert 20 * np.log10(stop_amp) <= -40.0

        rec = S.EegRecording("len", 256, ["a"],
                             np.zeros((1, 230400), dtype=np.float32))
        out = S.downsample(rec)
        assert out.n_samples == 57600 and out.sample_rate == 64

        rng = np.random.default_rng(3)
        electrodes = S.EegRecording(
            "mont", 256, list(S.ELECTRODES),
            rng.normal(0, 20, (9, 2560)).astype(np.float32))
        idx = {lbl: i for i, lbl in enumerate(electrodes.channel_labels)}
        electrodes.samples[idx["F4"]] = electrodes.samples[idx["C4"]]
        montaged = S.derive_bipolar_montage(electrodes)
        assert montaged.channel_labels[0] == "F4-C4"
        assert not montaged.samples[0].any()
        assert time.perf_counter() - t0 < 5.0


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    """Corpus synthesis + preprocessing + two identical LOSO runs."""
    root = tmp_path_factory.mktemp("acceptance")
    t0 = time.perf_counter()
    spec = CorpusSpec(subjects_per_grade=3, duration_s=3600.0,
                      sample_rate=256, master_seed=ACCEPT_MASTER_SEED)
    entries = generate_corpus(spec, root / "raw")
    corpus = [S.preprocess_recording(S.load_recording(root / "raw" / e.path))
              for e in entries]
    config = TrainConfig(**ACCEPT_TRAIN)

    report_a = loso_evaluate(corpus, config, segment_minutes=5.0,
                             checkpoint_dir=root / "ckpt_a")
    first_run_seconds = time.perf_counter() - t0
    report_a.save_json(root / "report_a.json")

    report_b = loso_evaluate(corpus, config, segment_minutes=5.0,
                             checkpoint_dir=root / "ckpt_b")
    report_b.save_json(root / "report_b.json")
    return dict(root=root, report_a=report_a, report_b=report_b,
                first_run_seconds=first_run_seconds)


class TestCriterion6:
    def test_desk_scale_end_to_end(self, pipeline_runs):
        """criterion 6: synthetic LOSO two-step >= 90%, adjacent errors only"""
        report = pipeline_runs["report_a"]
        assert len(report.folds) == 12
        matrix = report.matrices["two-step"]
        assert matrix.total == 12
        assert matrix.accuracy >= 0.90, (
            f"two-step accuracy {matrix.accuracy_percent}%: "
            + "; ".join(f"{f.subject_id}:{f.actual}->{f.predicted['two-step']}"
                        for f in report.folds))
        assert matrix.off_by_more_than_one == 0
        assert pipeline_runs["first_run_seconds"] < ACCEPT_BUDGET_SECONDS


class TestCriterion7:
    def test_bitwise_determinism(self, pipeline_runs):
        """criterion 7: rerun reproduces identical checkpoints and reports"""
        root = pipeline_runs["root"]
        ckpts_a = sorted((root / "ckpt_a").glob("*.hien"))
        ckpts_b = sorted((root / "ckpt_b").glob("*.hien"))
        assert len(ckpts_a) == 12 and len(ckpts_b) == 12
        for a, b in zip(ckpts_a, ckpts_b):
            assert a.name == b.name
            assert a.read_bytes() == b.read_bytes(), a.name
        assert (root / "report_a.json").read_bytes() == \
            (root / "report_b.json").read_bytes()


class TestCriterion8:
    def test_published_statistics_from_fixture(self):
        """criterion 8: fixture counts reproduce the reported statistics"""
        # the clinical dataset is private, so the headline accuracies are
        # context only; the harness must recover the derived statistics
        # from the published confusion counts entered as a fixture
        fixture = ConfusionMatrix(np.array([
            [22, 0, 0, 0],
            [6, 7, 1, 0],
            [0, 3, 9, 0],
            [0, 0, 0, 6],
        ]))
        assert fixture.total == 54
        assert fixture.n_correct == 44
        assert fixture.accuracy_percent == 81.5
        assert fixture.off_by_more_than_one == 0
        np.testing.assert_allclose(fixture.per_class_recall(),
                                   [1.0, 0.5, 0.75, 1.0])
