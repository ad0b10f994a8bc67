import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headgaze.datasets import SampleSet
from headgaze.evalreport import (
    AEM_PLOT,
    CONFUSION_PLOT,
    LOSS_PLOT,
    SCATTER_PLOT,
    SUMMARY_FILE,
    MetricsReport,
    confusion,
    evaluate,
    render_reports,
    report_from_predictions,
)
from headgaze.geometry import aem, vem
from headgaze.synthgen import GeneratorConfig, generate_set
from headgaze.training import TrainConfig, TrainHistory, build_model, prepare, spec_for


def random_labels(rng, n, width=2):
    return rng.uniform(-40, 40, size=(n, width))


class TestReport:
    def test_perfect(self):
        t = random_labels(np.random.default_rng(0), 20)
        r = report_from_predictions(t, t, ["a"] * 20, ["left"] * 20)
        assert r.aem == 0 and r.vem == pytest.approx(0, abs=1e-6)

    def test_zero_predictor_hand_value(self):
        t = np.array([[10.0, -4.0], [3.0, 7.0], [-6.0, 0.5]])
        r = report_from_predictions(np.zeros_like(t), t, ["a"] * 3, ["left"] * 3)
        # sum of |yaw| + |pitch| over 2n
        assert r.aem == pytest.approx((10 + 4 + 3 + 7 + 6 + 0.5) / 6, abs=1e-12)

    def test_matches_geometry_samplewise(self):
        rng = np.random.default_rng(1)
        t, p = random_labels(rng, 50), random_labels(rng, 50)
        r = report_from_predictions(p, t, [f"s{i % 5}" for i in range(50)], ["left"] * 50)
        assert r.aem == pytest.approx(aem(p, t), abs=1e-12)
        assert r.vem == pytest.approx(np.mean([vem(a, b) for a, b in zip(p, t)]), abs=1e-9)
        for s in ("s0", "s3"):
            idx = [i for i in range(50) if i % 5 == int(s[1])]
            assert r.per_subject[s]["aem"] == pytest.approx(aem(p[idx], t[idx]), abs=1e-12)

    def test_dual_is_mean_of_single_eyes(self):
        rng = np.random.default_rng(2)
        t, p = random_labels(rng, 30, 4), random_labels(rng, 30, 4)
        subj = ["x"] * 30
        dual = report_from_predictions(p, t, subj, ["both"] * 30)
        left = report_from_predictions(p[:, :2], t[:, :2], subj, ["left"] * 30)
        right = report_from_predictions(p[:, 2:], t[:, 2:], subj, ["right"] * 30)
        assert dual.aem == pytest.approx((left.aem + right.aem) / 2, abs=1e-12)
        assert dual.vem == pytest.approx((left.vem + right.vem) / 2, abs=1e-12)
        assert dual.per_eye["left"]["aem"] == pytest.approx(left.aem, abs=1e-12)
        assert dual.n_pairs == 60 and dual.n_units == 30

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_order_invariant(self, seed):
        rng = np.random.default_rng(seed)
        t, p = random_labels(rng, 40), random_labels(rng, 40)
        subj = [f"s{i % 3}" for i in range(40)]
        eyes = ["left", "right"] * 20
        perm = rng.permutation(40)
        a = report_from_predictions(p, t, subj, eyes)
        b = report_from_predictions(p[perm], t[perm], [subj[i] for i in perm], [eyes[i] for i in perm])
        assert a.to_dict() == b.to_dict()

    def test_empty(self):
        with pytest.raises(ValueError):
            report_from_predictions(np.zeros((0, 2)), np.zeros((0, 2)), [], [])

    def test_dict_round_trip(self):
        t = random_labels(np.random.default_rng(3), 9)
        r = report_from_predictions(t + 1, t, ["a"] * 9, ["left"] * 9)
        r.confusion = confusion(np.arange(1, 10), np.arange(1, 10))
        back = MetricsReport.from_dict(json.loads(json.dumps(r.to_dict())))
        assert back.to_dict() == r.to_dict()


class TestConfusion:
    def test_identity(self):
        ids = np.arange(1, 10).repeat(3)
        c = confusion(ids, ids)
        np.testing.assert_array_equal(c.matrix, np.eye(9))
        assert c.accuracy == 1.0 and c.empty_rows == []

    def test_uniform_row(self):
        c = confusion(np.arange(1, 10), np.full(9, 4))
        np.testing.assert_allclose(c.matrix[3], np.full(9, 1 / 9))
        assert c.empty_rows == [1, 2, 3, 5, 6, 7, 8, 9]
        assert np.all(c.matrix[0] == 0)

    def test_tally_oracle(self):
        rng = np.random.default_rng(4)
        preds, labels = rng.integers(1, 10, 1000), rng.integers(1, 10, 1000)
        c = confusion(preds, labels)
        tally = np.zeros((9, 9), dtype=int)
        for p, t in zip(preds, labels):
            tally[t - 1, p - 1] += 1
        np.testing.assert_array_equal(c.counts, tally)
        np.testing.assert_allclose(c.matrix.sum(axis=1), 1.0, atol=1e-9)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            confusion([0, 1], [1, 1])
        with pytest.raises(ValueError):
            confusion([1, 10], [1, 1])


@pytest.fixture(scope="module")
def tiny():
    ss = generate_set(12, GeneratorConfig(face_size=(32, 32), eye_size=(32, 48), seed=8))
    cfg = TrainConfig(depth=10, width=4, strategy="BEC")
    data = prepare(ss, "BEC")
    return ss, cfg, data, build_model(spec_for(cfg, data), seed=0)


class TestEvaluate:
    def test_sample_set_and_tensor_agree(self, tiny):
        ss, cfg, data, model = tiny
        a = evaluate(model, ss, cfg)
        b = evaluate(model, data, cfg)
        assert a.to_dict() == b.to_dict()
        assert a.n_units == 12 and a.n_pairs == 24
        assert a.head_aem is not None

    def test_empty(self, tiny):
        _, cfg, _, model = tiny
        with pytest.raises(ValueError):
            evaluate(model, SampleSet(()), cfg)

    def test_classify_regression(self, tiny):
        ss, cfg, _, model = tiny
        r = evaluate(model, ss, cfg, classify=True)
        assert r.confusion.counts.sum() == 12

    def test_classifier_model(self, tiny):
        ss, cfg, data, _ = tiny
        clf = build_model(spec_for(cfg, data, "classifier"), seed=0)
        r = evaluate(clf, data, cfg)
        assert r.aem is None and r.confusion.counts.sum() == 12


class TestRender:
    def test_empty_history_summary_only(self, tmp_path):
        files = render_reports(None, TrainHistory(), None, tmp_path)
        assert [f.name for f in files] == [SUMMARY_FILE]
        summary = json.loads((tmp_path / SUMMARY_FILE).read_text())
        assert summary["version"] == 1 and summary["history"] == {"epochs": 0}

    def test_all_plots(self, tmp_path, tiny):
        ss, cfg, data, model = tiny
        h = TrainHistory()
        h.add_epoch("a", train_gaze_loss=3.0, train_aem=2.0, lr=1e-4)
        h.add_epoch("a", train_gaze_loss=2.0, train_aem=1.5, lr=1e-4)
        report = evaluate(model, ss, cfg, classify=True)
        names = {f.name for f in render_reports(report, h, ss, tmp_path)}
        assert names == {LOSS_PLOT, AEM_PLOT, SCATTER_PLOT, CONFUSION_PLOT, SUMMARY_FILE}
        for n in names - {SUMMARY_FILE}:
            assert (tmp_path / n).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_scatter_covers_labels(self, tmp_path):
        ss = generate_set(60, GeneratorConfig(face_size=(32, 32), eye_size=(32, 48), seed=9, render_face=False))
        render_reports(None, None, ss, tmp_path)
        lim = json.loads((tmp_path / SUMMARY_FILE).read_text())["scatter_limits"]
        head = np.array([s.head for s in ss])
        gaze = np.array([g for s in ss for g in (s.gaze_left, s.gaze_right)])
        for i, name in enumerate(("yaw", "pitch")):
            assert lim[name]["head"][0] <= head[:, i].min() and lim[name]["head"][1] >= head[:, i].max()
            assert lim[name]["gaze"][0] <= gaze[:, i].min() and lim[name]["gaze"][1] >= gaze[:, i].max()

    def test_deterministic(self, tmp_path, tiny):
        ss, cfg, _, model = tiny
        report = evaluate(model, ss, cfg)
        h = TrainHistory()
        h.add_epoch("a", train_gaze_loss=1.0, seconds=0.5)
        render_reports(report, h, ss, tmp_path / "a")
        h.records[0]["seconds"] = 9.0
        render_reports(report, h, ss, tmp_path / "b")
        assert (tmp_path / "a" / SUMMARY_FILE).read_bytes() == (tmp_path / "b" / SUMMARY_FILE).read_bytes()

    def test_cleanup_on_failure(self, tmp_path, monkeypatch, tiny):
        ss, cfg, _, model = tiny
        h = TrainHistory()
        h.add_epoch("a", train_gaze_loss=1.0)

        import headgaze.evalreport as er

        def boom(*a, **k):
            raise OSError("disk full")

        monkeypatch.setattr(er, "_plot_scatter", boom)
        with pytest.raises(OSError):
            render_reports(None, h, ss, tmp_path)
        assert list(tmp_path.iterdir()) == []
