import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from headgaze.nets import (
    HGD,
    AuxModule,
    BackboneConfig,
    FaceModel,
    FinalGazeModel,
    GazeModel,
    LandmarkDetector,
    NoHPStack,
    ResNet,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
    wing_loss,
)


def small(c=1, hw=(32, 48), depth=10):
    return BackboneConfig(depth=depth, in_channels=c, input_hw=hw, width=8)


def wing_scalar(x, w=10.0, eps=2.0):
    """Closed form evaluated by hand, one element at a time."""
    x = abs(x)
    if x < w:
        return w * math.log(1 + x / eps)
    return x - (w - w * math.log(1 + w / eps))


class TestBackbone:
    @pytest.mark.parametrize("depth", [10, 18, 34, 56, 101])
    def test_depths_build(self, depth):
        net = ResNet(BackboneConfig(depth=depth, in_channels=1, input_hw=(16, 16), width=4))
        out = net(torch.zeros(2, 1, 16, 16))
        assert out.shape == (2, net.out_features)

    def test_bad_depth(self):
        with pytest.raises(ValueError):
            BackboneConfig(depth=12)

    def test_shape_check(self):
        net = ResNet(small())
        with pytest.raises(ValueError, match="expected input"):
            net(torch.zeros(2, 1, 48, 32))
        with pytest.raises(ValueError):
            net(torch.zeros(2, 2, 32, 48))

    def test_swap_depth_keeps_interface(self):
        outs, counts = [], []
        for depth in (10, 34):
            torch.manual_seed(0)
            m = HGD(FaceModel(small(hw=(32, 32), depth=depth)), GazeModel(small(c=2, depth=depth), n_out=4))
            g, h = m(torch.zeros(3, 1, 32, 32), torch.zeros(3, 2, 32, 48))
            outs.append((g.shape, h.shape))
            counts.append(count_parameters(m))
        assert outs[0] == outs[1] == ((3, 4), (3, 2))
        assert counts[0] != counts[1]


class TestHgd:
    def test_face_widths_at_224(self):
        torch.manual_seed(0)
        face = FaceModel(BackboneConfig(depth=10, in_channels=1, input_hw=(224, 224), width=8)).eval()
        feat, pred = face(torch.rand(2, 1, 224, 224))
        assert feat.shape == (2, 64) and pred.shape == (2, 2)

    def test_bec_at_224(self):
        torch.manual_seed(0)
        gaze = GazeModel(BackboneConfig(depth=10, in_channels=2, input_hw=(224, 224), width=8), n_out=4).eval()
        out = gaze(torch.rand(2, 2, 224, 224), torch.rand(2, 64))
        assert out.shape == (2, 4)

    def test_sem_output(self):
        gaze = GazeModel(small(), n_out=2).eval()
        assert gaze(torch.rand(5, 1, 32, 48), torch.rand(5, 64)).shape == (5, 2)

    def test_fusion_width(self):
        assert GazeModel(small(), lda_dim=7).fusion_in == 64 + 64 + 7
        assert GazeModel(small(), use_head=False).fusion_in == 64

    def test_zero_input_finite(self):
        torch.manual_seed(0)
        face = FaceModel(small(hw=(32, 32))).eval()
        feat, pred = face(torch.zeros(4, 1, 32, 32))
        assert torch.isfinite(feat).all() and torch.isfinite(pred).all()

    def test_eval_deterministic(self):
        m = HGD(FaceModel(small(hw=(32, 32))), GazeModel(small())).eval()
        f, e = torch.rand(3, 1, 32, 32), torch.rand(3, 1, 32, 48)
        a, b = m(f, e), m(f.clone(), e.clone())
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_head_feature_gradient(self):
        torch.manual_seed(1)
        gaze = GazeModel(small()).eval()
        feat = torch.rand(4, 64, requires_grad=True)
        gaze(torch.rand(4, 1, 32, 48), feat).sum().backward()
        assert feat.grad.norm() > 0

    def test_head_width_mismatch(self):
        gaze = GazeModel(small())
        with pytest.raises(ValueError, match="head_feature"):
            gaze(torch.rand(2, 1, 32, 48), torch.rand(2, 63))
        with pytest.raises(ValueError):
            gaze(torch.rand(2, 1, 32, 48))

    def test_lda_required(self):
        gaze = GazeModel(small(), lda_dim=3)
        with pytest.raises(ValueError, match="LDA"):
            gaze(torch.rand(2, 1, 32, 48), torch.rand(2, 64))
        assert gaze(torch.rand(2, 1, 32, 48), torch.rand(2, 64), torch.rand(2, 3)).shape == (2, 2)

    def test_face_flag_consistency(self):
        with pytest.raises(ValueError):
            HGD(None, GazeModel(small()))
        with pytest.raises(ValueError):
            HGD(FaceModel(small(hw=(32, 32))), GazeModel(small(), use_head=False))

    def test_classifier_softmax(self):
        torch.manual_seed(2)
        gaze = GazeModel(small(), n_out=9).eval().double()
        logits = gaze(torch.rand(6, 1, 32, 48, dtype=torch.float64), torch.rand(6, 64, dtype=torch.float64))
        assert logits.shape == (6, 9)
        rows = torch.softmax(logits, dim=1).sum(dim=1)
        np.testing.assert_allclose(rows.detach().numpy(), 1.0, atol=1e-9)


class TestNoHp:
    def test_detector(self):
        det = LandmarkDetector(small(hw=(64, 96))).eval()
        coords, feat = det(torch.rand(3, 1, 64, 96))
        assert coords.shape == (3, 32) and feat.shape == (3, 200)
        c2, _ = det(torch.zeros(1, 1, 64, 96))
        assert torch.isfinite(c2).all()
        assert torch.equal(det(torch.ones(1, 1, 64, 96))[0], det(torch.ones(1, 1, 64, 96))[0])

    def test_aux(self):
        torch.manual_seed(0)
        aux = AuxModule()
        pred, tap = aux(torch.zeros(4, 200))
        assert pred.shape == (4, 2) and tap.shape == (4, 200)
        assert torch.isfinite(pred).all()
        _, tap2 = aux(torch.rand(4, 200))
        assert not torch.equal(tap, tap2)

    def test_aux_width(self):
        with pytest.raises(ValueError):
            AuxModule()(torch.zeros(2, 199))

    def test_final(self):
        final = FinalGazeModel().eval()
        x = torch.rand(5, 600)
        assert final(x).shape == (5, 2)
        assert torch.equal(final(x), final(x.clone()))
        with pytest.raises(ValueError, match="600"):
            final(torch.rand(5, 599))

    def test_stack_concat_width(self):
        stack = NoHPStack(LandmarkDetector(small()), AuxModule(), AuxModule(), FinalGazeModel()).eval()
        assert stack.features(torch.rand(2, 1, 32, 48)).shape == (2, 600)
        assert stack(torch.rand(2, 1, 32, 48)).shape == (2, 2)


class TestWing:
    def test_zero(self):
        x = torch.randn(10)
        assert wing_loss(x, x).item() == 0

    def test_known_value(self):
        loss = wing_loss(torch.tensor([20.0], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64))
        assert loss.item() == pytest.approx(10 + 10 * math.log(6), abs=1e-9)
        assert loss.item() == pytest.approx(wing_scalar(20.0), abs=1e-12)

    def test_continuity(self):
        lo = wing_loss(torch.tensor([10 - 1e-9], dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
        hi = wing_loss(torch.tensor([10 + 1e-9], dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
        assert abs(lo.item() - hi.item()) < 1e-6

    def test_mean_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-40, 40, 200)
        loss = wing_loss(torch.from_numpy(x), torch.zeros(200, dtype=torch.float64)).item()
        assert loss == pytest.approx(np.mean([wing_scalar(v) for v in x]), abs=1e-12)

    def test_gradient_vs_finite_difference(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-30, 30, 400)
        x = x[np.abs(np.abs(x) - 10) > 1e-3][:100]
        assert len(x) == 100
        h = 1e-5
        for v in x:
            p = torch.tensor([v], dtype=torch.float64, requires_grad=True)
            wing_loss(p, torch.zeros(1, dtype=torch.float64)).backward()
            fd = (wing_scalar(v + h) - wing_scalar(v - h)) / (2 * h)
            assert abs(p.grad.item() - fd) / abs(fd) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            wing_loss(torch.zeros(3), torch.zeros(4))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=20), st.floats(0.5, 20), st.floats(0.5, 5))
    def test_nonnegative(self, xs, w, eps):
        p = torch.tensor(xs, dtype=torch.float64)
        loss = wing_loss(p, torch.zeros_like(p), w, eps).item()
        assert loss >= 0
        assert (loss == 0) == all(v == 0 for v in xs)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(0)
        m = HGD(FaceModel(small(hw=(32, 32))), GazeModel(small()))
        path = save_checkpoint(tmp_path / "model.pt", m, {"depth": 10}, seed=3)
        state, side = load_checkpoint(path)
        assert side["seed"] == 3 and side["config"] == {"depth": 10}
        assert side["parameter_count"] == count_parameters(m)
        torch.manual_seed(99)
        m2 = HGD(FaceModel(small(hw=(32, 32))), GazeModel(small()))
        m2.load_state_dict(state)
        for a, b in zip(m.state_dict().values(), m2.state_dict().values()):
            assert torch.equal(a, b)

    def test_tamper_detected(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.pt", AuxModule(), {}, seed=0)
        side = json.loads((tmp_path / "m.pt.json").read_text())
        side["file_sha256"] = "0" * 64
        (tmp_path / "m.pt.json").write_text(json.dumps(side))
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "none.pt")
