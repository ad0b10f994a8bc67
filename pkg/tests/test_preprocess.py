import numpy as np
import pytest

from headgaze.geometry import AnglePair
from headgaze.preprocess import (
    HogConfig,
    LdaTransform,
    assemble_input,
    crop_regions,
    fisher_criterion,
    fit_lda,
    hog_cells,
    mhog,
)
from headgaze.synthgen import SceneParams, face_fiducials, look_at, render_face


def frontal_face(size=(224, 224)):
    scene = SceneParams(head=AnglePair(0, 0), target=look_at((0, 0), (0, 0)))
    return render_face(scene, size), face_fiducials(scene, size)


class TestCrop:
    def test_shapes(self):
        img, fid = frontal_face()
        face, left, right = crop_regions(img, {"left_eye": fid["left_eye"], "right_eye": fid["right_eye"]})
        assert face.shape == (224, 224)
        assert left.shape == right.shape == (64, 96)

    def test_eye_crop_centred_on_iris(self):
        img, fid = frontal_face()
        _, left, right = crop_regions(img, {"left_eye": fid["left_eye"], "right_eye": fid["right_eye"]})
        for crop in (left, right):
            ys, xs = np.nonzero(crop < 45)  # pupil pixels
            assert abs(xs.mean() - (96 - 1) / 2) < 1.0
            assert abs(ys.mean() - (64 - 1) / 2) < 1.0

    def test_deterministic(self):
        img, fid = frontal_face()
        lm = {"left_eye": fid["left_eye"], "right_eye": fid["right_eye"]}
        a = crop_regions(img, lm)
        b = crop_regions(img.copy(), dict(lm))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_border_padding(self):
        img = np.arange(100 * 120, dtype=np.float64).reshape(100, 120) % 251
        lm = {"left_eye": (119, 0), "right_eye": (90, 0)}
        face, left, right = crop_regions(img, lm, face_size=(40, 40), eye_size=(16, 24))
        assert face.shape == (40, 40) and left.shape == (16, 24)
        # rows above the image replicate the first row
        np.testing.assert_allclose(left[0], left[1])

    def test_translation_equivariant(self):
        img, fid = frontal_face()
        lm = {"left_eye": fid["left_eye"], "right_eye": fid["right_eye"], "face_box": (20, 10, 200, 190)}
        big = np.zeros((260, 270), dtype=np.uint8)
        dy, dx = 17, 31
        big[dy : dy + 224, dx : dx + 224] = img
        shifted = {
            "left_eye": fid["left_eye"] + [dx, dy],
            "right_eye": fid["right_eye"] + [dx, dy],
            "face_box": (20 + dx, 10 + dy, 200 + dx, 190 + dy),
        }
        for a, b in zip(crop_regions(img, lm), crop_regions(big, shifted)):
            np.testing.assert_array_equal(a, b)

    def test_outside_image(self):
        img = np.zeros((50, 50))
        with pytest.raises(ValueError, match="outside"):
            crop_regions(img, {"left_eye": (60, 10), "right_eye": (10, 10)})

    def test_degenerate_iod(self):
        img = np.zeros((50, 50))
        with pytest.raises(ValueError, match="degenerate"):
            crop_regions(img, {"left_eye": (12, 10), "right_eye": (10, 10)})


class TestMhog:
    def test_constant_is_zero(self):
        out = mhog(np.full((64, 96), 128, dtype=np.uint8))
        assert out.shape == (64, 96, 3)
        assert np.all(out == 0)

    def test_vertical_step(self):
        img = np.zeros((64, 64))
        img[:, 36:] = 200.0
        hist = hog_cells(img, 8)
        # gradient is purely horizontal: orientation bin 0
        edge = hist[:, 4]
        assert np.all(np.argmax(edge, axis=-1) == 0)
        assert np.allclose(edge[:, 0], 1.0)
        out = mhog(img, HogConfig(cell_sizes=(8,)))[..., 0]
        col_energy = out.mean(axis=0)
        assert np.argmax(col_energy) in range(32, 41)
        assert col_energy[:16].max() == 0 and col_energy[-8:].max() == 0

    def test_brightness_invariance(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 200, size=(64, 96))
        np.testing.assert_allclose(mhog(img + 50.0), mhog(img), atol=1e-6)

    @pytest.mark.parametrize("a,b", [(0.5, 10.0), (2.0, -30.0), (1.3, 0.0)])
    def test_affine_invariance(self, a, b):
        img, _ = frontal_face((96, 96))
        img = img.astype(np.float64)
        np.testing.assert_allclose(mhog(a * img + b), mhog(img), atol=1e-6)

    def test_range(self):
        img, _ = frontal_face((96, 96))
        out = mhog(img)
        assert out.min() >= 0 and out.max() <= 1

    def test_too_small(self):
        with pytest.raises(ValueError):
            mhog(np.zeros((16, 40)))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            HogConfig(cell_sizes=())
        with pytest.raises(ValueError):
            HogConfig(bins=1)


def two_clusters(rng, n=200, d=20, sep=4.0):
    a = rng.normal(size=(n, d))
    b = rng.normal(size=(n, d))
    b[:, 0] += sep
    x = np.concatenate([a, b])
    gaze = np.concatenate([np.full((n, 2), 5.0), np.full((n, 2), 25.0)])
    return x, gaze


class TestLda:
    def test_two_clusters_separate(self):
        rng = np.random.default_rng(1)
        x, gaze = two_clusters(rng)
        lda = fit_lda(x, gaze)
        assert lda.k == 1
        proj = lda.transform(x)[:, 0]
        labels = gaze[:, 0] > 10
        assert fisher_criterion(proj, labels) > 1
        # margin: the clusters' projected extremes do not overlap on the mean
        assert np.sign(proj[labels].mean()) != np.sign(proj[~labels].mean())

    def test_single_bin_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError):
            fit_lda(rng.normal(size=(50, 5)), np.full((50, 2), 3.0))

    def test_orthonormal(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(300, 12))
        gaze = rng.uniform(-40, 40, size=(300, 2))
        lda = fit_lda(x, gaze)
        assert lda.k <= min(len(lda.classes) - 1, 32)
        np.testing.assert_allclose(lda.projection.T @ lda.projection, np.eye(lda.k), atol=1e-10)

    def test_permutation(self):
        rng = np.random.default_rng(4)
        x, gaze = two_clusters(rng, n=100, d=30, sep=3.0)
        test_x, test_gaze = two_clusters(rng, n=100, d=30, sep=3.0)
        labels = test_gaze[:, 0] > 10
        real = fisher_criterion(fit_lda(x, gaze).transform(test_x)[:, 0], labels)
        shuffled = []
        for t in range(20):
            perm = np.random.default_rng(100 + t).permutation(len(gaze))
            lda = fit_lda(x, gaze[perm])
            shuffled.append(fisher_criterion(lda.transform(test_x)[:, 0], labels))
        # chance level: held-out Fisher ratio of a random direction
        chance = []
        for t in range(20):
            w = np.random.default_rng(200 + t).normal(size=30)
            chance.append(fisher_criterion(test_x @ w, labels))
        assert real > 1
        assert np.mean(shuffled) < 0.5
        assert abs(np.mean(shuffled) - np.mean(chance)) < 0.25

    def test_save_load(self, tmp_path):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(120, 8))
        gaze = rng.uniform(-30, 30, size=(120, 2))
        lda = fit_lda(x, gaze)
        p = lda.save(tmp_path / "lda.bin")
        assert p.read_bytes().split(b"\n", 1)[0].startswith(b"{")
        back = LdaTransform.load(p)
        np.testing.assert_array_equal(back.projection, lda.projection)
        np.testing.assert_array_equal(back.classes, lda.classes)
        np.testing.assert_array_equal(back.transform(x), lda.transform(x))


class TestAssemble:
    def test_shape(self):
        img = np.zeros((224, 224, 1), dtype=np.uint8)
        out = assemble_input(img, np.zeros((224, 224, 3)), use_mhog=True)
        assert out.shape == (224, 224, 4)

    def test_passthrough(self):
        img = np.full((10, 12), 255, dtype=np.uint8)
        out = assemble_input(img, np.zeros((10, 12, 3)), use_mhog=False)
        assert out.shape == (10, 12, 1)
        assert np.all(out == 1.0)

    def test_split_recovers(self):
        rng = np.random.default_rng(6)
        img = rng.integers(0, 256, (16, 24), dtype=np.uint8)
        extra = mhog(img, HogConfig(cell_sizes=(4, 8)))
        out = assemble_input(img, extra)
        np.testing.assert_array_equal(out[..., 0], img.astype(np.float32) / 255)
        np.testing.assert_array_equal(out[..., 1:], extra.astype(np.float32))

    def test_mismatch(self):
        with pytest.raises(ValueError):
            assemble_input(np.zeros((10, 10)), np.zeros((8, 10, 1)))
