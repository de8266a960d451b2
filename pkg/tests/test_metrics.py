import numpy as np
import pytest

from darkstain.imaging import replicate_gray
from darkstain.metrics import (
    FeatureSet,
    NiqeModel,
    evaluate,
    extract_features,
    fid,
    fit_niqe_model,
    kid,
    lpips_content,
    mscn,
    niqe,
    niqe_features,
)
from darkstain.networks import build_embedder


@pytest.fixture(scope="module")
def embedder():
    return build_embedder(0)


def gauss_features(rng, n=400, d=16, shift=0.0):
    return FeatureSet(rng.normal(size=(n, d)) + shift, "test")


class TestFid:
    def test_identical_sets_are_zero(self, rng):
        a = gauss_features(rng)
        assert abs(fid(a, a)) < 1e-6

    def test_mean_shift_equals_delta_squared(self, rng):
        # same sample so the covariances cancel exactly; only the mean term
        # remains and equals delta^2 in closed form
        x = rng.normal(size=(500, 16))
        delta = 1.7
        a = FeatureSet(x, "t")
        shifted = x.copy()
        shifted[:, 0] += delta
        b = FeatureSet(shifted, "t")
        assert fid(a, b) == pytest.approx(delta**2, rel=0.01)

    def test_symmetry(self, rng):
        a, b = gauss_features(rng), gauss_features(rng, shift=0.5)
        assert fid(a, b) == pytest.approx(fid(b, a), rel=1e-9)

    def test_nonnegative(self, rng):
        a, b = gauss_features(rng, n=64), gauss_features(rng, n=64, shift=0.1)
        assert fid(a, b) >= -1e-6

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            fid(gauss_features(rng, d=8), gauss_features(rng, d=16))

    def test_needs_two_vectors(self, rng):
        with pytest.raises(ValueError):
            fid(FeatureSet(rng.normal(size=(1, 4)), "t"), gauss_features(rng, d=4))


class TestKid:
    def test_identical_sets_near_zero(self, rng):
        a = gauss_features(rng, n=100)
        assert abs(kid(a, a)) < 1e-3

    def test_identical_sets_near_zero_large(self, rng):
        a = gauss_features(rng, n=300)
        assert abs(kid(a, a)) < 1e-3

    def test_matches_double_loop_oracle(self, rng):
        x = rng.normal(size=(40, 8)) + 2.0
        y = rng.normal(size=(50, 8)) - 2.0
        a, b = FeatureSet(x, "t"), FeatureSet(y, "t")

        def k(u, v):
            return (float(u @ v) / 8 + 1.0) ** 3

        m, n = len(x), len(y)
        sxx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
        syy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
        sxy = sum(k(x[i], y[j]) for i in range(m) for j in range(n)) / (m * n)
        assert kid(a, b) == pytest.approx(sxx + syy - 2 * sxy, abs=1e-6)

    def test_permutation_invariance(self, rng):
        x = rng.normal(size=(80, 8))
        y = rng.normal(size=(90, 8)) + 1.0
        a, b = FeatureSet(x, "t"), FeatureSet(y, "t")
        perm = rng.permutation(80)
        a_perm = FeatureSet(x[perm], "t")
        assert kid(a_perm, b) == pytest.approx(kid(a, b), abs=1e-12)

    def test_separated_clouds_positive(self, rng):
        a = gauss_features(rng, n=60, shift=3.0)
        b = gauss_features(rng, n=60, shift=-3.0)
        assert kid(a, b) > 1.0


class TestNiqe:
    def test_mscn_of_constant_image_is_zero(self):
        img = np.full((128, 128), 0.42, dtype=np.float32)
        assert np.abs(mscn(img)).max() == 0.0

    def test_mscn_near_standard_on_noise(self, rng):
        img = np.clip(rng.normal(0.5, 0.12, (256, 256)), 0, 1).astype(np.float32)
        m = mscn(img)
        assert abs(m.mean()) < 0.05
        assert abs(m.var() - 1.0) < 0.2

    def test_feature_dimension(self, rng):
        img = rng.random((96, 96)).astype(np.float32)
        feats = niqe_features(img)
        assert feats.shape == (1, 36)
        img2 = rng.random((192, 200)).astype(np.float32)
        assert niqe_features(img2).shape == (4, 36)

    def test_zero_distance_at_model_mean(self, rng):
        img = rng.random((96, 96)).astype(np.float32)
        feats = niqe_features(img)
        model = NiqeModel(mean=feats.mean(axis=0), cov=np.eye(36) * 0.3)
        assert niqe(img, model) == 0.0

    def test_deterministic(self, rng):
        imgs = [np.clip(rng.normal(0.5, 0.15, (128, 128)), 0, 1).astype(np.float32) for _ in range(3)]
        model = fit_niqe_model(imgs[:2])
        assert niqe(imgs[2], model) == niqe(imgs[2], model)

    def test_distorted_scores_higher_than_pristine(self):
        local = np.random.default_rng(77)
        pristine = [np.clip(local.normal(0.5, 0.15, (160, 160)), 0, 1).astype(np.float32)
                    for _ in range(7)]
        model = fit_niqe_model(pristine[:6])
        clean_score = niqe(pristine[6], model)
        # a nearly flat image violates the pristine local-contrast statistics
        flattened = np.clip(pristine[6] * 0.05 + 0.5, 0, 1).astype(np.float32)
        assert niqe(flattened, model) > clean_score

    def test_too_small_image_rejected(self, rng):
        with pytest.raises(ValueError, match="96"):
            niqe_features(rng.random((64, 64)).astype(np.float32))

    def test_model_roundtrip(self, tmp_path, rng):
        imgs = [np.clip(rng.normal(0.5, 0.15, (96, 96)), 0, 1).astype(np.float32) for _ in range(3)]
        model = fit_niqe_model(imgs)
        model.save(tmp_path / "m.npz")
        loaded = NiqeModel.load(tmp_path / "m.npz")
        np.testing.assert_array_equal(loaded.mean, model.mean)
        np.testing.assert_array_equal(loaded.cov, model.cov)


class TestLpipsContent:
    def test_zero_for_matching_luma(self, embedder, rng):
        z = rng.random((64, 64)).astype(np.float32)
        y = replicate_gray(z)
        assert lpips_content(y, z, embedder) == 0.0

    def test_symmetric_in_images(self, embedder, rng):
        a = rng.random((64, 64)).astype(np.float32)
        b = rng.random((64, 64)).astype(np.float32)
        d1 = lpips_content(replicate_gray(a), b, embedder)
        d2 = lpips_content(replicate_gray(b), a, embedder)
        assert d1 == pytest.approx(d2, rel=1e-6)

    def test_monotone_under_noise(self, embedder):
        local = np.random.default_rng(2024)
        z = local.random((96, 96)).astype(np.float32)
        direction = local.normal(size=(96, 96))
        scores = []
        for amp in (0.0, 0.05, 0.1, 0.2, 0.4):
            noisy = np.clip(z + amp * direction, 0, 1).astype(np.float32)
            scores.append(lpips_content(replicate_gray(noisy), z, embedder))
        assert all(scores[i] <= scores[i + 1] + 1e-12 for i in range(len(scores) - 1))

    def test_size_mismatch(self, embedder, rng):
        with pytest.raises(ValueError):
            lpips_content(
                rng.random((64, 64, 3)).astype(np.float32),
                rng.random((32, 32)).astype(np.float32),
                embedder,
            )


class TestExtractFeatures:
    def test_duplicate_images_give_identical_rows(self, embedder, rng):
        img = rng.random((64, 64, 3)).astype(np.float32)
        fs = extract_features([img, img.copy(), img.copy()], embedder)
        np.testing.assert_array_equal(fs.vectors[0], fs.vectors[1])
        np.testing.assert_array_equal(fs.vectors[0], fs.vectors[2])

    def test_one_row_per_image(self, embedder, rng):
        imgs = [rng.random((64, 64, 3)).astype(np.float32) for _ in range(5)]
        assert extract_features(imgs, embedder).vectors.shape == (5, 64)

    def test_replay_stability(self, embedder, rng):
        imgs = [rng.random((64, 64, 3)).astype(np.float32) for _ in range(3)]
        a = extract_features(imgs, embedder).vectors
        b = extract_features(imgs, build_embedder(0)).vectors
        np.testing.assert_array_equal(a, b)

    def test_too_few_images(self, embedder, rng):
        with pytest.raises(ValueError):
            extract_features([rng.random((64, 64, 3)).astype(np.float32)], embedder)


@pytest.fixture(scope="module")
def sets():
    rng = np.random.default_rng(5)
    outputs = [np.clip(rng.normal(0.6, 0.2, (96, 96, 3)), 0, 1).astype(np.float32)
               for _ in range(4)]
    enhanced = [np.clip(rng.normal(0.5, 0.2, (96, 96)), 0, 1).astype(np.float32)
                for _ in range(4)]
    return outputs, enhanced


class TestEvaluate:
    def test_outputs_equal_to_reference(self, sets, embedder):
        outputs, enhanced = sets
        model = fit_niqe_model(outputs)
        report = evaluate(outputs, outputs, enhanced, embedder, model)
        assert abs(report.fid) < 1e-6
        assert abs(report.kid) < 1e-3

    def test_report_matches_individual_calls(self, sets, embedder, rng):
        outputs, enhanced = sets
        refs = [np.clip(rng.normal(0.8, 0.1, (96, 96, 3)), 0, 1).astype(np.float32)
                for _ in range(4)]
        model = fit_niqe_model(refs)
        report = evaluate(outputs, refs, enhanced, embedder, model)
        fo = extract_features(outputs, embedder)
        fr = extract_features(refs, embedder)
        assert report.fid == pytest.approx(fid(fo, fr))
        assert report.kid == pytest.approx(kid(fo, fr))
        assert report.niqe == pytest.approx(np.mean([niqe(o, model) for o in outputs]))
        assert report.lpips == pytest.approx(
            np.mean([lpips_content(y, z, embedder) for y, z in zip(outputs, enhanced)])
        )

    def test_empty_outputs_rejected(self, sets, embedder):
        _, enhanced = sets
        model = NiqeModel(mean=np.zeros(36), cov=np.eye(36))
        with pytest.raises(ValueError):
            evaluate([], [], [], embedder, model)

    def test_misaligned_lists_rejected(self, sets, embedder):
        outputs, enhanced = sets
        model = NiqeModel(mean=np.zeros(36), cov=np.eye(36))
        with pytest.raises(ValueError, match="aligned"):
            evaluate(outputs, outputs, enhanced[:-1], embedder, model)

    def test_csv_row_written(self, sets, embedder, tmp_path):
        outputs, enhanced = sets
        model = fit_niqe_model(outputs)
        csv_path = tmp_path / "results.csv"
        evaluate(outputs, outputs, enhanced, embedder, model, csv_path=csv_path, method="selftest")
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "method,fid,kid,niqe,lpips"
        assert lines[1].startswith("selftest,")
