import numpy as np
import pytest

from fflow.analysis import SimilarityReport, cross_res_cosine, pca_rgb, pool_tokens, psnr
from fflow.data import SyntheticSpec, gen_synthetic, render_scene, sample_scene
from fflow.errors import DataError, ShapeError
from fflow.featurizer import Featurizer, FeaturizerConfig, LatentGrid
from fflow.rng import Rng
from fflow.tensor import Tensor


def _grid(arr):
    return LatentGrid.from_tensor(Tensor(np.asarray(arr, dtype=np.float32)))


# ---- PCA ----

def test_pca_output_shape_and_range():
    grid = _grid(Rng(0).normal((4, 5, 16)))
    img = pca_rgb(grid)
    assert img.shape == (4, 5, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_pca_needs_three_tokens():
    with pytest.raises(DataError):
        pca_rgb(_grid(Rng(0).normal((1, 2, 8))))


def test_pca_rank_one_zeroes_minor_channels():
    u = Rng(1).normal((6, 1))
    v = Rng(2).normal((1, 8))
    grid = _grid((u @ v).reshape(2, 3, 8))
    img = pca_rgb(grid)
    assert np.all(img[..., 1] == 0.0)
    assert np.all(img[..., 2] == 0.0)
    assert img[..., 0].max() == 1.0


def test_pca_matches_eigendecomposition_oracle():
    """Components against a direct covariance eigendecomposition."""
    tokens = Rng(3).normal((4, 12)).astype(np.float64)
    grid = _grid(tokens.reshape(2, 2, 12))
    img = pca_rgb(grid).reshape(4, 3)

    centered = tokens - tokens.mean(axis=0)
    evals, evecs = np.linalg.eigh(centered.T @ centered)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    comps = centered @ evecs[:, :3]
    # min-max scale each column; sign of an eigenvector is arbitrary
    for c in range(3):
        v = comps[:, c]
        ref = (v - v.min()) / (v.max() - v.min())
        got = img[:, c].astype(np.float64)
        assert np.allclose(got, ref, atol=1e-4) or np.allclose(got, 1.0 - ref, atol=1e-4)
    # explained variance non-increasing
    assert evals[0] >= evals[1] >= evals[2] >= -1e-9


def test_pca_invariant_to_channel_shift():
    tokens = Rng(4).normal((3, 3, 8))
    a = pca_rgb(_grid(tokens))
    b = pca_rgb(_grid(tokens + 5.0))
    assert np.abs(a - b).max() <= 1e-4


# ---- pooling ----

def test_pool_integer_factor_is_block_mean():
    g = np.arange(32, dtype=np.float64).reshape(4, 4, 2)
    out = pool_tokens(g, 2, 2)
    assert np.allclose(out[0, 0], g[:2, :2].reshape(4, 2).mean(axis=0))


def test_pool_area_weights_preserve_mean():
    g = Rng(5).normal((3, 3, 4)).astype(np.float64)
    out = pool_tokens(g, 2, 2)
    assert out.shape == (2, 2, 4)
    assert np.allclose(out.mean(axis=(0, 1)), g.mean(axis=(0, 1)), atol=1e-12)


# ---- cross-resolution cosine ----

def _image():
    spec = SyntheticSpec(seed=3)
    return render_scene(sample_scene(spec, Rng(3).split("scene", 0)), 96)


def test_identical_resolutions_similarity_one():
    enc = Featurizer(FeaturizerConfig())
    rep = cross_res_cosine(enc, _image(), [32, 32])
    assert abs(rep.matrix[0, 1] - 1.0) <= 1e-6


def test_constant_encoder_scores_exactly_one():
    def constant(img):
        rows, cols = img.shape[0] // 16, img.shape[1] // 16
        return _grid(np.ones((rows, cols, 8), dtype=np.float32))

    rep = cross_res_cosine(constant, _image(), [32, 64, 96])
    # nesting grids pool exactly; 64<->96 is area-weighted, so float-close
    idx = {32: 0, 64: 1, 96: 2}
    assert rep.matrix[idx[32], idx[64]] == 1.0
    assert rep.matrix[idx[32], idx[96]] == 1.0
    assert abs(rep.matrix[idx[64], idx[96]] - 1.0) <= 1e-6
    assert np.abs(rep.matrix - 1.0).max() <= 1e-6


def test_patch_featurizer_below_one_across_scales():
    enc = Featurizer(FeaturizerConfig())
    rep = cross_res_cosine(enc, _image(), [32, 64])
    assert rep.matrix[0, 1] < 1.0


def test_cosine_scale_invariant():
    enc = Featurizer(FeaturizerConfig())

    def scaled(img):
        g = enc(img)
        return _grid(g.data.data * 7.5)

    a = cross_res_cosine(enc, _image(), [32, 64]).matrix
    b = cross_res_cosine(scaled, _image(), [32, 64]).matrix
    assert np.abs(a - b).max() <= 1e-6


def test_indivisible_resolution_rejected():
    enc = Featurizer(FeaturizerConfig())
    with pytest.raises(DataError):
        cross_res_cosine(enc, _image(), [32, 40])


def test_report_validation():
    with pytest.raises(DataError):
        SimilarityReport([(32, 32), (64, 64)], np.array([[1.0, 0.5], [0.4, 1.0]]), "x")
    with pytest.raises(DataError):
        SimilarityReport([(32, 32), (64, 64)], np.array([[0.9, 0.5], [0.5, 1.0]]), "x")


def test_report_csv_format(tmp_path):
    rep = SimilarityReport([(32, 32), (64, 64)], np.array([[1.0, 0.5], [0.5, 1.0]]), "enc")
    rep.write_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "res_a,res_b,cosine"
    assert lines[1] == "32x32,32x32,1.000000"
    assert len(lines) == 5


# ---- psnr ----

def test_psnr_equal_images_is_inf():
    img = Rng(6).uniform((8, 8, 3))
    assert psnr(img, img.copy()) == float("inf")


def test_psnr_uniform_offset_exact():
    a = np.full((10, 10, 3), 0.4, dtype=np.float64)
    b = a + 0.1
    assert abs(psnr(a, b) - 20.0) <= 1e-9


def test_psnr_hand_computed_2x2():
    a = np.array([[[0.0] * 3, [1.0] * 3], [[0.5] * 3, [0.25] * 3]])
    b = np.array([[[0.1] * 3, [0.9] * 3], [[0.5] * 3, [0.35] * 3]])
    mse = ((a - b) ** 2).mean()
    assert abs(psnr(a, b) - 10 * np.log10(1 / mse)) <= 1e-12


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))
