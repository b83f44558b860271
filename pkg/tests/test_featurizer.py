import numpy as np
import pytest

from fflow.errors import FrozenWeightsError, ShapeError
from fflow.featurizer import (
    FeaturizerConfig,
    Featurizer,
    dct_projection,
    featurize_deterministic,
    featurize_learned,
    init_learned,
    pretrain_ssl,
)
from fflow.rng import Rng


def _img(rng, h=32, w=32):
    return rng.uniform((h, w, 3))


def test_grid_shape_arithmetic():
    cfg = FeaturizerConfig()
    grid = featurize_deterministic(_img(Rng(0)), cfg)
    assert (grid.rows, grid.cols, grid.d) == (2, 2, 32)
    grid = featurize_deterministic(_img(Rng(0), 48, 32), cfg)
    assert (grid.rows, grid.cols, grid.d) == (3, 2, 32)


def test_indivisible_side_names_dimension():
    cfg = FeaturizerConfig()
    with pytest.raises(ShapeError, match="height 33"):
        featurize_deterministic(np.zeros((33, 32, 3), dtype=np.float32), cfg)
    with pytest.raises(ShapeError, match="width 40"):
        featurize_deterministic(np.zeros((32, 40, 3), dtype=np.float32), cfg)


def test_constant_image_hits_only_dc():
    cfg = FeaturizerConfig()
    img = np.full((32, 32, 3), 0.5, dtype=np.float32)
    grid = featurize_deterministic(img, cfg)
    # rows 0..2 of the basis are the DC terms of R, G, B
    feats = grid.data.data
    assert np.abs(feats[..., :3]).min() > 0.1
    assert np.abs(feats[..., 3:]).max() <= 1e-5


def test_projection_rows_orthonormal():
    proj = dct_projection(16, 32)
    gram = proj @ proj.T
    assert np.abs(gram - np.eye(32)).max() <= 1e-5


def test_projection_contracts_norm():
    rng = Rng(3)
    cfg = FeaturizerConfig()
    img = _img(rng)
    patch = img[:16, :16, :].reshape(-1)
    proj = dct_projection(16, 32)
    assert np.linalg.norm(proj @ patch) <= np.linalg.norm(patch) + 1e-6
    # full-rank projection preserves the norm exactly (orthonormal basis)
    full = dct_projection(16, 3 * 16 * 16)
    assert abs(np.linalg.norm(full @ patch) - np.linalg.norm(patch)) <= 1e-4


def test_deterministic_featurizer_bit_stable():
    cfg = FeaturizerConfig()
    img = _img(Rng(4))
    a = featurize_deterministic(img, cfg).data.data
    b = featurize_deterministic(img, cfg).data.data
    assert np.array_equal(a, b)


def test_d_f_cap_enforced():
    with pytest.raises(ShapeError):
        FeaturizerConfig(patch=16, d_f=3 * 256 + 1)


# ---- learned featurizer ----


def _tiny_cfg():
    return FeaturizerConfig(kind="learned", d_f=8, dim=16, heads=2, blocks=2)


def test_learned_requires_frozen():
    cfg = _tiny_cfg()
    weights = init_learned(cfg, Rng(0))
    with pytest.raises(FrozenWeightsError):
        featurize_learned(_img(Rng(1)), weights, cfg)


def test_learned_shape_and_determinism():
    cfg = _tiny_cfg()
    weights = init_learned(cfg, Rng(0))
    weights.frozen = True
    img = _img(Rng(1), 48, 32)
    a = featurize_learned(img, weights, cfg)
    b = featurize_learned(img, weights, cfg)
    assert (a.rows, a.cols, a.d) == (3, 2, 8)
    assert np.array_equal(a.data.data, b.data.data)


def test_learned_token_equivariance_without_positions():
    # swapping two input patches must swap exactly the two output tokens
    cfg = _tiny_cfg()
    weights = init_learned(cfg, Rng(0))
    weights.frozen = True
    img = _img(Rng(2), 32, 48)  # grid 2x3
    swapped = img.copy()
    swapped[:16, :16], swapped[16:, 32:] = img[16:, 32:].copy(), img[:16, :16].copy()
    a = featurize_learned(img, weights, cfg, pos_scale=0.0).data.data
    b = featurize_learned(swapped, weights, cfg, pos_scale=0.0).data.data
    assert np.allclose(a[0, 0], b[1, 2], atol=1e-5)
    assert np.allclose(a[1, 2], b[0, 0], atol=1e-5)
    assert np.allclose(a[0, 1], b[0, 1], atol=1e-5)


def test_ssl_zero_steps_returns_init():
    cfg = _tiny_cfg()
    corpus = [_img(Rng(i)) for i in range(4)]
    w0 = init_learned(cfg, Rng(5).split("init"))
    w = pretrain_ssl(corpus, cfg, steps=0, rng=Rng(5))
    assert w.frozen
    for k in w0.params:
        assert np.array_equal(w.params[k].data, w0.params[k].data)


def test_ssl_loss_decreases_and_is_deterministic():
    cfg = _tiny_cfg()
    corpus = [_img(Rng(100 + i)) for i in range(8)]
    w1 = pretrain_ssl(corpus, cfg, steps=30, rng=Rng(5))
    w2 = pretrain_ssl(corpus, cfg, steps=30, rng=Rng(5))
    assert w1.final_ssl_loss < w1.initial_ssl_loss
    for k in w1.params:
        assert np.array_equal(w1.params[k].data, w2.params[k].data)


def test_frozen_contract_after_training_usage():
    cfg = _tiny_cfg()
    corpus = [_img(Rng(200 + i)) for i in range(4)]
    weights = pretrain_ssl(corpus, cfg, steps=5, rng=Rng(6))
    before = {k: v.data.copy() for k, v in weights.params.items()}
    featurizer = Featurizer(cfg, weights)
    for _ in range(3):
        featurizer(_img(Rng(7)))
    for k in before:
        assert np.array_equal(weights.params[k].data, before[k])
