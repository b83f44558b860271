import numpy as np
import pytest

from fflow import nn
from fflow.dit import (
    DiTConfig,
    dit_forward,
    forward_batch,
    gqa_attention,
    init_dit,
    mrope_rotate,
    param_count,
    paper_config,
)
from fflow.errors import NumericsError, ShapeError
from fflow.rng import Rng
from fflow.tensor import Tensor


def small_cfg(**kw):
    base = dict(dim=48, layers=2, heads=6, kv_heads=2, z_dim=8, time_embed_dim=48, sin_dim=32,
                vocab=64)
    base.update(kw)
    return DiTConfig(**base)


@pytest.fixture(scope="module")
def model():
    cfg = small_cfg()
    params = init_dit(cfg, Rng(1), zero_gates=False)
    return cfg, params


def _positions(n):
    rng = Rng(3)
    return np.stack(
        [rng.randint(0, 9, (n,)), rng.randint(0, 9, (n,)), rng.randint(0, 9, (n,))], axis=-1
    ).astype(np.float32)


# ---- config invariants ----

def test_config_validation():
    with pytest.raises(ShapeError):
        DiTConfig(heads=5, kv_heads=2)
    with pytest.raises(ShapeError):
        DiTConfig(dim=100, heads=6)


# ---- M-RoPE ----

def test_mrope_zero_positions_identity():
    q = Tensor(Rng(0).normal((4, 5, 24)))
    out = mrope_rotate(q, np.zeros((5, 3)))
    assert np.array_equal(out.data, q.data)


def test_mrope_norm_preserving():
    q = Tensor(Rng(1).normal((4, 7, 24)) * 3.0)
    out = mrope_rotate(q, _positions(7))
    assert np.abs(
        np.linalg.norm(out.data, axis=-1) - np.linalg.norm(q.data, axis=-1)
    ).max() <= 1e-5


def test_mrope_leftover_dims_pass_through():
    # head_dim 22 -> per-axis sub-dim 6, leftover 4 channels untouched
    q = Tensor(Rng(2).normal((2, 5, 22)))
    out = mrope_rotate(q, _positions(5))
    assert np.array_equal(out.data[..., 18:], q.data[..., 18:])


def test_mrope_logits_shift_invariant():
    rng = Rng(3)
    pos = _positions(6)
    q, k = rng.normal((2, 6, 24)), rng.normal((2, 6, 24))

    def logits(p):
        qr = mrope_rotate(Tensor(q), p).data
        kr = mrope_rotate(Tensor(k), p).data
        return np.einsum("htd,hsd->hts", qr, kr)

    base = logits(pos)
    shifted = logits(pos + 11.0)
    assert np.abs(base - shifted).max() <= 1e-5


# ---- GQA ----

def test_gqa_degenerate_equals_vanilla_mha():
    """kv_heads == heads must reproduce plain multi-head attention."""
    rng = Rng(4)
    cfg = small_cfg(heads=4, kv_heads=4, dim=32)
    w = {k: nn.xavier(32, 32, rng.split(k)) for k in ("wq", "wk", "wv", "wo")}
    x = Tensor(rng.normal((6, 32)))
    pos = _positions(6)
    out = gqa_attention(x, pos, cfg, w).data

    # independent loop reference: one K/V head per query head
    hd = 8
    q = mrope_rotate(Tensor((x.data @ w["wq"].data).reshape(6, 4, hd).transpose(1, 0, 2)), pos).data
    k = mrope_rotate(Tensor((x.data @ w["wk"].data).reshape(6, 4, hd).transpose(1, 0, 2)), pos).data
    v = (x.data @ w["wv"].data).reshape(6, 4, hd).transpose(1, 0, 2)
    heads_out = np.zeros((4, 6, hd), dtype=np.float32)
    for h in range(4):
        logit = q[h] @ k[h].T / np.sqrt(hd)
        a = np.exp(logit - logit.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        heads_out[h] = a @ v[h]
    ref = heads_out.transpose(1, 0, 2).reshape(6, 32) @ w["wo"].data
    assert np.abs(out - ref).max() <= 1e-5


def test_gqa_grouped_matches_loop_reference():
    rng = Rng(5)
    cfg = small_cfg(heads=6, kv_heads=2, dim=48)
    w = {
        "wq": nn.xavier(48, 48, rng.split("q")),
        "wk": nn.xavier(48, 16, rng.split("k")),
        "wv": nn.xavier(48, 16, rng.split("v")),
        "wo": nn.xavier(48, 48, rng.split("o")),
    }
    x = Tensor(rng.normal((5, 48)))
    out = gqa_attention(x, None, cfg, w).data

    hd = 8
    q = (x.data @ w["wq"].data).reshape(5, 6, hd)
    k = (x.data @ w["wk"].data).reshape(5, 2, hd)
    v = (x.data @ w["wv"].data).reshape(5, 2, hd)
    heads_out = np.zeros((5, 6, hd), dtype=np.float32)
    for h in range(6):
        g = h // 3  # 6 query heads share 2 kv heads
        logit = q[:, h] @ k[:, g].T / np.sqrt(hd)
        a = np.exp(logit - logit.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        heads_out[:, h] = a @ v[:, g]
    ref = heads_out.reshape(5, 48) @ w["wo"].data
    assert np.abs(out - ref).max() <= 1e-5


def test_gqa_single_token_is_value_projection():
    rng = Rng(6)
    cfg = small_cfg(heads=2, kv_heads=1, dim=16)
    w = {
        "wq": nn.xavier(16, 16, rng.split("q")),
        "wk": nn.xavier(16, 8, rng.split("k")),
        "wv": nn.xavier(16, 8, rng.split("v")),
        "wo": nn.xavier(16, 16, rng.split("o")),
    }
    x = Tensor(rng.normal((1, 16)))
    out = gqa_attention(x, np.zeros((1, 3)), cfg, w).data
    v = (x.data @ w["wv"].data).reshape(1, 1, 8)
    ref = np.concatenate([v[:, 0], v[:, 0]], axis=-1) @ w["wo"].data
    assert np.abs(out - ref).max() <= 1e-5


# ---- forward contract ----

def test_forward_shape_matches_latent(model):
    cfg, params = model
    for rows, cols in [(2, 2), (3, 2), (2, 3)]:
        lat = Rng(7).normal((1, rows, cols, 8))
        out = dit_forward(Tensor(lat[0]), [5, 9], 0.4, cfg, params)
        assert out.shape == (rows, cols, 8)


def test_forward_unconditional_accepted(model):
    cfg, params = model
    out = dit_forward(Rng(8).normal((2, 2, 8)), [], 0.0, cfg, params)
    assert out.shape == (2, 2, 8)
    assert np.all(np.isfinite(out.data))


def test_forward_rejects_bad_t(model):
    cfg, params = model
    lat = Rng(9).normal((2, 2, 8))
    with pytest.raises(NumericsError):
        dit_forward(lat, [1], 1.5, cfg, params)
    with pytest.raises(NumericsError):
        dit_forward(lat, [1], -0.1, cfg, params)


def test_forward_rejects_wrong_z(model):
    cfg, params = model
    with pytest.raises(ShapeError, match="z dim"):
        dit_forward(Rng(9).normal((2, 2, 5)), [1], 0.5, cfg, params)


def test_forward_deterministic(model):
    cfg, params = model
    lat = Rng(10).normal((2, 3, 8))
    a = dit_forward(lat, [3, 1, 4], 0.7, cfg, params).data
    b = dit_forward(lat, [3, 1, 4], 0.7, cfg, params).data
    assert np.array_equal(a, b)


def test_token_swap_equivariance():
    """Swapping two tokens' contents AND their position triples swaps outputs.

    Tested where positions are explicit: attention depends on the set of
    (content, position) pairs, not on sequence slots.
    """
    rng = Rng(11)
    cfg = small_cfg(heads=6, kv_heads=2, dim=48)
    w = {
        "wq": nn.xavier(48, 48, rng.split("q")),
        "wk": nn.xavier(48, 16, rng.split("k")),
        "wv": nn.xavier(48, 16, rng.split("v")),
        "wo": nn.xavier(48, 48, rng.split("o")),
    }
    x = rng.normal((6, 48))
    pos = _positions(6)
    base = gqa_attention(Tensor(x), pos, cfg, w).data

    perm_x = x.copy()
    perm_p = pos.copy()
    perm_x[[1, 4]] = x[[4, 1]]
    perm_p[[1, 4]] = pos[[4, 1]]
    perm = gqa_attention(Tensor(perm_x), perm_p, cfg, w).data
    assert np.allclose(base[1], perm[4], atol=1e-5)
    assert np.allclose(base[4], perm[1], atol=1e-5)
    assert np.allclose(base[0], perm[0], atol=1e-5)


def test_padding_does_not_change_image_outputs(model):
    """Masked pad tokens must not leak into latent-token outputs."""
    cfg, params = model
    lat = Rng(12).normal((1, 2, 2, 8))
    ids = np.array([[7, 3]])
    out_a = forward_batch(params, cfg, lat, ids, np.array([2]), np.array([0.5]))
    ids_padded = np.array([[7, 3, 0, 0, 0]])
    out_b = forward_batch(params, cfg, lat, ids_padded, np.array([2]), np.array([0.5]))
    assert np.abs(out_a.data - out_b.data).max() <= 1e-5


def test_zero_gate_init_outputs_zero():
    cfg = small_cfg()
    params = init_dit(cfg, Rng(13), zero_gates=True)
    out = dit_forward(Rng(14).normal((2, 2, 8)), [4], 0.6, cfg, params)
    assert np.abs(out.data).max() == 0.0


# ---- scaling arithmetic ----

def test_param_count_matches_instantiation(model):
    cfg, params = model
    assert param_count(cfg) == sum(int(np.prod(p.shape)) for p in params.values())


def test_paper_scale_param_count_within_15pct():
    count = param_count(paper_config())
    assert abs(count - 2.6e9) / 2.6e9 <= 0.15
