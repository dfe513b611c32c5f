import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tecswin import tensor as T
from tecswin.nn import parameter
from tecswin.rng import Rng
from tecswin.swin import (AttentionConfig, ContextBundle, CrossAttentionLayer, SwinBlock, SwinStage, WindowAttention,
                          relative_position_index, scale_shift_apply, shift_attention_mask, shift_region_ids,
                          window_attention_context)
from tecswin.tensor import ShapeError, Tensor


def _softmax(logits):
    m = max(l for l in logits if l != -math.inf)
    e = [0.0 if l == -math.inf else math.exp(l - m) for l in logits]
    s = sum(e)
    return [v / s for v in e]


def oracle_window_attention(layer, xw, ctx, batch, mask):
    """Per-query loop over [window keys ‖ context keys] in float64."""
    cfg = layer.cfg
    n, length, c = xw.shape
    h, d = cfg.num_heads, cfg.head_dim
    nw = n // batch
    wq, bq = layer.qkv.weight.data.astype(np.float64), layer.qkv.bias.data.astype(np.float64)
    qkv = xw @ wq + bq
    if ctx is not None and ctx.shape[1]:
        ckv = ctx @ layer.ctx_kv.weight.data.astype(np.float64) + layer.ctx_kv.bias.data
        lc = ctx.shape[1]
    else:
        lc = 0
    table = layer.rel_bias_table.data if layer.rel_bias_table is not None else None
    rel = relative_position_index(cfg.window)
    out = np.zeros((n, length, c))
    for wi in range(n):
        b, widx = divmod(wi, nw)
        for hd in range(h):
            sl = slice(hd * d, (hd + 1) * d)
            for i in range(length):
                q = qkv[wi, i, :c][sl] / math.sqrt(d)
                logits, values = [], []
                for j in range(length):
                    l = float(q @ qkv[wi, j, c : 2 * c][sl])
                    if table is not None:
                        l += float(table[rel[i, j], hd])
                    if mask is not None:
                        l += float(mask[widx, i, j])
                    logits.append(l)
                    values.append(qkv[wi, j, 2 * c :][sl])
                for m in range(lc):
                    logits.append(float(q @ ckv[b, m, :c][sl]))
                    values.append(ckv[b, m, c:][sl])
                w = _softmax(logits)
                out[wi, i, sl] = sum(wk * vk for wk, vk in zip(w, values))
    return out @ layer.proj.weight.data + layer.proj.bias.data


def random_attention_case(seed):
    rs = np.random.default_rng(seed)
    heads = int(rs.integers(1, 3))
    head_dim = int(rs.integers(1, 4))
    win = int(rs.integers(1, 4))
    batch = int(rs.integers(1, 3))
    grid = int(rs.integers(1, 3))
    lc = int(rs.integers(0, 4))
    ctx_dim = int(rs.integers(1, 5))
    cfg = AttentionConfig(heads, head_dim, window=win)
    rng = Rng(seed)
    table = parameter(rng.fork("t"), ((2 * win - 1) ** 2, heads), std=0.5) if rs.random() < 0.7 else None
    layer = WindowAttention(cfg, ctx_dim, rng.fork("l"), table).astype(np.float64)
    for p in layer.parameters():
        p.data = rs.standard_normal(p.shape) * 0.5
    side = grid * win
    mask = None
    if win >= 2 and grid >= 2 and rs.random() < 0.5:
        mask = shift_attention_mask(side, side, win, win // 2).astype(np.float64)
    x = rs.standard_normal((batch, side, side, cfg.dim))
    xw = T.window_partition(Tensor(x), win).data
    ctx = rs.standard_normal((batch, lc, ctx_dim))
    return layer, xw, ctx, batch, mask


@pytest.mark.parametrize("seed", range(100))
def test_window_attention_matches_dense_oracle(seed):
    layer, xw, ctx, batch, mask = random_attention_case(seed)
    got = window_attention_context(layer, Tensor(xw), Tensor(ctx), batch, mask).data
    want = oracle_window_attention(layer, xw, ctx, batch, mask)
    np.testing.assert_allclose(got, want, atol=1e-5, rtol=0)


@pytest.mark.parametrize("seed", range(20))
def test_empty_context_is_plain_window_attention(seed):
    layer, xw, ctx, batch, mask = random_attention_case(seed)
    empty = Tensor(np.zeros((batch, 0, ctx.shape[2])))
    got = window_attention_context(layer, Tensor(xw), empty, batch, mask).data
    plain = WindowAttention(layer.cfg, None, None, layer.rel_bias_table)
    plain.qkv, plain.proj = layer.qkv, layer.proj
    np.testing.assert_allclose(got, window_attention_context(plain, Tensor(xw), None, batch, mask).data, atol=1e-6)
    np.testing.assert_allclose(got, oracle_window_attention(plain, xw, None, batch, mask), atol=1e-6)


def test_attention_weights_sum_to_one_over_window_and_context():
    layer, xw, ctx, batch, mask = random_attention_case(3)
    layer.record_attention = True
    window_attention_context(layer, Tensor(xw), Tensor(ctx), batch, mask)
    w = layer.last_attention
    assert w.shape[-1] == xw.shape[1] + ctx.shape[1]
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


def test_head_divisibility_error():
    layer = WindowAttention(AttentionConfig(2, 4, window=2), None, Rng(0))
    with pytest.raises(ShapeError):
        window_attention_context(layer, Tensor(np.zeros((1, 4, 6))), None, 1)


def test_window_locality():
    cfg = AttentionConfig(1, 8, window=4)
    layer = WindowAttention(cfg, None, Rng(1), None)
    x = np.random.default_rng(0).standard_normal((1, 8, 8, 8)).astype(np.float32)
    base = T.window_reverse(layer(T.window_partition(Tensor(x), 4), None, 1), 4, 8, 8).data
    y = x.copy()
    y[0, 4:8, 0:4] = 0
    moved = T.window_reverse(layer(T.window_partition(Tensor(y), 4), None, 1), 4, 8, 8).data
    changed = np.abs(moved - base).max(-1) > 0
    assert changed[0, 4:8, 0:4].all()
    changed[0, 4:8, 0:4] = False
    assert not changed.any()


# shifted windows


def test_shift_region_layout():
    ids = shift_region_ids(8, 8, 4, 2)
    assert len(np.unique(ids)) == 9
    assert (ids[:4, :4] == ids[0, 0]).all()
    assert ids[4, 4] != ids[6, 6] and ids[4, 4] != ids[4, 6]


def test_shift_mask_blocks_cross_region_attention():
    cfg = AttentionConfig(2, 4, window=4)
    blk = SwinBlock(cfg, 8, shifted=True, with_cross=False, ctx_dim=4, emb_dim=4, rng=Rng(2),
                    rel_bias_table=parameter(Rng(3), (49, 2), std=1.0))
    blk.attn.record_attention = True
    x = Tensor(np.random.default_rng(1).standard_normal((2, 8, 8, 8)).astype(np.float32))
    ctx = ContextBundle(Tensor(np.random.default_rng(2).standard_normal((2, 3, 4)).astype(np.float32)),
                        Tensor(np.zeros((2, 4), np.float32)), np.zeros(2, bool))
    blk(x, ctx, Tensor(np.ones((2, 4), np.float32)))
    w = blk.attn.last_attention[..., :16]  # image keys only
    cross = np.isinf(blk._mask)[None, :, None]
    assert np.broadcast_to(cross, w.shape).any()
    assert w[np.broadcast_to(cross, w.shape)].max() < 1e-7


def test_shifted_attention_only_mixes_within_regions():
    cfg = AttentionConfig(1, 4, window=4)
    blk = SwinBlock(cfg, 8, shifted=True, with_cross=False, ctx_dim=4, emb_dim=4, rng=Rng(5))
    x = np.random.default_rng(3).standard_normal((1, 8, 8, 4)).astype(np.float32)
    ctx = ContextBundle.empty(1, 4)
    base = blk._attention(Tensor(x), ctx).data
    ids = shift_region_ids(8, 8, 4, 2)
    for (pi, pj) in [(0, 0), (7, 7), (5, 2), (6, 6)]:
        y = x.copy()
        y[0, pi, pj] += 5.0
        diff = np.abs(blk._attention(Tensor(y), ctx).data - base).max(-1)[0]
        si, sj = (pi - 2) % 8, (pj - 2) % 8
        for qi in range(8):
            for qj in range(8):
                ti, tj = (qi - 2) % 8, (qj - 2) % 8
                same = (ti // 4, tj // 4) == (si // 4, sj // 4) and ids[ti, tj] == ids[si, sj]
                if not same:
                    assert diff[qi, qj] == 0.0


# cross attention


def oracle_cross(layer, x, ctx):
    h, d = layer.cfg.num_heads, layer.cfg.head_dim
    c = x.shape[-1]
    q = x @ layer.q.weight.data + layer.q.bias.data
    kv = ctx @ layer.kv.weight.data + layer.kv.bias.data
    out = np.zeros_like(q)
    for b in range(x.shape[0]):
        for hd in range(h):
            sl = slice(hd * d, (hd + 1) * d)
            for i in range(x.shape[1]):
                w = _softmax([float(q[b, i, sl] @ kv[b, m, :c][sl]) / math.sqrt(d) for m in range(ctx.shape[1])])
                out[b, i, sl] = sum(wk * kv[b, m, c:][sl] for m, wk in enumerate(w))
    return out @ layer.proj.weight.data + layer.proj.bias.data


@pytest.mark.parametrize("seed", range(10))
def test_cross_attention_matches_oracle(seed):
    rs = np.random.default_rng(seed)
    cfg = AttentionConfig(int(rs.integers(1, 3)), 3)
    layer = CrossAttentionLayer(cfg, 5, Rng(seed)).astype(np.float64)
    for p in layer.parameters():
        p.data = rs.standard_normal(p.shape) * 0.5
    x, ctx = rs.standard_normal((2, 6, cfg.dim)), rs.standard_normal((2, 4, 5))
    np.testing.assert_allclose(layer.attend(Tensor(x), Tensor(ctx)).data, oracle_cross(layer, x, ctx), atol=1e-5)


def test_cross_attention_zero_context_reduces_to_mlp_path():
    cfg = AttentionConfig(2, 4)
    layer = CrossAttentionLayer(cfg, 6, Rng(0))
    x = Tensor(np.random.default_rng(0).standard_normal((1, 5, 8)).astype(np.float32))
    ctx = ContextBundle(Tensor(np.zeros((1, 3, 6), np.float32)), Tensor(np.zeros((1, 6), np.float32)),
                        np.zeros(1, bool))
    assert np.abs(layer.attend(layer.norm_q(x), ctx.tokens).data).max() == 0.0
    want = x.data + layer.mlp(layer.norm_mlp(x)).data
    np.testing.assert_allclose(layer(x, ctx).data, want, atol=1e-6)
    assert layer.mlp.hidden == 2 * cfg.dim


def test_cross_attention_batch_mismatch():
    layer = CrossAttentionLayer(AttentionConfig(1, 4), 4, Rng(0))
    with pytest.raises(ShapeError):
        layer.attend(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((1, 2, 4))))


# scale / shift


def test_variant4_hand_evaluation():
    x = [1.0, 2.0, 3.0, 4.0]
    scale, shift = [0.5, -0.25, 0.0, 1.0], [0.1, 0.2, -0.3, 0.0]
    mean = sum(x) / 4
    var = sum((v - mean) ** 2 for v in x) / 4
    want = []
    for xi, sc, sh in zip(x, scale, shift):
        short_cut = xi
        y = (xi - mean) / math.sqrt(var + 1e-5)  # norm
        y = y * (sc + 1) + sh  # scale-shift
        y = 0.5 * y * (1 + math.erf(y / math.sqrt(2)))  # gelu
        want.append(short_cut + 2 * y)  # inner = doubling
    got = scale_shift_apply(Tensor(np.array([x])), Tensor(np.array(scale)), Tensor(np.array(shift)), 4,
                            lambda y: y * 2.0).data
    np.testing.assert_allclose(got[0], want, atol=1e-9)


def test_neutral_modulation():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 4)))
    z = Tensor(np.zeros(4))
    inner = lambda y: y * 3.0
    got = scale_shift_apply(x, z, z, 4, inner).data
    np.testing.assert_allclose(got, x.data + 3.0 * T.gelu(T.layer_norm(x)).data, atol=1e-12)


def test_variants_differ():
    rs = np.random.default_rng(1)
    x = Tensor(rs.standard_normal((3, 6)))
    sc, sh = Tensor(rs.standard_normal(6)), Tensor(rs.standard_normal(6))
    inner = lambda y: y * 0.7 + 0.1
    outs = {v: scale_shift_apply(x, sc, sh, v, inner).data for v in range(1, 11)}
    for a, b in [(2, 4), (2, 5), (4, 5), (1, 7), (4, 10), (4, 6), (3, 4)]:
        assert np.abs(outs[a] - outs[b]).max() > 1e-3


def test_invalid_variant():
    with pytest.raises(ValueError):
        scale_shift_apply(Tensor(np.zeros((1, 2))), None, None, 11, lambda y: y)


# blocks and stages


def _bundle(b, lc, dim, seed=0):
    rs = np.random.default_rng(seed)
    return ContextBundle(Tensor(rs.standard_normal((b, lc, dim)).astype(np.float32)),
                         Tensor(rs.standard_normal((b, dim)).astype(np.float32)), np.zeros(b, bool))


@settings(max_examples=15, deadline=None)
@given(st.sampled_from([2, 4]), st.integers(1, 2), st.booleans(), st.booleans(), st.integers(1, 10))
def test_block_preserves_shape(win, grid, shifted, cross, variant):
    res = win * grid
    cfg = AttentionConfig(1, 8, window=win)
    blk = SwinBlock(cfg, res, shifted and grid > 1, cross, 6, 6, Rng(0), variant)
    x = Tensor(np.random.default_rng(0).standard_normal((2, res, res, 8)).astype(np.float32))
    out = blk(x, _bundle(2, 3, 6), Tensor(np.ones((2, 6), np.float32)))
    assert out.shape == x.shape and np.all(np.isfinite(out.data))


def test_block_divisibility_error():
    with pytest.raises(ShapeError):
        SwinBlock(AttentionConfig(1, 8, window=4), 6, False, False, 4, 4, Rng(0))


def test_constant_field_stays_constant():
    cfg = AttentionConfig(2, 4, window=2)
    blk = SwinBlock(cfg, 4, shifted=False, with_cross=False, ctx_dim=4, emb_dim=4, rng=Rng(0),
                    rel_bias_table=None)
    vec = np.random.default_rng(0).standard_normal(8)
    x = Tensor(np.broadcast_to(vec, (1, 4, 4, 8)).astype(np.float64).copy())
    blk.astype(np.float64)
    emb = Tensor(np.random.default_rng(1).standard_normal((1, 4)))
    out = blk(x, ContextBundle.empty(1, 4), emb).data
    np.testing.assert_allclose(out, np.broadcast_to(out[0, 0, 0], out.shape), atol=1e-12)
    # attention of identical tokens returns the projected value of that token
    mod = (T.silu(emb).data @ blk.ss_proj.weight.data + blk.ss_proj.bias.data)[0]
    y = T.gelu(Tensor(T.layer_norm(Tensor(vec)).data * (mod[:8] + 1) + mod[8:])).data
    qkv = y @ blk.attn.qkv.weight.data + blk.attn.qkv.bias.data
    attn = qkv[16:] @ blk.attn.proj.weight.data + blk.attn.proj.bias.data
    x1 = vec + attn
    want = x1 + blk.mlp(blk.norm2(Tensor(x1))).data
    np.testing.assert_allclose(out[0, 0, 0], want, atol=1e-10)


def test_stage_layout_rules():
    big = SwinStage(8, 8, 4, 8, 4, 6, 6, Rng(0))
    assert [b.shift for b in big.blocks] == [0, 2, 0, 2]
    assert [b.cross is not None for b in big.blocks] == [False, True, False, True]
    small = SwinStage(8, 2, 3, 8, 4, 6, 6, Rng(0))
    assert small.cfg.window == 2
    assert all(b.shift == 0 and b.cross is not None for b in small.blocks)
    with pytest.raises(ValueError):
        SwinStage(8, 8, 3, 8, 4, 6, 6, Rng(0))


def test_relative_bias_shared_within_stage():
    st_ = SwinStage(16, 8, 2, 8, 4, 6, 6, Rng(0))
    assert st_.rel_bias.shape == (49, 2)
    assert all(b.attn.rel_bias_table is st_.rel_bias for b in st_.blocks)
    names = [n for n, _ in st_.named_parameters() if "rel_bias" in n]
    assert names == ["rel_bias"]
    idx = relative_position_index(4)
    assert idx.min() == 0 and idx.max() == 48 and (np.diag(idx) == 24).all()


def test_block_gradients():
    from _util import param_gradcheck

    cfg = AttentionConfig(2, 4, window=2)
    blk = SwinBlock(cfg, 4, shifted=True, with_cross=True, ctx_dim=5, emb_dim=6, rng=Rng(0),
                    rel_bias_table=parameter(Rng(1), (9, 2), std=0.3)).astype(np.float64)
    rs = np.random.default_rng(0)
    for p in blk.parameters():
        p.data = p.data + rs.standard_normal(p.shape) * 0.2
    x = Tensor(rs.standard_normal((2, 4, 4, 8)))
    ctx = ContextBundle(Tensor(rs.standard_normal((2, 3, 5))), Tensor(rs.standard_normal((2, 5))), np.zeros(2, bool))
    emb = Tensor(rs.standard_normal((2, 6)))
    proj = rs.standard_normal((2, 4, 4, 8))
    worst, name = param_gradcheck(blk, lambda: (blk(x, ctx, emb) * Tensor(proj)).sum(), per_tensor=4)
    assert worst < 1e-2, name
