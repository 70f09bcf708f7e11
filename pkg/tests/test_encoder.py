"""Encoder blocks, mask-bias threading, and feature scattering."""

import numpy as np
import pytest

from fovea import encoder as E
from fovea import geometry as G
from fovea import masking as M
from fovea import patches as P
from fovea import tensor as T
from fovea.encoder import BackboneConfig


def make_batch(rng, lengths, dim, mask_counts=None):
    mask = T.ParamLeaf("mask", rng.standard_normal(dim) * 0.1)
    items = [T.Tensor(rng.standard_normal((n, dim))) for n in lengths]
    batch = P.assemble_batch(items, mask, mode="infer")
    if mask_counts is not None:
        batch.mask_counts = np.asarray(mask_counts, dtype=np.intp)
    return batch, mask


def tiny_blocks(cfg, seed=0):
    rng = np.random.default_rng(seed)
    blocks = [E.init_block(cfg, i, rng) for i in range(cfg.depth)]
    final_gain = T.ParamLeaf("final_gain", np.ones(cfg.dim))
    final_shift = T.ParamLeaf("final_shift", np.zeros(cfg.dim))
    return blocks, final_gain, final_shift


def test_zero_weights_block_is_identity():
    cfg = BackboneConfig(dim=8, heads=2, depth=1)
    rng = np.random.default_rng(0)
    block = E.init_block(cfg, 0, rng)
    for leaf in block.leaves():
        leaf.tensor.data[...] = 0.0
    batch, _ = make_batch(rng, [5, 5], 8)
    bias = M.attention_bias(batch)
    out = E.encoder_block(batch.tokens, bias, block, cfg.heads)
    np.testing.assert_array_equal(out.data, batch.tokens.data)


def test_block_matches_numpy_reference():
    # Independent single-block oracle in plain numpy (no mask slot active).
    cfg = BackboneConfig(dim=8, heads=2, depth=1)
    rng = np.random.default_rng(1)
    block = E.init_block(cfg, 0, rng)
    x = rng.standard_normal((1, 7, 8))  # 6 real tokens + inert mask slot
    batch, _ = make_batch(rng, [6], 8)
    batch.tokens = T.Tensor(x)
    batch.valid_counts = np.array([6])
    batch.mask_counts = np.array([0])
    out = E.encoder_block(batch.tokens, M.attention_bias(batch), block, cfg.heads).data

    def ln(a, gain, shift):
        mu = a.mean(-1, keepdims=True)
        var = ((a - mu) ** 2).mean(-1, keepdims=True)
        return (a - mu) / np.sqrt(var + 1e-6) * gain + shift

    def ref_gelu(a):
        from scipy.special import erf

        return 0.5 * a * (1 + erf(a / np.sqrt(2)))

    seq = x[0, :6]  # active rows only; slot 6 is excluded via -inf bias
    h = ln(seq, block.ln1_gain.value, block.ln1_shift.value)
    q = (h @ block.w_query.value + block.b_query.value).reshape(6, 2, 4).swapaxes(0, 1)
    k = (h @ block.w_key.value + block.b_key.value).reshape(6, 2, 4).swapaxes(0, 1)
    v = (h @ block.w_value.value + block.b_value.value).reshape(6, 2, 4).swapaxes(0, 1)
    pooled = np.zeros((2, 6, 4))
    for head in range(2):
        logits = q[head] @ k[head].T / 2.0
        w = np.exp(logits - logits.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        pooled[head] = w @ v[head]
    merged = pooled.swapaxes(0, 1).reshape(6, 8)
    seq2 = seq + merged @ block.w_out.value + block.b_out.value
    f = ln(seq2, block.ln2_gain.value, block.ln2_shift.value)
    f = ref_gelu(f @ block.ffn_w1.value + block.ffn_b1.value) @ block.ffn_w2.value
    ref = seq2 + f + block.ffn_b2.value
    np.testing.assert_allclose(out[0, :6], ref, atol=1e-12)


def test_zero_mask_count_ignores_mask_value():
    cfg = BackboneConfig(dim=8, heads=2, depth=2)
    rng = np.random.default_rng(2)
    blocks, fg, fs = tiny_blocks(cfg, seed=3)
    batch, mask = make_batch(rng, [5, 5], 8)
    assert (batch.mask_counts == 0).all()
    out1 = E.forward(batch, cfg, blocks, fg, fs).data[:, :5].copy()
    mask.tensor.data[...] += 100.0  # only reaches outputs through the mask slot
    batch2 = P.assemble_batch(
        [T.Tensor(batch.tokens.data[i, :5]) for i in range(2)], mask, mode="infer"
    )
    out2 = E.forward(batch2, cfg, blocks, fg, fs).data[:, :5]
    np.testing.assert_allclose(out1, out2, atol=1e-12)


def test_forward_depth_zero_is_final_norm():
    cfg = BackboneConfig(dim=8, heads=2, depth=0)
    rng = np.random.default_rng(3)
    batch, _ = make_batch(rng, [4], 8)
    fg = T.ParamLeaf("g", np.ones(8))
    fs = T.ParamLeaf("s", np.zeros(8))
    out = E.forward(batch, cfg, [], fg, fs)
    ref = T.layer_norm(batch.tokens, fg.tensor, fs.tensor, 1e-6)
    np.testing.assert_array_equal(out.data, ref.data)


def test_forward_deterministic_and_shaped():
    rng = np.random.default_rng(4)
    for _ in range(5):
        dim = int(rng.choice([8, 16]))
        heads = int(rng.choice([1, 2, 4]))
        depth = int(rng.integers(0, 3))
        cfg = BackboneConfig(dim=dim, heads=heads, depth=depth)
        blocks, fg, fs = tiny_blocks(cfg, seed=int(rng.integers(100)))
        lengths = rng.integers(2, 7, size=3).tolist()
        batch, _ = make_batch(rng, lengths, dim)
        out1 = E.forward(batch, cfg, blocks, fg, fs)
        out2 = E.forward(batch, cfg, blocks, fg, fs)
        assert out1.shape == (3, max(lengths) + 1, dim)
        np.testing.assert_array_equal(out1.data, out2.data)


def test_residual_identity_with_zero_output_projections():
    cfg = BackboneConfig(dim=8, heads=2, depth=3)
    rng = np.random.default_rng(5)
    blocks, fg, fs = tiny_blocks(cfg, seed=6)
    for b in blocks:
        b.w_out.tensor.data[...] = 0.0
        b.b_out.tensor.data[...] = 0.0
        b.ffn_w2.tensor.data[...] = 0.0
        b.ffn_b2.tensor.data[...] = 0.0
    batch, _ = make_batch(rng, [5, 3], 8)
    out = E.forward(batch, cfg, blocks, fg, fs)
    ref = T.layer_norm(batch.tokens, fg.tensor, fs.tensor, 1e-6)
    np.testing.assert_allclose(out.data, ref.data, atol=1e-12)


def test_block_gradients_finite_difference():
    cfg = BackboneConfig(dim=6, heads=2, depth=1)
    rng = np.random.default_rng(7)
    block = E.init_block(cfg, 0, rng)
    mask = T.ParamLeaf("mask", rng.standard_normal(6) * 0.1)
    items = [T.Tensor(rng.standard_normal((n, 6))) for n in (3, 4)]

    def loss():
        # Assemble inside the closure so mask-token probes reach the loss.
        batch = P.assemble_batch(items, mask, mode="infer")
        out = E.encoder_block(batch.tokens, M.attention_bias(batch), block, cfg.heads)
        return T.tsum(T.mul(out, out))

    err = T.grad_check(loss, block.leaves() + [mask], eps=1e-5, entries_per_leaf=6)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# scatter_to_map


def patch_set_96(rng=None, kps=None):
    coords = np.full((19, 2), G.INVISIBLE) if kps is None else kps
    rs = G.build_roi_set(G.KeypointSet(coords), 96, 96, grid=(6, 6))
    return P.extract_patches(None, rs)


def test_scatter_bijection_without_masking():
    ps = patch_set_96()
    rng = np.random.default_rng(8)
    feats = T.Tensor(rng.standard_normal((len(ps) + 1, 4)))
    fmap = E.scatter_to_map(feats, ps, np.arange(len(ps)))
    assert len(fmap) == len(ps)
    assert len(np.unique(fmap.coords, axis=0)) == len(ps)


def test_scatter_singleton():
    ps = patch_set_96()
    feats = T.Tensor(np.random.default_rng(9).standard_normal((2, 4)))
    fmap = E.scatter_to_map(feats, ps, np.array([17]))
    assert len(fmap) == 1
    np.testing.assert_array_equal(fmap.coords[0], ps.patches[17].center)


def test_scatter_lookup_round_trip():
    ps = patch_set_96()
    rng = np.random.default_rng(10)
    kept = np.sort(rng.choice(len(ps), size=12, replace=False))
    feats = T.Tensor(rng.standard_normal((13, 4)))
    fmap = E.scatter_to_map(feats, ps, kept)
    for pos, patch_idx in enumerate(kept):
        got = fmap.lookup(ps.patches[patch_idx].center)
        np.testing.assert_array_equal(got, feats.data[pos])


def test_scatter_misalignment_raises():
    ps = patch_set_96()
    feats = T.Tensor(np.zeros((5, 4)))
    with pytest.raises(E.IntegrityError):
        E.scatter_to_map(feats, ps, np.array([3, 2, 5]))  # not increasing
    with pytest.raises(E.IntegrityError):
        E.scatter_to_map(feats, ps, np.array([0, 1, 2, 3, 4]))  # > slots - 1
    with pytest.raises(E.IntegrityError):
        E.scatter_to_map(feats, ps, np.array([0, len(ps)]))  # out of range
