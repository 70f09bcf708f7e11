"""Pre-norm transformer encoder over masked token batches.

Every attention layer receives the per-image mask-count bias, so one
physical mask slot behaves like all of that image's removed tokens. The
encoder output keeps the mask slot; downstream consumers read only the
kept rows through scatter_to_map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .masking import TokenBatch, attention_bias
from .patches import PatchSet
from .tensor import ParamLeaf, Tensor

__all__ = [
    "BackboneConfig",
    "BlockParams",
    "IntegrityError",
    "FeatureMap",
    "encoder_block",
    "forward",
    "scatter_to_map",
]


class IntegrityError(RuntimeError):
    """Kept-token bookkeeping does not line up with tokenization order."""


@dataclass(frozen=True)
class BackboneConfig:
    dim: int = 64
    heads: int = 4
    depth: int = 4
    ffn_ratio: int = 4
    grid: int = 6  # level-0 grid (g x g per region)

    def __post_init__(self):
        if min(self.dim, self.heads, self.depth + 1, self.ffn_ratio, self.grid) < 1:
            raise ValueError("backbone dimensions must be positive (depth >= 0)")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class BlockParams:
    """One encoder block's leaves: attention, feed-forward, two norms."""

    w_query: ParamLeaf
    b_query: ParamLeaf
    w_key: ParamLeaf
    b_key: ParamLeaf
    w_value: ParamLeaf
    b_value: ParamLeaf
    w_out: ParamLeaf
    b_out: ParamLeaf
    ffn_w1: ParamLeaf
    ffn_b1: ParamLeaf
    ffn_w2: ParamLeaf
    ffn_b2: ParamLeaf
    ln1_gain: ParamLeaf
    ln1_shift: ParamLeaf
    ln2_gain: ParamLeaf
    ln2_shift: ParamLeaf

    def leaves(self):
        return [
            self.w_query, self.b_query, self.w_key, self.b_key,
            self.w_value, self.b_value, self.w_out, self.b_out,
            self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2,
            self.ln1_gain, self.ln1_shift, self.ln2_gain, self.ln2_shift,
        ]


def init_block(cfg: BackboneConfig, index: int, rng: np.random.Generator) -> BlockParams:
    d = cfg.dim
    f = cfg.dim * cfg.ffn_ratio
    scale = 1.0 / np.sqrt(d)

    def leaf(name, shape, s):
        return ParamLeaf(f"block{index}.{name}", rng.standard_normal(shape) * s)

    return BlockParams(
        w_query=leaf("w_query", (d, d), scale),
        b_query=ParamLeaf(f"block{index}.b_query", np.zeros(d)),
        w_key=leaf("w_key", (d, d), scale),
        b_key=ParamLeaf(f"block{index}.b_key", np.zeros(d)),
        w_value=leaf("w_value", (d, d), scale),
        b_value=ParamLeaf(f"block{index}.b_value", np.zeros(d)),
        w_out=leaf("w_out", (d, d), scale),
        b_out=ParamLeaf(f"block{index}.b_out", np.zeros(d)),
        ffn_w1=leaf("ffn_w1", (d, f), scale),
        ffn_b1=ParamLeaf(f"block{index}.ffn_b1", np.zeros(f)),
        ffn_w2=leaf("ffn_w2", (f, d), 1.0 / np.sqrt(f)),
        ffn_b2=ParamLeaf(f"block{index}.ffn_b2", np.zeros(d)),
        ln1_gain=ParamLeaf(f"block{index}.ln1_gain", np.ones(d)),
        ln1_shift=ParamLeaf(f"block{index}.ln1_shift", np.zeros(d)),
        ln2_gain=ParamLeaf(f"block{index}.ln2_gain", np.ones(d)),
        ln2_shift=ParamLeaf(f"block{index}.ln2_shift", np.zeros(d)),
    )


_LN_EPS = 1e-6


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return T.transpose(T.reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, s, h * dh))


def encoder_block(
    x: Tensor, bias: np.ndarray, p: BlockParams, heads: int
) -> Tensor:
    """x + MHA(LN(x)) then + FFN(LN(.)), attention biased per mask counts.

    x is [B, S, D]; bias is the [B, 1, 1, S] additive logit matrix from
    attention_bias (log counts and exclusion sentinels).
    """
    h = T.layer_norm(x, p.ln1_gain.tensor, p.ln1_shift.tensor, _LN_EPS)
    q = _split_heads(T.add(T.matmul(h, p.w_query.tensor), p.b_query.tensor), heads)
    k = _split_heads(T.add(T.matmul(h, p.w_key.tensor), p.b_key.tensor), heads)
    v = _split_heads(T.add(T.matmul(h, p.w_value.tensor), p.b_value.tensor), heads)
    d_head = q.shape[-1]
    logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d_head))
    weights = T.softmax_with_bias(logits, bias)
    pooled = _merge_heads(T.matmul(weights, v))
    x = T.add(x, T.add(T.matmul(pooled, p.w_out.tensor), p.b_out.tensor))

    f = T.layer_norm(x, p.ln2_gain.tensor, p.ln2_shift.tensor, _LN_EPS)
    f = T.gelu(T.add(T.matmul(f, p.ffn_w1.tensor), p.ffn_b1.tensor))
    f = T.add(T.matmul(f, p.ffn_w2.tensor), p.ffn_b2.tensor)
    return T.add(x, f)


def forward(
    batch: TokenBatch,
    cfg: BackboneConfig,
    blocks: list[BlockParams],
    final_gain: ParamLeaf,
    final_shift: ParamLeaf,
) -> Tensor:
    """Stacked blocks plus a final norm; mask slot retained in the output."""
    if batch.tokens.shape[-1] != cfg.dim:
        raise T.ShapeError(
            f"token dim {batch.tokens.shape[-1]} does not match model dim {cfg.dim}"
        )
    if len(blocks) != cfg.depth:
        raise ValueError(f"expected {cfg.depth} blocks, got {len(blocks)}")
    bias = attention_bias(batch)
    x = batch.tokens
    for p in blocks:
        x = encoder_block(x, bias, p, cfg.heads)
    return T.layer_norm(x, final_gain.tensor, final_shift.tensor, _LN_EPS)


@dataclass
class FeatureMap:
    """Kept-token features keyed by their patch-center image coordinates."""

    coords: np.ndarray  # [n, 2] normalized (x, y) centers
    levels: np.ndarray  # [n] source region level per token
    cells: np.ndarray  # [n, 2] (row, col) within the source region grid
    features: Tensor  # [n, D] backbone outputs, original token order

    def __len__(self) -> int:
        return self.coords.shape[0]

    def lookup(self, coord, tol: float = 1e-9) -> np.ndarray:
        """Feature row whose center matches coord within tol."""
        dist = np.abs(self.coords - np.asarray(coord)).max(axis=1)
        hits = np.flatnonzero(dist <= tol)
        if hits.size != 1:
            raise KeyError(f"{hits.size} features at {coord}")
        return self.features.data[hits[0]]


def scatter_to_map(features: Tensor, ps: PatchSet, kept_indices) -> FeatureMap:
    """Tag each kept token's feature with its patch-center coordinate.

    features is one image's encoder output [S, D]; rows [0, len(kept))
    are the kept tokens in tokenization order, the rest mask/filler.
    """
    kept = np.asarray(kept_indices, dtype=np.intp)
    if kept.ndim != 1 or kept.size > features.shape[0] - 1:
        raise IntegrityError(
            f"{kept.size} kept indices cannot come from {features.shape[0]} slots"
        )
    if kept.size and (kept[0] < 0 or kept[-1] >= len(ps) or (np.diff(kept) <= 0).any()):
        raise IntegrityError("kept indices must be strictly increasing within the patch set")
    centers = np.array([ps.patches[i].center for i in kept], dtype=np.float64).reshape(-1, 2)
    cells = np.array([ps.patches[i].cell for i in kept], dtype=np.intp).reshape(-1, 2)
    return FeatureMap(
        coords=centers,
        levels=ps.levels[kept],
        cells=cells,
        features=T.take_rows(features, np.arange(kept.size)),
    )
