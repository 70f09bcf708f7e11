"""Keypoint-anchored attention pooling into a fixed-size embedding.

Queries are position-embedding samples at each visible keypoint,
duplicated with learned offsets so each keypoint pools from several
learned spots around itself. Two branches run side by side: a projected
attention free to learn wide pooling, and an unprojected one whose
sharp peak pins a feature to the keypoint's own location. Per-dataset
sigmoid gates scale the part rows during training; test time uses the
average gate. Rows of invisible keypoints stay exactly zero end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import FeatureMap
from .geometry import KEYPOINT_NAMES
from .patches import PositionField, sample_image_field
from .tensor import ParamLeaf, Tensor

__all__ = [
    "NUM_KEYPOINTS",
    "AVERAGE_DATASET",
    "HeadParams",
    "PartFeatures",
    "EmptyFeatureMapError",
    "build_queries",
    "part_attention",
    "gate_and_embed",
    "part_zeroing",
    "attention_map_csv",
]

NUM_KEYPOINTS = len(KEYPOINT_NAMES)
AVERAGE_DATASET = "average"
_SENTINEL = -1.0


class EmptyFeatureMapError(RuntimeError):
    """No kept tokens to pool from."""


@dataclass
class HeadParams:
    offsets: ParamLeaf  # [n_rep * 19, D] query offset bank
    w_query: ParamLeaf  # [D, attn_dim]
    w_key: ParamLeaf  # [D, attn_dim]
    w_value: ParamLeaf  # [D, D]
    part_weights: ParamLeaf  # [num_datasets, n_rep * 19]
    mlp_w1: ParamLeaf  # [2 * n_rep * 19 * D, 4E]
    mlp_b1: ParamLeaf
    mlp_w2: ParamLeaf  # [4E, E]
    mlp_b2: ParamLeaf
    n_rep: int
    embed_dim: int

    def leaves(self):
        return [
            self.offsets, self.w_query, self.w_key, self.w_value,
            self.part_weights, self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2,
        ]

    @property
    def rows(self) -> int:
        return self.n_rep * NUM_KEYPOINTS

    @property
    def part_feature_count(self) -> int:
        """Rows across both branches (152 for 19 keypoints x 4 repeats)."""
        return 2 * self.rows


@dataclass
class PartFeatures:
    part: Tensor  # [n_rep * 19, D] projected branch
    peak: Tensor  # [n_rep * 19, D] unprojected branch
    visible: np.ndarray  # [19] bool


def init_head(
    dim: int,
    n_rep: int,
    attn_dim: int,
    embed_dim: int,
    num_datasets: int,
    rng: np.random.Generator,
) -> HeadParams:
    rows = n_rep * NUM_KEYPOINTS
    flat = 2 * rows * dim
    hidden = 4 * embed_dim
    return HeadParams(
        offsets=ParamLeaf("head.offsets", rng.standard_normal((rows, dim)) * 0.02),
        w_query=ParamLeaf("head.w_query", rng.standard_normal((dim, attn_dim)) / np.sqrt(dim)),
        w_key=ParamLeaf("head.w_key", rng.standard_normal((dim, attn_dim)) / np.sqrt(dim)),
        w_value=ParamLeaf("head.w_value", rng.standard_normal((dim, dim)) / np.sqrt(dim)),
        part_weights=ParamLeaf("head.part_weights", np.zeros((num_datasets, rows))),
        mlp_w1=ParamLeaf("head.mlp_w1", rng.standard_normal((flat, hidden)) / np.sqrt(flat)),
        mlp_b1=ParamLeaf("head.mlp_b1", np.zeros(hidden)),
        mlp_w2=ParamLeaf("head.mlp_w2", rng.standard_normal((hidden, embed_dim)) / np.sqrt(hidden)),
        mlp_b2=ParamLeaf("head.mlp_b2", np.zeros(embed_dim)),
        n_rep=n_rep,
        embed_dim=embed_dim,
    )


def _row_mask(visible: np.ndarray, n_rep: int) -> np.ndarray:
    """[n_rep * 19, 1] multiplier zeroing rows of invisible keypoints."""
    return np.tile(visible.astype(np.float64), n_rep)[:, None]


def build_queries(
    field: PositionField, keypoints_norm: np.ndarray, params: HeadParams
) -> tuple[Tensor, np.ndarray]:
    """Query rows: field sample at each keypoint plus its offset row.

    keypoints_norm is [19, 2] in normalized image coordinates with
    (-1, -1) marking invisible joints. Row (r, j) lives at index
    r * 19 + j. Invisible keypoints give exactly zero rows and a cleared
    visibility bit.
    """
    kps = np.asarray(keypoints_norm, dtype=np.float64)
    if kps.shape != (NUM_KEYPOINTS, 2):
        raise ValueError(f"expected [19, 2] keypoints, got {kps.shape}")
    visible = (kps[:, 0] != _SENTINEL) & (kps[:, 1] != _SENTINEL)
    base = np.zeros((NUM_KEYPOINTS, field.channels))
    if visible.any():
        base[visible] = sample_image_field(field.pe, kps[visible])
    tiled = np.tile(base, (params.n_rep, 1))
    mask = _row_mask(visible, params.n_rep)
    q = T.mul(T.add(Tensor(tiled), params.offsets.tensor), Tensor(mask))
    return q, visible


def part_attention(
    queries: Tensor,
    field: PositionField,
    fmap: FeatureMap,
    params: HeadParams,
    visible: np.ndarray,
) -> PartFeatures:
    """Pool kept-token features around keypoints, two branches.

    Keys are field samples at the kept patch centers; values are the
    kept backbone features. The projected branch attends through
    w_query/w_key at reduced width and projects values through w_value;
    the peak branch attends with the raw embeddings so its weight mass
    concentrates on the patch containing the keypoint.
    """
    if len(fmap) == 0:
        raise EmptyFeatureMapError("cannot pool from an empty feature map")
    keys = Tensor(sample_image_field(field.pe, fmap.coords))  # [n, D]
    values = fmap.features  # [n, D]
    mask = Tensor(_row_mask(visible, params.n_rep))

    attn_dim = params.w_query.value.shape[1]
    q_proj = T.matmul(queries, params.w_query.tensor)
    k_proj = T.matmul(keys, params.w_key.tensor)
    logits = T.matmul(q_proj, T.transpose(k_proj)) * (1.0 / np.sqrt(attn_dim))
    part = T.matmul(T.softmax_with_bias(logits), T.matmul(values, params.w_value.tensor))

    d = keys.shape[1]
    peak_logits = T.matmul(queries, T.transpose(keys)) * (1.0 / np.sqrt(d))
    peak = T.matmul(T.softmax_with_bias(peak_logits), values)

    return PartFeatures(part=T.mul(part, mask), peak=T.mul(peak, mask), visible=visible)


def gate_and_embed(pf: PartFeatures, dataset_id, params: HeadParams) -> Tensor:
    """Sigmoid-gate part rows, flatten both branches, and project.

    dataset_id selects a row of the per-dataset gate bank; the string
    "average" (test time) squashes the mean of all rows instead. The
    embedding is L2-normalized, ready for cosine similarity or loss.
    """
    if dataset_id == AVERAGE_DATASET:
        gate_logits = T.tmean(params.part_weights.tensor, axis=0)
    else:
        t = int(dataset_id)
        if not 0 <= t < params.part_weights.value.shape[0]:
            raise ValueError(f"dataset id {dataset_id} out of range")
        gate_logits = T.select(params.part_weights.tensor, t)
    gates = T.reshape(T.sigmoid(gate_logits), (params.rows, 1))
    gated = T.concat([T.mul(pf.part, gates), T.mul(pf.peak, gates)], axis=0)
    flat = T.reshape(gated, (1, params.part_feature_count * pf.part.shape[1]))
    hidden = T.gelu(T.add(T.matmul(flat, params.mlp_w1.tensor), params.mlp_b1.tensor))
    out = T.add(T.matmul(hidden, params.mlp_w2.tensor), params.mlp_b2.tensor)
    return T.reshape(T.l2_normalize(out), (params.embed_dim,))


def embed_flat_features(flat: Tensor, params: HeadParams) -> Tensor:
    """Batched MLP over pre-gated flattened part features [B, F] -> [B, E]."""
    hidden = T.gelu(T.add(T.matmul(flat, params.mlp_w1.tensor), params.mlp_b1.tensor))
    out = T.add(T.matmul(hidden, params.mlp_w2.tensor), params.mlp_b2.tensor)
    return T.l2_normalize(out)


def part_zeroing(pf: PartFeatures, zero_set) -> PartFeatures:
    """Zero both branches' rows (all repeats) for the named keypoints."""
    names = set(zero_set)
    unknown = names - set(KEYPOINT_NAMES)
    if unknown:
        raise ValueError(f"unknown keypoint names: {sorted(unknown)}")
    keep = np.array([name not in names for name in KEYPOINT_NAMES])
    n_rep = pf.part.shape[0] // NUM_KEYPOINTS
    mask = Tensor(np.tile(keep.astype(np.float64), n_rep)[:, None])
    return PartFeatures(
        part=T.mul(pf.part, mask),
        peak=T.mul(pf.peak, mask),
        visible=pf.visible & keep,
    )


def attention_map_csv(
    queries: Tensor, field: PositionField, fmap: FeatureMap, params: HeadParams
) -> str:
    """Projected-branch attention weights over kept patches, as CSV.

    Rows: keypoint, repeat, patch_row, patch_col, weight. Mirrors the
    per-offset pooling maps used for visual inspection.
    """
    keys = Tensor(sample_image_field(field.pe, fmap.coords))
    attn_dim = params.w_query.value.shape[1]
    with T.no_grad():
        logits = T.matmul(
            T.matmul(queries, params.w_query.tensor),
            T.transpose(T.matmul(keys, params.w_key.tensor)),
        ) * (1.0 / np.sqrt(attn_dim))
        weights = T.softmax_with_bias(logits).data
    lines = ["keypoint,repeat,patch_row,patch_col,weight"]
    for row in range(weights.shape[0]):
        rep, kp = divmod(row, NUM_KEYPOINTS)
        for col in range(weights.shape[1]):
            r, c = fmap.cells[col]
            lines.append(
                f"{KEYPOINT_NAMES[kp]},{rep},{int(r)},{int(c)},{weights[row, col]!r}"
            )
    return "\n".join(lines) + "\n"
