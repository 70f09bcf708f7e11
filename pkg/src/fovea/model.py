"""All learnable state, the image-to-embedding pipeline, and checkpoints.

A checkpoint is a single file: a text manifest (leaf name, shape, byte
offset) followed by the raw little-endian float64 payload, so round
trips are bit-exact and diffable across implementations.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import tensor as T
from .encoder import BackboneConfig, BlockParams, init_block
from .geometry import KeypointSet, build_roi_set
from .head import HeadParams, init_head
from .patches import (
    PatchSet,
    PositionField,
    extract_patches,
    patch_matrix,
    sample_image_field,
    sincos_position_field,
)
from .tensor import ParamLeaf, Tensor

__all__ = [
    "ModelConfig",
    "ModelParams",
    "SampleCache",
    "CheckpointMismatch",
    "init_params",
    "prepare_sample",
    "tokens_from_cache",
    "save_checkpoint",
    "read_manifest",
    "load_checkpoint",
    "apply_checkpoint",
]

NUM_LEVELS = 3  # whole image, torso, face


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 96
    grid: int = 6
    channels: int = 3
    dim: int = 64
    heads: int = 4
    depth: int = 4
    ffn_ratio: int = 4
    n_rep: int = 4
    head_attn_dim: int = 32
    embed_dim: int = 64
    num_datasets: int = 2
    num_classes: int = 32
    roi_padding: float = 0.3
    torso_hips: bool = False

    def __post_init__(self):
        if self.image_size % self.grid:
            raise ValueError("image size must be divisible by the grid")

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            dim=self.dim,
            heads=self.heads,
            depth=self.depth,
            ffn_ratio=self.ffn_ratio,
            grid=self.grid,
        )

    @property
    def base_patch(self) -> int:
        return self.image_size // self.grid

    @property
    def patch_inputs(self) -> int:
        return self.channels * self.base_patch * self.base_patch

    @property
    def max_tokens(self) -> int:
        return NUM_LEVELS * self.grid * self.grid


@dataclass
class ModelParams:
    config: ModelConfig
    projection: ParamLeaf  # [C*ph*pw, D]
    field: PositionField  # fixed sinusoid + learnable level offsets
    mask_token: ParamLeaf  # [D]
    blocks: list[BlockParams]
    final_gain: ParamLeaf
    final_shift: ParamLeaf
    head: HeadParams
    classifier: ParamLeaf  # [num_classes, E]

    def leaves(self) -> list[ParamLeaf]:
        out = [self.projection, self.field.level_offsets, self.mask_token]
        for b in self.blocks:
            out.extend(b.leaves())
        out.extend([self.final_gain, self.final_shift])
        out.extend(self.head.leaves())
        out.append(self.classifier)
        return out

    def zero_grads(self) -> None:
        for leaf in self.leaves():
            leaf.zero_grad()


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    pe = sincos_position_field(cfg.dim, cfg.grid, cfg.grid)
    field = PositionField(
        pe=pe,
        level_offsets=ParamLeaf(
            "level_offsets", rng.standard_normal((NUM_LEVELS, cfg.dim)) * 0.02
        ),
    )
    blocks = [init_block(cfg.backbone, i, rng) for i in range(cfg.depth)]
    return ModelParams(
        config=cfg,
        projection=ParamLeaf(
            "projection",
            rng.standard_normal((cfg.patch_inputs, cfg.dim)) / np.sqrt(cfg.patch_inputs),
        ),
        field=field,
        mask_token=ParamLeaf("mask_token", rng.standard_normal(cfg.dim) * 0.02),
        blocks=blocks,
        final_gain=ParamLeaf("final_gain", np.ones(cfg.dim)),
        final_shift=ParamLeaf("final_shift", np.zeros(cfg.dim)),
        head=init_head(
            cfg.dim, cfg.n_rep, cfg.head_attn_dim, cfg.embed_dim, cfg.num_datasets, rng
        ),
        classifier=ParamLeaf(
            "classifier", rng.standard_normal((cfg.num_classes, cfg.embed_dim))
        ),
    )


# ---------------------------------------------------------------------------
# per-image preprocessing


@dataclass
class SampleCache:
    """Everything about one image that does not depend on parameters."""

    matrix: np.ndarray  # [n_i, C*ph*pw] flattened resized patches
    pe_base: np.ndarray  # [n_i, D] field samples at patch centers
    levels: np.ndarray  # [n_i] source region level per patch
    centers: np.ndarray  # [n_i, 2] normalized patch centers
    cells: np.ndarray  # [n_i, 2] grid cell per patch
    keypoints_norm: np.ndarray  # [19, 2], (-1, -1) sentinel preserved
    patch_set: PatchSet | None = dataclass_field(default=None, repr=False)

    @property
    def token_count(self) -> int:
        return self.matrix.shape[0]


def normalize_keypoints(kps: KeypointSet, image_size: int) -> np.ndarray:
    out = np.full((19, 2), -1.0)
    mask = kps.visible_mask()
    out[mask] = kps.coords[mask] / image_size
    return out


def prepare_sample(
    image: np.ndarray,
    kps: KeypointSet,
    cfg: ModelConfig,
    field: PositionField,
    keep_patch_set: bool = False,
) -> SampleCache:
    rois = build_roi_set(
        kps,
        cfg.image_size,
        cfg.image_size,
        grid=(cfg.grid, cfg.grid),
        padding=cfg.roi_padding,
        include_hips=cfg.torso_hips,
    )
    ps = extract_patches(image, rois)
    centers = np.array([p.center for p in ps.patches])
    return SampleCache(
        matrix=patch_matrix(ps),
        pe_base=sample_image_field(field.pe, centers),
        levels=ps.levels.copy(),
        centers=centers,
        cells=np.array([p.cell for p in ps.patches], dtype=np.intp),
        keypoints_norm=normalize_keypoints(kps, cfg.image_size),
        patch_set=ps if keep_patch_set else None,
    )


def tokens_from_cache(cache: SampleCache, params: ModelParams) -> Tensor:
    """[n_i, D] tokens: projected patches + sinusoid rows + level offsets."""
    projected = T.matmul(Tensor(cache.matrix), params.projection.tensor)
    offsets = T.take_rows(params.field.level_offsets.tensor, cache.levels)
    return T.add(T.add(projected, Tensor(cache.pe_base)), offsets)


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointMismatch(RuntimeError):
    """Checkpoint leaves do not fit the configured model."""

    def __init__(self, leaf: str, message: str):
        super().__init__(f"{leaf}: {message}")
        self.leaf = leaf


_MAGIC = "fovea-checkpoint 1"


def save_checkpoint(path: str, params: ModelParams) -> None:
    leaves = params.leaves()
    manifest = io.StringIO()
    manifest.write(_MAGIC + "\n")
    offset = 0
    for leaf in leaves:
        shape = "x".join(str(d) for d in leaf.value.shape) or "scalar"
        manifest.write(f"{leaf.name} {shape} {offset}\n")
        offset += leaf.value.size * 8
    manifest.write("end\n")
    with open(path, "wb") as fh:
        fh.write(manifest.getvalue().encode("ascii"))
        for leaf in leaves:
            fh.write(np.ascontiguousarray(leaf.value, dtype="<f8").tobytes())


def read_manifest(blob: bytes) -> tuple[list[tuple[str, tuple[int, ...], int]], int]:
    end = blob.index(b"end\n") + len(b"end\n")
    lines = blob[:end].decode("ascii").splitlines()
    if lines[0] != _MAGIC:
        raise ValueError(f"not a checkpoint (header {lines[0]!r})")
    entries = []
    for line in lines[1:-1]:
        name, shape_s, offset_s = line.rsplit(" ", 2)
        shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
        entries.append((name, shape, int(offset_s)))
    return entries, end


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    entries, payload_start = read_manifest(blob)
    out = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape)) if shape else 1
        start = payload_start + offset
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        out[name] = arr.reshape(shape).astype(np.float64)
    return out


def apply_checkpoint(params: ModelParams, loaded: dict[str, np.ndarray]) -> None:
    for leaf in params.leaves():
        if leaf.name not in loaded:
            raise CheckpointMismatch(leaf.name, "missing from checkpoint")
        arr = loaded[leaf.name]
        if arr.shape != leaf.value.shape:
            raise CheckpointMismatch(
                leaf.name, f"checkpoint shape {arr.shape} vs model {leaf.value.shape}"
            )
        leaf.tensor.data[...] = arr
