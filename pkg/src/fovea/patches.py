"""Multi-scale patch extraction, resampling, and token assembly.

Each region of interest contributes a full grid of patches, minus the
cells covered by a higher-priority region, so the union of footprints
tiles the image exactly once. Patches are resized to the base patch
size, projected to tokens, and tagged with position embeddings sampled
from a fixed sinusoidal field at each patch's source location plus a
learnable per-level offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import BBox, ROI, ROISet
from .masking import TokenBatch, TokenRow
from .tensor import ParamLeaf, Tensor, bilinear_sample

__all__ = [
    "Patch",
    "PatchSet",
    "PositionField",
    "PartitionError",
    "sincos_position_field",
    "sample_image_field",
    "extract_patches",
    "resize_bilinear",
    "resize_patch",
    "region_sampled_pe",
    "attach_position_embeddings",
    "patch_matrix",
    "tokenize",
    "tokenize_matrix",
    "assemble_batch",
    "pixel_ownership_counts",
    "layout_csv",
    "layout_ppm",
]


class PartitionError(RuntimeError):
    """The multi-scale patch cover would not tile the image exactly."""


@dataclass(frozen=True)
class Patch:
    """One cell of one region's grid, with its covering pixel crop."""

    pixels: np.ndarray | None  # [C, ph, pw] crop of the source image
    source_level: int
    cell: tuple[int, int]  # (row, col) within the region grid
    footprint: BBox  # image-pixel rectangle, exact partition geometry
    center: tuple[float, float]  # footprint center in normalized image coords


@dataclass
class PatchSet:
    patches: list[Patch]
    levels: np.ndarray  # per-patch source level
    image_w: int
    image_h: int
    base_patch: tuple[int, int]  # (height, width) of a level-0 cell
    pe: Tensor | None = None  # [n, C] rows aligned with patches

    def __len__(self) -> int:
        return len(self.patches)


@dataclass
class PositionField:
    """Fixed sinusoidal position values plus learnable level offsets."""

    pe: np.ndarray  # [C, H, W], deterministic from its shape
    level_offsets: ParamLeaf  # [levels, C]

    @property
    def channels(self) -> int:
        return self.pe.shape[0]


def sincos_position_field(channels: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Factorized 2D sinusoid: half the channels encode row, half column.

    Each half is a sin/cos pair bank over a geometric frequency ladder
    with base 10000. Deterministic in its arguments; regenerating always
    reproduces identical values.
    """
    if channels % 4:
        raise ValueError(f"channel count {channels} must be divisible by 4")
    quarter = channels // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    rows = np.arange(grid_h)[:, None] * omega[None, :]  # [H, quarter]
    cols = np.arange(grid_w)[:, None] * omega[None, :]  # [W, quarter]
    pe = np.empty((channels, grid_h, grid_w))
    pe[0:quarter] = np.sin(rows).T[:, :, None]
    pe[quarter : 2 * quarter] = np.cos(rows).T[:, :, None]
    pe[2 * quarter : 3 * quarter] = np.sin(cols).T[:, None, :]
    pe[3 * quarter :] = np.cos(cols).T[:, None, :]
    return pe


def sample_image_field(field: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Sample a grid field at normalized image coordinates.

    Field nodes are treated as cell centers of a grid covering [0, 1]^2:
    node (i, j) sits at ((j + 0.5) / W, (i + 0.5) / H). Points landing on
    those centers reproduce node values exactly, which is what makes
    native-resolution sampling the identity.
    """
    field = np.asarray(field, dtype=np.float64)
    _, h, w = field.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    px = pts[:, 0] * w - 0.5
    py = pts[:, 1] * h - 0.5
    u = px / (w - 1) if w > 1 else np.zeros_like(px)
    v = py / (h - 1) if h > 1 else np.zeros_like(py)
    return bilinear_sample(field, np.stack([np.clip(u, 0, 1), np.clip(v, 0, 1)], axis=1))


# ---------------------------------------------------------------------------
# patch extraction


def _child_span(rois: tuple[ROI, ...], index: int) -> tuple[int, int, int, int] | None:
    return rois[index + 1].cell_span if index + 1 < len(rois) else None


def _validate_nesting(roi_set: ROISet) -> None:
    rois = roi_set.rois
    first = rois[0]
    if first.level != 0 or first.bbox != BBox(
        0.0, 0.0, float(roi_set.image_w), float(roi_set.image_h)
    ):
        raise PartitionError("level-0 region must cover the whole image")
    for i, child in enumerate(rois[1:], start=0):
        parent = rois[i]
        span = child.cell_span
        if span is None:
            raise PartitionError(f"region level {child.level} lacks a parent cell span")
        r0, r1, c0, c1 = span
        if not (0 <= r0 < r1 <= parent.grid[0] and 0 <= c0 < c1 <= parent.grid[1]):
            raise PartitionError(
                f"region level {child.level} cells ({r0},{c0})..({r1},{c1}) "
                f"fall outside the parent grid {parent.grid}"
            )
        expected = (
            parent.cell_edge_x(c0),
            parent.cell_edge_y(r0),
            parent.cell_edge_x(c1),
            parent.cell_edge_y(r1),
        )
        got = (child.bbox.x1, child.bbox.y1, child.bbox.x2, child.bbox.y2)
        if expected != got:
            raise PartitionError(
                f"region level {child.level} box {got} is not aligned to parent "
                f"cells ({r0},{c0})..({r1},{c1}) at {expected}"
            )


def _covering_slice(lo: float, hi: float, limit: int) -> tuple[int, int]:
    a = max(int(np.floor(lo)), 0)
    b = min(int(np.ceil(hi)), limit)
    return a, max(b, a + 1)


def extract_patches(image: np.ndarray | None, rois: ROISet) -> PatchSet:
    """Grid patches per region, dropping cells owned by a deeper region.

    Because child boxes are snapped to whole parent cells, "intersects the
    child" is an exact integer test on cell indices, and the surviving
    footprints partition the image. Order is deterministic: regions in
    priority order, cells row-major. Pass image=None for layout-only use
    (footprints without pixel crops).
    """
    _validate_nesting(rois)
    if image is not None:
        image = np.asarray(image, dtype=np.float64)
        if image.shape[1] != rois.image_h or image.shape[2] != rois.image_w:
            raise ValueError(
                f"image shape {image.shape} does not match region set "
                f"{rois.image_h}x{rois.image_w}"
            )
    patches: list[Patch] = []
    levels: list[int] = []
    for i, roi in enumerate(rois.rois):
        child = _child_span(rois.rois, i)
        rows, cols = roi.grid
        for r in range(rows):
            for c in range(cols):
                if child is not None and child[0] <= r < child[1] and child[2] <= c < child[3]:
                    continue
                box = BBox(
                    roi.cell_edge_x(c),
                    roi.cell_edge_y(r),
                    roi.cell_edge_x(c + 1),
                    roi.cell_edge_y(r + 1),
                )
                pixels = None
                if image is not None:
                    x0, x1 = _covering_slice(box.x1, box.x2, rois.image_w)
                    y0, y1 = _covering_slice(box.y1, box.y2, rois.image_h)
                    pixels = image[:, y0:y1, x0:x1].copy()
                patches.append(
                    Patch(
                        pixels=pixels,
                        source_level=roi.level,
                        cell=(r, c),
                        footprint=box,
                        center=(
                            (box.x1 + box.x2) / 2.0 / rois.image_w,
                            (box.y1 + box.y2) / 2.0 / rois.image_h,
                        ),
                    )
                )
                levels.append(roi.level)
    return PatchSet(
        patches=patches,
        levels=np.asarray(levels, dtype=np.intp),
        image_w=rois.image_w,
        image_h=rois.image_h,
        base_patch=(rois.image_h // rois.rois[0].grid[0], rois.image_w // rois.rois[0].grid[1]),
    )


# ---------------------------------------------------------------------------
# resampling


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of [C, h, w] with ends-aligned coordinates.

    Matching input/output sizes pass through bit-identically.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be positive")
    arr = np.asarray(arr, dtype=np.float64)
    _, h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ux = np.full(out_w, 0.5) if out_w == 1 else np.arange(out_w) / (out_w - 1)
    uy = np.full(out_h, 0.5) if out_h == 1 else np.arange(out_h) / (out_h - 1)
    gx, gy = np.meshgrid(ux, uy)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    sampled = bilinear_sample(arr, pts)  # [out_h*out_w, C]
    return sampled.T.reshape(arr.shape[0], out_h, out_w)


def resize_patch(p: Patch, target_h: int, target_w: int) -> np.ndarray:
    if p.pixels is None:
        raise ValueError("patch has no pixel crop (layout-only extraction)")
    return resize_bilinear(p.pixels, target_h, target_w)


# ---------------------------------------------------------------------------
# position embeddings


def region_sampled_pe(
    field: PositionField, roi: ROI, image_w: int, image_h: int
) -> Tensor:
    """Position rows for every cell of one region's grid, row-major.

    Samples the fixed field at patch-center image locations and adds the
    region level's learnable offset vector.
    """
    rows, cols = roi.grid
    cx = np.array([roi.cell_edge_x(c) + roi.patch_size[0] / 2.0 for c in range(cols)])
    cy = np.array([roi.cell_edge_y(r) + roi.patch_size[1] / 2.0 for r in range(rows)])
    gx, gy = np.meshgrid(cx / image_w, cy / image_h)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    base = sample_image_field(field.pe, pts)  # [rows*cols, C]
    offset = T.select(field.level_offsets.tensor, roi.level)
    return T.add(Tensor(base), offset)


def attach_position_embeddings(ps: PatchSet, rois: ROISet, field: PositionField) -> PatchSet:
    """Fill ps.pe with rows matching the extraction order exactly."""
    blocks = []
    for i, roi in enumerate(rois.rois):
        pe_all = region_sampled_pe(field, roi, rois.image_w, rois.image_h)
        child = _child_span(rois.rois, i)
        rows, cols = roi.grid
        if child is None:
            kept = np.arange(rows * cols)
        else:
            r0, r1, c0, c1 = child
            grid_r, grid_c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
            inside = (grid_r >= r0) & (grid_r < r1) & (grid_c >= c0) & (grid_c < c1)
            kept = np.flatnonzero(~inside.ravel())
        blocks.append(T.take_rows(pe_all, kept))
    pe = T.concat(blocks, axis=0) if blocks else Tensor(np.zeros((0, field.channels)))
    if pe.shape[0] != len(ps):
        raise PartitionError(
            f"position rows {pe.shape[0]} do not match patch count {len(ps)}"
        )
    ps.pe = pe
    return ps


# ---------------------------------------------------------------------------
# tokenization


def patch_matrix(ps: PatchSet) -> np.ndarray:
    """[n, C*ph*pw] flattened patches, all resized to the base patch size."""
    th, tw = ps.base_patch
    rows = [resize_patch(p, th, tw).ravel() for p in ps.patches]
    return np.stack(rows, axis=0) if rows else np.zeros((0, 0))


def tokenize_matrix(matrix: np.ndarray, pe: Tensor, projection: ParamLeaf) -> Tensor:
    """Project flattened patches and add their position rows."""
    if matrix.shape[1] != projection.value.shape[0]:
        raise T.ShapeError(
            f"patch width {matrix.shape[1]} does not match projection input "
            f"{projection.value.shape[0]}"
        )
    return T.add(T.matmul(Tensor(matrix), projection.tensor), pe)


def tokenize(ps: PatchSet, projection: ParamLeaf) -> Tensor:
    """[n, D] tokens: flattened resized patches through a linear map + PE."""
    if ps.pe is None:
        raise ValueError("attach position embeddings before tokenizing")
    return tokenize_matrix(patch_matrix(ps), ps.pe, projection)


def assemble_batch(
    items: list,
    mask_token: ParamLeaf,
    mode: str,
    target_len: int | None = None,
) -> TokenBatch:
    """Batch per-image sequences into the rectangular masked layout.

    infer mode takes raw token tensors [n_i, D]; every image keeps all
    its tokens and shorter ones are padded to the batch maximum, the pad
    aggregated as a repeat count on the single mask slot. train mode
    takes TokenRow items already masked to a common kept length
    (target_len); images shorter than it are padded the same way.
    """
    if not items:
        raise ValueError("cannot assemble an empty batch")
    if mode == "infer":
        rows = [
            TokenRow(
                tokens=t,
                kept_indices=np.arange(t.shape[0]),
                total_count=t.shape[0],
                masked_count=0,
            )
            for t in items
        ]
        length = max(r.tokens.shape[0] for r in rows)
    elif mode == "train":
        rows = list(items)
        if target_len is None:
            raise ValueError("train mode needs the common kept length")
        length = target_len
        over = [r for r in rows if r.tokens.shape[0] > length]
        if over:
            raise ValueError(
                f"row with {over[0].tokens.shape[0]} kept tokens exceeds target {length}"
            )
    else:
        raise ValueError(f"unknown mode {mode!r}")

    stacked, valid, mask_n, total, kept = [], [], [], [], []
    for row in rows:
        v = row.tokens.shape[0]
        pad = length + 1 - v  # inert filler plus the final mask slot
        seq = T.concat([row.tokens, T.repeat_rows(mask_token.tensor, pad)], axis=0)
        stacked.append(seq)
        valid.append(v)
        mask_n.append(row.masked_count + (length - v))
        total.append(row.total_count)
        kept.append(row.kept_indices)
    return TokenBatch(
        tokens=T.stack(stacked, axis=0),
        valid_counts=np.asarray(valid, dtype=np.intp),
        mask_counts=np.asarray(mask_n, dtype=np.intp),
        total_counts=np.asarray(total, dtype=np.intp),
        kept_indices=kept,
    )


# ---------------------------------------------------------------------------
# verification and export


def pixel_ownership_counts(ps: PatchSet) -> np.ndarray:
    """[H, W] count of footprints owning each pixel center.

    A pixel (row i, col j) has center (j + 0.5, i + 0.5) and is owned by
    footprints containing it half-open: x1 <= j + 0.5 < x2. An exact
    partition yields all ones.
    """
    counts = np.zeros((ps.image_h, ps.image_w), dtype=np.int64)
    for p in ps.patches:
        b = p.footprint
        x0 = int(np.ceil(b.x1 - 0.5))
        x1 = int(np.ceil(b.x2 - 0.5))
        y0 = int(np.ceil(b.y1 - 0.5))
        y1 = int(np.ceil(b.y2 - 0.5))
        counts[max(y0, 0) : y1, max(x0, 0) : x1] += 1
    return counts


def layout_csv(ps: PatchSet) -> str:
    lines = ["level,row,col,x1,y1,x2,y2"]
    for p in ps.patches:
        b = p.footprint
        lines.append(
            f"{p.source_level},{p.cell[0]},{p.cell[1]},"
            f"{b.x1!r},{b.y1!r},{b.x2!r},{b.y2!r}"
        )
    return "\n".join(lines) + "\n"


_LEVEL_COLORS = ((200, 200, 200), (80, 180, 80), (200, 80, 80), (80, 80, 200))


def layout_ppm(ps: PatchSet) -> bytes:
    """Binary PPM with one flat color per region level."""
    img = np.zeros((ps.image_h, ps.image_w, 3), dtype=np.uint8)
    for p in ps.patches:
        b = p.footprint
        x0 = max(int(np.ceil(b.x1 - 0.5)), 0)
        x1 = int(np.ceil(b.x2 - 0.5))
        y0 = max(int(np.ceil(b.y1 - 0.5)), 0)
        y1 = int(np.ceil(b.y2 - 0.5))
        img[y0:y1, x0:x1] = _LEVEL_COLORS[p.source_level % len(_LEVEL_COLORS)]
    header = f"P6\n{ps.image_w} {ps.image_h}\n255\n".encode()
    return header + img.tobytes()
