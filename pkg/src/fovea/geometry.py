"""Keypoints to nested, grid-snapped regions of interest.

A 19-point body skeleton (with a (-1, -1) sentinel for invisible joints)
is reduced to an ordered box hierarchy: whole image, upper torso, face.
Each box is snapped outward onto the enclosing region's patch grid and
clipped inside it, so higher-priority regions always cover a whole number
of enclosing cells. That integer cell bookkeeping is what later makes the
multi-scale patch cover an exact partition of the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "KEYPOINT_NAMES",
    "FACE_INDICES",
    "SHOULDER_INDICES",
    "HIP_INDICES",
    "INVISIBLE",
    "Keypoint",
    "KeypointSet",
    "BBox",
    "ROI",
    "ROISet",
    "KeypointParseError",
    "visible_subset",
    "keypoint_bbox",
    "snap_bbox",
    "build_roi_set",
    "torso_indices",
    "parse_keypoint_records",
    "format_keypoint_record",
]

KEYPOINT_NAMES = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_mouth",
    "right_mouth",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)

FACE_INDICES = tuple(range(7))  # nose, eyes, ears, mouth corners
SHOULDER_INDICES = (7, 8)
HIP_INDICES = (13, 14)

INVISIBLE = -1.0


def torso_indices(include_hips: bool = False) -> tuple[int, ...]:
    """Upper-torso keypoint index set: face plus shoulders (hips optional)."""
    idx = FACE_INDICES + SHOULDER_INDICES
    return idx + HIP_INDICES if include_hips else idx


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float

    @property
    def visible(self) -> bool:
        return self.x != INVISIBLE and self.y != INVISIBLE


class KeypointSet:
    """The 19 named body keypoints of one image, in canonical order."""

    __slots__ = ("coords",)

    def __init__(self, coords):
        arr = np.asarray(coords, dtype=np.float64)
        if arr.shape != (19, 2):
            raise ValueError(f"expected 19 (x, y) pairs, got shape {arr.shape}")
        self.coords = arr

    @classmethod
    def all_invisible(cls) -> "KeypointSet":
        return cls(np.full((19, 2), INVISIBLE))

    def point(self, i: int) -> Keypoint:
        return Keypoint(float(self.coords[i, 0]), float(self.coords[i, 1]))

    def visible_mask(self) -> np.ndarray:
        return (self.coords[:, 0] != INVISIBLE) & (self.coords[:, 1] != INVISIBLE)

    def __len__(self) -> int:
        return 19


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"inverted box {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1


@dataclass(frozen=True)
class ROI:
    """One region with its own patch grid.

    level: 0 whole image, 1 torso, 2 face. order equals level and decides
    patch priority. cell_span locates the box on the parent region's grid
    as half-open (row0, row1, col0, col1); None for level 0. bbox floats
    are always derived from the parent chain through cell_edge so shared
    boundaries are bit-identical across levels.
    """

    level: int
    bbox: BBox
    grid: tuple[int, int]  # (rows, cols)
    order: int
    cell_span: tuple[int, int, int, int] | None

    @property
    def patch_count(self) -> int:
        return self.grid[0] * self.grid[1]

    def cell_edge_x(self, k: int) -> float:
        return self.bbox.x1 + (self.bbox.x2 - self.bbox.x1) * (k / self.grid[1])

    def cell_edge_y(self, k: int) -> float:
        return self.bbox.y1 + (self.bbox.y2 - self.bbox.y1) * (k / self.grid[0])

    @property
    def patch_size(self) -> tuple[float, float]:
        """(width, height) of one grid cell."""
        return (
            (self.bbox.x2 - self.bbox.x1) / self.grid[1],
            (self.bbox.y2 - self.bbox.y1) / self.grid[0],
        )


@dataclass(frozen=True)
class ROISet:
    rois: tuple[ROI, ...]
    image_w: int
    image_h: int

    def __iter__(self):
        return iter(self.rois)

    def __len__(self):
        return len(self.rois)


def visible_subset(kps: KeypointSet, indices) -> list[tuple[float, float]]:
    """Visible keypoints among `indices`, preserving canonical order."""
    out = []
    for i in indices:
        x, y = kps.coords[i]
        if x != INVISIBLE and y != INVISIBLE:
            out.append((float(x), float(y)))
    return out


def keypoint_bbox(valid, padding: float) -> BBox | None:
    """Square box around keypoints: midrange center, max-distance radius.

    Half-size is d * (1 + padding) where d is the largest Euclidean
    distance from the center to any keypoint. Returns None for an empty
    list, signalling the region is absent.
    """
    if padding < 0:
        raise ValueError("padding factor must be >= 0")
    pts = np.asarray(valid, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        return None
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    cx, cy = (lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0
    d = float(np.sqrt(((pts - (cx, cy)) ** 2).sum(axis=1)).max())
    s = d * (1.0 + padding)
    return BBox(cx - s, cy - s, cx + s, cy + s)


def snap_bbox(b: BBox, patch_w: float, patch_h: float) -> BBox:
    """Grow a box outward to the nearest patch-grid lines (origin 0)."""
    if patch_w <= 0 or patch_h <= 0:
        raise ValueError("patch size must be positive")
    return BBox(
        np.floor(b.x1 / patch_w) * patch_w,
        np.floor(b.y1 / patch_h) * patch_h,
        np.ceil(b.x2 / patch_w) * patch_w,
        np.ceil(b.y2 / patch_h) * patch_h,
    )


def _span_on_parent(parent: ROI, raw: BBox) -> tuple[int, int, int, int] | None:
    """Snap a raw box to the parent grid and clip inside it.

    Returns half-open (row0, row1, col0, col1) in parent cells, or None if
    the box lies outside the parent. A box that snaps to zero cells (a
    degenerate point, possibly on a grid line) is widened to the single
    cell containing its center.
    """
    rows, cols = parent.grid
    pw, ph = parent.patch_size
    c0 = int(np.floor((raw.x1 - parent.bbox.x1) / pw))
    c1 = int(np.ceil((raw.x2 - parent.bbox.x1) / pw))
    r0 = int(np.floor((raw.y1 - parent.bbox.y1) / ph))
    r1 = int(np.ceil((raw.y2 - parent.bbox.y1) / ph))
    c0, c1 = max(c0, 0), min(c1, cols)
    r0, r1 = max(r0, 0), min(r1, rows)

    if c1 <= c0:
        ci = int(np.floor(((raw.x1 + raw.x2) / 2.0 - parent.bbox.x1) / pw))
        if ci < 0 or ci > cols:
            return None
        c0 = min(ci, cols - 1)
        c1 = c0 + 1
    if r1 <= r0:
        ri = int(np.floor(((raw.y1 + raw.y2) / 2.0 - parent.bbox.y1) / ph))
        if ri < 0 or ri > rows:
            return None
        r0 = min(ri, rows - 1)
        r1 = r0 + 1
    return (r0, r1, c0, c1)


def build_roi_set(
    kps: KeypointSet,
    image_w: int,
    image_h: int,
    grid: tuple[int, int] = (12, 12),
    padding: float = 0.3,
    include_hips: bool = False,
) -> ROISet:
    """Whole image, torso, face regions with nested grid-snapped boxes.

    The whole image always has grid (rows, cols); image dimensions must be
    divisible by it. Torso and face boxes come from their visible keypoint
    subsets, snap outward onto the enclosing region's grid, and are
    clipped inside it. A region with no visible keypoints is omitted and
    the hierarchy degrades to fewer levels.
    """
    rows, cols = grid
    if image_w % cols or image_h % rows:
        raise ValueError(
            f"image {image_w}x{image_h} not divisible by level-0 grid {rows}x{cols}"
        )
    whole = ROI(
        level=0,
        bbox=BBox(0.0, 0.0, float(image_w), float(image_h)),
        grid=grid,
        order=0,
        cell_span=None,
    )
    rois = [whole]
    parent = whole
    level_subsets = (
        (1, torso_indices(include_hips)),
        (2, FACE_INDICES),
    )
    for level, indices in level_subsets:
        pts = visible_subset(kps, indices)
        if not pts:
            continue
        raw = keypoint_bbox(pts, padding)
        span = _span_on_parent(parent, raw)
        if span is None:
            continue
        r0, r1, c0, c1 = span
        bbox = BBox(
            parent.cell_edge_x(c0),
            parent.cell_edge_y(r0),
            parent.cell_edge_x(c1),
            parent.cell_edge_y(r1),
        )
        roi = ROI(level=level, bbox=bbox, grid=grid, order=level, cell_span=span)
        rois.append(roi)
        parent = roi
    return ROISet(rois=tuple(rois), image_w=image_w, image_h=image_h)


# ---------------------------------------------------------------------------
# plain-text keypoint records


class KeypointParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def format_keypoint_record(image_id: str, kps: KeypointSet) -> str:
    pairs = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in kps.coords)
    return f"{image_id} {pairs}"


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def parse_keypoint_records(text: str) -> list[tuple[str, KeypointSet]]:
    """One record per line: image id then 19 x,y pairs (-1,-1 invisible)."""
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 20:
            raise KeypointParseError(
                line_no, f"expected image id + 19 pairs, got {len(fields)} fields"
            )
        coords = []
        for pair in fields[1:]:
            parts = pair.split(",")
            if len(parts) != 2:
                raise KeypointParseError(line_no, f"malformed pair {pair!r}")
            try:
                coords.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise KeypointParseError(line_no, f"non-numeric pair {pair!r}") from None
        records.append((fields[0], KeypointSet(coords)))
    return records
