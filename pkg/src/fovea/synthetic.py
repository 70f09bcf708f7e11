"""Procedural stick-figure identities with exact keypoints.

Each identity is a deterministic function of (global seed, id): body
proportions, a head color, and a clothing color. Rendering poses the
articulated skeleton (head disc, torso quad, limb segments) at random
joint angles, scale, and translation, and reports the 19 keypoints
analytically from the posed joints; joints outside the frame get the
(-1, -1) sentinel. Short-term images of an identity share clothing;
long-term images redraw it per image, leaving head color and build as
the only stable cues.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .geometry import KEYPOINT_NAMES, KeypointSet

__all__ = [
    "SHORT_TERM",
    "LONG_TERM",
    "SyntheticIdentity",
    "Camera",
    "Sample",
    "make_identity",
    "sample_pose",
    "sample_camera",
    "render_figure",
    "render_sample",
]

SHORT_TERM = "short"
LONG_TERM = "long"
REGIME_IDS = {SHORT_TERM: 0, LONG_TERM: 1}


@dataclass(frozen=True)
class SyntheticIdentity:
    id: int
    head_scale: float
    torso_w_scale: float
    torso_h_scale: float
    limb_scale: float
    head_hue: float
    clothing_hue: float  # used as-is in short-term, resampled in long-term


@dataclass(frozen=True)
class Camera:
    scale: float
    tx: float
    ty: float


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] floats in [0, 1]
    keypoints: KeypointSet
    label: int
    dataset_id: int  # 0 short-term, 1 long-term


def make_identity(global_seed: int, identity: int) -> SyntheticIdentity:
    rng = np.random.default_rng([global_seed, identity])
    return SyntheticIdentity(
        id=identity,
        head_scale=float(rng.uniform(0.8, 1.25)),
        torso_w_scale=float(rng.uniform(0.8, 1.25)),
        torso_h_scale=float(rng.uniform(0.85, 1.2)),
        limb_scale=float(rng.uniform(0.85, 1.2)),
        head_hue=float(rng.uniform(0.0, 1.0)),
        clothing_hue=float(rng.uniform(0.0, 1.0)),
    )


@dataclass(frozen=True)
class Pose:
    lean: float  # whole-figure rotation, radians
    l_shoulder: float  # arm swing from straight down
    r_shoulder: float
    l_elbow: float  # additional bend
    r_elbow: float
    l_hip: float
    r_hip: float
    l_knee: float
    r_knee: float


def sample_pose(pose_seed) -> Pose:
    rng = np.random.default_rng(pose_seed)
    return Pose(
        lean=float(rng.uniform(-0.15, 0.15)),
        l_shoulder=float(rng.uniform(-0.9, 0.9)),
        r_shoulder=float(rng.uniform(-0.9, 0.9)),
        l_elbow=float(rng.uniform(0.0, 1.3)),
        r_elbow=float(rng.uniform(0.0, 1.3)),
        l_hip=float(rng.uniform(-0.45, 0.45)),
        r_hip=float(rng.uniform(-0.45, 0.45)),
        l_knee=float(rng.uniform(0.0, 0.8)),
        r_knee=float(rng.uniform(0.0, 0.8)),
    )


def sample_camera(camera_seed, canvas: int) -> Camera:
    rng = np.random.default_rng(camera_seed)
    return Camera(
        scale=float(rng.uniform(0.4, 1.0)),
        tx=float(canvas / 2 + rng.uniform(-0.12, 0.12) * canvas),
        ty=float(canvas / 2 + rng.uniform(-0.12, 0.12) * canvas),
    )


def _hue_rgb(hue: float, sat: float = 0.85, val: float = 0.85) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(hue % 1.0, sat, val))


def _rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _skeleton(ident: SyntheticIdentity, pose: Pose) -> dict[str, np.ndarray]:
    """Joint positions in canonical figure coordinates (y grows downward)."""
    tw = 11.0 * ident.torso_w_scale
    th_top, th_bot = -15.0 * ident.torso_h_scale, 19.0 * ident.torso_h_scale
    hr = 8.0 * ident.head_scale
    neck_len = 4.0
    limb = ident.limb_scale

    joints: dict[str, np.ndarray] = {}
    joints["left_shoulder"] = np.array([-tw, th_top])
    joints["right_shoulder"] = np.array([tw, th_top])
    joints["left_hip"] = np.array([-0.72 * tw, th_bot])
    joints["right_hip"] = np.array([0.72 * tw, th_bot])

    head_c = np.array([0.0, th_top - neck_len - hr])
    joints["head_center"] = head_c
    joints["nose"] = head_c + np.array([0.0, 0.18 * hr])
    joints["left_eye"] = head_c + np.array([-0.38 * hr, -0.25 * hr])
    joints["right_eye"] = head_c + np.array([0.38 * hr, -0.25 * hr])
    joints["left_ear"] = head_c + np.array([-0.95 * hr, 0.0])
    joints["right_ear"] = head_c + np.array([0.95 * hr, 0.0])
    joints["left_mouth"] = head_c + np.array([-0.32 * hr, 0.55 * hr])
    joints["right_mouth"] = head_c + np.array([0.32 * hr, 0.55 * hr])

    def limb_chain(root, first_len, first_ang, second_len, second_ang):
        # Angles measured from straight down; positive swings outward.
        a = root + first_len * np.array([np.sin(first_ang), np.cos(first_ang)])
        b = a + second_len * np.array([np.sin(second_ang), np.cos(second_ang)])
        return a, b

    up_arm, forearm = 13.0 * limb, 12.0 * limb
    joints["left_elbow"], joints["left_wrist"] = limb_chain(
        joints["left_shoulder"], up_arm, -abs(pose.l_shoulder), forearm,
        -abs(pose.l_shoulder) - pose.l_elbow,
    )
    joints["right_elbow"], joints["right_wrist"] = limb_chain(
        joints["right_shoulder"], up_arm, abs(pose.r_shoulder), forearm,
        abs(pose.r_shoulder) + pose.r_elbow,
    )
    thigh, shin = 15.0 * limb, 14.0 * limb
    joints["left_knee"], joints["left_ankle"] = limb_chain(
        joints["left_hip"], thigh, pose.l_hip, shin, pose.l_hip - pose.l_knee * 0.5
    )
    joints["right_knee"], joints["right_ankle"] = limb_chain(
        joints["right_hip"], thigh, pose.r_hip, shin, pose.r_hip + pose.r_knee * 0.5
    )
    return joints


def _paint_disc(img, center, radius, color):
    h, w = img.shape[1:]
    ys, xs = np.ogrid[:h, :w]
    mask = (xs + 0.5 - center[0]) ** 2 + (ys + 0.5 - center[1]) ** 2 <= radius**2
    img[:, mask] = color[:, None]


def _paint_segment(img, a, b, width, color):
    h, w = img.shape[1:]
    ys, xs = np.ogrid[:h, :w]
    px = xs + 0.5 - a[0]
    py = ys + 0.5 - a[1]
    dx, dy = b[0] - a[0], b[1] - a[1]
    length2 = dx * dx + dy * dy
    if length2 == 0:
        _paint_disc(img, a, width / 2, color)
        return
    t = np.clip((px * dx + py * dy) / length2, 0.0, 1.0)
    dist2 = (px - t * dx) ** 2 + (py - t * dy) ** 2
    mask = dist2 <= (width / 2) ** 2
    img[:, mask] = color[:, None]


def _paint_quad(img, corners, color):
    h, w = img.shape[1:]
    ys, xs = np.ogrid[:h, :w]
    px = xs + 0.5
    py = ys + 0.5
    mask = np.ones((h, w), dtype=bool)
    n = len(corners)
    for i in range(n):
        ax, ay = corners[i]
        bx, by = corners[(i + 1) % n]
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        mask &= cross >= 0
    img[:, mask] = color[:, None]


def render_figure(
    ident: SyntheticIdentity,
    pose: Pose,
    camera: Camera,
    clothing_hue: float,
    canvas: int,
) -> Sample:
    """Draw the posed figure and report exact keypoint positions."""
    joints = _skeleton(ident, pose)
    rot = _rot(pose.lean)

    def to_image(p: np.ndarray) -> np.ndarray:
        q = rot @ p
        return np.array([q[0] * camera.scale + camera.tx, q[1] * camera.scale + camera.ty])

    img = np.ones((3, canvas, canvas))
    clothing = _hue_rgb(clothing_hue)
    pants = _hue_rgb(clothing_hue + 0.45, sat=0.7, val=0.55)
    skin = _hue_rgb(ident.head_hue, sat=0.45, val=0.95)
    head = _hue_rgb(ident.head_hue)

    s = camera.scale
    limb_w = 4.5 * s
    for side in ("left", "right"):
        _paint_segment(
            img, to_image(joints[f"{side}_hip"]), to_image(joints[f"{side}_knee"]), limb_w, pants
        )
        _paint_segment(
            img, to_image(joints[f"{side}_knee"]), to_image(joints[f"{side}_ankle"]), limb_w, pants
        )
    corners = [
        to_image(joints["left_shoulder"]),
        to_image(joints["right_shoulder"]),
        to_image(joints["right_hip"]),
        to_image(joints["left_hip"]),
    ]
    _paint_quad(img, corners, clothing)
    for side in ("left", "right"):
        _paint_segment(
            img,
            to_image(joints[f"{side}_shoulder"]),
            to_image(joints[f"{side}_elbow"]),
            limb_w,
            clothing,
        )
        _paint_segment(
            img, to_image(joints[f"{side}_elbow"]), to_image(joints[f"{side}_wrist"]), limb_w, skin
        )
    _paint_disc(img, to_image(joints["head_center"]), 8.0 * ident.head_scale * s, head)
    eye = np.array([0.05, 0.05, 0.05])
    for side in ("left", "right"):
        _paint_disc(img, to_image(joints[f"{side}_eye"]), 1.1 * s, eye)

    coords = np.empty((19, 2))
    for i, name in enumerate(KEYPOINT_NAMES):
        p = to_image(joints[name])
        if 0.0 <= p[0] < canvas and 0.0 <= p[1] < canvas:
            coords[i] = p
        else:
            coords[i] = (-1.0, -1.0)
    return Sample(
        image=img,
        keypoints=KeypointSet(coords),
        label=ident.id,
        dataset_id=0,
    )


def render_sample(
    ident: SyntheticIdentity,
    pose_seed,
    camera_seed,
    regime: str,
    canvas: int = 96,
) -> Sample:
    """One image of an identity under the given regime.

    Short-term keeps the identity's clothing color; long-term draws a
    fresh clothing color per image (derived from the pose seed so the
    sample stays a pure function of its arguments).
    """
    if regime not in REGIME_IDS:
        raise ValueError(f"unknown regime {regime!r}")
    pose = sample_pose(pose_seed)
    camera = sample_camera(camera_seed, canvas)
    if regime == SHORT_TERM:
        clothing = ident.clothing_hue
    else:
        clothing = float(np.random.default_rng([2_000_003, *np.atleast_1d(pose_seed)]).uniform())
    sample = render_figure(ident, pose, camera, clothing, canvas)
    sample.dataset_id = REGIME_IDS[regime]
    return sample
