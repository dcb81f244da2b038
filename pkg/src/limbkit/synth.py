"""Synthetic articulated-puppet scenes with exact ground truth.

A puppet is a tree of capsule limbs animated by per-joint angle curves.
Rendering is analytic (signed-distance coverage, 1 px anti-aliasing band), so
silhouettes, per-pixel limb labels, joint positions, poses, and feature
trajectories are all known exactly and serve as oracles for the learning
pipeline.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .imaging import lab_to_rgb, rgb_to_lab
from .tracking import TrajectorySet


def rot(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass
class LimbSpec:
    name: str
    length: float
    width: float
    color: Tuple[int, int, int]
    shape: str = "capsule"            # "capsule" | "rect"
    texture: Optional[str] = None     # None | "checker" | "stripes" | "speckle"
    texture_amp: float = 0.0
    texture_period: float = 10.0
    texture_seed: int = 0
    head_color: Optional[Tuple[int, int, int]] = None
    head_start: float = 0.0           # body-frame x beyond which head_color applies


@dataclass
class PuppetSpec:
    limbs: List[LimbSpec]
    parents: List[int]                     # -1 for the root
    joint_in_parent: List[Optional[Tuple[float, float]]]
    joint_in_child: List[Optional[Tuple[float, float]]]
    root_center: Tuple[float, float] = (160.0, 128.0)
    root_angle: float = -math.pi / 2.0     # torso axis points up
    frame_size: Tuple[int, int] = (320, 240)   # (W, H)
    background: str = "plain"              # "plain" | "textured" | "clutter"
    bg_color: Tuple[int, int, int] = (96, 96, 104)
    bg_seed: int = 0
    noise_sigma: float = 0.0

    def __post_init__(self):
        for limb in self.limbs:
            if min(limb.length, limb.width) < 8:
                raise ValueError("limb sizes must be >= 8 px")
        order = self.parents
        if order[0] != -1 or any(order[i] >= i for i in range(1, len(order))):
            raise ValueError("parents must be a topologically ordered tree")

    @property
    def n_limbs(self) -> int:
        return len(self.limbs)

    def adjacency(self) -> set:
        return {(min(p, i), max(p, i)) for i, p in enumerate(self.parents) if p >= 0}


@dataclass
class MotionScript:
    rel_angles: np.ndarray    # (n_limbs, n_frames); row 0 = root angle offset
    root_path: np.ndarray     # (n_frames, 2) translation added to root_center

    @property
    def n_frames(self) -> int:
        return self.rel_angles.shape[1]


@dataclass
class GroundTruth:
    labels: List[np.ndarray]          # int maps, -1 = background
    poses: np.ndarray                 # (n_frames, n_limbs, 3): cx, cy, angle
    joints: np.ndarray                # (n_frames, n_limbs, 2); row i = joint to parent (NaN for root)

    @property
    def silhouettes(self) -> List[np.ndarray]:
        return [lab >= 0 for lab in self.labels]


# ---------------------------------------------------------------------------
# kinematics

def forward_kinematics(spec: PuppetSpec, script: MotionScript) -> Tuple[np.ndarray, np.ndarray]:
    """Per-frame limb poses and joint world positions."""
    n_l, n_f = spec.n_limbs, script.n_frames
    poses = np.empty((n_f, n_l, 3))
    joints = np.full((n_f, n_l, 2), np.nan)
    for t in range(n_f):
        for i in range(n_l):
            if spec.parents[i] < 0:
                angle = spec.root_angle + script.rel_angles[0, t]
                center = np.asarray(spec.root_center) + script.root_path[t]
            else:
                p = spec.parents[i]
                angle = poses[t, p, 2] + script.rel_angles[i, t]
                jw = poses[t, p, :2] + rot(poses[t, p, 2]) @ np.asarray(spec.joint_in_parent[i])
                center = jw - rot(angle) @ np.asarray(spec.joint_in_child[i])
                joints[t, i] = jw
            poses[t, i] = (center[0], center[1], angle)
    return poses, joints


def _limb_sdf(limb: LimbSpec, bx: np.ndarray, by: np.ndarray) -> np.ndarray:
    if limb.shape == "rect":
        qx = np.abs(bx) - limb.length / 2.0
        qy = np.abs(by) - limb.width / 2.0
        outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
        inside = np.minimum(np.maximum(qx, qy), 0.0)
        return outside + inside
    rho = limb.width / 2.0
    a = max(limb.length / 2.0 - rho, 0.0)
    qx = np.maximum(np.abs(bx) - a, 0.0)
    return np.hypot(qx, by) - rho


def limb_boundary(limb: LimbSpec, n_points: int = 240) -> np.ndarray:
    """Body-frame boundary polyline, closed, (n_points, 2)."""
    if limb.shape == "rect":
        hx, hy = limb.length / 2.0, limb.width / 2.0
        corners = np.array([(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy), (-hx, -hy)])
        segs = []
        per_side = max(n_points // 4, 2)
        for k in range(4):
            ts = np.linspace(0, 1, per_side, endpoint=False)[:, None]
            segs.append(corners[k] + ts * (corners[k + 1] - corners[k]))
        return np.concatenate(segs)
    rho = limb.width / 2.0
    a = max(limb.length / 2.0 - rho, 0.0)
    straight = 2 * a
    arc = math.pi * rho
    total = 2 * straight + 2 * arc
    ts = np.linspace(0.0, total, n_points, endpoint=False)
    pts = np.empty((n_points, 2))
    for i, s in enumerate(ts):
        if s < straight:
            pts[i] = (-a + s, -rho)
        elif s < straight + arc:
            ang = -math.pi / 2.0 + (s - straight) / rho
            pts[i] = (a + rho * math.cos(ang), rho * math.sin(ang))
        elif s < 2 * straight + arc:
            pts[i] = (a - (s - straight - arc), rho)
        else:
            ang = math.pi / 2.0 + (s - 2 * straight - arc) / rho
            pts[i] = (-a + rho * math.cos(ang), rho * math.sin(ang))
    return pts


def _speckle(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    h = (ix.astype(np.int64) * 73856093) ^ (iy.astype(np.int64) * 19349663) ^ (seed * 83492791)
    h = (h ^ (h >> 13)) * 1274126177
    return ((h & 0x7FFFFFFF) / float(0x7FFFFFFF)) * 2.0 - 1.0


def _texture_value(limb: LimbSpec, bx: np.ndarray, by: np.ndarray) -> np.ndarray:
    if limb.texture is None or limb.texture_amp == 0.0:
        return np.zeros_like(bx)
    p = limb.texture_period
    if limb.texture == "checker":
        return limb.texture_amp * np.sign(np.sin(2 * math.pi * bx / p) * np.sin(2 * math.pi * by / p))
    if limb.texture == "stripes":
        return limb.texture_amp * np.sin(2 * math.pi * bx / p)
    if limb.texture == "speckle":
        cell = max(limb.texture_period / 3.0, 1.0)
        return limb.texture_amp * _speckle(np.floor(bx / cell).astype(np.int64),
                                           np.floor(by / cell).astype(np.int64),
                                           limb.texture_seed)
    raise ValueError(f"unknown texture {limb.texture!r}")


def _render_background(spec: PuppetSpec) -> np.ndarray:
    w, h = spec.frame_size
    img = np.empty((h, w, 3), dtype=np.float64)
    img[...] = spec.bg_color
    if spec.background == "plain":
        return img
    rng = np.random.default_rng(spec.bg_seed)
    if spec.background == "textured":
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        wave = 18.0 * np.sin(2 * math.pi * xx / 23.0 + 1.3) * np.cos(2 * math.pi * yy / 31.0)
        img += wave[..., None]
        return np.clip(img, 0, 255)
    if spec.background == "clutter":
        for _ in range(18):
            cx, cy = rng.uniform(0, w), rng.uniform(0, h)
            sx, sy = rng.uniform(8, 60, size=2)
            ang = rng.uniform(0, math.pi)
            color = rng.uniform(30, 225, size=3)
            yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
            dx, dy = xx - cx, yy - cy
            rx = dx * math.cos(ang) + dy * math.sin(ang)
            ry = -dx * math.sin(ang) + dy * math.cos(ang)
            if rng.random() < 0.5:
                inside = (np.abs(rx) < sx / 2) & (np.abs(ry) < sy / 2)
            else:
                inside = (rx / (sx / 2)) ** 2 + (ry / (sy / 2)) ** 2 < 1.0
            img[inside] = color
        return img
    raise ValueError(f"unknown background {spec.background!r}")


def _render_frame(spec: PuppetSpec, poses_t: np.ndarray, background: np.ndarray,
                  rng: Optional[np.random.Generator]) -> Tuple[np.ndarray, np.ndarray]:
    w, h = spec.frame_size
    img = background.copy()
    label = np.full((h, w), -1, dtype=np.int64)
    for i, limb in enumerate(spec.limbs):
        cx, cy, angle = poses_t[i]
        reach = limb.length / 2.0 + limb.width / 2.0 + 2.0
        x0, x1 = int(max(0, cx - reach)), int(min(w, cx + reach + 1))
        y0, y1 = int(max(0, cy - reach)), int(min(h, cy + reach + 1))
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
        dx, dy = xx - cx, yy - cy
        c, s = math.cos(angle), math.sin(angle)
        bx = dx * c + dy * s
        by = -dx * s + dy * c
        sdf = _limb_sdf(limb, bx, by)
        alpha = np.clip(0.5 - sdf, 0.0, 1.0)
        if not (alpha > 0).any():
            continue
        color = np.empty(bx.shape + (3,), dtype=np.float64)
        color[...] = limb.color
        if limb.head_color is not None:
            color[bx > limb.head_start] = limb.head_color
        color += _texture_value(limb, bx, by)[..., None]
        color = np.clip(color, 0, 255)
        region = img[y0:y1, x0:x1]
        img[y0:y1, x0:x1] = region * (1 - alpha[..., None]) + color * alpha[..., None]
        label[y0:y1, x0:x1][alpha >= 0.5] = i
    if rng is not None and spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8), label


def _check_bounds(spec: PuppetSpec, poses: np.ndarray) -> None:
    w, h = spec.frame_size
    for t in range(poses.shape[0]):
        for i, limb in enumerate(spec.limbs):
            cx, cy, angle = poses[t, i]
            r = rot(angle)
            hx, hy = limb.length / 2.0, limb.width / 2.0
            for bx, by in ((hx, hy), (hx, -hy), (-hx, hy), (-hx, -hy)):
                p = np.array([cx, cy]) + r @ np.array([bx, by])
                if not (0 <= p[0] < w and 0 <= p[1] < h):
                    raise ValueError(f"script out of bounds (limb {limb.name}, frame {t})")


def generate_scene(spec: PuppetSpec, script: MotionScript, seed: int = 0
                   ) -> Tuple[List[np.ndarray], GroundTruth]:
    """Deterministic render of the scripted puppet plus complete ground truth."""
    if script.n_frames < 3:
        raise ValueError("script must cover at least 3 frames")
    poses, joints = forward_kinematics(spec, script)
    _check_bounds(spec, poses)
    background = _render_background(spec)
    frames, labels = [], []
    for t in range(script.n_frames):
        rng = np.random.default_rng((seed, t)) if spec.noise_sigma > 0 else None
        frame, label = _render_frame(spec, poses[t], background, rng)
        frames.append(frame)
        labels.append(label)
    return frames, GroundTruth(labels=labels, poses=poses, joints=joints)


def perturb(frames: Sequence[np.ndarray], kind: str, magnitude,
            seed: int = 0, labels: Optional[Sequence[np.ndarray]] = None) -> List[np.ndarray]:
    """Noise, global Lab cast, or background replacement; ground truth untouched."""
    out = []
    if kind == "noise":
        if magnitude == 0:
            return [f.copy() for f in frames]
        for t, f in enumerate(frames):
            rng = np.random.default_rng((seed, t))
            noisy = f.astype(np.float64) + rng.normal(0.0, magnitude, f.shape)
            out.append(np.clip(np.round(noisy), 0, 255).astype(np.uint8))
        return out
    if kind == "cast":
        da, db = magnitude
        if da == 0 and db == 0:
            return [f.copy() for f in frames]
        for f in frames:
            lab = rgb_to_lab(f)
            lab[..., 1] += da
            lab[..., 2] += db
            out.append(lab_to_rgb(lab))
        return out
    if kind == "background-swap":
        if labels is None:
            raise ValueError("background-swap requires label maps")
        rng = np.random.default_rng(seed)
        for f, lab in zip(frames, labels):
            new = f.copy()
            color = rng.integers(40, 216, size=3, dtype=np.uint8)
            new[lab < 0] = color
            out.append(new)
        return out
    raise ValueError(f"unknown perturbation {kind!r}")


# ---------------------------------------------------------------------------
# trajectory injection (tracker bypass)

def ground_truth_trajectories(spec: PuppetSpec, gt: GroundTruth, t_star: int,
                              per_limb: int = 40, jitter: float = 0.0, seed: int = 0
                              ) -> Tuple[TrajectorySet, np.ndarray]:
    """Analytic rigid-motion trajectories sampled on each limb at t_star.

    Returns (set, limb_labels).  Points follow the limb's exact rigid motion,
    optionally with per-frame Gaussian jitter (cloth-like noise).
    """
    rng = np.random.default_rng(seed)
    n_f = gt.poses.shape[0]
    all_pos, labels = [], []
    for i, limb in enumerate(spec.limbs):
        cx, cy, angle = gt.poses[t_star, i]
        ys, xs = np.nonzero(gt.labels[t_star] == i)
        if len(xs) == 0:
            continue
        sel = np.linspace(0, len(xs) - 1, min(per_limb, len(xs))).astype(np.int64)
        pts = np.stack([xs[sel], ys[sel]], axis=1).astype(np.float64)
        body = (pts - (cx, cy)) @ rot(angle)   # R(-a) @ v == v @ R(a)
        pos = np.empty((len(pts), n_f, 2))
        for t in range(n_f):
            tcx, tcy, tangle = gt.poses[t, i]
            pos[:, t] = body @ rot(tangle).T + (tcx, tcy)
        if jitter > 0:
            pos += rng.normal(0.0, jitter, pos.shape)
        all_pos.append(pos)
        labels.extend([i] * len(pts))
    positions = np.concatenate(all_pos, axis=0)
    valid = np.ones(positions.shape[:2], dtype=bool)
    return TrajectorySet(positions=positions, valid=valid, t_star=t_star), np.array(labels)


# ---------------------------------------------------------------------------
# standard subjects, scripts, benchmark scenes

TORSO_TEXTURE = dict(texture="checker", texture_amp=42.0, texture_period=11.0)
SKIN = (205, 172, 146)


def equal_luminance_color(hue: float, target_y: float = 110.0, sat: float = 0.65
                          ) -> Tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb(hue % 1.0, sat, 0.8)
    y = 0.299 * r + 0.587 * g + 0.114 * b
    scale = target_y / (255.0 * y)
    return tuple(int(round(min(255 * c * scale, 255))) for c in (r, g, b))


def subject_spec(subject: int, background: str = "plain", frame_size=(320, 240),
                 noise_sigma: float = 0.0) -> PuppetSpec:
    """The standard 5-limb puppet; torso texture fixed, attire varies per subject.

    Shirt and arm hues rotate with the subject id at matched luminance, so
    Gabor structure persists across subjects while colors do not (except the
    skin-toned head zone).
    """
    shirt = equal_luminance_color(0.03 + 0.17 * subject)
    arm = equal_luminance_color(0.52 + 0.13 * subject)
    fore = equal_luminance_color(0.31 + 0.11 * subject)
    torso = LimbSpec("torso", 124, 58, shirt, head_color=SKIN, head_start=30.0,
                     **TORSO_TEXTURE)
    speck = dict(texture="speckle", texture_amp=11.0, texture_period=9.0,
                 texture_seed=1000 + subject)
    limbs = [
        torso,
        LimbSpec("upper_arm_l", 54, 17, arm, **speck),
        LimbSpec("upper_arm_r", 54, 17, arm, **speck),
        LimbSpec("forearm_l", 50, 14, fore, **speck),
        LimbSpec("forearm_r", 50, 14, fore, **speck),
    ]
    return PuppetSpec(
        limbs=limbs,
        parents=[-1, 0, 0, 1, 2],
        joint_in_parent=[None, (24.0, -33.0), (24.0, 33.0), (21.0, 0.0), (21.0, 0.0)],
        joint_in_child=[None, (-21.0, 0.0), (-21.0, 0.0), (-19.0, 0.0), (-19.0, 0.0)],
        frame_size=frame_size,
        background=background,
        bg_seed=200 + subject,
        noise_sigma=noise_sigma,
    )


def random_motion_script(n_limbs: int, n_frames: int, seed: int,
                         min_sweep_deg: float = 40.0) -> MotionScript:
    """Smooth sinusoid joint curves, each joint sweeping at least min_sweep_deg."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, n_frames)
    rel = np.zeros((n_limbs, n_frames))
    rel[0] = np.deg2rad(4.0) * np.sin(2 * math.pi * (0.5 * t + rng.random()))
    min_sweep = math.radians(min_sweep_deg)
    for i in range(1, n_limbs):
        sweep = 0.0
        tries = 0
        while sweep < min_sweep:
            amp = math.radians(rng.uniform(25.0, 40.0)) * (1.0 + 0.2 * tries)
            freq = rng.uniform(0.7, 1.3)
            phase = rng.uniform(0, 2 * math.pi)
            if i in (1, 2):
                sign = -1.0 if i == 1 else 1.0
                base = sign * math.radians(rng.uniform(130.0, 155.0))
            else:
                sign = 1.0 if i == 3 else -1.0
                base = sign * math.radians(rng.uniform(25.0, 45.0))
            curve = base + amp * np.sin(2 * math.pi * freq * t + phase)
            sweep = curve.max() - curve.min()
            tries += 1
        rel[i] = curve
    path = np.stack([6.0 * np.sin(2 * math.pi * (t + rng.random())),
                     4.0 * np.sin(2 * math.pi * (1.3 * t + rng.random()))], axis=1)
    return MotionScript(rel_angles=rel, root_path=path)


def static_script(spec: PuppetSpec, rel_angles: Sequence[float], n_frames: int = 3,
                  shift=(0.0, 0.0)) -> MotionScript:
    rel = np.tile(np.asarray(rel_angles, dtype=np.float64)[:, None], (1, n_frames))
    path = np.tile(np.asarray(shift, dtype=np.float64)[None, :], (n_frames, 1))
    return MotionScript(rel_angles=rel, root_path=path)


def limb_perimeters(spec: PuppetSpec, poses_t: np.ndarray) -> List[np.ndarray]:
    """World-frame boundary polylines for each limb at one frame."""
    out = []
    for i, limb in enumerate(spec.limbs):
        cx, cy, angle = poses_t[i]
        body = limb_boundary(limb)
        out.append(body @ rot(angle).T + (cx, cy))
    return out


STANDARD_POSE = [0.0, math.radians(-140.0), math.radians(140.0),
                 math.radians(35.0), math.radians(-35.0)]


def benchmark_scene(index: int, subject: int = 99, frame_size=(320, 240),
                    cast=(0.0, 0.0)) -> Dict:
    """One still query scene: image, per-limb perimeter annotation, true pose.

    Six standard indices span plain/textured/cluttered backgrounds; the pose
    varies per index, the subject's attire differs from all training subjects.
    """
    backgrounds = ["plain", "textured", "clutter", "plain", "textured", "clutter"]
    rng = np.random.default_rng(7000 + index)
    pose = list(STANDARD_POSE)
    pose[1] += math.radians(rng.uniform(-16, 16))
    pose[2] += math.radians(rng.uniform(-16, 16))
    pose[3] += math.radians(rng.uniform(-14, 14))
    pose[4] += math.radians(rng.uniform(-14, 14))
    spec = subject_spec(subject + index, background=backgrounds[index % 6],
                        frame_size=frame_size)
    spec = replace(spec, bg_seed=300 + index)
    script = static_script(spec, pose)
    frames, gt = generate_scene(spec, script, seed=900 + index)
    image = frames[0]
    if cast != (0.0, 0.0):
        image = perturb([image], "cast", cast)[0]
    return dict(image=image, spec=spec, pose=gt.poses[0],
                perimeters=limb_perimeters(spec, gt.poses[0]),
                labels=gt.labels[0], cast=cast)
