"""Feature placement and forward/backward point tracking.

Features are laid out on a hexagonal lattice inside the foreground mask with
the spacing tuned so a fixed feature count always fits, then tracked away
from the reference frame in both time directions with pyramidal LK.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import cv2
import numpy as np

from .config import PipelineConfig
from .imaging import as_image, as_mask


@dataclass
class Trajectory:
    feature_id: int
    positions: np.ndarray   # (N_L, 2) float64 (x, y), NaN where invalid
    valid: np.ndarray       # (N_L,) bool


@dataclass
class TrajectorySet:
    positions: np.ndarray   # (N_V, N_L, 2)
    valid: np.ndarray       # (N_V, N_L)
    t_star: int

    @property
    def n_trajectories(self) -> int:
        return self.positions.shape[0]

    @property
    def n_frames(self) -> int:
        return self.positions.shape[1]

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(i, self.positions[i], self.valid[i])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"{self.n_trajectories} {self.n_frames} {self.t_star}\n")
            for i in range(self.n_trajectories):
                for t in range(self.n_frames):
                    x, y = self.positions[i, t]
                    v = int(self.valid[i, t])
                    if not v:
                        x = y = 0.0
                    fh.write(f"{i} {t} {x!r} {y!r} {v}\n")

    @classmethod
    def load(cls, path) -> "TrajectorySet":
        with open(path) as fh:
            n_v, n_l, t_star = (int(v) for v in fh.readline().split())
            positions = np.full((n_v, n_l, 2), np.nan)
            valid = np.zeros((n_v, n_l), dtype=bool)
            for line in fh:
                i_s, t_s, x_s, y_s, v_s = line.split()
                i, t = int(i_s), int(t_s)
                if int(v_s):
                    positions[i, t] = (float(x_s), float(y_s))
                    valid[i, t] = True
        return cls(positions=positions, valid=valid, t_star=t_star)


def hex_lattice_points(mask: np.ndarray, spacing: float) -> np.ndarray:
    """Hexagonal lattice points falling inside the mask, scanline order."""
    h, w = mask.shape
    row_step = spacing * math.sqrt(3.0) / 2.0
    pts = []
    row = 0
    y = row_step / 2.0
    while y < h:
        x = spacing / 2.0 + (spacing / 2.0 if row % 2 else 0.0)
        while x < w:
            if mask[int(y), int(x)]:
                pts.append((x, y))
            x += spacing
        y += row_step
        row += 1
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def place_features(mask: np.ndarray, target_count: int) -> np.ndarray:
    """Exactly target_count lattice points inside the mask.

    Bisects the lattice spacing until the candidate count lands in
    [N_F, 1.2*N_F], then returns the first N_F points in scanline order.
    """
    mask = as_mask(mask)
    if target_count < 10:
        raise ValueError("need target_count >= 10")
    if not mask.any():
        raise ValueError("empty mask")
    lo = 2.0
    if len(hex_lattice_points(mask, lo)) < target_count:
        raise ValueError("mask too small to host the requested feature count")
    hi = float(max(mask.shape))
    best = lo
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        count = len(hex_lattice_points(mask, mid))
        if count < target_count:
            hi = mid
        elif count > 1.2 * target_count:
            best = max(best, mid)
            lo = mid
        else:
            best = mid
            break
    pts = hex_lattice_points(mask, best)
    if len(pts) < target_count:
        pts = hex_lattice_points(mask, lo)
    order = np.lexsort((pts[:, 0], pts[:, 1]))
    return pts[order][:target_count]


def _to_gray_u8(img: np.ndarray) -> np.ndarray:
    return cv2.cvtColor(as_image(img), cv2.COLOR_RGB2GRAY)


def _patch_residual(img_a, img_b, pts_a, pts_b, window: int) -> np.ndarray:
    """Mean squared gray difference between tracked patches."""
    res = np.empty(len(pts_a))
    size = (window, window)
    for i, (pa, pb) in enumerate(zip(pts_a, pts_b)):
        patch_a = cv2.getRectSubPix(img_a, size, tuple(pa)).astype(np.float64)
        patch_b = cv2.getRectSubPix(img_b, size, tuple(pb)).astype(np.float64)
        res[i] = ((patch_a - patch_b) ** 2).mean()
    return res


def track_forward_backward(frames: Sequence[np.ndarray], seeds: np.ndarray,
                           t_star: int, cfg: PipelineConfig = PipelineConfig()) -> TrajectorySet:
    """Pyramidal LK from the reference frame out to both sequence ends."""
    n_l = len(frames)
    grays = [_to_gray_u8(f) for f in frames]
    h, w = grays[0].shape
    seeds = np.asarray(seeds, dtype=np.float64).reshape(-1, 2)
    if (seeds[:, 0].min() < 0 or seeds[:, 0].max() >= w
            or seeds[:, 1].min() < 0 or seeds[:, 1].max() >= h):
        raise ValueError("seeds outside frame bounds")
    n_v = len(seeds)
    positions = np.full((n_v, n_l, 2), np.nan)
    valid = np.zeros((n_v, n_l), dtype=bool)
    positions[:, t_star] = seeds
    valid[:, t_star] = True

    lk = dict(winSize=(cfg.lk_window, cfg.lk_window),
              maxLevel=cfg.lk_levels - 1,
              criteria=(cv2.TERM_CRITERIA_COUNT | cv2.TERM_CRITERIA_EPS,
                        cfg.lk_iterations, 0.01))

    for direction in (1, -1):
        alive = np.ones(n_v, dtype=bool)
        t = t_star
        while 0 <= t + direction < n_l:
            t_next = t + direction
            idx = np.nonzero(alive)[0]
            if len(idx) == 0:
                break
            prev = positions[idx, t].astype(np.float32).reshape(-1, 1, 2)
            nxt, status, _ = cv2.calcOpticalFlowPyrLK(grays[t], grays[t_next], prev, None, **lk)
            nxt = nxt.reshape(-1, 2).astype(np.float64)
            status = status.ravel().astype(bool)
            inside = ((nxt[:, 0] >= 0) & (nxt[:, 0] < w)
                      & (nxt[:, 1] >= 0) & (nxt[:, 1] < h))
            ok = status & inside
            if ok.any():
                res = _patch_residual(grays[t], grays[t_next],
                                      positions[idx[ok], t], nxt[ok], cfg.lk_window)
                ok_idx = np.nonzero(ok)[0]
                ok[ok_idx[res > cfg.lk_residual_threshold]] = False
            alive[idx[~ok]] = False
            keep = idx[ok]
            positions[keep, t_next] = nxt[ok]
            valid[keep, t_next] = True
            t = t_next

    span = valid.sum(axis=1)
    keep = span > 1   # features lost immediately in both directions are dropped
    return TrajectorySet(positions=positions[keep], valid=valid[keep], t_star=t_star)


def velocity(traj: Trajectory, t: int) -> np.ndarray:
    """Finite-difference displacement f(t+1) - f(t)."""
    if t < 0 or t + 1 >= len(traj.valid) or not (traj.valid[t] and traj.valid[t + 1]):
        raise ValueError(f"frames {t}, {t + 1} not both valid")
    return traj.positions[t + 1] - traj.positions[t]
