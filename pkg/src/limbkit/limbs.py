"""Dense limb templates and the sequence-specific pictorial-structure model.

Foreground pixels are distributed to clusters by nearest-feature distance,
each limb gets a color crop and a smoothed perimeter shape template, and the
skeleton's joints are re-expressed in per-limb body frames (origin at the
template barycenter, x-axis along the principal axis, sign fixed so the
parent sits in the negative half-plane).
"""

from __future__ import annotations

import base64
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .clustering import FeatureCluster
from .config import PipelineConfig
from .imaging import (as_image, as_mask, boundary_pixels, gaussian_blur,
                      perimeter_points, thin)
from .skeleton import (KinematicSkeleton, SimilarityTransform, angular_stats,
                       wrap_angle)
from .tracking import TrajectorySet

SHAPE_MARGIN = 16  # holds the full 3-sigma smoothing skirt at sigma = 5


def rot2(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def flesh_limb_masks(fg: np.ndarray, clusters: List[FeatureCluster],
                     tset: TrajectorySet) -> List[np.ndarray]:
    """Assign every foreground pixel to the cluster with the nearest feature.

    Ties go to the lower cluster index.  The returned masks partition fg.
    """
    import scipy.ndimage as ndi
    fg = as_mask(fg)
    if not fg.any():
        raise ValueError("empty foreground")
    if not clusters:
        raise ValueError("need at least one cluster")
    h, w = fg.shape
    t = tset.t_star
    dists = np.empty((len(clusters), h, w))
    for k, cluster in enumerate(clusters):
        ids = cluster.member_ids
        ok = tset.valid[ids, t]
        pts = tset.positions[ids][ok, t]
        seed = np.zeros((h, w), dtype=bool)
        xs = np.clip(np.rint(pts[:, 0]).astype(np.int64), 0, w - 1)
        ys = np.clip(np.rint(pts[:, 1]).astype(np.int64), 0, h - 1)
        seed[ys, xs] = True
        dists[k] = ndi.distance_transform_edt(~seed)
    assign = np.argmin(dists, axis=0)
    return [(assign == k) & fg for k in range(len(clusters))]


@dataclass
class LimbTemplate:
    mask: np.ndarray            # bool crop (mask bbox + 2 px margin)
    color: np.ndarray           # uint8 crop, zero outside the mask
    offset: Tuple[int, int]     # (x0, y0) of the mask/color crop in the image
    shape_q: np.ndarray         # uint16 smoothed perimeter, max value 65535
    shape_offset: Tuple[int, int]
    barycenter: np.ndarray      # (2,) absolute image coordinates
    axis_angle: float           # body x-axis direction, sign already fixed

    @property
    def shape(self) -> np.ndarray:
        return self.shape_q.astype(np.float64) / 65535.0

    def body_from_abs(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.barycenter) @ rot2(self.axis_angle)

    def abs_from_body(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ rot2(self.axis_angle).T + self.barycenter

    def match_points(self) -> Tuple[np.ndarray, np.ndarray]:
        """Thinned perimeter points and tangent orientations, body frame."""
        pts, phis = perimeter_points(self.mask)
        pts_abs = pts + np.asarray(self.offset, dtype=np.float64)
        return self.body_from_abs(pts_abs), (phis - self.axis_angle) % math.pi


def extract_color_template(frame: np.ndarray, mask: np.ndarray, margin: int = 2
                           ) -> Tuple[np.ndarray, np.ndarray, Tuple[int, int], np.ndarray]:
    """(mask crop, color crop, offset, barycenter) for one limb."""
    frame = as_image(frame)
    mask = as_mask(mask)
    if not mask.any():
        raise ValueError("empty limb mask")
    ys, xs = np.nonzero(mask)
    y0, y1 = max(ys.min() - margin, 0), min(ys.max() + margin + 1, mask.shape[0])
    x0, x1 = max(xs.min() - margin, 0), min(xs.max() + margin + 1, mask.shape[1])
    mask_crop = mask[y0:y1, x0:x1]
    color = frame[y0:y1, x0:x1].copy()
    color[~mask_crop] = 0
    barycenter = np.array([xs.mean(), ys.mean()])
    return mask_crop, color, (int(x0), int(y0)), barycenter


def extract_shape_template(mask: np.ndarray, sigma: float = 5.0,
                           margin: int = SHAPE_MARGIN
                           ) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Smoothed, normalized outer perimeter as a uint16 map plus its offset."""
    mask = as_mask(mask)
    if not mask.any():
        raise ValueError("empty limb mask")
    ys, xs = np.nonzero(mask)
    y0, y1 = max(ys.min() - margin, 0), min(ys.max() + margin + 1, mask.shape[0])
    x0, x1 = max(xs.min() - margin, 0), min(xs.max() + margin + 1, mask.shape[1])
    crop = mask[y0:y1, x0:x1]
    smooth = gaussian_blur(boundary_pixels(crop).astype(np.float64), sigma)
    peak = smooth.max()
    if peak <= 0:
        raise ValueError("degenerate perimeter")
    q = np.round(smooth / peak * 65535.0).astype(np.uint16)
    return q, (int(x0), int(y0))


def _principal_axis_angle(mask: np.ndarray, offset: Tuple[int, int]) -> float:
    ys, xs = np.nonzero(mask)
    pts = np.stack([xs + offset[0], ys + offset[1]], axis=1).astype(np.float64)
    d = pts - pts.mean(axis=0)
    cov = d.T @ d
    evals, evecs = np.linalg.eigh(cov)
    v = evecs[:, int(np.argmax(evals))]
    return math.atan2(v[1], v[0])


@dataclass
class JointInfo:
    parent: int
    child: int
    offset_parent: np.ndarray   # joint position in the parent's body frame
    offset_child: np.ndarray
    angle_mean: float           # stats of the child-minus-parent angle series
    angle_lo: float
    angle_hi: float
    angle_center: float
    angle_series: np.ndarray


@dataclass
class PsModel:
    limbs: List[LimbTemplate]
    parents: List[int]            # -1 at the root
    root: int
    joints: Dict[int, JointInfo]  # keyed by child limb id
    orientation_series: np.ndarray   # (N_G, N_L)
    flip_enabled: List[bool]
    k_theta_in: float
    k_theta_out: float
    frame_size: Tuple[int, int]
    provenance: dict = field(default_factory=dict)

    @property
    def n_limbs(self) -> int:
        return len(self.limbs)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    def children(self, i: int) -> List[int]:
        return [c for c, p in enumerate(self.parents) if p == i]

    def depth(self, i: int) -> int:
        d = 0
        while self.parents[i] >= 0:
            i = self.parents[i]
            d += 1
        return d

    def mean_orientation(self, i: int) -> float:
        series = self.orientation_series[i]
        return angular_stats(series[~np.isnan(series)])[0]

    def validate(self) -> None:
        if self.n_joints != self.n_limbs - 1:
            raise ValueError("joint count must be limb count - 1")
        for child, j in self.joints.items():
            if j.parent != self.parents[child] or j.child != child:
                raise ValueError("inconsistent joint references")
            if j.angle_lo > j.angle_hi:
                raise ValueError("angle limits out of order")


def fix_axis_signs(axis_angles: List[float], barycenters: List[np.ndarray],
                   parents: List[int], root: int,
                   joint_world: Dict[int, np.ndarray]) -> List[float]:
    """Resolve the mod-pi ambiguity of each principal axis.

    Children point their +x half-plane away from the parent barycenter; the
    root points toward the mean of its child joints.
    """
    fixed = list(axis_angles)
    for i, parent in enumerate(parents):
        axis = np.array([math.cos(fixed[i]), math.sin(fixed[i])])
        if parent >= 0:
            toward = barycenters[parent] - barycenters[i]
            if toward @ axis > 0:
                fixed[i] = wrap_angle(fixed[i] + math.pi)
        else:
            child_joints = [joint_world[c] for c, p in enumerate(parents) if p == i]
            if child_joints:
                toward = np.mean(child_joints, axis=0) - barycenters[i]
                if toward @ axis < 0:
                    fixed[i] = wrap_angle(fixed[i] + math.pi)
    return [float(a) for a in fixed]


def build_ps_model(ref_frame: np.ndarray, limb_masks: List[np.ndarray],
                   skeleton: KinematicSkeleton,
                   transforms: List[List[Optional[SimilarityTransform]]],
                   tset: TrajectorySet,
                   cfg: PipelineConfig = PipelineConfig(),
                   provenance: Optional[dict] = None) -> PsModel:
    """Assemble templates, body frames, joint offsets, and angle statistics."""
    n = len(limb_masks)
    t_star = tset.t_star
    parents = [-1] * n
    for e in skeleton.edges:
        parents[e.child] = e.parent

    crops = [extract_color_template(ref_frame, m, cfg.crop_margin) for m in limb_masks]
    shapes = [extract_shape_template(m, cfg.shape_sigma) for m in limb_masks]
    barycenters = [c[3] for c in crops]

    # joints at t* via the parent's rigid motion (estimates live at t=0)
    joint_world: Dict[int, np.ndarray] = {}
    for e in skeleton.edges:
        tr = transforms[e.parent][t_star]
        pos = e.candidate.position
        joint_world[e.child] = tr.apply(pos) if tr is not None else pos

    raw_axes = [_principal_axis_angle(m, (0, 0)) for m in limb_masks]
    axes = fix_axis_signs(raw_axes, barycenters, parents, skeleton.root, joint_world)

    limbs = []
    for i in range(n):
        mask_crop, color, offset, bary = crops[i]
        shape_q, shape_offset = shapes[i]
        limbs.append(LimbTemplate(mask=mask_crop, color=color, offset=offset,
                                  shape_q=shape_q, shape_offset=shape_offset,
                                  barycenter=bary, axis_angle=axes[i]))

    # orientation series re-based on the signed axes
    orientation = np.full_like(skeleton.rotation_rel, np.nan)
    for i in range(n):
        orientation[i] = axes[i] + skeleton.rotation_rel[i]

    joints: Dict[int, JointInfo] = {}
    for e in skeleton.edges:
        p, c = e.parent, e.child
        jw = joint_world[c]
        off_p = limbs[p].body_from_abs(jw)
        off_c = limbs[c].body_from_abs(jw)
        series = orientation[c] - orientation[p]
        series = series[~np.isnan(series)]
        mean, lo, hi, center = angular_stats(wrap_angle(series[0]) + (series - series[0]))
        joints[c] = JointInfo(parent=p, child=c, offset_parent=off_p,
                              offset_child=off_c, angle_mean=mean,
                              angle_lo=lo, angle_hi=hi, angle_center=center,
                              angle_series=series)

    model = PsModel(limbs=limbs, parents=parents, root=skeleton.root, joints=joints,
                    orientation_series=orientation,
                    flip_enabled=[False] * n,
                    k_theta_in=cfg.k_theta_in, k_theta_out=cfg.k_theta_out,
                    frame_size=(ref_frame.shape[1], ref_frame.shape[0]),
                    provenance=provenance or {})
    # flips are tolerated on second-level limbs (the forearm analogue)
    model.flip_enabled = [model.depth(i) >= 2 for i in range(n)]
    model.validate()
    return model


def forward_kinematics_model(model: PsModel, root_pos: np.ndarray, root_angle: float,
                             rel_angles: Dict[int, float]) -> Dict[int, Tuple[np.ndarray, float]]:
    """Limb (position, angle) states from root state plus per-joint angles."""
    states: Dict[int, Tuple[np.ndarray, float]] = {
        model.root: (np.asarray(root_pos, dtype=np.float64), float(root_angle))}
    order = [model.root]
    while order:
        p = order.pop()
        pp, pa = states[p]
        for c in model.children(p):
            j = model.joints[c]
            ca = pa + rel_angles[c]
            jw = pp + rot2(pa) @ j.offset_parent
            states[c] = (jw - rot2(ca) @ j.offset_child, ca)
            order.append(c)
    return states


# ---------------------------------------------------------------------------
# serialization ("psmodel/1")

def _png_b64(arr: np.ndarray, mode: str) -> str:
    from PIL import Image
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _png_decode(payload: str, dtype) -> np.ndarray:
    from PIL import Image
    buf = io.BytesIO(base64.b64decode(payload))
    return np.asarray(Image.open(buf)).astype(dtype)


def model_to_dict(model: PsModel) -> dict:
    limbs = []
    for limb in model.limbs:
        limbs.append(dict(
            mask=_png_b64(limb.mask.astype(np.uint8) * 255, "L"),
            color=_png_b64(limb.color, "RGB"),
            offset=list(limb.offset),
            shape=_png_b64(limb.shape_q, "I;16"),
            shape_offset=list(limb.shape_offset),
            barycenter=list(map(float, limb.barycenter)),
            axis_angle=float(limb.axis_angle),
        ))
    joints = {str(c): dict(
        parent=j.parent, child=j.child,
        offset_parent=list(map(float, j.offset_parent)),
        offset_child=list(map(float, j.offset_child)),
        angle_mean=j.angle_mean, angle_lo=j.angle_lo, angle_hi=j.angle_hi,
        angle_center=j.angle_center,
        angle_series=list(map(float, j.angle_series)),
    ) for c, j in model.joints.items()}
    return dict(
        format="psmodel/1",
        n_limbs=model.n_limbs, n_joints=model.n_joints, root=model.root,
        parents=list(model.parents),
        limbs=limbs, joints=joints,
        orientation_series=[[None if math.isnan(v) else float(v) for v in row]
                            for row in model.orientation_series],
        flip_enabled=list(map(bool, model.flip_enabled)),
        k_theta_in=model.k_theta_in, k_theta_out=model.k_theta_out,
        frame_size=list(model.frame_size),
        provenance=model.provenance,
    )


def model_from_dict(data: dict) -> PsModel:
    if data.get("format") != "psmodel/1":
        raise ValueError("not a psmodel/1 payload")
    limbs = []
    for entry in data["limbs"]:
        limbs.append(LimbTemplate(
            mask=_png_decode(entry["mask"], np.uint8) > 127,
            color=_png_decode(entry["color"], np.uint8),
            offset=tuple(entry["offset"]),
            shape_q=_png_decode(entry["shape"], np.uint16),
            shape_offset=tuple(entry["shape_offset"]),
            barycenter=np.array(entry["barycenter"], dtype=np.float64),
            axis_angle=float(entry["axis_angle"]),
        ))
    joints = {}
    for c_str, j in data["joints"].items():
        c = int(c_str)
        joints[c] = JointInfo(
            parent=j["parent"], child=j["child"],
            offset_parent=np.array(j["offset_parent"]),
            offset_child=np.array(j["offset_child"]),
            angle_mean=j["angle_mean"], angle_lo=j["angle_lo"],
            angle_hi=j["angle_hi"], angle_center=j["angle_center"],
            angle_series=np.array(j["angle_series"], dtype=np.float64),
        )
    orientation = np.array([[np.nan if v is None else v for v in row]
                            for row in data["orientation_series"]], dtype=np.float64)
    model = PsModel(limbs=limbs, parents=list(data["parents"]), root=data["root"],
                    joints=joints, orientation_series=orientation,
                    flip_enabled=list(data["flip_enabled"]),
                    k_theta_in=data["k_theta_in"], k_theta_out=data["k_theta_out"],
                    frame_size=tuple(data["frame_size"]),
                    provenance=data.get("provenance", {}))
    model.validate()
    return model


def save_model(model: PsModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path) -> PsModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
