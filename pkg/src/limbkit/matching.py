"""Pictorial-structure matching against a still image.

Per-limb evidence is an oriented chamfer cost between the limb's thinned
perimeter template and the query edge image, optionally mixed with a biased
color cue.  Tree DP with generalized distance transforms over positions finds
the exact global minimum over the discretized state space (positions x
orientation bins x scale grid x flips); pre-detected limbs can be anchored to
a small positional window and a fixed orientation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .config import PipelineConfig
from .imaging import edge_map, nearest_true_indices
from .limbs import JointInfo, PsModel, rot2
from .skeleton import wrap_angle

_INF = np.float64(1e30)


@dataclass(frozen=True)
class LimbState:
    position: Tuple[float, float]   # (x, y)
    theta: float
    scale: float
    flip: bool


@dataclass
class Posture:
    states: Dict[int, LimbState]
    energy: float

    def to_json(self) -> str:
        payload = dict(
            energy=self.energy,
            limbs={str(i): dict(x=s.position[0], y=s.position[1], theta=s.theta,
                                scale=s.scale, flip=s.flip)
                   for i, s in self.states.items()})
        return json.dumps(payload)


@dataclass
class MatchConfig:
    theta_bins: int = 32
    scale_grid: Tuple[float, ...] = (1.0,)
    use_flips: bool = True
    restrict_child_angles: bool = True
    angle_slack_bins: int = 1
    spring_weight: float = 0.01
    chamfer_dmax: float = 20.0
    chamfer_lambda_o: float = 5.0
    match_eps: float = 1e-6
    color_weight: float = 0.65
    color_offset: float = 0.35
    anchor_window: int = 10
    anchors: Dict[int, Tuple[float, float]] = field(default_factory=dict)
    lock_theta: Dict[int, float] = field(default_factory=dict)
    lock_scale: Dict[int, float] = field(default_factory=dict)
    theta_override: Dict[int, Tuple[float, ...]] = field(default_factory=dict)
    root_theta_window: Optional[Tuple[float, float]] = None  # (center, half width)

    @classmethod
    def from_config(cls, cfg: PipelineConfig, **kw) -> "MatchConfig":
        return cls(theta_bins=cfg.theta_bins, spring_weight=cfg.spring_weight,
                   chamfer_dmax=cfg.chamfer_dmax, chamfer_lambda_o=cfg.chamfer_lambda_o,
                   match_eps=cfg.match_eps, color_weight=cfg.color_weight,
                   color_offset=cfg.color_offset, anchor_window=cfg.anchor_window,
                   restrict_child_angles=cfg.restrict_child_angles, **kw)


@dataclass
class MatchModel:
    """The matcher's view of a body model (sequence-specific or meta)."""
    parents: List[int]
    root: int
    joints: Dict[int, JointInfo]
    points: List[np.ndarray]        # per limb (N, 2) body-frame perimeter points
    phis: List[np.ndarray]          # per limb (N,) tangent orientations mod pi
    flip_enabled: List[bool]
    k_theta_in: float = 0.01
    k_theta_out: float = 1.0

    @property
    def n_limbs(self) -> int:
        return len(self.parents)

    def children(self, i: int) -> List[int]:
        return [c for c, p in enumerate(self.parents) if p == i]


def match_model_from_ps(model: PsModel) -> MatchModel:
    pts, phis = [], []
    for limb in model.limbs:
        p, f = limb.match_points()
        pts.append(p)
        phis.append(f)
    return MatchModel(parents=list(model.parents), root=model.root,
                      joints=dict(model.joints), points=pts, phis=phis,
                      flip_enabled=list(model.flip_enabled),
                      k_theta_in=model.k_theta_in, k_theta_out=model.k_theta_out)


# ---------------------------------------------------------------------------
# edge evidence

@dataclass
class EdgeEvidence:
    dt_trunc: np.ndarray      # min(distance to edge, dmax)
    near_orient: np.ndarray   # orientation of the nearest edge pixel
    has_edges: bool
    dmax: float

    @property
    def shape(self):
        return self.dt_trunc.shape


def edge_evidence(edges: np.ndarray, orient: np.ndarray, dmax: float) -> EdgeEvidence:
    if not edges.any():
        shape = edges.shape
        return EdgeEvidence(np.full(shape, dmax), np.zeros(shape), False, dmax)
    import scipy.ndimage as ndi
    dt = ndi.distance_transform_edt(~edges)
    iy, ix = nearest_true_indices(edges)
    return EdgeEvidence(np.minimum(dt, dmax), orient[iy, ix], True, dmax)


def image_edge_evidence(image: np.ndarray, cfg: PipelineConfig) -> EdgeEvidence:
    edges, orient = edge_map(image, cfg.edge_low, cfg.edge_high)
    return EdgeEvidence(*_evidence_fields(edges, orient, cfg.chamfer_dmax))


def _evidence_fields(edges, orient, dmax):
    ev = edge_evidence(edges, orient, dmax)
    return ev.dt_trunc, ev.near_orient, ev.has_edges, ev.dmax


def transform_points(points: np.ndarray, phis: np.ndarray, theta: float,
                     scale: float, flip: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Body-frame template points into image offsets for one state."""
    pts = points.copy()
    ph = phis.copy()
    if flip:
        pts[:, 1] = -pts[:, 1]
        ph = (-ph) % math.pi
    offsets = scale * (pts @ rot2(theta).T)
    return offsets, (ph + theta) % math.pi


def oriented_chamfer_cost(points: np.ndarray, phis: np.ndarray, ev: EdgeEvidence,
                          theta: float, scale: float = 1.0, flip: bool = False,
                          lambda_o: float = 5.0) -> np.ndarray:
    """Normalized oriented chamfer cost of placing the template anywhere.

    Pixel (y, x) holds the mean over template points of truncated edge
    distance plus lambda_o times the orientation mismatch (mod pi) to the
    nearest edge, normalized by (dmax + lambda_o*pi/2).  Template offsets are
    rounded to integer pixels; points leaving the image count as maximal.
    """
    norm = ev.dmax + lambda_o * math.pi / 2.0
    if not ev.has_edges:
        return np.ones(ev.shape)
    offsets, ph = transform_points(points, phis, theta, scale, flip)
    q = np.rint(offsets).astype(np.int64)
    return _kernels.chamfer_cost_map(ev.dt_trunc, ev.near_orient,
                                     q[:, 1].copy(), q[:, 0].copy(), ph,
                                     lambda_o, norm, norm)


def oriented_chamfer_at(points: np.ndarray, phis: np.ndarray, ev: EdgeEvidence,
                        state: LimbState, lambda_o: float = 5.0) -> float:
    """Direct single-placement evaluation (energy recomputation path)."""
    norm = ev.dmax + lambda_o * math.pi / 2.0
    if not ev.has_edges:
        return 1.0
    offsets, ph = transform_points(points, phis, state.theta, state.scale, state.flip)
    q = np.rint(offsets).astype(np.int64)
    x0, y0 = int(round(state.position[0])), int(round(state.position[1]))
    h, w = ev.shape
    acc = 0.0
    for k in range(len(q)):
        yy, xx = y0 + q[k, 1], x0 + q[k, 0]
        if 0 <= yy < h and 0 <= xx < w:
            d = (ev.near_orient[yy, xx] - ph[k]) % math.pi
            if d > math.pi / 2:
                d = math.pi - d
            acc += ev.dt_trunc[yy, xx] + lambda_o * d
        else:
            acc += norm
    return acc / (len(q) * norm)


def limb_match_cost(shape_cost: np.ndarray, color_cue: Optional[np.ndarray] = None,
                    weight: float = 0.65, offset: float = 0.35,
                    eps: float = 1e-6) -> np.ndarray:
    """-log([1 - S] * (w*C + (1-w) offset)); color disabled means C == 1."""
    inner = 1.0 - shape_cost
    if color_cue is not None:
        inner = inner * (weight * color_cue + offset)
    return -np.log(np.maximum(inner, eps))


def _mirror_offset(off: np.ndarray) -> np.ndarray:
    return np.array([off[0], -off[1]])


def _joint_offsets(joint: JointInfo, parent_flip: bool, child_flip: bool
                   ) -> Tuple[np.ndarray, np.ndarray]:
    op = _mirror_offset(joint.offset_parent) if parent_flip else joint.offset_parent
    oc = _mirror_offset(joint.offset_child) if child_flip else joint.offset_child
    return op, oc


def _angular_excess(joint: JointInfo, rel: float, child_flip: bool) -> float:
    center = -joint.angle_center if child_flip else joint.angle_center
    half = 0.5 * (joint.angle_hi - joint.angle_lo)
    delta = abs(wrap_angle(rel - center))
    return max(0.0, delta - half)


def deformation_cost(joint: JointInfo, parent_state: LimbState, child_state: LimbState,
                     spring_weight: float = 0.01, k_in: float = 0.01,
                     k_out: float = 1.0) -> float:
    """Quadratic joint-position mismatch plus switched-slope angular excess."""
    op, oc = _joint_offsets(joint, parent_state.flip, child_state.flip)
    jp = np.asarray(parent_state.position) + parent_state.scale * (rot2(parent_state.theta) @ op)
    jc = np.asarray(child_state.position) + child_state.scale * (rot2(child_state.theta) @ oc)
    positional = spring_weight * float(((jp - jc) ** 2).sum())
    excess = _angular_excess(joint, child_state.theta - parent_state.theta,
                             child_state.flip)
    k = k_in if excess == 0.0 else k_out
    return positional + k * excess * excess


# ---------------------------------------------------------------------------
# state domains

def _theta_grid(bins: int) -> np.ndarray:
    return -math.pi + 2.0 * math.pi * np.arange(bins) / bins


def _theta_domain(model: MatchModel, limb: int, mcfg: MatchConfig,
                  parent_domain: Optional[np.ndarray]) -> np.ndarray:
    if limb in mcfg.lock_theta:
        return np.array([mcfg.lock_theta[limb]])
    if limb in mcfg.theta_override:
        return np.asarray(mcfg.theta_override[limb], dtype=np.float64)
    grid = _theta_grid(mcfg.theta_bins)
    if model.parents[limb] < 0:
        if mcfg.root_theta_window is not None:
            center, half = mcfg.root_theta_window
            sel = np.abs(wrap_angle(grid - center)) <= half + 1e-9
            return grid[sel] if sel.any() else np.array([center])
        return grid
    if not mcfg.restrict_child_angles or parent_domain is None:
        return grid
    joint = model.joints[limb]
    half = 0.5 * (joint.angle_hi - joint.angle_lo)
    slack = mcfg.angle_slack_bins * 2.0 * math.pi / mcfg.theta_bins
    centers = [joint.angle_center]
    if mcfg.use_flips and model.flip_enabled[limb]:
        centers.append(-joint.angle_center)
    sel = np.zeros(len(grid), dtype=bool)
    for pa in parent_domain:
        for c in centers:
            d = np.abs(wrap_angle(grid - (pa + c)))
            sel |= d <= half + slack + 1e-9
    return grid[sel] if sel.any() else grid


@dataclass
class _LimbDomain:
    thetas: np.ndarray
    scales: np.ndarray
    flips: List[bool]

    @property
    def combos(self) -> List[Tuple[int, int, int]]:
        return [(ti, si, fi) for ti in range(len(self.thetas))
                for si in range(len(self.scales)) for fi in range(len(self.flips))]


def _build_domains(model: MatchModel, mcfg: MatchConfig) -> List[_LimbDomain]:
    order = _topological(model)
    domains: List[Optional[_LimbDomain]] = [None] * model.n_limbs
    for limb in order:
        parent = model.parents[limb]
        parent_dom = domains[parent].thetas if parent >= 0 else None
        thetas = _theta_domain(model, limb, mcfg, parent_dom)
        if limb in mcfg.lock_scale:
            scales = np.array([mcfg.lock_scale[limb]])
        else:
            scales = np.asarray(mcfg.scale_grid, dtype=np.float64)
        flips = [False, True] if (mcfg.use_flips and model.flip_enabled[limb]) else [False]
        domains[limb] = _LimbDomain(thetas=thetas, scales=scales, flips=flips)
    return domains


def _topological(model: MatchModel) -> List[int]:
    order = [model.root]
    i = 0
    while i < len(order):
        order.extend(model.children(order[i]))
        i += 1
    return order


# ---------------------------------------------------------------------------
# exact tree DP

def match_ps(model: MatchModel, ev: EdgeEvidence, cues=None,
             mcfg: MatchConfig = MatchConfig()) -> Posture:
    """Exact global minimum of the discretized matching energy."""
    h, w = ev.shape
    domains = _build_domains(model, mcfg)
    order = _topological(model)

    anchors_box: Dict[int, Tuple[int, int, int, int]] = {}
    for limb, (ax, ay) in mcfg.anchors.items():
        x0 = int(math.ceil(ax - mcfg.anchor_window))
        x1 = int(math.floor(ax + mcfg.anchor_window))
        y0 = int(math.ceil(ay - mcfg.anchor_window))
        y1 = int(math.floor(ay + mcfg.anchor_window))
        x0, x1 = max(x0, 0), min(x1, w - 1)
        y0, y1 = max(y0, 0), min(y1, h - 1)
        if x0 > x1 or y0 > y1:
            raise ValueError(f"anchor window for limb {limb} outside image")
        anchors_box[limb] = (x0, x1, y0, y1)

    beliefs: List[Optional[np.ndarray]] = [None] * model.n_limbs
    back: Dict[int, dict] = {}

    def unary_stack(limb: int) -> np.ndarray:
        dom = domains[limb]
        out = np.empty((len(dom.combos), h, w))
        for ci, (ti, si, fi) in enumerate(dom.combos):
            theta, scale, flip = dom.thetas[ti], dom.scales[si], dom.flips[fi]
            s_map = oriented_chamfer_cost(model.points[limb], model.phis[limb], ev,
                                          theta, scale, flip, mcfg.chamfer_lambda_o)
            c_map = None if cues is None else cues.color_cue(limb, theta, scale, flip)
            out[ci] = limb_match_cost(s_map, c_map, mcfg.color_weight,
                                      mcfg.color_offset, mcfg.match_eps)
        if limb in anchors_box:
            x0, x1, y0, y1 = anchors_box[limb]
            blocked = np.full((h, w), _INF)
            blocked[y0:y1 + 1, x0:x1 + 1] = 0.0
            out = np.minimum(out + blocked, _INF)
        return out

    for limb in reversed(order):
        dom = domains[limb]
        belief = unary_stack(limb)
        for child in model.children(limb):
            msg, pair_idx, child_meta = _edge_message(
                model, domains, beliefs[child], limb, child, (h, w), mcfg)
            belief = np.minimum(belief + msg, _INF)
            back[child] = dict(pair_idx=pair_idx, meta=child_meta)
        beliefs[limb] = belief

    root = model.root
    root_belief = beliefs[root]
    flat = int(np.argmin(root_belief))
    ci, rem = divmod(flat, h * w)
    yi, xi = divmod(rem, w)
    energy = float(root_belief[ci, yi, xi])

    states: Dict[int, LimbState] = {}
    dom = domains[root]
    ti, si, fi = dom.combos[ci]
    states[root] = LimbState((float(xi), float(yi)), float(dom.thetas[ti]),
                             float(dom.scales[si]), dom.flips[fi])
    _backtrace(model, domains, beliefs, back, root, ci, (yi, xi), states, mcfg)
    return Posture(states=states, energy=energy)


def _pair_shift(model: MatchModel, domains, parent: int, child: int,
                pc: Tuple[int, int, int], cc: Tuple[int, int, int]) -> np.ndarray:
    """delta = r_p - r_c so that j_p - j_c = (x_p + delta) - x_c."""
    joint = model.joints[child]
    pdom, cdom = domains[parent], domains[child]
    p_theta, p_scale, p_flip = pdom.thetas[pc[0]], pdom.scales[pc[1]], pdom.flips[pc[2]]
    c_theta, c_scale, c_flip = cdom.thetas[cc[0]], cdom.scales[cc[1]], cdom.flips[cc[2]]
    op, oc = _joint_offsets(joint, p_flip, c_flip)
    r_p = p_scale * (rot2(p_theta) @ op)
    r_c = c_scale * (rot2(c_theta) @ oc)
    return r_p - r_c


def _edge_message(model: MatchModel, domains, child_belief: np.ndarray,
                  parent: int, child: int, shape, mcfg: MatchConfig):
    """min over child states of belief + spring + angular penalty.

    Returns (msg stack over parent combos, best pair index stack, metadata
    for backtracing).
    """
    h, w = shape
    pdom, cdom = domains[parent], domains[child]
    joint = model.joints[child]
    wgt = mcfg.spring_weight
    child_combos = cdom.combos
    parent_combos = pdom.combos

    gdt_cache: Dict[int, Tuple[np.ndarray, float, float]] = {}
    msg = np.full((len(parent_combos), h, w), _INF)
    pair_idx = np.zeros((len(parent_combos), h, w), dtype=np.int32)

    for pi, pc in enumerate(parent_combos):
        p_theta = pdom.thetas[pc[0]]
        for cj, cc in enumerate(child_combos):
            c_theta = cdom.thetas[cc[0]]
            c_flip = cdom.flips[cc[2]]
            excess = _angular_excess(joint, c_theta - p_theta, c_flip)
            k = model.k_theta_in if excess == 0.0 else model.k_theta_out
            ang = k * excess * excess
            delta = _pair_shift(model, domains, parent, child, pc, cc)
            dist, _, _ = _query_gdt(child_belief[cj], wgt, delta, gdt_cache, cj)
            cand = dist + ang
            better = cand < msg[pi]
            msg[pi][better] = cand[better]
            pair_idx[pi][better] = cj
    meta = dict(child=child, parent=parent)
    return msg, pair_idx, meta


def _query_gdt(base: np.ndarray, weight: float, delta: np.ndarray, cache: dict, key
               ) -> Tuple[np.ndarray, float, float]:
    """GDT of base evaluated at grid + delta (cached per child combo + offset)."""
    dy, dx = float(delta[1]), float(delta[0])
    ck = (key, round(dy, 9), round(dx, 9))
    if ck not in cache:
        f = np.minimum(base, _INF)
        dist, argy, argx = _kernels.gdt_2d(f, weight, weight, dy, dx)
        cache[ck] = (dist, argy, argx)
    return cache[ck]


def _backtrace(model, domains, beliefs, back, parent, parent_ci, parent_yx, states,
               mcfg):
    h, w = beliefs[parent].shape[1:]
    for child in model.children(parent):
        info = back[child]
        cj = int(info["pair_idx"][parent_ci, parent_yx[0], parent_yx[1]])
        cdom = domains[child]
        cc = cdom.combos[cj]
        pc = domains[parent].combos[parent_ci]
        delta = _pair_shift(model, domains, parent, child, pc, cc)
        dist, argy, argx = _kernels.gdt_2d(np.minimum(beliefs[child][cj], _INF),
                                           mcfg.spring_weight, mcfg.spring_weight,
                                           float(delta[1]), float(delta[0]))
        cy = int(argy[parent_yx[0], parent_yx[1]])
        cx = int(argx[parent_yx[0], parent_yx[1]])
        states[child] = LimbState((float(cx), float(cy)), float(cdom.thetas[cc[0]]),
                                  float(cdom.scales[cc[1]]), cdom.flips[cc[2]])
        _backtrace(model, domains, beliefs, back, child, cj, (cy, cx), states, mcfg)


# ---------------------------------------------------------------------------
# energy recomputation and overlays

def posture_energy(model: MatchModel, posture: Posture, ev: EdgeEvidence,
                   cues=None, mcfg: MatchConfig = MatchConfig()) -> float:
    """Re-evaluate the matching energy of a posture from scratch."""
    total = 0.0
    for limb, state in posture.states.items():
        s = oriented_chamfer_at(model.points[limb], model.phis[limb], ev, state,
                                mcfg.chamfer_lambda_o)
        c = None
        if cues is not None:
            c_map = cues.color_cue(limb, state.theta, state.scale, state.flip)
            if c_map is not None:
                c = float(c_map[int(round(state.position[1])), int(round(state.position[0]))])
        inner = (1.0 - s) if c is None else (1.0 - s) * (mcfg.color_weight * c + mcfg.color_offset)
        total += -math.log(max(inner, mcfg.match_eps))
    for child, joint in model.joints.items():
        total += deformation_cost(joint, posture.states[joint.parent],
                                  posture.states[child], mcfg.spring_weight,
                                  model.k_theta_in, model.k_theta_out)
    return total


def render_overlay(image: np.ndarray, model: MatchModel, posture: Posture) -> np.ndarray:
    """Projected thinned shapes burned into a copy of the query image."""
    out = image.copy()
    h, w = out.shape[:2]
    colors = [(255, 64, 64), (64, 255, 64), (64, 64, 255), (255, 255, 64), (255, 64, 255),
              (64, 255, 255), (255, 160, 64)]
    for limb, state in posture.states.items():
        offsets, _ = transform_points(model.points[limb], model.phis[limb],
                                      state.theta, state.scale, state.flip)
        pts = np.rint(offsets + np.asarray(state.position)).astype(np.int64)
        ok = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
        out[pts[ok, 1], pts[ok, 0]] = colors[limb % len(colors)]
    return out
