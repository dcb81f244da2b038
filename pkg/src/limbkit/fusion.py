"""Chromatic adaptation and spatial stimulus biasing of color cues.

A global (a,b)-plane shift in Lab space is selected by maximizing windowed
color similarity over entropy across a 41-candidate grid, using the
pre-detected limb's persistent colors as the intrinsic reference.  Stimulus
maps around the pre-detected limb then suppress the other limbs' color
evidence at its location, resolving double-counting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.ndimage as ndi

from .config import PipelineConfig
from .imaging import (GaborBank, as_image, distance_transform, gabor_transform,
                      lab_to_rgb, morphology, rgb_to_lab)
from .meta import (Anchor, CueMapStack, GaborCueEngine, MetaModel,
                   build_backprojection, color_cue_map, footprint_kernel,
                   predetect_limb, windowed_backprojection)


@dataclass(frozen=True)
class ShiftCandidate:
    radius: float
    gamma: float      # radians

    @property
    def vector(self) -> Tuple[float, float]:
        return (self.radius * math.cos(self.gamma), self.radius * math.sin(self.gamma))


def shift_candidates(radii: Sequence[float] = (0, 2, 4, 8, 16, 32),
                     n_directions: int = 8) -> List[ShiftCandidate]:
    """The candidate grid; R = 0 collapses to a single direction."""
    out = []
    for r in radii:
        if r == 0:
            out.append(ShiftCandidate(0.0, 0.0))
            continue
        for v in range(n_directions):
            out.append(ShiftCandidate(float(r), v * 2.0 * math.pi / n_directions))
    return out


def apply_chromatic_shift(image: np.ndarray, vector: Tuple[float, float]) -> np.ndarray:
    if vector[0] == 0 and vector[1] == 0:
        return image.copy()
    lab = rgb_to_lab(image)
    lab[..., 1] += vector[0]
    lab[..., 2] += vector[1]
    return lab_to_rgb(lab)


def shifted_backprojection(image: np.ndarray, hist: np.ndarray,
                           candidate: ShiftCandidate,
                           cfg: PipelineConfig = PipelineConfig()) -> np.ndarray:
    """Backprojection of the histogram onto the color-shifted image, in [0,1]."""
    shifted = apply_chromatic_shift(as_image(image), candidate.vector)
    return windowed_backprojection(shifted, hist, cfg.backproj_window, cfg.hs_bins)


def color_similarity_measure(u: np.ndarray, projection_mask: np.ndarray) -> float:
    """Mean similarity over the opened projection-mask pixels."""
    count = int(projection_mask.sum())
    if count == 0:
        raise ValueError("empty projection mask")
    return float(u[projection_mask].sum()) / count


def similarity_entropy(u: np.ndarray) -> float:
    total = float(u.sum())
    if total <= 0:
        raise ValueError("degenerate similarity map")
    p = u.ravel() / total
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def select_shift(scored: Sequence[Tuple[ShiftCandidate, float, float]]
                 ) -> Tuple[ShiftCandidate, bool]:
    """argmax of C/S; ties prefer smaller radius, then smaller direction.

    `scored` holds (candidate, C, S) triples; S <= 0 entries with positive C
    count as infinitely concentrated.  Returns (choice, degenerate_flag).
    """
    best: Optional[ShiftCandidate] = None
    best_score = -math.inf
    ordered = sorted(scored, key=lambda t: (t[0].radius, t[0].gamma))
    for cand, c, s in ordered:
        if math.isnan(c) or math.isnan(s):
            continue
        score = math.inf if s <= 0 and c > 0 else (c / s if s > 0 else -math.inf)
        if score > best_score:
            best_score = score
            best = cand
    if best is None:
        return ShiftCandidate(0.0, 0.0), True
    return best, False


def projection_mask(meta: MetaModel, limb: int, anchor: Anchor,
                    shape: Tuple[int, int],
                    cfg: PipelineConfig = PipelineConfig()) -> np.ndarray:
    """Binarized color prototype projected at the anchor, opened r=2."""
    kernel = footprint_kernel(meta, limb, anchor.theta, anchor.scale, False)
    r = kernel.shape[0] // 2
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    ys, xs = np.nonzero(kernel > 0)
    yy = ys - r + anchor.position[1]
    xx = xs - r + anchor.position[0]
    ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    mask[yy[ok], xx[ok]] = True
    if mask.any():
        opened = morphology(mask, "open", cfg.projection_open_radius)
        if opened.any():
            return opened
    return mask


def estimate_shift(image: np.ndarray, meta: MetaModel, limb: int, anchor: Anchor,
                   cfg: PipelineConfig = PipelineConfig()
                   ) -> Tuple[ShiftCandidate, bool, list]:
    """Entropy-guided shift selection for the anchored limb's histogram."""
    mask = projection_mask(meta, limb, anchor, image.shape[:2], cfg)
    if not mask.any():
        return ShiftCandidate(0.0, 0.0), True, []
    hist = meta.limbs[limb].hs_hist
    scored = []
    for cand in shift_candidates(cfg.shift_radii, cfg.shift_directions):
        u = shifted_backprojection(image, hist, cand, cfg)
        total = float(u.sum())
        if total <= 0:
            scored.append((cand, math.nan, math.nan))
            continue
        c = color_similarity_measure(u, mask)
        s = similarity_entropy(u)
        scored.append((cand, c, s))
    choice, degenerate = select_shift(scored)
    return choice, degenerate, scored


@dataclass
class StimulusPair:
    negative: np.ndarray   # in [0, 0.3] after truncation
    positive: np.ndarray   # 1 - pre-truncation negative


def build_stimulus_maps(mask: np.ndarray, truncation: float = 0.3) -> StimulusPair:
    """Normalized distance-to-mask (negative) and its complement (positive)."""
    if not mask.any():
        raise ValueError("empty projection mask")
    dist = distance_transform(mask)
    peak = dist.max()
    n = dist / peak if peak > 0 else dist
    p = 1.0 - n
    return StimulusPair(negative=np.minimum(n, truncation), positive=p)


def bias_backprojections(stack: CueMapStack, anchored_limb: int,
                         pair: StimulusPair) -> None:
    """Attract the anchored limb to its pre-detection, repel everyone else."""
    for j in range(stack.meta.n_limbs):
        if stack.biased[j] is None:
            continue
        factor = pair.positive if j == anchored_limb else pair.negative
        stack.biased[j] = stack.biased[j] * factor
    stack.invalidate_cache()


# ---------------------------------------------------------------------------
# full cue stack assembly

VALID_SWITCHES = "SGRCMA"


def parse_switches(switches: str) -> set:
    s = set(switches.upper())
    unknown = s - set(VALID_SWITCHES)
    if unknown:
        raise ValueError(f"unknown switches: {''.join(sorted(unknown))}")
    if "S" not in s:
        raise ValueError("the shape switch 'S' is mandatory")
    return s


def build_cue_stack(meta: MetaModel, image: np.ndarray, switches: str = "SGRCMA",
                    cfg: PipelineConfig = PipelineConfig()) -> Tuple[Optional[CueMapStack], dict]:
    """Assemble color cues, anchors, stimulus biasing, chromatic adaptation.

    Returns (stack or None for shape-only matching, diagnostics).  Switch
    semantics: G Gabor pre-detection anchors, R orientation lock at the
    typical angle, C color cues, M stimulus maps, A chromatic adaptation.
    """
    sw = parse_switches(switches)
    image = as_image(image)
    info: dict = dict(switches="".join(sorted(sw)), anchors={}, shift=None)
    use_g = "G" in sw
    use_c = "C" in sw
    if not (use_g or use_c):
        return None, info

    n = meta.n_limbs
    anchors: Dict[int, Anchor] = {}
    engines: Dict[int, GaborCueEngine] = {}
    if use_g:
        bank = GaborBank(cfg.gabor_scales, cfg.gabor_orientations, cfg.gabor_sigma,
                         cfg.gabor_freq_max)
        jets = gabor_transform(image, bank)
        prelim_backproj: Dict[int, np.ndarray] = {}
        for i, ml in enumerate(meta.limbs):
            if ml.gabor is None or not ml.gabor.valid:
                continue
            engine = GaborCueEngine(ml.gabor, jets)
            engines[i] = engine
            cue_fn = None
            if use_c and ml.color_valid():
                if i not in prelim_backproj:
                    prelim_backproj[i] = build_backprojection(meta, i, image, cfg)

                def cue_fn(theta, scale, _i=i):
                    kernel = footprint_kernel(meta, _i, theta, scale, False)
                    return color_cue_map(prelim_backproj[_i], kernel)

            pos, theta, scale, _ = predetect_limb(engine, ml.theta_typical(), cue_fn, cfg)
            anchors[i] = Anchor(position=pos, theta=theta, scale=scale)
        info["anchors"] = {i: dict(x=a.position[0], y=a.position[1], theta=a.theta,
                                   scale=a.scale) for i, a in anchors.items()}

    corrected = image
    if "A" in sw and anchors and use_c:
        ref_limb = max(anchors, key=lambda i: len(meta.limbs[i].gabor.offsets))
        choice, degenerate, _ = estimate_shift(image, meta, ref_limb,
                                               anchors[ref_limb], cfg)
        info["shift"] = dict(radius=choice.radius, gamma=choice.gamma,
                             degenerate=degenerate)
        if not degenerate:
            corrected = apply_chromatic_shift(image, choice.vector)

    if use_c:
        backproj = [build_backprojection(meta, i, corrected, cfg) for i in range(n)]
        stack = CueMapStack(meta=meta, backprojections=backproj,
                            biased=[b.copy() for b in backproj],
                            anchors=anchors, use_color=True)
    else:
        stack = CueMapStack(meta=meta, backprojections=[None] * n,
                            biased=[None] * n, anchors=anchors, use_color=False)

    if "M" in sw and use_c:
        for i, anchor in anchors.items():
            mask = projection_mask(meta, i, anchor, image.shape[:2], cfg)
            if not mask.any():
                continue
            pair = build_stimulus_maps(mask, cfg.stimulus_truncation)
            bias_backprojections(stack, i, pair)
    return stack, info
