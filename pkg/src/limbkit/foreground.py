"""Locating the moving subject.

Double-difference images mark actively moving pixels, the frame with maximal
mean motion becomes the reference frame, and a two-terminal max-flow cut
separates subject from background there, seeded by the motion evidence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order, maximum_flow

from .config import PipelineConfig
from .imaging import as_image, as_mask, morphology, to_gray


@dataclass
class DdiStack:
    """Per-frame active-motion-pixel maps plus their means."""
    maps: List[np.ndarray]          # float64 (H, W), 0/1 after cleanup
    means: np.ndarray               # (N_L,)

    def __len__(self) -> int:
        return len(self.maps)


@dataclass
class SegGraph:
    """Pixel grid two-terminal cut problem with integer capacities.

    Node ids: 0 = source, 1 = sink, pixel (y, x) = 2 + y*W + x.
    source_caps/sink_caps are per-pixel unary capacities; edges holds
    (pixel_a, pixel_b, capacity) pairwise terms (undirected).
    """
    height: int
    width: int
    source_caps: np.ndarray         # int64 (H, W)
    sink_caps: np.ndarray           # int64 (H, W)
    edges: np.ndarray               # int64 (E, 3): flat_a, flat_b, cap

    def validate(self) -> None:
        if (self.source_caps < 0).any() or (self.sink_caps < 0).any():
            raise ValueError("unary capacities must be >= 0")
        if self.edges.size and (self.edges[:, 2] < 0).any():
            raise ValueError("pairwise capacities must be >= 0")


def double_difference(frames: Sequence[np.ndarray], threshold: float,
                      close_radius: int = 2) -> DdiStack:
    """AND of two consecutive thresholded frame differences, then closing."""
    if len(frames) < 3:
        raise ValueError("need at least 3 frames")
    grays = [to_gray(f) for f in frames]
    shape = grays[0].shape
    for g in grays:
        if g.shape != shape:
            raise ValueError("frames must share dimensions")
    maps = [np.zeros(shape)]
    for t in range(1, len(grays) - 1):
        prev_diff = np.abs(grays[t] - grays[t - 1]) > threshold
        next_diff = np.abs(grays[t + 1] - grays[t]) > threshold
        active = prev_diff & next_diff
        if active.any():
            active = morphology(active, "close", close_radius)
        maps.append(active.astype(np.float64))
    maps.append(np.zeros(shape))
    means = np.array([m.mean() for m in maps])
    return DdiStack(maps=maps, means=means)


def select_reference_frame(stack: DdiStack) -> int:
    if len(stack) == 0:
        raise ValueError("empty DDI stack")
    if not (stack.means > 0).any():
        raise ValueError("no motion detected")
    return int(np.argmax(stack.means))


def max_flow_min_cut(graph: SegGraph) -> Tuple[int, np.ndarray]:
    """Exact max flow; returns (flow value, source-side pixel mask)."""
    graph.validate()
    h, w = graph.height, graph.width
    n = h * w + 2
    src = graph.source_caps.ravel()
    snk = graph.sink_caps.ravel()
    pix = np.arange(h * w, dtype=np.int64) + 2
    rows = [np.zeros(h * w, dtype=np.int64), pix]
    cols = [pix, np.ones(h * w, dtype=np.int64)]
    caps = [src, snk]
    if graph.edges.size:
        e = graph.edges
        rows.extend([e[:, 0] + 2, e[:, 1] + 2])
        cols.extend([e[:, 1] + 2, e[:, 0] + 2])
        caps.extend([e[:, 2], e[:, 2]])
    m = sp.csr_matrix(
        (np.concatenate(caps), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n), dtype=np.int64)
    m.sum_duplicates()
    res = maximum_flow(m, 0, 1)
    residual = m - res.flow
    residual.data = np.maximum(residual.data, 0)
    residual.eliminate_zeros()
    order = breadth_first_order(residual, 0, directed=True, return_predecessors=False)
    reach = np.zeros(n, dtype=bool)
    reach[order] = True
    mask = reach[2:].reshape(h, w)
    return int(res.flow_value), mask


def _rgb_hist_loglik(img: np.ndarray, seed_mask: np.ndarray, bins: int) -> np.ndarray:
    """Per-pixel log-likelihood under a histogram of the seed region."""
    idx = (img.astype(np.int64) * bins) // 256
    flat = (idx[..., 0] * bins + idx[..., 1]) * bins + idx[..., 2]
    counts = np.bincount(flat[seed_mask], minlength=bins ** 3).astype(np.float64)
    probs = (counts + 1.0) / (counts.sum() + bins ** 3)
    return np.log(probs)[flat]


def build_seg_graph(img: np.ndarray, fg_seed: np.ndarray, bg_seed: np.ndarray,
                    cfg: PipelineConfig) -> SegGraph:
    img = as_image(img)
    h, w = img.shape[:2]
    ll_fg = _rgb_hist_loglik(img, fg_seed, cfg.rgb_hist_bins)
    ll_bg = _rgb_hist_loglik(img, bg_seed, cfg.rgb_hist_bins)
    scale = cfg.gc_capacity_scale
    # capacity toward source = foreground affinity = -log P(bg), and vice versa
    src = np.round(-ll_bg * scale).astype(np.int64)
    snk = np.round(-ll_fg * scale).astype(np.int64)
    hard = np.int64(1 << 40)
    src[fg_seed] = hard
    snk[fg_seed] = 0
    snk[bg_seed] = hard
    src[bg_seed] = 0

    fimg = img.astype(np.float64)
    edges = []
    diffs = []
    flat = np.arange(h * w, dtype=np.int64).reshape(h, w)
    for dy, dx in ((0, 1), (1, 0)):
        a = flat[:h - dy, :w - dx].ravel()
        b = flat[dy:, dx:].ravel()
        d2 = ((fimg[:h - dy, :w - dx] - fimg[dy:, dx:]) ** 2).sum(axis=-1).ravel()
        edges.append((a, b))
        diffs.append(d2)
    d2_all = np.concatenate(diffs)
    sigma2 = max(d2_all.mean(), 1e-6)
    rows = np.concatenate([e[0] for e in edges])
    colsn = np.concatenate([e[1] for e in edges])
    cap = np.round(cfg.gc_lambda * np.exp(-d2_all / (2.0 * sigma2)) * scale).astype(np.int64)
    return SegGraph(height=h, width=w, source_caps=src, sink_caps=snk,
                    edges=np.stack([rows, colsn, cap], axis=1))


def extract_foreground(ref_frame: np.ndarray, stack: DdiStack,
                       cfg: PipelineConfig = PipelineConfig()) -> np.ndarray:
    """Graph-cut foreground mask for the reference frame."""
    ref_frame = as_image(ref_frame)
    support = np.zeros(ref_frame.shape[:2], dtype=bool)
    for m in stack.maps:
        support |= m > 0
    if support.shape != ref_frame.shape[:2]:
        raise ValueError("frame/stack dimension mismatch")
    fg_seed = morphology(support, "erode", cfg.fg_seed_erode) if cfg.fg_seed_erode else support
    if not fg_seed.any():
        fg_seed = support
    if not fg_seed.any():
        raise ValueError("degenerate seeds: no foreground evidence")
    bg_seed = ~morphology(support, "dilate", cfg.bg_seed_dilate)
    if not bg_seed.any():
        # seeds cover the whole frame: everything is foreground
        return np.ones(ref_frame.shape[:2], dtype=bool)
    graph = build_seg_graph(ref_frame, fg_seed, bg_seed, cfg)
    _, mask = max_flow_min_cut(graph)
    return morphology(mask, "close", cfg.fg_close_radius)
