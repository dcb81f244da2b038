"""Raster primitives shared by every pipeline stage.

Conventions: color images are uint8 arrays of shape (H, W, 3) in RGB order,
scalar maps are float64 (H, W), masks are bool (H, W).  Geometry uses
(x, y) = (column, row) vectors with y growing downward; angles are measured
with atan2(dy, dx) in that frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import scipy.ndimage as ndi
from scipy.signal import fftconvolve

from . import _kernels

_INF_CLAMP = 1e30


# ---------------------------------------------------------------------------
# validation helpers

def as_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("expected uint8 RGB image of shape (H, W, 3)")
    return img


def as_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.dtype != np.bool_:
        raise ValueError("expected bool mask of shape (H, W)")
    return mask


def as_scalar_map(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("expected scalar map of shape (H, W)")
    return m


def to_gray(img) -> np.ndarray:
    """Rec.601 luminance as float64."""
    img = as_image(img).astype(np.float64)
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


# ---------------------------------------------------------------------------
# morphology

def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy * yy + xx * xx) <= r * r


def morphology(mask, op: str, radius: int) -> np.ndarray:
    mask = as_mask(mask)
    if radius < 1:
        raise ValueError("radius must be >= 1")
    se = disk(radius)
    if op == "erode":
        return ndi.binary_erosion(mask, se, border_value=0)
    if op == "dilate":
        return ndi.binary_dilation(mask, se, border_value=0)
    if op == "open":
        return ndi.binary_dilation(ndi.binary_erosion(mask, se, border_value=0), se, border_value=0)
    if op == "close":
        return ndi.binary_erosion(ndi.binary_dilation(mask, se, border_value=0), se, border_value=0)
    raise ValueError(f"unknown morphology op {op!r}")


# ---------------------------------------------------------------------------
# blurs and distance transforms

def gaussian_kernel1d(sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(m, sigma: float) -> np.ndarray:
    """Separable Gaussian, kernel truncated at 3*sigma, zero padding."""
    m = as_scalar_map(m)
    k = gaussian_kernel1d(sigma)
    out = ndi.convolve1d(m, k, axis=0, mode="constant", cval=0.0)
    return ndi.convolve1d(out, k, axis=1, mode="constant", cval=0.0)


def distance_transform(mask) -> np.ndarray:
    """Exact Euclidean distance of each pixel to the nearest True pixel."""
    mask = as_mask(mask)
    if not mask.any():
        raise ValueError("no reference pixels")
    return ndi.distance_transform_edt(~mask)


def nearest_true_indices(mask) -> Tuple[np.ndarray, np.ndarray]:
    """(iy, ix) of the nearest True pixel for every pixel."""
    mask = as_mask(mask)
    if not mask.any():
        raise ValueError("no reference pixels")
    iy, ix = ndi.distance_transform_edt(~mask, return_distances=False, return_indices=True)
    return iy, ix


def generalized_distance_transform(cost, weights, offset=(0.0, 0.0)):
    """min_y [cost(y) + wy*(py-y)^2 + wx*(px-x)^2] sampled at grid + offset.

    Returns (dist, argy, argx).  Infinite costs are allowed.
    """
    cost = as_scalar_map(cost)
    wy, wx = float(weights[0]), float(weights[1])
    if wy < 0 or wx < 0:
        raise ValueError("weights must be >= 0")
    f = np.minimum(cost, _INF_CLAMP)
    return _kernels.gdt_2d(f, wy, wx, float(offset[0]), float(offset[1]))


# ---------------------------------------------------------------------------
# color conversions

_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_SRGB = np.linalg.inv(_SRGB_TO_XYZ)
_D65 = np.array([0.95047, 1.0, 1.08883])


def _srgb_linearize(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _srgb_delinearize(c):
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def rgb_to_hsv(img) -> np.ndarray:
    """H in degrees [0, 360), S and V in [0, 1]; float64 output."""
    rgb = as_image(img).astype(np.float64) / 255.0
    v = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    c = v - mn
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    with np.errstate(invalid="ignore", divide="ignore"):
        h = np.where(
            c == 0, 0.0,
            np.where(v == r, (g - b) / np.where(c == 0, 1.0, c) % 6.0,
                     np.where(v == g, (b - r) / np.where(c == 0, 1.0, c) + 2.0,
                              (r - g) / np.where(c == 0, 1.0, c) + 4.0)))
    return np.stack([h * 60.0, s, v], axis=-1)


def _xyz_f(t):
    d = 6.0 / 29.0
    return np.where(t > d ** 3, np.cbrt(t), t / (3 * d * d) + 4.0 / 29.0)


def _xyz_f_inv(t):
    d = 6.0 / 29.0
    return np.where(t > d, t ** 3, 3 * d * d * (t - 4.0 / 29.0))


def rgb_to_lab(img) -> np.ndarray:
    """sRGB (uint8) to CIELAB under D65, float64."""
    rgb = as_image(img).astype(np.float64) / 255.0
    xyz = _srgb_linearize(rgb) @ _SRGB_TO_XYZ.T
    f = _xyz_f(xyz / _D65)
    l = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([l, a, b], axis=-1)


def lab_to_rgb(lab) -> np.ndarray:
    """CIELAB (D65) back to uint8 sRGB, out-of-gamut values clipped."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_xyz_f_inv(fx), _xyz_f_inv(fy), _xyz_f_inv(fz)], axis=-1) * _D65
    rgb = _srgb_delinearize(xyz @ _XYZ_TO_SRGB.T)
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def color_convert(img, target: str) -> np.ndarray:
    if target == "HSV":
        return rgb_to_hsv(img)
    if target == "Lab":
        return rgb_to_lab(img)
    raise ValueError(f"unknown target color space {target!r}")


# ---------------------------------------------------------------------------
# edges

def edge_map(img, low: float, high: float) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient edges with NMS and hysteresis.

    Returns (mask, orientation) where orientation holds the gradient
    direction mod pi at edge pixels (0 elsewhere).
    """
    if not (0 <= low <= high):
        raise ValueError("need 0 <= low <= high")
    gray = to_gray(img)
    gx = ndi.sobel(gray, axis=1, mode="nearest") / 8.0
    gy = ndi.sobel(gray, axis=0, mode="nearest") / 8.0
    mag = np.hypot(gx, gy)
    theta = np.arctan2(gy, gx) % math.pi

    # non-maximum suppression along the quantized gradient direction
    sector = ((theta + math.pi / 8.0) // (math.pi / 4.0)).astype(np.int64) % 4
    offsets = [(0, 1), (1, 1), (1, 0), (1, -1)]  # E, SE, S, SW in (dy, dx)
    h, w = mag.shape
    padded = np.pad(mag, 1, mode="constant")
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dy, dx) in enumerate(offsets):
        n1 = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        n2 = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        sel = sector == s
        keep |= sel & (mag >= n1) & (mag > n2)
    strong = keep & (mag >= high)
    weak = keep & (mag >= low)

    labels, n = ndi.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        edges = np.zeros_like(weak)
    else:
        keep_ids = np.unique(labels[strong])
        keep_ids = keep_ids[keep_ids > 0]
        edges = np.isin(labels, keep_ids)
    orient = np.where(edges, theta, 0.0)
    return edges, orient


# ---------------------------------------------------------------------------
# thinning

def thin(mask) -> np.ndarray:
    """Topology-preserving skeletonization iterated to a fixpoint."""
    from skimage.morphology import skeletonize
    mask = as_mask(mask)
    cur = mask
    while True:
        nxt = skeletonize(cur).astype(bool)
        if np.array_equal(nxt, cur):
            return cur
        cur = nxt


def boundary_pixels(mask) -> np.ndarray:
    """Outer 8-connected boundary: pixels just outside the mask."""
    mask = as_mask(mask)
    return ndi.binary_dilation(mask, np.ones((3, 3), dtype=bool)) & ~mask


# ---------------------------------------------------------------------------
# Gabor jets

@dataclass(frozen=True)
class GaborBank:
    n_scales: int = 5
    n_orientations: int = 8
    sigma: float = 2.0 * math.pi
    freq_max: float = math.pi / 2.0

    @property
    def n_bands(self) -> int:
        return self.n_scales * self.n_orientations

    def wave_vectors(self) -> np.ndarray:
        out = np.empty((self.n_bands, 2))
        i = 0
        for s in range(self.n_scales):
            k = self.freq_max / (math.sqrt(2.0) ** s)
            for o in range(self.n_orientations):
                phi = o * math.pi / self.n_orientations
                out[i] = (k * math.cos(phi), k * math.sin(phi))
                i += 1
        return out

    def kernels(self):
        """DC-free complex kernels, one per band."""
        kers = []
        for kx, ky in self.wave_vectors():
            k2 = kx * kx + ky * ky
            radius = int(math.ceil(3.0 * self.sigma / math.sqrt(k2)))
            yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1].astype(np.float64)
            env = (k2 / (self.sigma ** 2)) * np.exp(-k2 * (xx * xx + yy * yy) / (2.0 * self.sigma ** 2))
            wave = np.exp(1j * (kx * xx + ky * yy)) - math.exp(-self.sigma ** 2 / 2.0)
            ker = env * wave
            ker -= ker.mean()  # exact discrete DC removal
            kers.append(ker)
        return kers


@dataclass
class JetImage:
    responses: np.ndarray  # complex64, (H, W, n_bands)
    bank: GaborBank

    @property
    def magnitudes(self) -> np.ndarray:
        return np.abs(self.responses).astype(np.float64)

    def normalized_magnitudes(self) -> np.ndarray:
        """Per-pixel L2-normalized magnitude vectors (zero jets stay zero)."""
        mags = self.magnitudes
        norm = np.linalg.norm(mags, axis=-1, keepdims=True)
        return mags / np.where(norm > 0, norm, 1.0)


def gabor_transform(img, bank: GaborBank = GaborBank()) -> JetImage:
    """Per-pixel complex responses; edge padding keeps kernels DC-free at
    the borders too."""
    if bank.n_scales < 1 or bank.n_orientations < 1:
        raise ValueError("bank needs >= 1 scale and orientation")
    gray = to_gray(img)
    h, w = gray.shape
    resp = np.empty(gray.shape + (bank.n_bands,), dtype=np.complex64)
    for i, ker in enumerate(bank.kernels()):
        r = ker.shape[0] // 2
        padded = np.pad(gray, r, mode="edge")
        full = fftconvolve(padded, ker, mode="same")
        resp[..., i] = full[r:r + h, r:r + w]
    return JetImage(responses=resp, bank=bank)


def gabor_jets_at(jets: JetImage, points: np.ndarray) -> np.ndarray:
    """Normalized magnitude jets at integer (x, y) points; out of range -> zeros."""
    mags = jets.normalized_magnitudes()
    h, w = mags.shape[:2]
    pts = np.rint(np.asarray(points, dtype=np.float64)).astype(np.int64)
    out = np.zeros((len(pts), mags.shape[2]))
    ok = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
    out[ok] = mags[pts[ok, 1], pts[ok, 0]]
    return out


# ---------------------------------------------------------------------------
# perimeter geometry (shared by limb templates and matching)

def perimeter_points(mask, orientation_radius: int = 2):
    """Thinned outer-perimeter points with local tangent orientations.

    Returns (points, phis): points are (N, 2) float (x, y) pixel coordinates,
    phis the tangent direction mod pi estimated from neighboring perimeter
    pixels by local PCA.
    """
    mask = as_mask(mask)
    boundary = thin(boundary_pixels(mask))
    ys, xs = np.nonzero(boundary)
    if len(ys) == 0:
        raise ValueError("empty perimeter")
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    phis = np.zeros(len(pts))
    r = orientation_radius
    for i, (x, y) in enumerate(pts):
        sel = (np.abs(pts[:, 0] - x) <= r) & (np.abs(pts[:, 1] - y) <= r)
        local = pts[sel]
        if len(local) < 2:
            phis[i] = 0.0
            continue
        d = local - local.mean(axis=0)
        cov = d.T @ d
        evals, evecs = np.linalg.eigh(cov)
        v = evecs[:, int(np.argmax(evals))]
        phis[i] = math.atan2(v[1], v[0]) % math.pi
    return pts, phis


# ---------------------------------------------------------------------------
# file I/O

def read_image(path) -> np.ndarray:
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_image(path, img) -> None:
    from PIL import Image
    Image.fromarray(as_image(img), mode="RGB").save(path)


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P6":
            raise ValueError("not a binary PPM (P6) file")
        fields = []
        while len(fields) < 3:
            line = fh.readline()
            if line.startswith(b"#"):
                continue
            fields.extend(line.split())
        w, h, maxval = (int(v) for v in fields)
        if maxval != 255:
            raise ValueError("only 8-bit PPM supported")
        data = fh.read(w * h * 3)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def write_ppm(path, img) -> None:
    img = as_image(img)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def write_heatmap(path, m) -> None:
    """Scalar map debug dump as a 16-bit grayscale PNG (min..max stretched)."""
    from PIL import Image
    m = as_scalar_map(m)
    lo, hi = float(m.min()), float(m.max())
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    q = np.round((m - lo) * scale).astype(np.uint16)
    Image.fromarray(q, mode="I;16").save(path)
