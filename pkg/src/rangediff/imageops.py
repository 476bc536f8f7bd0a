"""Pixel-space helpers: Sobel high-frequency maps, binary erosion, Gaussian
feathered compositing, range-view compositing and PGM (P5) image I/O."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .boxes import Box3D, points_in_box
from .errors import FormatError, SizeMismatch
from .rangeview import RangeView, reconstruct_xyz

SOBEL_H = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_V = SOBEL_H.T.copy()


def correlate3x3(img, kernel) -> np.ndarray:
    """3x3 cross-correlation with edge replication at the border."""
    img = np.asarray(img, dtype=np.float64)
    p = np.pad(img, 1, mode="edge")
    H, W = img.shape
    out = np.zeros_like(img)
    for dr in range(3):
        for dc in range(3):
            if kernel[dr, dc]:
                out += kernel[dr, dc] * p[dr:dr + H, dc:dc + W]
    return out


def sobel_sum(img) -> np.ndarray:
    """I * K_h + I * K_v computed separably (smooth, then difference), edge-replicated.

    Differencing two identical smoothed values gives an exact zero, so flat
    regions produce no round-off response.
    """
    p = np.pad(np.asarray(img, dtype=np.float64), 1, mode="edge")
    smooth_v = p[:-2] + 2.0 * p[1:-1] + p[2:]           # [1, 2, 1] down the rows
    smooth_h = p[:, :-2] + 2.0 * p[:, 1:-1] + p[:, 2:]  # [1, 2, 1] along the columns
    gx = smooth_v[:, 2:] - smooth_v[:, :-2]
    gy = smooth_h[2:] - smooth_h[:-2]
    return gx + gy


def erode(mask, radius: int) -> np.ndarray:
    """A pixel survives iff every pixel within Chebyshev distance ``radius`` is set.

    Pixels beyond the grid count as unset.
    """
    m = np.asarray(mask).astype(bool)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return m.astype(np.uint8)
    p = np.pad(m, radius, constant_values=False)
    k = 2 * radius + 1
    # separable min filter: rows then columns
    rows = np.lib.stride_tricks.sliding_window_view(p, k, axis=1).all(axis=-1)
    out = np.lib.stride_tricks.sliding_window_view(rows, k, axis=0).all(axis=-1)
    return out.astype(np.uint8)


def sobel_hf_map(img, mask, erode_radius: int = 0) -> np.ndarray:
    """(I * K_h + I * K_v) . I . erode(M), clamped to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask)
    if img.shape != mask.shape:
        raise SizeMismatch(f"image {img.shape} and mask {mask.shape} differ in size")
    edges = sobel_sum(img)
    return np.clip(edges * img * erode(mask, erode_radius), 0.0, 1.0)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalised Gaussian taps truncated at 3 sigma."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    with np.errstate(over="ignore", divide="ignore"):  # tiny sigma: off-centre taps -> 0
        k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(grid, sigma: float) -> np.ndarray:
    """Separable blur with zero padding outside the grid."""
    g = np.asarray(grid, dtype=np.float64)
    if sigma <= 0:
        return g.copy()
    k = gaussian_kernel1d(sigma)
    r = k.size // 2
    p = np.pad(g, r)
    tmp = sum(k[i] * p[:, i:i + g.shape[1]] for i in range(k.size))
    return sum(k[i] * tmp[i:i + g.shape[0], :] for i in range(k.size))


def feather_weights(mask, sigma: float) -> np.ndarray:
    return np.clip(gaussian_blur(np.asarray(mask, dtype=np.float64), sigma), 0.0, 1.0)


def feather_composite(dst, src, mask, sigma: float = 2.0) -> np.ndarray:
    """Blend ``src`` into ``dst`` with a Gaussian-softened mask as the weight."""
    dst = np.asarray(dst, dtype=np.float64)
    src = np.asarray(src, dtype=np.float64)
    if dst.shape != src.shape or dst.shape[:2] != np.shape(mask):
        raise SizeMismatch("dst, src and mask must share a size")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    w = feather_weights(mask, sigma)
    if dst.ndim == 3:
        w = w[..., None]
    return w * src + (1.0 - w) * dst


def view_points_in_box(view: RangeView, box: Box3D) -> np.ndarray:
    """Boolean H x W map of occupied pixels whose 3-D point lies inside ``box``."""
    out = np.zeros(view.shape, dtype=bool)
    occ = view.occupancy
    if occ.any():
        xyz = reconstruct_xyz(view.depth[occ], view.yaw_raw[occ], view.pitch_raw[occ])
        out[occ] = points_in_box(xyz, box)
    return out


def composite_replacement(original: RangeView, edited: RangeView, box: Box3D,
                          m_points=None) -> np.ndarray:
    """Pixels that take the edited value: in ``m_points`` or edited point inside the box."""
    if original.shape != edited.shape:
        raise SizeMismatch(f"views differ in size: {original.shape} vs {edited.shape}")
    if m_points is None:
        m_points = view_points_in_box(original, box)
    m_points = np.asarray(m_points, dtype=bool)
    if m_points.shape != original.shape:
        raise SizeMismatch("m_points does not match the view size")
    return m_points | view_points_in_box(edited, box)


def range_composite(original: RangeView, edited: RangeView, box: Box3D,
                    m_points=None) -> RangeView:
    """Write edited pixels into the original view where the replacement rule holds.

    ``m_points`` defaults to the original pixels whose points fall inside the
    box.  Every channel, occupancy included, is copied for replaced pixels.
    """
    replace = composite_replacement(original, edited, box, m_points)
    out = original.copy()
    for name in ("depth", "intensity", "occupancy", "pitch_raw", "yaw_raw"):
        getattr(out, name)[replace] = getattr(edited, name)[replace]
    return out


def write_pgm(path, img, vmin: float | None = None, vmax: float | None = None) -> None:
    """8-bit binary graymap.  Values are mapped from [vmin, vmax] (default [0, 1])."""
    a = np.asarray(img, dtype=np.float64)
    lo = 0.0 if vmin is None else vmin
    hi = 1.0 if vmax is None else vmax
    scaled = np.clip((a - lo) / (hi - lo if hi > lo else 1.0), 0.0, 1.0)
    data = np.round(scaled * 255).astype(np.uint8)
    H, W = data.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 graymap into floats in [0, 1]; 8- and 16-bit depths are accepted."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    W, H, maxval = (int(t) for t in tokens[1:])
    dtype = np.uint8 if maxval < 256 else ">u2"
    data = np.frombuffer(raw, dtype=dtype, count=H * W, offset=pos).reshape(H, W)
    return data.astype(np.float64) / maxval
