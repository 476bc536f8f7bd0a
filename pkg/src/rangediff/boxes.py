"""3D boxes: projection into camera and range views, edit masks, zoom-in crops,
and Fourier embeddings of box coordinates.

Corner order for every box is the bottom face (c0..c3, one winding) followed
by the top face (c4..c7) with c4 directly above c0, c5 above c1 and so on.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AllBehindCamera, DegenerateBox, EmptyBox, FormatError
from .rangeview import (DEFAULT_BEAMS, H_DEFAULT, W_DEFAULT, BeamTable,
                        assign_beam, spherical_coords, yaw_to_column)

DEFAULT_MIN_COVERAGE = 0.2
DEFAULT_FREQUENCIES = (2.0 ** np.arange(8)) * np.pi


class DegenerateHullWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Box3D:
    corners: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.corners, dtype=np.float64)
        if c.shape != (8, 3) or not np.all(np.isfinite(c)):
            raise ValueError("a box needs 8 finite (x, y, z) corners")
        bottom_n = np.cross(c[1] - c[0], c[3] - c[0])
        top_n = np.cross(c[5] - c[4], c[7] - c[4])
        scale = max(float(np.linalg.norm(bottom_n) * np.linalg.norm(top_n)), 1e-300)
        if np.linalg.norm(np.cross(bottom_n, top_n)) / scale > 1e-6:
            raise ValueError("bottom and top faces of the box are not parallel")
        object.__setattr__(self, "corners", c)

    @classmethod
    def from_pose(cls, center, size, yaw: float = 0.0) -> "Box3D":
        """Box from its centre, (length, width, height) and heading about +z."""
        l, w, h = size
        x = np.array([1, 1, -1, -1]) * l / 2
        y = np.array([1, -1, -1, 1]) * w / 2
        cy, sy = math.cos(yaw), math.sin(yaw)
        xr, yr = cy * x - sy * y, sy * x + cy * y
        bottom = np.column_stack([xr, yr, np.full(4, -h / 2)])
        top = bottom + [0.0, 0.0, h]
        return cls(np.vstack([bottom, top]) + np.asarray(center, dtype=np.float64))

    @property
    def center(self) -> np.ndarray:
        return self.corners.mean(axis=0)

    def edge_basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Origin corner and the three edge vectors spanning the box (as columns)."""
        c = self.corners
        return c[0], np.column_stack([c[1] - c[0], c[3] - c[0], c[4] - c[0]])

    def translated(self, offset) -> "Box3D":
        return Box3D(self.corners + np.asarray(offset, dtype=np.float64))


def points_in_box(points, box: Box3D, tol: float = 1e-9) -> np.ndarray:
    """Vectorised inclusive membership test for an (N, 3) array."""
    origin, basis = box.edge_basis()
    if abs(np.linalg.det(basis)) < 1e-12 * max(np.abs(basis).max(), 1.0) ** 3:
        raise DegenerateBox("box edges are linearly dependent")
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if p.size == 0:
        return np.zeros(0, dtype=bool)
    coords = np.linalg.solve(basis, (p - origin).T).T
    return np.all((coords >= -tol) & (coords <= 1 + tol), axis=1)


def point_in_box(p, box: Box3D) -> bool:
    return bool(points_in_box(np.asarray(p)[None, :], box)[0])


@dataclass(frozen=True)
class CameraModel:
    """3x4 projective matrix; pixel = (P @ [x, y, z, 1]) after perspective division."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 4):
            raise ValueError("camera matrix must be 3x4")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def pinhole(cls, focal: float = 1.0, cx: float = 0.0, cy: float = 0.0) -> "CameraModel":
        return cls(np.array([[focal, 0, cx, 0], [0, focal, cy, 0], [0, 0, 1, 0]], dtype=float))


@dataclass(frozen=True)
class ProjectedBoxCam:
    points: np.ndarray   # (8, 2) pixel coordinates (u, v)
    behind: np.ndarray   # (8,) True where projective depth <= 0
    depth: np.ndarray    # (8,) projective depth


@dataclass(frozen=True)
class ProjectedBoxRange:
    points: np.ndarray   # (8, 3) of (row, col, depth); col is not clamped to the grid

    @property
    def rows(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def cols(self) -> np.ndarray:
        return self.points[:, 1]

    @property
    def depth(self) -> np.ndarray:
        return self.points[:, 2]


def project_box_camera(box: Box3D, cam: CameraModel) -> ProjectedBoxCam:
    homog = np.column_stack([box.corners, np.ones(8)]) @ cam.matrix.T
    w = homog[:, 2]
    behind = w <= 0
    if behind.all():
        raise AllBehindCamera("every box corner is behind the camera")
    # behind-camera corners are flagged; their coordinates only stay finite
    safe_w = np.where(behind, np.maximum(np.abs(w), 1e-9), w)
    return ProjectedBoxCam(homog[:, :2] / safe_w[:, None], behind, w)


def project_box_range(box: Box3D, table: BeamTable = DEFAULT_BEAMS,
                      W: int = W_DEFAULT) -> ProjectedBoxRange:
    depth, yaw, pitch = spherical_coords(box.corners)
    rows = assign_beam(pitch, table)
    cols = yaw_to_column(yaw, W, clamp=False)
    return ProjectedBoxRange(np.column_stack([rows, cols, depth]).astype(np.float64))


def _hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise convex hull (monotone chain); collinear points dropped."""
    pts = np.unique(points, axis=0)
    if len(pts) < 3:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def rasterize_mask(points, D: int | tuple[int, int]) -> np.ndarray:
    """Fill the convex hull of 2-D points (x = column, y = row) into a zero grid.

    Pixel (r, c) is set when its centre (c + 0.5, r + 0.5) lies inside the hull
    or on its boundary.  ``D`` is a side length or an (H, W) shape.  All-collinear
    input produces an empty mask and a :class:`DegenerateHullWarning`.
    """
    H, W = (D, D) if np.isscalar(D) else D
    if H < 1 or W < 1:
        raise ValueError("mask side must be >= 1")
    mask = np.zeros((H, W), dtype=np.uint8)
    hull = _hull(np.asarray(points, dtype=np.float64).reshape(-1, 2))
    if len(hull) < 3:
        warnings.warn("projected points are collinear; mask left empty", DegenerateHullWarning)
        return mask

    x0, y0 = hull.min(axis=0)
    x1, y1 = hull.max(axis=0)
    c_lo, c_hi = max(int(np.floor(x0 - 0.5)), 0), min(int(np.ceil(x1 - 0.5)), W - 1)
    r_lo, r_hi = max(int(np.floor(y0 - 0.5)), 0), min(int(np.ceil(y1 - 0.5)), H - 1)
    if c_lo > c_hi or r_lo > r_hi:
        return mask
    cc, rr = np.meshgrid(np.arange(c_lo, c_hi + 1) + 0.5, np.arange(r_lo, r_hi + 1) + 0.5)
    inside = np.ones(cc.shape, dtype=bool)
    scale = np.abs(hull).max() + 1.0
    for a, b in zip(hull, np.roll(hull, -1, axis=0)):
        cr = (b[0] - a[0]) * (rr - a[1]) - (b[1] - a[1]) * (cc - a[0])
        inside &= cr >= -1e-12 * scale * scale
    mask[r_lo:r_hi + 1, c_lo:c_hi + 1] = inside
    return mask


def mask_complement(mask) -> np.ndarray:
    m = np.asarray(mask)
    return (np.ones_like(m) - m).astype(m.dtype)


@dataclass(frozen=True)
class CameraViewport:
    """Square crop [x0, x0+side) x [y0, y0+side) of an image, resized to D x D."""

    x0: int
    y0: int
    side: int
    D: int

    @property
    def scale(self) -> float:
        return self.D / self.side

    def to_crop(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        return (p - [self.x0, self.y0]) * self.scale

    def from_crop(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        return p / self.scale + [self.x0, self.y0]

    def crop(self, image) -> tuple[np.ndarray, np.ndarray]:
        """Nearest-neighbour resample of the crop; returns (patch, valid) where
        ``valid`` is False on padding that falls outside the source image."""
        img = np.asarray(image)
        Hi, Wi = img.shape[:2]
        src = self.x0 + np.floor((np.arange(self.D) + 0.5) / self.scale).astype(int)
        srcy = self.y0 + np.floor((np.arange(self.D) + 0.5) / self.scale).astype(int)
        vx = (src >= 0) & (src < Wi)
        vy = (srcy >= 0) & (srcy < Hi)
        patch = img[np.clip(srcy, 0, Hi - 1)][:, np.clip(src, 0, Wi - 1)]
        valid = vy[:, None] & vx[None, :]
        patch = np.where(valid.reshape(valid.shape + (1,) * (patch.ndim - 2)), patch, 0)
        return patch, valid


def zoom_viewport_camera(proj: ProjectedBoxCam | np.ndarray, image_size, D: int,
                         min_coverage: float = DEFAULT_MIN_COVERAGE):
    """Square zoom-in crop centred on the box so it covers >= ``min_coverage`` of it.

    The box rectangle is clipped to the image first.  The crop side is the
    largest square meeting the coverage bound, never smaller than the box's
    tight square and never larger than the longer image side.  Returns the
    viewport and the box points mapped into the D x D crop frame.
    """
    pts = proj.points if isinstance(proj, ProjectedBoxCam) else np.asarray(proj, dtype=float)
    Hi, Wi = image_size
    if not (0 < min_coverage <= 1):
        raise ValueError("min_coverage must lie in (0, 1]")
    lo = np.clip(pts.min(axis=0), [0, 0], [Wi, Hi])
    hi = np.clip(pts.max(axis=0), [0, 0], [Wi, Hi])
    w, h = hi - lo
    if w <= 0 or h <= 0:
        raise EmptyBox("projected box has no 2-D extent inside the image")
    tight = int(math.ceil(max(w, h) - 1e-9))
    by_coverage = int(math.floor(math.sqrt(w * h / min_coverage) + 1e-9))
    side = max(tight, min(by_coverage, max(Hi, Wi)))
    cx, cy = (lo + hi) / 2
    vp = CameraViewport(int(round(cx - side / 2)), int(round(cy - side / 2)), side, D)
    return vp, vp.to_crop(pts)


@dataclass(frozen=True)
class RangeViewport:
    """Width-wise crop of a range view (all rows kept), resized to D x D.

    Columns wrap around the sweep, so a crop may straddle yaw = +-pi.
    """

    c0: int
    width: int
    H: int
    W: int
    D: int

    @property
    def columns(self) -> np.ndarray:
        return (self.c0 + np.arange(self.width)) % self.W

    def _src_index(self) -> np.ndarray:
        return np.floor((np.arange(self.D) + 0.5) * self.width / self.D).astype(int)

    def to_crop(self, rows, cols):
        c = np.asarray(cols, dtype=np.float64) - self.c0
        c = np.where(c < 0, c + self.W, c)
        return np.asarray(rows, dtype=np.float64) * self.D / self.H, c * self.D / self.width

    def from_crop(self, rows, cols):
        r = np.asarray(rows, dtype=np.float64) * self.H / self.D
        return r, np.asarray(cols, dtype=np.float64) * self.width / self.D + self.c0

    def crop(self, channel) -> np.ndarray:
        """Cut the crop out of an H x W channel and resize it to D x D.

        Rows are replicated by the integer factor D/H; columns are resampled by
        nearest neighbour.
        """
        ch = np.asarray(channel, dtype=np.float64)
        cropped = ch[:, self.columns][:, self._src_index()]
        return np.repeat(cropped, self.D // self.H, axis=0)

    def uncrop(self, image) -> np.ndarray:
        """Map a D x D image back to the H x width crop.

        Rows are average-pooled by D/H; every crop column takes the mean of the
        image columns that sampled it (nearest image column if none did).
        """
        img = np.asarray(image, dtype=np.float64)
        f = self.D // self.H
        rows = img.reshape(self.H, f, self.D).mean(axis=1) if f > 1 else img
        src = self._src_index()
        sums = np.zeros((self.H, self.width))
        counts = np.zeros(self.width)
        np.add.at(sums.T, src, rows.T)
        np.add.at(counts, src, 1)
        out = np.empty((self.H, self.width))
        hit = counts > 0
        out[:, hit] = sums[:, hit] / counts[hit]
        if (~hit).any():
            nearest = np.clip(np.floor((np.nonzero(~hit)[0] + 0.5) * self.D / self.width), 0,
                              self.D - 1).astype(int)
            out[:, ~hit] = rows[:, nearest]
        return out


def unwrap_columns(cols, W: int) -> np.ndarray:
    """Shift columns by multiples of W so they occupy the shortest arc of the sweep.

    The arc is the complement of the widest circular gap between the sorted
    columns; the result is contiguous and may run past W.
    """
    c = np.asarray(cols, dtype=np.float64)
    m = np.mod(c, W)
    if m.size < 2:
        return m
    s = np.sort(m)
    gaps = np.diff(np.concatenate([s, [s[0] + W]]))
    start = s[(int(np.argmax(gaps)) + 1) % s.size]
    return np.where(m < start, m + W, m)


def zoom_viewport_range(proj: ProjectedBoxRange, view_W: int = W_DEFAULT, D: int = 256,
                        H: int = H_DEFAULT, min_coverage: float = DEFAULT_MIN_COVERAGE):
    """Width-wise crop around the box's column span, covering >= min_coverage of the width.

    Returns the viewport and the box corners as (row, col, depth) in the D x D frame.
    """
    if D % H:
        raise ValueError(f"D={D} must be a multiple of the view height {H}")
    cols = np.asarray(proj.cols, dtype=np.float64)
    if cols.size == 0:
        raise EmptyBox("box has no corners")
    cols = unwrap_columns(cols, view_W)
    lo, hi = cols.min(), cols.max()
    span = int(hi - lo) + 1
    width = min(view_W, max(span, int(math.floor(span / min_coverage))))
    if width >= view_W:
        vp = RangeViewport(0, view_W, H, view_W, D)
    else:
        c0 = int(math.floor((lo + hi + 1) / 2 - width / 2)) % view_W
        vp = RangeViewport(c0, width, H, view_W, D)
    r, c = vp.to_crop(proj.rows, proj.cols)
    return vp, np.column_stack([r, c, proj.depth])


def fourier_embed(coords, frequencies=DEFAULT_FREQUENCIES) -> np.ndarray:
    """sin/cos features of each coordinate at each frequency.

    Layout is coordinate-major, frequency-minor, and sin before cos within a
    pair: [sin(w0 x0), cos(w0 x0), sin(w1 x0), cos(w1 x0), ..., cos(wL xK)].
    Leading batch axes on ``coords`` are preserved.
    """
    x = np.atleast_1d(np.asarray(coords, dtype=np.float64))
    w = np.asarray(frequencies, dtype=np.float64).ravel()
    if w.size < 1:
        raise ValueError("need at least one frequency")
    ang = x[..., :, None] * w
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    return out.reshape(x.shape[:-1] + (-1,))


def read_box_csv(path) -> Box3D:
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if arr.shape != (8, 3):
        raise FormatError(f"{path}: expected 8 rows x 3 columns, got {arr.shape}")
    return Box3D(arr)


def write_box_csv(path, box: Box3D) -> None:
    np.savetxt(path, box.corners, delimiter=",", fmt="%.9f")


def read_camera_csv(path) -> CameraModel:
    arr = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
    if arr.shape != (3, 4):
        raise FormatError(f"{Path(path)}: expected a 3x4 matrix, got {arr.shape}")
    return CameraModel(arr)
