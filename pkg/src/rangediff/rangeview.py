"""Lossless conversion between lidar point clouds and cylindrical range views.

A range view is a 32 x W raster: rows are the sensor's vertical beams, columns
are yaw bins.  Besides the rasterised depth and intensity, every occupied pixel
keeps the exact pitch and yaw of the point that landed there, which makes
``reconstruct(project(cloud))`` exact up to floating point for clouds without
pixel collisions.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ZeroDepth

H_DEFAULT = 32
W_DEFAULT = 1096
MIN_DEPTH = 1.4
MAX_DEPTH = 54.0
BEAM_STEP = 0.0232

PC_MAGIC = b"RDPC"
PC_VERSION = 1
RV_MAGIC = b"RDRV"
RV_VERSION = 1


@dataclass(frozen=True)
class PointCloud:
    """N lidar returns as an (N, 4) float64 array of x, y, z, intensity."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"point cloud must have shape (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        inten = pts[:, 3]
        if np.any((inten < 0) | (inten > 255)):
            raise ValueError("intensity must lie in [0, 255]")
        object.__setattr__(self, "points", pts)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 4)))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass(frozen=True)
class BeamTable:
    """Ascending pitch angle (radians) of each vertical beam."""

    pitches: np.ndarray = field(
        default_factory=lambda: BEAM_STEP * np.arange(-23, 9, dtype=np.float64)
    )

    def __post_init__(self):
        p = np.asarray(self.pitches, dtype=np.float64)
        if p.ndim != 1 or p.size < 1:
            raise ValueError("beam table must be a non-empty 1-D array")
        if np.any(np.diff(p) <= 0):
            raise ValueError("beam pitches must be strictly increasing")
        object.__setattr__(self, "pitches", p)

    def __len__(self) -> int:
        return self.pitches.size


DEFAULT_BEAMS = BeamTable()


@dataclass
class RangeView:
    """H x W raster of a sweep.

    Unoccupied pixels hold 0 in every float channel; ``occupancy`` is the only
    reliable indicator of whether a pixel carries a return.
    """

    depth: np.ndarray
    intensity: np.ndarray
    occupancy: np.ndarray
    pitch_raw: np.ndarray
    yaw_raw: np.ndarray

    def __post_init__(self):
        shape = np.shape(self.depth)
        for name in ("intensity", "occupancy", "pitch_raw", "yaw_raw"):
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"channel {name} does not match depth shape {shape}")
        self.occupancy = np.asarray(self.occupancy, dtype=bool)

    @classmethod
    def blank(cls, H: int = H_DEFAULT, W: int = W_DEFAULT) -> "RangeView":
        z = lambda: np.zeros((H, W))  # noqa: E731
        return cls(z(), z(), np.zeros((H, W), dtype=bool), z(), z())

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def H(self) -> int:
        return self.depth.shape[0]

    @property
    def W(self) -> int:
        return self.depth.shape[1]

    def copy(self) -> "RangeView":
        return RangeView(self.depth.copy(), self.intensity.copy(), self.occupancy.copy(),
                         self.pitch_raw.copy(), self.yaw_raw.copy())

    def equals(self, other: "RangeView") -> bool:
        """Bit-level equality of every channel."""
        return all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("depth", "intensity", "occupancy", "pitch_raw", "yaw_raw")
        )


def spherical_coords(xyz):
    """Return (depth, yaw, pitch) for one point or an (N, 3) array of points.

    yaw = -atan2(y, x) and pitch = asin(z / depth).  Raises ZeroDepth if any
    point sits at the origin.
    """
    p = np.asarray(xyz, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    depth = np.sqrt(x * x + y * y + z * z)
    if np.any(depth == 0):
        raise ZeroDepth("pitch is undefined for a point at the sensor origin")
    yaw = -np.arctan2(y, x)
    pitch = np.arcsin(np.clip(z / depth, -1.0, 1.0))
    if p.ndim == 1:
        return float(depth), float(yaw), float(pitch)
    return depth, yaw, pitch


def assign_beam(pitch, table: BeamTable = DEFAULT_BEAMS):
    """Index of the nearest beam; exact ties go to the lower index."""
    p = np.asarray(pitch, dtype=np.float64)
    dist = np.abs(p[..., None] - table.pitches)
    # argmin returns the first minimum, i.e. the lower beam on ties
    idx = np.argmin(dist, axis=-1)
    return int(idx) if idx.ndim == 0 else idx


def yaw_to_column(yaw, W: int = W_DEFAULT, clamp: bool = True):
    """floor(yaw / pi * W/2 + W/2), clamped to [0, W-1] unless ``clamp`` is False."""
    y = np.asarray(yaw, dtype=np.float64)
    col = np.floor(y / np.pi * (W / 2) + W / 2).astype(np.int64)
    if clamp:
        col = np.clip(col, 0, W - 1)
    return int(col) if col.ndim == 0 else col


def pixel_assignment(cloud: PointCloud, table: BeamTable = DEFAULT_BEAMS,
                     W: int = W_DEFAULT):
    """Map every point to a pixel and decide which points survive.

    Returns ``(rows, cols, depth, yaw, pitch, keep)`` where the first five are
    per-point arrays (NaN/-1 for points dropped by the depth filter) and
    ``keep`` is a boolean array marking the single winner of each occupied
    pixel: the nearest point, earliest input index on equal depth.
    """
    n = len(cloud)
    rows = np.full(n, -1, dtype=np.int64)
    cols = np.full(n, -1, dtype=np.int64)
    depth = np.full(n, np.nan)
    yaw = np.full(n, np.nan)
    pitch = np.full(n, np.nan)
    keep = np.zeros(n, dtype=bool)
    if n == 0:
        return rows, cols, depth, yaw, pitch, keep

    xyz = cloud.xyz
    d_all = np.sqrt(np.sum(xyz * xyz, axis=1))
    in_range = (d_all >= MIN_DEPTH) & (d_all <= MAX_DEPTH)
    idx = np.nonzero(in_range)[0]
    if idx.size == 0:
        return rows, cols, depth, yaw, pitch, keep

    d, yw, pt = spherical_coords(xyz[idx])
    r = assign_beam(pt, table)
    c = yaw_to_column(yw, W)
    rows[idx], cols[idx], depth[idx], yaw[idx], pitch[idx] = r, c, d, yw, pt

    flat = r * W + c
    order = np.lexsort((idx, d, flat))
    first = np.ones(order.size, dtype=bool)
    first[1:] = flat[order][1:] != flat[order][:-1]
    keep[idx[order[first]]] = True
    return rows, cols, depth, yaw, pitch, keep


def project(cloud: PointCloud, table: BeamTable = DEFAULT_BEAMS,
            W: int = W_DEFAULT) -> RangeView:
    """Rasterise a point cloud into a range view (nearest return wins per pixel)."""
    view = RangeView.blank(len(table), W)
    rows, cols, depth, yaw, pitch, keep = pixel_assignment(cloud, table, W)
    r, c = rows[keep], cols[keep]
    view.depth[r, c] = depth[keep]
    view.intensity[r, c] = cloud.intensity[keep]
    view.pitch_raw[r, c] = pitch[keep]
    view.yaw_raw[r, c] = yaw[keep]
    view.occupancy[r, c] = True
    return view


def reconstruct_xyz(depth, yaw, pitch) -> np.ndarray:
    """Invert the spherical mapping; arrays broadcast, result has a trailing axis of 3."""
    d = np.asarray(depth, dtype=np.float64)
    cp = np.cos(pitch)
    return np.stack([d * np.cos(yaw) * cp, -d * np.sin(yaw) * cp, d * np.sin(pitch)], axis=-1)


def reconstruct(view: RangeView) -> PointCloud:
    """Emit one point per occupied pixel, in row-major pixel order."""
    occ = view.occupancy
    xyz = reconstruct_xyz(view.depth[occ], view.yaw_raw[occ], view.pitch_raw[occ])
    return PointCloud(np.column_stack([xyz, view.intensity[occ]]))


# --------------------------------------------------------------------------
# file formats

def write_cloud(path, cloud: PointCloud) -> None:
    """Binary point cloud: b"RDPC", u32 version, u64 count, count x 4 float32 (LE)."""
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(PC_MAGIC + struct.pack("<IQ", PC_VERSION, pts.shape[0]))
        fh.write(pts.tobytes())


def read_cloud(path) -> PointCloud:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != PC_MAGIC:
        raise FormatError(f"{path}: not an RDPC point-cloud file")
    version, count = struct.unpack_from("<IQ", data, 4)
    if version != PC_VERSION:
        raise FormatError(f"{path}: unsupported RDPC version {version}")
    body = data[16:]
    if len(body) != count * 16:
        raise FormatError(f"{path}: expected {count} records, found {len(body)} payload bytes")
    pts = np.frombuffer(body, dtype="<f4").reshape(count, 4).astype(np.float64)
    return PointCloud(pts)


def read_cloud_csv(path) -> PointCloud:
    """Read ``x,y,z,intensity`` lines; blank lines and ``#`` comments are skipped."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 comma-separated values")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return PointCloud(np.array(rows).reshape(-1, 4))


def write_view(path, view: RangeView) -> None:
    """Binary range view: header then planar float32 channels then occupancy bytes."""
    H, W = view.shape
    buf = io.BytesIO()
    buf.write(RV_MAGIC + struct.pack("<III", RV_VERSION, H, W))
    for ch in (view.depth, view.intensity, view.pitch_raw, view.yaw_raw):
        buf.write(np.ascontiguousarray(ch, dtype="<f4").tobytes())
    buf.write(view.occupancy.astype(np.uint8).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_view(path) -> RangeView:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != RV_MAGIC:
        raise FormatError(f"{path}: not an RDRV range-view file")
    version, H, W = struct.unpack_from("<III", data, 4)
    if version != RV_VERSION:
        raise FormatError(f"{path}: unsupported RDRV version {version}")
    n = H * W
    if len(data) != 16 + 4 * 4 * n + n:
        raise FormatError(f"{path}: payload size does not match {H}x{W}")
    chans = np.frombuffer(data, dtype="<f4", count=4 * n, offset=16).astype(np.float64)
    chans = chans.reshape(4, H, W)
    occ = np.frombuffer(data, dtype=np.uint8, count=n, offset=16 + 16 * n).reshape(H, W)
    return RangeView(chans[0].copy(), chans[1].copy(), occ.astype(bool),
                     chans[2].copy(), chans[3].copy())
