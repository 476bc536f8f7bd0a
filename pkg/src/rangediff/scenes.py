"""Deterministic synthetic lidar sweeps used by the CLI demos and the tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import Box3D
from .rangeview import (DEFAULT_BEAMS, MAX_DEPTH, MIN_DEPTH, W_DEFAULT, BeamTable,
                        PointCloud, reconstruct_xyz)

SENSOR_HEIGHT = 1.84
WALL_RADIUS = 30.0


@dataclass(frozen=True)
class SceneConfig:
    object_points: int = 400
    center: tuple[float, float] = (12.0, 4.0)
    size: tuple[float, float, float] = (4.5, 1.9, 1.6)
    yaw: float = 0.3
    density: float = 0.5  # fraction of columns sampled per background beam


def _intensity(rng, n):
    # lidar intensities are roughly exponential; mean ~ 255/8
    return np.clip(rng.exponential(32.0, n), 0.0, 255.0)


def background(rng: np.random.Generator, table: BeamTable = DEFAULT_BEAMS, W: int = W_DEFAULT,
               density: float = 0.5) -> np.ndarray:
    """Ground-plane rings for downward beams and a cylindrical wall for the rest.

    One return per sampled column, placed at the beam angle and a jittered yaw
    inside the column, so background points never collide with each other.
    """
    rows = []
    col_w = 2 * np.pi / W
    for pitch in table.pitches:
        if pitch < 0:
            depth = SENSOR_HEIGHT / np.sin(-pitch)
        else:
            depth = WALL_RADIUS / np.cos(pitch)
        if not (MIN_DEPTH <= depth <= MAX_DEPTH):
            depth = WALL_RADIUS / np.cos(pitch)
        cols = np.nonzero(rng.random(W) < density)[0]
        yaw = -np.pi + (cols + 0.2 + 0.6 * rng.random(cols.size)) * col_w
        xyz = reconstruct_xyz(np.full(cols.size, depth), yaw, np.full(cols.size, pitch))
        rows.append(np.column_stack([xyz, _intensity(rng, cols.size)]))
    return np.vstack(rows)


def scene_box(cfg: SceneConfig) -> Box3D:
    # bottom face floats 5 cm above the ground so ground returns stay outside
    z = -SENSOR_HEIGHT + 0.05 + cfg.size[2] / 2
    return Box3D.from_pose((cfg.center[0], cfg.center[1], z), cfg.size, cfg.yaw)


def object_points(box: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniformly inside the box volume, brighter than the background."""
    origin, basis = box.edge_basis()
    u = rng.random((n, 3))
    xyz = origin + u @ basis.T
    inten = np.clip(rng.normal(120.0, 30.0, n), 0.0, 255.0)
    return np.column_stack([xyz, inten])


def synth_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> tuple[PointCloud, Box3D, int]:
    """Background sweep plus one box-shaped object.

    Returns the cloud, the object's box, and the number of background points
    (object points follow them in the cloud).
    """
    rng = np.random.default_rng(seed)
    bg = background(rng, density=cfg.density)
    box = scene_box(cfg)
    obj = object_points(box, cfg.object_points, rng)
    return PointCloud(np.vstack([bg, obj])), box, len(bg)


def collision_free_cloud(rng: np.random.Generator, n_points: int, table: BeamTable = DEFAULT_BEAMS,
                         W: int = W_DEFAULT, max_in_range: int | None = None) -> tuple[PointCloud, int]:
    """Cloud whose in-range points occupy distinct pixels.

    At most ``max_in_range`` points (default: 80% of the grid) land inside the
    depth bounds, each in its own pixel with pitch and yaw well inside the cell.
    Any remaining points are placed outside the depth bounds and are filtered
    by projection.  Returns the cloud and the in-range count.
    """
    H = len(table)
    cap = int(0.8 * H * W) if max_in_range is None else max_in_range
    k = min(n_points, cap)
    cells = rng.choice(H * W, size=k, replace=False)
    r, c = np.divmod(cells, W)
    spacing = np.min(np.diff(table.pitches))
    pitch = table.pitches[r] + (rng.random(k) - 0.5) * 0.8 * spacing
    yaw = -np.pi + (c + 0.1 + 0.8 * rng.random(k)) * (2 * np.pi / W)
    depth = rng.uniform(MIN_DEPTH, MAX_DEPTH, k)
    inside = np.column_stack([reconstruct_xyz(depth, yaw, pitch), rng.uniform(0, 255, k)])

    m = n_points - k
    d_out = np.where(rng.random(m) < 0.5, rng.uniform(0.05, MIN_DEPTH * 0.99, m),
                     rng.uniform(MAX_DEPTH * 1.01, 120.0, m))
    out = np.column_stack([
        reconstruct_xyz(d_out, rng.uniform(-np.pi, np.pi, m), rng.uniform(-0.5, 0.2, m)),
        rng.uniform(0, 255, m),
    ])
    pts = np.vstack([inside, out])
    return PointCloud(pts[rng.permutation(n_points)]), k
