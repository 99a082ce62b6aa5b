"""Pinhole camera model, point-to-pixel projection and the depth-tested
point/pixel correspondence table.

Pixel conventions: u is the column coordinate, v the row coordinate,
u = fx * x/z + cx in the camera frame (x right, y down, z forward).
Points are assigned to the nearest integer pixel center; a z-buffer keeps
the closest point per pixel, ties within 1e-9 m resolved toward the lower
point index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

NEAR_PLANE = 0.01
DEPTH_TIE_EPS = 1e-9


@dataclass(frozen=True)
class Camera:
    K: np.ndarray  # 3x3 intrinsics, K[2,2] == 1, upper triangular
    V: np.ndarray  # 4x4 world-to-camera rigid transform
    height: int
    width: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        V = np.asarray(self.V, dtype=np.float64)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "V", V)
        if K.shape != (3, 3) or V.shape != (4, 4):
            raise ValueError("camera matrices must be 3x3 and 4x4")
        if abs(K[2, 2] - 1.0) > 1e-12:
            raise ValueError("K[2,2] must be 1")
        if max(abs(K[1, 0]), abs(K[2, 0]), abs(K[2, 1])) > 1e-12:
            raise ValueError("K must be upper triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        R = V[:3, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("rotation block of V is not orthonormal")
        if np.max(np.abs(V[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 1e-12:
            raise ValueError("V bottom row must be [0,0,0,1]")
        if self.height <= 0 or self.width <= 0:
            raise ValueError("image size must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.V[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.V[:3, 3]


def look_at_camera(
    eye, target, height: int, width: int, focal: float,
    cx: float | None = None, cy: float | None = None,
) -> Camera:
    """Build a camera at `eye` looking toward `target`, world +z up."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    n = np.linalg.norm(forward)
    if n < 1e-9:
        raise ValueError("eye and target coincide")
    z_cam = forward / n
    up = np.array([0.0, 0.0, 1.0])
    x_cam = np.cross(z_cam, up)
    nx = np.linalg.norm(x_cam)
    if nx < 1e-6:
        raise ValueError("viewing direction parallel to world up")
    x_cam /= nx
    y_cam = np.cross(z_cam, x_cam)
    R = np.stack([x_cam, y_cam, z_cam])
    V = np.eye(4)
    V[:3, :3] = R
    V[:3, 3] = -R @ eye
    if cx is None:
        cx = (width - 1) / 2.0
    if cy is None:
        cy = (height - 1) / 2.0
    K = np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])
    return Camera(K=K, V=V, height=height, width=width)


def project_points(
    positions: np.ndarray, cam: Camera
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points into the image.

    Returns (uv, depth, visible): continuous pixel coordinates (N,2) as
    (u, v) = (col, row), camera-frame depth (N,), and a flag that is True
    iff depth > NEAR_PLANE and the rounded pixel lies inside the frame.
    uv rows are NaN where the depth test fails (no valid perspective divide).
    """
    pts = np.asarray(positions, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"positions must be (N,3), got {pts.shape}")
    if pts.size and not np.all(np.isfinite(pts)):
        raise ValueError("positions contain non-finite entries")
    n = pts.shape[0]
    cam_pts = pts @ cam.rotation.T + cam.translation
    depth = cam_pts[:, 2].copy()
    uv = np.full((n, 2), np.nan)
    in_front = depth > NEAR_PLANE
    if np.any(in_front):
        h = cam_pts[in_front] @ cam.K.T
        uv[in_front, 0] = h[:, 0] / h[:, 2]
        uv[in_front, 1] = h[:, 1] / h[:, 2]
    visible = np.zeros(n, dtype=bool)
    if np.any(in_front):
        r = np.rint(uv[in_front, 1])
        c = np.rint(uv[in_front, 0])
        ok = (r >= 0) & (r < cam.height) & (c >= 0) & (c < cam.width)
        visible[np.flatnonzero(in_front)[ok]] = True
    return uv, depth, visible


def unproject_pixels(uv: np.ndarray, depth: np.ndarray, cam: Camera) -> np.ndarray:
    """Invert the projection: continuous (u,v) plus depth back to world points."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    ones = np.ones((uv.shape[0], 1))
    pix = np.concatenate([uv, ones], axis=1)
    rays = pix @ np.linalg.inv(cam.K).T
    cam_pts = rays * depth[:, None]
    return (cam_pts - cam.translation) @ cam.rotation


@dataclass
class Correspondence:
    """Depth-tested map between visible points and pixels of one view.

    Entries are sorted by point index; each point appears at most once and
    each pixel holds at most one point (the z-buffer winner).
    """

    point_index: np.ndarray  # (n',) int64
    pixel_row: np.ndarray    # (n',) int64
    pixel_col: np.ndarray    # (n',) int64
    depth: np.ndarray        # (n',) float64
    height: int
    width: int

    def __post_init__(self):
        self.point_index = np.asarray(self.point_index, dtype=np.int64)
        self.pixel_row = np.asarray(self.pixel_row, dtype=np.int64)
        self.pixel_col = np.asarray(self.pixel_col, dtype=np.int64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        n = self.point_index.size
        if not (self.pixel_row.size == self.pixel_col.size == self.depth.size == n):
            raise ValueError("correspondence arrays disagree in length")
        if n:
            if np.unique(self.point_index).size != n:
                raise ValueError("duplicate point indices in correspondence")
            lin = self.pixel_row * self.width + self.pixel_col
            if np.unique(lin).size != n:
                raise ValueError("two points share one pixel")
        if n > self.height * self.width:
            raise ValueError("more correspondences than pixels")

    @property
    def n_prime(self) -> int:
        return int(self.point_index.size)


def build_correspondence(positions: np.ndarray, cam: Camera) -> Correspondence:
    """Z-buffered point-to-pixel assignment for one view.

    Scans points in ascending index order; a point replaces the current
    pixel winner only when it is closer by more than DEPTH_TIE_EPS, so
    equal-depth ties deterministically keep the lower index.
    """
    uv, depth, visible = project_points(positions, cam)
    idx = np.flatnonzero(visible)
    best_depth: dict[int, float] = {}
    best_point: dict[int, int] = {}
    rows = np.rint(uv[idx, 1]).astype(np.int64)
    cols = np.rint(uv[idx, 0]).astype(np.int64)
    for i, r, c in zip(idx, rows, cols):
        key = int(r) * cam.width + int(c)
        d = depth[i]
        if key not in best_depth or d < best_depth[key] - DEPTH_TIE_EPS:
            best_depth[key] = d
            best_point[key] = int(i)
    if not best_point:
        empty = np.zeros(0, dtype=np.int64)
        return Correspondence(empty, empty, empty, np.zeros(0), cam.height, cam.width)
    pts = np.array(sorted(best_point.values()), dtype=np.int64)
    pix = {p: k for k, p in best_point.items()}
    keys = np.array([pix[p] for p in pts], dtype=np.int64)
    return Correspondence(
        point_index=pts,
        pixel_row=keys // cam.width,
        pixel_col=keys % cam.width,
        depth=depth[pts],
        height=cam.height,
        width=cam.width,
    )
