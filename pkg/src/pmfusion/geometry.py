"""Point-cloud projection into the camera image plane and into range images.

Pixel convention: the projected camera coordinates ``(xt, yt, zt)`` give
``h = xt / zt`` (first image axis, rows) and ``w = yt / zt`` (second axis,
columns). Calibration fixtures are built to match this convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

IGNORE = -1
EMPTY = -1
OUT_OF_VIEW = -1


@dataclass
class PointCloud:
    """``points`` is an ``[N, 4]`` float64 array of (x, y, z, reflectance)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"point cloud must be [N, 4], got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud has non-finite coordinates")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self):
        return self.points[:, :3]

    @property
    def ranges(self):
        return np.sqrt((self.points[:, :3] ** 2).sum(axis=1))


@dataclass
class Calibration:
    """Projection ``T`` (3x4), rectifying rotation ``R0`` (3x3), image size (H, W)."""

    T: np.ndarray
    R0: np.ndarray
    image_size: tuple | None = None

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3, 4)
        self.R0 = np.asarray(self.R0, dtype=np.float64).reshape(3, 3)
        if self.image_size is not None:
            self.image_size = (int(self.image_size[0]), int(self.image_size[1]))

    @property
    def R(self):
        """R0 expanded to 4x4 with a unit (4, 4) entry."""
        R = np.zeros((4, 4))
        R[:3, :3] = self.R0
        R[3, 3] = 1.0
        return R

    @property
    def matrix(self):
        return self.T @ self.R

    @classmethod
    def identity(cls, image_size=None):
        return cls(np.hstack([np.eye(3), np.zeros((3, 1))]), np.eye(3), image_size)


@dataclass
class ProjectedScan:
    features: np.ndarray       # [5, H, W], channels (d, x, y, z, r)
    pixel_to_point: np.ndarray  # [H, W] int64, EMPTY where no point
    valid_mask: np.ndarray     # [H, W] bool
    label_image: np.ndarray    # [H, W] int64, IGNORE where empty
    point_to_pixel: np.ndarray  # [N, 2] int64, OUT_OF_VIEW rows for unprojected points

    @property
    def shape(self):
        return self.valid_mask.shape

    @property
    def in_view(self):
        return self.point_to_pixel[:, 0] != OUT_OF_VIEW


def project_points(xyz, calib):
    """Vectorised projection. Returns (h, w, depth, in_view) for ``xyz[N, 3]``.

    Points with non-positive depth or whose floored pixel lies outside the
    image are flagged out of view; their ``h``/``w`` are NaN.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(xyz)):
        raise ValueError("non-finite input point")
    hom = np.hstack([xyz, np.ones((xyz.shape[0], 1))])
    proj = hom @ calib.matrix.T
    depth = proj[:, 2]
    front = depth > 0
    h = np.full(xyz.shape[0], np.nan)
    w = np.full(xyz.shape[0], np.nan)
    h[front] = proj[front, 0] / depth[front]
    w[front] = proj[front, 1] / depth[front]
    in_view = front.copy()
    if calib.image_size is not None:
        H, W = calib.image_size
        with np.errstate(invalid="ignore"):
            in_view &= (np.floor(h) >= 0) & (np.floor(h) < H) & (np.floor(w) >= 0) & (np.floor(w) < W)
    h[~in_view] = np.nan
    w[~in_view] = np.nan
    return h, w, depth, in_view


def project_point(p, calib):
    """Project one point; returns ``(h, w, depth)`` or ``OUT_OF_VIEW``."""
    h, w, depth, ok = project_points(np.asarray(p, dtype=np.float64)[:3], calib)
    if not ok[0]:
        return OUT_OF_VIEW
    return float(h[0]), float(w[0]), float(depth[0])


def _scatter(cloud, labels, rows, cols, ok, H, W):
    n = len(cloud)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for {n} points")
    rng_d = cloud.ranges
    pix = np.full(n, -1, dtype=np.int64)
    pix[ok] = rows[ok] * W + cols[ok]
    flat = kernels.zbuffer(pix, rng_d, H, W)

    valid = flat >= 0
    winners = flat[valid]
    features = np.zeros((5, H * W))
    features[0, valid] = rng_d[winners]
    features[1:, valid] = cloud.points[winners].T
    label_image = np.full(H * W, IGNORE, dtype=np.int64)
    label_image[valid] = labels[winners]

    p2p = np.full((n, 2), OUT_OF_VIEW, dtype=np.int64)
    p2p[ok, 0] = rows[ok]
    p2p[ok, 1] = cols[ok]
    return ProjectedScan(
        features=features.reshape(5, H, W),
        pixel_to_point=flat.reshape(H, W),
        valid_mask=valid.reshape(H, W),
        label_image=label_image.reshape(H, W),
        point_to_pixel=p2p,
    )


def perspective_project_cloud(cloud, labels, calib):
    """Scatter a cloud into the camera image with a nearest-range z-buffer."""
    if calib.image_size is None:
        raise ValueError("calibration has no image size")
    H, W = calib.image_size
    h, w, _, ok = project_points(cloud.xyz, calib)
    rows = np.zeros(len(cloud), dtype=np.int64)
    cols = np.zeros(len(cloud), dtype=np.int64)
    rows[ok] = np.floor(h[ok]).astype(np.int64)
    cols[ok] = np.floor(w[ok]).astype(np.int64)
    return _scatter(cloud, labels, rows, cols, ok, H, W)


def spherical_pixels(xyz, fov_up, fov_down, out_size):
    """Range-image coordinates (row, col, ok) by elevation and azimuth.

    Azimuth ``atan2(y, x)`` decreases left to right, so +pi/2 lands at a
    quarter of the width and 0 at the centre. Elevation is normalised over
    ``[fov_down, fov_up]`` (degrees) with ``fov_up`` at row 0. Points outside
    the vertical field of view or at zero range are not projected.
    """
    if not fov_up > fov_down:
        raise ValueError("fov_up must exceed fov_down")
    H, W = out_size
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    d = np.sqrt((xyz ** 2).sum(axis=1))
    ok = d > 0
    safe = np.where(ok, d, 1.0)
    pitch = np.arcsin(np.clip(xyz[:, 2] / safe, -1.0, 1.0))
    yaw = np.arctan2(xyz[:, 1], xyz[:, 0])
    up, down = np.radians(fov_up), np.radians(fov_down)
    v = (1.0 - (pitch - down) / (up - down)) * H
    u = 0.5 * (1.0 - yaw / np.pi) * W
    ok &= (pitch >= down) & (pitch <= up)
    rows = np.clip(np.floor(v), 0, H - 1).astype(np.int64)
    cols = np.clip(np.floor(u), 0, W - 1).astype(np.int64)
    return rows, cols, ok


def spherical_project_cloud(cloud, labels, fov_up, fov_down, out_size):
    H, W = out_size
    rows, cols, ok = spherical_pixels(cloud.xyz, fov_up, fov_down, out_size)
    return _scatter(cloud, labels, rows, cols, ok, H, W)


def gather_point_predictions(pred, scan):
    """Per-point class ids read from the pixel each point projects to."""
    pred = np.asarray(pred)
    if pred.shape != scan.shape:
        raise ValueError(f"prediction shape {pred.shape} != scan shape {scan.shape}")
    out = np.full(scan.point_to_pixel.shape[0], IGNORE, dtype=np.int64)
    m = scan.in_view
    out[m] = pred[scan.point_to_pixel[m, 0], scan.point_to_pixel[m, 1]]
    return out
