"""Pinhole cameras, projection and Plücker ray coordinates.

Pixel centers sit at integer coordinates with the origin at the top-left
pixel, +x to the right and +y down. ``R`` and ``t`` map world points into the
camera frame, ``q = R p + t``, and the camera looks along its +z axis.
"""

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera


@dataclass(frozen=True, eq=False)
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("R must be a proper rotation")
        if np.any(np.tril(K, -1) != 0) or K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] != 1:
            raise ValueError("K must be upper-triangular with positive focal lengths and K[2,2] = 1")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def look_at(cls, eye, target, focal, width, height, up=(0.0, 0.0, 1.0)):
        """Camera at ``eye`` looking at ``target`` with square pixels."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, (0.0, 1.0, 0.0))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        K = np.array([[focal, 0.0, (width - 1) / 2], [0.0, focal, (height - 1) / 2], [0.0, 0.0, 1.0]])
        return cls(K, R, -R @ eye, width, height)

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def projection(self):
        """The 3x4 matrix ``K [R | t]``."""
        return self.K @ np.hstack([self.R, self.t[:, None]])

    def to_camera(self, p):
        return np.asarray(p, dtype=np.float64) @ self.R.T + self.t


def project(cam, p):
    """Project world points to ``(pixel, depth)``; works on ``(3,)`` or ``(N, 3)``."""
    q = cam.to_camera(p)
    depth = q[..., 2]
    if np.any(depth <= 0):
        raise BehindCamera("point is at or behind the camera plane")
    h = q @ cam.K.T
    return h[..., :2] / depth[..., None], depth


def unproject(cam, pixel, depth):
    """World point at camera-z ``depth`` along the ray through ``pixel``."""
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    uv1 = np.concatenate([pixel, np.ones(pixel.shape[:-1] + (1,))], axis=-1)
    q = np.linalg.solve(cam.K, uv1[..., None])[..., 0] * depth[..., None]
    return (q - cam.t) @ cam.R


def ray_direction(cam, pixel):
    """Unit world-frame direction of the viewing ray through ``pixel``."""
    pixel = np.asarray(pixel, dtype=np.float64)
    uv1 = np.concatenate([pixel, np.ones(pixel.shape[:-1] + (1,))], axis=-1)
    d = np.linalg.solve(cam.K, uv1[..., None])[..., 0] @ cam.R
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class PluckerRay:
    moment: np.ndarray
    direction: np.ndarray

    def as_vector(self):
        """The 6-vector ``[moment | direction]``."""
        return np.concatenate([self.moment, self.direction], axis=-1)


def plucker_from(origin, direction):
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(np.asarray(origin, dtype=np.float64), d.shape)
    return PluckerRay(np.cross(o, d), d)


def plucker(cam, pixel):
    """Plücker coordinates of the world-frame viewing ray through ``pixel``."""
    return plucker_from(cam.center, ray_direction(cam, pixel))
