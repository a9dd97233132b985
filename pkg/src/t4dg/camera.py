"""Pinhole cameras and quaternion helpers.

Conventions: quaternions are (w, x, y, z) and rotate world into camera
coordinates, ``p_cam = R @ p_world + t``. The camera looks down +z with +x
right and +y down. Pixel (row i, col j) sits at image coordinates (u=j, v=i).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass
class Camera:
    rotation: np.ndarray  # unit quaternion, world -> camera
    translation: np.ndarray
    focal: float
    principal: tuple[float, float]
    width: int
    height: int
    _R: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        n = np.linalg.norm(self.rotation)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"camera quaternion norm {n} is not 1")
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        self.principal = (float(self.principal[0]), float(self.principal[1]))

    @property
    def R(self) -> np.ndarray:
        if self._R is None:
            self._R = quat_to_rotmat(self.rotation)
        return self._R

    @property
    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.R.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Viewing direction (+z of the camera) in world coordinates."""
        return self.R[2]

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.R.T + self.translation

    def project(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points [..., 3] -> pixel coords [..., 2] and camera depth [...]."""
        pc = self.world_to_camera(pts)
        z = pc[..., 2]
        u = self.focal * pc[..., 0] / z + self.principal[0]
        v = self.focal * pc[..., 1] / z + self.principal[1]
        return np.stack([u, v], axis=-1), z

    def unproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Pixel coords [..., 2] at camera depth [...] -> world points [..., 3]."""
        x = (uv[..., 0] - self.principal[0]) / self.focal * depth
        y = (uv[..., 1] - self.principal[1]) / self.focal * depth
        pc = np.stack([x, y, depth], axis=-1)
        return (pc - self.translation) @ self.R

    def pixel_grid(self) -> np.ndarray:
        """(u, v) for every pixel, shape [H, W, 2]."""
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([u, v], axis=-1).astype(np.float64)

    def to_dict(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation],
            "translation": [float(x) for x in self.translation],
            "focal": float(self.focal),
            "principal": list(self.principal),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Camera:
        return cls(
            np.asarray(d["rotation"], dtype=np.float64),
            np.asarray(d["translation"], dtype=np.float64),
            float(d["focal"]),
            tuple(d["principal"]),
            int(d["width"]),
            int(d["height"]),
        )


def look_at_camera(center, target, width: int, height: int, focal: float | None = None, up=(0.0, 1.0, 0.0)) -> Camera:
    """Camera at ``center`` looking at ``target``; image up follows world ``up``."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("view direction parallel to up vector")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    q = rotmat_to_quat(R)
    t = -quat_to_rotmat(q) @ center
    return Camera(q, t, float(focal if focal is not None else width), (width / 2, height / 2), width, height)


def relative_to(cam: Camera, ref: Camera, scale: float = 1.0) -> Camera:
    """Express ``cam`` in the frame of ``ref`` (ref becomes identity) with world units divided by ``scale``."""
    R = cam.R @ ref.R.T
    t = (cam.translation - R @ ref.translation) / scale
    return Camera(rotmat_to_quat(R), t, cam.focal, cam.principal, cam.width, cam.height)
