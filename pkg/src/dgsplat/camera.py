"""Pinhole cameras.

Convention: world -> camera via x_c = R x_w + t with +z forward and image
y pointing down; pixel (row i, col j) samples the image plane at
(x = j, y = i), so principal points live on the (W-1)/2 grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray      # (3,3) world -> camera
    translation: np.ndarray   # (3,)
    width: int
    height: int
    near: float = 0.05        # world units; depth <= near is culled

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("camera extrinsics have the wrong shape")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-10:
            raise ValueError(f"camera rotation is not orthonormal (max error {err:.2e})")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "width": self.width, "height": self.height, "near": self.near,
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.array(d["translation"], dtype=np.float64),
            width=int(d["width"]), height=int(d["height"]), near=float(d["near"]),
        )


def look_at(position, target, width: int, height: int, fov_deg: float = 50.0,
            up=(0.0, 1.0, 0.0), near: float = 0.05) -> Camera:
    """Camera at ``position`` looking at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    nr = np.linalg.norm(right)
    if nr < 1e-12:  # looking straight along up: pick another reference
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    # Re-orthonormalize so the constructor's 1e-10 check always passes.
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    translation = -rotation @ position
    f = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_deg))
    return Camera(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                  rotation=rotation, translation=translation,
                  width=width, height=height, near=near)
