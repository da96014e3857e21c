"""Camera models: projection and rigid camera/world transforms.

Extrinsics follow ``p_camera = R @ p_world + t``.  Poses are flat vectors of
``3N`` coordinates (joint-major: x0, y0, z0, x1, ...), or ``[N, 3]`` arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, ParseError, ProjectionError

ORTHOGRAPHIC = "orthographic"
PINHOLE = "pinhole"


def _as_joints(pose, width: int = 3) -> np.ndarray:
    arr = np.asarray(pose, dtype=np.float64)
    return arr.reshape(-1, width)


@dataclass
class CameraModel:
    kind: str = ORTHOGRAPHIC
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    f: Union[float, Sequence[float]] = 1.0
    c: Sequence[float] = (0.0, 0.0)
    id: int = 0

    def __post_init__(self):
        if self.kind not in (ORTHOGRAPHIC, PINHOLE):
            raise ConfigError(f"camera kind must be orthographic or pinhole, got {self.kind!r}")
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(self.R.T @ self.R, np.eye(3), rtol=0.0, atol=1e-9):
            raise ConfigError(f"camera {self.id}: rotation is not orthonormal")
        if np.linalg.det(self.R) < 0:
            raise ConfigError(f"camera {self.id}: rotation has a reflection (det < 0)")
        self.f = np.broadcast_to(np.asarray(self.f, dtype=np.float64), (2,)).copy()
        self.c = np.asarray(self.c, dtype=np.float64).reshape(2)
        if self.kind == PINHOLE and not (self.f > 0).all():
            raise ConfigError(f"camera {self.id}: focal length must be positive")

    def to_dict(self) -> dict:
        f = self.f.tolist()
        return {
            "id": int(self.id),
            "kind": self.kind,
            "R": self.R.reshape(-1).tolist(),
            "t": self.t.tolist(),
            "f": f[0] if f[0] == f[1] else f,
            "c": self.c.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(kind=d.get("kind", ORTHOGRAPHIC), R=d["R"], t=d.get("t", [0, 0, 0]),
                   f=d.get("f", 1.0), c=d.get("c", [0, 0]), id=int(d.get("id", 0)))


def rotation_about(axis: str, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    raise ValueError(f"unknown axis {axis!r}")


def world_to_camera(cam: CameraModel, pose_world) -> np.ndarray:
    p = _as_joints(pose_world)
    return (p @ cam.R.T + cam.t).reshape(-1)


def camera_to_world(cam: CameraModel, pose_cam) -> np.ndarray:
    p = _as_joints(pose_cam)
    return ((p - cam.t) @ cam.R).reshape(-1)


def project(cam: CameraModel, pose3d, frame: str = "camera") -> np.ndarray:
    """Project a pose to ``2N`` image coordinates.

    ``pose3d`` is interpreted in camera coordinates unless ``frame="world"``.
    """
    p = _as_joints(pose3d)
    if frame == "world":
        p = _as_joints(world_to_camera(cam, p))
    if cam.kind == ORTHOGRAPHIC:
        return p[:, :2].reshape(-1).copy()
    depth = p[:, 2]
    behind = np.flatnonzero(~(depth > 0))
    if behind.size:
        raise ProjectionError(f"joints {behind.tolist()} are at or behind the camera plane", behind)
    uv = p[:, :2] / depth[:, None] * cam.f + cam.c
    return uv.reshape(-1)


def load_cameras(path) -> List[CameraModel]:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", exc.lineno) from exc
    if not isinstance(raw, list):
        raise ParseError(f"{path}: expected a JSON array of cameras")
    return [CameraModel.from_dict(d) for d in raw]


def save_cameras(cams: Sequence[CameraModel], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cams], indent=1) + "\n")


def find_camera(cams: Sequence[CameraModel], cam_id: int) -> Optional[CameraModel]:
    for cam in cams:
        if cam.id == cam_id:
            return cam
    return None
