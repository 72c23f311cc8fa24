"""Motion bundles: one clip (positions, rotations, optional IMU and representation)
in the shared container format."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import container
from ..kinematics import PARTS, MotionSequence, Skeleton, rotmat_to_6d, sixd_to_rotmat

BUNDLE_VERSION = 1


class BundleError(ValueError):
    pass


@dataclass
class MotionBundle:
    positions: np.ndarray  # (T, 22, 3)
    rotations6d: np.ndarray  # (T, 22, 6)
    fps: float
    imu_accel: np.ndarray | None = None  # (T, 5, 3)
    imu_rot6d: np.ndarray | None = None  # (T, 5, 6)
    imu_active: np.ndarray | None = None  # (5,)
    repr: np.ndarray | None = None  # (T, 263)
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.positions.shape[0]

    def sequence(self) -> MotionSequence:
        return MotionSequence(self.positions.astype(np.float64), sixd_to_rotmat(self.rotations6d.astype(np.float64)),
                              self.fps)


def from_sequence(seq: MotionSequence, **extra) -> MotionBundle:
    return MotionBundle(seq.positions, rotmat_to_6d(seq.rotations), seq.fps, **extra)


def save_bundle(path, bundle: MotionBundle, skeleton: Skeleton | None = None):
    skeleton = skeleton or Skeleton()
    tensors = {"positions": bundle.positions, "rotations6d": bundle.rotations6d}
    for name in ("imu_accel", "imu_rot6d", "repr"):
        v = getattr(bundle, name)
        if v is not None:
            tensors[name] = v
    if bundle.imu_active is not None:
        tensors["imu_active"] = np.asarray(bundle.imu_active, dtype=np.int32)
    meta = dict(bundle.meta)
    meta.update({
        "kind": "motion-bundle",
        "bundle_version": BUNDLE_VERSION,
        "fps": float(bundle.fps),
        "T": int(bundle.T),
        "joint_names": list(skeleton.joint_names),
        "part_map": {p: list(skeleton.part_joints(p)) for p in PARTS},
    })
    return container.save(path, tensors, meta)


def load_bundle(path) -> MotionBundle:
    manifest, t = container.load(path)
    if manifest.get("kind") != "motion-bundle":
        raise BundleError(f"{path} is not a motion bundle")
    for key in ("positions", "rotations6d"):
        if key not in t:
            raise BundleError(f"{path}: missing blob {key}")
    T = manifest.get("T", t["positions"].shape[0])
    if t["positions"].shape != (T, 22, 3) or t["rotations6d"].shape != (T, 22, 6):
        raise BundleError(f"{path}: blob shapes do not match T={T}")
    known = {"kind", "bundle_version", "fps", "T", "joint_names", "part_map", "version", "tensors"}
    meta = {k: v for k, v in manifest.items() if k not in known}
    active = t.get("imu_active")
    return MotionBundle(
        t["positions"], t["rotations6d"], float(manifest["fps"]),
        t.get("imu_accel"), t.get("imu_rot6d"), None if active is None else active.astype(bool),
        t.get("repr"), meta,
    )
