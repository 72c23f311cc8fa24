"""Skeleton definition, forward kinematics and rotation helpers.

Positions are meters in a y-up world frame; +x points to the body's left and
+z forward in the rest pose. Every function accepts numpy arrays or torch
tensors. Numpy in gives numpy out; tensors stay tensors (and stay on the
autograd graph, which the tracker relies on).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

PARTS = ("Head", "LArm", "RArm", "LLeg", "RLeg", "Root")
IMU_LABELS = ("H", "LP", "RP", "LW", "RW")

JOINT_NAMES = (
    "pelvis", "L_hip", "R_hip", "spine1", "L_knee", "R_knee", "spine2",
    "L_ankle", "R_ankle", "spine3", "L_foot", "R_foot", "neck", "L_collar",
    "R_collar", "head", "L_shoulder", "R_shoulder", "L_elbow", "R_elbow",
    "L_wrist", "R_wrist",
)
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)

# rough adult proportions; standing pelvis height ~0.92 m puts the feet at y=0
_OFFSETS = (
    (0.0, 0.0, 0.0),
    (0.06, -0.09, 0.0), (-0.06, -0.09, 0.0), (0.0, 0.11, -0.02),
    (0.0, -0.38, 0.0), (0.0, -0.38, 0.0), (0.0, 0.13, 0.0),
    (0.0, -0.40, -0.02), (0.0, -0.40, -0.02), (0.0, 0.05, 0.02),
    (0.0, -0.05, 0.12), (0.0, -0.05, 0.12), (0.0, 0.21, -0.02),
    (0.08, 0.12, 0.0), (-0.08, 0.12, 0.0), (0.0, 0.09, 0.04),
    (0.10, 0.03, 0.0), (-0.10, 0.03, 0.0), (0.26, 0.0, 0.0),
    (-0.26, 0.0, 0.0), (0.25, 0.0, 0.0), (-0.25, 0.0, 0.0),
)

_PART_JOINTS = {
    "Root": (0,),
    "Head": (3, 6, 9, 12, 15),
    "LArm": (13, 16, 18, 20),
    "RArm": (14, 17, 19, 21),
    "LLeg": (1, 4, 7, 10),
    "RLeg": (2, 5, 8, 11),
}

# label -> (sensor joint, limb child joint, limb parent joint)
_IMU_SITES = {
    "H": (15, 15, 12),
    "LP": (1, 4, 1),
    "RP": (2, 5, 2),
    "LW": (20, 20, 18),
    "RW": (21, 21, 19),
}

IMU_PART = {"H": "Head", "LP": "LLeg", "RP": "RLeg", "LW": "LArm", "RW": "RArm"}

DEFAULT_FPS = 30.0
DEFAULT_T = 120
ORTHO_TOL = 1e-5


class KinematicsError(ValueError):
    pass


@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple = JOINT_NAMES
    parent_index: tuple = PARENTS
    offsets: np.ndarray = field(default_factory=lambda: np.array(_OFFSETS, dtype=np.float64))
    part_of: tuple = ()
    imu_sites: dict = field(default_factory=lambda: dict(_IMU_SITES))

    def __post_init__(self):
        if not self.part_of:
            part_of = [None] * len(self.joint_names)
            for part, joints in _PART_JOINTS.items():
                for j in joints:
                    part_of[j] = part
            object.__setattr__(self, "part_of", tuple(part_of))
        self.validate()

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    def part_joints(self, part: str) -> list[int]:
        return [j for j, p in enumerate(self.part_of) if p == part]

    def joint(self, name: str) -> int:
        return self.joint_names.index(name)

    def validate(self):
        n = self.n_joints
        if len(self.parent_index) != n or self.offsets.shape != (n, 3):
            raise KinematicsError("skeleton arrays disagree on joint count")
        if self.parent_index[0] != -1:
            raise KinematicsError("joint 0 must be the root")
        for j in range(1, n):
            # topological order makes cycles impossible
            if not 0 <= self.parent_index[j] < j:
                raise KinematicsError(f"joint {j} has parent {self.parent_index[j]}; parents must precede children")
        if set(self.part_of) != set(PARTS) or None in self.part_of:
            raise KinematicsError("every joint needs one of the six parts")
        for label, (j, child, parent) in self.imu_sites.items():
            part = IMU_PART[label]
            if any(self.part_of[k] != part for k in (j, child, parent)):
                raise KinematicsError(f"IMU site {label} references joints outside {part}")
            if self.parent_index[child] != parent:
                raise KinematicsError(f"IMU site {label}: limb must be a single bone")


def _wrap(x, like):
    if isinstance(like, torch.Tensor):
        return x
    return x.detach().cpu().numpy()


def _t(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def check_rotations(rot, tol: float = ORTHO_TOL):
    """Raise if any 3x3 block of ``rot`` (..., 3, 3) is not a proper rotation.

    Leading dims are read as (frame, joint) when there are two of them.
    """
    r = np.asarray(rot.detach().cpu() if isinstance(rot, torch.Tensor) else rot, dtype=np.float64)
    flat = r.reshape(-1, 3, 3)
    err = np.abs(flat @ np.swapaxes(flat, 1, 2) - np.eye(3)).max(axis=(1, 2))
    det = np.linalg.det(flat)
    bad = np.flatnonzero((err > tol) | (np.abs(det - 1.0) > tol) | ~np.isfinite(err))
    if bad.size:
        idx = np.unravel_index(bad[0], r.shape[:-2]) if r.ndim > 2 else ()
        if len(idx) == 2:
            where = f"frame {idx[0]}, joint {idx[1]}"
        else:
            where = f"index {tuple(int(i) for i in idx)}"
        raise KinematicsError(f"non-orthonormal rotation at {where}")


def forward_kinematics(skeleton: Skeleton, root_translation, local_rotations, *, check: bool = True):
    """Global joint positions (T, J, 3) from root translation and local rotations (T, J, 3, 3)."""
    if check:
        check_rotations(local_rotations)
    rots = _t(local_rotations)
    root = _t(root_translation).to(rots.dtype)
    if rots.shape[-3] != skeleton.n_joints or root.shape[:-1] != rots.shape[:-3]:
        raise KinematicsError(f"shape mismatch: root {tuple(root.shape)}, rotations {tuple(rots.shape)}")
    offsets = torch.as_tensor(skeleton.offsets, dtype=rots.dtype)
    glob_rot = [rots[..., 0, :, :]]
    pos = [root]
    for j in range(1, skeleton.n_joints):
        p = skeleton.parent_index[j]
        pos.append(pos[p] + glob_rot[p] @ offsets[j])
        glob_rot.append(glob_rot[p] @ rots[..., j, :, :])
    return _wrap(torch.stack(pos, dim=-2), local_rotations)


def global_rotations(skeleton: Skeleton, local_rotations):
    """Accumulated world rotations (T, J, 3, 3)."""
    rots = _t(local_rotations)
    out = [rots[..., 0, :, :]]
    for j in range(1, skeleton.n_joints):
        out.append(out[skeleton.parent_index[j]] @ rots[..., j, :, :])
    return _wrap(torch.stack(out, dim=-3), local_rotations)


def rotmat_to_6d(R):
    """First two columns of R, concatenated: (..., 3, 3) -> (..., 6)."""
    r = _t(R)
    out = torch.cat([r[..., :, 0], r[..., :, 1]], dim=-1)
    return _wrap(out, R)


def sixd_to_rotmat(v, eps: float = 1e-8):
    """Gram-Schmidt map from 6D vectors back to rotation matrices."""
    x = _t(v)
    a, b = x[..., :3], x[..., 3:]
    na = torch.linalg.norm(a, dim=-1, keepdim=True)
    if bool((na < eps).any()):
        raise KinematicsError("degenerate 6D rotation")
    c0 = a / na
    b = b - (c0 * b).sum(-1, keepdim=True) * c0
    nb = torch.linalg.norm(b, dim=-1, keepdim=True)
    if bool((nb < eps).any()):
        raise KinematicsError("degenerate 6D rotation")
    c1 = b / nb
    c2 = torch.cross(c0, c1, dim=-1)
    return _wrap(torch.stack([c0, c1, c2], dim=-1), v)


def axis_angle_to_rotmat(axis_angle):
    """Rodrigues formula, (..., 3) -> (..., 3, 3)."""
    w = _t(axis_angle)
    theta = torch.linalg.norm(w, dim=-1, keepdim=True)
    k = w / torch.where(theta > 0, theta, torch.ones_like(theta))
    kx, ky, kz = k.unbind(-1)
    zero = torch.zeros_like(kx)
    K = torch.stack([zero, -kz, ky, kz, zero, -kx, -ky, kx, zero], dim=-1).reshape(*k.shape[:-1], 3, 3)
    s = torch.sin(theta)[..., None]
    c = torch.cos(theta)[..., None]
    eye = torch.eye(3, dtype=w.dtype).expand_as(K)
    return _wrap(eye + s * K + (1 - c) * (K @ K), axis_angle)


def yaw_rotmat(theta):
    """Rotation about +y by angle theta: (...,) -> (..., 3, 3)."""
    th = _t(theta)
    c, s = torch.cos(th), torch.sin(th)
    one, zero = torch.ones_like(th), torch.zeros_like(th)
    R = torch.stack([c, zero, s, zero, one, zero, -s, zero, c], dim=-1).reshape(*th.shape, 3, 3)
    return _wrap(R, theta)


def align_y_to(direction):
    """Smallest rotation taking +y onto the unit vector ``direction``."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    y = np.array([0.0, 1.0, 0.0])
    axis = np.cross(y, d)
    s, c = np.linalg.norm(axis), float(y @ d)
    if s < 1e-12:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    return axis_angle_to_rotmat(axis / s * np.arctan2(s, c))


def limb_vectors(positions, skeleton: Skeleton, placement: str, eps: float = 0.0):
    """Unit child-minus-parent vectors of a limb for every frame: (T, 3).

    With ``eps > 0`` the norm is clamped from below instead of raising, which
    keeps gradients finite inside an optimizer.
    """
    _, child, parent = skeleton.imu_sites[placement]
    p = _t(positions)
    v = p[..., child, :] - p[..., parent, :]
    n = torch.linalg.norm(v, dim=-1, keepdim=True)
    if eps > 0:
        n = n.clamp_min(eps)
    elif bool((n < 1e-8).any()):
        raise KinematicsError(f"collapsed limb at {placement}")
    return _wrap(v / n, positions)


def limb_direction(seq, skeleton: Skeleton, placement: str, t: int):
    """Unit direction of the limb carrying ``placement`` at frame ``t``."""
    if placement not in skeleton.imu_sites:
        raise KinematicsError(f"unknown placement {placement!r}")
    positions = np.asarray(seq.positions if hasattr(seq, "positions") else seq)
    if not 0 <= t < positions.shape[0]:
        raise KinematicsError(f"frame {t} out of range")
    return limb_vectors(positions[t], skeleton, placement)


@dataclass
class MotionSequence:
    positions: np.ndarray  # (T, 22, 3)
    rotations: np.ndarray  # (T, 22, 3, 3), local
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.validate()

    @property
    def T(self) -> int:
        return self.positions.shape[0]

    def validate(self):
        T = self.positions.shape[0]
        if self.positions.ndim != 3 or self.positions.shape[2] != 3:
            raise KinematicsError(f"positions must be (T, J, 3), got {self.positions.shape}")
        if self.rotations.shape != self.positions.shape[:2] + (3, 3):
            raise KinematicsError("rotations must be (T, J, 3, 3) matching positions")
        if not self.fps > 0:
            raise KinematicsError("fps must be positive")
        if T < 8 or T % 4:
            raise KinematicsError(f"T={T}: need T >= 8 and divisible by 4")
        if not np.isfinite(self.positions).all():
            raise KinematicsError("non-finite positions")
        check_rotations(self.rotations)

    @classmethod
    def from_local(cls, skeleton: Skeleton, root_translation, local_rotations, fps=DEFAULT_FPS):
        pos = forward_kinematics(skeleton, np.asarray(root_translation), np.asarray(local_rotations))
        return cls(pos, local_rotations, fps)


def random_rotations(rng: np.random.Generator, shape=()) -> np.ndarray:
    """Uniformly distributed rotations via QR of Gaussian matrices."""
    a = rng.standard_normal(tuple(shape) + (3, 3))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diagonal(r, axis1=-2, axis2=-1))[..., None, :]
    det = np.linalg.det(q)
    q[..., :, 0] *= det[..., None]
    return q
