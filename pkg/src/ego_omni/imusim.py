"""Synthetic IMU streams, placement masks and the evaluation setup list.

Accelerations are world-frame, gravity-free second differences of the
sensor joint trajectory in frame units (dt = 1), the same formula the tracker
uses, so noise-free synthesis reproduces the tracker's measurement model.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .kinematics import (
    IMU_LABELS,
    MotionSequence,
    Skeleton,
    align_y_to,
    axis_angle_to_rotmat,
    global_rotations,
    limb_vectors,
)

N_IMU = len(IMU_LABELS)
NOISY_PRESET = (0.04, 0.01)


class ImuError(ValueError):
    pass


def _identity_calib():
    return np.tile(np.eye(3), (N_IMU, 1, 1))


@dataclass
class ImuRecord:
    accel: np.ndarray  # (T, 5, 3)
    rot: np.ndarray  # (T, 5, 3, 3)
    active: np.ndarray  # (5,) bool, order H, LP, RP, LW, RW
    calib: np.ndarray = field(default_factory=_identity_calib)

    def __post_init__(self):
        self.accel = np.asarray(self.accel, dtype=np.float64)
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.active = np.asarray(self.active, dtype=bool)
        self.calib = np.asarray(self.calib, dtype=np.float64)
        self.validate()

    @property
    def T(self) -> int:
        return self.accel.shape[0]

    @property
    def labels(self) -> list[str]:
        return [IMU_LABELS[i] for i in np.flatnonzero(self.active)]

    def validate(self):
        if self.active.shape != (N_IMU,) or not 1 <= self.active.sum() <= 3:
            raise ImuError(f"need 1-3 active sensors, got mask {self.active.astype(int).tolist()}")
        if self.accel.shape[1:] != (N_IMU, 3) or self.rot.shape != self.accel.shape[:2] + (3, 3):
            raise ImuError("accel must be (T, 5, 3) and rot (T, 5, 3, 3)")
        if not np.isfinite(self.accel).all():
            raise ImuError("non-finite acceleration")
        act = self.rot[:, self.active]
        err = np.abs(act @ np.swapaxes(act, -1, -2) - np.eye(3)).max() if act.size else 0.0
        if err > 1e-5 or (act.size and np.abs(np.linalg.det(act) - 1).max() > 1e-5):
            raise ImuError("active sensor rotations must be proper rotations")

    def with_mask(self, active) -> "ImuRecord":
        """Same streams restricted to a different (subset) placement mask."""
        active = np.asarray(active, dtype=bool)
        accel = np.where(active[None, :, None], self.accel, 0.0)
        rot = np.where(active[None, :, None, None], self.rot, 0.0)
        return ImuRecord(accel, rot, active, self.calib.copy())


def mask_from_labels(labels) -> np.ndarray:
    if isinstance(labels, str):
        labels = labels.split("+")
    labels = list(labels)
    unknown = [lab for lab in labels if lab not in IMU_LABELS]
    if unknown:
        raise ImuError(f"unknown IMU labels {unknown}; expected some of {'+'.join(IMU_LABELS)}")
    if len(set(labels)) != len(labels):
        raise ImuError(f"repeated IMU label in {'+'.join(labels)}")
    mask = np.zeros(N_IMU, dtype=bool)
    mask[[IMU_LABELS.index(lab) for lab in labels]] = True
    return mask


def setup_label(mask) -> str:
    return "+".join(IMU_LABELS[i] for i in np.flatnonzero(mask))


def _second_diff(p: np.ndarray) -> np.ndarray:
    a = p[2:] - 2 * p[1:-1] + p[:-2]
    return np.concatenate([a, a[-1:], a[-1:]], axis=0)


def synth_imu(seq: MotionSequence, skeleton: Skeleton, active, noise=(0.0, 0.0), seed: int = 0,
              calib=None) -> ImuRecord:
    """Simulate accelerations and orientations for the active placements."""
    active = np.asarray(active, dtype=bool)
    if active.shape != (N_IMU,):
        raise ImuError("mask must have 5 entries")
    if not 1 <= active.sum() <= 3:
        raise ImuError(f"need 1-3 active sensors, got {int(active.sum())}")
    calib = _identity_calib() if calib is None else np.asarray(calib, dtype=np.float64)
    sigma_a, sigma_r = noise
    rng = np.random.default_rng(seed)
    T = seq.T
    accel = np.zeros((T, N_IMU, 3))
    rot = np.zeros((T, N_IMU, 3, 3))
    grot = global_rotations(skeleton, seq.rotations)
    for i in np.flatnonzero(active):
        label = IMU_LABELS[i]
        joint, child, parent = skeleton.imu_sites[label]
        limb_vectors(seq.positions, skeleton, label)  # raises on a collapsed limb
        accel[:, i] = _second_diff(seq.positions[:, joint])
        # parent joint rotation carries the bone; rest alignment maps +y onto it
        rest = align_y_to(skeleton.offsets[child])
        limb_rot = grot[:, parent] @ rest
        rot[:, i] = np.linalg.inv(calib[i]) @ limb_rot
        if sigma_a > 0:
            accel[:, i] += rng.normal(0.0, sigma_a, size=(T, 3))
        if sigma_r > 0:
            axis = rng.normal(size=(T, 3))
            axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
            angle = rng.normal(0.0, sigma_r, size=(T, 1))
            rot[:, i] = axis_angle_to_rotmat(axis * angle) @ rot[:, i]
    return ImuRecord(accel, rot, active, calib)


# row order of the per-setup results table
_SETUPS = (
    "H", "LP", "LP+H", "LP+RP", "LW", "LW+H", "LW+LP", "LW+LP+H", "LW+LP+RP", "LW+RP",
    "LW+RP+H", "LW+RW", "LW+RW+H", "LW+RW+LP", "LW+RW+RP", "RP", "RP+H", "RW", "RW+H",
    "RW+LP", "RW+LP+H", "RW+LP+RP", "RW+RP", "RW+RP+H",
)


@dataclass(frozen=True)
class SetupEnumeration:
    labels: tuple
    setups: tuple  # tuple of bool masks

    def __len__(self):
        return len(self.setups)


def enumerate_setups() -> SetupEnumeration:
    return SetupEnumeration(_SETUPS, tuple(mask_from_labels(s) for s in _SETUPS))


def all_masks() -> list[np.ndarray]:
    """The 25 legal 1-3 sensor masks in lexicographic index order."""
    out = []
    for k in (1, 2, 3):
        for combo in itertools.combinations(range(N_IMU), k):
            m = np.zeros(N_IMU, dtype=bool)
            m[list(combo)] = True
            out.append(m)
    return out


_ALL_MASKS = all_masks()


def random_setup(seed) -> np.ndarray:
    """Uniform draw over the 25 legal masks.

    ``seed`` may be an int or a numpy Generator (which is advanced).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _ALL_MASKS[int(rng.integers(len(_ALL_MASKS)))].copy()


def _align_y_batch(d: np.ndarray) -> np.ndarray:
    """Batched smallest rotation taking +y onto unit vectors d (N, 3)."""
    c = d[:, 1]
    v = np.stack([d[:, 2], np.zeros_like(c), -d[:, 0]], -1)  # y x d
    K = np.zeros((len(d), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -v[:, 2], v[:, 1]
    K[:, 1, 0], K[:, 1, 2] = v[:, 2], -v[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -v[:, 1], v[:, 0]
    flip = c < -1 + 1e-9
    denom = np.where(flip, 1.0, 1.0 + c)
    R = np.eye(3) + K + (K @ K) / denom[:, None, None]
    R[flip] = np.diag([1.0, -1.0, -1.0])
    return R


def imu_from_positions(positions, skeleton: Skeleton, active) -> ImuRecord:
    """Noise-free record built only from joint positions.

    Orientations are the rotations aligning +y with each limb direction, so
    the record matches any motion whose positions are ``positions`` even
    when no joint rotations exist (e.g. decoded representations).
    """
    positions = np.asarray(positions, dtype=np.float64)
    active = np.asarray(active, dtype=bool)
    T = positions.shape[0]
    accel = np.zeros((T, N_IMU, 3))
    rot = np.zeros((T, N_IMU, 3, 3))
    for i in np.flatnonzero(active):
        label = IMU_LABELS[i]
        joint = skeleton.imu_sites[label][0]
        accel[:, i] = _second_diff(positions[:, joint])
        rot[:, i] = _align_y_batch(limb_vectors(positions, skeleton, label))
    return ImuRecord(accel, rot, active)
