"""The 263-channel per-frame motion representation and its inverse.

Channel layout, grouped contiguously by part in the order
Head, LArm, RArm, LLeg, RLeg, Root:

* every non-root joint (ascending joint id inside its part) contributes
  12 channels: root-local position (3), local rotation in 6D (6) and
  root-local velocity (3);
* the Root block holds root angular velocity about +y (1), root linear
  velocity in the heading frame's ground plane (2), root height (1), pelvis
  velocity in the heading frame (3) and four foot contacts (4).

"Root-local" means: subtract the pelvis position and undo the pelvis heading.
Velocities are forward differences per frame; the last frame repeats the
previous value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .kinematics import (
    PARTS,
    MotionSequence,
    Skeleton,
    rotmat_to_6d,
    yaw_rotmat,
)

N_CHANNELS = 263
CONTACT_JOINTS = ("L_ankle", "L_foot", "R_ankle", "R_foot")
CONTACT_THRESHOLD = 1e-4


class ReprError(ValueError):
    pass


@dataclass(frozen=True)
class Layout:
    """Column bookkeeping for one skeleton."""

    part_slices: dict
    joint_pos: dict  # joint -> first column of its position triple
    joint_rot: dict
    joint_vel: dict
    root_angvel: int
    root_linvel: int
    root_height: int
    root_vel: int
    contacts: int


def make_layout(skeleton: Skeleton) -> Layout:
    col = 0
    part_slices, jp, jr, jv = {}, {}, {}, {}
    root = {}
    for part in PARTS:
        start = col
        if part == "Root":
            for key, width in (("angvel", 1), ("linvel", 2), ("height", 1), ("vel", 3), ("contacts", 4)):
                root[key] = col
                col += width
        else:
            for j in skeleton.part_joints(part):
                jp[j], jr[j], jv[j] = col, col + 3, col + 9
                col += 12
        part_slices[part] = (start, col)
    if col != N_CHANNELS:
        raise ReprError(f"layout has {col} channels, expected {N_CHANNELS}")
    return Layout(part_slices, jp, jr, jv, root["angvel"], root["linvel"], root["height"],
                  root["vel"], root["contacts"])


_LAYOUTS: dict = {}


def layout_for(skeleton: Skeleton) -> Layout:
    key = id(skeleton)
    if key not in _LAYOUTS or _LAYOUTS[key][0] is not skeleton:
        _LAYOUTS[key] = (skeleton, make_layout(skeleton))
    return _LAYOUTS[key][1]


PART_WIDTHS = {"Head": 60, "LArm": 48, "RArm": 48, "LLeg": 48, "RLeg": 48, "Root": 11}


@dataclass
class MotionRepr:
    data: np.ndarray
    fps: float = 30.0
    part_slices: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.part_slices:
            col, slices = 0, {}
            for part in PARTS:
                slices[part] = (col, col + PART_WIDTHS[part])
                col += PART_WIDTHS[part]
            self.part_slices = slices
        self.validate()

    @property
    def T(self) -> int:
        return self.data.shape[0]

    def validate(self):
        if self.data.ndim != 2 or self.data.shape[1] != N_CHANNELS:
            raise ReprError(f"repr must be (T, {N_CHANNELS}), got {tuple(self.data.shape)}")
        spans = sorted(self.part_slices.values())
        if spans[0][0] != 0 or spans[-1][1] != N_CHANNELS or any(a[1] != b[0] for a, b in zip(spans, spans[1:])):
            raise ReprError("part slices must tile [0, 263)")


def heading_angles(root_rot):
    """Yaw of the pelvis forward axis (+z) for each frame."""
    r = torch.as_tensor(np.asarray(root_rot)) if not isinstance(root_rot, torch.Tensor) else root_rot
    fwd = r[..., :, 2]
    return torch.atan2(fwd[..., 0], fwd[..., 2])


def _fwd_diff(x: torch.Tensor) -> torch.Tensor:
    d = x[1:] - x[:-1]
    return torch.cat([d, d[-1:]], dim=0)


def build_repr(seq: MotionSequence, skeleton: Skeleton) -> MotionRepr:
    """Per-frame (T, 263) representation of a motion sequence."""
    if seq.T % 4:
        raise ReprError(f"T={seq.T} not divisible by 4")
    if not (np.isfinite(seq.positions).all() and np.isfinite(seq.rotations).all()):
        raise ReprError("non-finite input")
    lay = layout_for(skeleton)
    pos = torch.as_tensor(seq.positions, dtype=torch.float64)
    rot = torch.as_tensor(seq.rotations, dtype=torch.float64)
    T = pos.shape[0]
    theta = heading_angles(rot[:, 0])
    inv_head = yaw_rotmat(-theta)  # (T, 3, 3)

    root = pos[:, 0]
    local = torch.einsum("tab,tjb->tja", inv_head, pos - root[:, None])
    vel = torch.einsum("tab,tjb->tja", inv_head, _fwd_diff(pos))
    six = rotmat_to_6d(rot)

    dtheta = theta[1:] - theta[:-1]
    dtheta = torch.remainder(dtheta + np.pi, 2 * np.pi) - np.pi
    angvel = torch.cat([dtheta, dtheta[-1:]])

    out = torch.zeros(T, N_CHANNELS, dtype=torch.float64)
    for j in lay.joint_pos:
        out[:, lay.joint_pos[j]:lay.joint_pos[j] + 3] = local[:, j]
        out[:, lay.joint_rot[j]:lay.joint_rot[j] + 6] = six[:, j]
        out[:, lay.joint_vel[j]:lay.joint_vel[j] + 3] = vel[:, j]
    out[:, lay.root_angvel] = angvel
    out[:, lay.root_linvel] = vel[:, 0, 0]
    out[:, lay.root_linvel + 1] = vel[:, 0, 2]
    out[:, lay.root_height] = root[:, 1]
    out[:, lay.root_vel:lay.root_vel + 3] = vel[:, 0]
    feet = [skeleton.joint(n) for n in CONTACT_JOINTS]
    speed2 = (vel[:, feet] ** 2).sum(-1)
    out[:, lay.contacts:lay.contacts + 4] = (speed2 < CONTACT_THRESHOLD).to(torch.float64)
    return MotionRepr(out.numpy(), fps=seq.fps)


def initial_root_of(seq: MotionSequence) -> tuple[np.ndarray, float]:
    """(pelvis position, heading) at frame 0, the anchor recover_positions needs."""
    theta = float(heading_angles(seq.rotations[0, 0]))
    return seq.positions[0, 0].copy(), theta


def recover_positions(repr_data, skeleton: Skeleton, initial_root=None):
    """Global joint positions (T, 22, 3) from representation rows.

    ``repr_data`` may be a MotionRepr, an array or a (possibly batched,
    differentiable) tensor of shape (..., T, 263). ``initial_root`` is
    ``(xyz, heading)``; the x/z of ``xyz`` anchor the integrated root track
    (its y is ignored, height comes from the representation).
    """
    data = repr_data.data if isinstance(repr_data, MotionRepr) else repr_data
    is_tensor = isinstance(data, torch.Tensor)
    x = data if is_tensor else torch.as_tensor(np.asarray(data, dtype=np.float64))
    if x.shape[-1] != N_CHANNELS:
        raise ReprError(f"expected {N_CHANNELS} channels, got {x.shape[-1]}")
    lay = layout_for(skeleton)
    if initial_root is None:
        xyz0, theta0 = np.zeros(3), 0.0
    else:
        xyz0, theta0 = initial_root
    xyz0 = torch.as_tensor(np.asarray(xyz0, dtype=np.float64), dtype=x.dtype)

    angvel = x[..., lay.root_angvel]
    # heading at t is theta0 plus the angular velocities of frames < t
    theta = theta0 + torch.cumsum(angvel, dim=-1) - angvel
    head = yaw_rotmat(theta)
    lin = torch.stack([x[..., lay.root_linvel], torch.zeros_like(angvel), x[..., lay.root_linvel + 1]], dim=-1)
    step = torch.einsum("...tab,...tb->...ta", head, lin)
    xz = torch.cumsum(step, dim=-2) - step + xyz0
    root = torch.stack([xz[..., 0], x[..., lay.root_height], xz[..., 2]], dim=-1)

    order = sorted(lay.joint_pos)
    if order != list(range(1, skeleton.n_joints)):
        raise ReprError("layout does not cover every non-root joint")
    idx = torch.tensor([[lay.joint_pos[j] + k for k in range(3)] for j in order])
    local = x[..., idx]  # (..., T, 21, 3)
    world = root[..., None, :] + torch.einsum("...tab,...tjb->...tja", head, local)
    out = torch.cat([root[..., None, :], world], dim=-2)
    return out if is_tensor else out.numpy()


def split_parts(repr_: MotionRepr) -> list[np.ndarray]:
    """Six column blocks in part order (Head, LArm, RArm, LLeg, RLeg, Root)."""
    return [repr_.data[:, slice(*repr_.part_slices[p])] for p in PARTS]
