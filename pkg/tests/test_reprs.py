import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from ego_omni.kinematics import MotionSequence, Skeleton, yaw_rotmat
from ego_omni.reprs import (
    N_CHANNELS,
    MotionRepr,
    ReprError,
    build_repr,
    initial_root_of,
    layout_for,
    recover_positions,
    split_parts,
)

from .conftest import random_sequence

seeds = st.integers(0, 2**31 - 1)


def static_sequence(sk, T=8, height=0.9):
    rots = np.tile(np.eye(3), (T, 22, 1, 1))
    root = np.tile([0.0, height, 0.0], (T, 1))
    return MotionSequence.from_local(sk, root, rots)


def test_layout_widths(skeleton):
    lay = layout_for(skeleton)
    widths = [b - a for a, b in lay.part_slices.values()]
    assert widths == [60, 48, 48, 48, 48, 11]
    assert sum(widths) == N_CHANNELS == 21 * 12 + 11


def test_static_pose_channels(skeleton):
    rep = build_repr(static_sequence(skeleton), skeleton)
    lay = layout_for(skeleton)
    np.testing.assert_allclose(rep.data[:, lay.root_height], 0.9)
    vel_cols = [lay.root_angvel, lay.root_linvel, lay.root_linvel + 1] + list(range(lay.root_vel, lay.root_vel + 3))
    vel_cols += [lay.joint_vel[j] + k for j in lay.joint_vel for k in range(3)]
    np.testing.assert_array_equal(rep.data[:, vel_cols], 0.0)
    np.testing.assert_array_equal(rep.data[:, lay.contacts:lay.contacts + 4], 1.0)


def test_vertical_translation(skeleton):
    T, v, fps = 12, 0.3, 30.0
    rots = np.tile(np.eye(3), (T, 22, 1, 1))
    root = np.stack([np.zeros(T), 0.5 + v / fps * np.arange(T), np.zeros(T)], -1)
    rep = build_repr(MotionSequence.from_local(skeleton, root, rots, fps), skeleton)
    lay = layout_for(skeleton)
    np.testing.assert_allclose(rep.data[:, lay.root_linvel:lay.root_linvel + 2], 0.0, atol=1e-15)
    np.testing.assert_allclose(np.diff(rep.data[:, lay.root_height]), v / fps, atol=1e-12)


def test_build_errors(skeleton, rng):
    seq = random_sequence(rng, T=8)
    seq.positions = seq.positions[:7]
    seq.rotations = seq.rotations[:7]
    with pytest.raises(ReprError):
        build_repr(seq, skeleton)


@given(seeds)
def test_roundtrip(seed):
    sk = Skeleton()
    seq = random_sequence(np.random.default_rng(seed), T=16)
    rec = recover_positions(build_repr(seq, sk), sk, initial_root_of(seq))
    assert np.abs(rec - seq.positions).max() < 1e-3


def test_recover_static(skeleton):
    seq = static_sequence(skeleton)
    rec = recover_positions(build_repr(seq, skeleton), skeleton, initial_root_of(seq))
    np.testing.assert_allclose(rec, seq.positions, atol=1e-12)


def test_zero_velocity_keeps_root(skeleton, rng):
    seq = random_sequence(rng, T=16)
    rep = build_repr(seq, skeleton).data.copy()
    lay = layout_for(skeleton)
    rep[:, [lay.root_angvel, lay.root_linvel, lay.root_linvel + 1]] = 0.0
    xyz, th = initial_root_of(seq)
    rec = recover_positions(rep, skeleton, (xyz, th))
    np.testing.assert_allclose(rec[:, 0, [0, 2]], np.tile(xyz[[0, 2]], (16, 1)), atol=1e-12)


def test_recover_is_differentiable(skeleton, rng):
    rep = torch.as_tensor(build_repr(random_sequence(rng, T=8), skeleton).data).requires_grad_(True)
    recover_positions(rep[None], skeleton).sum().backward()
    assert torch.isfinite(rep.grad).all() and rep.grad.abs().sum() > 0


def test_split_parts(skeleton, rng):
    rep = build_repr(random_sequence(rng, T=8), skeleton)
    parts = split_parts(rep)
    assert [p.shape[1] for p in parts] == [60, 48, 48, 48, 48, 11]
    np.testing.assert_array_equal(np.concatenate(parts, 1), rep.data)
    data = np.zeros((8, N_CHANNELS))
    data[:, 252:] = 7.0
    parts = split_parts(MotionRepr(data))
    assert all(not p.any() for p in parts[:5]) and (parts[5] == 7).all()


@given(seeds, st.floats(-np.pi, np.pi), st.floats(-5, 5), st.floats(-5, 5))
def test_rigid_ground_plane_invariance(seed, yaw, dx, dz):
    sk = Skeleton()
    seq = random_sequence(np.random.default_rng(seed), T=8)
    R = yaw_rotmat(np.float64(yaw))
    pos = seq.positions @ R.T + np.array([dx, 0.0, dz])
    rots = seq.rotations.copy()
    rots[:, 0] = R @ rots[:, 0]
    moved = MotionSequence(pos, rots, seq.fps)
    a, b = build_repr(seq, sk).data, build_repr(moved, sk).data
    lay = layout_for(sk)
    cols = [lay.joint_pos[j] + k for j in lay.joint_pos for k in range(3)]
    np.testing.assert_allclose(b[:, cols], a[:, cols], atol=1e-6)


def test_repr_validation():
    with pytest.raises(ReprError):
        MotionRepr(np.zeros((8, 262)))
