import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ego_omni.kinematics import (
    IMU_PART,
    PARTS,
    KinematicsError,
    MotionSequence,
    Skeleton,
    axis_angle_to_rotmat,
    forward_kinematics,
    limb_direction,
    random_rotations,
    rotmat_to_6d,
    sixd_to_rotmat,
)

from .conftest import random_sequence

seeds = st.integers(0, 2**31 - 1)


def chain_oracle(sk, root, rots):
    """Walk each joint's ancestor chain from the root and multiply out, one joint at a time."""
    T, J = rots.shape[:2]
    out = np.zeros((T, J, 3))
    for t in range(T):
        for j in range(J):
            chain = []
            k = j
            while k != -1:
                chain.append(k)
                k = sk.parent_index[k]
            chain = chain[::-1]  # root ... j
            p = root[t].copy()
            G = np.eye(3)
            for a, b in zip(chain, chain[1:]):
                G = G @ rots[t, a]
                p = p + G @ sk.offsets[b]
            out[t, j] = p
    return out


def test_skeleton_structure(skeleton):
    assert skeleton.n_joints == 22
    sizes = {p: len(skeleton.part_joints(p)) for p in PARTS}
    assert sizes == {"Root": 1, "Head": 5, "LArm": 4, "RArm": 4, "LLeg": 4, "RLeg": 4}
    joints = sorted(j for p in PARTS for j in skeleton.part_joints(p))
    assert joints == list(range(22))
    for label, (j, c, p) in skeleton.imu_sites.items():
        assert {skeleton.part_of[k] for k in (j, c, p)} == {IMU_PART[label]}


def test_skeleton_rejects_cycle():
    parents = list(Skeleton().parent_index)
    parents[3] = 5
    with pytest.raises(KinematicsError):
        Skeleton(parent_index=tuple(parents))


def test_fk_identity_pose_sums_offsets(skeleton):
    T = 2
    rots = np.tile(np.eye(3), (T, 22, 1, 1))
    pos = forward_kinematics(skeleton, np.zeros((T, 3)), rots)
    expect = chain_oracle(skeleton, np.zeros((T, 3)), rots)
    np.testing.assert_allclose(pos, expect, atol=1e-12)
    # head = pelvis + spine1 + spine2 + spine3 + neck + head offsets
    head = skeleton.joint("head")
    chain, k = [], head
    while k:
        chain.append(k)
        k = skeleton.parent_index[k]
    np.testing.assert_allclose(pos[0, head], skeleton.offsets[chain].sum(0), atol=1e-12)


def test_fk_yaw_180_negates_xz(skeleton, rng):
    seq = random_sequence(rng, T=8)
    flip = axis_angle_to_rotmat(np.array([0.0, np.pi, 0.0]))
    rots = seq.rotations.copy()
    rots[:, 0] = flip @ rots[:, 0]
    root = seq.positions[:, 0]
    a = forward_kinematics(skeleton, root, seq.rotations) - root[:, None]
    b = forward_kinematics(skeleton, root, rots) - root[:, None]
    np.testing.assert_allclose(b[..., [0, 2]], -a[..., [0, 2]], atol=1e-9)
    np.testing.assert_allclose(b[..., 1], a[..., 1], atol=1e-9)


@given(seeds)
def test_fk_matches_chain_oracle(seed):
    rng = np.random.default_rng(seed)
    sk = Skeleton()
    rots = random_rotations(rng, (3, 22))
    root = rng.normal(size=(3, 3))
    np.testing.assert_allclose(forward_kinematics(sk, root, rots), chain_oracle(sk, root, rots), atol=1e-6)


@given(seeds)
def test_fk_preserves_bone_lengths(seed):
    rng = np.random.default_rng(seed)
    sk = Skeleton()
    pos = forward_kinematics(sk, rng.normal(size=(2, 3)), random_rotations(rng, (2, 22)))
    for j in range(1, 22):
        d = np.linalg.norm(pos[:, j] - pos[:, sk.parent_index[j]], axis=-1)
        np.testing.assert_allclose(d, np.linalg.norm(sk.offsets[j]), atol=1e-6)


def test_fk_rejects_bad_rotation(skeleton):
    rots = np.tile(np.eye(3), (4, 22, 1, 1))
    rots[2, 7] *= 1.1
    with pytest.raises(KinematicsError, match="frame 2, joint 7"):
        forward_kinematics(skeleton, np.zeros((4, 3)), rots)


def test_6d_analytic_cases():
    np.testing.assert_array_equal(rotmat_to_6d(np.eye(3)), [1, 0, 0, 0, 1, 0])
    Rz = axis_angle_to_rotmat(np.array([0.0, 0.0, np.pi / 2]))
    np.testing.assert_allclose(rotmat_to_6d(Rz), [0, 1, 0, -1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(sixd_to_rotmat(np.array([1.0, 0, 0, 0, 1, 0])), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(sixd_to_rotmat(np.array([2.0, 0, 0, 0, 3, 0])), np.eye(3), atol=1e-15)


@pytest.mark.parametrize("v", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 2, 0, 0], [0, 1, 0, 0, -3, 0]])
def test_6d_degenerate(v):
    with pytest.raises(KinematicsError, match="degenerate 6D rotation"):
        sixd_to_rotmat(np.array(v, dtype=float))


@given(seeds)
def test_6d_roundtrips(seed):
    rng = np.random.default_rng(seed)
    R = random_rotations(rng, (50,))
    np.testing.assert_allclose(sixd_to_rotmat(rotmat_to_6d(R)), R, atol=1e-6)
    v = rng.normal(size=(50, 6))
    v6 = rotmat_to_6d(sixd_to_rotmat(v))
    np.testing.assert_allclose(rotmat_to_6d(sixd_to_rotmat(v6)), v6, atol=1e-6)


@given(seeds)
def test_6d_noisy_input_is_orthonormal(seed):
    rng = np.random.default_rng(seed)
    v = rotmat_to_6d(random_rotations(rng, (20,))) + rng.normal(scale=1e-3, size=(20, 6))
    R = sixd_to_rotmat(v)
    np.testing.assert_allclose(R @ np.swapaxes(R, -1, -2), np.broadcast_to(np.eye(3), R.shape), atol=1e-6)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-6)


def _two_joint_positions(child):
    sk = Skeleton()
    _, c, p = sk.imu_sites["H"]
    pos = np.zeros((1, 22, 3))
    pos[0, c] = child
    return sk, pos


def test_limb_direction_cases():
    sk, pos = _two_joint_positions([0, 1, 0])
    np.testing.assert_allclose(limb_direction(pos, sk, "H", 0), [0, 1, 0])
    sk, pos = _two_joint_positions([3, 4, 0])
    np.testing.assert_allclose(limb_direction(pos, sk, "H", 0), [0.6, 0.8, 0], atol=1e-15)
    sk, pos = _two_joint_positions([0, 0, 0])
    with pytest.raises(KinematicsError, match="collapsed limb"):
        limb_direction(pos, sk, "H", 0)


@given(seeds, st.sampled_from(["H", "LP", "RP", "LW", "RW"]))
def test_limb_direction_unit_norm(seed, label):
    seq = random_sequence(np.random.default_rng(seed), T=8)
    assert abs(np.linalg.norm(limb_direction(seq, Skeleton(), label, 3)) - 1) < 1e-9


def test_motion_sequence_validation(skeleton):
    rots = np.tile(np.eye(3), (10, 22, 1, 1))
    with pytest.raises(KinematicsError, match="divisible by 4"):
        MotionSequence.from_local(skeleton, np.zeros((10, 3)), rots)
    pos = np.zeros((8, 22, 3))
    pos[3, 4, 1] = np.nan
    with pytest.raises(KinematicsError, match="non-finite"):
        MotionSequence(pos, np.tile(np.eye(3), (8, 22, 1, 1)))
