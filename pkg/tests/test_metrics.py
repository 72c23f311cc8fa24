import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ego_omni.bench.metrics import MetricError, jitter, mpjpe, pa_mpjpe, procrustes_align
from ego_omni.kinematics import random_rotations

seeds = st.integers(0, 2**31 - 1)


def loop_mpjpe(pred, gt):
    total, n = 0.0, 0
    for t in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            total += sum((pred[t, j, k] - gt[t, j, k]) ** 2 for k in range(3)) ** 0.5
            n += 1
    return 1000.0 * total / n


def test_mpjpe_cases(rng):
    gt = rng.normal(size=(1, 22, 3))
    assert mpjpe(gt, gt) == 0.0
    pred = gt.copy()
    pred[0, 5, 1] += 0.022
    assert abs(mpjpe(pred, gt) - 1.0) < 1e-9
    with pytest.raises(MetricError):
        mpjpe(gt, gt[:, :21])


@given(seeds)
def test_mpjpe_loop_oracle_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3, 22, 3))
    assert abs(mpjpe(a, b) - loop_mpjpe(a, b)) < 1e-9
    assert mpjpe(a, b) == mpjpe(b, a)


@given(seeds)
def test_pa_rigid_similarity_is_zero(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(4, 22, 3))
    R = random_rotations(rng, (4,))
    s = rng.uniform(0.5, 2.0, size=4)
    pred = s[:, None, None] * np.einsum("fik,fjk->fji", R, gt) + rng.normal(size=(4, 1, 3))
    assert pa_mpjpe(pred, gt) < 1e-6
    assert pa_mpjpe(gt, gt) < 1e-9


@given(seeds)
def test_pa_feasibility(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.normal(size=(2, 3, 22, 3))
    aligned = procrustes_align(pred, gt)
    assert ((aligned - gt) ** 2).sum() <= ((pred - gt) ** 2).sum() + 1e-12


def test_pa_asymmetry_and_degenerate():
    gt = np.zeros((1, 22, 3))
    gt[0, :, 0] = np.linspace(0, 1, 22)
    gt[0, :, 1] = np.linspace(0, 1, 22) ** 2
    pred = gt.copy()
    pred[0, 0, 2] = 0.5  # one joint pushed out of plane
    assert abs(pa_mpjpe(pred, gt) - pa_mpjpe(gt, pred)) > 1e-3
    with pytest.raises(MetricError):
        pa_mpjpe(np.zeros((1, 22, 3)), gt)


def test_jitter_analytic():
    t = np.arange(10, dtype=float)
    base = np.random.default_rng(0).normal(size=(22, 3))
    lin = base + t[:, None, None] * np.array([0.3, -0.1, 0.2])
    quad = lin + (t ** 2)[:, None, None] * np.array([0.05, 0.0, -0.02])
    assert jitter(lin, 30.0) < 1e-6 and jitter(quad, 30.0) < 1e-6
    cube = np.zeros((10, 22, 3))
    cube[..., 0] = (t ** 3)[:, None]
    assert abs(jitter(cube, 1.0) - 0.006) < 1e-6
    with pytest.raises(MetricError):
        jitter(cube[:3], 1.0)


@given(seeds, st.floats(1.0, 120.0))
def test_jitter_affine_invariance(seed, fps):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(12, 22, 3))
    t = np.arange(12, dtype=float)[:, None, None]
    moved = p + rng.normal(size=3) + t * rng.normal(size=3)
    assert abs(jitter(moved, fps) - jitter(p, fps)) <= 1e-9 * max(1.0, jitter(p, fps))
