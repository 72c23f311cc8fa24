"""Test-time optimization of the continuous latent against IMU measurements.

The energy compares decoded joint trajectories with the measured streams:

    E(Q) = lam_a * sum_i sum_t |a_hat - a| + lam_r * sum_i sum_t |r_hat - r|

with a_hat the second difference of the sensor joint and r_hat the unit limb
vector. Each norm is Charbonnier-smoothed, sqrt(|x|^2 + eps^2) - eps, so the
energy is differentiable at zero residual and an exact fit is a stationary
point. Minimization is L-BFGS (two-loop recursion) with a strong-Wolfe line
search from scipy.
"""

from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import line_search
from scipy.optimize._linesearch import LineSearchWarning

from .imusim import ImuRecord
from .kinematics import IMU_LABELS, Skeleton
from .reprs import MotionRepr, recover_positions

log = logging.getLogger(__name__)


class TrackerError(ValueError):
    pass


@dataclass
class EnergyConfig:
    lambda_a: float = 0.01
    lambda_r: float = 1.0
    max_iters: int = 1000
    history: int = 200
    step: float = 1.0
    tolerance: float = 1e-6
    c1: float = 1e-4
    c2: float = 0.9
    smooth: float = 1e-6  # Charbonnier epsilon of each residual norm
    limb_eps: float = 1e-6  # clamp of the limb-length denominator

    def __post_init__(self):
        for name in ("lambda_a", "lambda_r", "step", "tolerance", "smooth", "limb_eps"):
            if getattr(self, name) < 0:
                raise TrackerError(f"{name} must be non-negative")
        if self.lambda_a == 0 and self.lambda_r == 0:
            raise TrackerError("at least one energy weight must be positive")
        if not 0 < self.tolerance < 1:
            raise TrackerError("tolerance must be in (0, 1)")
        if self.max_iters < 0 or self.history < 1:
            raise TrackerError("max_iters >= 0 and history >= 1 required")
        if not 0 < self.c1 < self.c2 < 1:
            raise TrackerError("Wolfe constants need 0 < c1 < c2 < 1")


@dataclass
class TrackResult:
    latent: np.ndarray  # (T', 6, d) continuous
    motion: MotionRepr
    energy_trace: list = field(default_factory=list)
    term_values: tuple = (0.0, 0.0)  # (L_a, L_r) at the returned latent
    positions: np.ndarray | None = None
    iterations: int = 0
    converged: bool = False
    warning: str | None = None


def _decode_fn(decoder):
    return decoder.decode if hasattr(decoder, "decode") else decoder


def _targets(imu: ImuRecord, dtype):
    act = np.flatnonzero(imu.active)
    acc = torch.as_tensor(imu.accel[:, act], dtype=dtype)  # (T, k, 3)
    # measured limb direction: M R e_y = second column of M R
    r = np.einsum("kab,tkbc->tkac", imu.calib[act], imu.rot[:, act])[..., :, 1]
    return act, acc, torch.as_tensor(r, dtype=dtype)


def _charbonnier(x, eps):
    sq = (x * x).sum(-1)
    if eps == 0:
        return torch.sqrt(sq)
    return torch.sqrt(sq + eps * eps) - eps


def energy_terms(Q, imu: ImuRecord, decoder, skeleton: Skeleton, cfg: EnergyConfig, initial_root=None):
    """Differentiable (E, L_a, L_r) as tensors for latent Q (T', 6, d)."""
    if not imu.active.any():
        raise TrackerError("no active sensor")
    Q = torch.as_tensor(Q)
    rep = _decode_fn(decoder)(Q[None])[0]
    if rep.shape[0] != imu.T:
        raise TrackerError(f"decoded length {rep.shape[0]} does not match IMU length {imu.T}")
    pos = recover_positions(rep, skeleton, initial_root)
    act, acc, r_meas = _targets(imu, pos.dtype)
    joints = [skeleton.imu_sites[IMU_LABELS[i]][0] for i in act]
    p = pos[:, joints]  # (T, k, 3)
    a_hat = p[2:] - 2 * p[1:-1] + p[:-2]  # t in [0, T-3]
    L_a = _charbonnier(a_hat - acc[:-2], cfg.smooth).sum()
    child = [skeleton.imu_sites[IMU_LABELS[i]][1] for i in act]
    parent = [skeleton.imu_sites[IMU_LABELS[i]][2] for i in act]
    v = pos[:, child] - pos[:, parent]
    r_hat = v / torch.linalg.norm(v, dim=-1, keepdim=True).clamp_min(cfg.limb_eps)
    L_r = _charbonnier(r_hat - r_meas, cfg.smooth).sum()
    return cfg.lambda_a * L_a + cfg.lambda_r * L_r, L_a, L_r


def energy(Q, imu: ImuRecord, decoder, skeleton: Skeleton, cfg: EnergyConfig | None = None,
           initial_root=None) -> tuple[float, tuple[float, float]]:
    """Scalar energy and (L_a, L_r)."""
    cfg = cfg or EnergyConfig()
    with torch.no_grad():
        E, L_a, L_r = energy_terms(Q, imu, decoder, skeleton, cfg, initial_root)
    return float(E), (float(L_a), float(L_r))


def _value_and_grad(Q, imu, decoder, skeleton, cfg, initial_root):
    Q = torch.as_tensor(Q).detach().clone().requires_grad_(True)
    E, L_a, L_r = energy_terms(Q, imu, decoder, skeleton, cfg, initial_root)
    E.backward()
    g = Q.grad
    if not torch.isfinite(g).all():
        # find the offending term for the message
        for name, term in (("acceleration", L_a), ("orientation", L_r)):
            Qt = Q.detach().clone().requires_grad_(True)
            _, a, r = energy_terms(Qt, imu, decoder, skeleton, cfg, initial_root)
            (a if name == "acceleration" else r).backward()
            if not torch.isfinite(Qt.grad).all():
                raise TrackerError(f"non-finite gradient in the {name} term")
        raise TrackerError("non-finite gradient")
    return float(E.detach()), g.detach(), (float(L_a.detach()), float(L_r.detach()))


def energy_gradient(Q, imu: ImuRecord, decoder, skeleton: Skeleton, cfg: EnergyConfig | None = None,
                    initial_root=None):
    """Reverse-mode gradient of the energy, shaped like Q."""
    g = _value_and_grad(Q, imu, decoder, skeleton, cfg or EnergyConfig(), initial_root)[1]
    return g if isinstance(Q, torch.Tensor) else g.numpy()


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in reversed(list(zip(S, Y))):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((rho, a))
        q -= a * y
    if S:
        s, y = S[-1], Y[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * (y @ q)
        q += s * (a - b)
    return -q


def track(init_Q, imu: ImuRecord, decoder, skeleton: Skeleton, cfg: EnergyConfig | None = None,
          initial_root=None, dtype=torch.float64, fps: float = 30.0) -> TrackResult:
    """Minimize the energy over the continuous latent starting at ``init_Q``.

    ``decoder`` is a codec (anything with ``.decode``) or a callable mapping
    (1, T', 6, d) features to (1, T, 263) representations; use
    ``codec.frozen_decoder()`` so no parameter gradients are tracked.
    """
    cfg = cfg or EnergyConfig()
    Q0 = torch.as_tensor(np.asarray(init_Q) if not isinstance(init_Q, torch.Tensor) else init_Q.detach())
    Q0 = Q0.to(dtype)
    if Q0.ndim != 3:
        raise TrackerError(f"latent must be (T', 6, d), got {tuple(Q0.shape)}")
    shape = Q0.shape
    x = Q0.reshape(-1).numpy().astype(np.float64)

    cache = {}

    def fg(v, trial=True):
        key = v.tobytes()
        if key not in cache:
            cache.clear()
            try:
                E, g, terms = _value_and_grad(torch.as_tensor(v.reshape(shape), dtype=dtype), imu, decoder,
                                              skeleton, cfg, initial_root)
            except TrackerError:
                if not trial:
                    raise
                # a non-finite trial point is just a rejected step
                return np.inf, np.full(v.shape, np.nan), (np.nan, np.nan)
            cache[key] = (E, g.reshape(-1).numpy().astype(np.float64), terms)
        return cache[key]

    f, g, terms = fg(x, trial=False)
    trace = [f]
    S, Y = deque(maxlen=cfg.history), deque(maxlen=cfg.history)
    f_prev = None
    warn, converged, it = None, False, 0
    if np.linalg.norm(g) < cfg.tolerance:
        converged = True
    while not converged and it < cfg.max_iters:
        d = _two_loop(g, S, Y)
        if d @ g >= 0:  # not a descent direction: reset memory
            S.clear(), Y.clear()
            d = -g
        # first step of a fresh memory is scaled so its length equals cfg.step
        scale = cfg.step if S else cfg.step / max(np.linalg.norm(d), 1e-12)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LineSearchWarning)
            alpha, *_, f_new, _, g_new = line_search(
                lambda v: fg(v)[0], lambda v: fg(v)[1], x, scale * d, gfk=g, old_fval=f,
                old_old_fval=f_prev, c1=cfg.c1, c2=cfg.c2, amax=50.0, maxiter=20)
        if alpha is None or f_new is None or not np.isfinite(f_new) or f_new > f:
            if S:  # retry once from steepest descent
                S.clear(), Y.clear()
                f_prev = None
                continue
            warn = "line search failed; returning best iterate"
            break
        x_new = x + alpha * scale * d
        f_new, g_new, terms_new = fg(x_new)
        s, y = x_new - x, g_new - g
        if s @ y > 1e-12 * (y @ y):
            S.append(s), Y.append(y)
        rel = abs(f - f_new) / max(abs(f), 1e-300)
        f_prev, x, f, g, terms = f, x_new, f_new, g_new, terms_new
        trace.append(f)
        it += 1
        if np.linalg.norm(g) < cfg.tolerance or rel < cfg.tolerance:
            converged = True
    Q = torch.as_tensor(x.reshape(shape), dtype=dtype)
    with torch.no_grad():
        rep = _decode_fn(decoder)(Q[None])[0]
        pos = recover_positions(rep, skeleton, initial_root)
    if warn:
        log.warning(warn)
    return TrackResult(
        latent=Q.numpy(),
        motion=MotionRepr(rep.detach().cpu().double().numpy(), fps=fps),
        energy_trace=trace,
        term_values=terms,
        positions=pos.detach().cpu().double().numpy(),
        iterations=it,
        converged=converged,
        warning=warn,
    )
