"""Sliding-window weighted bundle adjustment.

Parameters per keyframe are the 15-dim tangent block [dp, dq, dv, dba, dbw];
one inverse depth per optimized feature follows all keyframe blocks. The
first keyframe's pose is held fixed (gauge).
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from robvio.geometry import quat_to_rot_batch, skew_batch
from robvio.preint import imu_residual, raw_residual
from robvio.state import (
    MIN_DEPTH,
    TANGENT_DIM,
    BodyState,
    CameraModel,
    MarginalPrior,
    WindowState,
    bearing,
    boxminus,
    boxplus,
)

log = logging.getLogger(__name__)

KERNELS = ("plain_ls", "huber", "atls")
GAUGE_DIM = 6


class SolverError(RuntimeError):
    pass


class WindowResetSignal(Exception):
    """Every tracked feature has zero weight; the window must restart."""


@dataclass
class SolverConfig:
    n_k: int = 9
    n_o: int = 4
    parallax_threshold: float = 10.0
    max_outer_alternations: int = 2
    max_inner_iterations: int = 10
    kernel_mode: str = "atls"
    huber_delta: float = 1.0
    r_max: float = 10.0
    pixel_sigma: float = 1.0
    r_hat_floor: float = 3.0
    min_depth: float = 0.1
    max_depth: float = 200.0
    initial_damping: float = 1e-4
    # prior on velocity and biases of the first keyframe at (re)initialization
    init_sigma_v: float = 0.1
    init_sigma_ba: float = 0.05
    init_sigma_bw: float = 0.005

    def __post_init__(self):
        if self.n_k < 3:
            raise ValueError("n_k must be >= 3")
        if self.kernel_mode not in KERNELS:
            raise ValueError("kernel_mode must be one of %s" % (KERNELS,))
        for name in ("n_o", "parallax_threshold", "max_outer_alternations", "max_inner_iterations",
                     "huber_delta", "r_max", "pixel_sigma"):
            if not getattr(self, name) > 0:
                raise ValueError("%s must be positive" % name)


@dataclass(frozen=True)
class VisualResidualTerm:
    feature_id: int
    anchor: int
    target: int
    anchor_pixel: tuple
    target_pixel: tuple
    weight: float


# ---------------------------------------------------------------- visual model

def visual_residual(cam: CameraModel, x_anchor: BodyState, x_target: BodyState, inv_depth,
                    anchor_pixel, target_pixel):
    """Pixel reprojection residual of an inverse-depth feature.

    Returns ``(r, J_anchor, J_target, J_lambda)``; the state Jacobians are
    2x15 in the keyframe tangent ordering.
    """
    r, Ja, Jt, Jl, _ = _visual_batch(
        cam,
        x_anchor.R[None], x_anchor.p_wb[None], x_target.R[None], x_target.p_wb[None],
        np.array([inv_depth], dtype=float), bearing(cam, anchor_pixel), np.atleast_2d(target_pixel),
    )
    JA = np.zeros((2, TANGENT_DIM))
    JT = np.zeros((2, TANGENT_DIM))
    JA[:, 0:6] = Ja[0]
    JT[:, 0:6] = Jt[0]
    return r[0], JA, JT, Jl[0, :, 0]


def _visual_batch(cam, Ra, pa, Rt, pt, lam, m_a, z_t, jacobians=True):
    """Vectorized reprojection of N anchor rays into their target frames."""
    R_bc, t_bc = cam.R_bc, cam.t_bc
    P_ci = m_a / lam[:, None]
    P_bi = P_ci @ R_bc.T + t_bc
    P_w = (Ra @ P_bi[:, :, None])[:, :, 0] + pa
    P_bj = ((P_w - pt)[:, None, :] @ Rt)[:, 0, :]
    P_cj = (P_bj - t_bc) @ R_bc
    x, y, z = P_cj[:, 0], P_cj[:, 1], P_cj[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.column_stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy]) - z_t
    if not jacobians:
        return r, None, None, None, z
    n = len(lam)
    D = np.zeros((n, 2, 3))
    D[:, 0, 0] = cam.fx / z
    D[:, 0, 2] = -cam.fx * x / (z * z)
    D[:, 1, 1] = cam.fy / z
    D[:, 1, 2] = -cam.fy * y / (z * z)
    DB = D @ R_bc.T                                   # d r / d P_bj
    A = DB @ Rt.transpose(0, 2, 1)                    # d r / d P_w
    Ja = np.empty((n, 2, 6))
    Ja[:, :, 0:3] = A
    Ja[:, :, 3:6] = -A @ Ra @ skew_batch(P_bi)
    Jt = np.empty((n, 2, 6))
    Jt[:, :, 0:3] = -A
    Jt[:, :, 3:6] = DB @ skew_batch(P_bj)
    dPci = -P_ci / lam[:, None]
    Jl = A @ Ra @ (R_bc @ dPci[:, :, None])
    return r, Ja, Jt, Jl, z


def triangulate(cam: CameraModel, x_a: BodyState, x_b: BodyState, pix_a, pix_b):
    """Depth along the anchor ray from two views, or None if degenerate."""
    d = triangulate_batch(cam, x_a.R[None], x_a.p_wb[None], x_b.R[None], x_b.p_wb[None],
                          bearing(cam, pix_a), bearing(cam, pix_b))
    return None if not np.isfinite(d[0]) else float(d[0])


def triangulate_batch(cam, Ra, pa, Rb, pb, m_a, m_b, min_baseline=1e-12):
    """Two-view depth along the anchor ray; NaN without usable parallax or
    when the best fit lies behind the cameras.

    Solved linearly in inverse depth on the second view's image plane, which
    tracks the pixel error closely even for short baselines.
    """
    Rca = Ra @ cam.R_bc
    Rcb = Rb @ cam.R_bc
    ca = pa + np.einsum("nij,j->ni", Ra, cam.t_bc)
    cb = pb + np.einsum("nij,j->ni", Rb, cam.t_bc)
    # anchor camera -> second camera
    R_ba = np.einsum("nji,njk->nik", Rcb, Rca)
    t_ba = np.einsum("nji,nj->ni", Rcb, ca - cb)
    d = np.einsum("nij,nj->ni", R_ba, m_a)
    A = d[:, :2] - m_b[:, :2] * d[:, 2:3]
    B = t_ba[:, :2] - m_b[:, :2] * t_ba[:, 2:3]
    gain = np.einsum("ni,ni->n", B, B)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = -np.einsum("ni,ni->n", A, B) / gain
        depth = 1.0 / lam
    depth[~(gain > min_baseline) | ~(lam > 0)] = np.nan
    return depth


# ---------------------------------------------------------------- parallax

def weighted_parallax(parallaxes, weights):
    parallaxes = np.asarray(parallaxes, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if parallaxes.size == 0:
        raise WindowResetSignal("no tracked features")
    total = weights.sum()
    if total <= 0:
        raise WindowResetSignal("all tracked feature weights are zero")
    return float(np.dot(weights, parallaxes) / total)


def select_keyframe(theta_avg, parallax_threshold):
    return theta_avg > parallax_threshold


def rotation_compensated_parallax(cam, R_wb_ref, R_wb_cur, pix_ref, pix_cur):
    """Pixel displacement after undoing the relative camera rotation."""
    R_rel = (R_wb_cur @ cam.R_bc).T @ (R_wb_ref @ cam.R_bc)
    rays = bearing(cam, pix_ref) @ R_rel.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.column_stack([cam.fx * rays[:, 0] / rays[:, 2] + cam.cx, cam.fy * rays[:, 1] / rays[:, 2] + cam.cy])
    out = np.linalg.norm(uv - np.asarray(pix_cur), axis=1)
    return np.where(rays[:, 2] > 0, out, np.linalg.norm(np.asarray(pix_ref) - np.asarray(pix_cur), axis=1))


# ---------------------------------------------------------------- problem

@dataclass
class VisualObs:
    """Flattened non-anchor observations of the optimized features."""

    feat: np.ndarray     # column of the feature among optimized features
    anchor: np.ndarray   # window index of the anchor keyframe
    target: np.ndarray   # window index of the observing keyframe
    m_a: np.ndarray      # anchor rays (z = 1)
    z_t: np.ndarray      # observed pixels
    weight: np.ndarray   # feature weight per observation

    def __len__(self):
        return len(self.feat)


def collect_observations(window: WindowState, cam, feature_ids, weights=None) -> VisualObs:
    index = {fid: i for i, fid in enumerate(window.frame_ids)}
    feat, anc, tgt, pix_a, pix_t, w = [], [], [], [], [], []
    for col, fid in enumerate(feature_ids):
        f = window.features[fid]
        track = [(index[fr], px) for fr, px in f.track if fr in index]
        a_idx, a_pix = track[0]
        wt = f.weight if weights is None else weights[col]
        for t_idx, t_pix in track[1:]:
            feat.append(col)
            anc.append(a_idx)
            tgt.append(t_idx)
            pix_a.append(a_pix)
            pix_t.append(t_pix)
            w.append(wt)
    if not feat:
        return VisualObs(np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), np.zeros((0, 3)),
                         np.zeros((0, 2)), np.zeros(0))
    return VisualObs(np.array(feat), np.array(anc), np.array(tgt), bearing(cam, np.array(pix_a)),
                     np.array(pix_t, dtype=float), np.array(w, dtype=float))


def in_front(window: WindowState, cam, feature_ids) -> np.ndarray:
    """Per feature: every window observation lies in front of its camera."""
    ok = np.ones(len(feature_ids), dtype=bool)
    obs = collect_observations(window, cam, feature_ids)
    if not len(obs):
        return ok
    kfs = window.keyframes
    R = quat_to_rot_batch(np.array([k.q_wb for k in kfs]))
    p = np.array([k.p_wb for k in kfs])
    lam = np.array([window.features[f].inv_depth for f in feature_ids], dtype=float)
    r, *_, z = _visual_batch(cam, R[obs.anchor], p[obs.anchor], R[obs.target], p[obs.target],
                             lam[obs.feat], obs.m_a, obs.z_t, jacobians=False)
    bad = ~(z > MIN_DEPTH) | ~np.all(np.isfinite(r), axis=1)
    ok[np.unique(obs.feat[bad])] = False
    return ok


@dataclass
class SolveResult:
    cost: float
    initial_cost: float
    iterations: int
    converged: bool
    costs: list = field(default_factory=list)
    wall_ms: float = 0.0
    n_visual_terms: int = 0


class WindowProblem:
    """Nonlinear least-squares problem over a window's keyframes and a chosen
    subset of feature inverse depths."""

    def __init__(self, window: WindowState, preints, cam: CameraModel, cfg: SolverConfig,
                 feature_ids, fix_gauge=True):
        self.window = window
        self.preints = preints
        self.cam = cam
        self.cfg = cfg
        self.feature_ids = list(feature_ids)
        self.n = len(window.keyframes)
        self.nf = len(self.feature_ids)
        self.dim = TANGENT_DIM * self.n + self.nf
        self.fix_gauge = fix_gauge
        self.obs = collect_observations(window, cam, self.feature_ids)
        self.sigma = cfg.pixel_sigma
        huber = cfg.kernel_mode == "huber"
        self.huber_delta = cfg.huber_delta / cfg.pixel_sigma if huber else None
        self._scatter = None

    # state access -------------------------------------------------------
    def get_state(self):
        lam = np.array([self.window.features[f].inv_depth for f in self.feature_ids], dtype=float)
        return list(self.window.keyframes), lam

    def set_state(self, kfs, lam):
        self.window.keyframes[:] = kfs
        for f, l in zip(self.feature_ids, lam):
            self.window.features[f].inv_depth = float(l)

    def retract(self, kfs, lam, dx):
        new = [boxplus(k, dx[TANGENT_DIM * i:TANGENT_DIM * (i + 1)]) for i, k in enumerate(kfs)]
        return new, lam + dx[TANGENT_DIM * self.n:]

    # residuals ------------------------------------------------------------
    def _kernel(self, s):
        """Robust cost and IRLS weight for squared whitened norms ``s``."""
        if self.huber_delta is None:
            return s, np.ones_like(s)
        d = self.huber_delta
        root = np.sqrt(s)
        big = root > d
        rho = np.where(big, 2 * d * root - d * d, s)
        w = np.where(big, d / np.maximum(root, 1e-300), 1.0)
        return rho, w

    def evaluate(self, kfs, lam, jacobians=True):
        """Total cost and, optionally, the normal equations (H, b)."""
        dim = self.dim
        H = np.zeros((dim, dim)) if jacobians else None
        b = np.zeros(dim) if jacobians else None
        cost = 0.0

        prior = self.window.marginal_prior
        if prior is not None:
            idx = [self.window.frame_ids.index(f) for f in prior.frame_ids]
            delta = np.concatenate([boxminus(kfs[i], lin) for i, lin in zip(idx, prior.lin_states)])
            e = prior.H_p @ delta - prior.r_p
            cost += float(e @ e)
            if jacobians:
                cols = np.concatenate([np.arange(TANGENT_DIM * i, TANGENT_DIM * (i + 1)) for i in idx])
                H[np.ix_(cols, cols)] += prior.H_p.T @ prior.H_p
                b[cols] += prior.H_p.T @ e

        g = self.window.gravity
        for k, pre in enumerate(self.preints):
            if not jacobians:
                if not (kfs[k].is_finite() and kfs[k + 1].is_finite()):
                    return np.inf, H, b
                r = pre.sqrt_information() @ raw_residual(pre, kfs[k], kfs[k + 1], g)
                cost += float(r @ r)
                continue
            r, Jk, Jk1 = imu_residual(pre, kfs[k], kfs[k + 1], g)
            cost += float(r @ r)
            J = np.hstack([Jk, Jk1])
            s = TANGENT_DIM * k
            H[s:s + 30, s:s + 30] += J.T @ J
            b[s:s + 30] += J.T @ r

        obs = self.obs
        if len(obs):
            R = quat_to_rot_batch(np.array([k.q_wb for k in kfs]))
            p = np.array([k.p_wb for k in kfs])
            r, Ja, Jt, Jl, z = _visual_batch(self.cam, R[obs.anchor], p[obs.anchor], R[obs.target],
                                             p[obs.target], lam[obs.feat], obs.m_a, obs.z_t, jacobians)
            if np.any(~(z > 1e-6)) or not np.all(np.isfinite(r)):
                return np.inf, H, b
            rw = r / self.sigma
            s = np.einsum("ni,ni->n", rw, rw)
            rho, irls = self._kernel(s)
            cost += float(np.dot(obs.weight, rho))
            if jacobians:
                sw = np.sqrt(obs.weight * irls) / self.sigma
                m = len(obs)
                J = np.empty((m, 2, 13))
                J[:, :, 0:6] = Ja
                J[:, :, 6:12] = Jt
                J[:, :, 12:13] = Jl
                J *= sw[:, None, None]
                rr = r * sw[:, None]
                cols, flat = self._scatter_index()
                JtJ = np.matmul(J.transpose(0, 2, 1), J)
                Jtr = np.matmul(J.transpose(0, 2, 1), rr[:, :, None])[:, :, 0]
                H += np.bincount(flat, weights=JtJ.ravel(), minlength=dim * dim).reshape(dim, dim)
                b += np.bincount(cols, weights=Jtr.ravel(), minlength=dim)
        return cost, H, b

    def _scatter_index(self):
        """Column indices of each observation's 13 parameters, flattened
        for bincount; fixed for the lifetime of the problem."""
        if self._scatter is None:
            obs, n, dim = self.obs, self.n, self.dim
            cols = np.empty((len(obs), 13), dtype=int)
            cols[:, 0:6] = TANGENT_DIM * obs.anchor[:, None] + np.arange(6)
            cols[:, 6:12] = TANGENT_DIM * obs.target[:, None] + np.arange(6)
            cols[:, 12] = TANGENT_DIM * n + obs.feat
            flat = (cols[:, :, None] * dim + cols[:, None, :]).ravel()
            self._scatter = (cols.ravel(), flat)
        return self._scatter

    def free_columns(self):
        cols = np.arange(self.dim)
        return cols[GAUGE_DIM:] if self.fix_gauge else cols

    def solve(self, max_iterations=None, damping=None):
        cfg = self.cfg
        max_iterations = max_iterations or cfg.max_inner_iterations
        lm = cfg.initial_damping if damping is None else damping
        t0 = time.perf_counter()
        kfs, lam = self.get_state()
        cost, H, b = self.evaluate(kfs, lam)
        if not np.isfinite(cost):
            raise SolverError("initial cost is not finite")
        initial = cost
        costs = [cost]
        free = self.free_columns()
        converged = False
        it = 0
        while it < max_iterations:
            it += 1
            Hf = H[np.ix_(free, free)]
            bf = b[free]
            diag = np.diag(Hf).copy()
            if np.any(diag <= 0):
                bad = free[diag <= 0]
                raise SolverError("rank-deficient system: unconstrained parameters %s" % bad.tolist())
            A = Hf + lm * np.diag(diag)
            try:
                step = -cho_solve(cho_factor(A, check_finite=False), bf, check_finite=False)
            except np.linalg.LinAlgError:
                lm *= 10.0
                continue
            dx = np.zeros(self.dim)
            dx[free] = step
            new_kfs, new_lam = self.retract(kfs, lam, dx)
            new_cost = self.evaluate(new_kfs, new_lam, jacobians=False)[0]
            if np.isfinite(new_cost) and new_cost < cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                kfs, lam, cost = new_kfs, new_lam, new_cost
                costs.append(cost)
                lm = max(lm * 0.1, 1e-12)
                if rel < 1e-15 or np.max(np.abs(step)) < 1e-12:
                    converged = True
                    break
                cost, H, b = self.evaluate(kfs, lam)
            else:
                lm *= 10.0
                if lm > 1e8:
                    converged = True
                    break
        self.set_state(kfs, lam)
        return SolveResult(cost, initial, it, converged, costs,
                           (time.perf_counter() - t0) * 1e3, len(self.obs))

    def linearized(self):
        """Cost, H and b at the current window state."""
        kfs, lam = self.get_state()
        return self.evaluate(kfs, lam)


def optimize_states(window: WindowState, preints, cam, cfg: SolverConfig, feature_ids, fix_gauge=True):
    """Damped Gauss-Newton over the window with the feature weights held fixed.

    Features with zero weight must not be passed in; they contribute nothing.
    """
    prob = WindowProblem(window, preints, cam, cfg, feature_ids, fix_gauge)
    return prob.solve()


# ---------------------------------------------------------------- marginalization

def _eig_sqrt(H, b, eps=1e-8):
    """Factor H = J^T J and return (J, r) with J^T r = b on the kept subspace."""
    H = 0.5 * (H + H.T)
    s, V = np.linalg.eigh(H)
    keep = s > eps * max(s.max(), 1.0)
    s_k = s[keep]
    V_k = V[:, keep]
    J = np.sqrt(s_k)[:, None] * V_k.T
    r = (V_k.T @ b) / np.sqrt(s_k)
    return J, r


def schur_marginalize(H, b, m_idx, k_idx, reg=1e-8):
    """Eliminate ``m_idx`` from the normal equations."""
    Hmm = H[np.ix_(m_idx, m_idx)]
    Hmm = 0.5 * (Hmm + Hmm.T)
    s, V = np.linalg.eigh(Hmm)
    if np.any(s <= reg * max(abs(s).max(), 1.0)):
        log.info("marginalized block not positive definite (min eig %.3g); regularizing", s.min())
        s = np.maximum(s, reg * max(abs(s).max(), 1.0))
    Hmm_inv = (V / s) @ V.T
    Hkm = H[np.ix_(k_idx, m_idx)]
    Hs = H[np.ix_(k_idx, k_idx)] - Hkm @ Hmm_inv @ Hkm.T
    bs = b[k_idx] - Hkm @ Hmm_inv @ b[m_idx]
    return Hs, bs


def marginalize_oldest(window: WindowState, preints, cam, cfg: SolverConfig, feature_ids):
    """Fold the oldest keyframe and the optimized features anchored on it into
    the linear prior. ``feature_ids`` are the currently optimized features.

    Returns the ids of features whose inverse depth was eliminated.
    """
    if len(window.keyframes) < 2:
        raise SolverError("nothing to marginalize into")
    oldest = window.frame_ids[0]
    anchored = [f for f in feature_ids
                if window.features[f].track and window.features[f].track[0][0] == oldest]
    n = len(window.keyframes)
    prob = WindowProblem(window, preints[:1], cam, cfg, anchored, fix_gauge=False)
    # restrict the problem to the prior, the first IMU factor and anchored features
    _, H, b = prob.linearized()
    touched = {0, 1}
    prior = window.marginal_prior
    if prior is not None:
        touched.update(window.frame_ids.index(f) for f in prior.frame_ids)
    touched.update(int(t) for t in prob.obs.target)
    keep_frames = sorted(touched - {0})
    m_idx = np.concatenate([np.arange(TANGENT_DIM), TANGENT_DIM * n + np.arange(len(anchored))]).astype(int)
    k_idx = np.concatenate([np.arange(TANGENT_DIM * i, TANGENT_DIM * (i + 1)) for i in keep_frames]).astype(int)
    Hs, bs = schur_marginalize(H, b, m_idx, k_idx)
    J, r = _eig_sqrt(Hs, bs)
    window.marginal_prior = MarginalPrior(
        frame_ids=[window.frame_ids[i] for i in keep_frames],
        H_p=J,
        r_p=-r,
        lin_states=[window.keyframes[i] for i in keep_frames],
    )
    return anchored


def initial_prior(state: BodyState, frame_id, cfg: SolverConfig):
    """Prior on velocity and biases of a freshly initialized first keyframe."""
    sig = np.concatenate([np.full(6, 1.0), np.full(3, cfg.init_sigma_v),
                          np.full(3, cfg.init_sigma_ba), np.full(3, cfg.init_sigma_bw)])
    H_p = np.diag(1.0 / sig)
    return MarginalPrior([frame_id], H_p, np.zeros(TANGENT_DIM), [state])
