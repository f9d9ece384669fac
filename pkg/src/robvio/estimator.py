"""Frame-by-frame sliding-window estimator.

Owns the window, the preintegrations between its frames and the feature
bookkeeping. The newest frame is always kept; once the next frame arrives
it is either promoted (the oldest keyframe gets marginalized when the
window is full) or discarded, with its IMU samples chained into the next
preintegration.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from robvio import atls
from robvio.preint import ImuNoiseParams, RelinearizationRequired, integrate, predict, repropagate, reintegrate
from robvio.solver import (
    SolverConfig,
    SolverError,
    WindowProblem,
    WindowResetSignal,
    _visual_batch,
    in_front,
    initial_prior,
    marginalize_oldest,
    rotation_compensated_parallax,
    select_keyframe,
    triangulate_batch,
    weighted_parallax,
)
from robvio.state import BodyState, CameraModel, Feature, FeatureCategory, WindowState, bearing

log = logging.getLogger(__name__)


@dataclass
class StateSnapshot:
    window: WindowState
    preints: list
    is_kf: list
    weight_memory: dict


@dataclass
class FrameResult:
    frame_index: int
    stamp: float
    state: BodyState
    keyframe: bool
    reset: bool = False
    ba_ms: float = 0.0
    optimized: bool = False
    shape: atls.AtlsShape | None = None
    bcc: list = field(default_factory=list)
    recoveries: int = 0
    exhausted: bool = False
    solver_failed: bool = False


class Estimator:
    def __init__(self, cfg: SolverConfig, cam: CameraModel, gravity=None,
                 imu_noise: ImuNoiseParams | None = None):
        self.cfg = cfg
        self.cam = cam
        self.imu_noise = imu_noise or ImuNoiseParams()
        self.window = WindowState(gravity=np.array([0.0, 0.0, -9.81]) if gravity is None else np.asarray(gravity, float))
        self.preints = []
        self.is_kf = []
        self.weight_memory = {}
        self.graduated_at = {}
        self.zeroed_at = {}
        self.current_frame = None
        self.last_shape = None

    # -------------------------------------------------------------- snapshot
    def snapshot(self) -> StateSnapshot:
        return StateSnapshot(self.window.copy(), list(self.preints), list(self.is_kf),
                             dict(self.weight_memory))

    def restore(self, snap: StateSnapshot):
        self.window = snap.window.copy()
        self.preints = list(snap.preints)
        self.is_kf = list(snap.is_kf)
        self.weight_memory = dict(snap.weight_memory)

    # -------------------------------------------------------------- window upkeep
    def initialize(self, state: BodyState, frame):
        self.window.keyframes[:] = [state]
        self.window.frame_ids[:] = [frame.index]
        self.window.features.clear()
        self.window.marginal_prior = initial_prior(state, frame.index, self.cfg)
        self.preints = []
        self.is_kf = [True]
        self._add_observations(frame)
        self.current_frame = frame.index

    def _add_observations(self, frame):
        feats = self.window.features
        for fid, pix in zip(frame.ids, frame.pixels):
            fid = int(fid)
            f = feats.get(fid)
            if f is None:
                f = Feature(fid, weight=self.weight_memory.get(fid, 1.0))
                feats[fid] = f
            f.track.append((frame.index, np.asarray(pix, dtype=float)))

    def _prune_frame(self, frame_id):
        """Remove a frame's observations; features left without any go."""
        for fid in list(self.window.features):
            f = self.window.features[fid]
            if f.track and f.track[0][0] == frame_id and len(f.track) > 1 and f.triangulated:
                self._reanchor(f)
            f.track = [(fr, px) for fr, px in f.track if fr != frame_id]
            if not f.track:
                self.weight_memory[fid] = f.weight
                del self.window.features[fid]

    def _reanchor(self, f: Feature):
        """Move the inverse depth from the first to the second observation."""
        idx = {fr: i for i, fr in enumerate(self.window.frame_ids)}
        (fa, pa), (fb, _) = f.track[0], f.track[1]
        if fa not in idx or fb not in idx or f.inv_depth <= 0:
            f.triangulated = False
            return
        xa, xb = self.window.keyframes[idx[fa]], self.window.keyframes[idx[fb]]
        cam = self.cam
        P_c = bearing(cam, pa)[0] / f.inv_depth
        P_w = xa.R @ (cam.R_bc @ P_c + cam.t_bc) + xa.p_wb
        P_cb = cam.R_bc.T @ (xb.R.T @ (P_w - xb.p_wb) - cam.t_bc)
        if P_cb[2] < self.cfg.min_depth:
            f.triangulated = False
            f.optimized = False
            return
        f.inv_depth = 1.0 / P_cb[2]

    def optimized_ids(self):
        """Features entering the state optimization (weight > 0 only)."""
        cfg = self.cfg
        in_win = set(self.window.frame_ids)
        out = []
        for fid, f in self.window.features.items():
            if f.weight <= 0 or not f.triangulated:
                continue
            n_obs = sum(1 for fr, _ in f.track if fr in in_win)
            if n_obs < 2:
                continue
            if f.optimized or n_obs >= cfg.n_o:
                out.append(fid)
        # a point behind any observing camera cannot be linearized; send it
        # back to the not-yet-optimized pool for re-triangulation
        for fid, ok in zip(list(out), in_front(self.window, self.cam, out)):
            if not ok:
                f = self.window.features[fid]
                f.triangulated = False
                f.optimized = False
                out.remove(fid)
        return out

    def marginalize(self, decision="oldest"):
        if decision == "oldest":
            ids = self.optimized_ids()
            marginalize_oldest(self.window, self.preints, self.cam, self.cfg, ids)
            old = self.window.frame_ids[0]
            self._prune_frame(old)
            del self.window.keyframes[0]
            del self.window.frame_ids[0]
            del self.preints[0]
            del self.is_kf[0]
        elif decision == "second_newest":
            self._drop_newest()
        else:
            raise ValueError("decision must be 'oldest' or 'second_newest'")

    def _drop_newest(self):
        """Discard the newest frame; return its preintegration samples."""
        fid = self.window.frame_ids[-1]
        pre = self.preints.pop()
        self._prune_frame(fid)
        self.window.keyframes.pop()
        self.window.frame_ids.pop()
        self.is_kf.pop()
        return list(pre.samples)

    def _reset(self, state: BodyState, frame):
        log.info("window reset at frame %d", frame.index)
        for f in self.window.features.values():
            self.weight_memory[f.id] = f.weight
        self.initialize(state, frame)

    # -------------------------------------------------------------- categories
    def categories(self):
        cur = self.current_frame
        out = {}
        for fid, f in self.window.features.items():
            if f.track[-1][0] != cur:
                f.category = FeatureCategory.LOST_IN_WINDOW
            elif f.optimized:
                f.category = FeatureCategory.TRACKED_OPTIMIZED
            else:
                f.category = FeatureCategory.TRACKED_NEW
            out[fid] = f.category
        return out

    # -------------------------------------------------------------- residuals
    def _poses(self):
        from robvio.geometry import quat_to_rot_batch
        kfs = self.window.keyframes
        return quat_to_rot_batch(np.array([k.q_wb for k in kfs])), np.array([k.p_wb for k in kfs])

    def current_residuals(self, ids):
        """Pixel residual magnitude of each feature in the newest frame."""
        if not ids:
            return np.zeros(0)
        idx = {fr: i for i, fr in enumerate(self.window.frame_ids)}
        R, p = self._poses()
        feats = self.window.features
        a = np.array([idx[feats[f].track[0][0]] for f in ids])
        t = np.full(len(ids), len(self.window.frame_ids) - 1)
        m_a = bearing(self.cam, np.array([feats[f].track[0][1] for f in ids]))
        z = np.array([feats[f].track[-1][1] for f in ids])
        lam = np.array([feats[f].inv_depth for f in ids])
        r, *_ , depth = _visual_batch(self.cam, R[a], p[a], R[t], p[t], lam, m_a, z, jacobians=False)
        out = np.linalg.norm(r, axis=1)
        out[~(depth > 1e-6)] = np.inf
        return out

    def triangulate_new(self, ids):
        """Provisional depths for not-yet-optimized features; returns the
        worst reprojection error of each over its window observations (NaN
        when the feature cannot be triangulated)."""
        cfg, cam = self.cfg, self.cam
        idx = {fr: i for i, fr in enumerate(self.window.frame_ids)}
        feats = self.window.features
        R, p = self._poses()
        rows = []
        for fid in ids:
            tr = [(idx[fr], px) for fr, px in feats[fid].track if fr in idx]
            rows.append(tr)
        a = np.array([tr[0][0] for tr in rows])
        b = np.array([tr[-1][0] for tr in rows])
        ma = bearing(cam, np.array([tr[0][1] for tr in rows]))
        mb = bearing(cam, np.array([tr[-1][1] for tr in rows]))
        depth = triangulate_batch(cam, R[a], p[a], R[b], p[b], ma, mb)
        ok = np.isfinite(depth) & (depth >= cfg.min_depth) & (depth <= cfg.max_depth)
        worst = np.full(len(ids), np.nan)
        for i, fid in enumerate(ids):
            f = feats[fid]
            if not ok[i]:
                f.triangulated = False
                continue
            f.inv_depth = 1.0 / depth[i]
            f.triangulated = True
        # worst residual over all observations, vectorized over features
        sel = np.flatnonzero(ok)
        if len(sel):
            fa, ft, pa, pt, lam = [], [], [], [], []
            owner = []
            for i in sel:
                tr = rows[i]
                for t_idx, px in tr[1:]:
                    fa.append(tr[0][0])
                    ft.append(t_idx)
                    pa.append(tr[0][1])
                    pt.append(px)
                    lam.append(1.0 / depth[i])
                    owner.append(i)
            fa, ft, owner = np.array(fa), np.array(ft), np.array(owner)
            r, *_, zd = _visual_batch(cam, R[fa], p[fa], R[ft], p[ft], np.array(lam),
                                      bearing(cam, np.array(pa)), np.array(pt), jacobians=False)
            norms = np.linalg.norm(r, axis=1)
            norms[~(zd > 1e-6)] = np.inf
            worst[sel] = 0.0
            np.maximum.at(worst, owner, norms)
        return worst

    # -------------------------------------------------------------- weights
    def update_weights(self, shape_override=None):
        """One ATLS weight step for the newest frame; returns the shape used."""
        cfg = self.cfg
        cats = self.categories()
        feats = self.window.features
        f_o = [fid for fid, c in cats.items() if c is FeatureCategory.TRACKED_OPTIMIZED and feats[fid].triangulated]
        f_n = [fid for fid, c in cats.items() if c is FeatureCategory.TRACKED_NEW
               and sum(1 for fr, _ in feats[fid].track if fr in set(self.window.frame_ids)) >= 2]
        res_o = self.current_residuals(f_o)
        if shape_override is None:
            w_o = np.array([feats[f].weight for f in f_o])
            r_hat = atls.compute_r_hat_max(res_o[np.isfinite(res_o)], w_o[np.isfinite(res_o)], cfg.r_hat_floor)
            shape = atls.build_shape(cfg.r_max, r_hat)
        else:
            shape = shape_override
        if f_o:
            new = atls.weight_update(shape, np.where(np.isfinite(res_o), res_o, 1e12))
            for fid, w in zip(f_o, new):
                self._set_weight(fid, min(w, feats[fid].weight))
        if f_n:
            worst = self.triangulate_new(f_n)
            for fid, r in zip(f_n, worst):
                if np.isnan(r):
                    continue
                w = atls.weight_update(shape, r if np.isfinite(r) else 1e12)
                self._set_weight(fid, min(w, feats[fid].weight))
        self.last_shape = shape
        return shape

    def _set_weight(self, fid, w):
        f = self.window.features[fid]
        f.weight = float(w)
        if w <= 0 and fid not in self.zeroed_at:
            self.zeroed_at[fid] = self.current_frame

    def force_unit_weights(self):
        for f in self.window.features.values():
            f.weight = 1.0

    def prepare_new_features(self):
        """Triangulate tracked features that are not yet optimized (baselines)."""
        cats = self.categories()
        feats = self.window.features
        in_win = set(self.window.frame_ids)
        ids = [fid for fid, c in cats.items() if c is FeatureCategory.TRACKED_NEW
               and sum(1 for fr, _ in feats[fid].track if fr in in_win) >= 2]
        if ids:
            self.triangulate_new(ids)

    # -------------------------------------------------------------- optimize
    def optimize(self):
        ids = self.optimized_ids()
        prob = WindowProblem(self.window, self.preints, self.cam, self.cfg, ids)
        res = prob.solve()
        for fid in ids:
            f = self.window.features[fid]
            depth_ok = f.inv_depth > 0 and self.cfg.min_depth <= 1.0 / f.inv_depth <= self.cfg.max_depth
            if not depth_ok:
                f.triangulated = False
                f.optimized = False
                continue
            if not f.optimized:
                f.optimized = True
                self.graduated_at.setdefault(fid, self.current_frame)
        self._relinearize()
        return res

    def _relinearize(self):
        kfs = self.window.keyframes
        for k, pre in enumerate(self.preints):
            try:
                repropagate(pre, kfs[k].b_a, kfs[k].b_w)
            except RelinearizationRequired:
                self.preints[k] = reintegrate(pre, kfs[k].b_a, kfs[k].b_w)

    def alternate(self, shape_override=None):
        """Weight update / state optimization rounds for the current window."""
        if len(self.window.keyframes) < 2:
            raise SolverError("alternation needs at least two keyframes")
        mode = self.cfg.kernel_mode
        if mode != "atls":
            self.force_unit_weights()
            self.prepare_new_features()
            return self.optimize()
        # the shape is set once per frame from the IMU-predicted newest pose
        res = None
        shape = shape_override
        for _ in range(self.cfg.max_outer_alternations):
            shape = self.update_weights(shape)
            res = self.optimize()
        return res

    # -------------------------------------------------------------- frame entry
    def add_frame(self, frame, samples):
        """Bring a new frame into the window and decide its keyframe status.

        Returns ``(keyframe, reset)``. No optimization happens here.
        """
        if len(self.window.keyframes) >= 2 and not self.is_kf[-1]:
            dropped = self._drop_newest()
            samples = dropped + list(samples)[1:]
        elif len(self.window.keyframes) >= self.cfg.n_k:
            self.marginalize("oldest")
        last = self.window.keyframes[-1]
        pre = integrate(samples, last.b_a, last.b_w, self.imu_noise)
        x_pred = predict(last, pre, self.window.gravity).copy(stamp=float(frame.stamp))

        self.window.keyframes.append(x_pred)
        self.window.frame_ids.append(frame.index)
        self.preints.append(pre)
        self.is_kf.append(False)
        self._add_observations(frame)
        self.current_frame = frame.index

        ref = self.window.frame_ids[-2]
        common = [f for f in self.window.features.values()
                  if len(f.track) >= 2 and f.track[-1][0] == frame.index and f.track[-2][0] == ref]
        try:
            if not common:
                raise WindowResetSignal("no features shared with the latest keyframe")
            par = rotation_compensated_parallax(self.cam, self.window.keyframes[-2].R, x_pred.R,
                                                np.array([f.track[-2][1] for f in common]),
                                                np.array([f.track[-1][1] for f in common]))
            theta = weighted_parallax(par, [f.weight for f in common])
        except WindowResetSignal:
            self._reset(x_pred, frame)
            return True, True
        kf = select_keyframe(theta, self.cfg.parallax_threshold)
        self.is_kf[-1] = kf
        return kf, False

    def newest(self) -> BodyState:
        return self.window.keyframes[-1]
