"""Trajectory error metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MATCH_TOL = 0.01


class MetricsError(ValueError):
    pass


@dataclass
class TrajectoryPair:
    stamps: np.ndarray
    est_p: np.ndarray
    gt_p: np.ndarray
    est_q: np.ndarray | None = None
    gt_q: np.ndarray | None = None

    def __post_init__(self):
        if len(self.stamps) < 2:
            raise MetricsError("need at least two matched poses")


def associate(est_stamps, gt_stamps, tol=MATCH_TOL):
    """Nearest-neighbour stamp matching; returns index pairs (est, gt)."""
    gt_stamps = np.asarray(gt_stamps, dtype=float)
    order = np.argsort(gt_stamps)
    sorted_gt = gt_stamps[order]
    pairs = []
    for i, t in enumerate(np.asarray(est_stamps, dtype=float)):
        j = np.searchsorted(sorted_gt, t)
        best = None
        for c in (j - 1, j):
            if 0 <= c < len(sorted_gt) and abs(sorted_gt[c] - t) <= tol:
                if best is None or abs(sorted_gt[c] - t) < abs(sorted_gt[best] - t):
                    best = c
        if best is not None:
            pairs.append((i, int(order[best])))
    return pairs


def make_pair(est_stamps, est_p, gt_stamps, gt_p, tol=MATCH_TOL) -> TrajectoryPair:
    pairs = associate(est_stamps, gt_stamps, tol)
    if len(pairs) < 2:
        raise MetricsError("fewer than two matched poses")
    ei, gi = map(np.array, zip(*pairs))
    return TrajectoryPair(np.asarray(est_stamps, dtype=float)[ei], np.asarray(est_p, dtype=float)[ei],
                          np.asarray(gt_p, dtype=float)[gi])


def align_rigid(src, dst):
    """Rotation R and translation t minimizing sum |R src + t - dst|^2."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    C = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def ate_rmse(pair: TrajectoryPair) -> float:
    R, t = align_rigid(pair.est_p, pair.gt_p)
    err = pair.est_p @ R.T + t - pair.gt_p
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def rte(pair: TrajectoryPair, segment=0.2):
    """Relative translation error per ground-truth travelled distance.

    Segments start at each successive point where the ground-truth arc
    length first exceeds a multiple of ``segment``; the error is the norm of
    the difference between estimated and true displacement over the segment.
    Returns ``(stamps, errors, rmse)``; stamps mark segment ends.
    """
    gt = pair.gt_p
    est = pair.est_p
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(gt, axis=0), axis=1))])
    if arc[-1] < segment:
        return np.zeros(0), np.zeros(0), 0.0
    marks = [0]
    next_len = segment
    for i, s in enumerate(arc):
        if s >= next_len - 1e-12:
            marks.append(i)
            next_len = arc[i] + segment
    marks = np.array(marks)
    a, b = marks[:-1], marks[1:]
    errs = np.linalg.norm((est[b] - est[a]) - (gt[b] - gt[a]), axis=1)
    rmse = float(np.sqrt(np.mean(errs ** 2))) if len(errs) else 0.0
    return pair.stamps[b], errs, rmse


def run_pair(result, bundle) -> TrajectoryPair:
    gt_stamps = [s.stamp for s in bundle.gt_states]
    gt_p = np.array([s.p_wb for s in bundle.gt_states])
    est_p = np.array([s.p_wb for s in result.states])
    return make_pair(result.stamps, est_p, gt_stamps, gt_p)
