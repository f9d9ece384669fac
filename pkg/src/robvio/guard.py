"""Bias consistency check and stable state recovery.

After a window optimization the IMU position/velocity/rotation residuals are
evaluated twice on the optimized poses: once with the optimized biases and
once with the biases from before the optimization. Many frames where the
optimized biases fit clearly worse means the biases absorbed visual error,
so the window is reverted and re-optimized with a narrower truncation range.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from robvio import atls
from robvio.preint import predict, raw_residual
from robvio.solver import SolverError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BccConfig:
    tau_r: float = 2.0
    tau_a: int = 2
    max_recovery_rounds: int = 3
    denom_floor: float = 1e-6
    trunc_floor: float = atls.TRUNC_FLOOR
    recover: bool = True

    def __post_init__(self):
        if self.tau_r < 1:
            raise ValueError("tau_r must be >= 1")
        if self.tau_a < 1:
            raise ValueError("tau_a must be >= 1")
        if self.max_recovery_rounds < 1:
            raise ValueError("max_recovery_rounds must be >= 1")


@dataclass(frozen=True)
class BccReport:
    ratios: tuple
    n_a: int
    consistent: bool
    round: int = 0


class RecoveryExhausted(RuntimeError):
    pass


def hybrid_states(x_hat, x_before):
    """Optimized poses and velocities with the pre-optimization biases."""
    return [xh.copy(b_a=xb.b_a.copy(), b_w=xb.b_w.copy()) for xh, xb in zip(x_hat, x_before)]


def norm_ratio(num, den, denom_floor=1e-6):
    return float(num / max(den, denom_floor))


def residual_ratios(preints, x_hat, x_minus, g_w, denom_floor=1e-6):
    """Per interval: position/velocity/rotation residual norm with the
    optimized biases over the norm with the earlier biases."""
    out = []
    for k, pre in enumerate(preints):
        num = np.linalg.norm(raw_residual(pre, x_hat[k], x_hat[k + 1], g_w)[:9])
        den = np.linalg.norm(raw_residual(pre, x_minus[k], x_minus[k + 1], g_w)[:9])
        out.append(norm_ratio(num, den, denom_floor))
    return out


def count_inconsistent(ratios, n_k, tau_r):
    """Frames k < n_k - 1 whose ratio exceeds tau_r."""
    return int(sum(1 for k, r in enumerate(ratios) if k < n_k - 1 and r > tau_r))


def consistency_check(x_hat, x_minus, preints, g_w, cfg: BccConfig, round_=0) -> BccReport:
    """Count frames where the optimized biases inflate the IMU residual.

    ``x_minus`` must hold the optimized poses/velocities with the biases from
    before the optimization (see ``hybrid_states``).
    """
    n_k = len(x_hat)
    if n_k < 3:
        return BccReport((), 0, True, round_)
    ratios = residual_ratios(preints, x_hat, x_minus, g_w, cfg.denom_floor)
    n_a = count_inconsistent(ratios, n_k, cfg.tau_r)
    return BccReport(tuple(ratios), n_a, n_a <= cfg.tau_a, round_)


def recover_and_narrow(est, snapshot, shape: atls.AtlsShape, round_, cfg: BccConfig) -> atls.AtlsShape:
    """Revert the window and return the narrowed kernel shape; the new
    weights are assigned from that shape right away."""
    if round_ >= cfg.max_recovery_rounds:
        raise RecoveryExhausted("recovery rounds exhausted")
    est.restore(snapshot)
    narrowed = atls.narrow(shape, cfg.trunc_floor)
    est.update_weights(narrowed)
    return narrowed


@dataclass
class GuardOutcome:
    reports: list = field(default_factory=list)
    recoveries: int = 0
    exhausted: bool = False
    ba_ms: float = 0.0
    shape: atls.AtlsShape | None = None


def _imu_only_newest(est, snapshot):
    est.restore(snapshot)
    kfs = est.window.keyframes
    if len(kfs) >= 2:
        prev = kfs[-2]
        kfs[-1] = predict(prev, est.preints[-1], est.window.gravity).copy(stamp=kfs[-1].stamp)


def guard_loop(est, cfg: BccConfig) -> GuardOutcome:
    """Optimize the current window and accept it only if the biases stay
    consistent; otherwise revert, narrow the truncation range and retry."""
    out = GuardOutcome()
    snap = est.snapshot()
    before = list(est.window.keyframes)
    res = est.alternate()
    out.ba_ms += res.wall_ms
    shape = est.last_shape
    round_ = 0
    while True:
        x_hat = est.window.keyframes
        report = consistency_check(x_hat, hybrid_states(x_hat, before), est.preints,
                                   est.window.gravity, cfg, round_)
        out.reports.append(report)
        out.shape = shape
        if report.consistent:
            return out
        log.debug("inconsistent biases (n_a=%d) in round %d", report.n_a, round_)
        if not cfg.recover or shape is None:
            _imu_only_newest(est, snap)
            out.exhausted = True
            return out
        try:
            shape = recover_and_narrow(est, snap, shape, round_, cfg)
        except RecoveryExhausted:
            _imu_only_newest(est, snap)
            out.exhausted = True
            return out
        out.recoveries += 1
        round_ += 1
        try:
            res = est.optimize()
            out.ba_ms += res.wall_ms
            for _ in range(est.cfg.max_outer_alternations - 1):
                est.update_weights(shape)
                res = est.optimize()
                out.ba_ms += res.wall_ms
        except SolverError:
            _imu_only_newest(est, snap)
            out.exhausted = True
            return out
