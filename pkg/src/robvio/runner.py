"""Drive an estimator variant over a simulated bundle."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from robvio.estimator import Estimator
from robvio.guard import BccConfig, guard_loop
from robvio.sim import Scenario, SimBundle
from robvio.solver import SolverConfig, SolverError

log = logging.getLogger(__name__)

METHODS = ("plain_ls", "huber", "atls", "atls_bcc", "atls_bcc_ssr")


@dataclass
class RunResult:
    method: str
    scenario: str
    seed: int
    stamps: list = field(default_factory=list)
    states: list = field(default_factory=list)
    keyframe: list = field(default_factory=list)
    ba_ms: list = field(default_factory=list)
    weights: list = field(default_factory=list)   # (stamp, feature_id, weight)
    bcc: list = field(default_factory=list)       # (window, stamp, n_a, round, consistent, ratios)
    recoveries: int = 0
    bcc_fired: list = field(default_factory=list)  # stamps of inconsistent windows
    resets: int = 0
    failed: bool = False
    failure: str = ""
    graduated_at: dict = field(default_factory=dict)
    zeroed_at: dict = field(default_factory=dict)
    final_weights: dict = field(default_factory=dict)
    track_length: dict = field(default_factory=dict)

    @property
    def mean_ba_ms(self):
        return float(np.mean(self.ba_ms)) if self.ba_ms else 0.0


def solver_config_for(method, base: SolverConfig | None = None) -> SolverConfig:
    if method not in METHODS:
        raise ValueError("unknown method %r (choose from %s)" % (method, ", ".join(METHODS)))
    base = base or SolverConfig()
    kernel = method if method in ("plain_ls", "huber") else "atls"
    return replace(base, kernel_mode=kernel)


def _diverged(state, bound):
    return (not state.is_finite()) or np.linalg.norm(state.p_wb) > bound


def run_method(bundle: SimBundle, scenario: Scenario, method: str, cfg: SolverConfig | None = None,
               bcc: BccConfig | None = None, trace_weights=False, stop_at=None, imu_noise=None) -> RunResult:
    """``imu_noise`` overrides the estimator's noise model (defaults to the scenario's)."""
    cfg = solver_config_for(method, cfg)
    guard_cfg = None
    if method.startswith("atls_bcc"):
        guard_cfg = replace(bcc or BccConfig(), recover=(method == "atls_bcc_ssr"))
    est = Estimator(cfg, scenario.camera, scenario.gravity, imu_noise or scenario.noise)
    out = RunResult(method, scenario.name, scenario.seed)
    bound = 10.0 * max(scenario.extent(), 1.0) + np.linalg.norm(bundle.gt_states[0].p_wb)
    frames = bundle.frames if stop_at is None else bundle.frames[:stop_at]

    first = frames[0]
    est.initialize(bundle.gt_states[0], first)
    out.stamps.append(first.stamp)
    out.states.append(est.newest())
    out.keyframe.append(True)
    prev = first
    for fr in frames[1:]:
        samples = bundle.imu_samples(prev.imu_index, fr.imu_index)
        prev = fr
        try:
            kf, reset = est.add_frame(fr, samples)
            ba_ms = 0.0
            if reset:
                out.resets += 1
            elif len(est.window.keyframes) >= 2:
                if guard_cfg is None:
                    t0 = time.perf_counter()
                    est.alternate()
                    ba_ms = (time.perf_counter() - t0) * 1e3
                else:
                    t0 = time.perf_counter()
                    g = guard_loop(est, guard_cfg)
                    ba_ms = (time.perf_counter() - t0) * 1e3
                    out.recoveries += g.recoveries
                    for rep in g.reports:
                        out.bcc.append((fr.index, fr.stamp, rep.n_a, rep.round, rep.consistent, rep.ratios))
                    if not g.reports[0].consistent:
                        out.bcc_fired.append(fr.stamp)
            out.ba_ms.append(ba_ms)
        except (SolverError, np.linalg.LinAlgError, ValueError) as exc:
            out.failed = True
            out.failure = "%s at t=%.3f: %s" % (type(exc).__name__, fr.stamp, exc)
            log.warning("%s/%s seed %d failed: %s", method, scenario.name, scenario.seed, out.failure)
            break
        x = est.newest()
        out.stamps.append(fr.stamp)
        out.states.append(x)
        out.keyframe.append(bool(kf))
        if trace_weights:
            for fid in fr.ids:
                f = est.window.features.get(int(fid))
                if f is not None:
                    out.weights.append((fr.stamp, int(fid), f.weight))
        for fid in fr.ids:
            out.track_length[int(fid)] = out.track_length.get(int(fid), 0) + 1
        if _diverged(x, bound):
            out.failed = True
            out.failure = "diverged at t=%.3f" % fr.stamp
            break
    for f in est.window.features.values():
        est.weight_memory[f.id] = f.weight
    out.final_weights = dict(est.weight_memory)
    out.graduated_at = dict(est.graduated_at)
    out.zeroed_at = dict(est.zeroed_at)
    return out
