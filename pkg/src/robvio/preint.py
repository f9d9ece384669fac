"""IMU preintegration between keyframes.

Midpoint integration of the relative position (alpha), velocity (beta) and
rotation (gamma) terms. The error-state transition is the exact
linearization of the discrete midpoint step, so the stored bias Jacobians
are the true derivatives of the integrated terms and first-order bias
correction is accurate to second order in the bias change.

Error-state and residual ordering: [alpha, beta, theta, b_a, b_w].
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from robvio.geometry import (
    quat_conj,
    quat_exp,
    quat_left,
    quat_mul,
    quat_normalize,
    quat_right,
    quat_to_rot,
    right_jacobian,
    skew,
)
from robvio.state import BA, BW, P, Q, V, BodyState

A_, B_, T_, GA_, GW_ = 0, 3, 6, 9, 12

RELIN_THRESHOLD = 0.1


class InsufficientImuData(ValueError):
    pass


class RelinearizationRequired(RuntimeError):
    """Bias moved too far from the linearization point for a first-order fix."""


@dataclass(frozen=True)
class ImuSample:
    stamp: float
    a_m: np.ndarray
    w_m: np.ndarray


@dataclass(frozen=True)
class ImuNoiseParams:
    """Continuous-time noise densities and initial biases.

    White-noise densities are in unit/sqrt(Hz); random-walk densities in
    unit*sqrt(Hz)/s, i.e. per-sample std is ``density / sqrt(dt)`` for white
    noise and ``density * sqrt(dt)`` for the bias increments.
    """

    accel_noise: float = 0.02
    gyro_noise: float = 0.002
    accel_walk: float = 0.001
    gyro_walk: float = 1e-4
    b_a0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_w0: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("accel_noise", "gyro_noise", "accel_walk", "gyro_walk"):
            if getattr(self, name) < 0:
                raise ValueError("%s must be >= 0" % name)


@dataclass(frozen=True)
class Preintegration:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    J_alpha_ba: np.ndarray
    J_alpha_bw: np.ndarray
    J_beta_ba: np.ndarray
    J_beta_bw: np.ndarray
    J_gamma_bw: np.ndarray
    P: np.ndarray
    lin_b_a: np.ndarray
    lin_b_w: np.ndarray
    dt_total: float
    samples: tuple = ()
    noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    # alpha, beta, gamma at the linearization biases; set on repropagated copies
    origin: tuple | None = None

    @property
    def t0(self):
        return self.samples[0].stamp

    @property
    def t1(self):
        return self.samples[-1].stamp

    def corrected(self, b_a, b_w):
        """First-order bias correction without the relinearization guard."""
        dba = np.asarray(b_a) - self.lin_b_a
        dbw = np.asarray(b_w) - self.lin_b_w
        alpha0, beta0, gamma0 = self.origin or (self.alpha, self.beta, self.gamma)
        alpha = alpha0 + self.J_alpha_ba @ dba + self.J_alpha_bw @ dbw
        beta = beta0 + self.J_beta_ba @ dba + self.J_beta_bw @ dbw
        dq = np.concatenate(([1.0], 0.5 * (self.J_gamma_bw @ dbw)))
        gamma = quat_normalize(quat_mul(gamma0, dq))
        return alpha, beta, gamma

    def sqrt_information(self):
        S = self.__dict__.get("_sqrt_info_cache")
        if S is None:
            S = _sqrt_info(self.P)
            object.__setattr__(self, "_sqrt_info_cache", S)
        return S


def _sqrt_info(P):
    info = np.linalg.inv(P)
    info = 0.5 * (info + info.T)
    L = np.linalg.cholesky(info)
    return L.T


def _step_matrices(R0, R1, a0, a1, w, dt):
    """Transition F (15x15) and noise map G (15x18) of one midpoint step."""
    E = quat_to_rot(quat_exp(w * dt))
    Jr = right_jacobian(w * dt)
    A0, A1 = skew(a0), skew(a1)
    da_dth = -0.5 * (R0 @ A0 + R1 @ A1 @ E.T)
    da_dba = -0.5 * (R0 + R1)
    da_dw = -0.5 * R1 @ A1 @ Jr * dt
    I3 = np.eye(3)

    F = np.eye(15)
    F[A_:A_ + 3, B_:B_ + 3] = I3 * dt
    F[A_:A_ + 3, T_:T_ + 3] = 0.5 * dt * dt * da_dth
    F[A_:A_ + 3, GA_:GA_ + 3] = 0.5 * dt * dt * da_dba
    F[A_:A_ + 3, GW_:GW_ + 3] = -0.5 * dt * dt * da_dw
    F[B_:B_ + 3, T_:T_ + 3] = dt * da_dth
    F[B_:B_ + 3, GA_:GA_ + 3] = dt * da_dba
    F[B_:B_ + 3, GW_:GW_ + 3] = -dt * da_dw
    F[T_:T_ + 3, T_:T_ + 3] = E.T
    F[T_:T_ + 3, GW_:GW_ + 3] = -Jr * dt

    # noise order: n_a0, n_w0, n_a1, n_w1, n_ba, n_bw
    G = np.zeros((15, 18))
    G[A_:A_ + 3, 0:3] = 0.25 * dt * dt * R0
    G[A_:A_ + 3, 6:9] = 0.25 * dt * dt * R1
    G[A_:A_ + 3, 3:6] = 0.25 * dt * dt * da_dw
    G[A_:A_ + 3, 9:12] = 0.25 * dt * dt * da_dw
    G[B_:B_ + 3, 0:3] = 0.5 * dt * R0
    G[B_:B_ + 3, 6:9] = 0.5 * dt * R1
    G[B_:B_ + 3, 3:6] = 0.5 * dt * da_dw
    G[B_:B_ + 3, 9:12] = 0.5 * dt * da_dw
    G[T_:T_ + 3, 3:6] = 0.5 * Jr * dt
    G[T_:T_ + 3, 9:12] = 0.5 * Jr * dt
    G[GA_:GA_ + 3, 12:15] = I3 * dt
    G[GW_:GW_ + 3, 15:18] = I3 * dt
    return F, G


def integrate(samples, b_a0, b_w0, noise: ImuNoiseParams | None = None) -> Preintegration:
    """Preintegrate a batch of IMU samples spanning one keyframe interval."""
    samples = tuple(samples)
    if len(samples) < 2:
        raise InsufficientImuData("preintegration needs at least two samples")
    noise = noise or ImuNoiseParams()
    b_a0 = np.asarray(b_a0, dtype=float)
    b_w0 = np.asarray(b_w0, dtype=float)
    if not (np.all(np.isfinite(b_a0)) and np.all(np.isfinite(b_w0))):
        raise ValueError("non-finite bias")

    alpha = np.zeros(3)
    beta = np.zeros(3)
    gamma = np.array([1.0, 0.0, 0.0, 0.0])
    J = np.eye(15)
    Pcov = np.zeros((15, 15))
    dt_total = 0.0
    na2, nw2 = noise.accel_noise ** 2, noise.gyro_noise ** 2
    ba2, bw2 = noise.accel_walk ** 2, noise.gyro_walk ** 2

    for s0, s1 in zip(samples[:-1], samples[1:]):
        dt = s1.stamp - s0.stamp
        if not dt > 0:
            raise ValueError("IMU stamps must be strictly increasing")
        a0 = np.asarray(s0.a_m) - b_a0
        a1 = np.asarray(s1.a_m) - b_a0
        w = 0.5 * (np.asarray(s0.w_m) + np.asarray(s1.w_m)) - b_w0
        R0 = quat_to_rot(gamma)
        gamma1 = quat_normalize(quat_mul(gamma, quat_exp(w * dt)))
        R1 = quat_to_rot(gamma1)
        acc = 0.5 * (R0 @ a0 + R1 @ a1)

        F, G = _step_matrices(R0, R1, a0, a1, w, dt)
        # each sample's noise is shared by two steps; doubling the density keeps
        # the summed white-noise variance at sigma^2 * dt per step
        Qd = np.diag(np.repeat([2 * na2 / dt, 2 * nw2 / dt, 2 * na2 / dt, 2 * nw2 / dt, ba2 / dt, bw2 / dt], 3))
        J = F @ J
        Pcov = F @ Pcov @ F.T + G @ Qd @ G.T
        Pcov = 0.5 * (Pcov + Pcov.T)

        alpha = alpha + beta * dt + 0.5 * acc * dt * dt
        beta = beta + acc * dt
        gamma = gamma1
        dt_total += dt

    return Preintegration(
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        J_alpha_ba=J[A_:A_ + 3, GA_:GA_ + 3].copy(),
        J_alpha_bw=J[A_:A_ + 3, GW_:GW_ + 3].copy(),
        J_beta_ba=J[B_:B_ + 3, GA_:GA_ + 3].copy(),
        J_beta_bw=J[B_:B_ + 3, GW_:GW_ + 3].copy(),
        J_gamma_bw=J[T_:T_ + 3, GW_:GW_ + 3].copy(),
        P=Pcov,
        lin_b_a=b_a0.copy(),
        lin_b_w=b_w0.copy(),
        dt_total=dt_total,
        samples=samples,
        noise=noise,
    )


def repropagate(pre: Preintegration, b_a_new, b_w_new, threshold=RELIN_THRESHOLD) -> Preintegration:
    """First-order correction of alpha/beta/gamma for new biases.

    The linearization point is not moved. Raises RelinearizationRequired when
    either bias moved by more than ``threshold``.
    """
    dba = np.asarray(b_a_new, dtype=float) - pre.lin_b_a
    dbw = np.asarray(b_w_new, dtype=float) - pre.lin_b_w
    if np.linalg.norm(dba) > threshold or np.linalg.norm(dbw) > threshold:
        raise RelinearizationRequired("bias change exceeds %g" % threshold)
    if not np.any(dba) and not np.any(dbw) and pre.origin is None:
        return pre
    alpha, beta, gamma = pre.corrected(b_a_new, b_w_new)
    return Preintegration(
        alpha=alpha, beta=beta, gamma=gamma,
        J_alpha_ba=pre.J_alpha_ba, J_alpha_bw=pre.J_alpha_bw,
        J_beta_ba=pre.J_beta_ba, J_beta_bw=pre.J_beta_bw, J_gamma_bw=pre.J_gamma_bw,
        P=pre.P, lin_b_a=pre.lin_b_a, lin_b_w=pre.lin_b_w,
        dt_total=pre.dt_total, samples=pre.samples, noise=pre.noise,
        origin=pre.origin or (pre.alpha, pre.beta, pre.gamma),
    )


def reintegrate(pre: Preintegration, b_a, b_w) -> Preintegration:
    return integrate(pre.samples, b_a, b_w, pre.noise)


def predict(state: BodyState, pre: Preintegration, g_w) -> BodyState:
    """Propagate ``state`` through the preintegrated interval."""
    alpha, beta, gamma = pre.corrected(state.b_a, state.b_w)
    R = state.R
    dt = pre.dt_total
    p = state.p_wb + state.v_wb * dt + 0.5 * g_w * dt * dt + R @ alpha
    v = state.v_wb + g_w * dt + R @ beta
    q = quat_normalize(quat_mul(state.q_wb, gamma))
    return BodyState(p, v, q, state.b_a.copy(), state.b_w.copy(), state.stamp + dt)


def raw_residual(pre: Preintegration, xk: BodyState, xk1: BodyState, g_w):
    """Unwhitened 15-dim residual, no Jacobians."""
    alpha, beta, gamma = pre.corrected(xk.b_a, xk.b_w)
    dt = pre.dt_total
    Rt = xk.R.T
    r = np.empty(15)
    r[A_:A_ + 3] = Rt @ (xk1.p_wb - xk.p_wb - 0.5 * g_w * dt * dt - xk.v_wb * dt) - alpha
    r[B_:B_ + 3] = Rt @ (xk1.v_wb - g_w * dt - xk.v_wb) - beta
    Qerr = quat_mul(quat_mul(quat_conj(xk.q_wb), xk1.q_wb), quat_conj(gamma))
    if Qerr[0] < 0:
        Qerr = -Qerr
    r[T_:T_ + 3] = 2.0 * Qerr[1:]
    r[GA_:GA_ + 3] = xk1.b_a - xk.b_a
    r[GW_:GW_ + 3] = xk1.b_w - xk.b_w
    return r


def imu_residual(pre: Preintegration, xk: BodyState, xk1: BodyState, g_w, whiten=True):
    """IMU residual and Jacobians w.r.t. the tangent increments of both states.

    ``g_w`` is the gravitational acceleration in the world frame (pointing
    down), so the accelerometer reads ``R^T (a - g_w)``.

    Returns ``(r, J_k, J_k1)`` with 15x15 Jacobians in the keyframe tangent
    ordering [dp, dq, dv, dba, dbw]. ``whiten=True`` applies the square-root
    information of the preintegration covariance to all three.
    """
    if not (xk.is_finite() and xk1.is_finite()):
        raise ValueError("non-finite state in IMU residual")
    g_w = np.asarray(g_w, dtype=float)
    dt = pre.dt_total
    alpha, beta, gamma = pre.corrected(xk.b_a, xk.b_w)
    Rk = xk.R
    Rt = Rk.T
    dp_term = xk1.p_wb - xk.p_wb - 0.5 * g_w * dt * dt - xk.v_wb * dt
    dv_term = xk1.v_wb - g_w * dt - xk.v_wb

    r = np.empty(15)
    r[A_:A_ + 3] = Rt @ dp_term - alpha
    r[B_:B_ + 3] = Rt @ dv_term - beta
    Aq = quat_mul(quat_conj(xk.q_wb), xk1.q_wb)
    gamma_inv = quat_conj(gamma)
    Qerr = quat_mul(Aq, gamma_inv)
    sign = 1.0
    if Qerr[0] < 0:
        sign = -1.0
    r[T_:T_ + 3] = 2.0 * sign * Qerr[1:]
    r[GA_:GA_ + 3] = xk1.b_a - xk.b_a
    r[GW_:GW_ + 3] = xk1.b_w - xk.b_w

    Jk = np.zeros((15, 15))
    Jk1 = np.zeros((15, 15))

    Jk[A_:A_ + 3, P:P + 3] = -Rt
    Jk[A_:A_ + 3, Q:Q + 3] = skew(Rt @ dp_term)
    Jk[A_:A_ + 3, V:V + 3] = -Rt * dt
    Jk[A_:A_ + 3, BA:BA + 3] = -pre.J_alpha_ba
    Jk[A_:A_ + 3, BW:BW + 3] = -pre.J_alpha_bw
    Jk1[A_:A_ + 3, P:P + 3] = Rt

    Jk[B_:B_ + 3, Q:Q + 3] = skew(Rt @ dv_term)
    Jk[B_:B_ + 3, V:V + 3] = -Rt
    Jk[B_:B_ + 3, BA:BA + 3] = -pre.J_beta_ba
    Jk[B_:B_ + 3, BW:BW + 3] = -pre.J_beta_bw
    Jk1[B_:B_ + 3, V:V + 3] = Rt

    # rotation rows: q_k <- q_k Exp(d) gives Qerr <- Exp(-d) * Qerr
    Jk[T_:T_ + 3, Q:Q + 3] = -sign * quat_right(Qerr)[1:, 1:]
    Jk1[T_:T_ + 3, Q:Q + 3] = sign * (quat_left(Aq) @ quat_right(gamma_inv))[1:, 1:]
    # gamma = normalize(gamma_lin * [1, J dbw / 2])
    dbw = xk.b_w - pre.lin_b_w
    u = quat_mul(pre.gamma, np.concatenate(([1.0], 0.5 * (pre.J_gamma_bw @ dbw))))
    nu = np.linalg.norm(u)
    c = u / nu
    du = quat_left(pre.gamma)[:, 1:] @ (0.5 * pre.J_gamma_bw)
    dc = (np.eye(4) - np.outer(c, c)) @ du / nu
    dc_inv = np.diag([1.0, -1.0, -1.0, -1.0]) @ dc
    Jk[T_:T_ + 3, BW:BW + 3] = 2.0 * sign * (quat_left(Aq) @ dc_inv)[1:, :]

    Jk[GA_:GA_ + 3, BA:BA + 3] = -np.eye(3)
    Jk1[GA_:GA_ + 3, BA:BA + 3] = np.eye(3)
    Jk[GW_:GW_ + 3, BW:BW + 3] = -np.eye(3)
    Jk1[GW_:GW_ + 3, BW:BW + 3] = np.eye(3)

    if whiten:
        S = pre.sqrt_information()
        return S @ r, S @ Jk, S @ Jk1
    return r, Jk, Jk1
