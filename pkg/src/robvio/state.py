"""State containers shared by the estimator: keyframe states, features,
the sliding window and the pinhole camera."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from robvio.geometry import quat_exp, quat_log, quat_mul, quat_conj, quat_normalize, quat_to_rot

TANGENT_DIM = 15
# offsets inside one keyframe's tangent block
P, Q, V, BA, BW = 0, 3, 6, 9, 12

GRAVITY = np.array([0.0, 0.0, -9.81])


class StateError(ValueError):
    pass


@dataclass(frozen=True)
class BodyState:
    p_wb: np.ndarray
    v_wb: np.ndarray
    q_wb: np.ndarray
    b_a: np.ndarray
    b_w: np.ndarray
    stamp: float = 0.0

    @classmethod
    def identity(cls, stamp=0.0):
        z = np.zeros(3)
        return cls(z, z.copy(), np.array([1.0, 0.0, 0.0, 0.0]), z.copy(), z.copy(), stamp)

    @property
    def R(self):
        return quat_to_rot(self.q_wb)

    def is_finite(self):
        # one reduction: any nan or inf makes the sum non-finite
        total = self.p_wb.sum() + self.v_wb.sum() + self.q_wb.sum() + self.b_a.sum() + self.b_w.sum()
        return bool(np.isfinite(total))

    def copy(self, **changes):
        fields = {k: np.array(getattr(self, k), dtype=float) for k in ("p_wb", "v_wb", "q_wb", "b_a", "b_w")}
        fields.update(changes)
        return replace(self, **fields)


def boxplus(state: BodyState, delta) -> BodyState:
    """Apply a 15-dim tangent increment ordered [dp, dq, dv, dba, dbw]."""
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (TANGENT_DIM,):
        raise StateError("increment must have shape (15,), got %s" % (delta.shape,))
    if not np.all(np.isfinite(delta)):
        raise StateError("non-finite state increment")
    q = quat_normalize(quat_mul(state.q_wb, quat_exp(delta[Q:Q + 3])))
    return BodyState(
        p_wb=state.p_wb + delta[P:P + 3],
        v_wb=state.v_wb + delta[V:V + 3],
        q_wb=q,
        b_a=state.b_a + delta[BA:BA + 3],
        b_w=state.b_w + delta[BW:BW + 3],
        stamp=state.stamp,
    )


def boxminus(a: BodyState, b: BodyState) -> np.ndarray:
    """Tangent increment d with boxplus(b, d) == a."""
    d = np.empty(TANGENT_DIM)
    d[P:P + 3] = a.p_wb - b.p_wb
    d[Q:Q + 3] = quat_log(quat_mul(quat_conj(b.q_wb), a.q_wb))
    d[V:V + 3] = a.v_wb - b.v_wb
    d[BA:BA + 3] = a.b_a - b.b_a
    d[BW:BW + 3] = a.b_w - b.b_w
    return d


class FeatureCategory(enum.Enum):
    TRACKED_OPTIMIZED = "tracked_optimized"
    TRACKED_NEW = "tracked_new"
    LOST_IN_WINDOW = "lost_in_window"


@dataclass
class Feature:
    """A landmark tracked through the window.

    ``track`` holds ``(frame_id, pixel)`` pairs in frame order; the first
    entry is the anchor for ``inv_depth``.
    """

    id: int
    inv_depth: float = 0.0
    weight: float = 1.0
    track: list = field(default_factory=list)
    category: FeatureCategory = FeatureCategory.TRACKED_NEW
    optimized: bool = False
    triangulated: bool = False

    @property
    def anchor_frame(self):
        return self.track[0][0]

    @property
    def anchor_pixel(self):
        return self.track[0][1]

    def observed_in(self, frame_id):
        return any(fid == frame_id for fid, _ in self.track)


@dataclass
class MarginalPrior:
    """Linear prior ``|| H_p (x - x_lin) - r_p ||^2`` on a set of keyframes.

    ``frame_ids`` lists the constrained keyframes in column-block order; each
    owns 15 columns of ``H_p``. ``lin_states`` are the linearization points.
    """

    frame_ids: list
    H_p: np.ndarray
    r_p: np.ndarray
    lin_states: list

    @property
    def dim(self):
        return TANGENT_DIM * len(self.frame_ids)


@dataclass
class WindowState:
    keyframes: list = field(default_factory=list)
    frame_ids: list = field(default_factory=list)
    features: dict = field(default_factory=dict)
    marginal_prior: MarginalPrior | None = None
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        self.check()

    def check(self):
        stamps = [k.stamp for k in self.keyframes]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise StateError("keyframe stamps must be strictly increasing")
        if len(self.frame_ids) != len(self.keyframes):
            raise StateError("frame_ids and keyframes must have equal length")
        prior = self.marginal_prior
        if prior is not None and prior.H_p.shape[1] != prior.dim:
            raise StateError("prior column dimension does not match its states")

    def index_of(self, frame_id):
        return self.frame_ids.index(frame_id)

    def __len__(self):
        return len(self.keyframes)

    def copy(self):
        """Independent copy. States are immutable and track entries are only
        ever replaced, so containers are copied and their items shared."""
        feats = {fid: replace(f, track=list(f.track)) for fid, f in self.features.items()}
        prior = self.marginal_prior
        if prior is not None:
            prior = MarginalPrior(list(prior.frame_ids), prior.H_p.copy(), prior.r_p.copy(),
                                  list(prior.lin_states))
        return WindowState(list(self.keyframes), list(self.frame_ids), feats, prior, self.gravity.copy())


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera. ``R_bc``/``t_bc`` map camera-frame points into the
    body frame: ``x_b = R_bc @ x_c + t_bc``."""

    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    R_bc: np.ndarray = field(default_factory=lambda: np.eye(3))
    t_bc: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise StateError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise StateError("principal point outside the image")

    @classmethod
    def forward_looking(cls, **kw):
        """Camera z along body x, camera x along body -y, camera y along body -z."""
        R_bc = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        return cls(R_bc=R_bc, **kw)

    def in_image(self, uv, margin=0.0):
        uv = np.asarray(uv)
        return ((uv[..., 0] >= margin) & (uv[..., 0] < self.width - margin)
                & (uv[..., 1] >= margin) & (uv[..., 1] < self.height - margin))


MIN_DEPTH = 1e-6


def project(cam: CameraModel, landmark_c) -> np.ndarray:
    x, y, z = np.asarray(landmark_c, dtype=float)
    if not z > MIN_DEPTH:
        raise StateError("point behind camera (z=%g)" % z)
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])


def backproject(cam: CameraModel, pixel, depth) -> np.ndarray:
    u, v = pixel
    return depth * np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])


def bearing(cam: CameraModel, pixels) -> np.ndarray:
    """Normalized image-plane rays (z = 1) for an (N, 2) pixel array."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    out = np.ones((len(pixels), 3))
    out[:, 0] = (pixels[:, 0] - cam.cx) / cam.fx
    out[:, 1] = (pixels[:, 1] - cam.cy) / cam.fy
    return out
