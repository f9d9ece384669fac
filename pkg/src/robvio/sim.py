"""Deterministic synthetic visual-inertial scenarios.

A scenario is a smooth body trajectory, a set of landmark clusters (static,
constant-velocity or abruptly moving) and sensor noise settings. ``generate``
turns it into IMU samples, per-frame pixel tracks with perfect data
association, and ground-truth states.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation, RotationSpline

from robvio.preint import ImuNoiseParams, ImuSample
from robvio.state import GRAVITY, BodyState, CameraModel

log = logging.getLogger(__name__)

MIN_VIS_DEPTH = 0.2
PRESETS = ("static_room", "dynamic_mid", "occlusion_high", "lateral_abrupt", "parallel_abrupt")


class ScenarioError(ValueError):
    pass


def _quat_wxyz(rot: Rotation):
    q = rot.as_quat()  # x, y, z, w
    q = np.concatenate([q[..., 3:], q[..., :3]], axis=-1)
    if q.ndim == 1:
        return -q if q[0] < 0 else q
    q[q[:, 0] < 0] *= -1
    return q


class Trajectory:
    """C2 position spline and smooth rotation spline through waypoints.

    ``rotvecs`` are body-to-world rotation vectors at ``times``.
    """

    def __init__(self, times, positions, rotvecs):
        self.times = np.asarray(times, dtype=float)
        self.positions = np.asarray(positions, dtype=float)
        self.rotvecs = np.asarray(rotvecs, dtype=float)
        if len(self.times) < 4:
            raise ScenarioError("trajectory needs at least 4 waypoints")
        if np.any(np.diff(self.times) <= 0):
            raise ScenarioError("waypoint times must be increasing")
        self._pos = CubicSpline(self.times, self.positions, axis=0)
        self._rot = RotationSpline(self.times, Rotation.from_rotvec(self.rotvecs))

    @property
    def duration(self):
        return float(self.times[-1] - self.times[0])

    def position(self, t):
        return self._pos(t)

    def velocity(self, t):
        return self._pos(t, 1)

    def acceleration(self, t):
        return self._pos(t, 2)

    def rotation(self, t) -> Rotation:
        return self._rot(t)

    def quat(self, t):
        return _quat_wxyz(self._rot(t))

    def body_rate(self, t):
        return self._rot(t, 1)

    def extent(self):
        return float(np.max(np.linalg.norm(self.positions - self.positions[0], axis=1)))

    def to_dict(self):
        return {"times": self.times.tolist(), "positions": self.positions.tolist(),
                "rotvecs": self.rotvecs.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["times"], d["positions"], d["rotvecs"])


@dataclass(frozen=True)
class ClusterMotion:
    kind: str = "static"  # static | constant_velocity | abrupt
    velocity: tuple = (0.0, 0.0, 0.0)
    t_move: float = 0.0

    def __post_init__(self):
        if self.kind not in ("static", "constant_velocity", "abrupt"):
            raise ScenarioError("unknown motion kind %r" % self.kind)

    def offset(self, t):
        v = np.asarray(self.velocity, dtype=float)
        if self.kind == "static":
            return np.zeros(3)
        if self.kind == "constant_velocity":
            return v * t
        if t < self.t_move:
            return np.zeros(3)
        return v * (t - self.t_move)

    def velocity_at(self, t):
        if self.kind == "static" or (self.kind == "abrupt" and t < self.t_move):
            return np.zeros(3)
        return np.asarray(self.velocity, dtype=float)

    @property
    def dynamic(self):
        return self.kind != "static"


@dataclass
class LandmarkCluster:
    points: np.ndarray
    motion: ClusterMotion = field(default_factory=ClusterMotion)
    label: str = "static"

    def positions_at(self, t):
        return self.points + self.motion.offset(t)


@dataclass
class Scenario:
    name: str
    trajectory: Trajectory
    clusters: list
    camera: CameraModel = field(default_factory=CameraModel.forward_looking)
    noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    pixel_sigma: float = 0.5
    imu_rate: float = 200.0
    cam_rate: float = 20.0
    seed: int = 0
    max_features: int = 120
    max_range: float = 30.0
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        if self.imu_rate < 5 * self.cam_rate:
            raise ScenarioError("imu_rate must be at least 5x cam_rate")
        if not self.trajectory.duration > 0:
            raise ScenarioError("duration must be positive")

    @property
    def duration(self):
        return self.trajectory.duration

    def extent(self):
        """Rough size of the scene, used for divergence bounds."""
        pts = np.vstack([c.points for c in self.clusters]) if self.clusters else np.zeros((1, 3))
        p0 = self.trajectory.positions[0]
        return float(max(self.trajectory.extent(), np.max(np.linalg.norm(pts - p0, axis=1))))


@dataclass
class Frame:
    index: int
    stamp: float
    imu_index: int
    ids: np.ndarray
    pixels: np.ndarray


@dataclass
class SimBundle:
    scenario_name: str
    seed: int
    imu_stamps: np.ndarray
    imu_acc: np.ndarray
    imu_gyro: np.ndarray
    frames: list
    gt_states: list
    gt_bias_a: np.ndarray
    gt_bias_w: np.ndarray
    feature_cluster: dict
    cluster_motion: dict
    warnings: list = field(default_factory=list)

    def imu_samples(self, i0, i1):
        """Samples with indices i0..i1 inclusive."""
        return [ImuSample(float(self.imu_stamps[i]), self.imu_acc[i], self.imu_gyro[i])
                for i in range(i0, i1 + 1)]

    def is_dynamic(self, feature_id):
        label = self.feature_cluster.get(feature_id)
        return label is not None and self.cluster_motion[label].dynamic


def _camera_points(cam: CameraModel, p_wb, R_wb, X_w):
    R_wc = R_wb @ cam.R_bc
    p_wc = p_wb + R_wb @ cam.t_bc
    return (X_w - p_wc) @ R_wc


def generate(scenario: Scenario) -> SimBundle:
    rng = np.random.default_rng(scenario.seed)
    traj = scenario.trajectory
    t0 = traj.times[0]
    n_imu = int(round(traj.duration * scenario.imu_rate)) + 1
    stamps = t0 + np.arange(n_imu) / scenario.imu_rate
    stamps = stamps[stamps <= traj.times[-1] + 1e-12]
    n_imu = len(stamps)
    dt = 1.0 / scenario.imu_rate
    g = np.asarray(scenario.gravity, dtype=float)
    noise = scenario.noise

    rots = traj.rotation(stamps)
    R_all = rots.as_matrix()
    acc_w = traj.acceleration(stamps)
    f_b = np.einsum("nji,nj->ni", R_all, acc_w - g)
    w_b = traj.body_rate(stamps)

    walk_a = rng.standard_normal((n_imu, 3)) * noise.accel_walk * np.sqrt(dt)
    walk_w = rng.standard_normal((n_imu, 3)) * noise.gyro_walk * np.sqrt(dt)
    walk_a[0] = 0.0
    walk_w[0] = 0.0
    bias_a = np.asarray(noise.b_a0, dtype=float) + np.cumsum(walk_a, axis=0)
    bias_w = np.asarray(noise.b_w0, dtype=float) + np.cumsum(walk_w, axis=0)
    acc_m = f_b + bias_a + rng.standard_normal((n_imu, 3)) * noise.accel_noise / np.sqrt(dt)
    gyro_m = w_b + bias_w + rng.standard_normal((n_imu, 3)) * noise.gyro_noise / np.sqrt(dt)

    step = int(round(scenario.imu_rate / scenario.cam_rate))
    frame_idx = np.arange(0, n_imu, step)
    pos = traj.position(stamps[frame_idx])
    vel = traj.velocity(stamps[frame_idx])
    quats = _quat_wxyz(rots[frame_idx])

    cam = scenario.camera
    labels = [c.label for c in scenario.clusters]
    if len(set(labels)) != len(labels):
        raise ScenarioError("cluster labels must be unique")
    owner = np.concatenate([np.full(len(c.points), i) for i, c in enumerate(scenario.clusters)]) \
        if scenario.clusters else np.zeros(0, dtype=int)

    frames, gt = [], []
    tracked = {}  # landmark index -> feature id
    feature_cluster = {}
    next_id = 0
    blind_since = None
    warnings = []
    for k, i in enumerate(frame_idx):
        t = stamps[i]
        X = np.vstack([c.positions_at(t) for c in scenario.clusters]) if scenario.clusters else np.zeros((0, 3))
        Xc = _camera_points(cam, pos[k], R_all[i], X)
        z = Xc[:, 2]
        ok = (z > MIN_VIS_DEPTH) & (np.linalg.norm(Xc, axis=1) < scenario.max_range)
        uv = np.full((len(X), 2), np.nan)
        uv[ok] = np.column_stack([cam.fx * Xc[ok, 0] / z[ok] + cam.cx, cam.fy * Xc[ok, 1] / z[ok] + cam.cy])
        ok &= cam.in_image(np.nan_to_num(uv, nan=-1.0), margin=1.0)
        visible = set(np.flatnonzero(ok).tolist())

        tracked = {lm: fid for lm, fid in tracked.items() if lm in visible}
        room = scenario.max_features - len(tracked)
        if room > 0:
            candidates = np.array(sorted(visible - tracked.keys()), dtype=int)
            if len(candidates):
                pick = rng.permutation(candidates)[:room]
                for lm in sorted(pick.tolist()):
                    tracked[lm] = next_id
                    feature_cluster[next_id] = labels[owner[lm]]
                    next_id += 1

        lms = np.array(sorted(tracked, key=tracked.get), dtype=int)
        ids = np.array([tracked[lm] for lm in lms], dtype=int)
        pix = uv[lms] + rng.standard_normal((len(lms), 2)) * scenario.pixel_sigma if len(lms) else np.zeros((0, 2))
        frames.append(Frame(k, float(t), int(i), ids, pix))
        gt.append(BodyState(pos[k].copy(), vel[k].copy(), quats[k].copy(),
                            bias_a[i].copy(), bias_w[i].copy(), float(t)))

        if not visible:
            blind_since = t if blind_since is None else blind_since
            if t - blind_since > 1.0 and not any(w.get("kind") == "blind" and w["since"] == blind_since for w in warnings):
                warnings.append({"kind": "blind", "since": float(blind_since), "stamp": float(t)})
                log.warning("no landmark visible since t=%.2f", blind_since)
        else:
            blind_since = None

    return SimBundle(
        scenario_name=scenario.name,
        seed=scenario.seed,
        imu_stamps=stamps,
        imu_acc=acc_m,
        imu_gyro=gyro_m,
        frames=frames,
        gt_states=gt,
        gt_bias_a=bias_a,
        gt_bias_w=bias_w,
        feature_cluster=feature_cluster,
        cluster_motion={c.label: c.motion for c in scenario.clusters},
        warnings=warnings,
    )


# ---------------------------------------------------------------- presets

def _lissajous(duration, amp, periods, phases, center, rot_amp, rot_periods, dt=0.5):
    times = np.arange(0.0, duration + 1e-9, dt)
    w = 2 * np.pi / np.asarray(periods)
    pos = center + amp * np.sin(np.outer(times, w) + phases)
    wr = 2 * np.pi / np.asarray(rot_periods)
    # roll, pitch, yaw about world x, y, z
    angles = rot_amp * np.sin(np.outer(times, wr) + np.array([0.3, 1.1, 0.0]))
    rotvecs = Rotation.from_euler("xyz", angles).as_rotvec()
    return Trajectory(times, pos, rotvecs)


def _wall_points(rng, n, x, y_range, z_range):
    y = rng.uniform(*y_range, n)
    z = rng.uniform(*z_range, n)
    return np.column_stack([np.full(n, x) + rng.normal(0, 0.3, n), y, z])


def _room(rng, n, depth=6.0, half_width=5.0, z_range=(-1.5, 3.5)):
    """Front wall plus side walls and floor/ceiling strips ahead of the camera."""
    n_front = int(0.55 * n)
    n_side = int(0.15 * n)
    n_fc = n - n_front - 2 * n_side
    front = _wall_points(rng, n_front, depth, (-half_width, half_width), z_range)
    left = np.column_stack([rng.uniform(1.5, depth, n_side), np.full(n_side, half_width) + rng.normal(0, 0.2, n_side),
                            rng.uniform(*z_range, n_side)])
    right = np.column_stack([rng.uniform(1.5, depth, n_side), np.full(n_side, -half_width) + rng.normal(0, 0.2, n_side),
                             rng.uniform(*z_range, n_side)])
    fc_z = np.where(rng.random(n_fc) < 0.5, z_range[0], z_range[1])
    floor_ceil = np.column_stack([rng.uniform(2.0, depth, n_fc), rng.uniform(-half_width, half_width, n_fc), fc_z])
    return np.vstack([front, left, right, floor_ceil])


def _panel(rng, n, center, size):
    """Points on a thin box (object surface) centred at ``center``."""
    c = np.asarray(center, dtype=float)
    s = np.asarray(size, dtype=float)
    return c + (rng.random((n, 3)) - 0.5) * s


def preset(name: str, seed: int = 0, duration: float = 30.0, max_features: int | None = None) -> Scenario:
    """Canonical scenarios. Geometry and noise draws depend on ``seed``."""
    if name not in PRESETS:
        raise ScenarioError("unknown preset %r (choose from %s)" % (name, ", ".join(PRESETS)))
    rng = np.random.default_rng(10_000 + seed)
    center = np.array([0.0, 0.0, 1.0])
    cam = CameraModel.forward_looking()
    noise = ImuNoiseParams(b_a0=np.array([0.05, -0.03, 0.04]), b_w0=np.array([0.002, -0.003, 0.001]))

    if name == "parallel_abrupt":
        traj = _lissajous(duration, np.array([0.9, 0.35, 0.25]), [7.0, 5.3, 4.1],
                          np.array([0.0, 0.7, 1.9]), center, np.array([0.06, 0.08, 0.25]), [6.1, 4.7, 8.3])
    elif name == "lateral_abrupt":
        traj = _lissajous(duration, np.array([0.35, 1.0, 0.25]), [5.3, 7.0, 4.1],
                          np.array([0.7, 0.0, 1.9]), center, np.array([0.06, 0.08, 0.25]), [6.1, 4.7, 8.3])
    elif name == "occlusion_high":
        # lateral camera speed stays well below the train's so the train never
        # appears static in the image
        traj = _lissajous(duration, np.array([0.6, 0.3, 0.3]), [6.5, 8.0, 4.5],
                          np.array([0.0, 0.9, 1.7]), center, np.array([0.06, 0.08, 0.3]), [6.1, 4.7, 8.3])
    else:
        traj = _lissajous(duration, np.array([0.6, 1.0, 0.3]), [6.5, 8.0, 4.5],
                          np.array([0.0, 0.9, 1.7]), center, np.array([0.06, 0.08, 0.3]), [6.1, 4.7, 8.3])

    clusters = [LandmarkCluster(_room(rng, 900), ClusterMotion(), "room")]
    feats = 120
    if name == "dynamic_mid":
        pts = _panel(rng, 500, (3.0, -2.0, 0.8), (0.4, 2.5, 1.5))
        clusters.append(LandmarkCluster(pts, ClusterMotion("constant_velocity", (0.0, 0.15, 0.05)), "mover"))
    elif name == "occlusion_high":
        # a long rigid train of panels sliding across the view for the whole run
        speed = 1.2
        span = 3.0 + speed * duration
        n = int(900 * span)
        pts = _panel(rng, n, (3.0, -span / 2 + 2.0, 0.9), (0.5, span, 2.6))
        clusters.append(LandmarkCluster(pts, ClusterMotion("constant_velocity", (0.0, speed, 0.0)), "train"))
    elif name == "lateral_abrupt":
        pts = _panel(rng, 450, (3.0, 0.0, 1.0), (0.3, 2.6, 1.9))
        clusters.append(LandmarkCluster(pts, ClusterMotion("abrupt", (0.0, 0.6, 0.0), 0.4 * duration), "object"))
    elif name == "parallel_abrupt":
        pts = _panel(rng, 450, (3.0, 0.0, 1.0), (0.3, 2.6, 1.9))
        clusters.append(LandmarkCluster(pts, ClusterMotion("abrupt", (0.6, 0.0, 0.0), 0.4 * duration), "object"))

    return Scenario(name=name, trajectory=traj, clusters=clusters, camera=cam, noise=noise,
                    seed=seed, max_features=max_features or feats)


# ---------------------------------------------------------------- files

def scenario_to_dict(sc: Scenario) -> dict:
    cam = sc.camera
    return {
        "name": sc.name,
        "seed": int(sc.seed),
        "imu_rate": float(sc.imu_rate),
        "cam_rate": float(sc.cam_rate),
        "pixel_sigma": float(sc.pixel_sigma),
        "max_features": int(sc.max_features),
        "max_range": float(sc.max_range),
        "gravity": np.asarray(sc.gravity, dtype=float).tolist(),
        "camera": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                   "width": cam.width, "height": cam.height,
                   "R_bc": np.asarray(cam.R_bc).tolist(), "t_bc": np.asarray(cam.t_bc).tolist()},
        "noise": {"accel_noise": sc.noise.accel_noise, "gyro_noise": sc.noise.gyro_noise,
                  "accel_walk": sc.noise.accel_walk, "gyro_walk": sc.noise.gyro_walk,
                  "b_a0": np.asarray(sc.noise.b_a0).tolist(), "b_w0": np.asarray(sc.noise.b_w0).tolist()},
        "trajectory": sc.trajectory.to_dict(),
        "clusters": [{"label": c.label,
                      "motion": {"kind": c.motion.kind, "velocity": list(map(float, c.motion.velocity)),
                                 "t_move": float(c.motion.t_move)},
                      "points": np.asarray(c.points, dtype=float).tolist()} for c in sc.clusters],
    }


def scenario_from_dict(d: dict) -> Scenario:
    try:
        cam_d = dict(d.get("camera", {}))
        if "R_bc" in cam_d:
            cam_d["R_bc"] = np.asarray(cam_d["R_bc"], dtype=float)
        if "t_bc" in cam_d:
            cam_d["t_bc"] = np.asarray(cam_d["t_bc"], dtype=float)
        cam = CameraModel(**cam_d) if cam_d else CameraModel.forward_looking()
        nd = dict(d.get("noise", {}))
        for k in ("b_a0", "b_w0"):
            if k in nd:
                nd[k] = np.asarray(nd[k], dtype=float)
        clusters = []
        for c in d.get("clusters", []):
            m = c.get("motion", {})
            motion = ClusterMotion(m.get("kind", "static"), tuple(m.get("velocity", (0.0, 0.0, 0.0))),
                                   float(m.get("t_move", 0.0)))
            clusters.append(LandmarkCluster(np.asarray(c["points"], dtype=float).reshape(-1, 3), motion, c["label"]))
        return Scenario(
            name=d["name"],
            trajectory=Trajectory.from_dict(d["trajectory"]),
            clusters=clusters,
            camera=cam,
            noise=ImuNoiseParams(**nd),
            pixel_sigma=float(d.get("pixel_sigma", 0.5)),
            imu_rate=float(d.get("imu_rate", 200.0)),
            cam_rate=float(d.get("cam_rate", 20.0)),
            seed=int(d.get("seed", 0)),
            max_features=int(d.get("max_features", 120)),
            max_range=float(d.get("max_range", 30.0)),
            gravity=np.asarray(d.get("gravity", GRAVITY), dtype=float),
        )
    except (KeyError, TypeError) as exc:
        raise ScenarioError("malformed scenario: %s" % exc) from exc


def save_scenario(sc: Scenario, path):
    with open(path, "w") as fh:
        yaml.safe_dump(scenario_to_dict(sc), fh, sort_keys=False, default_flow_style=None)


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        d = yaml.safe_load(fh)
    if not isinstance(d, dict):
        raise ScenarioError("%s does not contain a scenario mapping" % path)
    return scenario_from_dict(d)


IMU_COLUMNS = ["stamp", "ax", "ay", "az", "wx", "wy", "wz"]
FRAME_COLUMNS = ["stamp", "feature_id", "u", "v"]
GT_COLUMNS = ["stamp", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz",
              "bax", "bay", "baz", "bwx", "bwy", "bwz"]


def _fmt(x):
    return repr(float(x))


def export_bundle(bundle: SimBundle, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "imu.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IMU_COLUMNS)
        for t, a, g in zip(bundle.imu_stamps, bundle.imu_acc, bundle.imu_gyro):
            w.writerow([_fmt(t), *map(_fmt, a), *map(_fmt, g)])
    with open(os.path.join(out_dir, "frames.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FRAME_COLUMNS)
        for fr in bundle.frames:
            for fid, (u, v) in zip(fr.ids, fr.pixels):
                w.writerow([_fmt(fr.stamp), int(fid), _fmt(u), _fmt(v)])
    with open(os.path.join(out_dir, "gt.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GT_COLUMNS)
        for s in bundle.gt_states:
            w.writerow([_fmt(s.stamp), *map(_fmt, s.p_wb), *map(_fmt, s.q_wb), *map(_fmt, s.v_wb),
                        *map(_fmt, s.b_a), *map(_fmt, s.b_w)])
    with open(os.path.join(out_dir, "features.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature_id", "cluster", "motion"])
        for fid in sorted(bundle.feature_cluster):
            label = bundle.feature_cluster[fid]
            w.writerow([fid, label, bundle.cluster_motion[label].kind])


def load_bundle(in_dir, scenario: Scenario) -> SimBundle:
    """Read a bundle written by ``export_bundle``; ``scenario`` supplies the
    cluster motions and the IMU bias trace is rebuilt from gt.csv."""
    imu = np.loadtxt(os.path.join(in_dir, "imu.csv"), delimiter=",", skiprows=1, ndmin=2)
    gt = np.loadtxt(os.path.join(in_dir, "gt.csv"), delimiter=",", skiprows=1, ndmin=2)
    fr = np.loadtxt(os.path.join(in_dir, "frames.csv"), delimiter=",", skiprows=1, ndmin=2)
    feature_cluster = {}
    with open(os.path.join(in_dir, "features.csv")) as fh:
        for row in csv.DictReader(fh):
            feature_cluster[int(row["feature_id"])] = row["cluster"]
    stamps = imu[:, 0]
    frames, states = [], []
    for k, row in enumerate(gt):
        t = row[0]
        i = int(np.argmin(np.abs(stamps - t)))
        sel = fr[:, 0] == t
        frames.append(Frame(k, float(t), i, fr[sel, 1].astype(int), fr[sel, 2:4].copy()))
        states.append(BodyState(row[1:4].copy(), row[8:11].copy(), row[4:8].copy(),
                                row[11:14].copy(), row[14:17].copy(), float(t)))
    idx = [f.imu_index for f in frames]
    ba = np.array([np.interp(stamps, stamps[idx], gt[:, 11 + j]) for j in range(3)]).T
    bw = np.array([np.interp(stamps, stamps[idx], gt[:, 14 + j]) for j in range(3)]).T
    return SimBundle(scenario.name, scenario.seed, stamps, imu[:, 1:4].copy(), imu[:, 4:7].copy(),
                     frames, states, ba, bw, feature_cluster,
                     {c.label: c.motion for c in scenario.clusters})


def dynamic_fraction(bundle: SimBundle):
    """Per-frame fraction of observed features that belong to moving clusters."""
    out = []
    for fr in bundle.frames:
        if len(fr.ids) == 0:
            out.append(0.0)
            continue
        out.append(float(np.mean([bundle.is_dynamic(int(i)) for i in fr.ids])))
    return np.array(out)
