import os
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import settings

from robvio.preint import ImuNoiseParams, ImuSample
from robvio.sim import preset
from robvio.state import BodyState

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def quiet(sc):
    """The same scenario with every noise source switched off."""
    noise = replace(sc.noise, accel_noise=0.0, gyro_noise=0.0, accel_walk=0.0, gyro_walk=0.0)
    return replace(sc, noise=noise, pixel_sigma=0.0)


def random_state(rng, stamp=0.0):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    q = -q if q[0] < 0 else q
    return BodyState(rng.normal(size=3), rng.normal(size=3), q, 0.1 * rng.normal(size=3),
                     0.01 * rng.normal(size=3), stamp)


def random_samples(rng, duration=1.0, rate=200.0, t0=0.0):
    n = int(round(duration * rate)) + 1
    t = t0 + np.arange(n) / rate
    a = rng.normal(size=3) + 0.5 * np.sin(np.outer(t, [1.3, 2.1, 0.7]))
    w = 0.3 * rng.normal(size=3) + 0.2 * np.cos(np.outer(t, [0.9, 1.7, 2.3]))
    return [ImuSample(float(t[i]), a[i], w[i]) for i in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def quiet_static():
    return quiet(preset("static_room", seed=3, duration=6.0))


@pytest.fixture
def noise():
    return ImuNoiseParams()


def drive(bundle, sc, cfg, n_frames=None, imu_noise=None, after=None):
    """Feed frames into a fresh estimator the way the runner does; returns
    the estimator. ``after(est, frame)`` runs after each optimized frame."""
    from robvio.estimator import Estimator
    est = Estimator(cfg, sc.camera, sc.gravity, imu_noise or ImuNoiseParams())
    frames = bundle.frames if n_frames is None else bundle.frames[:n_frames]
    est.initialize(bundle.gt_states[0], frames[0])
    prev = frames[0]
    for fr in frames[1:]:
        samples = bundle.imu_samples(prev.imu_index, fr.imu_index)
        prev = fr
        _, reset = est.add_frame(fr, samples)
        if not reset and len(est.window.keyframes) >= 2:
            est.alternate()
            if after is not None:
                after(est, fr)
    return est


# acceptance criteria report one line each; printed after the test summary
ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    line = "C%-2d %s  %s" % (number, "PASS" if ok else "FAIL", detail)
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
