import os

import numpy as np
import pytest

from deapmap.movie import VmMovie
from deapmap.sensing import EgmRecording, NoiseSpec, Pose
from deapmap.tissue import Episode, GridSpec, ModelParams, StimulusProtocol


def pytest_collection_modifyitems(config, items):
    if os.environ.get("DEAP_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set DEAP_RUN_SLOW=1 to run end-to-end training")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def biphasic_train(n_samples: int, onsets_ms, sigma_ms: float = 3.0, amplitude: float = 1.0) -> np.ndarray:
    """Positive-then-negative deflections whose steepest downslope sits at each onset."""
    t = np.arange(n_samples, dtype=np.float64)
    trace = np.zeros(n_samples)
    for t0 in onsets_ms:
        u = (t - t0) / sigma_ms
        trace += -amplitude * u * np.exp(-0.5 * u**2)
    return trace


def front_movie(n_frames=300, shape=(128, 128), dx_mm=0.25, speed_mm_per_ms=0.5, start_mm=-20.0, width_mm=0.5):
    """Plane front travelling along +x, activated tissue behind it."""
    ny, nx = shape
    x = (np.arange(nx) - (nx - 1) / 2.0) * dx_mm
    t = np.arange(n_frames)[:, None]
    front = start_mm + speed_mm_per_ms * t
    profile = 0.5 * (1.0 + np.tanh((front - x[None, :]) / width_mm))
    return np.repeat(profile[:, None, :], ny, axis=1)


def rotor_frames(n_frames=700, shape=(64, 64), center=(31.3, 32.6), period_ms=120.0):
    ny, nx = shape
    rows, cols = np.mgrid[0:ny, 0:nx]
    angle = np.arctan2(rows - center[0], cols - center[1])
    t = np.arange(n_frames)[:, None, None]
    return 0.5 + 0.5 * np.cos(angle[None] - 2.0 * np.pi * t / period_ms)


def make_episode(
    episode_id: str,
    frames: np.ndarray,
    label: str = "fibrillation",
    dx_mm: float = 0.5,
) -> Episode:
    ny, nx = frames.shape[1:]
    return Episode(
        id=episode_id,
        seed=0,
        params=ModelParams(time_scale_ms=5.0),
        grid=GridSpec(nx=nx, ny=ny, dx_mm=dx_mm),
        protocol=StimulusProtocol(name="s1s2", events=[]),
        vm=VmMovie(frames=frames.astype(np.float32), dt_ms=1.0, dx_mm=dx_mm),
        label=label,
    )


def make_recording(rec_id: str, episode_id: str, traces: np.ndarray, array_name: str = "pentagon") -> EgmRecording:
    return EgmRecording(
        id=rec_id,
        traces=traces,
        episode_id=episode_id,
        array_name=array_name,
        pose=Pose(),
        noise=NoiseSpec(snr_db=None),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
