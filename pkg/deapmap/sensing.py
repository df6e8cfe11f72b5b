import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from deapmap.errors import FootprintError
from deapmap.tissue import Episode, GridSpec

LOGGER = logging.getLogger(__name__)

N_ELECTRODES = 20
FS_HZ = 1000.0
FOOTPRINT_MARGIN_MM = 2.0
REFERENCE_HEIGHT_MM = 1.0
CHUNK_FRAMES = 256
PENTAGON_RADII_MM = (3.0, 6.0, 9.0, 12.0)
SPIRAL_R0_MM = 2.0
SPIRAL_PITCH_MM_PER_RAD = 1.2
SPIRAL_R_MAX_MM = 12.0

ArrayName = Literal["pentagon", "spiral", "custom"]


class Pose(BaseModel):
    """Rigid array-frame -> tissue-frame transform (rotation, then translation)."""

    model_config = ConfigDict(frozen=True)

    rotation_deg: float = 0.0
    tx_mm: float = 0.0
    ty_mm: float = 0.0

    @property
    def matrix(self) -> np.ndarray:
        theta = np.deg2rad(self.rotation_deg)
        c, s = np.cos(theta), np.sin(theta)
        return np.array([[c, -s, self.tx_mm], [s, c, self.ty_mm], [0.0, 0.0, 1.0]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        m = self.matrix
        return points @ m[:2, :2].T + m[:2, 2]

    def invert(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        m = self.matrix
        return (points - m[:2, 2]) @ m[:2, :2]


class NoiseSpec(BaseModel):
    snr_db: float | None = 20.0
    line_amplitude: float = Field(0.0, ge=0)
    line_hz: float = 50.0


@dataclass
class ElectrodeArray:
    name: ArrayName
    positions: np.ndarray
    height_mm: float = 1.0
    pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        if self.name != "custom" and len(self.positions) != N_ELECTRODES:
            raise ValueError(f"{self.name} array must have {N_ELECTRODES} electrodes")

    @property
    def n_electrodes(self) -> int:
        return len(self.positions)

    @property
    def max_radius_mm(self) -> float:
        return float(np.hypot(self.positions[:, 0], self.positions[:, 1]).max())

    @property
    def footprint_radius_mm(self) -> float:
        return self.max_radius_mm + FOOTPRINT_MARGIN_MM

    def posed_positions(self) -> np.ndarray:
        return self.pose.apply(self.positions)

    def with_pose(self, pose: Pose) -> "ElectrodeArray":
        return replace(self, pose=pose)

    def with_height(self, height_mm: float) -> "ElectrodeArray":
        return replace(self, height_mm=height_mm)


@dataclass
class Registration:
    """Electrode sites as continuous (row, col) grid coordinates."""

    coords: np.ndarray
    pose: Pose
    shape: tuple[int, int]
    dx_mm: float

    def to_tissue(self, coords: np.ndarray | None = None) -> np.ndarray:
        return grid_to_tissue(self.coords if coords is None else coords, self.shape, self.dx_mm)


@dataclass
class EgmRecording:
    id: str
    traces: np.ndarray
    episode_id: str
    array_name: str
    pose: Pose
    noise: NoiseSpec
    fs_hz: float = FS_HZ
    noise_meta: dict = field(default_factory=dict)

    @property
    def n_channels(self) -> int:
        return self.traces.shape[0]

    @property
    def n_samples(self) -> int:
        return self.traces.shape[1]


def build_pentagon_array(height_mm: float = 1.0) -> ElectrodeArray:
    """Five spines at 90 + k*72 degrees, four electrodes per spine."""
    positions = []
    for k in range(5):
        angle = np.deg2rad(90.0 + 72.0 * k)
        for radius in PENTAGON_RADII_MM:
            positions.append((radius * np.cos(angle), radius * np.sin(angle)))
    return ElectrodeArray(name="pentagon", positions=np.array(positions), height_mm=height_mm)


def build_spiral_array(height_mm: float = 1.0) -> ElectrodeArray:
    """Archimedean spiral r = 2 + 1.2*phi (mm), 20 electrodes equally spaced in arc length."""
    phi_max = (SPIRAL_R_MAX_MM - SPIRAL_R0_MM) / SPIRAL_PITCH_MM_PER_RAD
    phi = np.linspace(0.0, phi_max, 20001)
    radius = SPIRAL_R0_MM + SPIRAL_PITCH_MM_PER_RAD * phi
    x, y = radius * np.cos(phi), radius * np.sin(phi)
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(x), np.diff(y)))])
    targets = np.linspace(0.0, arc[-1], N_ELECTRODES)
    phi_e = np.interp(targets, arc, phi)
    r_e = SPIRAL_R0_MM + SPIRAL_PITCH_MM_PER_RAD * phi_e
    positions = np.column_stack([r_e * np.cos(phi_e), r_e * np.sin(phi_e)])
    return ElectrodeArray(name="spiral", positions=positions, height_mm=height_mm)


def build_array(name: str, height_mm: float = 1.0, pose: Pose | None = None) -> ElectrodeArray:
    builders = {"pentagon": build_pentagon_array, "spiral": build_spiral_array}
    if name not in builders:
        raise ValueError(f"unknown electrode array '{name}'")
    array = builders[name](height_mm)
    return array.with_pose(pose) if pose is not None else array


def tissue_to_grid(points_mm: np.ndarray, shape: tuple[int, int], dx_mm: float) -> np.ndarray:
    """(x, y) mm about the grid centre -> continuous (row, col)."""
    ny, nx = shape
    points_mm = np.atleast_2d(points_mm)
    rows = points_mm[:, 1] / dx_mm + (ny - 1) / 2.0
    cols = points_mm[:, 0] / dx_mm + (nx - 1) / 2.0
    return np.column_stack([rows, cols])


def grid_to_tissue(coords: np.ndarray, shape: tuple[int, int], dx_mm: float) -> np.ndarray:
    ny, nx = shape
    coords = np.atleast_2d(coords)
    x = (coords[:, 1] - (nx - 1) / 2.0) * dx_mm
    y = (coords[:, 0] - (ny - 1) / 2.0) * dx_mm
    return np.column_stack([x, y])


def register(array: ElectrodeArray, grid: GridSpec, margin_mm: float = FOOTPRINT_MARGIN_MM) -> Registration:
    """Map the posed electrodes onto the episode grid, rejecting any outside the margin."""
    posed = array.posed_positions()
    half_x = (grid.nx - 1) / 2.0 * grid.dx_mm - margin_mm
    half_y = (grid.ny - 1) / 2.0 * grid.dx_mm - margin_mm
    for index, (x, y) in enumerate(posed):
        if abs(x) > half_x + 1e-9 or abs(y) > half_y + 1e-9:
            raise FootprintError(index, f"posed at ({x:.2f}, {y:.2f}) mm, limit +-({half_x:.2f}, {half_y:.2f})")
    coords = tissue_to_grid(posed, grid.shape, grid.dx_mm)
    return Registration(coords=coords, pose=array.pose, shape=grid.shape, dx_mm=grid.dx_mm)


def grid_laplacian(frames: np.ndarray) -> np.ndarray:
    """5-point Laplacian in cell units with zero-gradient edges, exact zero on flat frames."""
    padded = np.pad(frames, ((0, 0), (1, 1), (1, 1)), mode="edge")
    centre = padded[:, 1:-1, 1:-1]
    return (
        (padded[:, :-2, 1:-1] - centre)
        + (padded[:, 2:, 1:-1] - centre)
        + (padded[:, 1:-1, :-2] - centre)
        + (padded[:, 1:-1, 2:] - centre)
    )


def _cell_centres_mm(shape: tuple[int, int], dx_mm: float) -> tuple[np.ndarray, np.ndarray]:
    ny, nx = shape
    x = (np.arange(nx) - (nx - 1) / 2.0) * dx_mm
    y = (np.arange(ny) - (ny - 1) / 2.0) * dx_mm
    return np.meshgrid(x, y)


def source_weights(sites_mm: np.ndarray, height_mm: float, shape: tuple[int, int], dx_mm: float) -> np.ndarray:
    """1 / dist3d from every electrode to every cell, shape (n_electrodes, ny*nx)."""
    xs, ys = _cell_centres_mm(shape, dx_mm)
    dxs = xs.ravel()[None, :] - sites_mm[:, 0:1]
    dys = ys.ravel()[None, :] - sites_mm[:, 1:2]
    return 1.0 / np.sqrt(dxs**2 + dys**2 + height_mm**2)


@lru_cache(maxsize=32)
def plane_wave_gain(ny: int, nx: int, dx_mm: float) -> float:
    """kappa giving a unit peak-to-peak deflection for a plane front under a centred electrode."""
    weights = source_weights(np.zeros((1, 2)), REFERENCE_HEIGHT_MM, (ny, nx), dx_mm).reshape(ny, nx)
    column_weight = weights.sum(axis=0)
    x = (np.arange(nx) - (nx - 1) / 2.0) * dx_mm
    width_mm = max(dx_mm, 0.5)
    fronts = np.arange(x[0], x[-1], dx_mm / 2.0)
    profiles = 0.5 * (1.0 + np.tanh((fronts[:, None] - x[None, :]) / width_mm))
    padded = np.pad(profiles, ((0, 0), (1, 1)), mode="edge")
    lap = (padded[:, :-2] - profiles) + (padded[:, 2:] - profiles)
    raw = -(lap @ column_weight)
    return 1.0 / float(raw.max() - raw.min())


def clean_egm(frames: np.ndarray, sites_mm: np.ndarray, height_mm: float, dx_mm: float) -> np.ndarray:
    """Noise-free unipolar potentials, shape (n_electrodes, n_frames)."""
    n_frames, ny, nx = frames.shape
    weights = source_weights(sites_mm, height_mm, (ny, nx), dx_mm)
    gain = plane_wave_gain(ny, nx, float(dx_mm))
    out = np.empty((len(sites_mm), n_frames))
    for start in range(0, n_frames, CHUNK_FRAMES):
        chunk = np.nan_to_num(np.asarray(frames[start : start + CHUNK_FRAMES], dtype=np.float64))
        lap = grid_laplacian(chunk).reshape(len(chunk), -1)
        out[:, start : start + len(chunk)] = -gain * (weights @ lap.T)
    return out


def add_noise(clean: np.ndarray, noise: NoiseSpec, seed: int, fs_hz: float = FS_HZ) -> tuple[np.ndarray, dict]:
    rng = np.random.default_rng(seed)
    traces = clean.copy()
    meta: dict = {"snr_db": noise.snr_db, "line_amplitude": noise.line_amplitude, "line_hz": noise.line_hz}
    white = rng.standard_normal(clean.shape)
    line_phase = rng.uniform(0.0, 2.0 * np.pi, size=clean.shape[0])
    if noise.snr_db is not None:
        power = np.mean(clean**2, axis=1)
        sigma = np.sqrt(power / 10.0 ** (noise.snr_db / 10.0))
        traces += white * sigma[:, None]
        meta["noise_sigma"] = sigma.tolist()
    if noise.line_amplitude > 0:
        t = np.arange(clean.shape[1]) / fs_hz
        traces += noise.line_amplitude * np.sin(2.0 * np.pi * noise.line_hz * t[None, :] + line_phase[:, None])
    return traces, meta


def forward_egm(episode: Episode, array: ElectrodeArray, noise: NoiseSpec, seed: int) -> EgmRecording:
    """Current-source forward model: phi = -kappa * sum(lap u / dist3d) plus seeded noise."""
    if abs(episode.vm.dt_ms - 1000.0 / FS_HZ) > 1e-9:
        raise ValueError(f"episode must be sampled at 1 kHz, got dt={episode.vm.dt_ms} ms")
    registration = register(array, episode.grid)
    sites = registration.to_tissue()
    clean = clean_egm(episode.vm.frames, sites, array.height_mm, episode.grid.dx_mm)
    traces, meta = add_noise(clean, noise, seed)
    LOGGER.info(
        "Synthesised electrograms",
        extra={"stage": "sense", "episode": episode.id, "array": array.name, "samples": traces.shape[1]},
    )
    return EgmRecording(
        id=f"{episode.id}-{array.name}",
        traces=traces,
        episode_id=episode.id,
        array_name=array.name,
        pose=array.pose,
        noise=noise,
        noise_meta=meta,
    )
