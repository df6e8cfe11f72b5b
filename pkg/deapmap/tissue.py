import logging
import math
import uuid
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import ndimage

from deapmap.errors import NonFiniteFieldError, StabilityError
from deapmap.movie import VmMovie
from deapmap.phase import MIN_FILTER_FRAMES, cycle_length_filter

LOGGER = logging.getLogger(__name__)

EPISODE_NAMESPACE = uuid.UUID("5d0f7a0e-3c61-4d55-9d0b-2f2c0a6b1e41")
MAX_DT = 0.05
U_BOUNDS = (-0.1, 1.1)
CAPTURE_LEVEL = 0.5

EpisodeLabel = Literal["sinus", "fibrillation", "tachycardia", "non-capture", "unclassifiable"]


class ModelParams(BaseModel):
    """Aliev-Panfilov constants. Lengths are in mm, times in model units."""

    model_config = ConfigDict(frozen=True)

    k: float = Field(8.0, gt=0)
    a: float = Field(0.15, gt=0, lt=0.5)
    eps0: float = Field(0.002, gt=0)
    mu1: float = Field(0.2, gt=0)
    mu2: float = Field(0.3, gt=0)
    d0: float = Field(0.1, gt=0)
    time_scale_ms: float = Field(12.9, gt=0)

    @classmethod
    def from_section(cls, section) -> "ModelParams":
        return cls(
            k=section.k,
            a=section.a,
            eps0=section.eps0,
            mu1=section.mu1,
            mu2=section.mu2,
            d0=section.d0,
            time_scale_ms=section.time_scale_ms,
        )


class GridSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    nx: int = Field(128, ge=16)
    ny: int = Field(128, ge=16)
    dx_mm: float = Field(0.25, gt=0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.ny, self.nx


class RegionSpec(BaseModel):
    """Half-open rectangle of cells [row0, row1) x [col0, col1)."""

    row0: int
    row1: int
    col0: int
    col1: int

    def mask(self, shape: tuple[int, int]) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        out[max(self.row0, 0) : self.row1, max(self.col0, 0) : self.col1] = True
        return out


class StimulusEvent(BaseModel):
    onset_ms: float = Field(ge=0)
    duration_ms: float = Field(gt=0)
    region: RegionSpec
    amplitude: float = Field(gt=0)
    kind: Literal["s1", "s2", "burst"]


class StimulusProtocol(BaseModel):
    name: str
    events: list[StimulusEvent] = []

    @field_validator("events")
    @classmethod
    def _onsets_non_decreasing(cls, events: list[StimulusEvent]) -> list[StimulusEvent]:
        onsets = [event.onset_ms for event in events]
        if any(b < a for a, b in zip(onsets, onsets[1:])):
            raise ValueError("stimulus onsets must be non-decreasing")
        return events

    def current(self, t_ms: float, shape: tuple[int, int]) -> np.ndarray | None:
        """Summed stimulus current active at time t_ms, or None when quiet."""
        total = None
        for event in self.events:
            if event.onset_ms <= t_ms < event.onset_ms + event.duration_ms:
                if total is None:
                    total = np.zeros(shape)
                total += event.amplitude * event.region.mask(shape)
        return total


@dataclass
class TissueGrid:
    u: np.ndarray
    w: np.ndarray
    diffusion_map: np.ndarray
    dx_mm: float
    clamped: int = 0

    def __post_init__(self):
        ny, nx = self.u.shape
        if nx < 16 or ny < 16:
            raise ValueError(f"tissue grid must be at least 16x16, got {ny}x{nx}")
        if self.w.shape != self.u.shape or self.diffusion_map.shape != self.u.shape:
            raise ValueError("u, w and diffusion_map must share one shape")
        if self.diffusion_map.min() < 0 or self.diffusion_map.max() > 1:
            raise ValueError("diffusion_map values must lie in [0, 1]")

    @property
    def nx(self) -> int:
        return self.u.shape[1]

    @property
    def ny(self) -> int:
        return self.u.shape[0]

    @classmethod
    def resting(cls, spec: GridSpec, diffusion_map: np.ndarray | None = None) -> "TissueGrid":
        if diffusion_map is None:
            diffusion_map = np.ones(spec.shape)
        return cls(
            u=np.zeros(spec.shape),
            w=np.zeros(spec.shape),
            diffusion_map=np.asarray(diffusion_map, dtype=np.float64),
            dx_mm=spec.dx_mm,
        )


@dataclass
class Episode:
    id: str
    seed: int
    params: ModelParams
    grid: GridSpec
    protocol: StimulusProtocol
    vm: VmMovie
    label: EpisodeLabel
    flags: list[str] = field(default_factory=list)
    cycle_length_ms: float | None = None
    substrate: dict = field(default_factory=dict)

    @property
    def duration_ms(self) -> int:
        return self.vm.n_frames


def stability_bound(params: ModelParams, dx_mm: float) -> float:
    return 0.5 * dx_mm**2 / (4.0 * params.d0)


def integration_step(params: ModelParams, dx_mm: float) -> tuple[int, float]:
    """Substeps per 1 ms frame and the matching dimensionless dt."""
    dt_max = min(MAX_DT, stability_bound(params, dx_mm))
    per_ms = 1.0 / params.time_scale_ms
    substeps = max(1, math.ceil(per_ms / dt_max - 1e-12))
    return substeps, per_ms / substeps


def _divergence(u: np.ndarray, diffusivity: np.ndarray, dx_mm: float) -> np.ndarray:
    # face-averaged fluxes; boundary faces carry no flux
    out = np.zeros_like(u)
    flux_x = 0.5 * (diffusivity[:, 1:] + diffusivity[:, :-1]) * (u[:, 1:] - u[:, :-1])
    out[:, :-1] += flux_x
    out[:, 1:] -= flux_x
    flux_y = 0.5 * (diffusivity[1:, :] + diffusivity[:-1, :]) * (u[1:, :] - u[:-1, :])
    out[:-1, :] += flux_y
    out[1:, :] -= flux_y
    return out / dx_mm**2


def step(
    grid: TissueGrid,
    params: ModelParams,
    dt: float,
    stimulus: np.ndarray | None = None,
    step_index: int = 0,
) -> TissueGrid:
    """Advance the sheet by one forward-Euler step with no-flux boundaries."""
    bound = stability_bound(params, grid.dx_mm)
    if dt > bound:
        raise StabilityError(f"dt={dt:g} exceeds the stability bound {bound:g}")
    u, w = grid.u, grid.w
    k, a = params.k, params.a
    du = _divergence(u, params.d0 * grid.diffusion_map, grid.dx_mm)
    du -= k * u * (u - a) * (u - 1.0) + u * w
    if stimulus is not None:
        du += stimulus
    eps = params.eps0 + params.mu1 * w / (u + params.mu2)
    dw = eps * (-w - k * u * (u - a - 1.0))
    u_next = u + dt * du
    w_next = w + dt * dw
    bad = ~(np.isfinite(u_next) & np.isfinite(w_next))
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise NonFiniteFieldError(step_index, (int(row), int(col)))
    # u and w are held inside their bounds; the count of cells that left them is reported
    outside = (u_next < U_BOUNDS[0]) | (u_next > U_BOUNDS[1]) | (w_next < 0.0)
    clamped = int(outside.sum())
    if clamped:
        np.clip(u_next, *U_BOUNDS, out=u_next)
        np.maximum(w_next, 0.0, out=w_next)
    return TissueGrid(u=u_next, w=w_next, diffusion_map=grid.diffusion_map, dx_mm=grid.dx_mm, clamped=clamped)


def make_heterogeneity(
    seed: int, n_patches: int, severity: float, shape: tuple[int, int] = (128, 128)
) -> np.ndarray:
    """Smooth random patches where diffusivity drops toward 1 - severity."""
    if not 0.0 <= severity <= 1.0:
        raise ValueError(f"severity must lie in [0, 1], got {severity}")
    ny, nx = shape
    if severity == 0.0 or n_patches == 0:
        return np.ones(shape)
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:ny, 0:nx]
    coverage = np.zeros(shape)
    for _ in range(n_patches):
        r0 = rng.uniform(0, ny)
        c0 = rng.uniform(0, nx)
        sigma = rng.uniform(0.06, 0.12) * min(nx, ny)
        blob = np.exp(-((rows - r0) ** 2 + (cols - c0) ** 2) / (2.0 * sigma**2))
        coverage = np.maximum(coverage, blob)
    # flat-topped patches with soft edges
    coverage = np.clip(1.6 * coverage - 0.3, 0.0, 1.0)
    coverage = ndimage.gaussian_filter(coverage, sigma=1.0, mode="nearest")
    return np.clip(1.0 - severity * coverage, 0.0, 1.0)


def estimated_cv_mm_per_ms(params: ModelParams) -> float:
    """Continuum front speed of the cubic reaction term."""
    return math.sqrt(params.k * params.d0 / 2.0) * (1.0 - 2.0 * params.a) / params.time_scale_ms


def estimated_apd_ms(params: ModelParams) -> float:
    # recovery variable needs roughly ln(1/eps0)/(mu1*k*a/(1+mu2)) units to end the plateau
    growth = params.mu1 * params.k * params.a / (1.0 + params.mu2)
    return math.log(1.0 / params.eps0) / growth * params.time_scale_ms


def capture_amplitude(params: ModelParams, duration_ms: float) -> float:
    """Current that lifts u by ~0.8 over the pulse."""
    return 0.8 * params.time_scale_ms / duration_ms


def plane_wave_protocol(
    grid: GridSpec, params: ModelParams, onset_ms: float = 5.0, duration_ms: float = 2.0
) -> StimulusProtocol:
    strip = RegionSpec(row0=0, row1=grid.ny, col0=0, col1=3)
    return StimulusProtocol(
        name="s1",
        events=[
            StimulusEvent(
                onset_ms=onset_ms,
                duration_ms=duration_ms,
                region=strip,
                amplitude=capture_amplitude(params, duration_ms),
                kind="s1",
            )
        ],
    )


def _s1s2_regions(grid: GridSpec, orientation: int) -> tuple[RegionSpec, RegionSpec, int]:
    nx, ny = grid.nx, grid.ny
    if orientation == 0:
        return RegionSpec(row0=0, row1=ny, col0=0, col1=3), RegionSpec(row0=ny // 2, row1=ny, col0=0, col1=nx), nx
    if orientation == 1:
        return RegionSpec(row0=0, row1=3, col0=0, col1=nx), RegionSpec(row0=0, row1=ny, col0=nx // 2, col1=nx), ny
    if orientation == 2:
        return RegionSpec(row0=0, row1=ny, col0=nx - 3, col1=nx), RegionSpec(row0=0, row1=ny // 2, col0=0, col1=nx), nx
    if orientation == 3:
        return RegionSpec(row0=ny - 3, row1=ny, col0=0, col1=nx), RegionSpec(row0=0, row1=ny, col0=0, col1=nx // 2), ny
    raise ValueError(f"orientation must be 0..3, got {orientation}")


def s1s2_protocol(
    grid: GridSpec,
    params: ModelParams,
    orientation: int = 0,
    s2_shift_ms: float = 0.0,
    duration_ms: float = 2.0,
) -> StimulusProtocol:
    """Cross-field S1-S2: the S2 half-plane fires into the recovering S1 wake."""
    s1_region, s2_region, cells_along = _s1s2_regions(grid, orientation)
    half_mm = 0.5 * cells_along * grid.dx_mm
    s1_onset = 5.0
    s2_onset = s1_onset + half_mm / estimated_cv_mm_per_ms(params) + estimated_apd_ms(params) + s2_shift_ms
    amplitude = capture_amplitude(params, duration_ms)
    return StimulusProtocol(
        name="s1s2",
        events=[
            StimulusEvent(onset_ms=s1_onset, duration_ms=duration_ms, region=s1_region, amplitude=amplitude, kind="s1"),
            StimulusEvent(onset_ms=s2_onset, duration_ms=duration_ms, region=s2_region, amplitude=amplitude, kind="s2"),
        ],
    )


def burst_protocol(
    grid: GridSpec,
    params: ModelParams,
    cycle_ms: float,
    beats: int,
    rng: np.random.Generator,
    duration_ms: float = 2.0,
) -> StimulusProtocol:
    """High-frequency pacing from a seeded site near one corner."""
    size = max(3, int(round(2.0 / grid.dx_mm)))
    corner = int(rng.integers(0, 4))
    row0 = 2 if corner in (0, 1) else grid.ny - size - 2
    col0 = 2 if corner in (0, 3) else grid.nx - size - 2
    site = RegionSpec(row0=row0, row1=row0 + size, col0=col0, col1=col0 + size)
    amplitude = capture_amplitude(params, duration_ms)
    jitter = rng.uniform(-2.0, 2.0, size=beats)
    events = [
        StimulusEvent(
            onset_ms=5.0 + i * cycle_ms + 2.0 + jitter[i],
            duration_ms=duration_ms,
            region=site,
            amplitude=amplitude,
            kind="burst",
        )
        for i in range(beats)
    ]
    return StimulusProtocol(name="burst", events=events)


def episode_id(seed: int, index: int = 0) -> str:
    return uuid.uuid5(EPISODE_NAMESPACE, f"{seed}-{index}").hex[:8]


def _normalise(frames: np.ndarray) -> np.ndarray:
    lo = float(frames.min())
    hi = float(frames.max())
    if hi - lo <= 0.0:
        return np.zeros_like(frames)
    return (frames - lo) / (hi - lo)


def _label(protocol: StimulusProtocol, vm: VmMovie, captured: bool) -> tuple[EpisodeLabel, list[str], float | None]:
    flags: list[str] = []
    if protocol.events and not captured:
        flags.append("non-capture")
        return "non-capture", flags, None
    if not protocol.events or all(event.kind == "s1" for event in protocol.events):
        return "sinus", flags, None
    if vm.n_frames < MIN_FILTER_FRAMES:
        flags.append("unclassifiable")
        return "unclassifiable", flags, None
    verdict = cycle_length_filter(vm)
    if verdict.label == "unclassifiable":
        flags.append("unclassifiable")
        return "unclassifiable", flags, None
    return verdict.label, flags, verdict.cl_ms


def run_episode(
    proto: StimulusProtocol,
    params: ModelParams,
    grid: GridSpec,
    seed: int,
    duration_ms: int,
    diffusion_map: np.ndarray | None = None,
    episode_index: int = 0,
    substrate: dict | None = None,
) -> Episode:
    """Simulate one episode and record u as 1 ms frames, min-max normalised."""
    if duration_ms < 500:
        raise ValueError(f"duration_ms must be at least 500, got {duration_ms}")
    substeps, dt = integration_step(params, grid.dx_mm)
    state = TissueGrid.resting(grid, diffusion_map)
    frames = np.empty((duration_ms, grid.ny, grid.nx), dtype=np.float32)
    first_onset = min((event.onset_ms for event in proto.events), default=None)
    captured = False
    step_index = 0
    clamped_steps = 0
    for frame in range(duration_ms):
        frames[frame] = state.u
        if first_onset is not None and frame >= first_onset and state.u.max() > CAPTURE_LEVEL:
            captured = True
        for sub in range(substeps):
            t_ms = frame + sub / substeps
            state = step(state, params, dt, proto.current(t_ms, grid.shape), step_index)
            clamped_steps += int(state.clamped > 0)
            step_index += 1
    vm = VmMovie(frames=_normalise(frames), dt_ms=1.0, dx_mm=grid.dx_mm)
    label, flags, cl_ms = _label(proto, vm, captured)
    ep_id = episode_id(seed, episode_index)
    if clamped_steps:
        flags.append("clamped")
        LOGGER.warning(
            "State left its bounds and was clamped",
            extra={"stage": "simulate", "episode": ep_id, "steps": clamped_steps},
        )
    if "non-capture" in flags:
        LOGGER.warning(
            "Episode failed to capture",
            extra={"stage": "simulate", "episode": ep_id, "protocol": proto.name},
        )
    LOGGER.info(
        "Simulated episode",
        extra={"stage": "simulate", "episode": ep_id, "label": label, "steps": step_index},
    )
    return Episode(
        id=ep_id,
        seed=seed,
        params=params,
        grid=grid,
        protocol=proto,
        vm=vm,
        label=label,
        flags=flags,
        cycle_length_ms=cl_ms,
        substrate=substrate or {},
    )


def episode_seed(base_seed: int, index: int) -> int:
    """64-bit episode seed derived from the run seed."""
    state = np.random.SeedSequence([base_seed, index]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def build_protocol(kind: str, grid: GridSpec, params: ModelParams, seed: int, section=None) -> StimulusProtocol:
    rng = np.random.default_rng(seed)
    if kind == "s1":
        return plane_wave_protocol(grid, params)
    if kind == "s1s2":
        return s1s2_protocol(grid, params)
    if kind == "burst":
        cycle = section.burst_cycle_ms if section is not None else 90.0
        beats = section.burst_beats if section is not None else 8
        return burst_protocol(grid, params, cycle, beats, rng)
    if kind == "fibrillation":
        orientation = int(rng.integers(0, 4))
        shift = float(rng.uniform(-0.1, 0.2)) * estimated_apd_ms(params)
        return s1s2_protocol(grid, params, orientation=orientation, s2_shift_ms=shift)
    raise ValueError(f"unknown protocol '{kind}'")


def simulate_from_section(section, base_seed: int, index: int) -> Episode:
    """One corpus episode as described by a RunConfig tissue section."""
    params = ModelParams.from_section(section)
    grid = GridSpec(nx=section.nx, ny=section.ny, dx_mm=section.dx_mm)
    seed = episode_seed(base_seed, index)
    proto = build_protocol(section.protocol, grid, params, seed, section)
    diffusion_map = None
    substrate = {"n_patches": 0, "severity": 0.0}
    if section.protocol in ("burst", "fibrillation") and section.severity > 0:
        diffusion_map = make_heterogeneity(seed, section.n_patches, section.severity, grid.shape)
        substrate = {"n_patches": section.n_patches, "severity": section.severity}
    return run_episode(
        proto,
        params,
        grid,
        seed,
        section.duration_ms,
        diffusion_map=diffusion_map,
        episode_index=index,
        substrate=substrate,
    )
