import numpy as np
import pytest
from pydantic import ValidationError

from deapmap.errors import NonFiniteFieldError, StabilityError
from deapmap.phase import analyze_movie, dominant_track
from deapmap.tissue import (
    GridSpec,
    ModelParams,
    RegionSpec,
    StimulusEvent,
    StimulusProtocol,
    TissueGrid,
    U_BOUNDS,
    build_protocol,
    burst_protocol,
    episode_id,
    episode_seed,
    integration_step,
    make_heterogeneity,
    plane_wave_protocol,
    run_episode,
    s1s2_protocol,
    stability_bound,
    step,
)

FAST = ModelParams(time_scale_ms=5.0)


def test_integration_step_respects_bound_and_frame_length():
    substeps, dt = integration_step(FAST, 0.25)
    assert dt <= stability_bound(FAST, 0.25)
    assert dt <= 0.05
    assert substeps * dt * FAST.time_scale_ms == pytest.approx(1.0)


def test_resting_grid_stays_at_rest():
    grid = TissueGrid.resting(GridSpec(nx=16, ny=16, dx_mm=0.25))
    _, dt = integration_step(FAST, grid.dx_mm)
    for i in range(1000):
        grid = step(grid, FAST, dt, step_index=i)
    assert np.abs(grid.u).max() < 1e-9
    assert np.abs(grid.w).max() < 1e-9


def test_step_rejects_unstable_dt():
    grid = TissueGrid.resting(GridSpec(nx=16, ny=16, dx_mm=0.25))
    with pytest.raises(StabilityError):
        step(grid, FAST, 2.0 * stability_bound(FAST, 0.25))


def test_step_reports_non_finite_cell():
    grid = TissueGrid.resting(GridSpec(nx=16, ny=16, dx_mm=0.25))
    grid.u[3, 4] = np.nan
    with pytest.raises(NonFiniteFieldError) as excinfo:
        step(grid, FAST, 0.01, step_index=17)
    assert excinfo.value.step_index == 17
    row, col = excinfo.value.cell
    assert abs(row - 3) + abs(col - 4) <= 1


def test_tissue_grid_validation():
    with pytest.raises(ValueError):
        TissueGrid.resting(GridSpec(nx=16, ny=16, dx_mm=0.25), diffusion_map=np.full((16, 16), 1.5))


def test_heterogeneity_is_seeded_and_bounded():
    a = make_heterogeneity(3, 6, 0.6, (64, 64))
    b = make_heterogeneity(3, 6, 0.6, (64, 64))
    c = make_heterogeneity(4, 6, 0.6, (64, 64))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.min() >= 0.4 - 1e-12
    assert a.max() <= 1.0
    assert a.min() < 0.9


def test_heterogeneity_zero_severity_is_uniform():
    assert np.array_equal(make_heterogeneity(1, 8, 0.0, (32, 32)), np.ones((32, 32)))
    with pytest.raises(ValueError):
        make_heterogeneity(1, 8, 1.5, (32, 32))


def test_protocol_onsets_must_not_decrease():
    region = RegionSpec(row0=0, row1=4, col0=0, col1=4)
    events = [
        StimulusEvent(onset_ms=50, duration_ms=2, region=region, amplitude=1.0, kind="s1"),
        StimulusEvent(onset_ms=10, duration_ms=2, region=region, amplitude=1.0, kind="s2"),
    ]
    with pytest.raises(ValidationError):
        StimulusProtocol(name="bad", events=events)


def test_stimulus_current_is_active_only_during_pulse():
    proto = plane_wave_protocol(GridSpec(nx=16, ny=16), FAST)
    assert proto.current(0.0, (16, 16)) is None
    active = proto.current(6.0, (16, 16))
    assert active[:, :3].min() > 0
    assert active[:, 3:].max() == 0


def test_plane_wave_activates_columns_in_order():
    grid = GridSpec(nx=64, ny=16, dx_mm=0.25)
    episode = run_episode(plane_wave_protocol(grid, FAST), FAST, grid, seed=1, duration_ms=500)
    middle = episode.vm.frames[:, 8, :]
    crossed = middle > 0.5
    assert crossed.any(axis=0).all()
    first = np.argmax(crossed, axis=0)
    assert np.all(np.diff(first[3:]) >= 0)
    assert first[-1] > first[3]
    assert episode.label == "sinus"
    assert episode.vm.frames.dtype == np.float32
    assert 0.0 <= episode.vm.frames.min() and episode.vm.frames.max() <= 1.0


def test_run_episode_is_deterministic():
    grid = GridSpec(nx=16, ny=16, dx_mm=0.25)
    proto = plane_wave_protocol(grid, FAST)
    a = run_episode(proto, FAST, grid, seed=5, duration_ms=500)
    b = run_episode(proto, FAST, grid, seed=5, duration_ms=500)
    assert a.id == b.id
    assert np.array_equal(a.vm.frames, b.vm.frames)


def test_run_episode_rejects_short_durations():
    grid = GridSpec(nx=16, ny=16, dx_mm=0.25)
    with pytest.raises(ValueError):
        run_episode(plane_wave_protocol(grid, FAST), FAST, grid, seed=0, duration_ms=100)


def test_episode_ids_and_seeds_are_stable():
    assert episode_id(7, 0) == episode_id(7, 0)
    assert episode_id(7, 0) != episode_id(7, 1)
    assert len(episode_id(7, 0)) == 8
    assert episode_seed(7, 3) == episode_seed(7, 3)
    assert episode_seed(7, 3) != episode_seed(8, 3)


def test_s1s2_places_s2_after_s1_wake():
    grid = GridSpec(nx=128, ny=128, dx_mm=0.25)
    proto = s1s2_protocol(grid, FAST, orientation=1)
    s1, s2 = proto.events
    assert s1.kind == "s1" and s2.kind == "s2"
    assert s2.onset_ms > s1.onset_ms
    assert s1.region.row1 == 3


def test_fibrillation_protocol_is_seeded():
    grid = GridSpec(nx=64, ny=64, dx_mm=0.5)
    a = build_protocol("fibrillation", grid, FAST, seed=11)
    b = build_protocol("fibrillation", grid, FAST, seed=11)
    assert a == b
    with pytest.raises(ValueError):
        build_protocol("sinus", grid, FAST, seed=11)


def _activation_times(frames: np.ndarray, level: float = 0.5) -> np.ndarray:
    """First upward level crossing per cell, sub-frame interpolated; NaN where none."""
    before, after = frames[:-1], frames[1:]
    crossing = (before < level) & (after >= level)
    first = np.argmax(crossing, axis=0)
    v0 = np.take_along_axis(before, first[None], axis=0)[0]
    v1 = np.take_along_axis(after, first[None], axis=0)[0]
    times = first + (level - v0) / (v1 - v0)
    return np.where(crossing.any(axis=0), times, np.nan)


def _plane_wave_speeds(params: ModelParams, duration_ms: int = 600) -> tuple[float, float]:
    grid = GridSpec(nx=96, ny=16, dx_mm=0.25)
    episode = run_episode(plane_wave_protocol(grid, params), params, grid, seed=0, duration_ms=duration_ms)
    times = _activation_times(episode.vm.frames.astype(np.float64)[:, 8, :])
    near = 32 * grid.dx_mm / (times[48] - times[16])
    far = 31 * grid.dx_mm / (times[79] - times[48])
    return near, far


def test_plane_wave_speed_is_constant_across_the_central_band():
    near, far = _plane_wave_speeds(FAST)
    assert near > 0 and far > 0
    assert abs(near - far) / (0.5 * (near + far)) < 0.05


def test_plane_wave_speed_rises_with_diffusivity():
    speeds = [np.mean(_plane_wave_speeds(ModelParams(time_scale_ms=5.0, d0=d0))) for d0 in (0.05, 0.1, 0.2)]
    assert speeds[0] < speeds[1] < speeds[2]


def test_unstimulated_episode_stays_at_rest():
    grid = GridSpec(nx=16, ny=16, dx_mm=0.25)
    episode = run_episode(StimulusProtocol(name="none"), FAST, grid, seed=2, duration_ms=500)
    assert np.abs(episode.vm.frames).max() < 1e-9
    assert episode.label == "sinus"
    assert episode.flags == []


def _mean_arrival(diffusion_map: np.ndarray | None, grid: GridSpec, duration_ms: int) -> float:
    episode = run_episode(
        plane_wave_protocol(grid, FAST), FAST, grid, seed=0, duration_ms=duration_ms, diffusion_map=diffusion_map
    )
    times = _activation_times(episode.vm.frames.astype(np.float64))
    return float(np.where(np.isnan(times), duration_ms, times).mean())


def test_fibrotic_patches_slow_the_crossing():
    grid = GridSpec(nx=64, ny=64, dx_mm=0.5)
    patches = make_heterogeneity(9, 8, 0.9, grid.shape)
    uniform = _mean_arrival(None, grid, 900)
    fibrotic = _mean_arrival(patches, grid, 900)
    assert fibrotic > uniform + 5.0


def _largest_neighbour_jump(times: np.ndarray, horizon_ms: float) -> float:
    # cells that never activate count as blocked until the end of the episode
    filled = np.where(np.isnan(times), horizon_ms, times)
    jumps = [np.abs(np.diff(filled, axis=0)), np.abs(np.diff(filled, axis=1))]
    return float(max(jump.max() for jump in jumps))


def test_burst_pacing_over_fibrosis_blocks_conduction():
    grid = GridSpec(nx=64, ny=64, dx_mm=0.5)
    duration = 1000

    def run(diffusion_map):
        proto = burst_protocol(grid, FAST, cycle_ms=90.0, beats=8, rng=np.random.default_rng(4))
        episode = run_episode(proto, FAST, grid, seed=4, duration_ms=duration, diffusion_map=diffusion_map)
        return _activation_times(episode.vm.frames.astype(np.float64))

    uniform = run(None)
    fibrotic = run(make_heterogeneity(4, 8, 0.9, grid.shape))
    # adjacent cells are 0.5 mm apart
    assert np.isfinite(uniform).all()
    assert _largest_neighbour_jump(uniform, duration) < 30.0
    assert _largest_neighbour_jump(fibrotic, duration) > 30.0


def test_s1s2_spiral_persists():
    grid = GridSpec(nx=128, ny=128, dx_mm=0.25)
    episode = run_episode(s1s2_protocol(grid, FAST), FAST, grid, seed=0, duration_ms=1000)
    track = dominant_track(analyze_movie(episode.vm).tracks)
    assert track is not None
    assert track.lifetime_frames >= 300


def test_state_outside_bounds_is_clamped_and_counted():
    grid = TissueGrid.resting(GridSpec(nx=16, ny=16, dx_mm=0.25))
    grid.u[5, 5] = 3.0
    grid.w[2, 2] = -0.5
    _, dt = integration_step(FAST, grid.dx_mm)
    after = step(grid, FAST, dt)
    assert after.clamped >= 2
    assert U_BOUNDS[0] <= after.u.min() and after.u.max() <= U_BOUNDS[1]
    assert after.w.min() >= 0.0
    assert step(TissueGrid.resting(GridSpec(nx=16, ny=16)), FAST, dt).clamped == 0


def test_short_reentry_episode_is_unclassifiable():
    grid = GridSpec(nx=32, ny=32, dx_mm=0.5)
    episode = run_episode(s1s2_protocol(grid, FAST), FAST, grid, seed=1, duration_ms=600)
    assert episode.label == "unclassifiable"
    assert "unclassifiable" in episode.flags
