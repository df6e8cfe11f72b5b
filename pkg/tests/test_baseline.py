import numpy as np
import pytest

from conftest import biphasic_train, make_recording
from deapmap.baseline import (
    ActionPotentialTemplate,
    ActivationField,
    ElapsedInterpolator,
    activation_movie,
    detect_activations,
    detect_channel,
    interpolate_elapsed,
)
from deapmap.errors import InsufficientSupportError
from deapmap.roi import FootprintRoi
from deapmap.sensing import build_pentagon_array


@pytest.fixture
def pentagon():
    return build_pentagon_array()


@pytest.fixture
def roi(pentagon):
    return FootprintRoi.for_array(pentagon, (128, 128), 0.25, 32)


def test_single_deflection_detected_at_steepest_downslope():
    times = detect_channel(biphasic_train(400, [100]))
    assert len(times) == 1
    assert abs(times[0] - 100) <= 2


def test_periodic_deflections():
    times = detect_channel(biphasic_train(1000, np.arange(75, 1000, 150)))
    assert 6 <= len(times) <= 7
    assert np.all(np.abs(np.diff(times) - 150) <= 2)


def test_blanking_keeps_detections_apart():
    times = detect_channel(biphasic_train(400, [100, 130, 260]), blanking_ms=50)
    assert np.all(np.diff(times) >= 50)
    assert len(times) == 2


def test_time_shift_moves_detections_by_same_amount():
    trace = biphasic_train(600, [120, 330])
    shifted = np.concatenate([np.zeros(17), trace[:-17]])
    assert np.array_equal(detect_channel(shifted), detect_channel(trace) + 17)


def test_flat_channel_is_silent(pentagon):
    traces = np.tile(biphasic_train(600, [100, 300, 500]), (20, 1))
    traces[4] = 0.0
    rec = make_recording("r1", "e1", traces)
    field = detect_activations(rec, pentagon.positions)
    assert field.silent_channels == [4]
    assert field.times_ms[4].size == 0
    assert field.method == "unipolar-max-negative-slope"


def test_detect_activations_needs_200_ms(pentagon):
    rec = make_recording("r1", "e1", np.zeros((20, 150)))
    with pytest.raises(ValueError):
        detect_activations(rec, pentagon.positions)


def test_interpolant_reproduces_constants(pentagon, roi):
    field = ActivationField(times_ms=[np.array([40.0])] * 20, sites_mm=pentagon.positions)
    elapsed = interpolate_elapsed(field, roi, 100.0)
    inside = roi.mask
    assert np.allclose(elapsed[inside], 60.0, atol=1e-6)
    assert np.isnan(elapsed[~inside]).all()


def test_interpolant_is_exact_at_sites(pentagon, rng):
    values = rng.uniform(0, 200, size=20)
    interpolator = ElapsedInterpolator(pentagon.positions, pentagon.positions)
    assert np.allclose(interpolator(tuple(range(20)), values), values, atol=1e-6)


def test_plane_wave_elapsed_gradient_points_along_propagation(pentagon, roi):
    direction = np.deg2rad(30.0)
    unit = np.array([np.cos(direction), np.sin(direction)])
    arrival = 50.0 + pentagon.positions @ unit / 0.5
    field = ActivationField(times_ms=[np.array([t]) for t in arrival], sites_mm=pentagon.positions)
    elapsed = interpolate_elapsed(field, roi, 200.0)
    points = roi.sample_points_mm()[roi.mask.ravel()]
    design = np.column_stack([points, np.ones(len(points))])
    coef, *_ = np.linalg.lstsq(design, elapsed[roi.mask], rcond=None)
    fitted = -coef[:2] / np.linalg.norm(coef[:2])
    angle = np.degrees(np.arccos(np.clip(fitted @ unit, -1, 1)))
    assert angle < 15.0


def test_insufficient_support(pentagon, roi):
    times = [np.array([10.0])] * 3 + [np.array([500.0])] * 17
    field = ActivationField(times_ms=times, sites_mm=pentagon.positions)
    with pytest.raises(InsufficientSupportError):
        interpolate_elapsed(field, roi, 100.0)


def test_collinear_support_falls_back_to_nearest(pentagon, roi):
    # only the first spine (x = 0) has fired
    times = [np.array([10.0])] * 4 + [np.array([500.0])] * 16
    field = ActivationField(times_ms=times, sites_mm=pentagon.positions)
    elapsed = interpolate_elapsed(field, roi, 100.0)
    assert np.allclose(elapsed[roi.mask], 90.0)


def test_template_shape():
    template = ActionPotentialTemplate(apd90_ms=120.0)
    assert template(np.array([0.0]))[0] == pytest.approx(1.0)
    assert template(np.array([120.0]))[0] == pytest.approx(0.1)
    assert template(np.array([600.0, 900.0])).max() <= 0.01
    assert template(np.array([np.nan]))[0] == 0.0
    assert template(np.array([-0.5]))[0] == pytest.approx(0.5)


def test_activation_movie_maps_elapsed_through_template(roi):
    elapsed = np.where(roi.mask, 0.0, np.nan)[None].repeat(3, axis=0)
    movie = activation_movie(elapsed, mask=roi.mask)
    assert np.allclose(movie.frames[:, roi.mask], 1.0)
    assert np.isnan(movie.frames[:, ~roi.mask]).all()
