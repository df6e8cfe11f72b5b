import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import interpolate, signal, spatial

from deapmap.errors import InsufficientSupportError
from deapmap.movie import VmMovie
from deapmap.roi import FootprintRoi
from deapmap.sensing import EgmRecording

LOGGER = logging.getLogger(__name__)

METHOD_TAG = "unipolar-max-negative-slope"
MIN_TRACE_MS = 200
SILENT_GAP_MS = 500.0
BEAT_SEGMENT_MS = 250
MIN_SUPPORT = 4


@dataclass
class ActivationField:
    """Per-electrode activation times and the geometry needed to interpolate them."""

    times_ms: list[np.ndarray]
    sites_mm: np.ndarray
    blanking_ms: float = 50.0
    threshold_fraction: float = 0.4
    silent_channels: list[int] = field(default_factory=list)
    method: str = METHOD_TAG

    @property
    def n_electrodes(self) -> int:
        return len(self.times_ms)


@dataclass(frozen=True)
class ActionPotentialTemplate:
    """Stereotyped AP: 1 ms linear upstroke, exponential repolarisation to APD90."""

    apd90_ms: float = 120.0
    upstroke_ms: float = 1.0

    def __call__(self, elapsed_ms: np.ndarray) -> np.ndarray:
        elapsed = np.asarray(elapsed_ms, dtype=np.float64)
        tau = self.apd90_ms / np.log(10.0)
        with np.errstate(invalid="ignore", over="ignore"):
            decay = np.exp(-np.clip(elapsed, 0.0, None) / tau)
            rise = np.clip(1.0 + elapsed / self.upstroke_ms, 0.0, 1.0)
        out = np.where(elapsed >= 0.0, decay, rise)
        return np.where(np.isfinite(elapsed), out, 0.0)


def _robust_max(depths: np.ndarray, n_samples: int) -> float:
    # median of the K deepest downslopes, K ~ one per expected beat
    if depths.size == 0:
        return 0.0
    k = max(1, n_samples // BEAT_SEGMENT_MS)
    deepest = np.sort(depths)[::-1][:k]
    return float(np.median(deepest))


def detect_channel(
    trace: np.ndarray, fs_hz: float = 1000.0, blanking_ms: float = 50.0, threshold_fraction: float = 0.4
) -> np.ndarray:
    """Activation times (ms) at the steepest negative slopes of one unipolar trace."""
    slope = np.gradient(np.asarray(trace, dtype=np.float64))
    minima, _ = signal.find_peaks(-slope)
    depths = -slope[minima]
    threshold = threshold_fraction * _robust_max(depths[depths > 0], len(trace))
    if threshold <= 0.0:
        return np.empty(0)
    distance = max(1, int(np.ceil(blanking_ms * fs_hz / 1000.0)))
    peaks, _ = signal.find_peaks(-slope, height=threshold, distance=distance)
    return peaks * (1000.0 / fs_hz)


def _is_silent(times_ms: np.ndarray, duration_ms: float) -> bool:
    if times_ms.size == 0:
        return True
    edges = np.concatenate([[0.0], times_ms, [duration_ms]])
    return bool(np.diff(edges).max() > SILENT_GAP_MS)


def detect_activations(
    rec: EgmRecording, sites_mm: np.ndarray, blanking_ms: float = 50.0, threshold_fraction: float = 0.4
) -> ActivationField:
    duration_ms = rec.n_samples * 1000.0 / rec.fs_hz
    if duration_ms < MIN_TRACE_MS:
        raise ValueError(f"trace must span at least {MIN_TRACE_MS} ms, got {duration_ms:g}")
    times = []
    silent = []
    for channel, trace in enumerate(rec.traces):
        detected = detect_channel(trace, rec.fs_hz, blanking_ms, threshold_fraction)
        times.append(detected)
        if _is_silent(detected, duration_ms):
            silent.append(channel)
    if silent:
        LOGGER.warning(
            "Silent channels",
            extra={"stage": "baseline", "recording": rec.id, "channels": silent},
        )
    return ActivationField(
        times_ms=times,
        sites_mm=np.asarray(sites_mm, dtype=np.float64),
        blanking_ms=blanking_ms,
        threshold_fraction=threshold_fraction,
        silent_channels=silent,
    )


class ElapsedInterpolator:
    """Thin-plate spline inside the electrode hull, nearest electrode outside it.

    The spline is linear in the data, so each electrode subset is solved once as
    an evaluation matrix and reused for every frame.
    """

    def __init__(self, sites_mm: np.ndarray, points_mm: np.ndarray):
        self.sites_mm = np.asarray(sites_mm, dtype=np.float64)
        self.points_mm = np.asarray(points_mm, dtype=np.float64)
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    def _matrix(self, subset: tuple[int, ...]) -> np.ndarray:
        if subset not in self._cache:
            sites = self.sites_mm[list(subset)]
            n = len(sites)
            matrix = np.zeros((len(self.points_mm), n))
            try:
                inside = spatial.Delaunay(sites).find_simplex(self.points_mm) >= 0
                tps = interpolate.RBFInterpolator(
                    sites, np.eye(n), kernel="thin_plate_spline", smoothing=0.0, degree=1
                )
            except (np.linalg.LinAlgError, ValueError, RuntimeError):
                # collinear support (e.g. a single spine): no hull, nearest electrode everywhere
                inside = np.zeros(len(self.points_mm), dtype=bool)
            if inside.any():
                matrix[inside] = tps(self.points_mm[inside])
            if (~inside).any():
                _, nearest = spatial.cKDTree(sites).query(self.points_mm[~inside])
                matrix[np.flatnonzero(~inside), nearest] = 1.0
            self._cache[subset] = matrix
        return self._cache[subset]

    def __call__(self, subset: tuple[int, ...], values: np.ndarray) -> np.ndarray:
        return self._matrix(subset) @ np.asarray(values, dtype=np.float64)


def _last_activation(times_ms: np.ndarray, t_ms: float) -> float | None:
    index = np.searchsorted(times_ms, t_ms, side="right") - 1
    return float(times_ms[index]) if index >= 0 else None


def interpolate_elapsed(
    field: ActivationField,
    roi: FootprintRoi,
    t_ms: float,
    interpolator: ElapsedInterpolator | None = None,
) -> np.ndarray:
    """Elapsed time since the last activation, interpolated over the footprint disc."""
    subset = []
    values = []
    for index, times in enumerate(field.times_ms):
        last = _last_activation(times, t_ms)
        if last is not None:
            subset.append(index)
            values.append(t_ms - last)
    if len(subset) < MIN_SUPPORT:
        raise InsufficientSupportError(
            f"only {len(subset)} electrodes activated before t={t_ms:g} ms, need {MIN_SUPPORT}"
        )
    mask = roi.mask
    if interpolator is None:
        interpolator = ElapsedInterpolator(field.sites_mm, roi.sample_points_mm()[mask.ravel()])
    out = np.full(mask.shape, np.nan)
    out[mask] = np.maximum(interpolator(tuple(subset), np.array(values)), 0.0)
    return out


def elapsed_movie(field: ActivationField, roi: FootprintRoi, times_ms: np.ndarray) -> np.ndarray:
    """Elapsed-time maps for each requested time; frames without support stay NaN."""
    interpolator = ElapsedInterpolator(field.sites_mm, roi.sample_points_mm()[roi.mask.ravel()])
    maps = np.full((len(times_ms), roi.size, roi.size), np.nan)
    for i, t_ms in enumerate(times_ms):
        try:
            maps[i] = interpolate_elapsed(field, roi, float(t_ms), interpolator)
        except InsufficientSupportError:
            continue
    return maps


def activation_movie(
    elapsed_maps: np.ndarray,
    template: ActionPotentialTemplate | None = None,
    t0_ms: float = 0.0,
    dx_mm: float = 1.0,
    mask: np.ndarray | None = None,
) -> VmMovie:
    """Pseudo-Vm = template(elapsed); undefined cells read 0."""
    template = template or ActionPotentialTemplate()
    frames = template(elapsed_maps)
    if mask is not None:
        frames = np.where(mask[None], frames, np.nan)
    return VmMovie(frames=frames, dt_ms=1.0, dx_mm=dx_mm, t0_ms=t0_ms, mask=mask)


def baseline_movie(
    rec: EgmRecording,
    sites_mm: np.ndarray,
    roi: FootprintRoi,
    blanking_ms: float = 50.0,
    threshold_fraction: float = 0.4,
    apd90_ms: float = 120.0,
) -> tuple[ActivationField, np.ndarray, VmMovie]:
    """Detection -> elapsed-time maps -> pseudo-Vm on the footprint ROI, one frame per sample."""
    field = detect_activations(rec, sites_mm, blanking_ms, threshold_fraction)
    times = np.arange(rec.n_samples) * (1000.0 / rec.fs_hz)
    maps = elapsed_movie(field, roi, times)
    movie = activation_movie(maps, ActionPotentialTemplate(apd90_ms=apd90_ms), 0.0, roi.pitch_mm, roi.mask)
    return field, maps, movie
