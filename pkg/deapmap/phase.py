import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import ndimage, signal

from deapmap.errors import PhaseInputError
from deapmap.movie import VmMovie

LOGGER = logging.getLogger(__name__)

MIN_PHASE_FRAMES = 512
MIN_FILTER_FRAMES = 1000
MIN_ISOCHRONE_WINDOW_MS = 50.0
TACHYCARDIA_CL_MS = 200.0


@dataclass
class PhaseMovie:
    """Analytic-signal phase per cell in (-pi, pi]; NaN outside ``mask``."""

    theta: np.ndarray
    mask: np.ndarray
    valid: tuple[int, int]
    dt_ms: float = 1.0
    t0_ms: float = 0.0


@dataclass
class PviMap:
    values: np.ndarray
    radius_cells: int
    window: tuple[int, int]

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.values)


@dataclass
class PsTrack:
    chirality: int
    frames: list[int] = field(default_factory=list)
    positions: list[tuple[float, float]] = field(default_factory=list)

    @property
    def lifetime_frames(self) -> int:
        return self.frames[-1] - self.frames[0] + 1

    @property
    def mean_position(self) -> tuple[float, float]:
        rows, cols = zip(*self.positions)
        return float(np.mean(rows)), float(np.mean(cols))


@dataclass
class ChargeEvent:
    frame: int
    total_charge: int
    kind: Literal["boundary", "pair"]


@dataclass
class IsochronalMap:
    activation_ms: np.ndarray
    bands: np.ndarray
    step_ms: float
    window: tuple[float, float]
    level: float = 0.5


@dataclass
class CycleLengthResult:
    label: Literal["fibrillation", "tachycardia", "unclassifiable"]
    cl_ms: float | None


@dataclass
class PhaseProducts:
    phase: PhaseMovie
    pvi: PviMap
    tracks: list[PsTrack]
    isochrones: IsochronalMap | None
    mask: np.ndarray


def wrap(angles: np.ndarray) -> np.ndarray:
    """Wrap angle differences into [-pi, pi)."""
    return (angles + np.pi) % (2.0 * np.pi) - np.pi


def disc_kernel(radius: int) -> np.ndarray:
    offsets = np.arange(-radius, radius + 1)
    rows, cols = np.meshgrid(offsets, offsets, indexing="ij")
    return (rows**2 + cols**2 <= radius**2).astype(np.float64)


def compute_phase(vm: VmMovie, mask: np.ndarray | None = None, edge_ms: float = 50.0) -> PhaseMovie:
    """theta = atan2(H[v], v) on the mean-subtracted trace of every cell."""
    if vm.n_frames < MIN_PHASE_FRAMES:
        raise PhaseInputError(f"phase needs at least {MIN_PHASE_FRAMES} frames, got {vm.n_frames}")
    keep = vm.mask.copy()
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    traces = vm.frames[:, keep].astype(np.float64)
    centered = traces - traces.mean(axis=0)
    live = centered.var(axis=0) > 1e-12
    if not live.all():
        LOGGER.debug("Dropping %d constant cells from the phase mask", int((~live).sum()))
    cells = np.argwhere(keep)[live]
    keep = np.zeros_like(keep)
    keep[cells[:, 0], cells[:, 1]] = True

    theta = np.full(vm.frames.shape, np.nan)
    if live.any():
        analytic = signal.hilbert(centered[:, live], axis=0)
        angles = np.arctan2(analytic.imag, centered[:, live])
        angles[angles <= -np.pi] = np.pi
        theta[:, cells[:, 0], cells[:, 1]] = angles
    edge = int(round(edge_ms / vm.dt_ms))
    return PhaseMovie(
        theta=theta,
        mask=keep,
        valid=(edge, vm.n_frames - edge),
        dt_ms=vm.dt_ms,
        t0_ms=vm.t0_ms,
    )


def phase_variance_index(
    phase: PhaseMovie, radius_cells: int = 3, window: tuple[int, int] | None = None
) -> PviMap:
    """Time-averaged circular variance of phase over a disc neighbourhood."""
    t0, t1 = window if window is not None else phase.valid
    if t1 <= t0:
        raise PhaseInputError(f"empty analysis window [{t0}, {t1})")
    kernel = disc_kernel(radius_cells)
    mask = phase.mask.astype(np.float64)
    count = ndimage.correlate(mask, kernel, mode="constant", cval=0.0)
    theta = np.nan_to_num(phase.theta[t0:t1], nan=0.0)
    real = np.cos(theta) * mask
    imag = np.sin(theta) * mask
    kernel3 = kernel[None, :, :]
    sum_re = ndimage.correlate(real, kernel3, mode="constant", cval=0.0)
    sum_im = ndimage.correlate(imag, kernel3, mode="constant", cval=0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        resultant = np.hypot(sum_re, sum_im) / count
    pv = np.clip(1.0 - resultant, 0.0, 1.0).mean(axis=0)
    pv[(count == 0) | ~phase.mask] = np.nan
    return PviMap(values=pv, radius_cells=radius_cells, window=(t0, t1))


def frame_singularities(theta: np.ndarray, mask: np.ndarray) -> list[tuple[float, float, int]]:
    """Plaquettes whose wrapped phase differences sum to +-2 pi."""
    d1 = wrap(theta[:-1, 1:] - theta[:-1, :-1])
    d2 = wrap(theta[1:, 1:] - theta[:-1, 1:])
    d3 = wrap(theta[1:, :-1] - theta[1:, 1:])
    d4 = wrap(theta[:-1, :-1] - theta[1:, :-1])
    charge = np.rint((d1 + d2 + d3 + d4) / (2.0 * np.pi))
    inside = mask[:-1, :-1] & mask[:-1, 1:] & mask[1:, :-1] & mask[1:, 1:]
    hits = np.argwhere((charge != 0) & inside)
    return [(row + 0.5, col + 0.5, int(np.sign(charge[row, col]))) for row, col in hits]


def _link(
    detections: list[list[tuple[float, float, int]]],
    first_frame: int,
    max_gap: int,
    max_jump: float,
) -> list[PsTrack]:
    tracks: list[PsTrack] = []
    for offset, points in enumerate(detections):
        frame = first_frame + offset
        active = [i for i, track in enumerate(tracks) if frame - track.frames[-1] <= max_gap + 1]
        pairs = []
        for ti in active:
            track = tracks[ti]
            last_row, last_col = track.positions[-1]
            for di, (row, col, chirality) in enumerate(points):
                if chirality != track.chirality:
                    continue
                dist = float(np.hypot(row - last_row, col - last_col))
                if dist <= max_jump:
                    pairs.append((dist, ti, di))
        pairs.sort()
        used_tracks: set[int] = set()
        used_points: set[int] = set()
        for _, ti, di in pairs:
            if ti in used_tracks or di in used_points:
                continue
            row, col, _ = points[di]
            tracks[ti].frames.append(frame)
            tracks[ti].positions.append((row, col))
            used_tracks.add(ti)
            used_points.add(di)
        for di, (row, col, chirality) in enumerate(points):
            if di not in used_points:
                tracks.append(PsTrack(chirality=chirality, frames=[frame], positions=[(row, col)]))
    return tracks


def find_singularities(phase: PhaseMovie, max_gap: int = 2, max_jump: float = 3.0) -> list[PsTrack]:
    t0, t1 = phase.valid
    detections = [frame_singularities(phase.theta[t], phase.mask) for t in range(t0, t1)]
    return _link(detections, t0, max_gap, max_jump)


def dominant_track(tracks: list[PsTrack]) -> PsTrack | None:
    if not tracks:
        return None
    return max(tracks, key=lambda track: (track.lifetime_frames, -track.frames[0]))


def charge_events(phase: PhaseMovie) -> tuple[list[int], list[ChargeEvent]]:
    """Per-frame total topological charge plus boundary / pair bookkeeping."""
    t0, t1 = phase.valid
    totals: list[int] = []
    events: list[ChargeEvent] = []
    previous = None
    for t in range(t0, t1):
        points = frame_singularities(phase.theta[t], phase.mask)
        positive = sum(1 for *_, c in points if c > 0)
        negative = len(points) - positive
        total = positive - negative
        totals.append(total)
        if previous is not None:
            d_pos, d_neg = positive - previous[0], negative - previous[1]
            if total != previous[0] - previous[1]:
                events.append(ChargeEvent(frame=t, total_charge=total, kind="boundary"))
            elif d_pos != 0 and d_pos == d_neg:
                events.append(ChargeEvent(frame=t, total_charge=total, kind="pair"))
        previous = (positive, negative)
    for event in events:
        LOGGER.debug("Charge event %s at frame %d (total %d)", event.kind, event.frame, event.total_charge)
    return totals, events


def isochronal_map(
    vm: VmMovie, window: tuple[float, float], step_ms: float = 10.0, level: float = 0.5
) -> IsochronalMap:
    t0_ms, t1_ms = window
    if t1_ms - t0_ms < MIN_ISOCHRONE_WINDOW_MS:
        raise PhaseInputError(f"isochrone window must span at least {MIN_ISOCHRONE_WINDOW_MS:g} ms")
    sub = vm.window(t0_ms, t1_ms)
    if sub.n_frames < 2:
        raise PhaseInputError(
            f"isochrone window [{t0_ms:g}, {t1_ms:g}) ms holds {sub.n_frames} frames of the movie"
        )
    frames =np.nan_to_num(sub.frames.astype(np.float64), nan=-np.inf)
    before, after = frames[:-1], frames[1:]
    crossing = (before < level) & (after >= level)
    has = crossing.any(axis=0) & vm.mask
    first = np.argmax(crossing, axis=0)
    v0 = np.take_along_axis(before, first[None], axis=0)[0]
    v1 = np.take_along_axis(after, first[None], axis=0)[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(has, (level - v0) / (v1 - v0), 0.0)
    activation = np.where(has, sub.t0_ms + (first + frac) * sub.dt_ms, np.nan)
    bands = np.full(activation.shape, -1, dtype=np.int64)
    bands[has] = np.floor((activation[has] - t0_ms) / step_ms).astype(np.int64)
    return IsochronalMap(
        activation_ms=activation, bands=bands, step_ms=step_ms, window=(t0_ms, t1_ms), level=level
    )


def cycle_length_filter(
    vm: VmMovie, threshold_ms: float = TACHYCARDIA_CL_MS, min_peak: float = 0.3
) -> CycleLengthResult:
    """Classify by the first prominent autocorrelation peak of the mean signal."""
    if vm.n_frames < MIN_FILTER_FRAMES:
        raise PhaseInputError(f"cycle length needs at least {MIN_FILTER_FRAMES} frames, got {vm.n_frames}")
    if not vm.mask.any():
        return CycleLengthResult(label="unclassifiable", cl_ms=None)
    mean_signal = vm.frames[:, vm.mask].astype(np.float64).mean(axis=1)
    mean_signal -= mean_signal.mean()
    energy = float(np.dot(mean_signal, mean_signal))
    if energy <= 1e-12 * mean_signal.size:
        return CycleLengthResult(label="unclassifiable", cl_ms=None)
    ac = signal.correlate(mean_signal, mean_signal, mode="full")[mean_signal.size - 1 :] / energy
    peaks, _ = signal.find_peaks(ac, height=min_peak, prominence=0.05)
    if peaks.size == 0:
        return CycleLengthResult(label="unclassifiable", cl_ms=None)
    lag = int(peaks[0])
    offset = 0.0
    if 0 < lag < ac.size - 1:
        y0, y1, y2 = ac[lag - 1], ac[lag], ac[lag + 1]
        denom = y0 - 2.0 * y1 + y2
        if denom < 0:
            offset = 0.5 * (y0 - y2) / denom
    cl_ms = (lag + offset) * vm.dt_ms
    label = "tachycardia" if cl_ms > threshold_ms else "fibrillation"
    return CycleLengthResult(label=label, cl_ms=float(cl_ms))


def analyze_movie(
    vm: VmMovie,
    mask: np.ndarray | None = None,
    radius_cells: int = 3,
    edge_ms: float = 50.0,
    isochrone_window: tuple[float, float] | None = None,
    isochrone_step_ms: float = 10.0,
) -> PhaseProducts:
    phase = compute_phase(vm, mask, edge_ms=edge_ms)
    pvi = phase_variance_index(phase, radius_cells)
    tracks = find_singularities(phase)
    isochrones = None
    if isochrone_window is not None:
        isochrones = isochronal_map(vm, isochrone_window, isochrone_step_ms)
    return PhaseProducts(phase=phase, pvi=pvi, tracks=tracks, isochrones=isochrones, mask=phase.mask)


def lifetime_stats(tracks: list[PsTrack], dt_ms: float = 1.0) -> dict:
    """Count and lifetime summary (ms) of a set of PS tracks."""
    if not tracks:
        return {"n_tracks": 0, "mean_ms": None, "median_ms": None, "max_ms": None}
    lifetimes = np.array([track.lifetime_frames for track in tracks], dtype=np.float64) * dt_ms
    return {
        "n_tracks": len(tracks),
        "mean_ms": float(lifetimes.mean()),
        "median_ms": float(np.median(lifetimes)),
        "max_ms": float(lifetimes.max()),
    }
