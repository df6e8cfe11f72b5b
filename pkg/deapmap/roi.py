from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from deapmap.sensing import ElectrodeArray, grid_to_tissue, tissue_to_grid
from deapmap.movie import VmMovie

ROI_PAD = 0.10
CHUNK_FRAMES = 256


@dataclass(frozen=True)
class FootprintRoi:
    """Axis-aligned square around the catheter footprint, sampled on a G x G lattice."""

    center_mm: tuple[float, float]
    radius_mm: float
    size: int
    tissue_shape: tuple[int, int]
    dx_mm: float

    @classmethod
    def for_array(cls, array: ElectrodeArray, tissue_shape: tuple[int, int], dx_mm: float, size: int) -> "FootprintRoi":
        return cls(
            center_mm=(array.pose.tx_mm, array.pose.ty_mm),
            radius_mm=array.footprint_radius_mm,
            size=size,
            tissue_shape=tuple(tissue_shape),
            dx_mm=dx_mm,
        )

    @property
    def side_mm(self) -> float:
        return 2.0 * self.radius_mm * (1.0 + ROI_PAD)

    @property
    def pitch_mm(self) -> float:
        return self.side_mm / self.size

    def _axis_mm(self) -> tuple[np.ndarray, np.ndarray]:
        offsets = (np.arange(self.size) + 0.5) * self.pitch_mm - self.side_mm / 2.0
        return self.center_mm[0] + offsets, self.center_mm[1] + offsets

    def sample_points_mm(self) -> np.ndarray:
        xs, ys = self._axis_mm()
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    @property
    def mask(self) -> np.ndarray:
        points = self.sample_points_mm()
        dist = np.hypot(points[:, 0] - self.center_mm[0], points[:, 1] - self.center_mm[1])
        return (dist <= self.radius_mm).reshape(self.size, self.size)

    def tissue_mask(self) -> np.ndarray:
        ny, nx = self.tissue_shape
        rows, cols = np.mgrid[0:ny, 0:nx]
        points = grid_to_tissue(np.column_stack([rows.ravel(), cols.ravel()]), self.tissue_shape, self.dx_mm)
        dist = np.hypot(points[:, 0] - self.center_mm[0], points[:, 1] - self.center_mm[1])
        return (dist <= self.radius_mm).reshape(ny, nx)

    def sample(self, frames: np.ndarray) -> np.ndarray:
        """Bilinear resample of tissue-grid frames (T, ny, nx) onto the ROI (T, G, G)."""
        coords = tissue_to_grid(self.sample_points_mm(), self.tissue_shape, self.dx_mm)
        return _resample(frames, coords, (self.size, self.size))

    def to_tissue(self, roi_frames: np.ndarray) -> np.ndarray:
        """Bilinear resample ROI frames back onto the tissue grid; NaN outside the footprint."""
        ny, nx = self.tissue_shape
        inside = self.tissue_mask()
        cells = np.argwhere(inside)
        points = grid_to_tissue(cells, self.tissue_shape, self.dx_mm)
        x0 = self.center_mm[0] - self.side_mm / 2.0
        y0 = self.center_mm[1] - self.side_mm / 2.0
        coords = np.column_stack([(points[:, 1] - y0) / self.pitch_mm - 0.5, (points[:, 0] - x0) / self.pitch_mm - 0.5])
        values = _resample(_fill_from_disc(roi_frames, self.mask), coords, (len(cells),))
        out = np.full((roi_frames.shape[0], ny, nx), np.nan)
        out[:, cells[:, 0], cells[:, 1]] = values.reshape(roi_frames.shape[0], -1)
        return out

    def movie(self, vm: VmMovie) -> VmMovie:
        """The ROI view of a tissue-grid movie, masked to the footprint disc."""
        frames = self.sample(vm.filled(0.0))
        frames[:, ~self.mask] = np.nan
        return VmMovie(frames=frames, dt_ms=vm.dt_ms, dx_mm=self.pitch_mm, t0_ms=vm.t0_ms, mask=self.mask)


def _fill_from_disc(roi_frames: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Copy every cell outside the disc from its nearest inside cell."""
    if mask.all():
        return np.asarray(roi_frames, dtype=np.float64)
    _, (rows, cols) = ndimage.distance_transform_edt(~mask, return_indices=True)
    return np.asarray(roi_frames, dtype=np.float64)[:, rows, cols]


def _resample(frames: np.ndarray, coords: np.ndarray, out_shape: tuple[int, ...]) -> np.ndarray:
    n_frames = frames.shape[0]
    n_points = len(coords)
    out = np.empty((n_frames, n_points))
    for start in range(0, n_frames, CHUNK_FRAMES):
        chunk = np.asarray(frames[start : start + CHUNK_FRAMES], dtype=np.float64)
        for offset, frame in enumerate(chunk):
            out[start + offset] = ndimage.map_coordinates(frame, coords.T, order=1, mode="nearest")
    return out.reshape((n_frames,) + out_shape)
