from dataclasses import dataclass, field

import numpy as np


@dataclass
class VmMovie:
    """Membrane-potential frames on a 2D grid, normalised to [0, 1].

    Cells outside ``mask`` are undefined and stored as NaN.
    """

    frames: np.ndarray
    dt_ms: float = 1.0
    dx_mm: float = 1.0
    t0_ms: float = 0.0
    mask: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if not np.issubdtype(self.frames.dtype, np.floating):
            self.frames = self.frames.astype(np.float64)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be (n_frames, ny, nx), got {self.frames.shape}")
        if self.mask is None:
            self.mask = np.all(np.isfinite(self.frames), axis=0)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    @property
    def times_ms(self) -> np.ndarray:
        return self.t0_ms + self.dt_ms * np.arange(self.n_frames)

    def window(self, t0_ms: float, t1_ms: float) -> "VmMovie":
        """Frames whose timestamps fall in [t0_ms, t1_ms)."""
        times = self.times_ms
        keep = (times >= t0_ms) & (times < t1_ms)
        first = int(np.argmax(keep)) if keep.any() else 0
        return VmMovie(
            frames=self.frames[keep],
            dt_ms=self.dt_ms,
            dx_mm=self.dx_mm,
            t0_ms=float(times[first]) if keep.any() else t0_ms,
            mask=self.mask,
        )

    def filled(self, value: float = 0.0) -> np.ndarray:
        return np.where(np.isfinite(self.frames), self.frames, value)
