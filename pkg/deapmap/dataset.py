import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel

from deapmap.baseline import detect_activations
from deapmap.errors import InsufficientEpisodesError
from deapmap.roi import FootprintRoi
from deapmap.sensing import EgmRecording, build_array
from deapmap.tissue import Episode

LOGGER = logging.getLogger(__name__)

SplitName = Literal["train", "val", "test"]
HOLDOUT_FRACTION = 0.15
MAX_SILENT_FRACTION = 0.5


class DatasetSplit(BaseModel):
    """Episode-level assignment; every episode lives in exactly one split."""

    split_seed: int
    train: list[str]
    val: list[str]
    test: list[str]
    train_stride_ms: int = 4
    eval_stride_ms: int = 1
    excluded: dict[str, str] = {}

    def ids(self, split: SplitName) -> list[str]:
        return getattr(self, split)

    def stride(self, split: SplitName) -> int:
        return self.train_stride_ms if split == "train" else self.eval_stride_ms


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, n_channels: int) -> "ChannelStats":
        return cls(mean=np.zeros(n_channels), std=np.ones(n_channels))

    @classmethod
    def from_traces(cls, traces: list[np.ndarray]) -> "ChannelStats":
        stacked = np.concatenate(traces, axis=1)
        std = stacked.std(axis=1)
        return cls(mean=stacked.mean(axis=1), std=np.where(std > 1e-12, std, 1.0))

    def apply(self, traces: np.ndarray) -> np.ndarray:
        return (traces - self.mean[:, None]) / self.std[:, None]


@dataclass
class RecordingWindows:
    """Lazy windows over one recording plus the ROI targets at each window centre."""

    recording_id: str
    episode_id: str
    inputs: np.ndarray
    targets: np.ndarray
    starts: np.ndarray
    window: int

    def __len__(self) -> int:
        return len(self.starts)

    def sample(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        views = sliding_window_view(self.inputs, self.window, axis=1)
        x = views[:, self.starts[indices], :].transpose(1, 0, 2)
        return np.ascontiguousarray(x), self.targets[indices]


@dataclass
class WindowDataset:
    split: DatasetSplit
    stats: ChannelStats
    window: int
    grid: int
    parts: dict[str, list[RecordingWindows]] = field(default_factory=dict)

    def n_windows(self, split: SplitName) -> int:
        return sum(len(part) for part in self.parts.get(split, []))

    def index(self, split: SplitName) -> np.ndarray:
        """(part, window) pairs in deterministic recording order."""
        rows = [
            np.column_stack([np.full(len(part), i), np.arange(len(part))])
            for i, part in enumerate(self.parts.get(split, []))
        ]
        return np.concatenate(rows) if rows else np.empty((0, 2), dtype=np.int64)

    def gather(self, split: SplitName, pairs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        parts = self.parts[split]
        xs = np.empty((len(pairs), parts[0].inputs.shape[0], self.window))
        ys = np.empty((len(pairs), self.grid, self.grid))
        for i in np.unique(pairs[:, 0]):
            rows = np.flatnonzero(pairs[:, 0] == i)
            xs[rows], ys[rows] = parts[i].sample(pairs[rows, 1])
        return xs, ys

    def batches(self, split: SplitName, batch_size: int, rng: np.random.Generator | None = None):
        pairs = self.index(split)
        if rng is not None:
            pairs = pairs[rng.permutation(len(pairs))]
        for start in range(0, len(pairs), batch_size):
            yield self.gather(split, pairs[start : start + batch_size])


def split_episodes(episode_ids: list[str], split_seed: int) -> tuple[list[str], list[str], list[str]]:
    """70/15/15 by episode, floor for val and test, remainder to train."""
    ordered = sorted(episode_ids)
    n = len(ordered)
    n_holdout = int(np.floor(HOLDOUT_FRACTION * n))
    order = np.random.default_rng(split_seed).permutation(n)
    shuffled = [ordered[i] for i in order]
    val = sorted(shuffled[:n_holdout])
    test = sorted(shuffled[n_holdout : 2 * n_holdout])
    train = sorted(shuffled[2 * n_holdout :])
    return train, val, test


def silent_fraction(rec: EgmRecording) -> float:
    array = build_array(rec.array_name, pose=rec.pose)
    field_ = detect_activations(rec, array.posed_positions())
    return len(field_.silent_channels) / rec.n_channels


def _exclusion_reason(episode: Episode, rec: EgmRecording) -> str | None:
    if episode.label != "fibrillation":
        return f"label {episode.label}"
    fraction = silent_fraction(rec)
    if fraction >= MAX_SILENT_FRACTION:
        return f"{fraction:.0%} silent channels"
    return None


def _targets(episode: Episode, roi: FootprintRoi, centres: np.ndarray) -> np.ndarray:
    frames = roi.sample(np.nan_to_num(episode.vm.frames[centres]))
    return np.clip(frames, 0.0, 1.0)


def _recording_windows(
    episode: Episode,
    rec: EgmRecording,
    stats: ChannelStats,
    window: int,
    grid: int,
    stride: int,
) -> RecordingWindows:
    starts = np.arange(0, rec.n_samples - window + 1, stride)
    roi = FootprintRoi.for_array(build_array(rec.array_name, pose=rec.pose), episode.grid.shape, episode.grid.dx_mm, grid)
    return RecordingWindows(
        recording_id=rec.id,
        episode_id=episode.id,
        inputs=stats.apply(rec.traces),
        targets=_targets(episode, roi, starts + window // 2),
        starts=starts,
        window=window,
    )


def build_dataset(
    episodes: list[Episode],
    recordings: list[EgmRecording],
    split_seed: int = 0,
    window: int = 96,
    grid: int = 32,
    train_stride_ms: int = 4,
    eval_stride_ms: int = 1,
    min_episodes: int = 10,
) -> WindowDataset:
    """Filter to usable fibrillation episodes, split by episode, then window each recording."""
    by_id = {episode.id: episode for episode in episodes}
    usable: dict[str, list[EgmRecording]] = {}
    excluded: dict[str, str] = {}
    for rec in sorted(recordings, key=lambda r: r.id):
        if rec.episode_id not in by_id:
            raise ValueError(f"recording {rec.id} has no matching episode {rec.episode_id}")
        reason = _exclusion_reason(by_id[rec.episode_id], rec)
        if reason is not None:
            excluded[rec.id] = reason
            LOGGER.warning("Excluded recording", extra={"stage": "dataset", "recording": rec.id, "reason": reason})
            continue
        usable.setdefault(rec.episode_id, []).append(rec)

    if len(usable) < min_episodes:
        raise InsufficientEpisodesError(f"{len(usable)} usable episodes, need at least {min_episodes}")

    train, val, test = split_episodes(list(usable), split_seed)
    split = DatasetSplit(
        split_seed=split_seed,
        train=train,
        val=val,
        test=test,
        train_stride_ms=train_stride_ms,
        eval_stride_ms=eval_stride_ms,
        excluded=excluded,
    )
    stats = ChannelStats.from_traces([rec.traces for ep in train for rec in usable[ep]])
    dataset = WindowDataset(split=split, stats=stats, window=window, grid=grid)
    for name in ("train", "val", "test"):
        dataset.parts[name] = [
            _recording_windows(by_id[ep], rec, stats, window, grid, split.stride(name))
            for ep in split.ids(name)
            for rec in usable[ep]
        ]
    LOGGER.info(
        "Built dataset",
        extra={
            "stage": "dataset",
            "episodes": [len(train), len(val), len(test)],
            "windows": [dataset.n_windows(name) for name in ("train", "val", "test")],
            "excluded": len(excluded),
        },
    )
    return dataset
