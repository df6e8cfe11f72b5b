import logging
import time

import numpy as np
from pydantic import BaseModel

from deapmap.config import TrainingSection
from deapmap.dataset import WindowDataset
from deapmap.errors import TrainingDivergedError
from deapmap.movie import VmMovie
from deapmap.network import Adam, DeapNet, mse_loss
from deapmap.roi import FootprintRoi
from deapmap.sensing import EgmRecording

LOGGER = logging.getLogger(__name__)

INFER_BATCH = 256


class TrainingHistory(BaseModel):
    initial_val_loss: float
    train_loss: list[float] = []
    val_loss: list[float] = []
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    stopped_early: bool = False
    seconds: float = 0.0


def evaluate_loss(model: DeapNet, dataset: WindowDataset, split: str = "val", batch_size: int = INFER_BATCH) -> float:
    """Window-weighted MSE over a whole split."""
    total = 0.0
    count = 0
    for x, y in dataset.batches(split, batch_size):
        loss, _ = mse_loss(model.forward(x), y)
        total += loss * len(x)
        count += len(x)
    return total / count if count else float("nan")


def train_step(model: DeapNet, optimiser: Adam, x: np.ndarray, y: np.ndarray) -> float:
    loss, dpred = mse_loss(model.forward(x), y)
    if not np.isfinite(loss):
        return loss
    model.backward(dpred)
    optimiser.step()
    return loss


def overfit_batch(model: DeapNet, x: np.ndarray, y: np.ndarray, steps: int = 200, learning_rate: float = 1e-3) -> list[float]:
    """Repeated Adam steps on one batch; returns the loss before each step."""
    optimiser = Adam(model, learning_rate)
    losses = []
    for step_index in range(steps):
        loss = train_step(model, optimiser, x, y)
        if not np.isfinite(loss):
            raise TrainingDivergedError(0, step_index, loss)
        losses.append(loss)
    return losses


def train(model: DeapNet, dataset: WindowDataset, config: TrainingSection | None = None) -> tuple[DeapNet, TrainingHistory]:
    """Adam on frame MSE with early stopping on validation loss; the best epoch's weights are kept."""
    config = config or TrainingSection()
    rng = np.random.default_rng(config.seed)
    model.channel_mean = dataset.stats.mean.copy()
    model.channel_std = dataset.stats.std.copy()
    optimiser = Adam(model, config.learning_rate)
    started = time.perf_counter()
    history = TrainingHistory(initial_val_loss=evaluate_loss(model, dataset, "val"))
    best_state = model.state_dict()
    history.best_val_loss = history.initial_val_loss
    stale = 0

    for epoch in range(config.max_epochs):
        running = 0.0
        seen = 0
        for batch_index, (x, y) in enumerate(dataset.batches("train", config.batch_size, rng)):
            loss = train_step(model, optimiser, x, y)
            if not np.isfinite(loss):
                LOGGER.error(
                    "Training diverged",
                    extra={"stage": "train", "epoch": epoch, "batch": batch_index, "batch_size": len(x)},
                )
                raise TrainingDivergedError(epoch, batch_index, loss)
            running += loss * len(x)
            seen += len(x)
        history.train_loss.append(running / max(seen, 1))
        val_loss = evaluate_loss(model, dataset, "val")
        history.val_loss.append(val_loss)
        LOGGER.info(
            "Epoch finished",
            extra={"stage": "train", "epoch": epoch, "train_loss": history.train_loss[-1], "val_loss": val_loss},
        )
        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                history.stopped_early = True
                break

    model.load_state_dict(best_state)
    history.seconds = time.perf_counter() - started
    model.manifest = {
        "seed": config.seed,
        "model_seed": model.seed,
        "split": dataset.split.model_dump(),
        "epochs": len(history.val_loss),
        "best_epoch": history.best_epoch,
        "final_train_loss": history.train_loss[-1] if history.train_loss else None,
        "best_val_loss": history.best_val_loss,
        "initial_val_loss": history.initial_val_loss,
    }
    return model, history


def infer_roi_movie(model: DeapNet, rec: EgmRecording, roi: FootprintRoi) -> VmMovie:
    """Sliding-window inference at 1 ms stride on the footprint ROI, disc-masked."""
    window = model.spec.window
    if rec.n_samples < window:
        raise ValueError(f"recording {rec.id} has {rec.n_samples} samples, window needs {window}")
    inputs = model.normalise(rec.traces)
    views = np.lib.stride_tricks.sliding_window_view(inputs, window, axis=1)
    n_frames = rec.n_samples - window + 1
    frames = np.empty((n_frames, model.spec.grid, model.spec.grid))
    for start in range(0, n_frames, INFER_BATCH):
        batch = np.ascontiguousarray(views[:, start : start + INFER_BATCH, :].transpose(1, 0, 2))
        frames[start : start + len(batch)] = model.forward(batch)
    frames[:, ~roi.mask] = np.nan
    dt_ms = 1000.0 / rec.fs_hz
    return VmMovie(frames=frames, dt_ms=dt_ms, dx_mm=roi.pitch_mm, t0_ms=(window // 2) * dt_ms, mask=roi.mask)


def infer_movie(model: DeapNet, rec: EgmRecording, roi: FootprintRoi) -> VmMovie:
    """DEAP movie on the tissue grid; cells outside the footprint stay undefined."""
    on_roi = infer_roi_movie(model, rec, roi)
    frames = roi.to_tissue(on_roi.frames)
    LOGGER.info("Inferred movie", extra={"stage": "infer", "recording": rec.id, "frames": len(frames)})
    return VmMovie(frames=frames, dt_ms=on_roi.dt_ms, dx_mm=roi.dx_mm, t0_ms=on_roi.t0_ms, mask=roi.tissue_mask())
