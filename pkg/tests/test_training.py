import numpy as np
import pytest

from conftest import make_recording
from deapmap.config import TrainingSection
from deapmap.dataset import ChannelStats, DatasetSplit, RecordingWindows, WindowDataset
from deapmap.errors import TrainingDivergedError
from deapmap.network import ArchSpec, DeapNet
from deapmap.roi import FootprintRoi
from deapmap.sensing import build_pentagon_array
from deapmap.training import evaluate_loss, infer_movie, infer_roi_movie, train

SPEC = ArchSpec(n_channels=20, window=32, grid=8, temporal_channels=2, latent=8, decoder_channels=4)


def _windows(rec_id: str, rng: np.random.Generator, n_samples: int = 160) -> RecordingWindows:
    starts = np.arange(0, n_samples - 32 + 1, 4)
    return RecordingWindows(
        recording_id=rec_id,
        episode_id=rec_id,
        inputs=rng.normal(size=(20, n_samples)),
        targets=rng.uniform(0.1, 0.9, size=(len(starts), 8, 8)),
        starts=starts,
        window=32,
    )


@pytest.fixture
def dataset(rng):
    split = DatasetSplit(split_seed=0, train=["a", "b"], val=["c"], test=["d"])
    data = WindowDataset(split=split, stats=ChannelStats.identity(20), window=32, grid=8)
    data.parts = {
        "train": [_windows("a", rng), _windows("b", rng)],
        "val": [_windows("c", rng)],
        "test": [_windows("d", rng)],
    }
    return data


def test_batches_cover_split_once(dataset, rng):
    seen = sum(len(x) for x, _ in dataset.batches("train", 7, rng))
    assert seen == dataset.n_windows("train") == 66
    x, y = next(dataset.batches("val", 5))
    assert x.shape == (5, 20, 32)
    assert y.shape == (5, 8, 8)


def test_training_records_history_and_keeps_best(dataset):
    config = TrainingSection(learning_rate=1e-3, batch_size=8, max_epochs=3, patience=2, seed=1)
    model, history = train(DeapNet(SPEC, seed=0), dataset, config)
    assert 1 <= len(history.val_loss) <= 3
    assert len(history.train_loss) == len(history.val_loss)
    assert history.best_val_loss <= history.initial_val_loss
    assert evaluate_loss(model, dataset, "val") == pytest.approx(history.best_val_loss)
    assert model.manifest["split"]["train"] == ["a", "b"]
    assert model.manifest["epochs"] == len(history.val_loss)


def test_training_is_deterministic(dataset):
    config = TrainingSection(batch_size=8, max_epochs=2, seed=3)
    a, _ = train(DeapNet(SPEC, seed=0), dataset, config)
    b, _ = train(DeapNet(SPEC, seed=0), dataset, config)
    state_a, state_b = a.state_dict(), b.state_dict()
    assert all(np.array_equal(state_a[name], state_b[name]) for name in state_a)


def test_divergence_names_epoch_and_batch(dataset):
    model = DeapNet(SPEC, seed=0)
    model.output_layer.params["b"][...] = np.nan
    with pytest.raises(TrainingDivergedError) as excinfo:
        train(model, dataset, TrainingSection(batch_size=8, max_epochs=2))
    assert excinfo.value.epoch == 0
    assert excinfo.value.batch_index == 0


@pytest.fixture
def roi():
    return FootprintRoi.for_array(build_pentagon_array(), (64, 64), 0.5, 8)


def test_inference_emits_one_frame_per_sample_after_the_first_window(roi, rng):
    model = DeapNet(SPEC, seed=0)
    movie = infer_roi_movie(model, make_recording("r", "e", rng.normal(size=(20, 100))), roi)
    assert movie.n_frames == 100 - 32 + 1
    assert movie.t0_ms == 16.0
    assert np.isnan(movie.frames[:, ~roi.mask]).all()
    inside = movie.frames[:, roi.mask]
    assert inside.min() >= 0.0 and inside.max() <= 1.0


def test_inference_window_edge_cases(roi, rng):
    model = DeapNet(SPEC, seed=0)
    assert infer_roi_movie(model, make_recording("r", "e", rng.normal(size=(20, 32))), roi).n_frames == 1
    with pytest.raises(ValueError):
        infer_roi_movie(model, make_recording("r", "e", rng.normal(size=(20, 31))), roi)


def test_uniform_disc_maps_back_without_edge_loss():
    roi = FootprintRoi.for_array(build_pentagon_array(), (128, 128), 0.25, 32)
    frames = np.where(roi.mask, 1.0, np.nan)[None].repeat(2, axis=0)
    tissue = roi.to_tissue(frames)
    inside = roi.tissue_mask()
    assert np.allclose(tissue[:, inside], 1.0)
    assert np.isnan(tissue[:, ~inside]).all()


def test_tissue_movie_keeps_constant_output_on_the_footprint(rng):
    roi = FootprintRoi.for_array(build_pentagon_array(), (64, 64), 0.5, 8)
    model = DeapNet(SPEC, seed=0)
    model.zero_output_layer()
    movie = infer_movie(model, make_recording("r", "e", rng.normal(size=(20, 40))), roi)
    assert movie.n_frames == 9
    assert movie.t0_ms == 16.0
    assert np.allclose(movie.frames[:, roi.tissue_mask()], 0.5)
    assert np.isnan(movie.frames[:, ~roi.tissue_mask()]).all()
