import numpy as np
import pytest

from conftest import make_episode, rotor_frames
from deapmap.errors import DegenerateMaskError, ShapeMismatchError
from deapmap.evaluation import (
    ComparisonReport,
    ComparisonRow,
    compare_pipelines,
    trend_gate,
    frame_correlation,
    frame_rmse,
    ssim,
)
from deapmap.movie import VmMovie
from deapmap.network import ArchSpec, DeapNet
from deapmap.sensing import NoiseSpec, build_pentagon_array

FULL = np.ones((32, 32), dtype=bool)


def test_ssim_of_identical_maps_is_one(rng):
    a = rng.random((32, 32))
    assert ssim(a, a, FULL) == pytest.approx(1.0)


def test_ssim_is_symmetric_and_penalises_inversion(rng):
    a = rng.random((32, 32))
    b = rng.random((32, 32))
    assert ssim(a, b, FULL) == pytest.approx(ssim(b, a, FULL))
    assert ssim(a, 1.0 - a, FULL) < 0.0


def test_ssim_only_reads_masked_cells(rng):
    a = rng.random((32, 32))
    b = a.copy()
    mask = np.zeros((32, 32), dtype=bool)
    mask[4:28, 4:28] = True
    b[~mask] = rng.random(int((~mask).sum()))
    assert ssim(a, b, mask) == pytest.approx(1.0)


def test_ssim_input_errors(rng):
    a = rng.random((32, 32))
    with pytest.raises(ShapeMismatchError):
        ssim(a, a[:, :31], FULL)
    small = np.zeros((32, 32), dtype=bool)
    small[:9, :11] = True
    with pytest.raises(DegenerateMaskError):
        ssim(a, a, small)


def test_frame_metrics():
    truth = VmMovie(frames=np.stack([np.linspace(0, 1, 16).reshape(4, 4)] * 3))
    shifted = VmMovie(frames=truth.frames + 0.1)
    mask = np.ones((4, 4), dtype=bool)
    assert frame_rmse(shifted, truth, mask) == pytest.approx(0.1)
    assert frame_correlation(shifted, truth, mask) == pytest.approx(1.0)
    flat = VmMovie(frames=np.zeros((3, 4, 4)))
    assert frame_correlation(flat, truth, mask) is None


def _row(episode_id: str, deap: float, baseline: float, **kwargs) -> ComparisonRow:
    return ComparisonRow(
        episode_id=episode_id, array_name="pentagon", label="fibrillation",
        ssim_deap=deap, ssim_baseline=baseline, **kwargs,
    )


def test_gate_passes_on_a_clear_margin():
    rows = [_row(f"e{i}", 0.8, 0.4) for i in range(9)] + [_row("e9", 0.5, 0.6)]
    rows.append(ComparisonRow(episode_id="ex", array_name="pentagon", label="fibrillation", status="failed", cause="boom"))
    gate = trend_gate(ComparisonReport(rows=rows))
    assert gate.n == 10
    assert gate.win_rate == pytest.approx(0.9)
    assert gate.mean_deap == pytest.approx(0.77)
    assert gate.passed
    assert not gate.all_cases


def test_gate_fails_without_margin():
    gate = trend_gate(ComparisonReport(rows=[_row(f"e{i}", 0.7, 0.65) for i in range(5)]))
    assert gate.win_rate_ok and gate.mean_deap_ok
    assert not gate.margin_ok
    assert not gate.passed


def test_empty_report_fails_gate():
    assert not trend_gate(ComparisonReport(rows=[])).passed


def test_report_serialisation():
    report = ComparisonReport(rows=[_row("e1", 0.8, 0.3), _row("e0", 0.7, 0.2, mask_cells=120)])
    again = ComparisonReport.from_json(report.to_json())
    assert again == report
    lines = report.to_csv().splitlines()
    assert lines[0].split(",")[:4] == ["episode_id", "array_name", "label", "status"]
    assert len(lines) == 3
    assert ",," in lines[1]
    aggregates = report.aggregates()
    assert aggregates["all"]["deap"]["n"] == 2
    assert aggregates["pentagon"]["baseline"]["mean"] == pytest.approx(0.25)
    assert aggregates["failed"] == 0


def test_compare_pipelines_truth_as_estimate_scores_perfectly():
    spec = ArchSpec(n_channels=20, window=32, grid=32, temporal_channels=2, latent=8, decoder_channels=4)
    model = DeapNet(spec, seed=0)
    rotor = make_episode("a-rotor", rotor_frames(n_frames=700))
    short = make_episode("b-short", rotor_frames(n_frames=300))
    report = compare_pipelines(
        [short, rotor],
        model,
        build_pentagon_array(),
        noise=NoiseSpec(snr_db=20.0),
        seed=3,
        truth_as_estimate=True,
    )
    ok, failed = report.rows
    assert ok.episode_id == "a-rotor" and ok.status == "ok"
    assert ok.ssim_deap == pytest.approx(1.0)
    assert ok.ssim_baseline == pytest.approx(1.0)
    assert ok.rmse_deap == pytest.approx(0.0)
    assert ok.ps_error_deap == pytest.approx(0.0)
    assert ok.mask_cells >= 100
    assert failed.episode_id == "b-short" and failed.status == "failed"
    assert failed.cause.startswith("PhaseInputError")
    assert trend_gate(report).n == 1
