"""Scoring estimated movies against simulated ground truth."""

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel
from scipy import ndimage, signal

from deapmap.baseline import baseline_movie
from deapmap.config import RunConfig
from deapmap.errors import DegenerateMaskError, ShapeMismatchError
from deapmap.movie import VmMovie
from deapmap.network import DeapNet
from deapmap.phase import PhaseMovie, compute_phase, dominant_track, find_singularities, phase_variance_index
from deapmap.roi import FootprintRoi
from deapmap.sensing import ElectrodeArray, NoiseSpec, forward_egm, register
from deapmap.tissue import Episode, episode_seed
from deapmap.training import infer_roi_movie

LOGGER = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MIN_MASK_CELLS = 100

WIN_RATE_GATE = 0.9
MEAN_DEAP_GATE = 0.6
MARGIN_GATE = 0.15
REPORTED_DEAP_MEAN = 0.8
REPORTED_BASELINE_MEAN = 0.4


def _gaussian_window() -> np.ndarray:
    g = signal.windows.gaussian(SSIM_WINDOW, SSIM_SIGMA)
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray, data_range: float = 1.0) -> float:
    """Mean local SSIM over windows centred inside ``mask``; window weights renormalised to the mask."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if a.shape != b.shape or a.shape != mask.shape:
        raise ShapeMismatchError(f"ssim inputs differ: {a.shape}, {b.shape}, mask {mask.shape}")
    if int(mask.sum()) < MIN_MASK_CELLS:
        raise DegenerateMaskError(f"mask covers {int(mask.sum())} cells, need {MIN_MASK_CELLS}")
    kernel = _gaussian_window()
    m = mask.astype(np.float64)
    a = np.where(mask, a, 0.0)
    b = np.where(mask, b, 0.0)

    def local(x):
        return ndimage.correlate(x, kernel, mode="constant", cval=0.0)

    weight = local(m)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu_a = local(a) / weight
        mu_b = local(b) / weight
        var_a = local(a * a) / weight - mu_a**2
        var_b = local(b * b) / weight - mu_b**2
        cov = local(a * b) / weight - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(np.clip(s[mask].mean(), -1.0, 1.0))


def frame_rmse(estimate: VmMovie, truth: VmMovie, mask: np.ndarray) -> float:
    diff = estimate.frames[:, mask] - truth.frames[:, mask]
    return float(np.sqrt(np.nanmean(diff**2)))


def frame_correlation(estimate: VmMovie, truth: VmMovie, mask: np.ndarray) -> float | None:
    """Mean per-frame Pearson correlation; frames with no spatial variance are skipped."""
    est = np.nan_to_num(estimate.frames[:, mask])
    ref = np.nan_to_num(truth.frames[:, mask])
    est = est - est.mean(axis=1, keepdims=True)
    ref = ref - ref.mean(axis=1, keepdims=True)
    denom = np.sqrt((est**2).sum(axis=1) * (ref**2).sum(axis=1))
    live = denom > 1e-12
    if not live.any():
        return None
    return float(np.mean((est * ref).sum(axis=1)[live] / denom[live]))


def ps_localisation_error(estimate_phase, truth_phase) -> float | None:
    """Distance (cells) between the mean positions of the dominant PS tracks."""
    est = dominant_track(find_singularities(estimate_phase))
    ref = dominant_track(find_singularities(truth_phase))
    if est is None or ref is None:
        return None
    return float(np.hypot(*np.subtract(est.mean_position, ref.mean_position)))


class ComparisonRow(BaseModel):
    episode_id: str
    array_name: str
    label: str
    status: Literal["ok", "failed"] = "ok"
    cause: str | None = None
    ssim_deap: float | None = None
    ssim_baseline: float | None = None
    rmse_deap: float | None = None
    rmse_baseline: float | None = None
    corr_deap: float | None = None
    corr_baseline: float | None = None
    ps_error_deap: float | None = None
    ps_error_baseline: float | None = None
    mask_cells: int = 0


class Summary(BaseModel):
    n: int
    mean: float | None
    q1: float | None
    median: float | None
    q3: float | None
    minimum: float | None
    maximum: float | None

    @classmethod
    def of(cls, values: list[float]) -> "Summary":
        if not values:
            return cls(n=0, mean=None, q1=None, median=None, q3=None, minimum=None, maximum=None)
        v = np.asarray(values, dtype=np.float64)
        q1, median, q3 = np.percentile(v, [25, 50, 75])
        return cls(
            n=len(v),
            mean=float(v.mean()),
            q1=float(q1),
            median=float(median),
            q3=float(q3),
            minimum=float(v.min()),
            maximum=float(v.max()),
        )


class ComparisonReport(BaseModel):
    rows: list[ComparisonRow]

    @property
    def ok_rows(self) -> list[ComparisonRow]:
        return [row for row in self.rows if row.status == "ok"]

    def designs(self) -> list[str]:
        return sorted({row.array_name for row in self.rows})

    def summary(self, pipeline: Literal["deap", "baseline"], design: str | None = None) -> Summary:
        values = [
            getattr(row, f"ssim_{pipeline}")
            for row in self.ok_rows
            if design is None or row.array_name == design
        ]
        return Summary.of([v for v in values if v is not None])

    def aggregates(self) -> dict:
        out = {
            "all": {"deap": self.summary("deap").model_dump(), "baseline": self.summary("baseline").model_dump()},
            "failed": sum(1 for row in self.rows if row.status == "failed"),
        }
        for design in self.designs():
            out[design] = {
                "deap": self.summary("deap", design).model_dump(),
                "baseline": self.summary("baseline", design).model_dump(),
            }
        return out

    def scatter(self) -> list[tuple[float, float]]:
        """(baseline SSIM, DEAP SSIM) per successful row."""
        return [(row.ssim_baseline, row.ssim_deap) for row in self.ok_rows]

    def merged(self, other: "ComparisonReport") -> "ComparisonReport":
        rows = sorted(self.rows + other.rows, key=lambda row: (row.episode_id, row.array_name))
        return ComparisonReport(rows=rows)

    def to_json(self) -> str:
        payload = {"rows": [row.model_dump() for row in self.rows], "aggregates": self.aggregates()}
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ComparisonReport":
        return cls(rows=json.loads(text)["rows"])

    def to_csv(self) -> str:
        buffer = io.StringIO()
        fields = list(ComparisonRow.model_fields)
        writer = csv.DictWriter(buffer, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({key: "" if value is None else value for key, value in row.model_dump().items()})
        return buffer.getvalue()


class GateResult(BaseModel):
    n: int
    win_rate: float
    mean_deap: float
    mean_baseline: float
    win_rate_ok: bool
    mean_deap_ok: bool
    margin_ok: bool
    all_cases: bool
    reported_deap_mean: float = REPORTED_DEAP_MEAN
    reported_baseline_mean: float = REPORTED_BASELINE_MEAN

    @property
    def passed(self) -> bool:
        return self.win_rate_ok and self.mean_deap_ok and self.margin_ok


def trend_gate(report: ComparisonReport) -> GateResult:
    """Trend criteria on held-out rows; the all-cases outcome is reported, not gated."""
    pairs = report.scatter()
    if not pairs:
        return GateResult(
            n=0, win_rate=0.0, mean_deap=float("nan"), mean_baseline=float("nan"),
            win_rate_ok=False, mean_deap_ok=False, margin_ok=False, all_cases=False,
        )
    base = np.array([p[0] for p in pairs])
    deap = np.array([p[1] for p in pairs])
    wins = deap > base
    mean_deap = float(deap.mean())
    mean_base = float(base.mean())
    return GateResult(
        n=len(pairs),
        win_rate=float(wins.mean()),
        mean_deap=mean_deap,
        mean_baseline=mean_base,
        win_rate_ok=bool(wins.mean() >= WIN_RATE_GATE),
        mean_deap_ok=mean_deap >= MEAN_DEAP_GATE,
        margin_ok=mean_base <= mean_deap - MARGIN_GATE,
        all_cases=bool(wins.all()),
    )


@dataclass
class EpisodeEstimates:
    """Everything compare_pipelines derives for one episode, kept for figures."""

    truth: VmMovie
    deap: VmMovie
    baseline: VmMovie
    phases: list[PhaseMovie]
    pvi_truth: np.ndarray
    pvi_deap: np.ndarray
    pvi_baseline: np.ndarray
    mask: np.ndarray


def estimate_episode(
    episode: Episode,
    model: DeapNet,
    array: ElectrodeArray,
    noise: NoiseSpec,
    seed: int,
    config: RunConfig,
    truth_as_estimate: bool = False,
) -> EpisodeEstimates:
    """Sense one episode, run both pipelines and the truth through phase analysis on the footprint ROI."""
    roi = FootprintRoi.for_array(array, episode.grid.shape, episode.grid.dx_mm, model.spec.grid)
    rec = forward_egm(episode, array, noise, seed)
    truth_full = roi.movie(episode.vm)
    deap = infer_roi_movie(model, rec, roi)
    t0, t1 = deap.t0_ms, deap.t0_ms + deap.n_frames * deap.dt_ms
    truth = truth_full.window(t0, t1)
    if truth_as_estimate:
        deap = baseline = truth
    else:
        sites = register(array, episode.grid).to_tissue()
        _, _, base_full = baseline_movie(
            rec,
            sites,
            roi,
            config.baseline.blanking_ms,
            config.baseline.threshold_fraction,
            config.baseline.apd90_ms,
        )
        baseline = base_full.window(t0, t1)

    radius = config.phase.radius_cells
    edge = config.phase.edge_ms
    phases = [compute_phase(movie, roi.mask, edge) for movie in (truth, deap, baseline)]
    pvis = [phase_variance_index(p, radius).values for p in phases]
    mask = roi.mask & np.logical_and.reduce([np.isfinite(v) for v in pvis])
    return EpisodeEstimates(
        truth=truth,
        deap=deap,
        baseline=baseline,
        phases=phases,
        pvi_truth=pvis[0],
        pvi_deap=pvis[1],
        pvi_baseline=pvis[2],
        mask=mask,
    )


def _score(episode: Episode, array: ElectrodeArray, estimates: EpisodeEstimates) -> ComparisonRow:
    mask = estimates.mask
    phases = estimates.phases
    return ComparisonRow(
        episode_id=episode.id,
        array_name=array.name,
        label=episode.label,
        ssim_deap=ssim(np.nan_to_num(estimates.pvi_deap), np.nan_to_num(estimates.pvi_truth), mask),
        ssim_baseline=ssim(np.nan_to_num(estimates.pvi_baseline), np.nan_to_num(estimates.pvi_truth), mask),
        rmse_deap=frame_rmse(estimates.deap, estimates.truth, mask),
        rmse_baseline=frame_rmse(estimates.baseline, estimates.truth, mask),
        corr_deap=frame_correlation(estimates.deap, estimates.truth, mask),
        corr_baseline=frame_correlation(estimates.baseline, estimates.truth, mask),
        ps_error_deap=ps_localisation_error(phases[1], phases[0]),
        ps_error_baseline=ps_localisation_error(phases[2], phases[0]),
        mask_cells=int(mask.sum()),
    )


def compare_pipelines(
    episodes: list[Episode],
    model: DeapNet,
    array: ElectrodeArray,
    noise: NoiseSpec | None = None,
    seed: int = 0,
    config: RunConfig | None = None,
    truth_as_estimate: bool = False,
    threads: int = 1,
) -> ComparisonReport:
    """One row per episode; a failing episode becomes a failed row and the run continues."""
    config = config or RunConfig()
    noise = noise or NoiseSpec(snr_db=config.sensing.snr_db, line_amplitude=config.sensing.line_amplitude)

    def run(indexed: tuple[int, Episode]) -> ComparisonRow:
        index, episode = indexed
        try:
            estimates = estimate_episode(
                episode, model, array, noise, episode_seed(seed, index), config, truth_as_estimate
            )
            return _score(episode, array, estimates)
        except Exception as exc:
            LOGGER.warning(
                "Comparison failed",
                extra={"stage": "eval", "episode": episode.id, "array": array.name, "cause": repr(exc)},
            )
            return ComparisonRow(
                episode_id=episode.id,
                array_name=array.name,
                label=episode.label,
                status="failed",
                cause=f"{type(exc).__name__}: {exc}",
            )

    ordered = sorted(episodes, key=lambda ep: ep.id)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        rows = list(pool.map(run, enumerate(ordered)))
    report = ComparisonReport(rows=rows)
    LOGGER.info(
        "Compared pipelines",
        extra={"stage": "eval", "array": array.name, "rows": len(rows), "failed": report.aggregates()["failed"]},
    )
    return report
