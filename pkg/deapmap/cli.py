import argparse
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from deapmap import storage
from deapmap.baseline import baseline_movie
from deapmap.components import figures
from deapmap.components.report import Panel, write_report
from deapmap.config import RunConfig, load_config, resolve_threads
from deapmap.dataset import build_dataset
from deapmap.errors import ConfigError, DeapError
from deapmap.evaluation import ComparisonReport, compare_pipelines, estimate_episode, trend_gate
from deapmap.movie import VmMovie
from deapmap.network import ArchSpec, DeapNet
from deapmap.phase import (
    analyze_movie,
    charge_events,
    compute_phase,
    dominant_track,
    find_singularities,
    isochronal_map,
    lifetime_stats,
)
from deapmap.roi import FootprintRoi
from deapmap.sensing import NoiseSpec, Pose, build_array, forward_egm, register
from deapmap.tissue import episode_seed, simulate_from_section
from deapmap.training import infer_movie, train

SPIRAL_PROTOCOLS = ("s1s2", "burst", "fibrillation")
PS_DOWNSAMPLE = 4
REPORT_EPISODES = 3
CLIP_MS = 100.0
STRIP_TIMES = 5
ANALYZE_SOURCES = ("infer", "baseline", "episodes")
ANALYZE_SKIP = "-elapsed"


def _stage_dir(config: RunConfig, name: str) -> Path:
    path = Path(config.output_dir) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _upstream(config: RunConfig, name: str, override: Path | None = None) -> tuple[Path, dict[str, str]]:
    path = override or Path(config.output_dir) / name
    return path, storage.verify_stage(path)


def _pool_map(config: RunConfig, fn, items):
    with ThreadPoolExecutor(max_workers=resolve_threads(config)) as pool:
        return list(pool.map(fn, items))


def _arrays(config: RunConfig, names: str | None):
    pose = Pose(rotation_deg=config.sensing.rotation_deg, tx_mm=config.sensing.tx_mm, ty_mm=config.sensing.ty_mm)
    chosen = names.split(",") if names else [config.sensing.array]
    return [build_array(name.strip(), config.sensing.height_mm, pose) for name in chosen]


def _noise(config: RunConfig) -> NoiseSpec:
    return NoiseSpec(snr_db=config.sensing.snr_db, line_amplitude=config.sensing.line_amplitude)


def _load_episodes(directory: Path, ids: list[str] | None = None):
    ids = storage.artifact_ids(directory) if ids is None else ids
    return [storage.load_episode(directory, ep_id) for ep_id in ids]


def _load_recordings(directory: Path):
    return [storage.load_recording(directory, rec_id) for rec_id in storage.artifact_ids(directory)]


def _roi_for(rec, episode_grid, config: RunConfig) -> FootprintRoi:
    array = build_array(rec.array_name, config.sensing.height_mm, rec.pose)
    return FootprintRoi.for_array(array, episode_grid.shape, episode_grid.dx_mm, config.model.grid)


def _ps_summary(episode) -> dict:
    vm = episode.vm
    coarse = VmMovie(
        frames=vm.frames[:, ::PS_DOWNSAMPLE, ::PS_DOWNSAMPLE], dt_ms=vm.dt_ms, dx_mm=vm.dx_mm * PS_DOWNSAMPLE
    )
    tracks = find_singularities(compute_phase(coarse))
    return lifetime_stats(tracks, vm.dt_ms)


def command_simulate(args: argparse.Namespace, config: RunConfig) -> None:
    started = time.perf_counter()
    out = _stage_dir(config, "episodes")
    section = config.tissue

    def run(index: int):
        episode = simulate_from_section(section, config.seed, index)
        storage.save_episode(out, episode)
        summary = {"id": episode.id, "label": episode.label, "flags": episode.flags, "cycle_length_ms": episode.cycle_length_ms}
        if section.protocol in SPIRAL_PROTOCOLS and episode.vm.n_frames >= 512:
            summary["ps_lifetimes"] = _ps_summary(episode)
        return summary

    summaries = _pool_map(config, run, range(section.n_episodes))
    storage.write_manifest(out, "simulate", config, started=started, extra={"episodes": summaries})
    print(f"Simulated {len(summaries)} episodes into {out}")


def command_sense(args: argparse.Namespace, config: RunConfig) -> None:
    started = time.perf_counter()
    source, inputs = _upstream(config, "episodes", args.input)
    out = _stage_dir(config, "recordings")
    episodes = _load_episodes(source)
    arrays = _arrays(config, args.arrays)
    jobs = [(i * len(arrays) + j, episode, array) for i, episode in enumerate(episodes) for j, array in enumerate(arrays)]

    def run(job):
        index, episode, array = job
        rec = forward_egm(episode, array, _noise(config), episode_seed(config.seed, index))
        storage.save_recording(out, rec)
        if args.csv:
            storage.write_recording_csv(out / f"{rec.id}.csv", rec)
        return rec.id

    ids = _pool_map(config, run, jobs)
    storage.write_manifest(out, "sense", config, inputs, started)
    print(f"Wrote {len(ids)} recordings into {out}")


def command_baseline(args: argparse.Namespace, config: RunConfig) -> None:
    started = time.perf_counter()
    rec_dir, inputs = _upstream(config, "recordings", args.input)
    ep_dir, ep_inputs = _upstream(config, "episodes")
    out = _stage_dir(config, "baseline")
    recordings = _load_recordings(rec_dir)

    def run(rec):
        episode = storage.load_episode(ep_dir, rec.episode_id)
        array = build_array(rec.array_name, config.sensing.height_mm, rec.pose)
        sites = register(array, episode.grid).to_tissue()
        roi = _roi_for(rec, episode.grid, config)
        field, maps, movie = baseline_movie(
            rec, sites, roi, config.baseline.blanking_ms, config.baseline.threshold_fraction, config.baseline.apd90_ms
        )
        storage.write_frames(out / f"{rec.id}-elapsed.deap", maps, movie.dt_ms, roi.pitch_mm)
        storage.write_movie(out / f"{rec.id}-activation.deap", movie)
        storage.write_activations_csv(out / f"{rec.id}-activations.csv", field.times_ms)
        return rec.id, field.silent_channels

    results = _pool_map(config, run, recordings)
    silent = {rec_id: channels for rec_id, channels in results if channels}
    storage.write_manifest(out, "baseline", config, {**inputs, **ep_inputs}, started, extra={"silent_channels": silent})
    print(f"Built {len(results)} activation maps into {out}")


def command_train(args: argparse.Namespace, config: RunConfig) -> None:
    started = time.perf_counter()
    ep_dir, ep_inputs = _upstream(config, "episodes")
    rec_dir, rec_inputs = _upstream(config, "recordings")
    out = _stage_dir(config, "model")
    dataset = build_dataset(
        _load_episodes(ep_dir),
        _load_recordings(rec_dir),
        split_seed=config.dataset.split_seed,
        window=config.model.window_ms,
        grid=config.model.grid,
        train_stride_ms=config.dataset.train_stride_ms,
        eval_stride_ms=config.dataset.eval_stride_ms,
        min_episodes=config.dataset.min_episodes,
    )
    model = DeapNet(ArchSpec.from_section(config.model), seed=config.training.seed)
    model, history = train(model, dataset, config.training)
    storage.save_model(out, model)
    (out / "history.json").write_text(history.model_dump_json(indent=2), encoding="utf-8")
    (out / "split.json").write_text(dataset.split.model_dump_json(indent=2), encoding="utf-8")
    storage.write_manifest(out, "train", config, {**ep_inputs, **rec_inputs}, started)
    print(f"Trained {model.n_parameters} parameters; best val loss {history.best_val_loss:.5f} at epoch {history.best_epoch}")


def command_infer(args: argparse.Namespace, config: RunConfig) -> None:
    started = time.perf_counter()
    model_dir, model_inputs = _upstream(config, "model", args.model)
    rec_dir, rec_inputs = _upstream(config, "recordings", args.input)
    ep_dir = Path(config.output_dir) / "episodes"
    out = _stage_dir(config, "infer")
    model = storage.load_model(model_dir)

    def run(rec):
        grid = storage.load_episode(ep_dir, rec.episode_id).grid
        movie = infer_movie(model, rec, _roi_for(rec, grid, config))
        storage.write_movie(out / f"{rec.id}-deap.deap", movie)
        return rec.id

    ids = _pool_map(config, run, _load_recordings(rec_dir))
    storage.write_manifest(out, "infer", config, {**model_inputs, **rec_inputs}, started)
    print(f"Inferred {len(ids)} movies into {out}")


def command_analyze(args: argparse.Namespace, config: RunConfig) -> None:
    started = time.perf_counter()
    source, inputs = _upstream(config, args.source, args.input)
    out = _stage_dir(config, f"analyze/{args.source}")
    phase_cfg = config.phase

    def run(movie_id: str):
        movie = storage.read_movie(source / f"{movie_id}.deap")
        products = analyze_movie(
            movie,
            radius_cells=phase_cfg.radius_cells,
            edge_ms=phase_cfg.edge_ms,
            isochrone_window=phase_cfg.isochrone_window_ms,
            isochrone_step_ms=phase_cfg.isochrone_step_ms,
        )
        storage.write_frames(out / f"{movie_id}-pvi.deap", products.pvi.values, movie.dt_ms, movie.dx_mm)
        totals, events = charge_events(products.phase)
        summary = {
            "id": movie_id,
            "t0_ms": movie.t0_ms,
            "ps": lifetime_stats(products.tracks, movie.dt_ms),
            "dominant": None,
            "charge_events": len(events),
            "max_abs_charge": int(np.max(np.abs(totals))) if totals else 0,
        }
        track = dominant_track(products.tracks)
        if track is not None:
            summary["dominant"] = {"chirality": track.chirality, "mean_position": track.mean_position}
        if products.isochrones is not None:
            storage.write_frames(out / f"{movie_id}-isochrones.deap", products.isochrones.activation_ms, movie.dt_ms, movie.dx_mm)
        (out / f"{movie_id}-phase.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
        return movie_id

    movie_ids = [movie_id for movie_id in storage.artifact_ids(source) if not movie_id.endswith(ANALYZE_SKIP)]
    ids = _pool_map(config, run, movie_ids)
    storage.write_manifest(out, "analyze", config, inputs, started, extra={"source": args.source})
    print(f"Analysed {len(ids)} movies into {out}")


def _save_clips(out: Path, episodes, model, arrays, config: RunConfig, truth_as_estimate: bool) -> list[str]:
    """Short truth / DEAP / activation clips and PVI maps for the first held-out episodes."""
    names = []
    for index, episode in enumerate(episodes[:REPORT_EPISODES]):
        array = arrays[0]
        try:
            estimates = estimate_episode(
                episode, model, array, _noise(config), episode_seed(config.seed, index), config, truth_as_estimate
            )
        except DeapError as exc:
            logging.warning(f"Skipping figure clips for {episode.id}: {exc}")
            continue
        name = f"{episode.id}-{array.name}"
        start = estimates.truth.t0_ms + config.phase.edge_ms
        for label in ("truth", "deap", "baseline"):
            movie = getattr(estimates, label).window(start, start + CLIP_MS)
            storage.write_movie(out / f"{name}-{label}-clip.deap", movie)
            storage.write_frames(out / f"{name}-{label}-pvi.deap", getattr(estimates, f"pvi_{label}"))
        names.append(name)
    return names


def command_eval(args: argparse.Namespace, config: RunConfig) -> None:
    started = time.perf_counter()
    model_dir, model_inputs = _upstream(config, "model", args.model)
    ep_dir, ep_inputs = _upstream(config, "episodes")
    out = _stage_dir(config, "eval")
    model = storage.load_model(model_dir)
    split = model.manifest.get("split", {})
    ids = sorted(split.get("test", [])) or storage.artifact_ids(ep_dir)
    episodes = _load_episodes(ep_dir, ids)
    arrays = _arrays(config, args.arrays)
    report = ComparisonReport(rows=[])
    for array in arrays:
        part = compare_pipelines(
            episodes,
            model,
            array,
            _noise(config),
            config.seed,
            config,
            truth_as_estimate=args.truth_as_estimate,
            threads=resolve_threads(config),
        )
        report = report.merged(part)
    gate = trend_gate(report)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "gate.json").write_text(gate.model_dump_json(indent=2), encoding="utf-8")
    clips = _save_clips(out, episodes, model, arrays, config, args.truth_as_estimate)
    storage.write_manifest(
        out, "eval", config, {**model_inputs, **ep_inputs}, started, extra={"clips": clips, "truth_as_estimate": args.truth_as_estimate}
    )
    print(f"Scored {len(report.rows)} rows; mean SSIM DEAP {gate.mean_deap:.3f}, activation map {gate.mean_baseline:.3f}")


def command_report(args: argparse.Namespace, config: RunConfig) -> None:
    started = time.perf_counter()
    source, inputs = _upstream(config, "eval", args.input)
    out = _stage_dir(config, "report")
    report = ComparisonReport.from_json((source / "report.json").read_text(encoding="utf-8"))
    gate = trend_gate(report)
    summary = [
        Panel("DEAP vs activation map", figures.scatter_svg(report, out / "scatter.svg").name, "one point per held-out recording"),
        Panel("SSIM per design", figures.violin_svg(report, out / "violin.svg").name),
    ]
    strips = []
    maps = []
    for name in storage.read_manifest(source).extra.get("clips", []):
        clips = {label: storage.read_movie(source / f"{name}-{label}-clip.deap") for label in ("truth", "deap", "baseline")}
        truth = clips["truth"]
        times = list(np.linspace(truth.t0_ms, truth.t0_ms + (truth.n_frames - 1) * truth.dt_ms, STRIP_TIMES))
        strip = figures.frame_strip_png(
            {"truth": truth, "DEAP": clips["deap"], "act. map": clips["baseline"]}, times, out / f"{name}-strip.png"
        )
        strips.append(Panel(name, strip.name, "rows: truth, DEAP, activation map"))
        for label in ("truth", "deap", "baseline"):
            pvi, _, _ = storage.read_frames(source / f"{name}-{label}-pvi.deap")
            png = figures.heatmap_png(pvi[0], out / f"{name}-{label}-pvi.png", cmap="viridis")
            maps.append(Panel(f"{name} PVI, {label}", png.name))
        iso = isochronal_map(truth, (truth.t0_ms, truth.t0_ms + truth.n_frames * truth.dt_ms), config.phase.isochrone_step_ms)
        maps.append(Panel(f"{name} isochrones, truth", figures.isochrone_svg(iso, out / f"{name}-isochrones.svg").name))
    write_report(out, report=report, gate=gate, strips=strips, maps=maps, summary_figures=summary)
    storage.write_manifest(out, "report", config, inputs, started)
    print(f"Report written to {out / 'index.html'}")


COMMANDS = {
    "simulate": command_simulate,
    "sense": command_sense,
    "baseline": command_baseline,
    "train": command_train,
    "infer": command_infer,
    "analyze": command_analyze,
    "eval": command_eval,
    "report": command_report,
}


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config.")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="Override one config field.")
    common.add_argument("--seed", type=int, help="Run seed (overrides the config).")
    common.add_argument("--out", help="Output directory (overrides output_dir).")
    common.add_argument("--threads", type=int, help="Worker cap; DEAP_THREADS mirrors it.")
    common.add_argument("--log-level", default="INFO", help="Logging level (default: INFO).")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deapmap",
        description="Simulate atrial tissue, synthesise catheter electrograms and reconstruct membrane-potential movies.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    common = [_common_options()]

    simulate = subparsers.add_parser("simulate", parents=common, help="Simulate ground-truth episodes.")
    simulate.add_argument("--n", type=int, help="Number of episodes.")
    simulate.add_argument("--protocol", choices=["s1", "s1s2", "burst", "fibrillation"], help="Stimulus protocol.")

    sense = subparsers.add_parser("sense", parents=common, help="Synthesise unipolar electrograms.")
    sense.add_argument("--input", type=Path, help="Episode directory (default: <out>/episodes).")
    sense.add_argument("--arrays", help="Comma-separated array designs (default: sensing.array).")
    sense.add_argument("--csv", action="store_true", help="Also export traces as CSV.")

    baseline = subparsers.add_parser("baseline", parents=common, help="Activation-map pseudo-Vm movies.")
    baseline.add_argument("--input", type=Path, help="Recording directory (default: <out>/recordings).")

    subparsers.add_parser("train", parents=common, help="Train the reconstruction model.")

    infer = subparsers.add_parser("infer", parents=common, help="Infer Vm movies from recordings.")
    infer.add_argument("--model", type=Path, help="Model directory (default: <out>/model).")
    infer.add_argument("--input", type=Path, help="Recording directory (default: <out>/recordings).")

    analyze = subparsers.add_parser("analyze", parents=common, help="Phase, PVI, PS tracks and isochrones.")
    analyze.add_argument("--source", choices=ANALYZE_SOURCES, default="infer", help="Stage whose movies to analyse (default: infer).")
    analyze.add_argument("--input", type=Path, help="Movie directory (default: <out>/<source>).")

    evaluate = subparsers.add_parser("eval", parents=common, help="Score DEAP and activation maps against truth.")
    evaluate.add_argument("--model", type=Path, help="Model directory (default: <out>/model).")
    evaluate.add_argument("--arrays", help="Comma-separated array designs (default: sensing.array).")
    evaluate.add_argument("--truth-as-estimate", action="store_true", help="Score the truth against itself.")

    report = subparsers.add_parser("report", parents=common, help="Static HTML report with figures.")
    report.add_argument("--input", type=Path, help="Eval directory (default: <out>/eval).")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Flags > --set > config file > defaults."""
    overrides = list(args.set)
    flags = {
        "seed": args.seed,
        "output_dir": args.out,
        "threads": args.threads,
        "tissue.n_episodes": getattr(args, "n", None),
        "tissue.protocol": getattr(args, "protocol", None),
    }
    overrides += [f"{key}={value}" for key, value in flags.items() if value is not None]
    return load_config(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = resolve_config(args)
        COMMANDS[args.command](args, config)
    except ConfigError as e:
        logging.error(f"Config error: {e}")
        return 2
    except (DeapError, OSError, ValueError) as e:
        logging.exception(f"{args.command} failed: {e}")
        return 1
    return 0
