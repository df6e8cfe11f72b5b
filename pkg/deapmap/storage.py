"""Binary frame containers, JSON sidecars, model files and stage manifests."""

import csv
import hashlib
import json
import logging
import struct
import subprocess
import time
from importlib import metadata
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ValidationError

from deapmap.config import RunConfig
from deapmap.errors import ArtifactError
from deapmap.movie import VmMovie
from deapmap.network import ArchSpec, DeapNet
from deapmap.sensing import EgmRecording, NoiseSpec, Pose
from deapmap.tissue import Episode, GridSpec, ModelParams, StimulusProtocol

LOGGER = logging.getLogger(__name__)

MAGIC = b"DEAP"
VERSION = 1
PREFIX = struct.Struct("<4sH")
HEADER = struct.Struct("<IIIff")
MANIFEST_NAME = "manifest.json"
TRACKED_PACKAGES = ("numpy", "scipy", "pydantic", "PyYAML", "pillow", "matplotlib")


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_frames(path: str | Path, frames: np.ndarray, dt_ms: float = 1.0, dx_mm: float = 1.0) -> Path:
    """Write (n_frames, ny, nx) as little-endian f32 behind the DEAP header."""
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
    n_frames, ny, nx = frames.shape
    path = Path(path)
    with path.open("wb") as f:
        f.write(PREFIX.pack(MAGIC, VERSION))
        f.write(HEADER.pack(nx, ny, n_frames, dt_ms, dx_mm))
        f.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())
    return path


def read_frames(path: str | Path) -> tuple[np.ndarray, float, float]:
    path = Path(path)
    artifact = path.stem
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise ArtifactError(artifact, None, f"missing file {path}") from exc
    if len(raw) < PREFIX.size + HEADER.size:
        raise ArtifactError(artifact, None, "truncated header")
    magic, version = PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ArtifactError(artifact, None, f"bad magic {magic!r}")
    if version != VERSION:
        raise ArtifactError(artifact, None, f"unsupported container version {version}")
    nx, ny, n_frames, dt_ms, dx_mm = HEADER.unpack_from(raw, PREFIX.size)
    payload = raw[PREFIX.size + HEADER.size :]
    expected = nx * ny * n_frames * 4
    if len(payload) != expected:
        raise ArtifactError(artifact, None, f"payload is {len(payload)} bytes, header says {expected}")
    frames = np.frombuffer(payload, dtype="<f4").reshape(n_frames, ny, nx).astype(np.float32)
    return frames, float(dt_ms), float(dx_mm)


class MovieTiming(BaseModel):
    t0_ms: float


def _timing_path(path: Path) -> Path:
    return path.with_suffix(".timing.json")


def write_movie(path: str | Path, movie: VmMovie) -> Path:
    """Frames behind the DEAP header; a nonzero start time goes to a ``.timing.json`` sidecar."""
    path = write_frames(path, movie.frames, movie.dt_ms, movie.dx_mm)
    timing = _timing_path(path)
    if movie.t0_ms:
        _write_json(timing, MovieTiming(t0_ms=movie.t0_ms).model_dump())
    elif timing.exists():
        timing.unlink()
    return path


def read_movie(path: str | Path, t0_ms: float | None = None, mask: np.ndarray | None = None) -> VmMovie:
    path = Path(path)
    frames, dt_ms, dx_mm = read_frames(path)
    if t0_ms is None:
        timing = _timing_path(path)
        t0_ms = _read_sidecar(timing, MovieTiming).t0_ms if timing.exists() else 0.0
    return VmMovie(frames=frames, dt_ms=dt_ms, dx_mm=dx_mm, t0_ms=t0_ms, mask=mask)


class EpisodeSidecar(BaseModel):
    id: str
    seed: int
    label: str
    flags: list[str] = []
    cycle_length_ms: float | None = None
    params: ModelParams
    grid: GridSpec
    protocol: StimulusProtocol
    substrate: dict = {}


class RecordingSidecar(BaseModel):
    id: str
    episode_id: str
    array_name: str
    pose: Pose
    noise: NoiseSpec
    noise_meta: dict = {}
    fs_hz: float = 1000.0


def _write_json(path: Path, payload: Any) -> None:
    with path.open("w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def _read_sidecar(path: Path, model: type[BaseModel]):
    try:
        with path.open("r", encoding="utf-8") as f:
            return model.model_validate(json.load(f))
    except FileNotFoundError as exc:
        raise ArtifactError(path.stem, None, f"missing sidecar {path}") from exc
    except (json.JSONDecodeError, ValidationError) as exc:
        raise ArtifactError(path.stem, None, f"corrupt sidecar {path}: {exc}") from exc


def save_episode(directory: str | Path, episode: Episode) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = write_movie(directory / f"{episode.id}.deap", episode.vm)
    sidecar = EpisodeSidecar(
        id=episode.id,
        seed=episode.seed,
        label=episode.label,
        flags=episode.flags,
        cycle_length_ms=episode.cycle_length_ms,
        params=episode.params,
        grid=episode.grid,
        protocol=episode.protocol,
        substrate=episode.substrate,
    )
    _write_json(directory / f"{episode.id}.json", sidecar.model_dump(mode="json"))
    return path


def load_episode(directory: str | Path, episode_id: str) -> Episode:
    directory = Path(directory)
    meta = _read_sidecar(directory / f"{episode_id}.json", EpisodeSidecar)
    return Episode(
        id=meta.id,
        seed=meta.seed,
        params=meta.params,
        grid=meta.grid,
        protocol=meta.protocol,
        vm=read_movie(directory / f"{episode_id}.deap"),
        label=meta.label,
        flags=meta.flags,
        cycle_length_ms=meta.cycle_length_ms,
        substrate=meta.substrate,
    )


def save_recording(directory: str | Path, rec: EgmRecording) -> Path:
    """Traces stored as one frame with ny = channels and nx = samples."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = write_frames(directory / f"{rec.id}.deap", rec.traces, 1000.0 / rec.fs_hz, 0.0)
    sidecar = RecordingSidecar(
        id=rec.id,
        episode_id=rec.episode_id,
        array_name=rec.array_name,
        pose=rec.pose,
        noise=rec.noise,
        noise_meta=rec.noise_meta,
        fs_hz=rec.fs_hz,
    )
    _write_json(directory / f"{rec.id}.json", sidecar.model_dump(mode="json"))
    return path


def load_recording(directory: str | Path, recording_id: str) -> EgmRecording:
    directory = Path(directory)
    meta = _read_sidecar(directory / f"{recording_id}.json", RecordingSidecar)
    frames, _, _ = read_frames(directory / f"{recording_id}.deap")
    return EgmRecording(
        id=meta.id,
        traces=frames[0].astype(np.float64),
        episode_id=meta.episode_id,
        array_name=meta.array_name,
        pose=meta.pose,
        noise=meta.noise,
        fs_hz=meta.fs_hz,
        noise_meta=meta.noise_meta,
    )


def artifact_ids(directory: str | Path) -> list[str]:
    """Ids of every container in a stage directory, sorted."""
    return sorted(path.stem for path in Path(directory).glob("*.deap"))


def write_recording_csv(path: str | Path, rec: EgmRecording) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["time_ms"] + [f"ch{i:02d}" for i in range(rec.n_channels)])
        dt_ms = 1000.0 / rec.fs_hz
        for k in range(rec.n_samples):
            writer.writerow([f"{k * dt_ms:g}"] + [f"{v:.6g}" for v in rec.traces[:, k]])
    return path


def write_activations_csv(path: str | Path, times_ms: list[np.ndarray]) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["electrode", "time_ms"])
        for electrode, times in enumerate(times_ms):
            for t in times:
                writer.writerow([electrode, f"{t:g}"])
    return path


def save_model(directory: str | Path, model: DeapNet) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    weights = directory / "model.npz"
    np.savez(weights, **model.state_dict())
    manifest = {
        "architecture": model.spec.model_dump(),
        "seed": model.seed,
        "n_parameters": model.n_parameters,
        "channel_mean": model.channel_mean.tolist(),
        "channel_std": model.channel_std.tolist(),
        "training": model.manifest,
        "git_describe": git_describe(),
        "weights_sha256": sha256_file(weights),
    }
    sidecar = directory / "model.json"
    _write_json(sidecar, manifest)
    return weights, sidecar


def load_model(directory: str | Path) -> DeapNet:
    directory = Path(directory)
    sidecar = directory / "model.json"
    weights = directory / "model.npz"
    try:
        with sidecar.open("r", encoding="utf-8") as f:
            meta = json.load(f)
    except FileNotFoundError as exc:
        raise ArtifactError("model", None, f"missing {sidecar}") from exc
    expected = meta.get("weights_sha256")
    if not weights.exists():
        raise ArtifactError("model", expected, f"missing {weights}")
    if expected and sha256_file(weights) != expected:
        raise ArtifactError("model", expected, "weight file hash mismatch")
    model = DeapNet(ArchSpec(**meta["architecture"]), seed=meta.get("seed", 0))
    with np.load(weights) as blobs:
        model.load_state_dict({name: blobs[name] for name in blobs.files})
    model.channel_mean = np.asarray(meta["channel_mean"], dtype=np.float64)
    model.channel_std = np.asarray(meta["channel_std"], dtype=np.float64)
    model.manifest = meta.get("training", {})
    return model


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=5, check=True
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def package_versions() -> dict[str, str]:
    versions = {}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "missing"
    return versions


class StageManifest(BaseModel):
    stage: str
    seed: int
    config: dict
    config_sha256: str
    inputs: dict[str, str] = {}
    outputs: dict[str, str] = {}
    versions: dict[str, str] = {}
    timings: dict[str, float] = {}
    extra: dict = {}


def hash_outputs(directory: str | Path, patterns: tuple[str, ...] = ("*.deap", "*.json", "*.npz", "*.csv", "*.svg", "*.png", "*.html")) -> dict[str, str]:
    directory = Path(directory)
    files = {p for pattern in patterns for p in directory.glob(pattern) if p.name != MANIFEST_NAME}
    return {p.name: sha256_file(p) for p in sorted(files)}


def write_manifest(
    directory: str | Path,
    stage: str,
    config: RunConfig,
    inputs: dict[str, str] | None = None,
    started: float | None = None,
    extra: dict | None = None,
) -> StageManifest:
    """Hash every output of a stage and record how it was produced."""
    directory = Path(directory)
    manifest = StageManifest(
        stage=stage,
        seed=config.seed,
        config=config.model_dump(mode="json"),
        config_sha256=config.sha256,
        inputs=inputs or {},
        outputs=hash_outputs(directory),
        versions=package_versions(),
        # wall clock lives here only, never in payload files
        timings={"seconds": round(time.perf_counter() - started, 3)} if started is not None else {},
        extra=extra or {},
    )
    _write_json(directory / MANIFEST_NAME, manifest.model_dump(mode="json"))
    return manifest


def read_manifest(directory: str | Path) -> StageManifest:
    path = Path(directory) / MANIFEST_NAME
    try:
        with path.open("r", encoding="utf-8") as f:
            return StageManifest.model_validate(json.load(f))
    except FileNotFoundError as exc:
        raise ArtifactError(Path(directory).name, None, f"missing {path}") from exc
    except (json.JSONDecodeError, ValidationError) as exc:
        raise ArtifactError(Path(directory).name, None, f"corrupt manifest: {exc}") from exc


def verify_stage(directory: str | Path) -> dict[str, str]:
    """Re-hash an upstream stage's outputs; returns them as this stage's input hashes."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    verified = {}
    for name, expected in manifest.outputs.items():
        path = directory / name
        artifact = Path(name).stem
        if not path.exists():
            raise ArtifactError(artifact, expected, f"missing file {path}")
        actual = sha256_file(path)
        if actual != expected:
            raise ArtifactError(artifact, expected, f"hash mismatch, found {actual}")
        verified[f"{directory.name}/{name}"] = actual
    LOGGER.debug("Verified stage %s (%d files)", directory, len(verified))
    return verified
