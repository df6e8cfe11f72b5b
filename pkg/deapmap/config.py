import hashlib
import json
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from deapmap.errors import ConfigError

THREADS_ENV = "DEAP_THREADS"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TissueSection(_Section):
    k: float = Field(8.0, gt=0)
    a: float = Field(0.15, gt=0, lt=0.5)
    eps0: float = Field(0.002, gt=0)
    mu1: float = Field(0.2, gt=0)
    mu2: float = Field(0.3, gt=0)
    d0: float = Field(0.1, gt=0)
    # APD ~120 ms
    time_scale_ms: float = Field(5.0, gt=0)
    nx: int = Field(128, ge=16)
    ny: int = Field(128, ge=16)
    dx_mm: float = Field(0.25, gt=0)
    protocol: Literal["s1", "s1s2", "burst", "fibrillation"] = "fibrillation"
    n_patches: int = Field(8, ge=0)
    severity: float = Field(0.6, ge=0, le=1)
    burst_cycle_ms: float = Field(90.0, gt=0)
    burst_beats: int = Field(8, ge=1)
    duration_ms: int = Field(2000, ge=500)
    n_episodes: int = Field(40, ge=1)


class SensingSection(_Section):
    array: Literal["pentagon", "spiral"] = "pentagon"
    rotation_deg: float = 0.0
    tx_mm: float = 0.0
    ty_mm: float = 0.0
    height_mm: float = Field(1.0, gt=0)
    snr_db: float | None = 20.0
    line_amplitude: float = Field(0.0, ge=0)


class BaselineSection(_Section):
    blanking_ms: float = Field(50.0, gt=0)
    threshold_fraction: float = Field(0.4, gt=0, le=1)
    apd90_ms: float = Field(120.0, gt=0)


class PhaseSection(_Section):
    radius_cells: int = Field(3, ge=1)
    edge_ms: int = Field(50, ge=0)
    isochrone_step_ms: float = Field(10.0, gt=0)
    isochrone_window_ms: tuple[float, float] | None = None


class DatasetSection(_Section):
    split_seed: int = 0
    train_stride_ms: int = Field(4, ge=1)
    eval_stride_ms: int = Field(1, ge=1)
    min_episodes: int = Field(10, ge=1)


class ModelSection(_Section):
    window_ms: int = Field(96, ge=32)
    grid: int = Field(32, ge=8, multiple_of=8)
    temporal_channels: int = Field(8, ge=1)
    latent: int = Field(256, ge=1, le=512)
    decoder_channels: int = Field(64, ge=4)


class TrainingSection(_Section):
    learning_rate: float = Field(1e-3, gt=0)
    batch_size: int = Field(32, ge=1)
    max_epochs: int = Field(50, ge=1)
    patience: int = Field(5, ge=1)
    seed: int = 0


class RunConfig(_Section):
    seed: int = 0
    output_dir: str = "runs/default"
    threads: int | None = Field(None, ge=1)
    tissue: TissueSection = TissueSection()
    sensing: SensingSection = SensingSection()
    baseline: BaselineSection = BaselineSection()
    phase: PhaseSection = PhaseSection()
    dataset: DatasetSection = DatasetSection()
    model: ModelSection = ModelSection()
    training: TrainingSection = TrainingSection()

    @property
    def sha256(self) -> str:
        return config_sha(self)


def config_sha(config: RunConfig) -> str:
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(item, "override must look like section.key=value")
    key, raw = item.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def apply_dot_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply `section.key=value` overrides on top of a raw config mapping."""
    merged = json.loads(json.dumps(data))
    for item in overrides:
        path, value = _parse_override(item)
        node = merged
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(".".join(path), f"'{part}' is not a section")
            node = child
        node[path[-1]] = value
    return merged


def validate_config(data: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        error = exc.errors()[0]
        field = ".".join(str(part) for part in error["loc"]) or "<root>"
        raise ConfigError(field, error["msg"]) from exc


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Resolve the effective config: flags > file > defaults."""
    data: dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        try:
            with config_path.open("r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except FileNotFoundError as exc:
            raise ConfigError("<file>", f"config file not found: {config_path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"could not parse {config_path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config file must hold a mapping of sections")
    return validate_config(apply_dot_overrides(data, overrides or []))


def dump_config(config: RunConfig, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        yaml.safe_dump(config.model_dump(mode="json"), f, sort_keys=False)


def resolve_threads(config: RunConfig) -> int:
    if config.threads:
        return config.threads
    env = os.environ.get(THREADS_ENV, "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError("threads", f"{THREADS_ENV}={env!r} is not an integer") from exc
    return 1
