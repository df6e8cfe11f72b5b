import pytest

from deapmap.config import RunConfig, dump_config, load_config, resolve_threads
from deapmap.errors import ConfigError


def test_defaults():
    config = load_config()
    assert config.tissue.nx == 128
    assert config.tissue.dx_mm == 0.25
    assert config.tissue.time_scale_ms == 5.0
    assert config.sensing.array == "pentagon"
    assert config.model.window_ms == 96
    assert config.dataset.min_episodes == 10


def test_unknown_field_is_named(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("tissue:\n  bogus: 3\n")
    with pytest.raises(ConfigError) as excinfo:
        load_config(path)
    assert excinfo.value.field == "tissue.bogus"


def test_out_of_range_value():
    with pytest.raises(ConfigError) as excinfo:
        load_config(overrides=["model.grid=12"])
    assert excinfo.value.field == "model.grid"


def test_overrides_beat_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 4\ntissue:\n  nx: 64\n  protocol: s1s2\n")
    config = load_config(path, ["tissue.nx=32", "sensing.snr_db=null"])
    assert config.seed == 4
    assert config.tissue.nx == 32
    assert config.tissue.protocol == "s1s2"
    assert config.sensing.snr_db is None


def test_malformed_override():
    with pytest.raises(ConfigError):
        load_config(overrides=["tissue.nx"])


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_dump_and_reload(tmp_path):
    config = load_config(overrides=["seed=11", "phase.isochrone_window_ms=[100, 300]"])
    dump_config(config, tmp_path / "out.yaml")
    again = load_config(tmp_path / "out.yaml")
    assert again == config
    assert again.sha256 == config.sha256
    assert again.sha256 != RunConfig().sha256


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv("DEAP_THREADS", "3")
    assert resolve_threads(RunConfig()) == 3
    assert resolve_threads(RunConfig(threads=2)) == 2
    monkeypatch.setenv("DEAP_THREADS", "many")
    with pytest.raises(ConfigError):
        resolve_threads(RunConfig())
