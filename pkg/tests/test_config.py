from pathlib import Path

import pytest

from app.core.config import Settings, get_settings
from app.core.errors import ConfigError
from app.schemas.config import (
    Distribution,
    Modality,
    RunConfig,
    dump_flat_config,
    load_run_config,
    parse_flat_config,
)
from app.schemas.report import SpeedBin


def test_settings_read_the_environment():
    settings = get_settings()
    assert settings.api_key == "test-key"
    assert settings.workers == 1
    assert settings.fps_target == 45.0


def test_cors_origins():
    assert Settings(allowed_origins="*").cors_origins == ["*"]
    assert Settings(allowed_origins="http://a, http://b").cors_origins == ["http://a", "http://b"]


class TestFlatConfig:
    def test_parse_nested_keys_and_comments(self):
        tree = parse_flat_config("# run\namq.n = 2\nm3d.consistency.lambda = 0.4  # spatial\n\nseed=3\n")
        assert tree == {"amq": {"n": "2"}, "m3d": {"consistency": {"lambda": "0.4"}}, "seed": "3"}

    def test_parse_rejects_bare_words(self):
        with pytest.raises(ConfigError):
            parse_flat_config("amq.n\n")

    def test_scalar_conflict(self):
        with pytest.raises(ConfigError):
            parse_flat_config("amq = 1\namq.n = 2\n")

    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("amq.n = 2\nrpf.sampler.distribution = laplace\nmodality = event\n")
        cfg = load_run_config(path, {"amq.n": 3, "seed": None, "m3d.consistency.lambda": "0.5"})
        assert cfg.amq.n == 3
        assert cfg.seed == 0
        assert cfg.rpf.sampler.distribution is Distribution.LAPLACE
        assert cfg.modality is Modality.EVENT
        assert cfg.m3d.consistency.lambda_ == 0.5

    def test_defaults(self):
        cfg = load_run_config()
        assert cfg.amq.n == 4
        assert cfg.amq.alpha == 0.5
        assert cfg.rpf.sampler.count == 64
        assert cfg.m3d.consistency.lambda_ == 0.3
        assert cfg.m3d.lk.levels == 3

    @pytest.mark.parametrize(
        "overrides",
        [{"amq.alpha": "0"}, {"amq.n": "-1"}, {"m3d.lk.window": "8"}, {"modality": "infrared"}],
    )
    def test_invalid_values(self, overrides):
        with pytest.raises(ConfigError) as exc:
            load_run_config(None, overrides)
        assert exc.value.exit_code == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "nope.conf")

    def test_dump_round_trip(self, tmp_path):
        cfg = RunConfig(dataset=Path("d"), out=Path("o"))
        cfg.amq.n = 1
        cfg.rpf.sampler.beta = 0.05
        path = tmp_path / "dump.conf"
        path.write_text(dump_flat_config(cfg))
        assert load_run_config(path) == cfg


def test_modality_eyes():
    assert Modality.RGB.eyes() == ("rgb", "rgb")
    assert Modality.MIXED.eyes() == ("rgb", "event")


@pytest.mark.parametrize(
    "velocity,expected",
    [(0.0, SpeedBin.REGULAR), (44.99, SpeedBin.REGULAR), (45.0, SpeedBin.MEDIUM), (179.9, SpeedBin.MEDIUM), (180.0, SpeedBin.FASTER)],
)
def test_speed_bin_edges(velocity, expected):
    assert SpeedBin.of(velocity) is expected
