import pytest

from speakervc.config import SCHEMA, SEED_ENV, ConfigError, RunConfig, describe_keys


def test_defaults_valid(tmp_path):
    cfg = RunConfig(base_dir=tmp_path)
    assert cfg["units.k"] == 64
    assert cfg.path("paths.corpus") == tmp_path / "work/corpus"


def test_text_round_trip(tmp_path):
    cfg = RunConfig.from_text("units.k = 32  # fewer clusters\n\ndecoder.sl_weight = 0.5\n", tmp_path)
    assert cfg["units.k"] == 32 and cfg["decoder.sl_weight"] == 0.5
    again = RunConfig.from_text(cfg.to_text(), tmp_path)
    assert again.values == cfg.values and again.digest() == cfg.digest()


@pytest.mark.parametrize("text,match", [
    ("units.kk = 3", "unknown"),
    ("units.k = 3\nunits.k = 4", "duplicate"),
    ("units.k = many", "cannot parse"),
    ("units.k", "key = value"),
    ("units.k = 0", ">= 1"),
    ("stream.chunk_s = 2.0", "must not exceed"),
    ("mel.speaker = cochlear", "unknown mel config"),
    ("data.noisy_fraction = 1.5", r"\[0, 1\]"),
])
def test_strict_parsing(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.from_text(text, tmp_path)


def test_paths_must_be_directories(tmp_path):
    (tmp_path / "f").write_text("")
    with pytest.raises(ConfigError, match="not a directory"):
        RunConfig.from_text("paths.corpus = f", tmp_path)
    with pytest.raises(ConfigError, match="cannot be created"):
        RunConfig.from_text("paths.reports = f/sub", tmp_path)


def test_load_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("units.k = 8\n")
    cfg = RunConfig.load(p, {"speaker.epochs": "3"})
    assert cfg["units.k"] == 8 and cfg["speaker.epochs"] == 3
    assert cfg.base_dir == tmp_path
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.load(p, {"nope": "1"})
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.load(tmp_path / "missing.cfg")


def test_seed_env_overrides_every_seed(tmp_path, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "42")
    cfg = RunConfig.from_text("seeds.data = 3", tmp_path)
    assert cfg.seeds == {"data": 42, "train": 42, "eval": 42}
    monkeypatch.setenv(SEED_ENV, "x")
    with pytest.raises(ConfigError, match=SEED_ENV):
        RunConfig(base_dir=tmp_path)


def test_every_key_documented():
    text = describe_keys()
    assert all(k in text for k in SCHEMA)
