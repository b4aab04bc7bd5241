"""Run configuration: a flat ``section.key = value`` text file with strict keys.

Lines starting with ``#`` and blank lines are ignored. Every key has a
typed default; unknown keys, duplicate keys and unparsable values are
rejected. Relative paths resolve against the config file's directory. The
``SPEAKERVC_SEED`` environment variable, when set, replaces every seed.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

from .audio import MEL_CONFIGS

SEED_ENV = "SPEAKERVC_SEED"


class ConfigError(ValueError):
    pass


# key: (default, help)
SCHEMA: dict[str, tuple[object, str]] = {
    "paths.corpus": ("work/corpus", "voiced training corpus directory"),
    "paths.checkpoint": ("work/ckpt", "checkpoint directory (manifest.json plus component files)"),
    "paths.reports": ("work/reports", "report, protocol, plot and stamp directory"),
    "data.n_speakers": (20, "speakers in the synthetic corpus"),
    "data.utts_per_speaker": (10, "utterances per speaker"),
    "data.noisy_fraction": (0.1, "fraction of utterances mixed with background noise"),
    "data.min_snr_db": (10.0, "SNR filter threshold in dB"),
    "data.min_duration_s": (1.0, "minimum utterance duration kept by the filter"),
    "data.workers": (1, "parallel synthesis workers (output is independent of this)"),
    "mel.decoder": ("decoder", "mel parameterisation the decoders predict"),
    "mel.speaker": ("speaker", "mel parameterisation the speaker encoder reads"),
    "units.k": (64, "k-means clusters (soft-unit dimension)"),
    "units.projection_epochs": (20, "soft-unit projection training epochs"),
    "speaker.embed_dim": (64, "speaker embedding dimension d_s"),
    "speaker.epochs": (30, "speaker encoder training epochs"),
    "adaptor.epochs": (20, "mel adaptor training epochs"),
    "decoder.style_dim": (32, "acoustic style dimension d_st"),
    "decoder.stage1_epochs": (40, "stage 1 (reconstruction) epochs"),
    "decoder.stage2_epochs": (20, "stage 2 (prosody predictors) epochs"),
    "decoder.stage3_epochs": (10, "stage 3 (speaker loss fine-tuning) epochs"),
    "decoder.sl_weight": (1.0, "speaker loss weight in stage 3"),
    "decoder.batch_size": (16, "decoder minibatch size"),
    "decoder.lr": (2e-3, "decoder learning rate"),
    "decoder.whisper_prob": (0.5, "probability of feeding the whispered twin as content"),
    "stream.chunk_s": (0.2, "streaming chunk length in seconds"),
    "stream.delay_s": (0.8, "streaming total delay in seconds"),
    "stream.context_s": (2.0, "streaming past context in seconds"),
    "eval.n_targets": (2, "conversion targets per source utterance"),
    "eval.n_nontarget": (5, "nontarget enrollments per conversion"),
    "eval.gl_iterations": (32, "Griffin-Lim iterations for waveform output"),
    "seeds.data": (7, "corpus synthesis seed"),
    "seeds.train": (0, "training seed"),
    "seeds.eval": (0, "protocol construction seed"),
}


def _parse(key: str, raw: str):
    default = SCHEMA[key][0]
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


class RunConfig:
    def __init__(self, values: dict | None = None, base_dir=None):
        self.base_dir = Path(base_dir or ".").resolve()
        self.values = {k: v for k, (v, _) in SCHEMA.items()}
        for k, v in (values or {}).items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            self.values[k] = _parse(k, v) if isinstance(v, str) else v
        seed = os.environ.get(SEED_ENV)
        if seed is not None:
            try:
                s = int(seed)
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}") from None
            for k in SCHEMA:
                if k.startswith("seeds."):
                    self.values[k] = s
        self.validate()

    @classmethod
    def from_text(cls, text: str, base_dir=None) -> "RunConfig":
        values: dict[str, str] = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in SCHEMA:
                raise ConfigError(f"line {n}: unknown config key {k!r}")
            if k in values:
                raise ConfigError(f"line {n}: duplicate key {k!r}")
            values[k] = v
        return cls(values, base_dir)

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        if path is None:
            cfg = cls()
        else:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            cfg = cls.from_text(p.read_text(), p.parent)
        if overrides:
            values = dict(cfg.values)
            for k, v in overrides.items():
                if k not in SCHEMA:
                    raise ConfigError(f"unknown config key {k!r}")
                values[k] = _parse(k, v) if isinstance(v, str) else v
            cfg = cls(values, cfg.base_dir)
        return cfg

    def validate(self) -> None:
        v = self.values
        for k, (default, _) in SCHEMA.items():
            if isinstance(default, (int, float)) and not isinstance(default, bool) and v[k] < 0:
                raise ConfigError(f"{k} must be >= 0")
        for k in ("data.n_speakers", "data.utts_per_speaker"):
            if v[k] < 2:
                raise ConfigError(f"{k} must be >= 2")
        for k in ("units.k", "speaker.embed_dim", "decoder.style_dim", "decoder.batch_size", "eval.n_targets",
                  "eval.n_nontarget", "eval.gl_iterations", "data.workers"):
            if v[k] < 1:
                raise ConfigError(f"{k} must be >= 1")
        if not 0 <= v["data.noisy_fraction"] <= 1 or not 0 <= v["decoder.whisper_prob"] <= 1:
            raise ConfigError("fractions and probabilities must lie in [0, 1]")
        if v["mel.decoder"] != "decoder":
            raise ConfigError("mel.decoder: the decoders only support the 'decoder' parameterisation")
        if v["mel.speaker"] not in MEL_CONFIGS:
            raise ConfigError(f"mel.speaker: unknown mel config {v['mel.speaker']!r}; "
                              f"choose from {sorted(MEL_CONFIGS)}")
        if not (v["stream.chunk_s"] > 0 and v["stream.delay_s"] > 0):
            raise ConfigError("stream.chunk_s and stream.delay_s must be positive")
        if v["stream.chunk_s"] > v["stream.delay_s"]:
            raise ConfigError("stream.chunk_s must not exceed stream.delay_s")
        for k in ("paths.corpus", "paths.checkpoint", "paths.reports"):
            p = self.path(k)
            if p.exists() and not p.is_dir():
                raise ConfigError(f"{k}: {p} exists and is not a directory")
            anchor = next(a for a in [p, *p.parents] if a.exists())
            if not anchor.is_dir():
                raise ConfigError(f"{k}: {p} cannot be created under {anchor}")

    def __getitem__(self, key: str):
        return self.values[key]

    def path(self, key: str) -> Path:
        p = Path(self.values[key])
        return p if p.is_absolute() else self.base_dir / p

    @property
    def seeds(self) -> dict:
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("seeds.")}

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.values.items())

    def digest(self) -> str:
        """Hash of the configuration values; paths count as written, not as resolved."""
        return hashlib.sha256(json.dumps(self.values, sort_keys=True).encode()).hexdigest()


def describe_keys() -> str:
    width = max(map(len, SCHEMA))
    return "\n".join(f"  {k:<{width}}  {h} (default: {d})" for k, (d, h) in SCHEMA.items())
