"""Run configuration: a nested key-value text format (dotted keys), typed
sub-configs, cross-module consistency validation, and content hashing.

Every artifact a run produces records the hash of the configuration that
made it; artifacts from different hashes must not be mixed.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..armodel import ArConfig
from ..cmx import CmxDescriptor, plan_cmx
from ..dsp import MelConfig, StftConfig
from ..errors import InvalidConfigError
from ..tokenizer import CodecConfig, TokenizerConfig


@dataclass(frozen=True)
class DataConfig:
    manifest: str = "manifest.jsonl"
    sample_rate: int = 16000
    clip_seconds: float = 4.0
    nonconforming: str = "skip"      # skip | resample | error

    def __post_init__(self):
        if self.sample_rate <= 0 or self.clip_seconds <= 0:
            raise InvalidConfigError("sample_rate and clip_seconds must be positive")
        if self.nonconforming not in ("skip", "resample", "error"):
            raise InvalidConfigError("nonconforming must be skip, resample, or error")


@dataclass(frozen=True)
class CmxConfig:
    target_h: int = 256
    target_w: int = 256
    mode: str = "interleave"


@dataclass(frozen=True)
class TrainConfig:
    tokenizer_steps: int = 800
    tokenizer_lr: float = 2e-3
    ar_steps: int = 600
    ar_lr: float = 1e-3
    batch: int = 8
    checkpoint_every: int = 100

    def __post_init__(self):
        if min(self.tokenizer_steps, self.ar_steps, self.batch, self.checkpoint_every) < 1:
            raise InvalidConfigError("training budgets must be positive")


@dataclass(frozen=True)
class MetricsConfig:
    ndb_k: int = 10
    ndb_alpha: float = 0.05
    fad_provider: str = "mel_stats"      # mel_stats | external:<path prefix>
    classifier_hidden: int = 64
    classifier_steps: int = 300
    pitch_classes: int = 12              # pitch is folded modulo this count
    min_distribution_samples: int = 4

    def __post_init__(self):
        if self.ndb_k < 2:
            raise InvalidConfigError("ndb_k must be >= 2")
        if not (0 < self.ndb_alpha < 1):
            raise InvalidConfigError("ndb_alpha must lie in (0, 1)")


@dataclass(frozen=True)
class GenerateConfig:
    griffin_lim_iters: int = 64
    bit_depth: str = "16"
    save_intermediates: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 0                     # 0 = library default
    data: DataConfig = field(default_factory=DataConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    mel: dict = field(default_factory=lambda: {"n_mels": 64, "f_min": 0.0, "f_max": 8000.0})
    cmx: CmxConfig = field(default_factory=CmxConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    ar: ArConfig = field(default_factory=ArConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)

    def __post_init__(self):
        self.validate()

    # ---- derived objects ----
    @property
    def freq_bins(self) -> int:
        return self.stft.trimmed_bins

    @property
    def spectrogram_frames(self) -> int:
        """Frame count the waveform is padded/cropped to: chosen so the
        packed tensor lands exactly on the tokenizer's input shape."""
        if self.freq_bins % self.cmx.target_h != 0:
            raise InvalidConfigError(
                f"cmx.target_h={self.cmx.target_h} does not divide {self.freq_bins} rows")
        factor_h = self.freq_bins // self.cmx.target_h
        if self.tokenizer.channels % factor_h != 0:
            raise InvalidConfigError(
                f"tokenizer channels {self.tokenizer.channels} not reachable with "
                f"frequency factor {factor_h}")
        factor_w = self.tokenizer.channels // factor_h
        return self.cmx.target_w * factor_w

    def descriptor(self) -> CmxDescriptor:
        return plan_cmx(self.freq_bins, self.spectrogram_frames,
                        self.cmx.target_h, self.cmx.target_w, self.cmx.mode)

    def mel_config(self) -> MelConfig:
        return MelConfig(n_mels=int(self.mel["n_mels"]), f_min=float(self.mel["f_min"]),
                         f_max=float(self.mel["f_max"]), stft=self.stft,
                         sample_rate=self.data.sample_rate)

    def codec(self, norm_mean: float = 0.0, norm_std: float = 1.0) -> CodecConfig:
        return CodecConfig(self.stft, self.descriptor(), self.data.sample_rate,
                           self.spectrogram_frames, norm_mean, norm_std,
                           self.generate.griffin_lim_iters)

    def validate(self):
        desc = self.descriptor()
        if desc.out_shape != (self.tokenizer.channels, self.tokenizer.grid, self.tokenizer.grid):
            raise InvalidConfigError(
                f"cmx output {desc.out_shape} does not match tokenizer input "
                f"{(self.tokenizer.channels, self.tokenizer.grid, self.tokenizer.grid)}")
        if tuple(self.ar.schedule) != tuple(self.tokenizer.schedule):
            raise InvalidConfigError("tokenizer and ar model must share one scale schedule")
        if self.ar.vocab_size != self.tokenizer.codebook_size:
            raise InvalidConfigError("ar vocab must equal the tokenizer codebook size")
        if self.ar.code_dim != self.tokenizer.code_dim:
            raise InvalidConfigError("ar code_dim must equal the tokenizer code_dim")
        mel_cfg = self.mel_config()
        if mel_cfg.n_mels > self.freq_bins:
            raise InvalidConfigError("mel.n_mels exceeds available frequency rows")


# -----------------------------
# Dotted key-value serialization
# -----------------------------
_SECTIONS = ("data", "stft", "cmx", "tokenizer", "ar", "train", "metrics", "generate")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() not in ("true", "false"):
            raise InvalidConfigError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(int(x) for x in text.split(",") if x.strip())
    return text


def to_flat(cfg: RunConfig) -> dict[str, str]:
    flat = {"run.seed": str(cfg.seed), "run.threads": str(cfg.threads)}
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            flat[f"{section}.{f.name}"] = _format_value(getattr(obj, f.name))
    for key, value in cfg.mel.items():
        flat[f"mel.{key}"] = _format_value(value)
    return flat


def to_text(cfg: RunConfig) -> str:
    lines = [f"{k} = {v}" for k, v in sorted(to_flat(cfg).items())]
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(to_text(cfg).encode("utf-8")).hexdigest()[:16]


def parse_entries(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in entries:
            raise InvalidConfigError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = value.strip()
    return entries


def from_entries(entries: dict[str, str]) -> RunConfig:
    base = RunConfig()
    defaults = to_flat(base)
    unknown = sorted(set(entries) - set(defaults))
    if unknown:
        raise InvalidConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = {**defaults, **entries}

    def section_kwargs(name: str, proto) -> dict:
        out = {}
        for f in fields(proto):
            raw = merged[f"{name}.{f.name}"]
            out[f.name] = _parse_value(raw, getattr(proto, f.name))
        return out

    mel = {key: _parse_value(merged[f"mel.{key}"], base.mel[key]) for key in base.mel}
    return RunConfig(
        seed=int(merged["run.seed"]),
        threads=int(merged["run.threads"]),
        data=DataConfig(**section_kwargs("data", base.data)),
        stft=StftConfig(**section_kwargs("stft", base.stft)),
        mel=mel,
        cmx=CmxConfig(**section_kwargs("cmx", base.cmx)),
        tokenizer=TokenizerConfig(**section_kwargs("tokenizer", base.tokenizer)),
        ar=ArConfig(**section_kwargs("ar", base.ar)),
        train=TrainConfig(**section_kwargs("train", base.train)),
        metrics=MetricsConfig(**section_kwargs("metrics", base.metrics)),
        generate=GenerateConfig(**section_kwargs("generate", base.generate)),
    )


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise InvalidConfigError(f"config file not found: {p}")
    return from_entries(parse_entries(p.read_text()))


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(to_text(cfg))
