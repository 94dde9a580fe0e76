"""One declarative run configuration shared by every stage, stored as YAML."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import dsp
from .configio import fingerprint, from_dict, to_dict
from .corpus import SynthSpec
from .errors import ConfigError
from .evalkit import EvalConfig
from .pipeline import PipelineConfig
from .senet import SeTrainConfig
from .ugan.training import UganConfig


@dataclass(frozen=True)
class MixConfig:
    clean_dir: str | None = None
    noise_dir: str | None = None
    snrs: tuple[float, ...] = (-6.0, 0.0, 6.0, 12.0)
    domain: str = "source"
    subtype: str = "float32"


@dataclass(frozen=True)
class CorpusConfig:
    manifest: str | None = None
    target_manifest: str | None = None
    eval_manifest: str | None = None
    upper_bound_manifest: str | None = None
    synth: SynthSpec = field(default_factory=SynthSpec)
    mix: MixConfig = field(default_factory=MixConfig)


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    stft: dsp.StftConfig = field(default_factory=dsp.StftConfig)
    ugan: UganConfig = field(default_factory=UganConfig)
    senet: SeTrainConfig = field(default_factory=SeTrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self)


# headline defaults, also echoed into the CLI help
DEFAULTS_TABLE = (
    ("stft", "fft_size / hop", "256 / 64  (129 x 128 magnitude segments)"),
    ("ugan.generator", "n_resnet_blocks", "9"),
    ("ugan.generator", "n_attention_layers", "3"),
    ("ugan.nce", "n_patches / proj_dim", "256 / 256"),
    ("ugan.nce", "layers", "input, downsample-1, downsample-2, resblock-1, resblock-5"),
    ("ugan", "alpha / beta", "1 / 1"),
    ("ugan", "lr (Adam)", "0.002"),
    ("senet.model", "n_tcn_blocks", "4  (dilations 1, 2, 4, 8)"),
    ("senet", "lr (Adam)", "0.001"),
)


def defaults_help() -> str:
    width = max(len(f"{s}.{k}") for s, k, _ in DEFAULTS_TABLE)
    return "\n".join(f"  {f'{s}.{k}':<{width}}  {v}" for s, k, v in DEFAULTS_TABLE)


def parse_config(data) -> RunConfig:
    return from_dict(RunConfig, data or {}, "")


def load_config(path) -> RunConfig:
    """Read a YAML config. Missing sections and fields take their defaults; unknown keys are errors."""
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})", "<root>") from exc
    return parse_config(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=False)


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
    return path
