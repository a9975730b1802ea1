"""Run configuration: one TOML (or JSON) file with a section per stage."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .corpus import DEFAULT_PREFIXES

REPORT_DIR_ENV = "PROMPTMIX_REPORT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    sentences_per_attribute: int = 300
    cross_family_rate: float = 1.0
    documents: int = 600
    document_min_sentences: int = 1
    document_max_sentences: int = 5
    document_marker_rate: float = 1.0
    palette: int = 2
    seed: int = 0
    external: str = ""  # labelled corpus file used instead of the generator


@dataclass
class ModelSection:
    d_emb: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_positions: int = 256
    dropout_rate: float = 0.0
    seed: int = 0


@dataclass
class PretrainConfig:
    epochs: int = 120
    batch_size: int = 16
    lr: float = 3e-3
    window: int = 64
    seed: int = 0


@dataclass
class PromptConfig:
    length: int = 16
    epochs: int = 60
    batch_size: int = 32
    lr: float = 3e-2
    seed: int = 0


@dataclass
class ClassifierConfig:
    epochs: int = 60
    lr: float = 0.05
    held_out_fraction: float = 0.1
    seed: int = 0


@dataclass
class ConnectorConfig:
    length: int = 8
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-2
    pseudo_mode: str = "argmax"
    # the layout itself defaults to plain concatenation; the run default trains
    # the connector on the masked, relative-position layout
    use_mask: bool = True
    use_rp: bool = True
    seed: int = 0


@dataclass
class DecodeSection:
    strategy: str = "top-k"
    k: int = 10
    temperature: float = 1.0
    max_new_tokens: int = 64
    seed: int = 42


@dataclass
class EvalConfig:
    prefixes: list[str] = field(default_factory=lambda: list(DEFAULT_PREFIXES))
    samples_per_prefix: int = 20
    judge: str = "oracle"  # or "classifier"
    ppl: bool = True


@dataclass
class RunConfig:
    workdir: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    connector: ConnectorConfig = field(default_factory=ConnectorConfig)
    decode: DecodeSection = field(default_factory=DecodeSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    # artifact locations ----------------------------------------------------

    @property
    def root(self) -> Path:
        return Path(self.workdir)

    @property
    def report_dir(self) -> Path:
        return Path(os.environ.get(REPORT_DIR_ENV) or self.root / "reports")

    def path(self, name: str) -> Path:
        return self.root / ARTIFACTS[name]


ARTIFACTS = {
    "corpus": "corpus.tsv",
    "documents": "documents.txt",
    "vocab": "vocab.txt",
    "model": "model.ckpt",
    "prompts": "prompts.store",
    "connector": "connector.bin",
    "dumps": "dumps",
}


_SECTION_TYPES = {
    "corpus": CorpusConfig,
    "model": ModelSection,
    "pretrain": PretrainConfig,
    "prompt": PromptConfig,
    "classifier": ClassifierConfig,
    "connector": ConnectorConfig,
    "decode": DecodeSection,
    "eval": EvalConfig,
}


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{section}.{key} must be a list of strings")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{section}.{key} must be a string, got {value!r}")
    return value


def from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in data.items():
        if key == "workdir":
            cfg.workdir = _coerce("", "workdir", value, "")
            continue
        if key not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section [{key}]")
        if not isinstance(value, dict):
            raise ConfigError(f"[{key}] must be a table")
        section = getattr(cfg, key)
        for k, v in value.items():
            if not hasattr(section, k):
                raise ConfigError(f"unknown key {key}.{k}")
            setattr(section, k, _coerce(key, k, v, getattr(section, k)))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.decode.strategy not in ("greedy", "top-k"):
        raise ConfigError("decode.strategy must be greedy or top-k")
    if cfg.connector.pseudo_mode not in ("argmax", "weighted"):
        raise ConfigError("connector.pseudo_mode must be argmax or weighted")
    if cfg.eval.judge not in ("oracle", "classifier"):
        raise ConfigError("eval.judge must be oracle or classifier")
    if not cfg.eval.prefixes:
        raise ConfigError("eval.prefixes is empty")
    for name in ("sentences_per_attribute", "documents"):
        if getattr(cfg.corpus, name) < 1:
            raise ConfigError(f"corpus.{name} must be positive")
    for sec, key in (("prompt", "length"), ("connector", "length"), ("eval", "samples_per_prefix")):
        if getattr(getattr(cfg, sec), key) < 1:
            raise ConfigError(f"{sec}.{key} must be positive")


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    raw = path.read_bytes()
    if path.suffix == ".json":
        data = json.loads(raw)
    else:
        try:
            data = tomllib.loads(raw.decode("utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    return from_dict(data)


def apply_override(cfg: RunConfig, item: str) -> RunConfig:
    """Return ``cfg`` with ``section.key=value`` applied; the value is read as JSON when it parses."""
    name, eq, text = item.partition("=")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    merged = cfg.to_dict()
    if name == "workdir":
        merged["workdir"] = value
    else:
        section, dot, key = name.partition(".")
        if not eq or not dot or section not in _SECTION_TYPES:
            raise ConfigError(f"override {item!r} is not section.key=value")
        if key not in merged[section]:
            raise ConfigError(f"unknown key {name}")
        merged[section][key] = value
    return from_dict(merged)


def dump_toml(cfg: RunConfig) -> str:
    """Serialise a config back to TOML (flat scalar and string-list values only)."""
    lines = [f"workdir = {json.dumps(cfg.workdir)}", ""]
    for name, section in cfg.to_dict().items():
        if name == "workdir":
            continue
        lines.append(f"[{name}]")
        for k, v in section.items():
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(json.dumps(x) for x in v) + "]"
    return json.dumps(v)
