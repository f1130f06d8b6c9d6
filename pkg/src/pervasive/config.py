"""Run configuration: four sections parsed from ``section.key = value`` lines.

Example file::

    # small copy-task model
    model.L = 4
    model.g = 8
    train.lr = 2e-3
    decode.max_len_rule = 2*src+10
    data.bpe_mode = V1

Blank lines and ``#`` comments are ignored. Unknown sections or keys are
errors, as are values that do not parse as the field's type.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .decode import DecodeConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


_MAX_LEN_RULE = re.compile(r"^\s*([0-9.]+)\s*\*\s*src\s*\+\s*([0-9]+)\s*$")


def parse_max_len_rule(rule: str) -> tuple[float, int]:
    """``"a*src+b"`` -> ``(a, b)``."""
    m = _MAX_LEN_RULE.match(rule)
    if not m:
        raise ConfigError(f"max_len_rule must look like '2*src+10', got {rule!r}")
    return float(m.group(1)), int(m.group(2))


@dataclass
class DecodeSection:
    beam: int = 5
    lp_alpha: float = 0.6
    cov_beta: float = 0.0
    max_len_rule: str = "2*src+10"

    def to_decode_config(self, track_alignment: bool | None = None) -> DecodeConfig:
        a, b = parse_max_len_rule(self.max_len_rule)
        if track_alignment is None:
            track_alignment = self.cov_beta != 0.0
        return DecodeConfig(self.beam, a, b, self.lp_alpha, self.cov_beta, track_alignment)


@dataclass
class DataSection:
    # file stems inside the data directory: <stem>.<src_ext> / <stem>.<tgt_ext>
    train: str = "train"
    dev: str = "dev"
    src_ext: str = "src"
    tgt_ext: str = "tgt"
    bpe_mode: str = "V1"
    # 0 means the corpus is used as already tokenized
    n_merges: int = 0

    def __post_init__(self):
        if self.bpe_mode not in ("V1", "V2"):
            raise ConfigError(f"data.bpe_mode must be V1 or V2, got {self.bpe_mode!r}")
        if self.n_merges < 0:
            raise ConfigError("data.n_merges must be >= 0")


# vocabulary sizes come from the data, never from the config file
_DERIVED_MODEL_KEYS = ("src_vocab", "tgt_vocab")


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeSection = field(default_factory=DecodeSection)
    data: DataSection = field(default_factory=DataSection)

    def model_config(self, src_vocab: int, tgt_vocab: int) -> ModelConfig:
        return ModelConfig(src_vocab=src_vocab, tgt_vocab=tgt_vocab, **self.model)

    def to_dict(self) -> dict:
        return {"model": dict(self.model), "train": asdict(self.train),
                "decode": asdict(self.decode), "data": asdict(self.data)}

    def to_lines(self) -> list[str]:
        """Effective configuration as ``section.key = value`` lines, every field included."""
        out = []
        for section, values in sorted(self.to_dict().items()):
            if section == "model":
                values = {**model_defaults(), **values}
            for k in sorted(values):
                out.append(f"{section}.{k} = {format_value(values[k])}")
        return out


def model_defaults() -> dict:
    base = ModelConfig(src_vocab=1, tgt_vocab=1)
    return {f.name: getattr(base, f.name) for f in fields(ModelConfig) if f.name not in _DERIVED_MODEL_KEYS}


def _section_types(section: str) -> dict[str, type]:
    cls = {"model": ModelConfig, "train": TrainConfig, "decode": DecodeSection, "data": DataSection}.get(section)
    if cls is None:
        raise ConfigError(f"unknown config section {section!r}")
    defaults = model_defaults() if section == "model" else asdict(cls())
    return {k: type(v) for k, v in defaults.items()}


def section_defaults() -> dict[str, dict]:
    return {"model": model_defaults(), "train": asdict(TrainConfig()),
            "decode": asdict(DecodeSection()), "data": asdict(DataSection())}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_value(key: str, text: str, typ: type):
    text = text.strip()
    if typ is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {text!r}") from None
    return text


def parse_assignments(lines, source: str = "<config>") -> dict[str, dict]:
    """Parse ``section.key = value`` lines into ``{section: {key: value}}``."""
    out: dict[str, dict] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw.strip()!r}")
        lhs, rhs = line.split("=", 1)
        lhs = lhs.strip()
        if lhs.count(".") != 1:
            raise ConfigError(f"{source}:{lineno}: key {lhs!r} must be 'section.key'")
        section, key = lhs.split(".")
        types = _section_types(section)
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {lhs!r}")
        out.setdefault(section, {})[key] = parse_value(lhs, rhs, types[key])
    return out


def build_run_config(*layers: dict[str, dict]) -> RunConfig:
    """Merge parsed assignment dicts, later layers overriding earlier ones."""
    merged: dict[str, dict] = {}
    for layer in layers:
        for section, values in layer.items():
            merged.setdefault(section, {}).update(values)
    try:
        model = dict(merged.get("model", {}))
        ModelConfig(src_vocab=1, tgt_vocab=1, **model)
        cfg = RunConfig(model, TrainConfig(**merged.get("train", {})),
                        DecodeSection(**merged.get("decode", {})), DataSection(**merged.get("data", {})))
        parse_max_len_rule(cfg.decode.max_len_rule)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_run_config(path=None, overrides: dict[str, dict] | None = None) -> RunConfig:
    layers = []
    if path is not None:
        p = Path(path)
        layers.append(parse_assignments(p.read_text(encoding="utf-8").splitlines(), str(p)))
    if overrides:
        layers.append(overrides)
    return build_run_config(*layers)
