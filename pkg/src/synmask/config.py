"""Run configuration: flat commented key=value files with an include directive.

A config file holds one `key = value` pair per line; `#` starts a comment and
`include <path>` pulls in a defaults file (paths relative to the including
file). Later assignments win, so a run file typically includes defaults and
overrides a handful of keys.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .attention import AttentionMode


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        super().__init__(f"config field '{field_name}': {message}")


@dataclass
class ModelConfig:
    """Architecture, objective, optimizer and decoding hyperparameters."""

    src_vocab_size: int = 0   # filled in after vocabulary construction
    tgt_vocab_size: int = 0
    encoder_layers: int = 6
    decoder_layers: int = 6
    heads: int = 4
    model_dim: int = 512
    ffn_dim: int = 1024
    conv_layers: int = 3
    conv_half_width: int = 1
    bpe_dim: int = 256
    use_bpe_embeddings: bool = True
    masked_layers: frozenset[int] = frozenset({1})
    attention_mode: AttentionMode = AttentionMode.FROM_SCRATCH
    lam: float = 0.47
    mlm_rate: float = 0.15
    peak_lr: float = 5e-4
    warmup_steps: int = 4000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    label_smoothing: float = 0.1
    weight_decay: float = 1e-4
    beam_size: int = 5
    length_penalty: float = 1.0
    max_steps: int = 3000
    batch_size: int = 32
    max_len: int = 256
    share_vocab: bool = False
    tie_mlm_head: bool = False
    seed: int = 1

    def validate(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda", f"must be in [0, 1], got {self.lam}")
        if not 0.0 <= self.mlm_rate <= 1.0:
            raise ConfigError("mlm_rate", f"must be in [0, 1], got {self.mlm_rate}")
        bad = [i for i in self.masked_layers
               if not 1 <= i <= self.encoder_layers]
        if bad:
            raise ConfigError(
                "masked_layers",
                f"layers {sorted(bad)} outside 1..{self.encoder_layers}")
        if self.model_dim % self.heads != 0:
            raise ConfigError("heads", f"model_dim {self.model_dim} not divisible "
                                       f"by heads {self.heads}")
        if self.beam_size < 1:
            raise ConfigError("beam_size", "must be >= 1")


@dataclass
class RunConfig:
    """ModelConfig plus corpus paths and the output directory."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train_src: str = ""
    train_tgt: str = ""
    valid_src: str = ""
    valid_tgt: str = ""
    test_src: str = ""
    test_tgt: str = ""
    gold_trees: str = ""
    output_dir: str = ""
    checkpoint_every: int = 1000

    def validate(self, require_train: bool = True):
        self.model.validate()
        if require_train:
            for name in ("train_src", "train_tgt"):
                path = getattr(self, name)
                if not path:
                    raise ConfigError(name, "required")
                if not Path(path).exists():
                    raise ConfigError(name, f"path does not exist: {path}")
            if not self.output_dir:
                raise ConfigError("output_dir", "required")
        for name in ("valid_src", "valid_tgt", "test_src", "test_tgt", "gold_trees"):
            path = getattr(self, name)
            if path and not Path(path).exists():
                raise ConfigError(name, f"path does not exist: {path}")


_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_RUN_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "model"}

# key spellings in config files that differ from dataclass attribute names
_ALIASES = {"lambda": "lam"}
_REVERSE_ALIASES = {v: k for k, v in _ALIASES.items()}


def _parse_bool(field_name, raw):
    low = raw.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(field_name, f"expected a boolean, got {raw!r}")


def _parse_value(field_name, ftype, raw):
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "bool":
            return _parse_bool(field_name, raw)
        if ftype == "frozenset[int]":
            raw = raw.strip()
            if not raw:
                return frozenset()
            return frozenset(int(p) for p in raw.split(","))
        if ftype == "AttentionMode":
            return AttentionMode(raw)
        return raw
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(field_name, f"cannot parse {raw!r}: {exc}") from None


def _read_pairs(path: Path, seen: set[Path]) -> list[tuple[str, str]]:
    path = path.resolve()
    if path in seen:
        raise ConfigError("include", f"circular include of {path}")
    seen.add(path)
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("include "):
                inc = (path.parent / line[len("include "):].strip())
                pairs.extend(_read_pairs(inc, seen))
                continue
            if "=" not in line:
                raise ConfigError("<syntax>",
                                  f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            pairs.append((key, value))
    return pairs


def load_config(path) -> RunConfig:
    pairs = _read_pairs(Path(path), set())
    cfg = RunConfig()
    for key, raw in pairs:
        name = _ALIASES.get(key, key)
        if name in _MODEL_FIELDS:
            f = _MODEL_FIELDS[name]
            setattr(cfg.model, name, _parse_value(key, f.type, raw))
        elif name in _RUN_FIELDS:
            f = _RUN_FIELDS[name]
            setattr(cfg, name, _parse_value(key, f.type, raw))
        else:
            raise ConfigError(key, "unknown key")
    return cfg


def _format_value(value):
    if isinstance(value, frozenset):
        return ",".join(str(i) for i in sorted(value))
    if isinstance(value, AttentionMode):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def config_to_text(cfg: RunConfig) -> str:
    """Serialize the effective config; re-loading the text reproduces it."""
    lines = ["# effective configuration (all defaults applied)"]
    for name in _MODEL_FIELDS:
        key = _REVERSE_ALIASES.get(name, name)
        lines.append(f"{key} = {_format_value(getattr(cfg.model, name))}")
    for name in _RUN_FIELDS:
        lines.append(f"{name} = {_format_value(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, raw = (part.strip() for part in line.split("=", 1))
        name = _ALIASES.get(key, key)
        if name in _MODEL_FIELDS:
            setattr(cfg.model, name, _parse_value(key, _MODEL_FIELDS[name].type, raw))
        elif name in _RUN_FIELDS:
            setattr(cfg, name, _parse_value(key, _RUN_FIELDS[name].type, raw))
        else:
            raise ConfigError(key, "unknown key")
    return cfg
