"""Run configuration: flat ``section.key = value`` files.

Blank lines and ``#`` comments are ignored.  Every key must belong to a
known section and field; anything else is a hard error.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from dysi.errors import ConfigError, ParseError
from dysi.imitation import OBJECTIVES
from dysi.model import DECODER_ONLY, ENCODER_DECODER

TASK_KINDS = ("copy", "reverse", "cipher", "parallel", "lm")
STRATEGIES = ("greedy", "beam", "nucleus")


@dataclass
class TaskBlock:
    kind: str = "copy"
    vocab_size: int = 30
    min_len: int = 4
    max_len: int = 12
    train_size: int = 5000
    valid_size: int = 500
    test_size: int = 500
    data_seed: int = 0
    perm_seed: int = 0
    # parallel TSV files or a plain-text LM corpus ("builtin" for the generated one)
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    tokenization: str = "whitespace"
    min_count: int = 1
    context_len: int = 64
    lm_chars: int = 1_000_000
    valid_fraction: float = 0.02


@dataclass
class ModelBlock:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 128
    dropout: float = 0.1
    max_positions: int = 64
    mode: str = ENCODER_DECODER


@dataclass
class TrainingBlock:
    objective: str = "dysi"
    alpha: float = 0.5
    beta: float = 0.5
    label_smoothing: float = 0.1
    lr_peak: float = 2e-3
    warmup: int = 200
    max_steps: int = 3000
    max_tokens: int = 512
    batch_size: int = 16
    seed: int = 0
    checkpoint_every: int = 200
    keep_checkpoints: int = 3
    init_checkpoint: str = ""
    decay_scheme: str = "exponential"
    k: float = 0.985
    decay_unit: int = 100
    c: float = 0.0  # linear decay slope; 0 means 1 / max_steps
    eps_min: float = 0.3
    stop_at_valid_acc: float = 0.0
    valid_batches: int = 20


@dataclass
class DecodingBlock:
    strategy: str = "beam"
    beam: int = 5
    gamma: float = 0.2
    p: float = 0.8
    max_len: int = 50
    seed: int = 0


@dataclass
class OutputBlock:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    task: TaskBlock = field(default_factory=TaskBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    training: TrainingBlock = field(default_factory=TrainingBlock)
    decoding: DecodingBlock = field(default_factory=DecodingBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    def validate(self) -> "RunConfig":
        t, m, tr, d = self.task, self.model, self.training, self.decoding
        if t.kind not in TASK_KINDS:
            raise ConfigError(f"task.kind must be one of {TASK_KINDS}, got {t.kind!r}")
        if t.kind in ("parallel", "lm") and not t.train_path:
            raise ConfigError(f"task.kind={t.kind} needs task.train_path")
        if t.kind == "lm" and m.mode != DECODER_ONLY:
            raise ConfigError("task.kind=lm needs model.mode=decoder-only")
        if t.kind != "lm" and m.mode != ENCODER_DECODER:
            raise ConfigError(f"task.kind={t.kind} needs model.mode=encoder-decoder")
        if t.kind == "lm" and t.context_len > m.max_positions:
            raise ConfigError("task.context_len must be <= model.max_positions")
        if tr.objective not in OBJECTIVES:
            raise ConfigError(f"training.objective must be one of {OBJECTIVES}")
        if tr.max_steps < 0 or tr.warmup < 1 or tr.checkpoint_every < 1 or tr.keep_checkpoints < 1:
            raise ConfigError("max_steps >= 0, warmup >= 1, checkpoint_every >= 1, keep_checkpoints >= 1")
        if d.strategy not in STRATEGIES:
            raise ConfigError(f"decoding.strategy must be one of {STRATEGIES}")
        if d.beam < 1:
            raise ConfigError("decoding.beam must be >= 1")
        if not 0.0 < d.p <= 1.0:
            raise ConfigError("decoding.p must be in (0, 1]")
        for p in (t.train_path, t.valid_path, t.test_path, tr.init_checkpoint):
            if p and p != "builtin" and not Path(p).exists():
                raise ConfigError(f"path does not exist: {p}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for section, block in self.to_dict().items():
            lines += [f"{section}.{k} = {_render(v)}" for k, v in block.items()]
        return "\n".join(lines) + "\n"


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _convert(raw: str, typ, key: str):
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw.replace("_", ""))
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def _field_types(block_cls) -> dict[str, type]:
    hints = typing.get_type_hints(block_cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(block_cls)}


def apply_override(cfg: RunConfig, key: str, raw: str) -> None:
    """Set ``section.field`` from its string form."""
    section, _, name = key.partition(".")
    if not name or not hasattr(cfg, section):
        raise ConfigError(f"unknown config key {key!r}")
    block = getattr(cfg, section)
    types = _field_types(type(block))
    if name not in types:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(block, name, _convert(raw.strip(), types[name], key))


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}: expected key = value", line=lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        if key in seen:
            raise ParseError(f"{source}: duplicate key {key!r}", line=lineno)
        seen.add(key)
        try:
            apply_override(cfg, key, value)
        except ConfigError as exc:
            raise ParseError(f"{source}: {exc}", line=lineno) from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config(text, str(path))
