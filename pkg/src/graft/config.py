"""Run configuration: one JSON document with a section per subcommand.

Unknown keys are rejected at every level.  ``GRAFT_SEED`` in the
environment overrides the global seed, which in turn seeds every section.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import dacite

from .grounding import GroundingConfig
from .instructions import CorpusConfig
from .lm_pretrain import PretrainConfig
from .tuning import DEFAULT_FROZEN, TuneConfig

SEED_ENV = "GRAFT_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    blocks: int = 2
    per_block: int = 100
    p_in: float = 0.3
    p_out: float = 0.02
    vocab_per_block: int = 40
    text_len: int = 16
    noise_vocab: int = 20
    noise_frac: float = 0.25


@dataclass
class InstructionsConfig:
    matching_samples: int = 2000
    classification_samples: int = 400
    link_pairs: int = 400
    tasks: tuple = ("graph_matching",)
    style: str = "std"  # std, cot or mix_50_50
    with_link: bool = False
    matching: CorpusConfig = field(default_factory=lambda: CorpusConfig(hops=1, fanout=4))
    classification: CorpusConfig = field(default_factory=lambda: CorpusConfig(hops=2, fanout=3))
    link: CorpusConfig = field(default_factory=lambda: CorpusConfig(hops=1, fanout=3))


@dataclass
class EvalConfig:
    heads: int = 4
    max_samples: int | None = None


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    grounding: GroundingConfig = field(default_factory=GroundingConfig)
    instructions: InstructionsConfig = field(default_factory=InstructionsConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    stage1: TuneConfig = field(default_factory=lambda: TuneConfig(stage=1, batch_size=16, lr=5e-3))
    stage2: TuneConfig = field(default_factory=lambda: TuneConfig(stage=2, batch_size=16, lr=5e-3))
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_json(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:12]


_DACITE = dacite.Config(strict=True, cast=[tuple])


def config_from_dict(raw: dict) -> RunConfig:
    try:
        cfg = dacite.from_dict(RunConfig, raw, config=_DACITE)
    except (dacite.DaciteError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return _apply_seed(cfg)


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return config_from_dict({})
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg} at line {exc.lineno}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return config_from_dict(raw)


def _apply_seed(cfg: RunConfig) -> RunConfig:
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    # one global seed drives every stage, offset so stages draw independent streams
    cfg.grounding.seed = cfg.seed
    cfg.pretrain.seed = cfg.seed
    cfg.stage1.seed = cfg.seed + 1
    cfg.stage2.seed = cfg.seed + 2
    return cfg


__all__ = ["ConfigError", "DataConfig", "EvalConfig", "InstructionsConfig", "RunConfig", "DEFAULT_FROZEN", "config_from_dict", "load_config"]
