"""Run configuration: one JSON document drives the whole pipeline.

All randomness flows from the single root seed; subcomponent seeds are
derived by stable hashing of (root seed, purpose), so every command is
reproducible bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass

from .errors import ContractError
from .losses import LossWeights
from .models import ModelConfig
from .optim import OptimizerConfig
from .training import TrainSettings


def derive_seed(root: int, purpose: str) -> int:
    digest = hashlib.sha256(f"{root}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


@dataclass
class DataConfig:
    root: str = "data"
    tts_manifest: str = "tts/manifest.json"
    asr_manifest: str = "asr/manifest.json"
    vc_manifest: str = "vc/manifest.json"
    vc_source: str = "spk0"
    vc_target: str = "spk1"


@dataclass
class GenConfig:
    feat_dim: int = 20
    noise_level: float = 0.05
    min_symbols: int = 4
    max_symbols: int = 12
    tts_utterances: int = 200
    tts_val: int = 20
    tts_eval: int = 20
    # recognition corpus: 8 speakers x 50 utterances each, dealt one speaker
    # per utterance id
    asr_speakers: int = 8
    asr_utterances: int = 400
    asr_val: int = 40
    asr_eval: int = 40
    vc_utterances: int = 50
    vc_val: int = 20
    vc_eval: int = 20


@dataclass
class StageBudgets:
    tts_dec: int = 2000
    tts_enc: int = 2000
    asr_enc: int = 2000
    asr_dec: int = 2000
    vc: int = 2000


@dataclass
class VcInit:
    encoder: str = "tts"   # none | tts | asr
    decoder: str = "tts"

    def validate(self):
        for side in (self.encoder, self.decoder):
            if side not in ("none", "tts", "asr"):
                raise ContractError(f"vc_init sides must be none|tts|asr, got {side!r}")
        return self


@dataclass
class PathsConfig:
    ckpt_dir: str = "ckpt"
    trace_dir: str = "traces"
    tts_dec_ckpt: str = "tts_dec.ckpt"
    tts_enc_ckpt: str = "tts_enc.ckpt"
    asr_enc_ckpt: str = "asr_enc.ckpt"
    asr_dec_ckpt: str = "asr_dec.ckpt"
    vc_ckpt: str = "vc.ckpt"
    converted_dir: str = "converted"
    report: str = "report.json"
    convert_split: str = "validation"


@dataclass
class EvalConfig:
    mcd_order: int = 24        # clipped to feat_dim - 1 when features are narrower
    silence_db: float = 40.0
    cluster_top_k: int = 5


def _default_model():
    return ModelConfig(architecture="vtn", task="vc", d_model=32, heads=4,
                       layers=2, d_ff=64, r=2, feat_dim=20, prenet_dim=32,
                       postnet_dim=32, dropout=0.1)


@dataclass
class RunConfig:
    seed: int = 1234
    model: ModelConfig = field(default_factory=_default_model)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    budgets: StageBudgets = field(default_factory=StageBudgets)
    gen: GenConfig = field(default_factory=GenConfig)
    data: DataConfig = field(default_factory=DataConfig)
    vc_init: VcInit = field(default_factory=VcInit)
    paths: PathsConfig = field(default_factory=PathsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        self.model.validate()
        self.loss.validate()
        self.optimizer.validate()
        self.vc_init.validate()
        return self


def _from_dict(cls, d: dict, path=""):
    if not isinstance(d, dict):
        raise ContractError(f"config section {path or cls.__name__} must be an object")
    known = {f.name for f in fields(cls)}
    for key in d:
        if key not in known:
            raise ContractError(f"unknown config key: {path}{key}")
    kwargs = {}
    for name in known:
        if name not in d:
            continue
        value = d[name]
        section = _field_dataclass(cls, name)
        if section is not None:
            kwargs[name] = _from_dict(section, value, f"{path}{name}.")
        else:
            if name == "guided" and value is not None:
                value = tuple(tuple(p) for p in value)
            kwargs[name] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "model": ModelConfig, "loss": LossWeights, "optimizer": OptimizerConfig,
    "train": TrainSettings, "budgets": StageBudgets, "gen": GenConfig,
    "data": DataConfig, "vc_init": VcInit, "paths": PathsConfig,
    "eval": EvalConfig,
}


def _field_dataclass(cls, name):
    if cls is RunConfig:
        return _SECTION_TYPES.get(name)
    return None


def config_from_dict(d: dict) -> RunConfig:
    return _from_dict(RunConfig, d).validate()


def config_to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    if d["loss"]["guided"] is not None:
        d["loss"]["guided"] = [list(p) for p in d["loss"]["guided"]]
    return d


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ContractError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ContractError(f"config file {path} is not valid JSON: {e}") from None
    return config_from_dict(raw)


def save_config(cfg: RunConfig, path: str):
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, indent=1, sort_keys=True)
        f.write("\n")


def apply_override(cfg: RunConfig, dotted: str, raw: str):
    """Set a config leaf addressed as section.field[.field] from a string."""
    parts = dotted.split(".")
    obj = cfg
    for name in parts[:-1]:
        if not is_dataclass(obj) or name not in {f.name for f in fields(obj)}:
            raise ContractError(f"override addresses unknown config path: {dotted}")
        obj = getattr(obj, name)
    leaf = parts[-1]
    if not is_dataclass(obj) or leaf not in {f.name for f in fields(obj)}:
        raise ContractError(f"override addresses unknown config path: {dotted}")
    current = getattr(obj, leaf)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if leaf == "guided" and value is not None:
        value = tuple(tuple(p) for p in value)
    if isinstance(current, bool) and not isinstance(value, bool):
        raise ContractError(f"override {dotted} expects a boolean")
    if isinstance(current, int) and not isinstance(current, bool) and isinstance(value, float):
        if value != int(value):
            raise ContractError(f"override {dotted} expects an integer")
        value = int(value)
    if isinstance(current, (int, float)) and isinstance(value, str):
        raise ContractError(f"override {dotted} expects a number, got {raw!r}")
    setattr(obj, leaf, value)
    cfg.validate()
    return cfg
