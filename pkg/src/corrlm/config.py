"""Run configuration: YAML file with trainer/main/aux/data sections, dotted-key
overrides, and a stable hash for checkpoint compatibility checks."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import yaml

from .encoder import EncoderConfig
from .objectives import ObjectiveMode


class UsageError(ValueError):
    """Bad CLI input (unknown key, malformed override); exits with code 1."""


@dataclass
class TrainerSection:
    mode: str = "full"
    steps: int = 3000
    batch_origins: int = 16
    lr_peak: float = 1e-3
    warmup_steps: int = 300
    mask_rate: float = 0.15
    crop_keep: float = 0.9
    lambda_copy: float = 50.0
    tau: float = 1.0
    clip_norm: float = 2.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    weight_decay: float = 0.01
    dropout: float = 0.1
    seed: int = 0
    seq_len: int = 64
    checkpoint_every: int = 500
    probe_every: int = 100
    probe_origins: int = 16
    replacement_source: str = "sampled"  # or "random" (ablation)
    drop_copy_gate: bool = False  # alternative no-copy reading: gate removed from p_LM


@dataclass
class ModelSection:
    num_layers: int = 6
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    relpos_num_buckets: int = 32
    relpos_max_distance: int = 128


@dataclass
class AuxSection:
    num_layers: int | None = None  # default: ceil(main layers / 3)


@dataclass
class DataSection:
    corpus: str | None = None
    vocab: str | None = None
    vocab_size: int | None = None  # standalone runs without a vocab file
    pairs_similar: str | None = None
    pairs_random: str | None = None


@dataclass
class RunConfig:
    trainer: TrainerSection = field(default_factory=TrainerSection)
    main: ModelSection = field(default_factory=ModelSection)
    aux: AuxSection = field(default_factory=AuxSection)
    data: DataSection = field(default_factory=DataSection)

    def validate(self) -> None:
        t = self.trainer
        if t.mode not in [m.value for m in ObjectiveMode]:
            raise UsageError(f"unknown mode '{t.mode}'; valid: "
                             + ", ".join(m.value for m in ObjectiveMode))
        if t.steps < 0:
            raise UsageError("trainer.steps must be >= 0")
        if t.warmup_steps > t.steps:
            raise UsageError("trainer.warmup_steps must not exceed trainer.steps")
        if not 0.0 < t.mask_rate < 1.0:
            raise UsageError("trainer.mask_rate must be in (0, 1)")
        if not 0.0 < t.crop_keep <= 1.0:
            raise UsageError("trainer.crop_keep must be in (0, 1]")
        if t.tau <= 0:
            raise UsageError("trainer.tau must be positive")
        if t.clip_norm <= 0:
            raise UsageError("trainer.clip_norm must be positive")
        if t.lambda_copy <= 0:
            raise UsageError("trainer.lambda_copy must be positive")
        if t.replacement_source not in ("sampled", "random"):
            raise UsageError("trainer.replacement_source must be 'sampled' or 'random'")
        from .objectives import uses_scl
        if uses_scl(ObjectiveMode(t.mode)) and t.batch_origins < 2:
            raise UsageError("contrastive modes need trainer.batch_origins >= 2")
        self.encoder_config("main")  # surfaces EncoderConfig validation errors

    def mode(self) -> ObjectiveMode:
        return ObjectiveMode(self.trainer.mode)

    def aux_layers(self) -> int:
        if self.aux.num_layers is not None:
            return self.aux.num_layers
        return max(1, math.ceil(self.main.num_layers / 3))

    def encoder_config(self, which: str) -> EncoderConfig:
        m = self.main
        layers = m.num_layers if which == "main" else self.aux_layers()
        return EncoderConfig(
            num_layers=layers,
            hidden_dim=m.hidden_dim,
            num_heads=m.num_heads,
            ffn_dim=m.ffn_dim,
            dropout=self.trainer.dropout,
            relpos_num_buckets=m.relpos_num_buckets,
            relpos_max_distance=m.relpos_max_distance,
            max_seq_len=self.trainer.seq_len,
        )

    def to_dict(self) -> dict:
        return {"trainer": asdict(self.trainer), "main": asdict(self.main),
                "aux": asdict(self.aux), "data": asdict(self.data)}

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        cfg = cls()
        sections = {"trainer": cfg.trainer, "main": cfg.main,
                    "aux": cfg.aux, "data": cfg.data}
        for sec_name, payload in (raw or {}).items():
            if sec_name not in sections:
                raise UsageError(f"unknown config section '{sec_name}'; valid: "
                                 + ", ".join(sections))
            section = sections[sec_name]
            valid = {f.name for f in fields(section)}
            for key, value in (payload or {}).items():
                if key not in valid:
                    raise UsageError(f"unknown key '{sec_name}.{key}'; valid: "
                                     + ", ".join(sorted(f"{sec_name}.{v}" for v in valid)))
                setattr(section, key, value)
        return cfg

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    return RunConfig.from_dict(raw or {})


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply repeatable KEY=VALUE pairs with dotted section.key names.

    Values parse as YAML scalars, so ints, floats, bools, and null work
    naturally.
    """
    raw = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override '{item}' must look like section.key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2:
            raise UsageError(f"override key '{key}' must be section.key")
        sec, name = parts
        if sec not in raw:
            raise UsageError(f"unknown config section '{sec}'; valid: " + ", ".join(raw))
        if name not in raw[sec]:
            raise UsageError(f"unknown key '{key}'; valid: "
                             + ", ".join(sorted(f"{sec}.{k}" for k in raw[sec])))
        raw[sec][name] = yaml.safe_load(value)
    return RunConfig.from_dict(raw)
