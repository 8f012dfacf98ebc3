"""Flat ``key = value`` run configuration with typed validation."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, key: str, reason: str):
        super().__init__(f"{key}: {reason}")
        self.key = key


@dataclass
class RunConfig:
    seed: int = 0
    task: str = "auto"  # mi | ssvep | ern | synthetic | auto (read from the data file)
    # optimisation
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-2
    adapter_lr: float = 1e-5
    select_metric: str = "auto"  # accuracy | auc | auto
    # fine-tuning
    subject: int = -1
    finetune_epochs: int = 20
    finetune_lr_scale: float = 0.1
    strict: bool = True
    # pretraining
    pretrain_epochs: int = 50
    pretrain_lr: float = 1e-3
    r: float = 0.5
    l_min: float = 0.1
    l_max: float = 0.3
    fill: str = "mean"
    pretrained: str = ""
    # architecture
    windows: int = 1
    components: int = 32
    stf_kernel: int = 9
    bottleneck: int = 32
    filters: int = 32
    kernels: tuple[int, ...] = (9, 19, 39)
    pool_k: int = 3
    heads: int = 4
    latent_dim: int = 32
    proc_rank: int = 4
    dec_rank: int = 8
    predecoder: str = "lora"
    n_boosts: int = 2
    boost_scale: float = 0.1
    use_adapters: bool = True
    prototype_std: float = 1.0
    train_prototypes: bool = False
    K: float = 1.0
    # synthetic data generation
    synth_subjects: int = 3
    synth_classes: int = 2
    synth_trials: int = 200
    synth_channels: int = 8
    synth_timesteps: int = 128
    synth_snr: float = 1.0
    synth_shift: float = 0.5
    synth_sessions: int = 2
    synth_class_weights: str = ""

    def validate(self) -> None:
        positive = (
            "epochs batch_size pretrain_epochs windows components stf_kernel bottleneck filters pool_k "
            "heads latent_dim proc_rank dec_rank n_boosts synth_subjects synth_classes synth_trials "
            "synth_channels synth_timesteps synth_sessions"
        )
        for key in positive.split():
            if getattr(self, key) < (0 if key.endswith("epochs") else 1):
                raise ConfigError(key, "must be positive")
        if self.finetune_epochs < 0:
            raise ConfigError("finetune_epochs", "must be nonnegative")
        for key in ("lr", "weight_decay", "adapter_lr", "pretrain_lr", "finetune_lr_scale"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be nonnegative")
        if not 0 <= self.r <= 1:
            raise ConfigError("r", "must lie in [0, 1]")
        if not 0 < self.l_min <= 1:
            raise ConfigError("l_min", "must lie in (0, 1]")
        if not self.l_min <= self.l_max <= 1:
            raise ConfigError("l_max", "must lie in [l_min, 1]")
        if not self.K > 0:
            raise ConfigError("K", "must be positive")
        if self.task not in ("auto", "mi", "ssvep", "ern", "synthetic"):
            raise ConfigError("task", f"unknown task {self.task!r}")
        if self.select_metric not in ("auto", "accuracy", "auc"):
            raise ConfigError("select_metric", "must be auto, accuracy or auc")
        if self.predecoder not in ("lora", "boost"):
            raise ConfigError("predecoder", "must be lora or boost")
        if not self.kernels or any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ConfigError("kernels", "must be odd positive integers")
        if self.fill != "mean":
            try:
                float(self.fill)
            except ValueError:
                raise ConfigError("fill", "must be 'mean' or a number") from None
        if not 0 <= self.synth_shift <= 1:
            raise ConfigError("synth_shift", "must lie in [0, 1]")
        if not self.synth_snr > 0:
            raise ConfigError("synth_snr", "must be positive")

    # -- text form ----------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def set(self, key: str, raw: str) -> None:
        kinds = {f.name: f.type for f in dataclasses.fields(self)}
        if key not in kinds:
            raise ConfigError(key, "unknown key")
        try:
            setattr(self, key, _convert(kinds[key], raw))
        except ValueError as exc:
            raise ConfigError(key, str(exc)) from None

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}", "expected key = value")
            key, _, raw = line.partition("=")
            cfg.set(key.strip(), raw.strip())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides=()) -> "RunConfig":
        cfg = cls.from_text(Path(path).read_text()) if path else cls()
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(item, "override must look like key=value")
            cfg.set(key.strip(), raw.strip())
        cfg.validate()
        return cfg


def _convert(kind: str, raw: str):
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind.startswith("tuple"):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw
