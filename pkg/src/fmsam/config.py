"""Training configuration, named presets and ablation variants."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

TOGGLES = ("memory", "factorisation", "multi_head", "dynamic_mask", "div_loss", "cons_loss")


class ConfigError(ValueError):
    pass


@dataclass
class Ablation:
    memory: bool = True
    factorisation: bool = True
    multi_head: bool = True
    dynamic_mask: bool = True
    div_loss: bool = True
    cons_loss: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "Ablation":
        unknown = set(d) - set(TOGGLES)
        if unknown:
            raise ConfigError(f"unknown ablation toggle: {sorted(unknown)[0]}")
        return cls(**{k: bool(v) for k, v in d.items()})

    def effective(self) -> "Ablation":
        """Resolve dependencies: multi-head retrieval needs both memory and factorised queries,
        and the memory losses need a memory."""
        a = dataclasses.replace(self)
        if not a.factorisation:
            a.multi_head = False
            a.dynamic_mask = False
        if not a.memory:
            a.multi_head = a.div_loss = a.cons_loss = False
        return a


@dataclass
class TrainingConfig:
    # loss weights
    theta_pose: float = 0.4
    theta_div: float = 0.15
    theta_cons: float = 0.15
    theta_sub: float = 0.15
    theta_task: float = 0.15
    # memory
    n_slots: int = 64
    window: int = 15
    n_windows: int = 8
    cons_eps: float = 1e-8
    continual_eval: bool = False
    # factorisation
    tau: float = 0.5
    margin: float = 1.0
    mask_hidden: int = 128
    subject_dim: int = 16
    # backbone
    feature_dim: int = 300
    layers_per_block: int = 2
    activation: str = "tanh"
    residual_blocks: bool = False
    # data
    t_obs: int = 10
    t_pred: int = 25
    downsample: int = 2
    train_stride: int = 1
    eval_stride: int = 5
    coord_scale: float = 0.01  # mm -> network units
    # optimisation
    lr: float = 2e-4
    lr_decay: float = 0.98
    decay_interval: int = 2
    epochs: int = 100
    batch_size: int = 16
    grad_clip: float = 0.0
    seed: int = 0
    dtype: str = "float32"
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = Ablation.from_dict(self.ablation)
        self.validate()

    def validate(self):
        for name in ("theta_pose", "theta_div", "theta_cons", "theta_sub", "theta_task"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.feature_dim % 3:
            raise ConfigError("feature_dim must be divisible by 3")
        if self.window < 2 or self.n_slots < 2:
            raise ConfigError("window and n_slots must be >= 2")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def loss_weights(self) -> dict[str, float]:
        return {"pose": self.theta_pose, "div": self.theta_div, "cons": self.theta_cons,
                "sub": self.theta_sub, "task": self.theta_task}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key: {sorted(unknown)[0]}")
        return cls(**d)

    def override(self, updates: dict) -> "TrainingConfig":
        """Apply ``{"key": value, "ablation.memory": False}``-style updates."""
        d = self.to_dict()
        for key, value in updates.items():
            if key.startswith("ablation."):
                toggle = key.split(".", 1)[1]
                if toggle not in TOGGLES:
                    raise ConfigError(f"unknown ablation toggle: {toggle}")
                d["ablation"][toggle] = value
            elif key == "ablation" and isinstance(value, dict):
                Ablation.from_dict(value)
                d["ablation"].update({k: bool(v) for k, v in value.items()})
            elif key in d:
                d[key] = value
            else:
                raise ConfigError(f"unknown config key: {key}")
        return TrainingConfig.from_dict(d)


PRESETS = {
    "fullscale": TrainingConfig(),
    "desk": TrainingConfig(feature_dim=48, n_slots=16, epochs=30, batch_size=16, lr=1e-3),
    "tiny": TrainingConfig(feature_dim=6, n_slots=3, t_pred=4, epochs=2, batch_size=4, mask_hidden=8,
                           subject_dim=4, dtype="float64"),
}


def preset(name: str, **overrides) -> TrainingConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name].override(overrides) if overrides else TrainingConfig.from_dict(PRESETS[name].to_dict())


# Ablation rows, named after the variants they reproduce.
VARIANTS = {
    "FMS-AM": Ablation(),
    "F w/o [AM, Mh, S]": Ablation(memory=False, multi_head=False, div_loss=False, cons_loss=False),
    "F-AM w/o [Mh, S]": Ablation(multi_head=False, div_loss=False, cons_loss=False),
    "FMh-AM w/o S": Ablation(div_loss=False, cons_loss=False),
    "FMh-AM-S v1": Ablation(cons_loss=False),
    "FMh-AM-S v2": Ablation(div_loss=False),
    "S-AM w/o [F, Mh]": Ablation(factorisation=False, multi_head=False, dynamic_mask=False),
    "FS-AM w/o [Mh, DM]": Ablation(multi_head=False, dynamic_mask=False),
    "FMS-AM w/o DM": Ablation(dynamic_mask=False),
    "[FS-AM, DM] w/o Mh": Ablation(multi_head=False),
}
VARIANT_ALIASES = {"full": "FMS-AM", "no-memory": "F w/o [AM, Mh, S]"}


def variant(name: str) -> Ablation:
    name = VARIANT_ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}")
    return dataclasses.replace(VARIANTS[name])
