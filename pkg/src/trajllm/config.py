"""Experiment configuration (model architecture + optimization) in one strict document."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

ABLATIONS = ("full", "no_llm", "no_lora", "no_lane")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # architecture
    hidden_dim: int = 128
    n_heads: int = 8
    k_modes: int = 5
    top_c: int = 2
    latent_dim: int = 16
    mode_dim: int = 32
    dropout: float = 0.1
    glu_residual: bool = True
    mamba_layers: int = 3
    d_state: int = 16
    expand: int = 2
    scan_method: str = "fused"
    sample_latent_at_eval: bool = False
    position_scale: float = 10.0  # meters per model unit for coordinates in and out
    # backbone
    backbone: str = "surrogate"
    backbone_layers: int | None = None
    backbone_width: int | None = None
    backbone_heads: int | None = None
    backbone_seed: int = 0
    backbone_path: str | None = None
    backbone_sha256: str | None = None
    use_positional: bool = True
    lora_rank: int = 4
    lora_scale: float = 1.0
    # optimization
    batch_size: int = 132
    lr: float = 1e-3
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    lambda_lane: float = 1.0
    epochs: int = 100
    max_steps: int | None = None
    eval_every: int | None = None
    seed: int = 0
    ablation: str = "full"
    few_shot_ratio: float = 1.0
    dtype: str = "float32"
    debug_perfect_predictor: bool = False

    def __post_init__(self):
        for name in ("hidden_dim", "n_heads", "k_modes", "top_c", "latent_dim", "mode_dim",
                     "mamba_layers", "d_state", "expand", "lora_rank", "batch_size", "epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.hidden_dim % self.n_heads:
            raise ConfigError("hidden_dim must be divisible by n_heads")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.backbone not in ("surrogate", "pretrained"):
            raise ConfigError("backbone must be 'surrogate' or 'pretrained'")
        if not 0 < self.few_shot_ratio <= 1:
            raise ConfigError("few_shot_ratio must be in (0, 1]")
        if not self.position_scale > 0:
            raise ConfigError("position_scale must be positive")
        if self.lr < 0 or self.dropout < 0 or self.dropout >= 1:
            raise ConfigError("lr must be >= 0 and dropout in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.ablation == "no_lane" else self.lambda_lane

    def backbone_config(self):
        from trajllm.nn.backbone import BackboneConfig

        pretrained = self.backbone == "pretrained"
        return BackboneConfig(
            n_layers=self.backbone_layers or (12 if pretrained else 2),
            width=self.backbone_width or (768 if pretrained else 128),
            n_heads=self.backbone_heads or (12 if pretrained else 4),
            n_positions=1024 if pretrained else 128,
            weight_source=self.backbone,
            seed=self.backbone_seed,
            weights_path=self.backbone_path,
            weights_sha256=self.backbone_sha256,
            use_positional=self.use_positional,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "TrainConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)
