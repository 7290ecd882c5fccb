"""Full pipeline: joint encoding -> adapted backbone -> lane-aware learning -> Laplace decoder."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn

from trajllm.config import TrainConfig
from trajllm.data.schema import AGENT_FEAT_DIM, LANE_FEAT_DIM, T_FUT, SceneSample
from trajllm.nn.backbone import (
    AdaptedBackbone,
    FrozenGPT2,
    apply_order,
    lora_parameter_count,
    target_last_order,
    undo_order,
)
from trajllm.nn.decoder import (
    LaplaceDecoder,
    TrajectoryMixture,
    mode_classification_loss,
    total_loss,
    wta_regression_loss,
)
from trajllm.nn.encoder import ContextEncoder
from trajllm.nn.lane import LaneAwareModule, lane_loss, select_top_c

AGENT_COORDS = 4  # start, end
LANE_COORDS = 6  # start, end, predecessor

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def collate(samples: Sequence[SceneSample], dtype=torch.float32, trim_lanes: bool = True) -> dict:
    """Stack samples into tensors. Lane padding past the last valid lane in the batch is cut."""
    lane_mask = np.stack([s.lane_mask for s in samples])
    L = lane_mask.shape[1]
    if trim_lanes:
        valid_cols = np.nonzero(lane_mask.any(axis=0))[0]
        L = int(valid_cols[-1]) + 1 if len(valid_cols) else 1
    t = lambda a, dt=dtype: torch.as_tensor(np.stack(a), dtype=dt)  # noqa: E731
    return {
        "agent_vectors": t([s.agent_features() for s in samples]),
        "agent_vec_mask": t([s.agent_mask for s in samples], torch.bool),
        "lane_vectors": t([s.lane_features()[:L] for s in samples]),
        "lane_mask": torch.as_tensor(lane_mask[:, :L]),
        "gt_future": t([s.gt_future for s in samples]),
        "lane_labels": t([s.lane_labels[:, :L] for s in samples], torch.long),
        "scene_id": [s.scene_id for s in samples],
    }


class TrajLLM(nn.Module):
    def __init__(self, config: TrainConfig, base: FrozenGPT2 | None = None):
        super().__init__()
        self.config = config
        D = config.hidden_dim
        self.encoder = ContextEncoder(AGENT_FEAT_DIM, LANE_FEAT_DIM, D, config.n_heads, config.glu_residual)
        self.backbone = None
        if config.ablation != "no_llm":
            self.backbone = AdaptedBackbone(
                D, config.backbone_config(), config.lora_rank, config.lora_scale,
                adapter_seed=config.seed, base=base,
            )
            if config.ablation == "no_lora":
                for adapter in self.backbone.adapters:
                    for p in adapter.parameters():
                        p.requires_grad_(False)
        self.lane = None
        if config.ablation != "no_lane":
            self.lane = LaneAwareModule(
                D, T_FUT, config.mamba_layers, config.dropout,
                expand=config.expand, d_state=config.d_state, scan_method=config.scan_method,
            )
        self.decoder = LaplaceDecoder(D, config.k_modes, config.latent_dim, config.mode_dim, T_FUT, config.n_heads)
        self.to(DTYPES[config.dtype])

    @property
    def dtype(self):
        return next(self.decoder.parameters()).dtype

    def scaled_inputs(self, batch: dict):
        """Coordinate columns divided by ``position_scale``; attribute columns untouched."""
        inv = 1.0 / self.config.position_scale
        agents, lanes = batch["agent_vectors"], batch["lane_vectors"]
        agents = torch.cat([agents[..., :AGENT_COORDS] * inv, agents[..., AGENT_COORDS:]], dim=-1)
        lanes = torch.cat([lanes[..., :LANE_COORDS] * inv, lanes[..., LANE_COORDS:]], dim=-1)
        return agents, lanes

    def forward(self, batch: dict, latent: torch.Tensor | None = None,
                generator: torch.Generator | None = None) -> dict:
        cfg = self.config
        agents, lanes = self.scaled_inputs(batch)
        h_t, f_t, g, token_mask = self.encoder(agents, batch["agent_vec_mask"], lanes, batch["lane_mask"])
        if self.backbone is None:
            s = g
        else:
            order = target_last_order(token_mask)
            s = undo_order(self.backbone(apply_order(g, order), apply_order(token_mask, order)), order)
        s_target, g_target = s[:, 0], g[:, 0]

        probs = candidates = None
        if self.lane is not None:
            S, probs = self.lane(s_target, f_t, batch["lane_mask"])
            candidates = select_top_c(probs, batch["lane_mask"], S, cfg.top_c)

        if latent is None:
            shape = (g.shape[0], cfg.latent_dim)
            if self.training or cfg.sample_latent_at_eval:
                latent = torch.randn(shape, generator=generator, dtype=g.dtype)
            else:
                latent = torch.zeros(shape, dtype=g.dtype)
        mixture = self.decoder(g_target, s_target, None if candidates is None else candidates.features, latent)
        mixture = TrajectoryMixture(mixture.pi, mixture.mu * cfg.position_scale, mixture.b)

        if cfg.debug_perfect_predictor and "gt_future" in batch:
            mu = batch["gt_future"][:, None].expand_as(mixture.mu)
            mixture = TrajectoryMixture(mixture.pi, mu.to(mixture.mu.dtype), mixture.b)
        return {"mixture": mixture, "lane_probs": probs, "candidates": candidates, "latent": latent}


def compute_losses(model: TrajLLM, outputs: dict, batch: dict) -> dict:
    mixture = outputs["mixture"]
    reg, k_star = wta_regression_loss(mixture, batch["gt_future"])
    cls = mode_classification_loss(mixture.pi, k_star)
    if outputs["lane_probs"] is None:
        lane = torch.zeros((), dtype=reg.dtype)
    else:
        lane = lane_loss(outputs["lane_probs"], batch["lane_labels"], batch["lane_mask"])
    total = total_loss(lane, reg, cls, model.config.effective_lambda)
    return {"lane": lane, "reg": reg, "cls": cls, "total": total, "k_star": k_star}


def base_parameter_names(model: TrajLLM) -> set[str]:
    if model.backbone is None:
        return set()
    return {f"backbone.base.{n}" for n, _ in model.backbone.base.named_parameters()}


def trainable_parameters(model: nn.Module) -> dict[str, nn.Parameter]:
    """Adapters plus every non-backbone parameter; never a base backbone tensor."""
    return {n: p for n, p in model.named_parameters() if p.requires_grad}


def frozen_parameters(model: nn.Module) -> dict[str, nn.Parameter]:
    return {n: p for n, p in model.named_parameters() if not p.requires_grad}


def parameter_census(model: TrajLLM) -> dict[str, int]:
    trainable = sum(p.numel() for p in trainable_parameters(model).values())
    frozen = sum(p.numel() for p in frozen_parameters(model).values())
    lora = 0
    if model.backbone is not None and model.config.ablation != "no_lora":
        lora = lora_parameter_count(model.backbone)
    return {"trainable": trainable, "frozen": frozen, "lora": lora, "total": trainable + frozen}


def build_model(config: TrainConfig, base: FrozenGPT2 | None = None) -> TrajLLM:
    torch.manual_seed(config.seed)
    return TrajLLM(config, base)
