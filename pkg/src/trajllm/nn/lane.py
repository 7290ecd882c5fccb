"""Lane-aware probability learning: Mamba layers over the lane axis, lane scores, top-c."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from trajllm.nn.ssm import selective_scan

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


def masked_instance_norm(x: torch.Tensor, mask: torch.Tensor | None = None, eps: float = 1e-5):
    """Normalize each feature channel over the valid rows of the L axis.

    x: (B, L, D); mask: (B, L). Masked rows are returned as zeros; a constant
    channel maps to zeros rather than NaN.
    """
    if mask is None:
        mask = torch.ones(x.shape[:2], dtype=torch.bool, device=x.device)
    m = mask[..., None].to(x.dtype)
    count = m.sum(dim=1, keepdim=True).clamp(min=1.0)
    mean = (x * m).sum(dim=1, keepdim=True) / count
    var = (((x - mean) * m) ** 2).sum(dim=1, keepdim=True) / count
    return (x - mean) / torch.sqrt(var + eps) * m


class MambaBlock(nn.Module):
    def __init__(self, dim: int, expand: int = 2, d_state: int = 16, conv_width: int = 4,
                 scan_method: str = "fused"):
        super().__init__()
        inner = expand * dim
        self.in_proj_m = nn.Linear(dim, inner)
        self.in_proj_n = nn.Linear(dim, inner)
        self.conv = nn.Conv1d(inner, inner, conv_width, groups=inner, padding=conv_width - 1)
        self.delta_proj = nn.Linear(inner, inner, bias=False)
        self.B_proj = nn.Linear(inner, d_state, bias=False)
        self.C_proj = nn.Linear(inner, d_state, bias=False)
        self.A_log = nn.Parameter(torch.log(torch.arange(1, d_state + 1, dtype=torch.float32)).repeat(inner, 1))
        # softplus(delta_bias) log-uniform in [1e-3, 1e-1]
        dt = torch.exp(torch.rand(inner) * (math.log(0.1) - math.log(1e-3)) + math.log(1e-3))
        self.delta_bias = nn.Parameter(dt + torch.log(-torch.expm1(-dt)))
        self.out_proj = nn.Linear(inner, dim)
        self.scan_method = scan_method

    @property
    def A(self):
        return -torch.exp(self.A_log)

    def branch_m(self, F_in):
        m = self.in_proj_m(F_in)
        L = m.shape[1]
        return F.silu(self.conv(m.transpose(1, 2))[..., :L].transpose(1, 2))

    def ssm_inputs(self, m_prime):
        delta = F.softplus(self.delta_proj(m_prime) + self.delta_bias)
        return delta, self.B_proj(m_prime), self.C_proj(m_prime)

    def forward(self, F_in, mask=None):
        m_prime = self.branch_m(F_in)
        if mask is not None:
            m_prime = m_prime * mask[..., None].to(m_prime.dtype)
        delta, B, C = self.ssm_inputs(m_prime)
        q = selective_scan(m_prime, delta, self.A, B, C, self.scan_method)
        n_prime = F.silu(self.in_proj_n(F_in))
        return self.out_proj(q * n_prime)


class MambaLayer(nn.Module):
    """Norm -> Mamba block -> norm+residual -> position-wise FFN -> norm+residual."""

    def __init__(self, dim: int, dropout: float = 0.1, **block_kw):
        super().__init__()
        self.block = MambaBlock(dim, **block_kw)
        self.ffn = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim))
        self.drop = nn.Dropout(dropout)
        self.calls = 0

    def forward(self, F_in, mask=None):
        self.calls += 1
        Q = self.block(masked_instance_norm(F_in, mask), mask)
        Qt = masked_instance_norm(self.drop(Q), mask) + F_in
        S = masked_instance_norm(self.drop(self.ffn(Qt)), mask) + Qt
        if mask is not None:
            S = S * mask[..., None].to(S.dtype)
        return S


@dataclass
class CandidateLanes:
    indices: torch.Tensor  # (B, c)
    features: torch.Tensor  # (B, c, D)
    scores: torch.Tensor  # (B, c), non-increasing


def lane_scores(logits: torch.Tensor, lane_mask: torch.Tensor) -> torch.Tensor:
    """Per-timestep softmax across valid lanes. logits (B, L, T) -> probabilities (B, L, T)."""
    if not lane_mask.any(dim=1).all():
        raise ValueError("lane scores need at least one valid lane per scene")
    m = lane_mask[..., None]
    logits = logits.masked_fill(~m, torch.finfo(logits.dtype).min)
    return torch.softmax(logits, dim=1) * m.to(logits.dtype)


def select_top_c(probs: torch.Tensor, lane_mask: torch.Tensor, features: torch.Tensor, c: int) -> CandidateLanes:
    """Rank lanes by time-averaged probability; ties go to the lower index."""
    valid = int(lane_mask.sum(dim=1).min())
    if c > valid:
        logger.warning("top-c %d exceeds %d valid lanes; clamping", c, valid)
        c = valid
    mean = probs.mean(dim=2).masked_fill(~lane_mask, float("-inf"))
    scores, order = torch.sort(mean, dim=1, descending=True, stable=True)
    idx = order[:, :c]
    feats = torch.gather(features, 1, idx[..., None].expand(-1, -1, features.shape[-1]))
    return CandidateLanes(idx, feats, scores[:, :c])


def lane_loss(probs: torch.Tensor, lane_labels: torch.Tensor, lane_mask: torch.Tensor) -> torch.Tensor:
    """Sum over future steps of cross-entropy against the one-hot closest lane; mean over batch.

    probs (B, L, T); lane_labels (B, T, L).
    """
    labels = lane_labels.to(probs.dtype)
    if (labels * (~lane_mask)[:, None, :].to(probs.dtype)).any():
        raise ValueError("lane label points at a masked lane")
    p = probs.transpose(1, 2).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    ce = -(labels * torch.log(p)).sum(dim=2)  # (B, T)
    return ce.sum(dim=1).mean()


class LaneAwareModule(nn.Module):
    def __init__(self, dim: int, t_f: int = 12, n_layers: int = 3, dropout: float = 0.1, **block_kw):
        super().__init__()
        self.stream_proj = nn.Linear(2 * dim, dim)
        self.layers = nn.ModuleList(MambaLayer(dim, dropout, **block_kw) for _ in range(n_layers))
        self.head = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, t_f))

    def build_lane_stream(self, s_target, f_tilde, lane_mask):
        """Broadcast the target state over lanes, concatenate features, project 2D -> D."""
        s = s_target[:, None, :].expand(-1, f_tilde.shape[1], -1)
        F_in = self.stream_proj(torch.cat([s, f_tilde], dim=-1))
        return F_in * lane_mask[..., None].to(F_in.dtype)

    @property
    def mamba_calls(self) -> int:
        return sum(layer.calls for layer in self.layers)

    def forward(self, s_target, f_tilde, lane_mask):
        """Returns (S, probs): lane-aware vectors (B, L, D) and scores (B, L, t_f)."""
        S = self.build_lane_stream(s_target, f_tilde, lane_mask)
        for layer in self.layers:
            S = layer(S, lane_mask)
        return S, lane_scores(self.head(S), lane_mask)
