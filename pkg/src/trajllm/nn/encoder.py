"""Sparse context joint encoding: per-entity embedding and agent/lane fusion."""

from __future__ import annotations

import torch
from torch import nn

from trajllm.nn.attention import MultiHeadAttention


def _check_finite(name, x):
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


class VectorEmbedder(nn.Module):
    """GRU over a vector sequence, final hidden state through a two-layer MLP."""

    def __init__(self, in_dim: int, hidden_dim: int):
        super().__init__()
        self.gru = nn.GRU(in_dim, hidden_dim, batch_first=True)
        self.mlp = nn.Sequential(
            nn.Linear(hidden_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim),
        )

    def forward(self, vectors: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """vectors (B, M, T, F), mask (B, M) -> (B, M, D); masked rows are zero."""
        _check_finite("vectors", vectors)
        b, m, t, f = vectors.shape
        _, h_last = self.gru(vectors.reshape(b * m, t, f))
        out = self.mlp(h_last[-1]).view(b, m, -1)
        return out * mask[..., None].to(out.dtype)


def embed_agents(embedder: VectorEmbedder, agent_vectors, agent_mask):
    """agent_vectors (B, A, T_HIST-1, F); agent_mask (B, A) or per-vector (B, A, T)."""
    if agent_mask.dim() == 3:
        agent_vectors = agent_vectors * agent_mask[..., None].to(agent_vectors.dtype)
        agent_mask = agent_mask.any(dim=-1)
    return embedder(agent_vectors, agent_mask)


def embed_lanes(embedder: VectorEmbedder, lane_vectors, lane_mask):
    """Each lane vector is a length-1 sequence through its own recurrent cell."""
    return embedder(lane_vectors.unsqueeze(2), lane_mask)


class GatedFusion(nn.Module):
    """GLU(a, b) = (W_g[a;b] + c_g) * sigmoid(W_s[a;b] + c_s) [+ a]."""

    def __init__(self, dim: int, residual: bool = True):
        super().__init__()
        self.value = nn.Linear(2 * dim, dim)
        self.gate = nn.Linear(2 * dim, dim)
        self.residual = residual

    def forward(self, a, b):
        ab = torch.cat([a, b], dim=-1)
        out = self.value(ab) * torch.sigmoid(self.gate(ab))
        return out + a if self.residual else out


class FusionEncoder(nn.Module):
    """Agent self-attention, gated fusion, then lane<-agent and agent<-lane cross-attention."""

    def __init__(self, dim: int, n_heads: int = 8, glu_residual: bool = True):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, n_heads)
        self.glu = GatedFusion(dim, glu_residual)
        self.lane_from_agent = MultiHeadAttention(dim, n_heads)
        self.agent_from_lane = MultiHeadAttention(dim, n_heads)

    def forward(self, h, f, agent_mask, lane_mask):
        """h (B, A, D), f (B, L, D) -> (h_tilde, f_tilde, g, token_mask)."""
        if not agent_mask.any(dim=1).all():
            raise ValueError("fusion needs at least one valid agent per scene")
        am = agent_mask[..., None].to(h.dtype)
        lm = lane_mask[..., None].to(f.dtype)
        h_t = self.self_attn(h, h, key_mask=agent_mask, query_mask=agent_mask)
        h_t = self.glu(h, h_t) * am
        f_t = (f + self.lane_from_agent(f, h_t, key_mask=agent_mask, query_mask=lane_mask)) * lm
        h_t = (h_t + self.agent_from_lane(h_t, f_t, key_mask=lane_mask, query_mask=agent_mask)) * am
        g = torch.cat([h_t, f_t], dim=1)
        token_mask = torch.cat([agent_mask, lane_mask], dim=1)
        return h_t, f_t, g, token_mask


class ContextEncoder(nn.Module):
    def __init__(self, agent_feat_dim: int, lane_feat_dim: int, dim: int, n_heads: int = 8,
                 glu_residual: bool = True):
        super().__init__()
        self.agent_embed = VectorEmbedder(agent_feat_dim, dim)
        self.lane_embed = VectorEmbedder(lane_feat_dim, dim)
        self.fusion = FusionEncoder(dim, n_heads, glu_residual)

    def forward(self, agent_vectors, agent_vec_mask, lane_vectors, lane_mask):
        agent_mask = agent_vec_mask.any(dim=-1)
        h = embed_agents(self.agent_embed, agent_vectors, agent_vec_mask)
        f = embed_lanes(self.lane_embed, lane_vectors, lane_mask)
        return self.fusion(h, f, agent_mask, lane_mask)
