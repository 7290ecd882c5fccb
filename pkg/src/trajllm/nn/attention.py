"""Masked multi-head attention used throughout the encoder and decoder."""

from __future__ import annotations

import math

import torch
from torch import nn


def masked_softmax_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    key_mask: torch.Tensor | None = None,
    attn_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Scaled dot-product attention over (..., Lq, d) x (..., Lk, d).

    ``key_mask`` (B, Lk) and ``attn_mask`` (Lq, Lk) are boolean "may attend"
    masks. Disallowed keys get exactly zero weight; a query with no allowed
    key returns a zero vector instead of NaN.
    """
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    allowed = None
    if key_mask is not None:
        allowed = key_mask[:, None, None, :]
    if attn_mask is not None:
        allowed = attn_mask if allowed is None else allowed & attn_mask
    if allowed is None:
        return torch.softmax(logits, dim=-1) @ v
    logits = logits.masked_fill(~allowed, torch.finfo(logits.dtype).min)
    weights = torch.softmax(logits, dim=-1) * allowed.to(logits.dtype)
    return weights @ v


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by {n_heads} heads")
        kv_dim = kv_dim or dim
        self.n_heads = n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(self, query, key, key_mask=None, query_mask=None):
        """query (B, Lq, D), key/value (B, Lk, Dkv); masks are True for valid tokens.

        Rows whose queries are masked, or that see no valid key, come back as
        exact zeros, so a residual around this module passes its input through.
        """
        b, lq, d = query.shape
        q, k, v = self._split(self.q_proj(query)), self._split(self.k_proj(key)), self._split(self.v_proj(key))
        out = masked_softmax_attention(q, k, v, key_mask)
        out = self.out_proj(out.transpose(1, 2).reshape(b, lq, d))
        keep = None
        if key_mask is not None:
            keep = key_mask.any(dim=1, keepdim=True).expand(b, lq)
        if query_mask is not None:
            keep = query_mask if keep is None else keep & query_mask
        if keep is not None:
            out = out * keep[..., None].to(out.dtype)
        return out
