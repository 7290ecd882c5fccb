"""Multi-modal Laplace decoder and the training losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from trajllm.nn.attention import MultiHeadAttention

SCALE_FLOOR = 1e-3
PI_CLAMP = 1e-7


@dataclass
class TrajectoryMixture:
    pi: torch.Tensor  # (B, K)
    mu: torch.Tensor  # (B, K, T, 2)
    b: torch.Tensor  # (B, K, T, 2)


class LaneGuidedAttention(nn.Module):
    """Target interaction state attends to the candidate lanes, with a residual."""

    def __init__(self, dim: int, n_heads: int = 8):
        super().__init__()
        self.attn = MultiHeadAttention(dim, n_heads)

    def forward(self, s_target, candidates):
        """s_target (B, D), candidates (B, c, D) -> (B, D)."""
        if candidates.shape[1] == 0:
            raise ValueError("lane-guided attention needs at least one candidate lane")
        return s_target + self.attn(s_target[:, None, :], candidates)[:, 0]


def sample_latent(batch: int, dim: int, generator: torch.Generator | None = None,
                  dtype=torch.float32) -> torch.Tensor:
    return torch.randn(batch, dim, generator=generator, dtype=dtype)


def assemble_decoder_input(g_target, s_tilde, o, mode_embeddings):
    """Rows k = [g_target ; s_tilde ; o ; mode_k] -> (B, K, 2D + D_o + D_m)."""
    shared = torch.cat([g_target, s_tilde, o], dim=-1)
    b, k = shared.shape[0], mode_embeddings.shape[0]
    return torch.cat(
        [shared[:, None, :].expand(b, k, -1), mode_embeddings[None].expand(b, -1, -1)], dim=-1
    )


def _mlp(d_in, hidden, d_out):
    return nn.Sequential(nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, d_out))


class MixtureHead(nn.Module):
    """Mixing-weight MLP plus two side-by-side MLPs for locations and scales."""

    def __init__(self, in_dim: int, hidden: int, t_f: int = 12):
        super().__init__()
        self.t_f = t_f
        self.pi_head = _mlp(in_dim, hidden, 1)
        self.mu_head = _mlp(in_dim, hidden, 2 * t_f)
        self.b_head = _mlp(in_dim, hidden, 2 * t_f)

    def forward(self, e) -> TrajectoryMixture:
        b, k, _ = e.shape
        pi = torch.softmax(self.pi_head(e).squeeze(-1), dim=-1)
        mu = self.mu_head(e).view(b, k, self.t_f, 2)
        scale = F.softplus(self.b_head(e)).view(b, k, self.t_f, 2) + SCALE_FLOOR
        return TrajectoryMixture(pi, mu, scale)


def laplace_nll(y, mu, b):
    """(1/t_f) sum_t sum_axis [log(2b) + |y - mu| / b]; leading dims are kept."""
    assert bool((b > 0).all()), "Laplace scale must be positive"
    per_step = (torch.log(2 * b) + (y - mu).abs() / b).sum(-1)
    return per_step.mean(-1)


def winner_mode(mu, gt):
    """Index of the mode with the smallest summed L2 error; mu (B, K, T, 2), gt (B, T, 2)."""
    err = torch.linalg.vector_norm(mu - gt[:, None], dim=-1).sum(-1)
    return torch.argmin(err, dim=1)


def wta_regression_loss(mixture: TrajectoryMixture, gt):
    """Laplace NLL of the winning mode only; returns (batch-mean loss, k_star)."""
    k_star = winner_mode(mixture.mu.detach(), gt)
    idx = k_star[:, None, None, None].expand(-1, 1, *mixture.mu.shape[2:])
    mu = mixture.mu.gather(1, idx)[:, 0]
    b = mixture.b.gather(1, idx)[:, 0]
    return laplace_nll(gt, mu, b).mean(), k_star


def mode_classification_loss(pi, k_star):
    """-log pi[k_star], pi clamped to [1e-7, 1]; batch mean."""
    p = pi.gather(1, k_star[:, None])[:, 0].clamp(PI_CLAMP, 1.0)
    return -torch.log(p).mean()


def total_loss(lane, reg, cls, lam: float = 1.0):
    return lam * lane + reg + cls


class LaplaceDecoder(nn.Module):
    def __init__(self, dim: int, k_modes: int = 5, latent_dim: int = 16, mode_dim: int = 32,
                 t_f: int = 12, n_heads: int = 8):
        super().__init__()
        self.k_modes = k_modes
        self.latent_dim = latent_dim
        self.guide = LaneGuidedAttention(dim, n_heads)
        self.mode_embeddings = nn.Parameter(torch.randn(k_modes, mode_dim))
        self.head = MixtureHead(2 * dim + latent_dim + mode_dim, dim, t_f)

    def forward(self, g_target, s_target, candidates, o) -> TrajectoryMixture:
        """``candidates`` None skips the lane guidance (s_tilde = s_target)."""
        s_tilde = s_target if candidates is None else self.guide(s_target, candidates)
        e = assemble_decoder_input(g_target, s_tilde, o, self.mode_embeddings)
        return self.head(e)

