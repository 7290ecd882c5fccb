"""Frozen GPT-2-style transformer with low-rank adapters on Query and Key.

Base weights use the canonical GPT-2 tensor names (``h.{i}.attn.c_attn.weight``
and friends) with GPT-2's (in, out) storage layout, so a published archive
loads without renaming. Adapters live outside the base module.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from trajllm.nn.attention import masked_softmax_attention

BACKBONE_PATH_ENV = "TRAJLLM_BACKBONE_PATH"


class BackboneLoadError(ValueError):
    pass


@dataclass
class BackboneConfig:
    n_layers: int = 2
    width: int = 128
    n_heads: int = 4
    n_positions: int = 128
    weight_source: str = "surrogate"  # "surrogate" | "pretrained"
    seed: int = 0
    weights_path: str | None = None
    weights_sha256: str | None = None
    use_positional: bool = True
    use_vocabulary: bool = False  # tokens never go through wte

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("backbone needs at least one layer")
        if self.width % self.n_heads:
            raise ValueError(f"width {self.width} not divisible by {self.n_heads} heads")
        if self.weight_source not in ("surrogate", "pretrained"):
            raise ValueError(f"unknown weight_source {self.weight_source!r}")

    @classmethod
    def gpt2_small(cls, **kw) -> "BackboneConfig":
        base = dict(n_layers=12, width=768, n_heads=12, n_positions=1024, weight_source="pretrained")
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


class LoraAdapter(nn.Module):
    """Rank-r update B @ A for a d x k weight; B starts at zero, A Gaussian."""

    def __init__(self, d_out: int, k_in: int, rank: int = 4, scale: float = 1.0,
                 generator: torch.Generator | None = None):
        super().__init__()
        if not 0 < rank < min(d_out, k_in):
            raise ValueError(f"rank {rank} must be in (0, min(d, k))")
        self.rank = rank
        self.scale = scale
        self.A = nn.Parameter(torch.randn(rank, k_in, generator=generator) / math.sqrt(k_in))
        self.B = nn.Parameter(torch.zeros(d_out, rank))

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        return self.scale * ((x @ self.A.T) @ self.B.T)


def lora_forward(W: torch.Tensor, adapter: LoraAdapter | None, x: torch.Tensor,
                 bias: torch.Tensor | None = None) -> torch.Tensor:
    """y = W x + scale * B (A x) for W of shape (d, k); x is (..., k)."""
    if W.dim() != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(f"shape mismatch: W {tuple(W.shape)} vs x {tuple(x.shape)}")
    y = x @ W.T
    if bias is not None:
        y = y + bias
    if adapter is not None:
        if adapter.A.shape[1] != W.shape[1] or adapter.B.shape[0] != W.shape[0]:
            raise ValueError(
                f"adapter shapes A {tuple(adapter.A.shape)}, B {tuple(adapter.B.shape)} "
                f"do not fit W {tuple(W.shape)}"
            )
        y = y + adapter.delta(x)
    return y


class _Conv1D(nn.Module):
    """GPT-2 linear layer: weight stored (in, out)."""

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_in, n_out))
        self.bias = nn.Parameter(torch.empty(n_out))

    def forward(self, x):
        return x @ self.weight + self.bias


class _Attention(nn.Module):
    def __init__(self, width, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.width = width
        self.c_attn = _Conv1D(width, 3 * width)
        self.c_proj = _Conv1D(width, width)

    def qkv_weights(self):
        w, b, d = self.c_attn.weight, self.c_attn.bias, self.width
        return (w[:, :d].T, b[:d]), (w[:, d:2 * d].T, b[d:2 * d]), (w[:, 2 * d:].T, b[2 * d:])

    def forward(self, x, adapters, key_mask):
        (wq, bq), (wk, bk), (wv, bv) = self.qkv_weights()
        ad_q = adapters["q"] if adapters is not None else None
        ad_k = adapters["k"] if adapters is not None else None
        q = lora_forward(wq, ad_q, x, bq)
        k = lora_forward(wk, ad_k, x, bk)
        v = x @ wv.T + bv
        b, t, d = x.shape
        split = lambda z: z.view(b, t, self.n_heads, d // self.n_heads).transpose(1, 2)  # noqa: E731
        causal = torch.ones(t, t, dtype=torch.bool, device=x.device).tril()
        out = masked_softmax_attention(split(q), split(k), split(v), key_mask, causal)
        return self.c_proj(out.transpose(1, 2).reshape(b, t, d))


class _MLP(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.c_fc = _Conv1D(width, 4 * width)
        self.c_proj = _Conv1D(4 * width, width)

    def forward(self, x):
        return self.c_proj(F.gelu(self.c_fc(x), approximate="tanh"))


class _Block(nn.Module):
    def __init__(self, width, n_heads):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width, eps=1e-5)
        self.attn = _Attention(width, n_heads)
        self.ln_2 = nn.LayerNorm(width, eps=1e-5)
        self.mlp = _MLP(width)

    def forward(self, x, adapters, key_mask):
        x = x + self.attn(self.ln_1(x), adapters, key_mask)
        return x + self.mlp(self.ln_2(x))


class FrozenGPT2(nn.Module):
    """Positional embeddings, transformer blocks and final layer norm; no vocabulary."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.wpe = nn.Embedding(config.n_positions, config.width)
        self.h = nn.ModuleList(_Block(config.width, config.n_heads) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.width, eps=1e-5)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def forward(self, x, adapters=None, key_mask=None):
        """x (B, T, width) already in backbone width; ``adapters`` one {"q","k"} per block or None."""
        if x.shape[1] > self.config.n_positions:
            raise ValueError(f"{x.shape[1]} tokens exceed {self.config.n_positions} positions")
        if self.config.use_positional:
            x = x + self.wpe.weight[: x.shape[1]]
        for i, block in enumerate(self.h):
            x = block(x, None if adapters is None else adapters[i], key_mask)
        return self.ln_f(x)

    def fingerprint(self) -> str:
        """64-bit hash of the base weights (names, shapes, float32 bytes)."""
        digest = hashlib.blake2b(digest_size=8)
        for name, t in sorted(self.state_dict().items()):
            digest.update(name.encode())
            digest.update(str(tuple(t.shape)).encode())
            digest.update(t.detach().to(torch.float32).contiguous().numpy().tobytes())
        return digest.hexdigest()


def expected_shapes(config: BackboneConfig) -> dict[str, tuple[int, ...]]:
    w = config.width
    shapes = {"wpe.weight": (config.n_positions, w), "ln_f.weight": (w,), "ln_f.bias": (w,)}
    for i in range(config.n_layers):
        p = f"h.{i}."
        shapes.update({
            p + "ln_1.weight": (w,), p + "ln_1.bias": (w,),
            p + "attn.c_attn.weight": (w, 3 * w), p + "attn.c_attn.bias": (3 * w,),
            p + "attn.c_proj.weight": (w, w), p + "attn.c_proj.bias": (w,),
            p + "ln_2.weight": (w,), p + "ln_2.bias": (w,),
            p + "mlp.c_fc.weight": (w, 4 * w), p + "mlp.c_fc.bias": (4 * w,),
            p + "mlp.c_proj.weight": (4 * w, w), p + "mlp.c_proj.bias": (w,),
        })
    return shapes


def surrogate_state(config: BackboneConfig) -> dict[str, torch.Tensor]:
    """Seed-deterministic GPT-2-style initialization."""
    gen = torch.Generator().manual_seed(config.seed)
    state = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith("ln_1.weight") or name.endswith("ln_2.weight") or name == "ln_f.weight":
            state[name] = torch.ones(shape)
        elif name.endswith(".bias"):
            state[name] = torch.zeros(shape)
        else:
            state[name] = torch.randn(shape, generator=gen) * 0.02
    return state


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_pretrained_state(config: BackboneConfig) -> dict[str, torch.Tensor]:
    from safetensors.torch import load_file

    path = os.environ.get(BACKBONE_PATH_ENV) or config.weights_path
    if not path:
        raise BackboneLoadError(f"no weight path: set weights_path or {BACKBONE_PATH_ENV}")
    path = Path(path)
    if not path.is_file():
        raise BackboneLoadError(f"weight archive not found: {path}")
    if config.weights_sha256 and _sha256(path) != config.weights_sha256:
        raise BackboneLoadError(f"checksum mismatch for {path}")
    raw = load_file(str(path))
    raw = {k.removeprefix("transformer."): v for k, v in raw.items()}

    want = expected_shapes(config)
    missing = sorted(set(want) - set(raw))
    bad = sorted(
        f"{k}: expected {want[k]}, got {tuple(raw[k].shape)}"
        for k in want if k in raw and tuple(raw[k].shape) != want[k]
    )
    if missing or bad:
        lines = [f"missing tensor {k}" for k in missing] + [f"shape mismatch {b}" for b in bad]
        raise BackboneLoadError("invalid backbone archive:\n" + "\n".join(lines))
    return {k: raw[k].to(torch.float32) for k in want}


def load_backbone(config: BackboneConfig) -> FrozenGPT2:
    """Build the frozen base transformer from a weight archive or a seeded surrogate."""
    state = surrogate_state(config) if config.weight_source == "surrogate" else read_pretrained_state(config)
    model = FrozenGPT2(config)
    model.load_state_dict(state, strict=True)
    return model.freeze()


def save_backbone_archive(state: dict[str, torch.Tensor], path) -> None:
    from safetensors.torch import save_file

    save_file({k: v.contiguous() for k, v in state.items()}, str(path))


class AdaptedBackbone(nn.Module):
    """D -> width alignment, frozen blocks with Q/K adapters, width -> D projection."""

    def __init__(self, dim: int, config: BackboneConfig, rank: int = 4, scale: float = 1.0,
                 adapter_seed: int = 0, base: FrozenGPT2 | None = None):
        super().__init__()
        self.base = base if base is not None else load_backbone(config)
        width = self.base.config.width
        self.in_proj = nn.Linear(dim, width)
        gen = torch.Generator().manual_seed(adapter_seed)
        self.adapters = nn.ModuleList(
            nn.ModuleDict({
                "q": LoraAdapter(width, width, rank, scale, gen),
                "k": LoraAdapter(width, width, rank, scale, gen),
            })
            for _ in range(len(self.base.h))
        )
        self.out_proj = nn.Linear(width, dim)
        self.forward_calls = 0

    def backbone_forward(self, g, token_mask=None, use_adapters: bool = True):
        """Joint encoding (B, T, D) -> interaction representations z (B, T, width)."""
        adapters = None
        if use_adapters:
            if len(self.adapters) != len(self.base.h) or any(
                set(a.keys()) != {"q", "k"} for a in self.adapters
            ):
                raise ValueError("every backbone layer needs a Query and a Key adapter")
            adapters = list(self.adapters)
        self.forward_calls += 1
        return self.base(self.in_proj(g), adapters, token_mask)

    def project_interaction(self, z):
        if not torch.isfinite(z).all():
            raise ValueError("interaction representation contains non-finite values")
        return self.out_proj(z)

    def forward(self, g, token_mask=None, use_adapters: bool = True):
        return self.project_interaction(self.backbone_forward(g, token_mask, use_adapters))


def target_last_order(token_mask: torch.Tensor, target_index: int = 0) -> torch.Tensor:
    """Per-scene token order: valid context tokens, then the target, then padding.

    Under a causal mask only the last valid token sees the whole scene, so the
    target goes there. Padding stays at the end, which keeps every valid
    token's position independent of how much padding the batch carries.
    """
    key = (~token_mask).long() * 2
    key[:, target_index] = 1
    return torch.sort(key, dim=1, stable=True).indices


def apply_order(x: torch.Tensor, order: torch.Tensor) -> torch.Tensor:
    idx = order if x.dim() == 2 else order[..., None].expand(-1, -1, x.shape[-1])
    return torch.gather(x, 1, idx)


def undo_order(x: torch.Tensor, order: torch.Tensor) -> torch.Tensor:
    idx = order[..., None].expand(-1, -1, x.shape[-1])
    return torch.empty_like(x).scatter_(1, idx, x)


def adapter_parameters(module: nn.Module):
    return [p for m in module.modules() if isinstance(m, LoraAdapter) for p in (m.A, m.B)]


def lora_parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in adapter_parameters(module))
