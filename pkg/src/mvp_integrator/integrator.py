"""Visual-primitive fusion: token assembly, masked self-attention, cosine scoring.

The fused sequence is ``[C; I; t_A; t_O]``. No positional embeddings are
added, so vocabulary rows carry no positional meaning and permuting them
permutes the outputs. Scores are cosines between the refined class token
and the *original* text rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn


class NumericFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class MaskFlags:
    attr_obj: bool = True
    attr_attr: bool = True
    all_primitives: bool = True


@dataclass(frozen=True)
class IntegratorConfig:
    dim: int = 32
    layers: int = 1
    heads: int = 4
    ff_dim: int | None = None
    mask: MaskFlags = field(default_factory=MaskFlags)
    logit_scale: float = 1 / 0.07
    zero_init: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("integrator needs at least one layer")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.logit_scale <= 0:
            raise ValueError("logit_scale must be positive")

    @property
    def ffn_dim(self) -> int:
        return self.ff_dim or 4 * self.dim


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (B, N, d)
    boundaries: tuple[int, int, int, int]  # ends of C, I, t_A, t_O

    @property
    def n_patches(self) -> int:
        return self.boundaries[1] - self.boundaries[0]


def assemble_tokens(
    cls: torch.Tensor, patches: torch.Tensor, t_attr: torch.Tensor, t_obj: torch.Tensor, require_patches: bool = True
) -> TokenSequence:
    """Concatenate ``[C; I; t_A; t_O]`` for a batch (or a single image)."""
    if cls.dim() == 1:
        cls, patches = cls.unsqueeze(0), patches.unsqueeze(0)
    b, d = cls.shape
    if patches.dim() != 3 or patches.shape[0] != b:
        raise ValueError("patches must be (B, P, d)")
    if require_patches and patches.shape[1] == 0:
        raise ValueError("patch segment must not be empty")
    for name, t in (("patches", patches), ("t_attr", t_attr), ("t_obj", t_obj)):
        if t.shape[-1] != d:
            raise ValueError(f"{name} has dim {t.shape[-1]}, expected {d}")
    text = torch.cat([t_attr, t_obj], dim=0).to(cls.dtype).unsqueeze(0).expand(b, -1, -1)
    tokens = torch.cat([cls.unsqueeze(1), patches, text], dim=1)
    p, na, no = patches.shape[1], t_attr.shape[0], t_obj.shape[0]
    return TokenSequence(tokens, (1, 1 + p, 1 + p + na, 1 + p + na + no))


def build_attention_mask(flags: MaskFlags, boundaries: tuple[int, int, int, int]) -> torch.Tensor:
    """Boolean (N, N) matrix; ``True`` where query row may attend to key column."""
    _, i_end, a_end, n = boundaries
    mask = torch.ones(n, n, dtype=torch.bool)
    attr = slice(i_end, a_end)
    obj = slice(a_end, n)
    if not flags.all_primitives:
        mask[i_end:, i_end:] = False
    if not flags.attr_obj:
        mask[attr, obj] = False
        mask[obj, attr] = False
    if not flags.attr_attr:
        mask[attr, attr] = False
    mask.fill_diagonal_(True)
    return mask


class MaskedSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        logits = logits.masked_fill(~mask, float("-inf"))
        weights = logits.softmax(dim=-1)
        y = (weights @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y), weights


class FusionBlock(nn.Module):
    """Pre-norm self-attention + GELU feed-forward, both residual."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MaskedSelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, dim))

    def forward(self, x, mask):
        y, weights = self.attn(self.ln1(x), mask)
        x = x + y
        x = x + self.ffn(self.ln2(x))
        return x, weights


@dataclass
class RefinedOutputs:
    cls: torch.Tensor  # (B, d)
    tokens: torch.Tensor  # (B, N, d), refined sequence for diagnostics
    attention: list[torch.Tensor]  # per layer (B, H, N, N)


class Integrator(nn.Module):
    def __init__(self, config: IntegratorConfig):
        super().__init__()
        self.config = config
        self.blocks = nn.ModuleList(
            FusionBlock(config.dim, config.heads, config.ffn_dim) for _ in range(config.layers)
        )
        if config.zero_init:
            for blk in self.blocks:
                for lin in (blk.attn.out, blk.ffn[2]):
                    nn.init.zeros_(lin.weight)
                    nn.init.zeros_(lin.bias)

    def forward(self, seq: TokenSequence, flags: MaskFlags | None = None) -> RefinedOutputs:
        flags = self.config.mask if flags is None else flags
        mask = build_attention_mask(flags, seq.boundaries).to(seq.tokens.device)
        x = seq.tokens
        attention = []
        for blk in self.blocks:
            x, w = blk(x, mask)
            attention.append(w)
        if not torch.isfinite(x).all():
            raise NumericFailure("non-finite activations in integrator output")
        return RefinedOutputs(x[:, 0], x, attention)


def cosine_scores(query: torch.Tensor, rows: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """(B, d) x (N, d) -> (B, N) cosine similarities; zero-norm inputs raise."""
    qn = query.norm(dim=-1, keepdim=True)
    rn = rows.norm(dim=-1, keepdim=True)
    if (qn <= eps).any() or (rn <= eps).any():
        raise ValueError("cosine similarity of a zero-norm vector")
    return (query / qn) @ (rows / rn).to(query.dtype).T


def score_primitives(refined_cls: torch.Tensor, t_attr: torch.Tensor, t_obj: torch.Tensor):
    squeeze = refined_cls.dim() == 1
    if squeeze:
        refined_cls = refined_cls.unsqueeze(0)
    s_attr = cosine_scores(refined_cls, t_attr)
    s_obj = cosine_scores(refined_cls, t_obj)
    if squeeze:
        return s_attr[0], s_obj[0]
    return s_attr, s_obj

