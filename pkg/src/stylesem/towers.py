"""Dual-tower feature extractors: cross-attention towers and the MLP ablation variant."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import InputError


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Single-head attention with 1/sqrt(d) scaling over the last two dims."""
    d = q.shape[-1]
    weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
    return weights @ v


class CrossAttentionTower(nn.Module):
    """One cross-attention sublayer plus one feed-forward sublayer.

    Both sublayers use residual connections with post-residual layer norm:
    ``h = LN1(q + Attn(q, kv))`` then ``out = LN2(h + FFN(h))``.
    """

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.w_o = nn.Linear(d, d, bias=False)
        self.ffn1 = nn.Linear(d, 4 * d)
        self.ffn2 = nn.Linear(4 * d, d)
        self.ln1 = nn.LayerNorm(d)
        self.ln2 = nn.LayerNorm(d)
        self.act = nn.GELU()

    def forward(self, q_tokens: torch.Tensor, kv_tokens: torch.Tensor) -> torch.Tensor:
        if q_tokens.shape[-1] != self.d or kv_tokens.shape[-1] != self.d:
            raise InputError(f"embedding width must be {self.d}")
        attn = self.w_o(scaled_dot_attention(self.w_q(q_tokens), self.w_k(kv_tokens), self.w_v(kv_tokens)))
        h = self.ln1(q_tokens + attn)
        return self.ln2(h + self.ffn2(self.act(self.ffn1(h))))


def extract_self(tower: CrossAttentionTower, tokens: torch.Tensor) -> torch.Tensor:
    """Self-attention reading: query, key and value all come from one sequence."""
    return tower(tokens, tokens)


def extract_triplet_features(
    style_tower: CrossAttentionTower,
    sem_tower: CrossAttentionTower,
    e_anchor: torch.Tensor,
    e_style: torch.Tensor,
    e_semantic: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Style features from the (anchor, positive-style) pair and semantic features
    from the (anchor, positive-semantic) pair, with each image once as query."""
    f_a_sty = style_tower(e_anchor, e_style)
    f_s_sty = style_tower(e_style, e_anchor)
    f_a_sem = sem_tower(e_anchor, e_semantic)
    f_m_sem = sem_tower(e_semantic, e_anchor)
    return f_a_sty, f_s_sty, f_a_sem, f_m_sem


class TokenMlpDisentangler(nn.Module):
    """Ablation variant: two per-token 2-layer MLPs, no cross-token interaction."""

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.style_in = nn.Linear(d, 4 * d)
        self.style_out = nn.Linear(4 * d, d)
        self.sem_in = nn.Linear(d, 4 * d)
        self.sem_out = nn.Linear(4 * d, d)
        self.act = nn.GELU()

    def forward(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if tokens.shape[-1] != self.d:
            raise InputError(f"embedding width must be {self.d}")
        style = self.style_out(self.act(self.style_in(tokens)))
        sem = self.sem_out(self.act(self.sem_in(tokens)))
        return style, sem
