"""Fusion of style and semantic features into fixed-size latent instructions."""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import InputError
from .towers import scaled_dot_attention

DEFAULT_LATENT_ROWS = 8


class CrossAttentionSublayer(nn.Module):
    """Attention with residual connection and post-residual layer norm."""

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.w_o = nn.Linear(d, d, bias=False)
        self.ln = nn.LayerNorm(d)

    def forward(self, q: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        if q.shape[-1] != self.d or kv.shape[-1] != self.d:
            raise InputError(f"embedding width must be {self.d}")
        attn = self.w_o(scaled_dot_attention(self.w_q(q), self.w_k(kv), self.w_v(kv)))
        return self.ln(q + attn)


class LatentPooling(nn.Module):
    """M learned query vectors attending over a variable-row sequence."""

    def __init__(self, d: int, latent_rows: int):
        super().__init__()
        self.d = d
        self.latent_rows = latent_rows
        self.queries = nn.Parameter(torch.zeros(latent_rows, d))
        self.attn = CrossAttentionSublayer(d)

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        if rows.shape[-1] != self.d:
            raise InputError(f"embedding width must be {self.d}")
        queries = self.queries.expand(*rows.shape[:-2], -1, -1)
        return self.attn(queries, rows)


class FusionNetwork(nn.Module):
    """Two alternating cross-attention branches followed by M-query pooling.

    ``u = LN(sty + CA(q=sty, kv=sem))``, ``v = LN(sem + CA(q=sem, kv=sty))``;
    the pooled latent reads the row-concatenation ``[u; v]``.  Learned segment
    vectors mark which rows came from the style branch, so the pooled read-out
    is sensitive to the role of each input.
    """

    def __init__(self, d: int, latent_rows: int = DEFAULT_LATENT_ROWS):
        super().__init__()
        if latent_rows < 1:
            raise InputError("latent_rows must be >= 1")
        self.d = d
        self.latent_rows = latent_rows
        self.ca_style = CrossAttentionSublayer(d)
        self.ca_sem = CrossAttentionSublayer(d)
        self.seg_style = nn.Parameter(torch.zeros(d))
        self.seg_sem = nn.Parameter(torch.zeros(d))
        self.pool = LatentPooling(d, latent_rows)

    def forward(self, sty: torch.Tensor, sem: torch.Tensor) -> torch.Tensor:
        u = self.ca_style(sty, sem) + self.seg_style
        v = self.ca_sem(sem, sty) + self.seg_sem
        return self.pool(torch.cat([u, v], dim=-2))


class ConcatFusion(nn.Module):
    """Ablation variant: plain row concatenation into the same M-query pooling.

    The same segment marking as the full network keeps the concatenation
    order-sensitive under the permutation-invariant pooling attention.
    """

    def __init__(self, d: int, latent_rows: int = DEFAULT_LATENT_ROWS):
        super().__init__()
        self.d = d
        self.latent_rows = latent_rows
        self.seg_style = nn.Parameter(torch.zeros(d))
        self.seg_sem = nn.Parameter(torch.zeros(d))
        self.pool = LatentPooling(d, latent_rows)

    def forward(self, sty: torch.Tensor, sem: torch.Tensor) -> torch.Tensor:
        if sty.shape[-1] != self.d or sem.shape[-1] != self.d:
            raise InputError(f"embedding width must be {self.d}")
        return self.pool(torch.cat([sty + self.seg_style, sem + self.seg_sem], dim=-2))
