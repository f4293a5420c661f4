"""Binary row masks over style/semantic features with straight-through gradients."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import InputError
from .towers import CrossAttentionTower


def keep_count(alpha: float, length: int) -> int:
    """Number of rows kept at mask ratio alpha: round-half-up of (1-alpha)*L."""
    if not (0.0 <= alpha <= 1.0):
        raise InputError(f"mask ratio {alpha} outside [0, 1]")
    return int(math.floor((1.0 - alpha) * length + 0.5))


def _rank_by_score(scores: torch.Tensor) -> torch.Tensor:
    """Rank of each position when sorted by descending score, ties by lower index."""
    order = torch.argsort(scores.detach(), dim=-1, descending=True, stable=True)
    ranks = torch.empty_like(order)
    ranks.scatter_(-1, order, torch.arange(scores.shape[-1]).expand_as(order))
    return ranks


def topk_mask(scores: torch.Tensor, alpha: float | torch.Tensor, mode: str = "hard") -> torch.Tensor:
    """Keep-mask over the last dim: 1 for the top round((1-alpha)*L) scores.

    ``alpha`` may be a scalar or a tensor broadcastable over the leading dims
    (one ratio per batch row).  Ties break toward the lower row index.  In
    "hard" mode the forward value is binary while the backward pass treats the
    bit as the identity on the score (straight-through); "soft" mode returns the
    raw scores, the differentiable surrogate used by gradient checks.
    """
    if mode == "soft":
        return scores
    if mode != "hard":
        raise InputError(f"unknown mask mode {mode!r}")
    length = scores.shape[-1]
    if isinstance(alpha, torch.Tensor):
        if ((alpha < 0) | (alpha > 1)).any():
            raise InputError("mask ratios must lie in [0, 1]")
        k = torch.floor((1.0 - alpha) * length + 0.5).long()
        while k.ndim < scores.ndim:
            k = k.unsqueeze(-1)
    else:
        k = keep_count(alpha, length)
    hard = (_rank_by_score(scores) < k).to(scores.dtype)
    return hard + scores - scores.detach()


class MaskGenerator(nn.Module):
    """Self-attention encoder scoring every feature row, with a shared scalar head.

    Scoring runs in two passes: the semantic mask is decided from the full joint
    sequence, then style rows are re-scored with the masked semantic rows in
    context.  This keeps cross-feature awareness while making every output
    independent of the reference once the semantic ratio reaches 1.
    """

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.encoder = CrossAttentionTower(d)
        self.score_head = nn.Linear(d, 1)

    def _scores(self, rows: torch.Tensor) -> torch.Tensor:
        encoded = self.encoder(rows, rows)
        return self.score_head(encoded).squeeze(-1)

    def forward(
        self,
        style_feats: torch.Tensor,  # (..., N, L, d)
        sem_feats: torch.Tensor,    # (..., L, d)
        alpha_s: float,
        alpha_m: float | torch.Tensor,
        mode: str = "hard",
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (style masks (..., N, L), semantic mask (..., L))."""
        if style_feats.shape[-1] != self.d or sem_feats.shape[-1] != self.d:
            raise InputError(f"embedding width must be {self.d}")
        if style_feats.shape[-2] != sem_feats.shape[-2]:
            raise InputError("style and semantic features must share the row count L")
        n_hist, length = style_feats.shape[-3], style_feats.shape[-2]
        lead = style_feats.shape[:-3]
        style_rows = style_feats.reshape(*lead, n_hist * length, self.d)

        joint = torch.cat([style_rows, sem_feats], dim=-2)
        sem_scores = self._scores(joint)[..., n_hist * length :]
        sem_mask = topk_mask(sem_scores, alpha_m, mode)

        masked_sem = sem_feats * sem_mask.unsqueeze(-1)
        joint2 = torch.cat([style_rows, masked_sem], dim=-2)
        style_scores = self._scores(joint2)[..., : n_hist * length]
        style_scores = style_scores.reshape(*lead, n_hist, length)
        if isinstance(alpha_s, torch.Tensor):
            alpha_s = alpha_s.unsqueeze(-1)  # broadcast over the history dim
        style_masks = topk_mask(style_scores, alpha_s, mode)
        return style_masks, sem_mask


def apply_and_pool(
    style_feats: torch.Tensor,  # (..., N, L, d)
    style_masks: torch.Tensor,  # (..., N, L)
    sem_feats: torch.Tensor,    # (..., L, d)
    sem_mask: torch.Tensor,     # (..., L)
) -> tuple[torch.Tensor, torch.Tensor]:
    """Row-mask each history feature, mean-pool over history; row-mask semantics."""
    if style_feats.shape[-3] == 0:
        raise InputError("history is empty")
    pooled_style = (style_feats * style_masks.unsqueeze(-1)).mean(dim=-3)
    masked_sem = sem_feats * sem_mask.unsqueeze(-1)
    return pooled_style, masked_sem
