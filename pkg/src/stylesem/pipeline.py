"""Model bundle wiring the towers, fusion, mask generator and decoder together."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import InputError
from .fusion import ConcatFusion, FusionNetwork
from .generator import DEFAULT_CONTEXT_CAP, Generator, VocabSpec
from .masks import MaskGenerator, apply_and_pool
from .towers import CrossAttentionTower, TokenMlpDisentangler, extract_self

COMBOS = ("aa", "am", "sa", "sm")

DEFAULT_DTYPE = torch.float32


@dataclass
class ModelDims:
    visual_vocab: int = 64
    d: int = 64
    n_blocks: int = 2
    latent_rows: int = 8
    num_tokens: int = 64
    context_cap: int = DEFAULT_CONTEXT_CAP


class ModelBundle(nn.Module):
    """All trainable components of the two-stage pipeline.

    ``disentangler`` selects the attention towers or the per-token MLP ablation;
    ``fusion_kind`` selects the full fusion network or plain concatenation.
    """

    def __init__(
        self,
        dims: ModelDims,
        disentangler: str = "attention",
        fusion_kind: str = "full",
        dtype: torch.dtype = DEFAULT_DTYPE,
    ):
        super().__init__()
        if disentangler not in ("attention", "mlp"):
            raise InputError(f"unknown disentangler {disentangler!r}")
        if fusion_kind not in ("full", "concat"):
            raise InputError(f"unknown fusion {fusion_kind!r}")
        self.dims = dims
        self.disentangler = disentangler
        self.fusion_kind = fusion_kind
        self.generator = Generator(
            VocabSpec(dims.visual_vocab),
            d=dims.d,
            n_blocks=dims.n_blocks,
            num_tokens=dims.num_tokens,
            context_cap=dims.context_cap,
        )
        if disentangler == "attention":
            self.style_tower = CrossAttentionTower(dims.d)
            self.sem_tower = CrossAttentionTower(dims.d)
            self.mlp_towers = None
        else:
            self.style_tower = None
            self.sem_tower = None
            self.mlp_towers = TokenMlpDisentangler(dims.d)
        if fusion_kind == "full":
            self.fusion = FusionNetwork(dims.d, dims.latent_rows)
        else:
            self.fusion = ConcatFusion(dims.d, dims.latent_rows)
        self.mask_gen = MaskGenerator(dims.d)
        self.to(dtype)

    # -- feature extraction ---------------------------------------------------

    def embed_visual(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.generator.embed_visual_for_towers(tokens)

    def style_features_self(self, tokens: torch.Tensor) -> torch.Tensor:
        emb = self.embed_visual(tokens)
        if self.disentangler == "attention":
            return extract_self(self.style_tower, emb)
        return self.mlp_towers(emb)[0]

    def sem_features_self(self, tokens: torch.Tensor) -> torch.Tensor:
        emb = self.embed_visual(tokens)
        if self.disentangler == "attention":
            return extract_self(self.sem_tower, emb)
        return self.mlp_towers(emb)[1]

    def stage1_latents(
        self,
        anchor_tokens: torch.Tensor,
        style_tokens: torch.Tensor,
        sem_tokens: torch.Tensor,
    ) -> dict[str, torch.Tensor]:
        """Latent instructions for every style/semantic source combination."""
        e_a = self.embed_visual(anchor_tokens)
        e_s = self.embed_visual(style_tokens)
        e_m = self.embed_visual(sem_tokens)
        if self.disentangler == "attention":
            f_a_sty = self.style_tower(e_a, e_s)
            f_s_sty = self.style_tower(e_s, e_a)
            f_a_sem = self.sem_tower(e_a, e_m)
            f_m_sem = self.sem_tower(e_m, e_a)
        else:
            f_a_sty, f_a_sem = self.mlp_towers(e_a)
            f_s_sty = self.mlp_towers(e_s)[0]
            f_m_sem = self.mlp_towers(e_m)[1]
        return {
            "aa": self.fusion(f_a_sty, f_a_sem),
            "am": self.fusion(f_a_sty, f_m_sem),
            "sa": self.fusion(f_s_sty, f_a_sem),
            "sm": self.fusion(f_s_sty, f_m_sem),
        }

    def stage2_latent(
        self,
        history_tokens: torch.Tensor,  # (B, N, L)
        ref_tokens: torch.Tensor,      # (B, L)
        alpha_s: float,
        alpha_m: float,
        mask_mode: str = "hard",
        return_masks: bool = False,
    ):
        """User-specific latent instruction from history style and reference semantics."""
        if history_tokens.ndim != 3:
            raise InputError("history_tokens must be (B, N, L)")
        batch, n_hist, length = history_tokens.shape
        flat = history_tokens.reshape(batch * n_hist, length)
        style_feats = self.style_features_self(flat).reshape(batch, n_hist, length, self.dims.d)
        sem_feats = self.sem_features_self(ref_tokens)
        style_masks, sem_mask = self.mask_gen(style_feats, sem_feats, alpha_s, alpha_m, mode=mask_mode)
        pooled_style, masked_sem = apply_and_pool(style_feats, style_masks, sem_feats, sem_mask)
        latent = self.fusion(pooled_style, masked_sem)
        if return_masks:
            return latent, style_masks, sem_mask
        return latent

    # -- parameter bookkeeping --------------------------------------------------

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {
            "embeddings": [],
            "generator": [],
            "disentangler": [],
            "fusion": [],
            "maskgen": [],
        }
        for name, param in self.named_parameters():
            if name.startswith(("generator.token_emb", "generator.seq_pos_emb", "generator.tower_pos_emb")):
                groups["embeddings"].append((name, param))
            elif name.startswith("generator."):
                groups["generator"].append((name, param))
            elif name.startswith(("style_tower.", "sem_tower.", "mlp_towers.")):
                groups["disentangler"].append((name, param))
            elif name.startswith("fusion."):
                groups["fusion"].append((name, param))
            elif name.startswith("mask_gen."):
                groups["maskgen"].append((name, param))
            else:
                raise AssertionError(f"unclassified parameter {name}")
        return groups

    def stage_parameters(self, stage: int, freeze_towers: bool = False) -> list[nn.Parameter]:
        """Trainable parameters per stage; the mask generator exists in stage 2 only."""
        params = []
        for name, param in sorted(self.named_parameters()):
            if name.startswith("mask_gen."):
                if stage == 2:
                    params.append(param)
            elif freeze_towers and stage == 2 and name.startswith(("style_tower.", "sem_tower.", "mlp_towers.")):
                continue
            else:
                params.append(param)
        return params


def init_parameters(model: ModelBundle, seed: int) -> None:
    """Deterministic initialization.

    Token embeddings and every residual-branch output projection start at zero:
    untrained features are content-free (probes sit at chance) and the decoder's
    initial predictive distribution is exactly uniform.  Positional tables and
    the remaining projections draw from N(0, 0.02^2).
    """
    gen = torch.Generator().manual_seed(seed)
    zero_suffixes = ("w_o.weight", "ffn2.weight", "ffn2.bias", "ffn1.bias", "score_head.bias")
    zero_prefixes = ("generator.token_emb", "generator.head")
    for name, param in sorted(model.named_parameters()):
        with torch.no_grad():
            if name.endswith(("ln.weight", "ln1.weight", "ln2.weight", "ln_final.weight")):
                param.fill_(1.0)
            elif name.endswith(("ln.bias", "ln1.bias", "ln2.bias", "ln_final.bias")):
                param.zero_()
            elif name.startswith(zero_prefixes) or name.endswith(zero_suffixes):
                param.zero_()
            elif name.endswith(("style_out.bias", "sem_out.bias", "style_out.weight", "sem_out.weight")):
                param.zero_()
            else:
                param.copy_(torch.empty_like(param).normal_(0.0, 0.02, generator=gen))


def build_model(
    dims: ModelDims,
    seed: int,
    disentangler: str = "attention",
    fusion_kind: str = "full",
    dtype: torch.dtype = DEFAULT_DTYPE,
) -> ModelBundle:
    model = ModelBundle(dims, disentangler=disentangler, fusion_kind=fusion_kind, dtype=dtype)
    init_parameters(model, seed)
    return model


def tokens_to_tensor(token_arrays: list[np.ndarray] | np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(token_arrays), dtype=torch.long)
