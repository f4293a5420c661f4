"""Toy autoregressive generator: embeddings, causal decoder blocks, hybrid prompts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import InputError
from .world import TEXT_VOCAB_SIZE

DEFAULT_CONTEXT_CAP = 128


@dataclass(frozen=True)
class VocabSpec:
    """Unified vocabulary: visual tokens, then text tokens, then specials."""

    visual_size: int
    text_size: int = TEXT_VOCAB_SIZE

    @property
    def bos(self) -> int:
        return self.visual_size + self.text_size

    @property
    def boi(self) -> int:
        return self.visual_size + self.text_size + 1

    @property
    def eoi(self) -> int:
        return self.visual_size + self.text_size + 2

    @property
    def total(self) -> int:
        return self.visual_size + self.text_size + 3

    def text_id(self, text_token: int) -> int:
        if not (0 <= text_token < self.text_size):
            raise InputError(f"text token {text_token} out of range")
        return self.visual_size + text_token


class DecoderBlock(nn.Module):
    """Pre-norm causal self-attention block with a feed-forward sublayer."""

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.ln1 = nn.LayerNorm(d)
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.w_o = nn.Linear(d, d, bias=False)
        self.ln2 = nn.LayerNorm(d)
        self.ffn1 = nn.Linear(d, 4 * d)
        self.ffn2 = nn.Linear(4 * d, d)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor, causal_bias: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        logits = self.w_q(h) @ self.w_k(h).transpose(-2, -1) / math.sqrt(self.d)
        attn = torch.softmax(logits + causal_bias, dim=-1) @ self.w_v(h)
        x = x + self.w_o(attn)
        h = self.ln2(x)
        return x + self.ffn2(self.act(self.ffn1(h)))


class Generator(nn.Module):
    """Causal decoder over the unified vocabulary, predicting visual tokens only.

    Sequence layout: [text tokens][latent instruction rows][BOI][visual tokens].
    Loss and decoding cover the visual positions exclusively.
    """

    def __init__(
        self,
        vocab: VocabSpec,
        d: int = 64,
        n_blocks: int = 2,
        num_tokens: int = 64,
        context_cap: int = DEFAULT_CONTEXT_CAP,
    ):
        super().__init__()
        self.vocab = vocab
        self.d = d
        self.num_tokens = num_tokens
        self.context_cap = context_cap
        self.token_emb = nn.Embedding(vocab.total, d)
        self.seq_pos_emb = nn.Parameter(torch.zeros(context_cap, d))
        self.tower_pos_emb = nn.Parameter(torch.zeros(num_tokens, d))
        self.blocks = nn.ModuleList([DecoderBlock(d) for _ in range(n_blocks)])
        self.ln_final = nn.LayerNorm(d)
        self.head = nn.Linear(d, vocab.visual_size)

    # -- embeddings ---------------------------------------------------------

    def embed_visual_for_towers(self, tokens: torch.Tensor) -> torch.Tensor:
        """Token embeddings plus the tower-side positional table (query side only)."""
        if tokens.shape[-1] != self.num_tokens:
            raise InputError(f"expected token sequences of length {self.num_tokens}")
        return self.token_emb(tokens) + self.tower_pos_emb

    def _causal_bias(self, length: int, dtype: torch.dtype) -> torch.Tensor:
        mask = torch.triu(torch.ones(length, length, dtype=torch.bool), diagonal=1)
        bias = torch.zeros(length, length, dtype=dtype)
        return bias.masked_fill(mask, float("-inf"))

    def _assemble(self, txt_ids: torch.Tensor, latent: torch.Tensor, visual: torch.Tensor | None) -> tuple[torch.Tensor, int]:
        """Embedded sequence [txt][latent][BOI][visual?] with positional encodings."""
        if txt_ids.ndim != 2 or latent.ndim != 3:
            raise InputError("txt_ids must be (B, T) and latent (B, M, d)")
        batch = txt_ids.shape[0]
        boi = torch.full((batch, 1), self.vocab.boi, dtype=torch.long)
        parts = [self.token_emb(txt_ids), latent, self.token_emb(boi)]
        if visual is not None:
            parts.append(self.token_emb(visual))
        seq = torch.cat(parts, dim=1)
        if seq.shape[1] > self.context_cap:
            raise InputError(f"sequence length {seq.shape[1]} exceeds context cap {self.context_cap}")
        seq = seq + self.seq_pos_emb[: seq.shape[1]]
        prompt_len = txt_ids.shape[1] + latent.shape[1] + 1
        return seq, prompt_len

    def forward_hidden(self, seq: torch.Tensor) -> torch.Tensor:
        bias = self._causal_bias(seq.shape[1], seq.dtype)
        x = seq
        for block in self.blocks:
            x = block(x, bias)
        return self.ln_final(x)

    # -- losses and decoding ------------------------------------------------

    def visual_logits(self, txt_ids: torch.Tensor, latent: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits for every visual position: (B, L, V)."""
        if target.shape[-1] != self.num_tokens:
            raise InputError(f"target must have {self.num_tokens} tokens")
        seq, prompt_len = self._assemble(txt_ids, latent, target[:, :-1])
        hidden = self.forward_hidden(seq)
        return self.head(hidden[:, prompt_len - 1 :])

    def nll_loss(self, txt_ids: torch.Tensor, latent: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        """Per-sample negative log-likelihood summed over the visual positions."""
        logits = self.visual_logits(txt_ids, latent, target)
        logprobs = torch.log_softmax(logits, dim=-1)
        picked = logprobs.gather(-1, target.unsqueeze(-1)).squeeze(-1)
        return -picked.sum(dim=-1)

    @torch.no_grad()
    def decode_tokens(
        self,
        txt_ids: torch.Tensor,
        latent: torch.Tensor,
        mode: str = "greedy",
        temperature: float = 1.0,
        seed: int = 0,
    ) -> torch.Tensor:
        """Emit exactly num_tokens visual tokens; deterministic given mode and seed."""
        if mode not in ("greedy", "temperature"):
            raise InputError(f"unknown decode mode {mode!r}")
        if mode == "temperature" and temperature <= 0:
            raise InputError("temperature must be positive")
        batch = txt_ids.shape[0]
        sampler = torch.Generator().manual_seed(seed)
        out = torch.zeros(batch, 0, dtype=torch.long)
        for _ in range(self.num_tokens):
            seq, prompt_len = self._assemble(txt_ids, latent, out if out.shape[1] else None)
            hidden = self.forward_hidden(seq)
            logits = self.head(hidden[:, -1])
            if mode == "greedy":
                nxt = logits.argmax(dim=-1)
            else:
                probs = torch.softmax(logits / temperature, dim=-1)
                nxt = torch.multinomial(probs, 1, generator=sampler).squeeze(-1)
            out = torch.cat([out, nxt.unsqueeze(1)], dim=1)
        return out
