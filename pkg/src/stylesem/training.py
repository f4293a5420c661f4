"""Two-stage training: reconstruction with importance sampling, then personalized SFT.

All randomness flows from one numpy generator per run.  Draw order: an epoch
permutation first, then per step and per sample the combination z (stage 1) or
the pair (reference index, semantic mask ratio) (stage 2).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import InputError, NumericError
from .pipeline import COMBOS, ModelBundle, tokens_to_tensor
from .tokenizer import Codebook, encode
from .world import TripletRecord, UserSession, stage1_instruction

STAGE1_LR = 1e-4
STAGE2_LR = 1e-5
ADAM_BETAS = (0.9, 0.999)


@dataclass
class AblationFlags:
    importance_sampling: bool = True
    fusion: str = "full"          # "full" | "concat"
    disentangler: str = "attention"  # "attention" | "mlp"

    def validate(self) -> None:
        if self.fusion not in ("full", "concat"):
            raise InputError(f"unknown fusion flag {self.fusion!r}")
        if self.disentangler not in ("attention", "mlp"):
            raise InputError(f"unknown disentangler flag {self.disentangler!r}")


@dataclass
class LossRecord:
    step: int
    stage: int
    combo_losses: dict[str, float]
    sampled: list[str]
    loss: float


@dataclass
class TrainResult:
    best_state: dict
    best_valid_loss: float
    valid_history: list[tuple[int, float]] = field(default_factory=list)


def combo_probs(losses: Sequence[float]) -> np.ndarray:
    """Sampling distribution proportional to the current per-combination losses.

    Losses are treated as constants; a near-zero total falls back to uniform.
    """
    arr = np.asarray(losses, dtype=np.float64)
    if arr.shape != (len(COMBOS),):
        raise InputError(f"expected {len(COMBOS)} losses")
    if (arr < 0).any():
        raise InputError("losses must be non-negative")
    total = arr.sum()
    if total < 1e-9:
        return np.full(len(COMBOS), 1.0 / len(COMBOS))
    return arr / total


# ---------------------------------------------------------------------------
# Token-side dataset views
# ---------------------------------------------------------------------------

@dataclass
class TripletTokens:
    anchor: torch.Tensor  # (n, L)
    style: torch.Tensor
    semantic: torch.Tensor

    def __len__(self) -> int:
        return self.anchor.shape[0]


@dataclass
class SessionTokens:
    history: torch.Tensor  # (n, N, L)
    refs: torch.Tensor     # (n, K, L)
    target: torch.Tensor   # (n, L)
    txt: torch.Tensor      # (n, T) global ids

    def __len__(self) -> int:
        return self.history.shape[0]


def tokenize_triplets(records: Sequence[TripletRecord], cb: Codebook) -> TripletTokens:
    anchors = [encode(r.anchor, cb) for r in records]
    styles = [encode(r.pos_style, cb) for r in records]
    sems = [encode(r.pos_semantic, cb) for r in records]
    return TripletTokens(tokens_to_tensor(anchors), tokens_to_tensor(styles), tokens_to_tensor(sems))


def tokenize_sessions(sessions: Sequence[UserSession], cb: Codebook, model: ModelBundle) -> SessionTokens:
    vocab = model.generator.vocab
    history = [[encode(img, cb) for img in s.history] for s in sessions]
    refs = [[encode(img, cb) for img in s.reference_set] for s in sessions]
    targets = [encode(s.target, cb) for s in sessions]
    txt = [[vocab.text_id(t) for t in s.text_instruction.token_ids] for s in sessions]
    return SessionTokens(
        tokens_to_tensor(history), tokens_to_tensor(refs), tokens_to_tensor(targets),
        torch.as_tensor(txt, dtype=torch.long),
    )


def stage1_text(model: ModelBundle, batch: int) -> torch.Tensor:
    vocab = model.generator.vocab
    ids = [vocab.text_id(t) for t in stage1_instruction().token_ids]
    return torch.as_tensor(ids, dtype=torch.long).expand(batch, -1)


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------

def _check_finite(value: torch.Tensor, step: int, stage: int) -> None:
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite loss {value} at stage {stage} step {step}")


def stage1_combo_losses(model: ModelBundle, anchor: torch.Tensor, style: torch.Tensor, sem: torch.Tensor) -> torch.Tensor:
    """Per-sample loss of each combination, (B, 4), under the current parameters."""
    txt = stage1_text(model, anchor.shape[0])
    latents = model.stage1_latents(anchor, style, sem)
    return torch.stack([model.generator.nll_loss(txt, latents[z], anchor) for z in COMBOS], dim=1)


def stage1_step(
    model: ModelBundle,
    optimizer: torch.optim.Optimizer,
    anchor: torch.Tensor,
    style: torch.Tensor,
    sem: torch.Tensor,
    flags: AblationFlags,
    rng: np.random.Generator,
    step: int = 0,
    forced_combos: np.ndarray | None = None,
) -> LossRecord:
    """One update: no-gradient pre-pass over all four combinations, then a
    gradient step on one combination sampled per sample.

    ``forced_combos`` pins the per-sample combination choice; it exists for
    paired tests that must isolate the sampling distribution from the update
    arithmetic.
    """
    batch = anchor.shape[0]
    with torch.no_grad():
        losses = stage1_combo_losses(model, anchor, style, sem)
    _check_finite(losses, step, 1)
    if forced_combos is not None:
        choices = np.asarray(forced_combos, dtype=np.int64)
    else:
        choices = np.empty(batch, dtype=np.int64)
        for b in range(batch):
            if flags.importance_sampling:
                probs = combo_probs(losses[b].numpy())
            else:
                probs = np.full(len(COMBOS), 1.0 / len(COMBOS))
            choices[b] = rng.choice(len(COMBOS), p=probs)

    txt = stage1_text(model, batch)
    latents = model.stage1_latents(anchor, style, sem)
    stacked = torch.stack([latents[z] for z in COMBOS], dim=1)  # (B, 4, M, d)
    chosen = stacked[torch.arange(batch), torch.as_tensor(choices)]
    loss_vec = model.generator.nll_loss(txt, chosen, anchor)
    loss = loss_vec.mean()
    _check_finite(loss, step, 1)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return LossRecord(
        step=step,
        stage=1,
        combo_losses={z: float(losses[:, i].mean()) for i, z in enumerate(COMBOS)},
        sampled=[COMBOS[c] for c in choices],
        loss=float(loss.detach()),
    )


def stage2_step(
    model: ModelBundle,
    optimizer: torch.optim.Optimizer,
    history: torch.Tensor,  # (B, N, L)
    refs: torch.Tensor,     # (B, K, L)
    target: torch.Tensor,   # (B, L)
    txt: torch.Tensor,      # (B, T)
    alpha_s: float,
    flags: AblationFlags,
    rng: np.random.Generator,
    step: int = 0,
) -> LossRecord:
    """One SFT update; per sample draws (reference index, alpha_m) in that order."""
    batch, k_refs = refs.shape[0], refs.shape[1]
    if k_refs == 0:
        raise InputError("reference set is empty")
    ref_idx = np.empty(batch, dtype=np.int64)
    alpha_m = np.empty(batch, dtype=np.float64)
    for b in range(batch):
        ref_idx[b] = rng.integers(k_refs)
        alpha_m[b] = rng.uniform()
    ref_tokens = refs[torch.arange(batch), torch.as_tensor(ref_idx)]
    alpha_m_t = torch.as_tensor(alpha_m)
    latent = model.stage2_latent(history, ref_tokens, alpha_s, alpha_m_t)
    loss_vec = model.generator.nll_loss(txt, latent, target)
    loss = loss_vec.mean()
    _check_finite(loss, step, 2)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return LossRecord(
        step=step,
        stage=2,
        combo_losses={},
        sampled=[f"r{r}:a{a:.3f}" for r, a in zip(ref_idx, alpha_m)],
        loss=float(loss.detach()),
    )


# ---------------------------------------------------------------------------
# Validation and the epoch loop
# ---------------------------------------------------------------------------

@torch.no_grad()
def stage1_validation_loss(model: ModelBundle, data: TripletTokens, batch_size: int = 64) -> float:
    """Mean over the split of the four-combination average loss; deterministic."""
    total, count = 0.0, 0
    for lo in range(0, len(data), batch_size):
        hi = min(lo + batch_size, len(data))
        losses = stage1_combo_losses(model, data.anchor[lo:hi], data.style[lo:hi], data.semantic[lo:hi])
        total += float(losses.mean(dim=1).sum())
        count += hi - lo
    return total / max(count, 1)


@torch.no_grad()
def stage2_validation_loss(model: ModelBundle, data: SessionTokens, alpha_s: float, batch_size: int = 64) -> float:
    """Deterministic proxy: reference 0 and alpha_m = 0.5 for every session."""
    total, count = 0.0, 0
    for lo in range(0, len(data), batch_size):
        hi = min(lo + batch_size, len(data))
        latent = model.stage2_latent(data.history[lo:hi], data.refs[lo:hi, 0], alpha_s, 0.5)
        loss_vec = model.generator.nll_loss(data.txt[lo:hi], latent, data.target[lo:hi])
        total += float(loss_vec.sum())
        count += hi - lo
    return total / max(count, 1)


def _format_record(rec: LossRecord) -> str:
    parts = [f"step={rec.step}", f"stage={rec.stage}"]
    for z, v in rec.combo_losses.items():
        parts.append(f"loss_{z}={v:.6f}")
    if rec.sampled:
        parts.append("z=" + ",".join(rec.sampled))
    parts.append(f"loss={rec.loss:.6f}")
    return " ".join(parts)


def run_stage(
    stage: int,
    model: ModelBundle,
    train_data: TripletTokens | SessionTokens,
    valid_data: TripletTokens | SessionTokens,
    flags: AblationFlags,
    seed: int,
    epochs: int,
    batch_size: int = 1,
    lr: float | None = None,
    alpha_s: float = 0.2,
    freeze_towers: bool = False,
    log_path: Path | None = None,
    log_every: int = 50,
) -> TrainResult:
    """Epoch loop with seeded shuffling and best-checkpoint retention by validation loss."""
    if stage not in (1, 2):
        raise InputError("stage must be 1 or 2")
    flags.validate()
    rng = np.random.default_rng([seed, stage])
    lr = lr if lr is not None else (STAGE1_LR if stage == 1 else STAGE2_LR)
    params = model.stage_parameters(stage, freeze_towers=freeze_towers)
    optimizer = torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS)
    log_lines: list[str] = []

    def validate() -> float:
        if stage == 1:
            return stage1_validation_loss(model, valid_data)
        return stage2_validation_loss(model, valid_data, alpha_s)

    result = TrainResult(best_state=copy.deepcopy(model.state_dict()), best_valid_loss=validate())
    result.valid_history.append((0, result.best_valid_loss))
    log_lines.append(f"step=0 stage={stage} valid_loss={result.best_valid_loss:.6f}")

    n = len(train_data)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = torch.as_tensor(order[lo : lo + batch_size])
            step += 1
            if stage == 1:
                rec = stage1_step(
                    model, optimizer,
                    train_data.anchor[idx], train_data.style[idx], train_data.semantic[idx],
                    flags, rng, step=step,
                )
            else:
                rec = stage2_step(
                    model, optimizer,
                    train_data.history[idx], train_data.refs[idx], train_data.target[idx],
                    train_data.txt[idx], alpha_s, flags, rng, step=step,
                )
            if step % log_every == 0:
                log_lines.append(_format_record(rec))
        valid_loss = validate()
        result.valid_history.append((step, valid_loss))
        log_lines.append(f"step={step} stage={stage} valid_loss={valid_loss:.6f}")
        if valid_loss < result.best_valid_loss:
            result.best_valid_loss = valid_loss
            result.best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(result.best_state)
    if log_path is not None:
        Path(log_path).write_text("\n".join(log_lines) + "\n")
    return result
