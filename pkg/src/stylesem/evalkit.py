"""Metric suite: Gram style features, factor probes, Frechet fidelity, alpha sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression

from .errors import InputError
from .pipeline import ModelBundle, tokens_to_tensor
from .tokenizer import Codebook, decode, encode
from .world import (
    CELL_SIZE,
    GRID,
    N_BACKGROUNDS,
    N_LAYOUTS,
    N_PALETTES,
    N_SHAPES,
    N_STROKES,
    COUNT_MAX,
    COUNT_MIN,
    StyleFactors,
    SemanticFactors,
    ToyImage,
    UserSession,
)

FEATURE_NET_SEED = 7_310_911  # fixed random feature net shipped with the repo
ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))
MIN_FID_SET = 50
MIN_CLASS_COUNT = 20

STYLE_FACTOR_NAMES = ("palette", "background", "stroke")
SEMANTIC_FACTOR_NAMES = ("shape", "count", "layout")
FACTOR_CLASSES = {
    "palette": N_PALETTES,
    "background": N_BACKGROUNDS,
    "stroke": N_STROKES,
    "shape": N_SHAPES,
    "count": COUNT_MAX - COUNT_MIN + 1,
    "layout": N_LAYOUTS,
}


def chance_level(names: Sequence[str]) -> float:
    return float(np.mean([1.0 / FACTOR_CLASSES[n] for n in names]))


def factor_labels(images: Sequence[ToyImage]) -> dict[str, np.ndarray]:
    """Ground-truth label vectors for every factor."""
    labels = {name: np.empty(len(images), dtype=np.int64) for name in FACTOR_CLASSES}
    for i, img in enumerate(images):
        if img.factors is None:
            raise InputError("image carries no factors")
        s, m = img.factors.style, img.factors.semantic
        labels["palette"][i] = s.palette_id
        labels["background"][i] = s.background_id
        labels["stroke"][i] = s.stroke_id
        labels["shape"][i] = m.shape_id
        labels["count"][i] = m.count - COUNT_MIN
        labels["layout"][i] = m.layout_id
    return labels


# ---------------------------------------------------------------------------
# Fixed random feature net (Gram style features, Frechet fidelity features)
# ---------------------------------------------------------------------------

class RandomFeatureNet:
    """Frozen 2-layer convolutional feature map with seeded random filters."""

    def __init__(self, seed: int = FEATURE_NET_SEED, c1: int = 8, c2: int = 16):
        rng = np.random.default_rng(seed)
        scale1 = 1.0 / np.sqrt(3 * 9)
        scale2 = 1.0 / np.sqrt(c1 * 9)
        self.w1 = torch.as_tensor(rng.normal(0.0, scale1, size=(c1, 3, 3, 3)))
        self.w2 = torch.as_tensor(rng.normal(0.0, scale2, size=(c2, c1, 3, 3)))
        self.c1, self.c2 = c1, c2

    def _layers(self, pixels_batch: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        x = torch.as_tensor(pixels_batch, dtype=torch.float64).permute(0, 3, 1, 2)
        h1 = torch.relu(torch.nn.functional.conv2d(x, self.w1, padding=1))
        h2 = torch.relu(torch.nn.functional.conv2d(h1, self.w2, stride=2, padding=1))
        return h1, h2

    def gram_features(self, pixels_batch: np.ndarray) -> np.ndarray:
        """Upper triangle of the channel Gram matrix, normalized by spatial size."""
        _, h2 = self._layers(pixels_batch)
        flat = h2.reshape(h2.shape[0], self.c2, -1)
        gram = flat @ flat.transpose(1, 2) / flat.shape[-1]
        iu = torch.triu_indices(self.c2, self.c2)
        return gram[:, iu[0], iu[1]].numpy()

    def pooled_features(self, pixels_batch: np.ndarray) -> np.ndarray:
        """Spatially pooled channel means from both layers (fidelity features)."""
        h1, h2 = self._layers(pixels_batch)
        return torch.cat([h1.mean(dim=(2, 3)), h2.mean(dim=(2, 3))], dim=1).numpy()


_DEFAULT_NET: RandomFeatureNet | None = None


def default_feature_net() -> RandomFeatureNet:
    global _DEFAULT_NET
    if _DEFAULT_NET is None:
        _DEFAULT_NET = RandomFeatureNet()
    return _DEFAULT_NET


def gram_style_feature(image: ToyImage, net: RandomFeatureNet | None = None) -> np.ndarray:
    net = net or default_feature_net()
    return net.gram_features(image.pixels[None])[0]


def gram_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def fid_like(real: Sequence[ToyImage], generated: Sequence[ToyImage], net: RandomFeatureNet | None = None) -> float:
    """Frechet distance between Gaussians fitted to pooled random-net features."""
    if len(real) < MIN_FID_SET or len(generated) < MIN_FID_SET:
        raise InputError(f"both sets need at least {MIN_FID_SET} images")
    net = net or default_feature_net()
    feats_r = net.pooled_features(np.stack([img.pixels for img in real]))
    feats_g = net.pooled_features(np.stack([img.pixels for img in generated]))
    mu_r, mu_g = feats_r.mean(axis=0), feats_g.mean(axis=0)
    cov_r = np.cov(feats_r, rowvar=False)
    cov_g = np.cov(feats_g, rowvar=False)
    eigvals = np.linalg.eigvals(cov_r @ cov_g)
    sqrt_trace = np.sqrt(np.clip(eigvals.real, 0.0, None)).sum()
    dist = float(((mu_r - mu_g) ** 2).sum() + np.trace(cov_r) + np.trace(cov_g) - 2.0 * sqrt_trace)
    return max(dist, 0.0)


# ---------------------------------------------------------------------------
# Linear probes over learned representations
# ---------------------------------------------------------------------------

@dataclass
class ProbeModel:
    classifiers: dict[str, LogisticRegression]

    def predict(self, name: str, features: np.ndarray) -> np.ndarray:
        return self.classifiers[name].predict(features)

    def accuracy(self, features: np.ndarray, labels: dict[str, np.ndarray], names: Sequence[str]) -> dict[str, float]:
        return {n: float((self.predict(n, features) == labels[n]).mean()) for n in names}


@torch.no_grad()
def tower_features(model: ModelBundle, tokens: torch.Tensor, which: str, batch_size: int = 256) -> np.ndarray:
    """Mean-pooled self-extracted features, one d-vector per image."""
    rows = []
    for lo in range(0, tokens.shape[0], batch_size):
        chunk = tokens[lo : lo + batch_size]
        feats = model.style_features_self(chunk) if which == "style" else model.sem_features_self(chunk)
        rows.append(feats.mean(dim=1).numpy())
    return np.concatenate(rows, axis=0)


def pixel_features(images: Sequence[ToyImage]) -> np.ndarray:
    """Sanity-baseline representation: per-cell mean colors."""
    out = np.empty((len(images), GRID * GRID * 3))
    for i, img in enumerate(images):
        cells = img.pixels.reshape(GRID, CELL_SIZE, GRID, CELL_SIZE, 3).mean(axis=(1, 3))
        out[i] = cells.reshape(-1)
    return out


def fit_probes(features: np.ndarray, labels: dict[str, np.ndarray], names: Sequence[str] | None = None, seed: int = 0) -> ProbeModel:
    """One multinomial logistic classifier per factor; deterministic given seed."""
    names = tuple(names) if names is not None else tuple(FACTOR_CLASSES)
    classifiers = {}
    for name in names:
        y = labels[name]
        _, counts = np.unique(y, return_counts=True)
        if counts.min() < MIN_CLASS_COUNT or len(counts) < 2:
            raise InputError(f"factor {name!r}: every class needs >= {MIN_CLASS_COUNT} samples")
        clf = LogisticRegression(C=1.0, max_iter=2000, random_state=seed)
        clf.fit(features, y)
        classifiers[name] = clf
    return ProbeModel(classifiers)


@dataclass
class DisentanglementReport:
    """Mean probe accuracies for (representation x factor group) plus details."""

    style_rep_style: float
    style_rep_semantic: float
    sem_rep_style: float
    sem_rep_semantic: float
    per_factor: dict[str, dict[str, float]] = field(default_factory=dict)

    def as_matrix(self) -> np.ndarray:
        return np.array([
            [self.style_rep_style, self.style_rep_semantic],
            [self.sem_rep_style, self.sem_rep_semantic],
        ])


def fit_representation_probes(
    model: ModelBundle,
    cb: Codebook,
    images: Sequence[ToyImage],
    seed: int = 0,
) -> tuple[ProbeModel, ProbeModel]:
    """Probes for the style and semantic representations, fitted on one split."""
    tokens = tokens_to_tensor([encode(img, cb) for img in images])
    labels = factor_labels(images)
    style_feats = tower_features(model, tokens, "style")
    sem_feats = tower_features(model, tokens, "sem")
    return (
        fit_probes(style_feats, labels, seed=seed),
        fit_probes(sem_feats, labels, seed=seed),
    )


def disentanglement_matrix(
    model: ModelBundle,
    cb: Codebook,
    style_probes: ProbeModel,
    sem_probes: ProbeModel,
    images: Sequence[ToyImage],
) -> DisentanglementReport:
    tokens = tokens_to_tensor([encode(img, cb) for img in images])
    labels = factor_labels(images)
    style_feats = tower_features(model, tokens, "style")
    sem_feats = tower_features(model, tokens, "sem")
    acc_style = style_probes.accuracy(style_feats, labels, FACTOR_CLASSES)
    acc_sem = sem_probes.accuracy(sem_feats, labels, FACTOR_CLASSES)
    mean = lambda acc, names: float(np.mean([acc[n] for n in names]))
    return DisentanglementReport(
        style_rep_style=mean(acc_style, STYLE_FACTOR_NAMES),
        style_rep_semantic=mean(acc_style, SEMANTIC_FACTOR_NAMES),
        sem_rep_style=mean(acc_sem, STYLE_FACTOR_NAMES),
        sem_rep_semantic=mean(acc_sem, SEMANTIC_FACTOR_NAMES),
        per_factor={"style_rep": acc_style, "sem_rep": acc_sem},
    )


# ---------------------------------------------------------------------------
# Session-level evaluation
# ---------------------------------------------------------------------------

@dataclass
class SessionScores:
    alpha_m: float
    style_probe_agreement: float
    style_gram_cosine: float
    semantic_probe_agreement: float

    def balance(self) -> float:
        """Equal-weight mean of the style and semantic probe agreements."""
        return 0.5 * (self.style_probe_agreement + self.semantic_probe_agreement)


def _style_agreement(probes: ProbeModel, feats: np.ndarray, style: StyleFactors) -> float:
    hits = [
        float(probes.predict("palette", feats)[0] == style.palette_id),
        float(probes.predict("background", feats)[0] == style.background_id),
        float(probes.predict("stroke", feats)[0] == style.stroke_id),
    ]
    return float(np.mean(hits))


def _semantic_agreement(probes: ProbeModel, feats: np.ndarray, sem: SemanticFactors) -> float:
    hits = [
        float(probes.predict("shape", feats)[0] == sem.shape_id),
        float(probes.predict("count", feats)[0] == sem.count - COUNT_MIN),
        float(probes.predict("layout", feats)[0] == sem.layout_id),
    ]
    return float(np.mean(hits))


@torch.no_grad()
def score_generated_tokens(
    model: ModelBundle,
    cb: Codebook,
    gen_tokens: torch.Tensor,  # (L,) or (1, L)
    session: UserSession,
    style_probes: ProbeModel,
    sem_probes: ProbeModel,
    alpha_m: float,
    net: RandomFeatureNet | None = None,
) -> SessionScores:
    """Probe-based alignment of one generated token sequence against the session."""
    net = net or default_feature_net()
    tokens = gen_tokens.reshape(1, -1)
    style_feats = tower_features(model, tokens, "style")
    sem_feats = tower_features(model, tokens, "sem")
    persona = session.target.factors.style
    ref_sem = session.reference_set[0].factors.semantic
    pixels = decode(tokens[0].numpy(), cb).pixels
    gen_gram = net.gram_features(pixels[None])[0]
    hist_gram = net.gram_features(np.stack([img.pixels for img in session.history])).mean(axis=0)
    return SessionScores(
        alpha_m=alpha_m,
        style_probe_agreement=_style_agreement(style_probes, style_feats, persona),
        style_gram_cosine=gram_cosine(gen_gram, hist_gram),
        semantic_probe_agreement=_semantic_agreement(sem_probes, sem_feats, ref_sem),
    )


@torch.no_grad()
def generate_for_session(
    model: ModelBundle,
    cb: Codebook,
    session: UserSession,
    alpha_s: float,
    alpha_m: float,
    ref_index: int = 0,
) -> torch.Tensor:
    """Greedy personalized decode for one session at a given semantic mask ratio."""
    vocab = model.generator.vocab
    history = tokens_to_tensor([[encode(img, cb) for img in session.history]])
    ref = tokens_to_tensor([encode(session.reference_set[ref_index], cb)])
    txt = torch.as_tensor([[vocab.text_id(t) for t in session.text_instruction.token_ids]], dtype=torch.long)
    latent = model.stage2_latent(history, ref, alpha_s, alpha_m)
    return model.generator.decode_tokens(txt, latent, mode="greedy")[0]


@torch.no_grad()
def alpha_sweep(
    model: ModelBundle,
    cb: Codebook,
    session: UserSession,
    style_probes: ProbeModel,
    sem_probes: ProbeModel,
    alpha_s: float = 0.2,
    grid: Sequence[float] = ALPHA_GRID,
) -> tuple[float, list[SessionScores]]:
    """Score every semantic mask ratio on the grid; the chosen ratio maximizes the
    equal-weight mean of style and semantic agreement, ties toward smaller ratios."""
    reports = []
    for alpha in grid:
        gen = generate_for_session(model, cb, session, alpha_s, float(alpha))
        reports.append(score_generated_tokens(model, cb, gen, session, style_probes, sem_probes, float(alpha)))
    balances = [r.balance() for r in reports]
    chosen = int(np.argmax(balances))  # argmax takes the first (smallest) ratio on ties
    return float(grid[chosen]), reports


@torch.no_grad()
def stage1_reconstruction_accuracy(
    model: ModelBundle,
    anchor: torch.Tensor,
    style: torch.Tensor,
    semantic: torch.Tensor,
    combo: str = "aa",
    batch_size: int = 128,
) -> float:
    """Greedy token accuracy of anchor reconstruction from one combination's latent."""
    from .training import stage1_text

    correct, total = 0, 0
    for lo in range(0, anchor.shape[0], batch_size):
        hi = min(lo + batch_size, anchor.shape[0])
        latents = model.stage1_latents(anchor[lo:hi], style[lo:hi], semantic[lo:hi])
        txt = stage1_text(model, hi - lo)
        gen = model.generator.decode_tokens(txt, latents[combo], mode="greedy")
        correct += int((gen == anchor[lo:hi]).sum())
        total += gen.numel()
    return correct / total


@torch.no_grad()
def recon_baseline(
    model: ModelBundle,
    cb: Codebook,
    session: UserSession,
    style_probes: ProbeModel,
    sem_probes: ProbeModel,
    ref_index: int = 0,
) -> SessionScores:
    """Tokenize-and-reconstruct the reference with no personalization."""
    tokens = tokens_to_tensor(encode(session.reference_set[ref_index], cb)).reshape(1, -1)
    return score_generated_tokens(model, cb, tokens[0], session, style_probes, sem_probes, alpha_m=float("nan"))
