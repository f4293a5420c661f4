"""Synthetic factor world: rendering, contrastive triplets, personalization sessions.

Every image is a 32x32 RGB canvas organized as an 8x8 grid of 4x4-pixel cells.
Style factors (palette, background texture, stroke density) decide how cells are
colored; semantic factors (shape, count, layout) decide which cells belong to the
foreground silhouette.  Rendering is a pure function of the factors, so every
derived quantity (token sequences, probe labels, metric oracles) is exactly
reproducible.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import InputError

IMAGE_SIZE = 32
CELL_SIZE = 4
GRID = IMAGE_SIZE // CELL_SIZE  # 8x8 cells, one visual token per cell
NUM_CELLS = GRID * GRID
PATCH_DIM = CELL_SIZE * CELL_SIZE * 3

N_PALETTES = 8
N_BACKGROUNDS = 4  # plain / stripes / dots / checker
N_STROKES = 3      # thin / medium / thick edge dithering
N_SHAPES = 6       # circle / square / triangle / cross / star / ring
COUNT_MIN, COUNT_MAX = 1, 3
N_LAYOUTS = 4

N_STYLE_COMBOS = N_PALETTES * N_BACKGROUNDS * N_STROKES          # 96
N_SEMANTIC_COMBOS = N_SHAPES * (COUNT_MAX - COUNT_MIN + 1) * N_LAYOUTS  # 72

BACKGROUND_NAMES = ("plain", "stripes", "dots", "checker")
STROKE_NAMES = ("thin", "medium", "thick")
SHAPE_NAMES = ("circle", "square", "triangle", "cross", "star", "ring")

# Color roles per palette: background primary, background secondary, fill, border.
# All 32 colors are pairwise distinct so every cell pattern is a distinct vector.
PALETTES = np.array(
    [
        [(26, 28, 44), (68, 84, 132), (239, 160, 56), (140, 48, 24)],
        [(244, 238, 222), (214, 196, 158), (52, 84, 196), (24, 36, 96)],
        [(30, 52, 38), (74, 112, 70), (216, 228, 116), (92, 124, 36)],
        [(54, 28, 62), (108, 64, 120), (236, 140, 188), (150, 52, 108)],
        [(208, 228, 240), (150, 184, 210), (24, 98, 138), (8, 46, 74)],
        [(58, 62, 70), (108, 114, 124), (222, 76, 62), (120, 26, 28)],
        [(226, 202, 160), (190, 158, 108), (96, 60, 180), (48, 28, 104)],
        [(216, 240, 228), (158, 208, 182), (20, 132, 92), (10, 70, 52)],
    ],
    dtype=np.uint8,
)

# Shape templates on the 4x4 cell grid of one quadrant.
_T = lambda rows: np.array([[int(ch) for ch in row] for row in rows], dtype=bool)
SHAPE_TEMPLATES = {
    0: _T(["0110", "1111", "1111", "0110"]),  # circle
    1: _T(["1111", "1111", "1111", "1111"]),  # square
    2: _T(["1000", "1100", "1110", "1111"]),  # triangle
    3: _T(["1001", "0110", "0110", "1001"]),  # cross
    4: _T(["0100", "1110", "0111", "0010"]),  # star
    5: _T(["1111", "1001", "1001", "1111"]),  # ring
}

# Quadrant origins on the cell grid: upper-left, upper-right, lower-right, lower-left.
QUADRANT_ORIGINS = ((0, 0), (0, 4), (4, 4), (4, 0))

# Border-pixel dithering inside foreground edge cells, one mask per stroke level.
_STROKE_PIXELS = {
    0: _T(["1001", "0000", "0000", "1001"]),                  # thin: corners
    1: _T(["1111", "0000", "0000", "1111"]),                  # medium: top+bottom rows
    2: _T(["1111", "1001", "1001", "1111"]),                  # thick: full ring
}

# Text side of the hybrid prompt.  The fixed prefix is shared by both training
# stages; session instructions append the shape word only, so count and layout
# must be recovered from the reference image rather than from text.
PROMPT_PREFIX_WORDS = ("make", "an", "image")
TEXT_VOCAB = PROMPT_PREFIX_WORDS + SHAPE_NAMES
TEXT_VOCAB_SIZE = len(TEXT_VOCAB)
MAX_TEXT_LEN = 16


@dataclass(frozen=True)
class StyleFactors:
    palette_id: int
    background_id: int
    stroke_id: int

    def __post_init__(self):
        if not (0 <= self.palette_id < N_PALETTES):
            raise InputError(f"palette_id {self.palette_id} out of range [0,{N_PALETTES})")
        if not (0 <= self.background_id < N_BACKGROUNDS):
            raise InputError(f"background_id {self.background_id} out of range [0,{N_BACKGROUNDS})")
        if not (0 <= self.stroke_id < N_STROKES):
            raise InputError(f"stroke_id {self.stroke_id} out of range [0,{N_STROKES})")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.palette_id, self.background_id, self.stroke_id)


@dataclass(frozen=True)
class SemanticFactors:
    shape_id: int
    count: int
    layout_id: int

    def __post_init__(self):
        if not (0 <= self.shape_id < N_SHAPES):
            raise InputError(f"shape_id {self.shape_id} out of range [0,{N_SHAPES})")
        if not (COUNT_MIN <= self.count <= COUNT_MAX):
            raise InputError(f"count {self.count} out of range [{COUNT_MIN},{COUNT_MAX}]")
        if not (0 <= self.layout_id < N_LAYOUTS):
            raise InputError(f"layout_id {self.layout_id} out of range [0,{N_LAYOUTS})")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.shape_id, self.count, self.layout_id)


@dataclass(frozen=True)
class FactorSpec:
    style: StyleFactors
    semantic: SemanticFactors


@dataclass
class ToyImage:
    """Rendered image plus the factors it was rendered from.

    ``factors`` is None for decoded images, which carry pixels only.
    """

    pixels: np.ndarray  # (32, 32, 3) float64 in [0, 1], exact multiples of 1/255
    factors: FactorSpec | None
    render_seed: int = 0


@dataclass
class TextInstruction:
    token_ids: tuple[int, ...]  # indices into TEXT_VOCAB


@dataclass
class TripletRecord:
    anchor: ToyImage
    pos_style: ToyImage
    pos_semantic: ToyImage


@dataclass
class UserSession:
    history: list[ToyImage]
    reference_set: list[ToyImage]
    text_instruction: TextInstruction
    target: ToyImage


@dataclass
class DatasetManifest:
    version: str
    num_triplets: int
    num_sessions: int
    triplet_splits: dict[str, int] = field(default_factory=dict)
    session_splits: dict[str, int] = field(default_factory=dict)
    seed: int = 0


FORMAT_VERSION = 1
MANIFEST_VERSION = "drcw-1"


# ---------------------------------------------------------------------------
# Factor sampling helpers
# ---------------------------------------------------------------------------

def style_from_index(idx: int) -> StyleFactors:
    if not (0 <= idx < N_STYLE_COMBOS):
        raise InputError(f"style combo index {idx} out of range")
    palette, rest = divmod(idx, N_BACKGROUNDS * N_STROKES)
    background, stroke = divmod(rest, N_STROKES)
    return StyleFactors(palette, background, stroke)


def style_to_index(s: StyleFactors) -> int:
    return (s.palette_id * N_BACKGROUNDS + s.background_id) * N_STROKES + s.stroke_id


def semantic_from_index(idx: int) -> SemanticFactors:
    if not (0 <= idx < N_SEMANTIC_COMBOS):
        raise InputError(f"semantic combo index {idx} out of range")
    shape, rest = divmod(idx, (COUNT_MAX - COUNT_MIN + 1) * N_LAYOUTS)
    count_off, layout = divmod(rest, N_LAYOUTS)
    return SemanticFactors(shape, COUNT_MIN + count_off, layout)


def semantic_to_index(s: SemanticFactors) -> int:
    return (s.shape_id * (COUNT_MAX - COUNT_MIN + 1) + (s.count - COUNT_MIN)) * N_LAYOUTS + s.layout_id


def random_style(rng: np.random.Generator) -> StyleFactors:
    return StyleFactors(
        int(rng.integers(N_PALETTES)),
        int(rng.integers(N_BACKGROUNDS)),
        int(rng.integers(N_STROKES)),
    )


def random_semantic(rng: np.random.Generator) -> SemanticFactors:
    return SemanticFactors(
        int(rng.integers(N_SHAPES)),
        int(rng.integers(COUNT_MIN, COUNT_MAX + 1)),
        int(rng.integers(N_LAYOUTS)),
    )


def random_factors(rng: np.random.Generator) -> FactorSpec:
    return FactorSpec(random_style(rng), random_semantic(rng))


def _resample_excluding(rng: np.random.Generator, n: int, exclude: int, low: int = 0) -> int:
    """Uniform draw from [low, low+n) excluding one value."""
    v = int(rng.integers(n - 1))
    v = low + v
    if v >= exclude:
        v += 1
    return v


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def silhouette_cells(sem: SemanticFactors) -> np.ndarray:
    """Foreground cell mask (8x8 bool); depends on semantic factors only."""
    mask = np.zeros((GRID, GRID), dtype=bool)
    template = SHAPE_TEMPLATES[sem.shape_id]
    for i in range(sem.count):
        r0, c0 = QUADRANT_ORIGINS[(sem.layout_id + i) % N_LAYOUTS]
        mask[r0 : r0 + 4, c0 : c0 + 4] |= template
    return mask


def _edge_cells(mask: np.ndarray) -> np.ndarray:
    """Foreground cells with a 4-neighbor outside the silhouette (canvas border counts)."""
    padded = np.zeros((GRID + 2, GRID + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~interior


def _background_cell(palette: np.ndarray, background_id: int, row: int, col: int) -> np.ndarray:
    bgp, bgs = palette[0], palette[1]
    cell = np.empty((CELL_SIZE, CELL_SIZE, 3), dtype=np.uint8)
    if background_id == 0:  # plain
        cell[:] = bgp
    elif background_id == 1:  # stripes
        cell[:2] = bgp
        cell[2:] = bgs
    elif background_id == 2:  # dots
        cell[:] = bgp
        cell[1:3, 1:3] = bgs
    else:  # checker: alternating solid cells
        cell[:] = bgp if (row + col) % 2 == 0 else bgs
    return cell


def _foreground_cell(palette: np.ndarray, stroke_id: int, is_edge: bool) -> np.ndarray:
    fill, border = palette[2], palette[3]
    cell = np.empty((CELL_SIZE, CELL_SIZE, 3), dtype=np.uint8)
    cell[:] = fill
    if is_edge:
        cell[_STROKE_PIXELS[stroke_id]] = border
    return cell


def render(factors: FactorSpec, render_seed: int = 0) -> ToyImage:
    """Render one image.

    The pixels are a pure function of the factors; the seed is stored on the
    record (and reserved for jittered world variants) but does not alter the
    default rendering.
    """
    style, sem = factors.style, factors.semantic
    palette = PALETTES[style.palette_id]
    mask = silhouette_cells(sem)
    edges = _edge_cells(mask)
    canvas = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    for r in range(GRID):
        for c in range(GRID):
            if mask[r, c]:
                cell = _foreground_cell(palette, style.stroke_id, edges[r, c])
            else:
                cell = _background_cell(palette, style.background_id, r, c)
            canvas[r * CELL_SIZE : (r + 1) * CELL_SIZE, c * CELL_SIZE : (c + 1) * CELL_SIZE] = cell
    return ToyImage(canvas.astype(np.float64) / 255.0, factors, int(render_seed))


def foreground_mask(sem: SemanticFactors) -> np.ndarray:
    """Pixel-level silhouette mask (32x32 bool)."""
    return np.kron(silhouette_cells(sem), np.ones((CELL_SIZE, CELL_SIZE), dtype=bool))


def cell_pattern_bank(style: StyleFactors) -> tuple[np.ndarray, np.ndarray]:
    """All cell patterns a style can produce: (foreground stack, background stack)."""
    palette = PALETTES[style.palette_id]
    fg = [
        _foreground_cell(palette, style.stroke_id, False),
        _foreground_cell(palette, style.stroke_id, True),
    ]
    bg = [
        _background_cell(palette, style.background_id, 0, 0),
        _background_cell(palette, style.background_id, 0, 1),
    ]
    return (
        np.stack([f.astype(np.float64) / 255.0 for f in fg]),
        np.stack([b.astype(np.float64) / 255.0 for b in bg]),
    )


def foreground_cells_from_pixels(pixels: np.ndarray, style: StyleFactors) -> np.ndarray:
    """Classify each cell of an arbitrary image as foreground/background.

    Nearest-pattern classification against the style's cell bank; used as the
    silhouette oracle for decoded images, which carry no factors.
    """
    fg_bank, bg_bank = cell_pattern_bank(style)
    out = np.zeros((GRID, GRID), dtype=bool)
    for r in range(GRID):
        for c in range(GRID):
            cell = pixels[r * CELL_SIZE : (r + 1) * CELL_SIZE, c * CELL_SIZE : (c + 1) * CELL_SIZE]
            d_fg = ((fg_bank - cell) ** 2).sum(axis=(1, 2, 3)).min()
            d_bg = ((bg_bank - cell) ** 2).sum(axis=(1, 2, 3)).min()
            out[r, c] = d_fg < d_bg
    return out


# ---------------------------------------------------------------------------
# Text instructions
# ---------------------------------------------------------------------------

def stage1_instruction() -> TextInstruction:
    """Fixed textual part of the stage-1 hybrid prompt."""
    return TextInstruction(tuple(range(len(PROMPT_PREFIX_WORDS))))


def text_instruction(sem: SemanticFactors) -> TextInstruction:
    """Session instruction: fixed prefix plus the shape word.

    Count and layout are deliberately not verbalized, so the reference image is
    the only carrier of the full semantic intent.
    """
    ids = tuple(range(len(PROMPT_PREFIX_WORDS))) + (len(PROMPT_PREFIX_WORDS) + sem.shape_id,)
    if len(ids) > MAX_TEXT_LEN:
        raise InputError("text instruction exceeds the maximum length")
    return TextInstruction(ids)


# ---------------------------------------------------------------------------
# Contrastive triplets and sessions
# ---------------------------------------------------------------------------

def build_triplet(anchor_factors: FactorSpec, rng: np.random.Generator) -> TripletRecord:
    """Anchor + positive-style + positive-semantic record.

    The positive-style image keeps the anchor's style and redraws every semantic
    factor uniformly over the non-anchor values; the positive-semantic image is
    symmetric on the style side.
    """
    a_sty, a_sem = anchor_factors.style, anchor_factors.semantic
    pos_style_sem = SemanticFactors(
        _resample_excluding(rng, N_SHAPES, a_sem.shape_id),
        _resample_excluding(rng, COUNT_MAX - COUNT_MIN + 1, a_sem.count, low=COUNT_MIN),
        _resample_excluding(rng, N_LAYOUTS, a_sem.layout_id),
    )
    pos_sem_style = StyleFactors(
        _resample_excluding(rng, N_PALETTES, a_sty.palette_id),
        _resample_excluding(rng, N_BACKGROUNDS, a_sty.background_id),
        _resample_excluding(rng, N_STROKES, a_sty.stroke_id),
    )
    seeds = rng.integers(0, 2**63 - 1, size=3)
    return TripletRecord(
        anchor=render(anchor_factors, int(seeds[0])),
        pos_style=render(FactorSpec(a_sty, pos_style_sem), int(seeds[1])),
        pos_semantic=render(FactorSpec(pos_sem_style, a_sem), int(seeds[2])),
    )


def style_nn_select(
    anchor: ToyImage,
    pool: Sequence[ToyImage],
    style_feat: Callable[[ToyImage], np.ndarray],
    exclude_anchor: bool = True,
) -> ToyImage:
    """Nearest pool image by mean squared error between style features.

    Ties break toward the lowest pool index.  Entries pixel-identical to the
    anchor are skipped unless ``exclude_anchor`` is disabled.
    """
    if len(pool) == 0:
        raise InputError("candidate pool is empty")
    anchor_feat = np.asarray(style_feat(anchor), dtype=np.float64)
    best_idx, best_dist = -1, np.inf
    for i, candidate in enumerate(pool):
        if exclude_anchor and np.array_equal(candidate.pixels, anchor.pixels):
            continue
        feat = np.asarray(style_feat(candidate), dtype=np.float64)
        dist = float(np.mean((feat - anchor_feat) ** 2))
        if dist < best_dist:
            best_idx, best_dist = i, dist
    if best_idx < 0:
        raise InputError("candidate pool contains only copies of the anchor")
    return pool[best_idx]


def build_triplet_via_retrieval(
    anchor_factors: FactorSpec,
    rng: np.random.Generator,
    style_feat: Callable[[ToyImage], np.ndarray],
    pool_size: int = 64,
) -> TripletRecord:
    """Triplet construction that retrieves the positive-style image.

    The candidate pool is drawn at random and the positive-style sample is the
    style-feature nearest neighbor, mirroring the retrieval procedure the exact
    oracle in :func:`build_triplet` replaces.
    """
    anchor = render(anchor_factors, int(rng.integers(0, 2**63 - 1)))
    pool = [render(random_factors(rng), int(rng.integers(0, 2**63 - 1))) for _ in range(pool_size)]
    pos_style = style_nn_select(anchor, pool, style_feat)
    a_sty, a_sem = anchor_factors.style, anchor_factors.semantic
    pos_sem_style = StyleFactors(
        _resample_excluding(rng, N_PALETTES, a_sty.palette_id),
        _resample_excluding(rng, N_BACKGROUNDS, a_sty.background_id),
        _resample_excluding(rng, N_STROKES, a_sty.stroke_id),
    )
    pos_semantic = render(FactorSpec(pos_sem_style, a_sem), int(rng.integers(0, 2**63 - 1)))
    return TripletRecord(anchor=anchor, pos_style=pos_style, pos_semantic=pos_semantic)


def augment_semantic_preserving(target: ToyImage, k: int, rng: np.random.Generator) -> list[ToyImage]:
    """k restylings of the target: same semantics, pairwise-distinct non-target styles."""
    if target.factors is None:
        raise InputError("target image carries no factors")
    if k < 1:
        raise InputError("k must be >= 1")
    target_idx = style_to_index(target.factors.style)
    candidates = [i for i in range(N_STYLE_COMBOS) if i != target_idx]
    if k > len(candidates):
        raise InputError(f"k={k} exceeds the {len(candidates)} available distinct style combinations")
    chosen = rng.choice(len(candidates), size=k, replace=False)
    out = []
    for pick in chosen:
        style = style_from_index(candidates[int(pick)])
        out.append(render(FactorSpec(style, target.factors.semantic), int(rng.integers(0, 2**63 - 1))))
    return out


def build_session(
    persona: StyleFactors,
    target_sem: SemanticFactors,
    rng: np.random.Generator,
    n_history: int = 4,
    k_refs: int = 4,
    persona_jitter: bool = False,
) -> UserSession:
    if n_history < 1 or k_refs < 1:
        raise InputError("n_history and k_refs must be >= 1")
    history = []
    for _ in range(n_history):
        style = persona
        if persona_jitter and rng.random() < 0.25:
            which = int(rng.integers(3))
            if which == 0:
                style = StyleFactors(
                    _resample_excluding(rng, N_PALETTES, persona.palette_id),
                    persona.background_id,
                    persona.stroke_id,
                )
            elif which == 1:
                style = StyleFactors(
                    persona.palette_id,
                    _resample_excluding(rng, N_BACKGROUNDS, persona.background_id),
                    persona.stroke_id,
                )
            else:
                style = StyleFactors(
                    persona.palette_id,
                    persona.background_id,
                    _resample_excluding(rng, N_STROKES, persona.stroke_id),
                )
        history.append(render(FactorSpec(style, random_semantic(rng)), int(rng.integers(0, 2**63 - 1))))
    target = render(FactorSpec(persona, target_sem), int(rng.integers(0, 2**63 - 1)))
    refs = augment_semantic_preserving(target, k_refs, rng)
    return UserSession(history, refs, text_instruction(target_sem), target)


def _split_counts(n: int) -> tuple[int, int, int]:
    """8:1:1 split sizes; at least one valid/test record once n >= 3."""
    n_valid = n // 10
    n_test = n // 10
    if n >= 3:
        n_valid = max(1, n_valid)
        n_test = max(1, n_test)
    return n - n_valid - n_test, n_valid, n_test


@dataclass
class TripletDataset:
    train: list[TripletRecord]
    valid: list[TripletRecord]
    test: list[TripletRecord]
    manifest: DatasetManifest

    def split(self, name: str) -> list[TripletRecord]:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


@dataclass
class SessionDataset:
    train: list[UserSession]
    valid: list[UserSession]
    test: list[UserSession]
    manifest: DatasetManifest

    def split(self, name: str) -> list[UserSession]:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


def build_triplet_dataset(num_triplets: int, seed: int, shards: int = 1) -> TripletDataset:
    """Uniform anchors; embarrassingly parallel by shard, seeded per (seed, shard)."""
    if num_triplets < 1:
        raise InputError("num_triplets must be positive")
    if shards < 1:
        raise InputError("shards must be >= 1")
    per_shard = [num_triplets // shards] * shards
    for i in range(num_triplets % shards):
        per_shard[i] += 1
    records: list[TripletRecord] = []
    for shard, count in enumerate(per_shard):
        rng = np.random.default_rng([seed, shard])
        for _ in range(count):
            records.append(build_triplet(random_factors(rng), rng))
    n_train, n_valid, n_test = _split_counts(num_triplets)
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        num_triplets=num_triplets,
        num_sessions=0,
        triplet_splits={"train": n_train, "valid": n_valid, "test": n_test},
        seed=seed,
    )
    return TripletDataset(
        records[:n_train], records[n_train : n_train + n_valid], records[n_train + n_valid :], manifest
    )


def build_personal_dataset(
    num_users: int,
    sessions_per_user: int,
    seed: int,
    n_history: int = 4,
    k_refs: int = 4,
    persona_jitter: bool = False,
) -> SessionDataset:
    """Sessions grouped by persona; 8:1:1 split with no target-image leakage.

    Personas are distinct style combinations and each user's session targets use
    distinct semantic combinations, so no two sessions share a target image.
    """
    if num_users < 1 or sessions_per_user < 1:
        raise InputError("num_users and sessions_per_user must be positive")
    if num_users > N_STYLE_COMBOS:
        raise InputError(f"num_users={num_users} exceeds {N_STYLE_COMBOS} distinct personas")
    if sessions_per_user > N_SEMANTIC_COMBOS:
        raise InputError(
            f"sessions_per_user={sessions_per_user} exceeds {N_SEMANTIC_COMBOS} distinct targets per user"
        )
    rng = np.random.default_rng([seed, 0x5E55])
    persona_ids = rng.choice(N_STYLE_COMBOS, size=num_users, replace=False)
    sessions: list[UserSession] = []
    for u in range(num_users):
        user_rng = np.random.default_rng([seed, 0x5E55, u])
        persona = style_from_index(int(persona_ids[u]))
        sem_ids = user_rng.choice(N_SEMANTIC_COMBOS, size=sessions_per_user, replace=False)
        for s in range(sessions_per_user):
            sessions.append(
                build_session(
                    persona,
                    semantic_from_index(int(sem_ids[s])),
                    user_rng,
                    n_history=n_history,
                    k_refs=k_refs,
                    persona_jitter=persona_jitter,
                )
            )
    order = rng.permutation(len(sessions))
    sessions = [sessions[i] for i in order]
    n = len(sessions)
    n_train, n_valid, n_test = _split_counts(n)
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        num_triplets=0,
        num_sessions=n,
        session_splits={"train": n_train, "valid": n_valid, "test": n_test},
        seed=seed,
    )
    return SessionDataset(
        sessions[:n_train], sessions[n_train : n_train + n_valid], sessions[n_train + n_valid :], manifest
    )


# ---------------------------------------------------------------------------
# Serialization: versioned DRCW record streams
# ---------------------------------------------------------------------------

_MAGIC = b"DRCW"
_TRIPLET_KIND = 1
_SESSION_KIND = 2


def _pack_image(img: ToyImage) -> bytes:
    if img.factors is None:
        raise InputError("cannot serialize an image without factors")
    s, m = img.factors.style, img.factors.semantic
    header = struct.pack(
        "<6BQ", s.palette_id, s.background_id, s.stroke_id, m.shape_id, m.count, m.layout_id,
        img.render_seed,
    )
    pixels = np.round(img.pixels * 255.0).astype(np.uint8)
    return header + pixels.tobytes()


def _unpack_image(buf: memoryview) -> tuple[ToyImage, int]:
    pal, bg, st, sh, ct, ly, seed = struct.unpack_from("<6BQ", buf, 0)
    n = IMAGE_SIZE * IMAGE_SIZE * 3
    pixels = np.frombuffer(buf[14 : 14 + n], dtype=np.uint8).reshape(IMAGE_SIZE, IMAGE_SIZE, 3)
    img = ToyImage(
        pixels.astype(np.float64) / 255.0,
        FactorSpec(StyleFactors(pal, bg, st), SemanticFactors(sh, ct, ly)),
        int(seed),
    )
    return img, 14 + n


def _write_records(path: Path, records: list[bytes]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(records)))
        for rec in records:
            fh.write(struct.pack("<I", len(rec)))
            fh.write(rec)


def _read_records(path: Path) -> list[bytes]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise InputError(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<IQ", data, 4)
    if version != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported format version {version}")
    out, offset = [], 16
    for _ in range(count):
        (length,) = struct.unpack_from("<I", data, offset)
        offset += 4
        out.append(data[offset : offset + length])
        offset += length
    if offset != len(data):
        raise InputError(f"{path}: trailing bytes after {count} records")
    return out


def write_triplets(path: Path, triplets: Sequence[TripletRecord]) -> None:
    records = []
    for t in triplets:
        records.append(
            bytes([_TRIPLET_KIND]) + _pack_image(t.anchor) + _pack_image(t.pos_style) + _pack_image(t.pos_semantic)
        )
    _write_records(Path(path), records)


def read_triplets(path: Path) -> list[TripletRecord]:
    out = []
    for rec in _read_records(Path(path)):
        buf = memoryview(rec)
        if buf[0] != _TRIPLET_KIND:
            raise InputError(f"{path}: unexpected record kind {buf[0]}")
        offset = 1
        images = []
        for _ in range(3):
            img, used = _unpack_image(buf[offset:])
            images.append(img)
            offset += used
        out.append(TripletRecord(*images))
    return out


def write_sessions(path: Path, sessions: Sequence[UserSession]) -> None:
    records = []
    for s in sessions:
        body = io.BytesIO()
        txt = bytes(s.text_instruction.token_ids)
        body.write(struct.pack("<3B", len(s.history), len(s.reference_set), len(txt)))
        body.write(txt)
        for img in [*s.history, *s.reference_set, s.target]:
            body.write(_pack_image(img))
        records.append(bytes([_SESSION_KIND]) + body.getvalue())
    _write_records(Path(path), records)


def read_sessions(path: Path) -> list[UserSession]:
    out = []
    for rec in _read_records(Path(path)):
        buf = memoryview(rec)
        if buf[0] != _SESSION_KIND:
            raise InputError(f"{path}: unexpected record kind {buf[0]}")
        n, k, txt_len = struct.unpack_from("<3B", buf, 1)
        offset = 4
        txt = TextInstruction(tuple(buf[offset : offset + txt_len]))
        offset += txt_len
        images = []
        for _ in range(n + k + 1):
            img, used = _unpack_image(buf[offset:])
            images.append(img)
            offset += used
        out.append(UserSession(images[:n], images[n : n + k], txt, images[-1]))
    return out


def write_manifest(path: Path, manifest: DatasetManifest) -> None:
    lines = [
        f"version={manifest.version}",
        f"num_triplets={manifest.num_triplets}",
        f"num_sessions={manifest.num_sessions}",
        f"seed={manifest.seed}",
    ]
    for split, n in manifest.triplet_splits.items():
        lines.append(f"triplet_{split}={n}")
    for split, n in manifest.session_splits.items():
        lines.append(f"session_{split}={n}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> DatasetManifest:
    fields: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            fields[key] = value
    if fields.get("version") != MANIFEST_VERSION:
        raise InputError(f"{path}: manifest version {fields.get('version')!r} != {MANIFEST_VERSION!r}")
    manifest = DatasetManifest(
        version=fields["version"],
        num_triplets=int(fields["num_triplets"]),
        num_sessions=int(fields["num_sessions"]),
        seed=int(fields["seed"]),
    )
    for key, value in fields.items():
        if key.startswith("triplet_") and key != "triplet_splits":
            manifest.triplet_splits[key.removeprefix("triplet_")] = int(value)
        elif key.startswith("session_"):
            manifest.session_splits[key.removeprefix("session_")] = int(value)
    return manifest


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
