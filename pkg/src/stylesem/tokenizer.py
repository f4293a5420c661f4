"""Frozen k-means codebook mapping images to and from discrete token sequences."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError
from .world import CELL_SIZE, GRID, IMAGE_SIZE, NUM_CELLS, PATCH_DIM, ToyImage

DEFAULT_VOCAB = 64
KMEANS_MAX_ITER = 50
CODEBOOK_VERSION = 1
_MAGIC = b"DRCB"


@dataclass
class Codebook:
    centroids: np.ndarray  # (V, PATCH_DIM) float64
    fit_seed: int
    version: int = CODEBOOK_VERSION

    @property
    def vocab_size(self) -> int:
        return int(self.centroids.shape[0])

    def validate(self) -> None:
        if self.centroids.ndim != 2 or self.centroids.shape[1] != PATCH_DIM:
            raise InputError(f"centroids must be (V, {PATCH_DIM})")
        if self.vocab_size < 2:
            raise InputError("vocabulary size must be >= 2")
        if not np.isfinite(self.centroids).all():
            raise InputError("centroids must be finite")
        if len(np.unique(self.centroids, axis=0)) != self.vocab_size:
            raise InputError("centroids must be pairwise distinct")


def patchify(pixels: np.ndarray) -> np.ndarray:
    """Row-major 4x4 patches of one image, flattened to (64, 48)."""
    patches = pixels.reshape(GRID, CELL_SIZE, GRID, CELL_SIZE, 3)
    return patches.transpose(0, 2, 1, 3, 4).reshape(NUM_CELLS, PATCH_DIM)


def unpatchify(patches: np.ndarray) -> np.ndarray:
    grid = patches.reshape(GRID, GRID, CELL_SIZE, CELL_SIZE, 3)
    return grid.transpose(0, 2, 1, 3, 4).reshape(IMAGE_SIZE, IMAGE_SIZE, 3)


def _nearest(patches: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid per patch; argmin breaks ties toward the lowest index."""
    d = ((patches[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


def fit_codebook(corpus: Sequence[ToyImage], vocab_size: int = DEFAULT_VOCAB, seed: int = 0) -> Codebook:
    """Lloyd k-means over all patches, capped at 50 iterations.

    Initialization draws ``vocab_size`` distinct patch vectors; empty clusters
    keep their previous centroid so the fit stays deterministic.
    """
    if vocab_size < 2:
        raise InputError("vocab_size must be >= 2")
    if len(corpus) == 0:
        raise InputError("corpus is empty")
    patches = np.concatenate([patchify(img.pixels) for img in corpus], axis=0)
    distinct = np.unique(patches, axis=0)
    if len(distinct) < vocab_size:
        raise InputError(
            f"corpus yields {len(distinct)} distinct patches, fewer than vocab_size={vocab_size}"
        )
    rng = np.random.default_rng(seed)
    centroids = distinct[rng.choice(len(distinct), size=vocab_size, replace=False)].copy()
    assignments = None
    for _ in range(KMEANS_MAX_ITER):
        new_assignments = _nearest(patches, centroids)
        if assignments is not None and np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for k in range(vocab_size):
            members = patches[assignments == k]
            if len(members):
                centroids[k] = members.mean(axis=0)
    cb = Codebook(centroids=centroids, fit_seed=seed)
    cb.validate()
    return cb


def encode(image: ToyImage, cb: Codebook) -> np.ndarray:
    """Token sequence (length 64, row-major cell order)."""
    cb.validate()
    return _nearest(patchify(image.pixels), cb.centroids).astype(np.int64)


def decode(tokens: np.ndarray, cb: Codebook) -> ToyImage:
    """Pixels-only image tiled from centroid patches; factors are absent."""
    tokens = np.asarray(tokens)
    if tokens.shape != (NUM_CELLS,):
        raise InputError(f"token sequence must have length {NUM_CELLS}")
    if tokens.min() < 0 or tokens.max() >= cb.vocab_size:
        raise InputError("token id out of range for this codebook")
    pixels = unpatchify(cb.centroids[tokens])
    return ToyImage(np.clip(pixels, 0.0, 1.0), None, 0)


def quantization_distortion(corpus: Sequence[ToyImage], cb: Codebook) -> float:
    """Mean squared patch-to-centroid distance over a corpus."""
    patches = np.concatenate([patchify(img.pixels) for img in corpus], axis=0)
    idx = _nearest(patches, cb.centroids)
    return float(((patches - cb.centroids[idx]) ** 2).sum(axis=1).mean())


def roundtrip_error(corpus: Sequence[ToyImage], cb: Codebook) -> float:
    """Mean per-pixel absolute error of decode(encode(x)) over a corpus."""
    total = 0.0
    for img in corpus:
        rec = decode(encode(img, cb), cb)
        total += float(np.abs(rec.pixels - img.pixels).mean())
    return total / len(corpus)


def save_codebook(path: Path, cb: Codebook) -> None:
    cb.validate()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<III", cb.version, cb.vocab_size, PATCH_DIM))
        fh.write(struct.pack("<q", cb.fit_seed))
        fh.write(cb.centroids.astype("<f8").tobytes(order="C"))


def load_codebook(path: Path) -> Codebook:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise InputError(f"{path}: bad magic {data[:4]!r}")
    version, vocab, p = struct.unpack_from("<III", data, 4)
    if version != CODEBOOK_VERSION:
        raise InputError(f"{path}: unsupported codebook version {version}")
    if p != PATCH_DIM:
        raise InputError(f"{path}: patch dimension {p} != {PATCH_DIM}")
    (fit_seed,) = struct.unpack_from("<q", data, 16)
    centroids = np.frombuffer(data[24:], dtype="<f8").reshape(vocab, p).copy()
    cb = Codebook(centroids=centroids, fit_seed=int(fit_seed), version=int(version))
    cb.validate()
    return cb
