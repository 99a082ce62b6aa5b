"""The frozen shared embedding space: quasi-orthogonal category vectors
standing in for a pretrained text encoder, plus per-pixel oracle embeddings
used as the frozen teacher's view of an image.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import ConfigError, EmptyInput
from .numeric import row_normalize
from .scenes import RenderedView

MAX_PAIR_COS = 0.3


@dataclass(frozen=True)
class CategoryTable:
    """Unit-norm category embeddings, immutable after construction."""

    embeddings: np.ndarray  # (L, C), rows unit norm, read-only
    names: Tuple[str, ...]

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64).copy()
        emb.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "names", tuple(self.names))
        if emb.shape[0] != len(self.names):
            raise ConfigError("one name per embedding row required")

    @property
    def n_categories(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])


def _table_seed(names: Sequence[str], seed: int) -> np.random.Generator:
    digest = hashlib.sha256(
        ("\x1f".join(names) + f"|{seed}").encode("utf-8")
    ).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def build_category_table(
    names: Sequence[str], dim: int, seed: int, perturbation: float = 0.15
) -> CategoryTable:
    """Random unit rows, orthogonalized then perturbed while keeping every
    off-diagonal cosine within MAX_PAIR_COS.  perturbation=0 forces exact
    orthogonality."""
    n = len(names)
    if n == 0:
        raise ConfigError("need at least one category name")
    if n > dim:
        raise ConfigError(f"{n} categories do not fit quasi-orthogonally in dim {dim}")
    rng = _table_seed(names, seed)
    g = rng.standard_normal((dim, n))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))  # canonical signs
    base = q.T  # (n, dim) orthonormal rows
    noise = rng.standard_normal((n, dim))
    delta = float(perturbation)
    for _ in range(60):
        rows = row_normalize(base + delta * noise)
        gram = rows @ rows.T
        off = np.abs(gram - np.eye(n)).max()
        if off <= MAX_PAIR_COS:
            return CategoryTable(rows, tuple(names))
        delta *= 0.5
    return CategoryTable(base, tuple(names))


def oracle_pixel_embeddings(view: RenderedView, table: CategoryTable) -> np.ndarray:
    """Per-pixel teacher embeddings: the table row of each pixel's label,
    zero at VOID pixels."""
    labels = view.label_image
    if labels.max() >= table.n_categories:
        raise ConfigError("view labels exceed the category table")
    h, w = labels.shape
    out = np.zeros((h, w, table.dim))
    mask = labels >= 0
    out[mask] = table.embeddings[labels[mask]]
    return out


def view_caption_embedding(view: RenderedView, table: CategoryTable) -> np.ndarray:
    """Caption oracle: mean of the table rows of every category visible in
    the view (the surrogate for captioning the image and encoding the text)."""
    labels = view.label_image
    present = np.unique(labels[labels >= 0])
    if present.size == 0:
        raise EmptyInput("view has no visible points to caption")
    return np.mean(table.embeddings[present], axis=0, keepdims=True)


def pooled_pixel_embedding(view: RenderedView, table: CategoryTable) -> np.ndarray:
    """Image-level embedding: mean oracle embedding over non-VOID pixels."""
    labels = view.label_image
    mask = labels >= 0
    if not mask.any():
        raise EmptyInput("view has no visible pixels")
    return np.mean(table.embeddings[labels[mask]], axis=0, keepdims=True)
