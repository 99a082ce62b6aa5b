"""Mask algebra: 2D->3D back-projection, pseudo mask features, per-mask
average pooling, the block attention-mask matrix, and the frozen teacher
embedding per mask.

Masks partition the non-VOID pixels of a view (exclusive per-pixel
assignment), so lifting a mask id through the point/pixel correspondence
gives every corresponded point at most one mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import DimMismatch
from .embedspace import CategoryTable, oracle_pixel_embeddings
from .geometry import Correspondence
from .numeric import NORM_EPS, row_norms
from .scenes import RenderedView


@dataclass
class MaskSet:
    """M binary masks over one view plus their unit-norm embeddings.

    `assignment` holds the mask id per pixel (-1 at VOID); `masks[m]` is the
    boolean map of mask m, and together they satisfy the partition property:
    every non-VOID pixel belongs to exactly one mask.
    """

    masks: np.ndarray       # (M, H, W) bool
    embeddings: np.ndarray  # (M, C) unit rows
    assignment: np.ndarray  # (H, W) int64, -1 at VOID

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        m = self.masks.shape[0]
        if self.embeddings.shape[0] != m:
            raise DimMismatch("one embedding per mask required")
        covered = self.masks.sum(axis=0)
        valid_pixels = self.assignment >= 0
        if not np.array_equal(covered > 0, valid_pixels) or covered.max(initial=0) > 1:
            raise ValueError("masks must partition the non-VOID pixels")
        norms = row_norms(self.embeddings)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("mask embeddings must be unit rows")

    @property
    def n_masks(self) -> int:
        return int(self.masks.shape[0])

    @classmethod
    def from_assignment(cls, assignment: np.ndarray, embeddings: np.ndarray) -> "MaskSet":
        assignment = np.asarray(assignment, dtype=np.int64)
        m = embeddings.shape[0]
        masks = np.stack([assignment == i for i in range(m)]) if m else \
            np.zeros((0,) + assignment.shape, dtype=bool)
        return cls(masks, embeddings, assignment)


@dataclass
class Mask3D:
    """Back-projected binary masks over the corresponded points of one view."""

    matrix: np.ndarray  # (n', M) float64 with 0/1 entries, <=1 one per row

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.size and self.matrix.sum(axis=1).max() > 1:
            raise ValueError("a point may belong to at most one mask")

    @property
    def n_masks(self) -> int:
        return int(self.matrix.shape[1])

    def assignment(self) -> np.ndarray:
        """Per-row mask id, -1 where the row is all zero."""
        if self.matrix.shape[0] == 0:
            return np.zeros(0, dtype=np.int64)
        has = self.matrix.sum(axis=1) > 0
        out = np.full(self.matrix.shape[0], -1, dtype=np.int64)
        out[has] = np.argmax(self.matrix[has], axis=1)
        return out


def backproject_masks(ms: MaskSet, corr: Correspondence) -> Mask3D:
    """Lift 2D masks onto corresponded points: row j of the output is the
    indicator of the mask containing point j's pixel."""
    if ms.masks.size and ms.masks.shape[1:] != (corr.height, corr.width):
        raise DimMismatch("mask maps and correspondence use different image sizes")
    n = corr.n_prime
    out = np.zeros((n, ms.n_masks))
    if n:
        mask_id = ms.assignment[corr.pixel_row, corr.pixel_col]
        has = mask_id >= 0
        out[np.flatnonzero(has), mask_id[has]] = 1.0
    return Mask3D(out)


def pseudo_mask_feature(m3d: Mask3D, g2d: np.ndarray) -> np.ndarray:
    """Literal matrix product lifting mask embeddings onto points: each
    corresponded point receives the embedding of its containing mask (or a
    zero row when it lies in no mask)."""
    g2d = np.asarray(g2d, dtype=np.float64)
    if m3d.matrix.shape[1] != g2d.shape[0]:
        raise DimMismatch(
            f"{m3d.matrix.shape[1]} masks vs {g2d.shape[0]} embeddings"
        )
    return m3d.matrix @ g2d


def _segment_sums(assign: np.ndarray, values: np.ndarray, n_segments: int) -> np.ndarray:
    """Per-segment sums accumulated in ascending row order (bincount is a
    sequential loop, so results are bitwise equal to a plain for-loop)."""
    out = np.zeros((n_segments, values.shape[1]))
    if assign.size == 0 or n_segments == 0:
        return out
    keep = assign >= 0
    a = assign[keep]
    v = values[keep]
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(a, weights=v[:, c], minlength=n_segments)
    return out


def mask_pool_3d(
    f3d_corr: np.ndarray, m3d: Mask3D
) -> Tuple[np.ndarray, np.ndarray]:
    """Average per-point features over each back-projected mask.

    Returns (pooled (M,C), valid (M,)); masks with no corresponded points
    are invalid and keep a zero row.
    """
    f = np.asarray(f3d_corr, dtype=np.float64)
    if f.shape[0] != m3d.matrix.shape[0]:
        raise DimMismatch("features not aligned with the correspondence")
    m = m3d.n_masks
    assign = m3d.assignment()
    counts = np.bincount(assign[assign >= 0], minlength=m).astype(np.float64)
    sums = _segment_sums(assign, f, m)
    valid = counts > 0
    pooled = np.zeros_like(sums)
    pooled[valid] = sums[valid] / counts[valid, None]
    return pooled, valid


def build_attention_mask(patch_membership: np.ndarray, n_tokens: int, n_masks: int) -> np.ndarray:
    """Assemble the block attention mask over (image tokens, class token,
    mask tokens); True = not allowed to attend.

    Layout (S = n_tokens + 1 + n_masks):
      rows 0..n_tokens      : [False ... False | True(mask columns)]
      rows n_tokens+1..S-1  : [patch_membership | False | True(mask columns)]

    patch_membership[i, j] is False iff mask i touches patch/token j.
    """
    p = np.asarray(patch_membership, dtype=bool)
    if p.shape != (n_masks, n_tokens):
        raise DimMismatch(
            f"membership shape {p.shape} != ({n_masks}, {n_tokens})"
        )
    s = n_tokens + 1 + n_masks
    out = np.zeros((s, s), dtype=bool)
    out[: n_tokens + 1, n_tokens + 1:] = True
    out[n_tokens + 1:, :n_tokens] = p
    out[n_tokens + 1:, n_tokens] = False
    out[n_tokens + 1:, n_tokens + 1:] = True
    return out


def mask_patch_membership(ms: MaskSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel-token membership matrix for a view's masks.

    Tokens are the non-VOID pixels in row-major order.  Returns
    (membership (M,T) bool with False = touches, token_rows, token_cols).
    """
    rows, cols = np.nonzero(ms.assignment >= 0)
    token_mask_id = ms.assignment[rows, cols]
    membership = np.ones((ms.n_masks, rows.size), dtype=bool)
    membership[token_mask_id, np.arange(rows.size)] = False
    return membership, rows, cols


def teacher_mask_embeddings(
    view: RenderedView, ms: MaskSet, table: CategoryTable
) -> Tuple[np.ndarray, np.ndarray]:
    """Frozen teacher embedding per mask.

    Every non-VOID pixel is one token carrying its oracle embedding; the
    class token (and its mask-token copies) carry zero vectors.  Mask tokens
    attend uniformly over the positions their attention-mask row leaves
    open (member pixels plus the class token) with identity value maps, so
    each pre-normalization output is the mean of its member-pixel
    embeddings and one zero vector; rows are then unit-normalized.  Masks
    without pixels are invalid and stay zero.
    """
    membership, rows, cols = mask_patch_membership(ms)
    n_tok = rows.size
    attn = build_attention_mask(membership, n_tok, ms.n_masks)
    pixel_emb = oracle_pixel_embeddings(view, table)[rows, cols]
    # values for [image tokens | class token | mask tokens]
    values = np.concatenate(
        [pixel_emb, np.zeros((1 + ms.n_masks, table.dim))], axis=0
    )
    mask_rows = attn[n_tok + 1:, :]
    allowed = ~mask_rows
    token_assign = ms.assignment[rows, cols]
    sums = _segment_sums(token_assign, values[:n_tok], ms.n_masks)
    counts = allowed.sum(axis=1).astype(np.float64)  # members + class token
    out = sums / counts[:, None]
    norms = row_norms(out)
    valid = norms > NORM_EPS
    g = np.zeros_like(out)
    g[valid] = out[valid] / norms[valid, None]
    return g, valid


def teacher_embeddings_from_tokens(
    token_assign: np.ndarray, token_embeddings: np.ndarray, n_masks: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Fast path used inside the training loop; bitwise-identical to
    teacher_mask_embeddings given the same tokens (tested)."""
    sums = _segment_sums(token_assign, token_embeddings, n_masks)
    counts = np.bincount(
        token_assign[token_assign >= 0], minlength=n_masks
    ).astype(np.float64)
    out = sums / (counts + 1.0)[:, None]  # + zero-valued class token
    norms = row_norms(out)
    valid = norms > NORM_EPS
    g = np.zeros_like(out)
    g[valid] = out[valid] / norms[valid, None]
    return g, valid
