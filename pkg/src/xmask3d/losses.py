"""Training and inference formulas with hand-derived gradients.

Each loss returns a GradPair holding the scalar value and the gradient with
respect to every differentiable input; the finite-difference oracle in
`numeric` is the independent check on all of them.  Frozen targets (teacher
embeddings, caption embeddings) never receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, Sequence, Tuple

import numpy as np

from .errors import (
    DimMismatch,
    EmptyInput,
    EmptySupervision,
    NoValidMasks,
)
from .numeric import GradPair, row_norms, softmax_rows

PROB_FLOOR = 1e-12
BCE_CLIP = 1e-7


@dataclass
class LossWeights:
    """Nonnegative weights of the total objective."""

    seg: float = 4.0
    mask: float = 1.0
    view_3d: float = 1.0
    view_2d: float = 4.0
    view_fuse: float = 1.5
    bi: float = 16.0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0")


@dataclass
class Temperature:
    """Learnable softmax temperature, clamped to [lo, hi] after updates."""

    value: float = 0.07
    lo: float = 0.01
    hi: float = 1.0

    def clamped(self, new_value: float) -> "Temperature":
        return replace(self, value=float(min(self.hi, max(self.lo, new_value))))


def segmentation_loss(
    f_m: np.ndarray,
    f_text: np.ndarray,
    labels: np.ndarray,
    tau: float,
    supervised_mask: np.ndarray,
    base_ids: Sequence[int],
) -> GradPair:
    """Cross-entropy over supervised points of the cosine/temperature
    softmax restricted to base-category columns.

    Returns gradients for the (unnormalized) features and for tau.
    """
    f_m = np.asarray(f_m, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    sup = np.asarray(supervised_mask, dtype=bool)
    if not sup.any():
        raise EmptySupervision("no supervised points")
    base_ids = np.asarray(list(base_ids), dtype=np.int64)
    col_of = -np.ones(f_text.shape[0], dtype=np.int64)
    col_of[base_ids] = np.arange(base_ids.size)

    rows = f_m[sup]
    y = col_of[labels[sup]]
    if np.any(y < 0):
        raise EmptySupervision("supervised point carries a non-base label")
    n = rows.shape[0]
    norms = row_norms(rows)
    if np.any(norms <= 1e-12):
        raise ValueError("zero-norm feature row in segmentation loss")
    unit = rows / norms[:, None]
    text_base = f_text[base_ids]
    cos = unit @ text_base.T
    logits = cos / tau
    p = softmax_rows(logits)
    value = float(-np.mean(np.log(np.maximum(p[np.arange(n), y], PROB_FLOOR))))

    dlogits = p.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    dtau = float(np.sum(dlogits * (-cos / tau ** 2)))
    dunit = (dlogits @ text_base) / tau
    # back through the row normalization
    dot = np.sum(dunit * unit, axis=1, keepdims=True)
    drows = (dunit - dot * unit) / norms[:, None]
    grad_f = np.zeros_like(f_m)
    grad_f[sup] = drows
    return GradPair(value, {"F_m": grad_f, "tau": dtau})


def mask_regularization_loss(
    g_3d: np.ndarray, g_clip: np.ndarray, valid: np.ndarray
) -> GradPair:
    """Mean (1 - cosine) between pooled 3D mask embeddings and the frozen
    teacher rows, averaged over valid masks only."""
    g_3d = np.asarray(g_3d, dtype=np.float64)
    g_clip = np.asarray(g_clip, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if g_3d.shape != g_clip.shape:
        raise DimMismatch("pooled and teacher embeddings differ in shape")
    if not valid.any():
        raise NoValidMasks("no valid masks for the mask-level loss")
    idx = np.flatnonzero(valid)
    g = g_3d[idx]
    t = g_clip[idx]
    gn = row_norms(g)
    tn = row_norms(t)
    if np.any(gn <= 1e-12) or np.any(tn <= 1e-12):
        raise ValueError("zero-norm row in mask-level loss")
    cos = np.sum(g * t, axis=1) / (gn * tn)
    value = float(np.mean(1.0 - cos))
    dcos = -1.0 / idx.size
    dg = dcos * (t / (gn * tn)[:, None] - (cos / gn ** 2)[:, None] * g)
    grad = np.zeros_like(g_3d)
    grad[idx] = dg
    return GradPair(value, {"G_3d": grad})


def view_regularization_loss(
    f_dense: np.ndarray, f_view_target: np.ndarray
) -> GradPair:
    """1 - cosine between the average-pooled dense features and the frozen
    caption embedding of the view."""
    f = np.asarray(f_dense, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise EmptyInput("dense features are empty")
    t = np.asarray(f_view_target, dtype=np.float64).reshape(-1)
    pooled = np.mean(f, axis=0)
    pn = float(np.linalg.norm(pooled))
    tn = float(np.linalg.norm(t))
    if pn <= 1e-12 or tn <= 1e-12:
        raise ValueError("zero-norm vector in view-level loss")
    cos = float(pooled @ t) / (pn * tn)
    value = 1.0 - cos
    dpooled = -(t / (pn * tn) - cos * pooled / pn ** 2)
    grad = np.broadcast_to(dpooled / f.shape[0], f.shape).copy()
    return GradPair(value, {"F_dense": grad})


def binary_loss(logits: np.ndarray, base_mask: np.ndarray) -> GradPair:
    """Binary cross-entropy of the base/novel head.

    Targets: 0 for points carrying a supervised (base) label, 1 otherwise.
    Gradients are with respect to the pre-sigmoid logits.
    """
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    target = 1.0 - np.asarray(base_mask, dtype=np.float64).reshape(-1)
    if z.size != target.size:
        raise DimMismatch("logits and base mask differ in length")
    s = 1.0 / (1.0 + np.exp(-z))
    sc = np.clip(s, BCE_CLIP, 1.0 - BCE_CLIP)
    value = float(-np.mean(target * np.log(sc) + (1.0 - target) * np.log(1.0 - sc)))
    grad = (s - target) / z.size
    return GradPair(value, {"logits": grad})


def total_loss(
    components: Dict[str, GradPair],
    w: LossWeights,
    epoch: int,
    warmup_fraction: float,
    total_epochs: int,
) -> GradPair:
    """Weighted objective; the mask term is gated off for the warmup
    fraction of training.  Combined gradients are keyed "<component>/<input>".
    """
    mask_on = epoch >= warmup_fraction * total_epochs
    weight_of = {
        "seg_3d": w.seg,
        "seg_2d": w.seg,
        "seg_fuse": w.seg,
        "mask": w.mask if mask_on else 0.0,
        "view_3d": w.view_3d,
        "view_2d": w.view_2d,
        "view_fuse": w.view_fuse,
        "bi": w.bi,
    }
    unknown = set(components) - set(weight_of)
    if unknown:
        raise KeyError(f"unknown loss components: {sorted(unknown)}")
    value = 0.0
    grads: Dict[str, np.ndarray | float] = {}
    for name, gp in components.items():
        wt = weight_of[name]
        value += wt * gp.value
        for inp, g in gp.grads.items():
            grads[f"{name}/{inp}"] = wt * g if np.isscalar(g) else wt * np.asarray(g)
    return GradPair(float(value), grads)


def split_scores(
    cos_scores: np.ndarray,
    base_ids: Sequence[int],
    novel_ids: Sequence[int],
    tau: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-partition semantic scores: softmax over base columns only and
    over novel columns only, each scattered back into all L columns."""
    cos_scores = np.asarray(cos_scores, dtype=np.float64)
    n, l = cos_scores.shape
    s_base = np.zeros((n, l))
    s_novel = np.zeros((n, l))
    base = np.asarray(list(base_ids), dtype=np.int64)
    novel = np.asarray(list(novel_ids), dtype=np.int64)
    if base.size:
        s_base[:, base] = softmax_rows(cos_scores[:, base] / tau)
    if novel.size:
        s_novel[:, novel] = softmax_rows(cos_scores[:, novel] / tau)
    return s_base, s_novel


def modulate_scores(
    s_base: np.ndarray, s_novel: np.ndarray, s_b: np.ndarray
) -> np.ndarray:
    """Blend base-only and novel-only scores by the per-point novel
    probability: s = s_base * (1 - s_b) + s_novel * s_b."""
    s_base = np.asarray(s_base, dtype=np.float64)
    s_novel = np.asarray(s_novel, dtype=np.float64)
    if s_base.shape != s_novel.shape:
        raise DimMismatch("score matrices differ in shape")
    s_b = np.asarray(s_b, dtype=np.float64).reshape(-1, 1)
    if s_b.shape[0] != s_base.shape[0]:
        raise DimMismatch("one blending value per row required")
    return s_base * (1.0 - s_b) + s_novel * s_b


def fuse_inference_logits(
    p: np.ndarray, p_aux: np.ndarray, lam: float
) -> np.ndarray:
    """Geometric blend p^lam * p_aux^(1-lam), renormalized per row; inputs
    are floored at PROB_FLOOR before exponentiation."""
    p = np.asarray(p, dtype=np.float64)
    p_aux = np.asarray(p_aux, dtype=np.float64)
    if p.shape != p_aux.shape:
        raise DimMismatch("probability matrices differ in shape")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    blended = np.maximum(p, PROB_FLOOR) ** lam * np.maximum(p_aux, PROB_FLOOR) ** (1.0 - lam)
    return blended / np.sum(blended, axis=1, keepdims=True)
