"""Trainable surrogate networks.

The 3D branch is a per-point MLP with an average-pooled global feature; the
2D branch noises the view image, runs a per-pixel MLP whose hidden layer is
modulated by a condition embedding (feature-wise scale and shift), and a
query head that partitions pixels into masks and emits one embedding per
mask.  All forward passes are pure functions of the weights; the training
loop owns every update.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional, Tuple

import numpy as np

from .errors import ModeError, StepOutOfRange
from .maskops import MaskSet
from .numeric import row_normalize
from .scenes import ROOM, RenderedView, Scene

CONDITION_MODES = ("text", "image2d", "geom3d")

_POS_SCALE = np.array([2.0 / ROOM[0], 2.0 / ROOM[1], 2.0 / ROOM[2]])


def _params(obj) -> list[tuple[str, np.ndarray]]:
    return [(f.name, getattr(obj, f.name)) for f in fields(obj)]


@dataclass
class Encoder3D:
    """Per-point MLP (attributes+positions -> hidden -> hidden -> C) whose
    pooled hidden layer doubles as the global scene feature."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int):
        return cls(
            W1=rng.normal(0, 1 / np.sqrt(in_dim), (in_dim, hidden)),
            b1=np.zeros(hidden),
            W2=rng.normal(0, 1 / np.sqrt(hidden), (hidden, hidden)),
            b2=np.zeros(hidden),
            W3=rng.normal(0, 1 / np.sqrt(hidden), (hidden, out_dim)),
            b3=np.zeros(out_dim),
        )

    params = _params

    @property
    def global_dim(self) -> int:
        return int(self.W2.shape[1])


@dataclass
class Captioner3D:
    """Maps the global 3D feature to the condition embedding."""

    Wc: np.ndarray
    bc: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, global_dim: int, cond_dim: int):
        return cls(
            Wc=rng.normal(0, 1 / np.sqrt(global_dim), (global_dim, cond_dim)),
            bc=np.zeros(cond_dim),
        )

    params = _params


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-noising schedule; alpha_bar[t-1] is the cumulative product
    over steps 1..t.  alphas of exactly 1 are allowed so the no-noise limit
    is representable; the canonical schedule keeps them strictly below 1.
    """

    alphas: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        object.__setattr__(self, "alphas", a)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("schedule needs at least one step")
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("alphas must lie in (0, 1]")

    @property
    def n_steps(self) -> int:
        return int(self.alphas.size)

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @classmethod
    def linear(cls, n_steps: int = 10, beta_start: float = 0.02, beta_end: float = 0.3):
        betas = np.linspace(beta_start, beta_end, n_steps)
        return cls(1.0 - betas)


def noisy_sample(
    x: np.ndarray, t: int, sched: NoiseSchedule, rng: np.random.Generator
) -> np.ndarray:
    """Forward noising: sqrt(abar_t) * x + sqrt(1 - abar_t) * eps."""
    if not 1 <= t <= sched.n_steps:
        raise StepOutOfRange(f"t={t} outside [1, {sched.n_steps}]")
    abar = sched.alpha_bar[t - 1]
    eps = rng.standard_normal(np.shape(x))
    return np.sqrt(abar) * np.asarray(x, dtype=np.float64) + np.sqrt(1.0 - abar) * eps


@dataclass
class MaskHead:
    """Query-based mask generator plus the conditioned per-pixel MLP.

    Q: learnable queries; Wq: condition -> additive per-query bias;
    U1/c1/U2/c2: per-pixel MLP; Ws/bs/Wh/bh: condition -> feature-wise
    scale and shift on the hidden layer; Wg: output projection for the
    mask embeddings.
    """

    Q: np.ndarray
    Wq: np.ndarray
    Wg: np.ndarray
    U1: np.ndarray
    c1: np.ndarray
    U2: np.ndarray
    c2: np.ndarray
    Ws: np.ndarray
    bs: np.ndarray
    Wh: np.ndarray
    bh: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, n_masks: int, feat_dim: int,
             cond_dim: int, app_dim: int, hidden: int = 64):
        return cls(
            Q=rng.normal(0, 1 / np.sqrt(feat_dim), (n_masks, feat_dim)),
            Wq=rng.normal(0, 0.2 / np.sqrt(cond_dim), (cond_dim, n_masks * feat_dim)),
            Wg=rng.normal(0, 1 / np.sqrt(feat_dim), (feat_dim, feat_dim)),
            U1=rng.normal(0, 1 / np.sqrt(app_dim), (app_dim, hidden)),
            c1=np.zeros(hidden),
            U2=rng.normal(0, 1 / np.sqrt(hidden), (hidden, feat_dim)),
            c2=np.zeros(feat_dim),
            Ws=rng.normal(0, 0.2 / np.sqrt(cond_dim), (cond_dim, hidden)),
            bs=np.zeros(hidden),
            Wh=rng.normal(0, 0.2 / np.sqrt(cond_dim), (cond_dim, hidden)),
            bh=np.zeros(hidden),
        )

    params = _params

    @property
    def n_masks(self) -> int:
        return int(self.Q.shape[0])

    @property
    def feat_dim(self) -> int:
        return int(self.Q.shape[1])


# ---------------------------------------------------------------------------
# forward passes (cached variants feed the hand-written backward pass)

def encoder_inputs(scene: Scene) -> np.ndarray:
    """Concatenate appearance attributes with room-normalized positions."""
    pos = scene.positions * _POS_SCALE - 1.0
    return np.concatenate([scene.attributes, pos], axis=1)


def encode_3d_cached(x: np.ndarray, enc: Encoder3D):
    z1 = x @ enc.W1 + enc.b1
    h1 = np.tanh(z1)
    z2 = h1 @ enc.W2 + enc.b2
    h2 = np.tanh(z2)
    f3d = h2 @ enc.W3 + enc.b3
    global_feat = np.mean(h2, axis=0, keepdims=True)
    cache = {"x": x, "h1": h1, "h2": h2}
    return f3d, global_feat, cache


def encode_3d(scene: Scene, enc: Encoder3D) -> Tuple[np.ndarray, np.ndarray]:
    """Per-point features plus the average-pooled global feature."""
    f3d, global_feat, _ = encode_3d_cached(encoder_inputs(scene), enc)
    return f3d, global_feat


def pixel_features_cached(xt: np.ndarray, condition: np.ndarray, head: MaskHead):
    """Conditioned per-pixel features for already-noised pixel rows."""
    zu = xt @ head.U1 + head.c1
    hu = np.tanh(zu)
    scale = condition @ head.Ws + head.bs
    shift = condition @ head.Wh + head.bh
    hm = hu * (1.0 + scale) + shift
    f = hm @ head.U2 + head.c2
    cache = {"xt": xt, "hu": hu, "scale": scale, "hm": hm, "cond": condition}
    return f, cache


def conditioned_2d_features(
    view: RenderedView,
    condition: np.ndarray,
    head: MaskHead,
    mode: str,
    sched: NoiseSchedule,
    t: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Dense conditioned feature map of one view; VOID pixels stay zero.

    `mode` names the source that produced `condition` (caption oracle,
    pooled image embedding, or the learned captioner on the global 3D
    feature) and is validated only; gradients flow from the features back
    into the condition path in the training loop.
    """
    if mode not in CONDITION_MODES:
        raise ModeError(f"unknown condition mode {mode!r}")
    xt_full = noisy_sample(view.appearance, t, sched, rng)
    nonvoid = view.label_image >= 0
    f_rows, _ = pixel_features_cached(xt_full[nonvoid], np.asarray(condition, dtype=np.float64), head)
    out = np.zeros(view.appearance.shape[:2] + (head.feat_dim,))
    out[nonvoid] = f_rows
    return out


def mask_head_cached(
    f_rows: np.ndarray, head: MaskHead, condition: Optional[np.ndarray]
):
    """Masks + embeddings from per-pixel feature rows.

    Pixel assignment is the argmax over query/pixel dot products; each
    query's output vector is the (condition-shifted) query plus the mean
    feature of its pixels, projected and unit-normalized.
    """
    m = head.n_masks
    if condition is not None:
        q_bias = (condition @ head.Wq).reshape(m, head.feat_dim)
    else:
        q_bias = np.zeros_like(head.Q)
    q = head.Q + q_bias
    logits = f_rows @ q.T
    if f_rows.shape[0]:
        assign = np.argmax(logits, axis=1).astype(np.int64)
    else:
        assign = np.zeros(0, dtype=np.int64)
    counts = np.bincount(assign, minlength=m).astype(np.float64)
    pooled = np.zeros((m, head.feat_dim))
    for c in range(head.feat_dim):
        pooled[:, c] = np.bincount(assign, weights=f_rows[:, c], minlength=m)
    nonempty = counts > 0
    pooled[nonempty] /= counts[nonempty, None]
    e = q + pooled
    g_raw = e @ head.Wg
    g = row_normalize(g_raw)
    cache = {
        "assign": assign, "counts": counts, "pooled": pooled, "e": e,
        "g_raw": g_raw, "g": g, "q": q, "f_rows": f_rows,
    }
    return g, assign, cache


def generate_masks(
    f: np.ndarray, head: MaskHead, condition: Optional[np.ndarray] = None
) -> MaskSet:
    """Partition the non-VOID pixels of a dense feature map into masks.

    Pixels whose feature row is exactly zero are treated as VOID (the
    convention used by conditioned_2d_features).
    """
    f = np.asarray(f, dtype=np.float64)
    h, w, _ = f.shape
    nonvoid = np.any(f != 0.0, axis=2)
    rows, cols = np.nonzero(nonvoid)
    g, assign_rows, _ = mask_head_cached(f[rows, cols], head, condition)
    assignment = np.full((h, w), -1, dtype=np.int64)
    assignment[rows, cols] = assign_rows
    return MaskSet.from_assignment(assignment, g)
