"""End-to-end wiring: configuration, the training loop, cross-modal fusion,
final label prediction, evaluation, and checkpointing.

Training is plain SGD with a cosine-decayed step over (scene, view) pairs.
Gradients through every head are written by hand and checked against the
finite-difference oracle in the test suite; all randomness is drawn from
named streams derived from the master seed, so a (config, seed) pair fully
determines every output, bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .embedspace import (
    CategoryTable,
    build_category_table,
    oracle_pixel_embeddings,
    pooled_pixel_embedding,
    view_caption_embedding,
)
from .encoders import (
    CONDITION_MODES,
    Captioner3D,
    Encoder3D,
    MaskHead,
    NoiseSchedule,
    encode_3d_cached,
    encoder_inputs,
    mask_head_cached,
    pixel_features_cached,
)
from .errors import ConfigError, DimMismatch, NonFiniteLoss
from .geometry import Correspondence, build_correspondence
from .losses import (
    GradPair,
    LossWeights,
    Temperature,
    binary_loss,
    fuse_inference_logits,
    mask_regularization_loss,
    modulate_scores,
    segmentation_loss,
    split_scores,
    total_loss,
    view_regularization_loss,
)
from .maskops import Mask3D, teacher_embeddings_from_tokens
from .metrics import (
    MetricReport,
    branch_metrics,
    compute_confusion,
    report_from_confusion,
)
from .numeric import cosine_sim, row_normalize, softmax_rows
from .scenes import (
    CategoryPartition,
    RenderedView,
    Scene,
    default_category_names,
    generate_scene,
    render_view,
)

TAU_STEP_SCALE = 1e-4  # temperature moves on a much smaller step than weights

_ALLOCATOR_TUNED = False


def tune_allocator() -> None:
    """Keep large numpy temporaries on the heap instead of per-call mmaps.

    The training loop allocates and frees megabyte-sized arrays thousands of
    times; with glibc's default mmap threshold every one costs page faults.
    Roughly halves step time; silently a no-op off glibc."""
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-4, 0)    # M_MMAP_MAX = 0
        libc.mallopt(-1, -1)   # M_TRIM_THRESHOLD = unlimited
    except OSError:
        pass
    _ALLOCATOR_TUNED = True


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class RunConfig:
    """Everything a run depends on; hashable for reproducibility."""

    master_seed: int = 0
    n_train_scenes: int = 24
    n_val_scenes: int = 6
    views_per_scene: int = 4
    n_points: int = 2048
    image_size: int = 48
    n_epochs: int = 60
    learning_rate: float = 0.05
    warmup_fraction: float = 1.0 / 3.0
    condition_mode: str = "geom3d"
    mask_loss_enabled: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    lam: float = 0.65
    n_masks: int = 8
    embed_dim: int = 32
    global_dim: int = 64
    tau_init: float = 0.07
    noise_steps: int = 10
    partition: CategoryPartition = field(default_factory=CategoryPartition.default)
    category_names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        counts = dict(
            n_train_scenes=self.n_train_scenes, n_val_scenes=self.n_val_scenes,
            views_per_scene=self.views_per_scene, n_points=self.n_points,
            image_size=self.image_size, n_epochs=self.n_epochs,
            n_masks=self.n_masks, embed_dim=self.embed_dim,
            global_dim=self.global_dim, noise_steps=self.noise_steps,
        )
        for name, v in counts.items():
            if int(v) <= 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.condition_mode not in CONDITION_MODES:
            raise ConfigError(f"unknown condition_mode {self.condition_mode!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.category_names is None:
            self.category_names = default_category_names(self.n_categories)
        else:
            self.category_names = tuple(self.category_names)
            if len(self.category_names) != self.n_categories:
                raise ConfigError("one name per category required")
        if self.n_categories > self.embed_dim:
            raise ConfigError("embed_dim too small for quasi-orthogonal categories")

    @property
    def n_categories(self) -> int:
        return self.partition.n_categories

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        d["partition"] = {
            "base_ids": list(self.partition.base_ids),
            "novel_ids": list(self.partition.novel_ids),
        }
        d["category_names"] = list(self.category_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "weights" in d and isinstance(d["weights"], dict):
            extra = set(d["weights"]) - set(LossWeights.__dataclass_fields__)
            if extra:
                raise ConfigError(f"unknown loss-weight keys: {sorted(extra)}")
            d["weights"] = LossWeights(**d["weights"])
        if "partition" in d and isinstance(d["partition"], dict):
            extra = set(d["partition"]) - {"base_ids", "novel_ids"}
            if extra:
                raise ConfigError(f"unknown partition keys: {sorted(extra)}")
            d["partition"] = CategoryPartition(
                tuple(d["partition"]["base_ids"]),
                tuple(d["partition"]["novel_ids"]),
            )
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]


@dataclass
class FusionBlock:
    """Linear map over the concatenated per-point features; initialized to
    pass the 3D half through so fusion starts as the 3D branch."""

    Wf: np.ndarray
    bf: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, feat_dim: int):
        top = np.eye(feat_dim)
        bottom = rng.normal(0, 0.05, (feat_dim, feat_dim))
        return cls(Wf=np.concatenate([top, bottom], axis=0), bf=np.zeros(feat_dim))


@dataclass
class BinaryHead:
    """Small per-point MLP on (detached) 3D features predicting novelty."""

    Wb1: np.ndarray
    bb1: np.ndarray
    wb2: np.ndarray
    bb2: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, feat_dim: int, hidden: int = 32):
        return cls(
            Wb1=rng.normal(0, 1 / np.sqrt(feat_dim), (feat_dim, hidden)),
            bb1=np.zeros(hidden),
            wb2=rng.normal(0, 1 / np.sqrt(hidden), (hidden, 1)),
            bb2=np.zeros(1),
        )


def fuse_features(
    f_3d: np.ndarray,
    f_2d: np.ndarray,
    corr: Correspondence,
    fusion: FusionBlock,
) -> np.ndarray:
    """Merge per-point and mask-lifted features where a correspondence
    exists; points without one keep their 3D row verbatim."""
    f_3d = np.asarray(f_3d, dtype=np.float64)
    f_2d = np.asarray(f_2d, dtype=np.float64)
    if f_2d.shape[0] != corr.n_prime:
        raise DimMismatch("2D features not aligned with the correspondence")
    if f_2d.shape[0] and f_2d.shape[1] != f_3d.shape[1]:
        raise DimMismatch("feature dims differ between branches")
    out = f_3d.copy()
    if corr.n_prime:
        cat = np.concatenate([f_3d[corr.point_index], f_2d], axis=1)
        out[corr.point_index] = cat @ fusion.Wf + fusion.bf
    return out


def predict_labels(
    f_fuse: np.ndarray,
    table: CategoryTable,
    s_b: np.ndarray,
    lam: float,
    g_clip: np.ndarray,
    teacher_valid: np.ndarray,
    m3d: Mask3D,
    corr: Correspondence,
    partition: CategoryPartition,
    tau: float,
) -> np.ndarray:
    """Final per-point category ids.

    Cosine scores against the category table are split into base-only and
    novel-only softmaxes, blended by the novelty score, and - for points
    whose pixel lies in a valid mask - geometrically fused with the
    teacher-derived mask probabilities.
    """
    cos = cosine_sim(row_normalize(f_fuse), table.embeddings)
    s_base, s_novel = split_scores(cos, partition.base_ids, partition.novel_ids, tau)
    s = modulate_scores(s_base, s_novel, s_b)
    p_final = s.copy()
    assign = m3d.assignment()
    valid = np.asarray(teacher_valid, dtype=bool)
    if assign.size and valid.any():
        p_aux = np.zeros((valid.size, table.n_categories))
        p_aux[valid] = softmax_rows(
            cosine_sim(row_normalize(np.asarray(g_clip)[valid]),
                       table.embeddings) / tau
        )
        has = (assign >= 0) & valid[np.maximum(assign, 0)]
        if has.any():
            pts = corr.point_index[has]
            p_final[pts] = fuse_inference_logits(s[pts], p_aux[assign[has]], lam)
    return np.argmax(p_final, axis=1)


# ---------------------------------------------------------------------------
# per-view static data


@dataclass
class ViewData:
    view: RenderedView
    corr: Correspondence
    token_rows: np.ndarray
    token_cols: np.ndarray
    token_oracle: np.ndarray      # frozen per-pixel teacher embeddings
    corr_token_pos: np.ndarray    # token position of each correspondence entry
    caption: np.ndarray           # frozen caption embedding (1, C)
    image_cond: np.ndarray        # frozen pooled image embedding (1, C)
    sup2d: np.ndarray             # correspondence entries with base labels


@dataclass
class SceneData:
    scene: Scene
    x: np.ndarray                 # encoder inputs
    sup3d: np.ndarray             # base-labeled points
    views: List[ViewData]


def build_view_data(scene: Scene, view: RenderedView, table: CategoryTable,
                    base_mask_by_cat: np.ndarray) -> ViewData:
    corr = build_correspondence(scene.positions, view.camera)
    rows, cols = np.nonzero(view.label_image >= 0)
    h, w = view.label_image.shape
    pos_of = np.full(h * w, -1, dtype=np.int64)
    pos_of[rows * w + cols] = np.arange(rows.size)
    corr_token_pos = pos_of[corr.pixel_row * w + corr.pixel_col]
    token_oracle = oracle_pixel_embeddings(view, table)[rows, cols]
    return ViewData(
        view=view,
        corr=corr,
        token_rows=rows,
        token_cols=cols,
        token_oracle=token_oracle,
        corr_token_pos=corr_token_pos,
        caption=view_caption_embedding(view, table),
        image_cond=pooled_pixel_embedding(view, table),
        sup2d=base_mask_by_cat[scene.labels[corr.point_index]],
    )


def build_scene_data(scene: Scene, table: CategoryTable,
                     partition: CategoryPartition) -> SceneData:
    base_mask = partition.base_mask()
    views = [
        build_view_data(scene, render_view(scene, cam), table, base_mask)
        for cam in scene.cameras
    ]
    return SceneData(
        scene=scene,
        x=encoder_inputs(scene),
        sup3d=base_mask[scene.labels],
        views=views,
    )


def training_scenes(config: RunConfig) -> List[Scene]:
    return [
        generate_scene(
            _stable_seed(config.master_seed, "train", i),
            n_points=config.n_points, partition=config.partition,
            n_categories=config.n_categories, views=config.views_per_scene,
            image_size=config.image_size,
        )
        for i in range(config.n_train_scenes)
    ]


def validation_scenes(config: RunConfig) -> List[Scene]:
    return [
        generate_scene(
            _stable_seed(config.master_seed, "val", i),
            n_points=config.n_points, partition=config.partition,
            n_categories=config.n_categories, views=config.views_per_scene,
            image_size=config.image_size,
        )
        for i in range(config.n_val_scenes)
    ]


# ---------------------------------------------------------------------------
# the model


class TrainedModel:
    """All learnable state plus the frozen category table."""

    def __init__(self, config: RunConfig, table: CategoryTable,
                 enc: Encoder3D, cap: Captioner3D, head: MaskHead,
                 fusion: FusionBlock, binary: BinaryHead, tau: Temperature,
                 sched: NoiseSchedule):
        self.config = config
        self.table = table
        self.enc = enc
        self.cap = cap
        self.head = head
        self.fusion = fusion
        self.binary = binary
        self.tau = tau
        self.sched = sched

    @classmethod
    def init(cls, config: RunConfig) -> "TrainedModel":
        table = build_category_table(
            config.category_names, config.embed_dim,
            _stable_seed(config.master_seed, "table"),
        )
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=_stable_seed(config.master_seed, "init"))
        )
        in_dim = 6 + 3
        enc = Encoder3D.init(rng, in_dim, config.global_dim, config.embed_dim)
        cap = Captioner3D.init(rng, config.global_dim, config.embed_dim)
        head = MaskHead.init(rng, config.n_masks, config.embed_dim,
                             config.embed_dim, app_dim=6)
        fusion = FusionBlock.init(rng, config.embed_dim)
        binary = BinaryHead.init(rng, config.embed_dim)
        return cls(config, table, enc, cap, head, fusion, binary,
                   Temperature(value=config.tau_init),
                   NoiseSchedule.linear(config.noise_steps))

    def param_items(self) -> List[Tuple[str, np.ndarray]]:
        items = []
        for prefix, obj in (("enc", self.enc), ("cap", self.cap),
                            ("head", self.head)):
            items.extend((f"{prefix}.{n}", a) for n, a in obj.params())
        items.append(("fusion.Wf", self.fusion.Wf))
        items.append(("fusion.bf", self.fusion.bf))
        for n in ("Wb1", "bb1", "wb2", "bb2"):
            items.append((f"binary.{n}", getattr(self.binary, n)))
        return items

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        arrays = {name.replace(".", "__"): arr for name, arr in self.param_items()}
        arrays["tau"] = np.array(self.tau.value)
        arrays["table_embeddings"] = np.asarray(self.table.embeddings)
        arrays["config_json"] = np.frombuffer(
            json.dumps(self.config.to_dict(), sort_keys=True).encode(), dtype=np.uint8
        )
        arrays["version"] = np.frombuffer(__version__.encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        with np.load(path) as data:
            config = RunConfig.from_dict(
                json.loads(bytes(data["config_json"]).decode())
            )
            model = cls.init(config)
            for name, arr in model.param_items():
                arr[...] = data[name.replace(".", "__")]
            model.tau = Temperature(value=float(data["tau"]))
            model.table = CategoryTable(data["table_embeddings"],
                                        config.category_names)
        return model

    # -- one training step -------------------------------------------------

    def step_losses(self, sd: SceneData, vd: ViewData, t: int,
                    eps_full: np.ndarray, epoch: int,
                    with_grads: bool = True):
        """Forward pass over one view; optionally the full backward pass.

        Returns (total GradPair, component GradPairs, weight-gradient dict).
        """
        cfg = self.config
        table_rows = self.table.embeddings
        tau = self.tau.value
        base_ids = cfg.partition.base_ids

        f3, gfeat, enc_cache = encode_3d_cached(sd.x, self.enc)
        if cfg.condition_mode == "geom3d":
            cond = gfeat @ self.cap.Wc + self.cap.bc
        elif cfg.condition_mode == "text":
            cond = vd.caption
        else:
            cond = vd.image_cond

        abar = self.sched.alpha_bar[t - 1]
        xt_full = np.sqrt(abar) * vd.view.appearance + np.sqrt(1.0 - abar) * eps_full
        xt = xt_full[vd.token_rows, vd.token_cols]
        f_rows, pix_cache = pixel_features_cached(xt, cond, self.head)
        g2, assign, head_cache = mask_head_cached(f_rows, self.head, cond)

        corr_assign = assign[vd.corr_token_pos]
        n_prime = vd.corr.n_prime
        f2 = g2[corr_assign] if n_prime else np.zeros((0, cfg.embed_dim))
        sel = vd.corr.point_index
        f3corr = f3[sel]

        counts3d = np.bincount(corr_assign, minlength=cfg.n_masks).astype(np.float64)
        g3 = np.zeros((cfg.n_masks, cfg.embed_dim))
        for c in range(cfg.embed_dim):
            g3[:, c] = np.bincount(corr_assign, weights=f3corr[:, c],
                                   minlength=cfg.n_masks)
        pool_valid = counts3d > 0
        g3[pool_valid] /= counts3d[pool_valid, None]

        gclip, teacher_valid = teacher_embeddings_from_tokens(
            assign, vd.token_oracle, cfg.n_masks
        )
        joint_valid = pool_valid & teacher_valid

        cat = np.concatenate([f3corr, f2], axis=1)
        fused_rows = cat @ self.fusion.Wf + self.fusion.bf
        ffuse = f3.copy()
        ffuse[sel] = fused_rows

        hb = np.tanh(f3 @ self.binary.Wb1 + self.binary.bb1)
        logit = (hb @ self.binary.wb2 + self.binary.bb2)[:, 0]

        labels = sd.scene.labels
        comps: Dict[str, GradPair] = {
            "seg_3d": segmentation_loss(f3, table_rows, labels, tau,
                                        sd.sup3d, base_ids),
            "seg_fuse": segmentation_loss(ffuse, table_rows, labels, tau,
                                          sd.sup3d, base_ids),
            "view_3d": view_regularization_loss(f3, vd.caption),
            "view_2d": view_regularization_loss(f_rows, vd.caption),
            "view_fuse": view_regularization_loss(ffuse, vd.caption),
            "bi": binary_loss(logit, sd.sup3d),
        }
        if vd.sup2d.any():
            comps["seg_2d"] = segmentation_loss(
                f2, table_rows, labels[sel], tau, vd.sup2d, base_ids
            )
        if cfg.mask_loss_enabled and joint_valid.any():
            comps["mask"] = mask_regularization_loss(g3, gclip, joint_valid)

        total = total_loss(comps, cfg.weights, epoch, cfg.warmup_fraction,
                           cfg.n_epochs)
        if not with_grads:
            return total, comps, None

        g = total.grads
        zeros = np.zeros
        d_f3 = np.asarray(g["seg_3d/F_m"]) + np.asarray(g["view_3d/F_dense"])
        d_ffuse = np.asarray(g["seg_fuse/F_m"]) + np.asarray(g["view_fuse/F_dense"])
        d_f2 = np.asarray(g["seg_2d/F_m"]).copy() if "seg_2d" in comps \
            else zeros((n_prime, cfg.embed_dim))
        d_frows = np.asarray(g["view_2d/F_dense"]).copy()
        d_logit = np.asarray(g["bi/logits"])
        d_tau = sum(float(g[f"{k}/tau"]) for k in ("seg_3d", "seg_2d", "seg_fuse")
                    if f"{k}/tau" in g)

        gw: Dict[str, np.ndarray] = {}

        # fusion block
        d_fused_rows = d_ffuse[sel]
        gw["fusion.Wf"] = cat.T @ d_fused_rows
        gw["fusion.bf"] = d_fused_rows.sum(axis=0)
        d_cat = d_fused_rows @ self.fusion.Wf.T
        d_f3_total = d_ffuse.copy()
        d_f3_total[sel] = d_cat[:, : cfg.embed_dim]
        d_f3_total += d_f3
        d_f2 += d_cat[:, cfg.embed_dim:]

        # mask-level pooling
        if "mask" in comps:
            d_g3 = np.asarray(g["mask/G_3d"])
            scale = np.zeros(cfg.n_masks)
            scale[pool_valid] = 1.0 / counts3d[pool_valid]
            d_f3_total[sel] += d_g3[corr_assign] * scale[corr_assign, None]

        # pseudo features back onto mask embeddings
        d_g2 = np.zeros_like(g2)
        if n_prime:
            for c in range(cfg.embed_dim):
                d_g2[:, c] = np.bincount(corr_assign, weights=d_f2[:, c],
                                         minlength=cfg.n_masks)

        # unit-normalization of the mask embeddings
        g_raw = head_cache["g_raw"]
        r = np.linalg.norm(g_raw, axis=1, keepdims=True)
        d_graw = (d_g2 - np.sum(d_g2 * g2, axis=1, keepdims=True) * g2) / r
        e = head_cache["e"]
        gw["head.Wg"] = e.T @ d_graw
        d_e = d_graw @ self.head.Wg.T

        # e = (Q + cond @ Wq) + per-mask mean of pixel features
        d_q = d_e
        counts = head_cache["counts"]
        nonempty = counts > 0
        inv = np.zeros(cfg.n_masks)
        inv[nonempty] = 1.0 / counts[nonempty]
        d_frows += d_e[assign] * inv[assign, None]
        gw["head.Q"] = d_q.copy()
        d_qbias = d_q.reshape(1, -1)
        gw["head.Wq"] = cond.T @ d_qbias
        d_cond = d_qbias @ self.head.Wq.T

        # conditioned per-pixel MLP
        hu = pix_cache["hu"]
        scale_f = pix_cache["scale"]
        hm = pix_cache["hm"]
        gw["head.U2"] = hm.T @ d_frows
        gw["head.c2"] = d_frows.sum(axis=0)
        d_hm = d_frows @ self.head.U2.T
        d_hu = d_hm * (1.0 + scale_f)
        d_scale = np.sum(d_hm * hu, axis=0, keepdims=True)
        d_shift = d_hm.sum(axis=0, keepdims=True)
        d_zu = d_hu * (1.0 - hu ** 2)
        gw["head.U1"] = xt.T @ d_zu
        gw["head.c1"] = d_zu.sum(axis=0)
        gw["head.Ws"] = cond.T @ d_scale
        gw["head.bs"] = d_scale[0]
        gw["head.Wh"] = cond.T @ d_shift
        gw["head.bh"] = d_shift[0]
        d_cond = d_cond + d_scale @ self.head.Ws.T + d_shift @ self.head.Wh.T

        # condition path
        d_gfeat = np.zeros_like(gfeat)
        if cfg.condition_mode == "geom3d":
            gw["cap.Wc"] = gfeat.T @ d_cond
            gw["cap.bc"] = d_cond[0]
            d_gfeat = d_cond @ self.cap.Wc.T
        else:
            gw["cap.Wc"] = np.zeros_like(self.cap.Wc)
            gw["cap.bc"] = np.zeros_like(self.cap.bc)

        # binary head
        d_logit_col = d_logit[:, None]
        gw["binary.wb2"] = hb.T @ d_logit_col
        gw["binary.bb2"] = d_logit_col.sum(axis=0)
        d_zb1 = (d_logit_col @ self.binary.wb2.T) * (1.0 - hb ** 2)
        gw["binary.Wb1"] = f3.T @ d_zb1
        gw["binary.bb1"] = d_zb1.sum(axis=0)
        d_f3_total += d_zb1 @ self.binary.Wb1.T

        # 3D encoder
        h1, h2, x = enc_cache["h1"], enc_cache["h2"], enc_cache["x"]
        gw["enc.W3"] = h2.T @ d_f3_total
        gw["enc.b3"] = d_f3_total.sum(axis=0)
        d_h2 = d_f3_total @ self.enc.W3.T + d_gfeat / x.shape[0]
        d_z2 = d_h2 * (1.0 - h2 ** 2)
        gw["enc.W2"] = h1.T @ d_z2
        gw["enc.b2"] = d_z2.sum(axis=0)
        d_h1 = d_z2 @ self.enc.W2.T
        d_z1 = d_h1 * (1.0 - h1 ** 2)
        gw["enc.W1"] = x.T @ d_z1
        gw["enc.b1"] = d_z1.sum(axis=0)

        gw["tau"] = d_tau
        return total, comps, gw

    # -- inference over one view -------------------------------------------

    def view_forward_eval(self, sd: SceneData, vd: ViewData, f3: np.ndarray,
                          gfeat: np.ndarray):
        """Deterministic inference pass: least-noisy timestep, zero noise."""
        cfg = self.config
        if cfg.condition_mode == "geom3d":
            cond = gfeat @ self.cap.Wc + self.cap.bc
        elif cfg.condition_mode == "text":
            cond = vd.caption
        else:
            cond = vd.image_cond
        abar = self.sched.alpha_bar[0]
        xt = np.sqrt(abar) * vd.view.appearance[vd.token_rows, vd.token_cols]
        f_rows, _ = pixel_features_cached(xt, cond, self.head)
        g2, assign, _ = mask_head_cached(f_rows, self.head, cond)
        corr_assign = assign[vd.corr_token_pos]
        f2 = g2[corr_assign] if vd.corr.n_prime else np.zeros((0, cfg.embed_dim))
        gclip, teacher_valid = teacher_embeddings_from_tokens(
            assign, vd.token_oracle, cfg.n_masks
        )
        m3d = np.zeros((vd.corr.n_prime, cfg.n_masks))
        if vd.corr.n_prime:
            m3d[np.arange(vd.corr.n_prime), corr_assign] = 1.0
        ffuse = fuse_features(f3, f2, vd.corr, self.fusion)
        return ffuse, f2, Mask3D(m3d), gclip, teacher_valid

    def novelty_scores(self, f3: np.ndarray) -> np.ndarray:
        hb = np.tanh(f3 @ self.binary.Wb1 + self.binary.bb1)
        logit = (hb @ self.binary.wb2 + self.binary.bb2)[:, 0]
        return 1.0 / (1.0 + np.exp(-logit))

    def branch_prediction(self, feats: np.ndarray, s_b: np.ndarray) -> np.ndarray:
        """Modulated cosine prediction from one branch's features."""
        cos = cosine_sim(row_normalize(feats), self.table.embeddings)
        s_base, s_novel = split_scores(
            cos, self.config.partition.base_ids, self.config.partition.novel_ids,
            self.tau.value,
        )
        return np.argmax(modulate_scores(s_base, s_novel, s_b), axis=1)


# ---------------------------------------------------------------------------
# training / evaluation


def train(config: RunConfig, scene_data: Optional[List[SceneData]] = None,
          val_data: Optional[List[SceneData]] = None):
    """Train a model on the configured synthetic scenes.

    Returns (model, history), history holding one record per epoch with the
    mean training loss and validation metrics.
    """
    tune_allocator()
    model = TrainedModel.init(config)
    if scene_data is None:
        scene_data = [build_scene_data(s, model.table, config.partition)
                      for s in training_scenes(config)]
    if val_data is None:
        val_data = [build_scene_data(s, model.table, config.partition)
                    for s in validation_scenes(config)]

    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=_stable_seed(config.master_seed, "train-loop"))
    )
    pairs = [(si, vi) for si in range(len(scene_data))
             for vi in range(len(scene_data[si].views))]
    params = dict(model.param_items())
    history: List[dict] = []

    for epoch in range(config.n_epochs):
        lr = config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * epoch / config.n_epochs))
        order = rng.permutation(len(pairs))
        losses: List[float] = []
        for k in order:
            si, vi = pairs[k]
            sd, vd = scene_data[si], scene_data[si].views[vi]
            t = int(rng.integers(1, config.noise_steps + 1))
            eps_full = rng.standard_normal(vd.view.appearance.shape)
            total, comps, gw = model.step_losses(sd, vd, t, eps_full, epoch)
            if not np.isfinite(total.value):
                detail = {name: c.value for name, c in comps.items()}
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}: {detail}")
            losses.append(total.value)
            for name, arr in params.items():
                arr -= lr * gw[name]
            model.tau = model.tau.clamped(
                model.tau.value - lr * TAU_STEP_SCALE * gw["tau"]
            )
        val = evaluate_cached(model, val_data)
        history.append({
            "epoch": epoch,
            "lr": float(lr),
            "train_loss": float(np.mean(losses)),
            "val_base_miou": val.base_miou,
            "val_novel_miou": val.novel_miou,
            "val_hiou": val.hiou,
            "val_branch_3d_novel": val.branches["branch_3d"].novel_miou,
            "val_branch_2d_novel": val.branches["branch_2d"].novel_miou,
        })
    return model, history


def evaluate_cached(model: TrainedModel, scene_data: Sequence[SceneData]) -> MetricReport:
    """Evaluate on prebuilt scene data; fused output merged across views by
    the smallest-depth rule, branch outputs reported alongside."""
    cfg = model.config
    n_cat = cfg.n_categories
    conf_fuse = np.zeros((n_cat, n_cat), dtype=np.int64)
    conf_3d = np.zeros_like(conf_fuse)
    conf_2d = np.zeros_like(conf_fuse)
    for sd in scene_data:
        f3, gfeat, _ = encode_3d_cached(sd.x, model.enc)
        s_b = model.novelty_scores(f3)
        pred_3d = model.branch_prediction(f3, s_b)
        n = sd.scene.n_points
        merged = pred_3d.copy()          # fallback: no correspondence anywhere
        best_depth = np.full(n, np.inf)
        pred_2d = np.full(n, -1, dtype=np.int64)
        best_depth_2d = np.full(n, np.inf)
        for vd in sd.views:
            ffuse, f2, m3d, gclip, tvalid = model.view_forward_eval(sd, vd, f3, gfeat)
            pred_v = predict_labels(
                ffuse, model.table, s_b, cfg.lam, gclip, tvalid, m3d, vd.corr,
                cfg.partition, model.tau.value,
            )
            sel = vd.corr.point_index
            closer = vd.corr.depth < best_depth[sel]
            upd = sel[closer]
            merged[upd] = pred_v[upd]
            best_depth[upd] = vd.corr.depth[closer]
            if vd.corr.n_prime:
                pred_v2 = model.branch_prediction(f2, s_b[sel])
                closer2 = vd.corr.depth < best_depth_2d[sel]
                pred_2d[sel[closer2]] = pred_v2[closer2]
                best_depth_2d[sel[closer2]] = vd.corr.depth[closer2]
        labels = sd.scene.labels
        conf_fuse += compute_confusion(merged, labels, n_cat)
        conf_3d += compute_confusion(pred_3d, labels, n_cat)
        seen = pred_2d >= 0
        if seen.any():
            conf_2d += compute_confusion(pred_2d[seen], labels[seen], n_cat)
    report = report_from_confusion(
        conf_fuse, cfg.category_names, cfg.partition.base_ids,
        cfg.partition.novel_ids, cfg.master_seed, cfg.config_hash(), __version__,
    )
    report.branches["branch_3d"] = branch_metrics(
        conf_3d, cfg.partition.base_ids, cfg.partition.novel_ids)
    report.branches["branch_2d"] = branch_metrics(
        conf_2d, cfg.partition.base_ids, cfg.partition.novel_ids)
    return report


def evaluate(model: TrainedModel, scenes: Sequence[Scene],
             partition: CategoryPartition) -> MetricReport:
    """Evaluate a trained model on held-out scenes."""
    data = [build_scene_data(s, model.table, partition) for s in scenes]
    return evaluate_cached(model, data)
