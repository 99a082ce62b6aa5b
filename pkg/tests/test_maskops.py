import numpy as np
import pytest

from xmask3d.embedspace import build_category_table, oracle_pixel_embeddings
from xmask3d.errors import DimMismatch
from xmask3d.geometry import Correspondence, look_at_camera
from xmask3d.maskops import (
    Mask3D,
    MaskSet,
    backproject_masks,
    build_attention_mask,
    mask_patch_membership,
    mask_pool_3d,
    pseudo_mask_feature,
    teacher_embeddings_from_tokens,
    teacher_mask_embeddings,
)
from xmask3d.numeric import row_normalize
from xmask3d.scenes import RenderedView


def unit_rows(rng, m, c):
    return row_normalize(rng.normal(size=(m, c)))


def random_maskset(rng, m, h, w, c, void_frac=0.2):
    assignment = rng.integers(0, m, size=(h, w)).astype(np.int64)
    assignment[rng.uniform(size=(h, w)) < void_frac] = -1
    return MaskSet.from_assignment(assignment, unit_rows(rng, m, c))


def random_correspondence(rng, h, w, n_points):
    # pick distinct pixels and distinct points
    n = int(rng.integers(1, min(n_points, h * w) + 1))
    pix = rng.choice(h * w, size=n, replace=False)
    pts = np.sort(rng.choice(n_points, size=n, replace=False))
    return Correspondence(
        point_index=pts,
        pixel_row=pix // w,
        pixel_col=pix % w,
        depth=rng.uniform(0.5, 4.0, size=n),
        height=h,
        width=w,
    )


class TestBackproject:
    def test_full_cover_single_mask(self):
        rng = np.random.default_rng(0)
        h = w = 4
        ms = MaskSet.from_assignment(np.zeros((h, w), dtype=np.int64),
                                     unit_rows(rng, 1, 8))
        corr = random_correspondence(rng, h, w, 30)
        m3d = backproject_masks(ms, corr)
        assert np.array_equal(m3d.matrix, np.ones((corr.n_prime, 1)))

    def test_empty_correspondence(self):
        rng = np.random.default_rng(1)
        ms = random_maskset(rng, 3, 4, 4, 8)
        corr = Correspondence(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                              np.zeros(0, dtype=np.int64), np.zeros(0), 4, 4)
        m3d = backproject_masks(ms, corr)
        assert m3d.matrix.shape == (0, 3)

    def test_random_matches_pixel_lookup_loop(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            h, w, m = 6, 5, 4
            ms = random_maskset(rng, m, h, w, 8)
            corr = random_correspondence(rng, h, w, 40)
            m3d = backproject_masks(ms, corr)
            for j in range(corr.n_prime):
                r, c = corr.pixel_row[j], corr.pixel_col[j]
                for i in range(m):
                    assert m3d.matrix[j, i] == float(ms.masks[i, r, c])

    def test_size_mismatch(self):
        rng = np.random.default_rng(3)
        ms = random_maskset(rng, 2, 4, 4, 8)
        corr = random_correspondence(rng, 5, 5, 20)
        with pytest.raises(DimMismatch):
            backproject_masks(ms, corr)


class TestPseudoMaskFeature:
    def test_one_hot_selection(self):
        rng = np.random.default_rng(4)
        g = unit_rows(rng, 3, 8)
        m = np.zeros((4, 3))
        picks = [2, 0, 1, 2]
        for j, i in enumerate(picks):
            m[j, i] = 1.0
        out = pseudo_mask_feature(Mask3D(m), g)
        for j, i in enumerate(picks):
            assert np.array_equal(out[j], g[i])

    def test_zero_matrix(self):
        g = unit_rows(np.random.default_rng(5), 3, 8)
        out = pseudo_mask_feature(Mask3D(np.zeros((5, 3))), g)
        assert np.all(out == 0.0)

    def test_random_matches_gather_loop(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            n, m, c = 15, 4, 6
            assign = rng.integers(-1, m, size=n)
            mat = np.zeros((n, m))
            for j, a in enumerate(assign):
                if a >= 0:
                    mat[j, a] = 1.0
            g = unit_rows(rng, m, c)
            out = pseudo_mask_feature(Mask3D(mat), g)
            for j, a in enumerate(assign):
                expected = g[a] if a >= 0 else np.zeros(c)
                assert np.array_equal(out[j], expected)

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            pseudo_mask_feature(Mask3D(np.zeros((2, 3))), np.zeros((4, 8)))


class TestMaskPool3D:
    def test_singleton_mean_verbatim(self):
        rng = np.random.default_rng(7)
        f = rng.normal(size=(3, 6))
        mat = np.zeros((3, 2))
        mat[1, 0] = 1.0
        pooled, valid = mask_pool_3d(f, Mask3D(mat))
        assert np.array_equal(pooled[0], f[1])
        assert valid.tolist() == [True, False]
        assert np.all(pooled[1] == 0.0)

    def test_constant_features(self):
        f = np.ones((6, 4)) * 2.5
        assign = np.array([0, 0, 1, 1, 1, 0])
        mat = np.zeros((6, 2))
        mat[np.arange(6), assign] = 1.0
        pooled, valid = mask_pool_3d(f, Mask3D(mat))
        assert np.allclose(pooled, 2.5)
        assert valid.all()

    def test_random_matches_masked_mean_loop(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            n, m, c = 25, 5, 4
            assign = rng.integers(-1, m, size=n)
            mat = np.zeros((n, m))
            for j, a in enumerate(assign):
                if a >= 0:
                    mat[j, a] = 1.0
            f = rng.normal(size=(n, c))
            pooled, valid = mask_pool_3d(f, Mask3D(mat))
            for i in range(m):
                members = [j for j in range(n) if assign[j] == i]
                if not members:
                    assert not valid[i]
                    continue
                acc = np.zeros(c)
                for j in members:
                    acc += f[j]
                assert np.array_equal(pooled[i], acc / len(members))


class TestAttentionMask:
    def test_hand_assembled_seven_by_seven(self):
        # T=4, M=2; mask 0 touches tokens {0,1}, mask 1 touches {2}
        membership = np.array([
            [False, False, True, True],
            [True, True, False, True],
        ])
        out = build_attention_mask(membership, 4, 2)
        F, T = False, True
        expected = np.array([
            [F, F, F, F, F, T, T],
            [F, F, F, F, F, T, T],
            [F, F, F, F, F, T, T],
            [F, F, F, F, F, T, T],
            [F, F, F, F, F, T, T],
            [F, F, T, T, F, T, T],
            [T, T, F, T, F, T, T],
        ])
        assert np.array_equal(out, expected)

    def test_no_masks_degenerate(self):
        out = build_attention_mask(np.zeros((0, 3), dtype=bool), 3, 0)
        assert out.shape == (4, 4)
        assert not out.any()

    def test_every_mask_touches_everything(self):
        out = build_attention_mask(np.zeros((2, 3), dtype=bool), 3, 2)
        assert not out[4:, :3].any()

    def test_block_invariants_random(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            t = int(rng.integers(1, 12))
            m = int(rng.integers(0, 6))
            p = rng.uniform(size=(m, t)) < 0.5
            out = build_attention_mask(p, t, m)
            assert out.shape == (t + 1 + m, t + 1 + m)
            assert not out[: t + 1, : t + 1].any()          # top-left all False
            assert out[: t + 1, t + 1:].all() or m == 0     # top-right all True
            assert np.array_equal(out[t + 1:, :t], p)       # membership block
            assert not out[t + 1:, t].any()                 # class token open
            assert out[t + 1:, t + 1:].all() or m == 0      # mask-mask all True


def make_labeled_view(label_image):
    label_image = np.asarray(label_image, dtype=np.int64)
    h, w = label_image.shape
    cam = look_at_camera([0, 0, 1.0], [1, 0, 1.0], h, w, 10.0)
    appearance = np.zeros((h, w, 6))
    appearance[label_image >= 0] = 1.0
    return RenderedView(appearance, label_image, label_image.copy(), cam)


def teacher_oracle(view, ms, table):
    """Dumb loop re-implementation: assemble the attention-mask row by hand,
    uniformly average the allowed values (pixel embeddings + one zero class
    token), then normalize."""
    emb = oracle_pixel_embeddings(view, table)
    rows, cols = np.nonzero(view.label_image >= 0)
    g = np.zeros((ms.n_masks, table.dim))
    valid = np.zeros(ms.n_masks, dtype=bool)
    for i in range(ms.n_masks):
        acc = np.zeros(table.dim)
        count = 1  # the class token, carrying a zero vector
        for r, c in zip(rows, cols):
            if ms.masks[i, r, c]:
                acc = acc + emb[r, c]
                count += 1
        mean = acc / count
        norm = float(np.sqrt(np.sum(mean * mean)))
        if norm > 1e-12:
            valid[i] = True
            g[i] = mean / norm
    return g, valid


class TestTeacherEmbeddings:
    def table(self, n=5, dim=8, seed=0):
        return build_category_table([f"c{i}" for i in range(n)], dim, seed)

    def test_single_category_mask_recovers_row(self):
        table = self.table()
        view = make_labeled_view(np.array([[2, 2], [2, -1]]))
        ms = MaskSet.from_assignment(
            np.where(view.label_image >= 0, 0, -1),
            unit_rows(np.random.default_rng(0), 1, table.dim),
        )
        g, valid = teacher_mask_embeddings(view, ms, table)
        assert valid[0]
        np.testing.assert_allclose(g[0], table.embeddings[2], atol=1e-12)

    def test_two_category_mask_is_normalized_midpoint(self):
        table = self.table()
        view = make_labeled_view(np.array([[0, 1], [0, 1]]))
        ms = MaskSet.from_assignment(
            np.zeros((2, 2), dtype=np.int64),
            unit_rows(np.random.default_rng(0), 1, table.dim),
        )
        g, valid = teacher_mask_embeddings(view, ms, table)
        mid = table.embeddings[0] + table.embeddings[1]
        np.testing.assert_allclose(g[0], mid / np.linalg.norm(mid), atol=1e-12)

    def test_empty_mask_invalid(self):
        table = self.table()
        view = make_labeled_view(np.array([[0, 0]]))
        ms = MaskSet.from_assignment(
            np.zeros((1, 2), dtype=np.int64),
            unit_rows(np.random.default_rng(1), 3, table.dim),
        )
        g, valid = teacher_mask_embeddings(view, ms, table)
        assert valid.tolist() == [True, False, False]
        assert np.all(g[1:] == 0.0)

    def test_matches_brute_force_oracle_exactly(self):
        rng = np.random.default_rng(10)
        table = self.table()
        for _ in range(20):
            labels = rng.integers(-1, 5, size=(5, 6))
            view = make_labeled_view(labels)
            if not (labels >= 0).any():
                continue
            m = int(rng.integers(1, 5))
            assignment = np.where(labels >= 0, rng.integers(0, m, size=(5, 6)), -1)
            ms = MaskSet.from_assignment(assignment, unit_rows(rng, m, table.dim))
            g, valid = teacher_mask_embeddings(view, ms, table)
            g2, valid2 = teacher_oracle(view, ms, table)
            assert np.array_equal(valid, valid2)
            assert np.array_equal(g, g2)

    def test_fast_path_identical_to_attention_path(self):
        rng = np.random.default_rng(11)
        table = self.table()
        for _ in range(10):
            labels = rng.integers(-1, 5, size=(6, 6))
            view = make_labeled_view(labels)
            if not (labels >= 0).any():
                continue
            m = 4
            assignment = np.where(labels >= 0, rng.integers(0, m, size=(6, 6)), -1)
            ms = MaskSet.from_assignment(assignment, unit_rows(rng, m, table.dim))
            g, valid = teacher_mask_embeddings(view, ms, table)
            rows, cols = np.nonzero(labels >= 0)
            tokens = oracle_pixel_embeddings(view, table)[rows, cols]
            g2, valid2 = teacher_embeddings_from_tokens(
                assignment[rows, cols], tokens, m)
            assert np.array_equal(valid, valid2)
            assert np.array_equal(g, g2)

    def test_teacher_decodability(self):
        # a pure mask's teacher row must decode to its own category
        rng = np.random.default_rng(12)
        table = self.table(n=6, dim=12, seed=4)
        labels = np.repeat(np.arange(6), 4).reshape(6, 4)
        view = make_labeled_view(labels)
        ms = MaskSet.from_assignment(labels.copy(), unit_rows(rng, 6, table.dim))
        g, valid = teacher_mask_embeddings(view, ms, table)
        assert valid.all()
        decoded = np.argmax(g @ table.embeddings.T, axis=1)
        assert decoded.tolist() == list(range(6))


class TestComposition:
    def test_backproject_then_pseudo_selects_containing_mask(self):
        rng = np.random.default_rng(13)
        h, w, m, c = 6, 6, 4, 8
        ms = random_maskset(rng, m, h, w, c, void_frac=0.3)
        corr = random_correspondence(rng, h, w, 50)
        m3d = backproject_masks(ms, corr)
        f2d = pseudo_mask_feature(m3d, ms.embeddings)
        for j in range(corr.n_prime):
            r, c_ = corr.pixel_row[j], corr.pixel_col[j]
            mask_id = ms.assignment[r, c_]
            if mask_id >= 0:
                assert np.array_equal(f2d[j], ms.embeddings[mask_id])
            else:
                assert np.all(f2d[j] == 0.0)

    def test_membership_matches_masks(self):
        rng = np.random.default_rng(14)
        ms = random_maskset(rng, 3, 5, 5, 8)
        membership, rows, cols = mask_patch_membership(ms)
        for i in range(3):
            for j, (r, c) in enumerate(zip(rows, cols)):
                assert membership[i, j] == (not ms.masks[i, r, c])
