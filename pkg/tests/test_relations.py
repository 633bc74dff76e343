"""Semantic relation generation: similarity-refined CAMs, trinary masks,
and the relation matrix.

``psr_loop_oracle`` re-derives one refinement iteration pixel by pixel
with plain Python arithmetic and is the reference for the vectorized
implementation.
"""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from densedistill.config import TrainConfig
from densedistill.data import generate_synthetic_pair
from densedistill.errors import ContractViolation
from densedistill.models import PolypClassifier
from densedistill.relations import (
    BACKGROUND,
    POLYP,
    UNSURE,
    build_relations,
    psr_refine,
    psr_weights,
    relation_matrix,
    semantic_relations,
    trinarize,
)


def psr_loop_oracle(cam: np.ndarray, image: np.ndarray, iters: int) -> np.ndarray:
    """Scalar re-derivation of the refinement: per-pixel 3x3 weighted mean.

    Window offsets are visited in the same row-major order as the
    implementation so floating-point accumulation order matches.
    """
    h, w = cam.shape
    out = cam.astype(np.float64).copy()
    for _ in range(iters):
        nxt = np.zeros_like(out)
        for y in range(h):
            for x in range(w):
                num = 0.0
                den = 0.0
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w:
                            d = math.sqrt(sum(
                                (float(image[c, y, x]) - float(image[c, ny, nx])) ** 2
                                for c in range(3)
                            )) / math.sqrt(3.0)
                            wgt = 1.0 - d
                            num += wgt * out[ny, nx]
                            den += wgt
                nxt[y, x] = num / den
        out = nxt
    return out


class TestPsrRefine:
    @pytest.mark.parametrize("iters", [1, 3, 10])
    @pytest.mark.parametrize("value", [0.0, 0.25, 0.5, 1.0])
    def test_constant_map_fixed_point_exact(self, iters, value, rng):
        cam = torch.full((6, 6), value, dtype=torch.float64)
        image = torch.tensor(rng.random((3, 6, 6)))
        out = psr_refine(cam, image, iters)
        assert torch.equal(out, cam)

    def test_constant_map_fixed_point_general_values(self, rng):
        # arbitrary constants are a fixed point up to accumulation roundoff
        for value in rng.random(5):
            cam = torch.full((5, 5), float(value), dtype=torch.float64)
            image = torch.tensor(rng.random((3, 5, 5)))
            out = psr_refine(cam, image, 10)
            assert torch.allclose(out, cam, atol=1e-12)

    def test_uniform_image_one_iter_is_box_average_on_interior(self, rng):
        cam = torch.tensor(rng.random((7, 9)))
        image = torch.full((3, 7, 9), 0.4, dtype=torch.float64)
        out = psr_refine(cam, image, 1)
        c = cam.numpy()
        for y in range(1, 6):
            for x in range(1, 8):
                acc = 0.0
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        acc += c[y + dy, x + dx]
                assert out[y, x].item() == acc / 9.0  # exact

    def test_2x2_hand_oracle(self):
        cam = np.array([[0.9, 0.2], [0.4, 0.7]])
        image = np.array([
            [[0.1, 0.8], [0.3, 0.5]],
            [[0.2, 0.7], [0.4, 0.6]],
            [[0.9, 0.1], [0.5, 0.3]],
        ])
        expected = psr_loop_oracle(cam, image, 1)
        out = psr_refine(torch.tensor(cam), torch.tensor(image), 1)
        np.testing.assert_allclose(out.numpy(), expected, atol=1e-6)

    @pytest.mark.parametrize("iters", [1, 2, 5])
    def test_loop_oracle_random_instances(self, iters, rng):
        cam = rng.random((5, 4))
        image = rng.random((3, 5, 4))
        expected = psr_loop_oracle(cam, image, iters)
        out = psr_refine(torch.tensor(cam), torch.tensor(image), iters)
        np.testing.assert_allclose(out.numpy(), expected, atol=1e-12)

    def test_zero_iterations_identity(self, rng):
        cam = torch.tensor(rng.random((4, 4)))
        image = torch.tensor(rng.random((3, 4, 4)))
        assert torch.equal(psr_refine(cam, image, 0), cam)

    def test_value_range_preserved(self, rng):
        for _ in range(20):
            cam = torch.tensor(rng.random((6, 6)))
            image = torch.tensor(rng.random((3, 6, 6)))
            out = psr_refine(cam, image, 10)
            assert out.min() >= cam.min() - 1e-9
            assert out.max() <= cam.max() + 1e-9

    def test_weights_sum_to_one(self, rng):
        image = torch.tensor(rng.random((3, 5, 7)))
        weights, denom = psr_weights(image)
        lam = weights / denom
        total = lam.sum(dim=0)
        assert torch.allclose(total, torch.ones_like(total), atol=1e-6)
        assert bool((lam >= 0).all())

    def test_negative_iterations_rejected(self):
        with pytest.raises(ContractViolation):
            psr_refine(torch.zeros(2, 2), torch.zeros(3, 2, 2), -1)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            psr_refine(torch.zeros(2, 2), torch.zeros(3, 4, 4), 1)


class TestTrinarize:
    def test_bands(self):
        m = torch.tensor([[0.2, 0.5, 0.8]])
        mask = trinarize(m, 0.3, 0.7)
        assert mask.tolist() == [[BACKGROUND, UNSURE, POLYP]]

    def test_boundaries_inclusive(self):
        m = torch.tensor([[0.3, 0.7]])
        mask = trinarize(m, 0.3, 0.7)
        assert mask.tolist() == [[BACKGROUND, POLYP]]

    def test_all_zero_map_is_background(self):
        mask = trinarize(torch.zeros(4, 4), 0.3, 0.7)
        assert bool((mask == BACKGROUND).all())

    def test_threshold_order_enforced(self):
        with pytest.raises(ContractViolation):
            trinarize(torch.zeros(2, 2), 0.7, 0.3)
        with pytest.raises(ContractViolation):
            trinarize(torch.zeros(2, 2), 0.0, 0.5)

    def test_resize_happens_before_thresholding(self):
        # a map that is polyp-hot in one corner: at 2x2 the interpolated
        # values, not the thresholded ones, must decide the bands
        m = torch.zeros(4, 4)
        m[:2, :2] = 1.0
        mask = trinarize(m, 0.3, 0.7, out_hw=(2, 2))
        assert mask.shape == (2, 2)
        assert mask[0, 0] == POLYP
        assert mask[1, 1] == BACKGROUND

    @given(
        value=st.floats(min_value=0.0, max_value=1.0),
        bump=st.floats(min_value=0.0, max_value=1.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_monotone_in_pixel_value(self, value, bump):
        rank = {BACKGROUND: 0, UNSURE: 1, POLYP: 2}
        lo = trinarize(torch.tensor([[value]]), 0.3, 0.7)[0, 0].item()
        hi = trinarize(torch.tensor([[min(1.0, value + bump)]]), 0.3, 0.7)[0, 0].item()
        assert rank[hi] >= rank[lo]


class TestRelationMatrix:
    def test_exhaustive_truth_table(self):
        values = [BACKGROUND, POLYP, UNSURE]
        for mw in values:
            for mn in values:
                r = relation_matrix(torch.tensor([[mw]]), torch.tensor([[mn]]))
                expected = 1.0 if (mw == mn and mw != UNSURE) else 0.0
                assert r[0, 0].item() == expected, (mw, mn)

    def test_binary_entries_only(self, rng):
        mw = torch.tensor(rng.integers(0, 3, size=(4, 4)), dtype=torch.int8)
        mn = torch.tensor(rng.integers(0, 3, size=(4, 4)), dtype=torch.int8)
        r = relation_matrix(mw, mn)
        assert set(torch.unique(r).tolist()).issubset({0.0, 1.0})

    def test_role_swap_transpose(self, rng):
        mw = torch.tensor(rng.integers(0, 3, size=(3, 3)), dtype=torch.int8)
        mn = torch.tensor(rng.integers(0, 3, size=(3, 3)), dtype=torch.int8)
        assert torch.equal(relation_matrix(mw, mn), relation_matrix(mn, mw).T)

    def test_permutation_equivariance(self, rng):
        mw = torch.tensor(rng.integers(0, 3, size=(9,)), dtype=torch.int8)
        mn = torch.tensor(rng.integers(0, 3, size=(9,)), dtype=torch.int8)
        perm = torch.tensor(rng.permutation(9))
        base = relation_matrix(mw.reshape(3, 3), mn.reshape(3, 3))
        permuted = relation_matrix(mw[perm].reshape(3, 3), mn.reshape(3, 3))
        assert torch.equal(permuted, base[perm])


class TestSemanticRelations:
    def _models(self):
        student = PolypClassifier("tiny", stage_taps=(3, 4), trainable=True)
        teacher = PolypClassifier("tiny", stage_taps=(3, 4), trainable=False)
        return student, teacher

    def test_disabled_srg_gives_all_ones(self):
        student, teacher = self._models()
        sample = generate_synthetic_pair(seed=3, label=1, warp_magnitude=0.3, size=64)
        cfg = TrainConfig(backbone="tiny", input_size=64, enable_srg=False)
        maps = build_relations(sample, teacher, student, cfg)
        for m in maps.values():
            assert bool((m.relation == 1).all())
            assert m.cam_raw_student is None

    def test_psr_disabled_keeps_raw_cam(self):
        student, teacher = self._models()
        sample = generate_synthetic_pair(seed=3, label=1, warp_magnitude=0.3, size=64)
        cfg = TrainConfig(backbone="tiny", input_size=64, enable_psr=False)
        maps = build_relations(sample, teacher, student, cfg)
        last = max(maps)
        assert torch.equal(maps[last].cam_refined_student, maps[last].cam_raw_student)

    def test_relation_shapes_match_grids(self):
        student, teacher = self._models()
        sample = generate_synthetic_pair(seed=9, label=0, warp_magnitude=0.2, size=64)
        cfg = TrainConfig(backbone="tiny", input_size=64)
        maps = build_relations(sample, teacher, student, cfg)
        assert set(maps) == {3, 4}
        assert maps[3].relation.shape == (64, 64)  # 8x8 grid at stride 16 on 64px
        assert maps[4].relation.shape == (16, 16)

    def test_relation_consistent_with_masks(self):
        student, teacher = self._models()
        sample = generate_synthetic_pair(seed=11, label=1, warp_magnitude=0.4, size=64)
        cfg = TrainConfig(backbone="tiny", input_size=64, psr_iters=2)
        maps = build_relations(sample, teacher, student, cfg)
        for m in maps.values():
            rebuilt = relation_matrix(m.mask_student, m.mask_teacher)
            assert torch.equal(m.relation, rebuilt)
