"""Affinity construction and dense distillation loss.

The vectorized implementation is checked against hand-evaluated scalar
cases and against the pure-Python double-loop reference, and its gradients
against central finite differences.
"""

import math

import numpy as np
import pytest
import torch

from densedistill.affinity import (
    AffinityField,
    add_loss_all_scales,
    compute_affinity_field,
    cosine_similarity_matrix,
    dense_distillation_loss,
    dense_loss_reference,
    directed_affinity,
    oracle_check,
    pairwise_feature_distance,
    path_probability,
    random_oracle_instance,
)
from densedistill.errors import ContractViolation


def feat(rows, hw=None):
    """[N, C] row list -> [C, h, w] feature map (row-major positions)."""
    arr = torch.tensor(rows, dtype=torch.float64)
    n, c = arr.shape
    if hw is None:
        hw = (1, n)
    return arr.transpose(0, 1).reshape(c, *hw)


class TestCosineSimilarity:
    def test_distinct_unit_vectors_give_identity_pattern(self):
        eye = torch.eye(4, dtype=torch.float64)
        f = feat(eye.tolist(), hw=(2, 2))
        s = cosine_similarity_matrix(f, f)
        assert torch.allclose(s, eye)

    def test_orthogonal_fields_give_zero(self):
        fw = feat([[1.0, 0.0], [1.0, 0.0]])
        fn = feat([[0.0, 1.0], [0.0, 1.0]])
        s = cosine_similarity_matrix(fw, fn)
        assert torch.allclose(s, torch.zeros(2, 2, dtype=torch.float64))

    def test_hand_value(self):
        # cos((1,0), (1,1)/sqrt(2)) = sqrt(2)/2
        fw = feat([[1.0, 0.0]])
        fn = feat([[1.0, 1.0]])
        s = cosine_similarity_matrix(fw, fn)
        assert s[0, 0].item() == pytest.approx(math.sqrt(2) / 2, abs=1e-12)

    def test_zero_vector_yields_zero_similarity(self):
        fw = feat([[0.0, 0.0]])
        fn = feat([[1.0, 1.0]])
        assert cosine_similarity_matrix(fw, fn)[0, 0].item() == 0.0

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            cosine_similarity_matrix(torch.zeros(2, 1, 2), torch.zeros(3, 1, 2))


class TestDirectedAffinity:
    def test_row_softmax_hand_case(self):
        s = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        r = torch.ones(2, 2, dtype=torch.float64)
        a = directed_affinity(s, r, "teacher_given_student")
        expected = math.e / (math.e + 1.0)
        assert a[0, 0].item() == pytest.approx(expected, abs=1e-12)
        assert a[0, 1].item() == pytest.approx(1.0 - expected, abs=1e-12)

    def test_single_unmasked_entry_wins(self):
        s = torch.tensor([[5.0, -3.0], [0.0, 0.0]], dtype=torch.float64)
        r = torch.tensor([[1.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
        a = directed_affinity(s, r, "teacher_given_student")
        assert a[0, 0].item() == 1.0
        assert a[0, 1].item() == 0.0

    def test_fully_masked_row_is_zero(self):
        s = torch.ones(2, 2, dtype=torch.float64)
        r = torch.tensor([[0.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
        a = directed_affinity(s, r, "teacher_given_student")
        assert torch.equal(a[0], torch.zeros(2, dtype=torch.float64))
        assert a[1].sum().item() == pytest.approx(1.0, abs=1e-12)

    def test_column_direction_normalizes_columns(self, rng):
        s = torch.tensor(rng.standard_normal((5, 5)))
        r = torch.tensor((rng.random((5, 5)) < 0.7).astype(float))
        a = directed_affinity(s, r, "student_given_teacher")
        sums = a.sum(dim=0)
        masked = r.sum(dim=0) > 0
        assert torch.allclose(sums[masked], torch.ones(int(masked.sum()), dtype=torch.float64), atol=1e-5)
        assert torch.equal(sums[~masked], torch.zeros(int((~masked).sum()), dtype=torch.float64))

    def test_shift_invariance_per_row(self, rng):
        s = torch.tensor(rng.standard_normal((4, 4)))
        r = torch.tensor((rng.random((4, 4)) < 0.8).astype(float))
        shifted = s + torch.tensor(rng.standard_normal((4, 1)))
        a = directed_affinity(s, r, "teacher_given_student")
        b = directed_affinity(shifted, r, "teacher_given_student")
        assert torch.allclose(a, b, atol=1e-10)

    def test_mask_dominance_exact_zeros(self, rng):
        s = torch.tensor(rng.standard_normal((6, 6)))
        r = torch.tensor((rng.random((6, 6)) < 0.5).astype(float))
        for direction in ("teacher_given_student", "student_given_teacher"):
            a = directed_affinity(s, r, direction)
            assert bool((a[r == 0] == 0).all())


class TestPathProbability:
    @pytest.mark.parametrize("a,b,expected", [(0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (0.5, 0.5, 0.75)])
    def test_union_values(self, a, b, expected):
        pa = torch.full((1, 1), a, dtype=torch.float64)
        pb = torch.full((1, 1), b, dtype=torch.float64)
        assert path_probability(pa, pb)[0, 0].item() == expected

    def test_symmetry(self, rng):
        a = torch.tensor(rng.random((8, 8)))
        b = torch.tensor(rng.random((8, 8)))
        assert torch.equal(path_probability(a, b), path_probability(b, a))

    def test_range_validation(self):
        bad = torch.tensor([[1.5]])
        with pytest.raises(ContractViolation):
            path_probability(bad, torch.tensor([[0.5]]))

    def test_stays_in_unit_interval(self, rng):
        a = torch.tensor(rng.random((50, 50)))
        b = torch.tensor(rng.random((50, 50)))
        p = path_probability(a, b)
        assert bool((p >= 0).all()) and bool((p <= 1).all())


class TestDenseLoss:
    def test_identical_constant_fields_zero_loss(self):
        f = torch.ones(3, 2, 2, dtype=torch.float64)
        field = compute_affinity_field(f, f, torch.ones(4, 4, dtype=torch.float64))
        assert dense_distillation_loss(f, f, field.path_prob).item() == 0.0

    def test_all_zero_relation_zero_loss(self, rng):
        fw = torch.tensor(rng.standard_normal((3, 2, 2)))
        fn = torch.tensor(rng.standard_normal((3, 2, 2)))
        field = compute_affinity_field(fw, fn, torch.zeros(4, 4, dtype=torch.float64))
        assert dense_distillation_loss(fw, fn, field.path_prob).item() == 0.0

    def test_two_pixel_case_matches_loop_oracle(self):
        fw = feat([[1.0, 0.0], [0.0, 1.0]])
        fn = feat([[1.0, 0.0], [0.0, 1.0]])
        rel = torch.ones(2, 2, dtype=torch.float64)
        field = compute_affinity_field(fw, fn, rel)
        vec = dense_distillation_loss(fw, fn, field.path_prob).item()
        ref, *_ = dense_loss_reference(fw, fn, rel)
        assert vec == pytest.approx(ref, abs=1e-6)

    def test_non_finite_features_rejected(self):
        f = torch.ones(2, 1, 2, dtype=torch.float64)
        bad = f.clone()
        bad[0, 0, 0] = float("nan")
        with pytest.raises(ContractViolation):
            dense_distillation_loss(bad, f, torch.ones(2, 2, dtype=torch.float64))

    def test_l1_norm_option(self, rng):
        fw = torch.tensor(rng.standard_normal((3, 2, 2)))
        fn = torch.tensor(rng.standard_normal((3, 2, 2)))
        rel = torch.ones(4, 4, dtype=torch.float64)
        field = compute_affinity_field(fw, fn, rel)
        vec = dense_distillation_loss(fw, fn, field.path_prob, norm="l1").item()
        ref, *_ = dense_loss_reference(fw, fn, rel, norm="l1")
        assert vec == pytest.approx(ref, rel=1e-10)


class TestMultiScale:
    def test_single_scale_equals_scale_loss(self, rng):
        fw = torch.tensor(rng.standard_normal((3, 2, 2)))
        fn = torch.tensor(rng.standard_normal((3, 2, 2)))
        rel = torch.ones(4, 4, dtype=torch.float64)
        field = compute_affinity_field(fw, fn, rel)
        single = dense_distillation_loss(fw, fn, field.path_prob)
        multi = add_loss_all_scales({4: fw}, {4: fn}, {4: rel})
        assert multi.item() == pytest.approx(single.item(), rel=1e-12)

    def test_two_scales_average(self, rng):
        maps = {}
        for l in (3, 4):
            maps[l] = (
                torch.tensor(rng.standard_normal((3, 2, 2))),
                torch.tensor(rng.standard_normal((3, 2, 2))),
            )
        rels = {l: torch.ones(4, 4, dtype=torch.float64) for l in (3, 4)}
        per_scale = []
        for l in (3, 4):
            ref, *_ = dense_loss_reference(maps[l][0], maps[l][1], rels[l])
            per_scale.append(ref)
        total = add_loss_all_scales(
            {l: maps[l][0] for l in maps}, {l: maps[l][1] for l in maps}, rels
        )
        assert total.item() == pytest.approx(sum(per_scale) / 2, rel=1e-9)

    def test_identical_pyramids_constant_fields_zero(self):
        f = {3: torch.ones(2, 2, 2, dtype=torch.float64), 4: torch.ones(2, 1, 1, dtype=torch.float64)}
        rels = {3: torch.ones(4, 4, dtype=torch.float64), 4: torch.ones(1, 1, dtype=torch.float64)}
        assert add_loss_all_scales(f, f, rels).item() == 0.0

    def test_tap_mismatch_rejected(self):
        f = torch.ones(2, 1, 1, dtype=torch.float64)
        with pytest.raises(ContractViolation):
            add_loss_all_scales({3: f}, {4: f}, {3: torch.ones(1, 1, dtype=torch.float64)})


class TestOracleEquivalence:
    def test_seeded_instances_match_reference(self):
        for seed in range(10):
            result = oracle_check(seed)
            assert result["loss_relative_error"] < 1e-5
            assert result["max_affinity_deviation"] < 1e-5

    def test_row_stochasticity_property(self, rng):
        # rows/columns with any unmasked entry sum to 1; fully masked are 0;
        # masked-out entries are exactly 0 in the union as well
        for _ in range(200):
            n = int(rng.integers(2, 6)) ** 2
            s = torch.tensor(rng.standard_normal((n, n)))
            rel = torch.tensor((rng.random((n, n)) < rng.uniform(0.1, 0.9)).astype(float))
            a_ts = directed_affinity(s, rel, "teacher_given_student")
            a_st = directed_affinity(s, rel, "student_given_teacher")
            p = path_probability(a_ts, a_st)
            row_any = rel.sum(dim=1) > 0
            col_any = rel.sum(dim=0) > 0
            assert torch.allclose(
                a_ts.sum(dim=1)[row_any],
                torch.ones(int(row_any.sum()), dtype=torch.float64), atol=1e-5)
            assert bool((a_ts.sum(dim=1)[~row_any] == 0).all())
            assert torch.allclose(
                a_st.sum(dim=0)[col_any],
                torch.ones(int(col_any.sum()), dtype=torch.float64), atol=1e-5)
            assert bool((a_st.sum(dim=0)[~col_any] == 0).all())
            assert bool((p[rel == 0] == 0).all())


class TestGradients:
    @staticmethod
    def _loss_fn(levels_s, levels_t, rels, detach):
        return add_loss_all_scales(levels_s, levels_t, rels, detach_affinity=detach)

    @pytest.mark.parametrize("detach", [False, True])
    def test_matches_central_differences(self, detach, rng):
        torch.manual_seed(7)
        levels_s = {l: torch.tensor(rng.standard_normal((3, 2, 2)), requires_grad=True) for l in (3, 4)}
        levels_t = {l: torch.tensor(rng.standard_normal((3, 2, 2))) for l in (3, 4)}
        rels = {l: torch.tensor((rng.random((4, 4)) < 0.8).astype(float)) for l in (3, 4)}

        if detach:
            # gradient-flow mode with frozen affinities: the analytic
            # gradient treats the path probabilities as constants, so the
            # finite-difference function must hold them at base-point values
            frozen = {
                l: compute_affinity_field(levels_s[l].detach(), levels_t[l], rels[l]).path_prob
                for l in rels
            }

            def value(levels):
                per = [dense_distillation_loss(levels[l], levels_t[l], frozen[l]) for l in sorted(rels)]
                return torch.stack(per).mean()
        else:
            def value(levels):
                return add_loss_all_scales(levels, levels_t, rels, detach_affinity=False)

        loss = self._loss_fn(levels_s, levels_t, rels, detach)
        loss.backward()

        h = 1e-4
        for l in (3, 4):
            grad = levels_s[l].grad
            base = levels_s[l].detach().clone()
            for idx in np.ndindex(*base.shape):
                with torch.no_grad():
                    plus = {k: v.detach().clone() for k, v in levels_s.items()}
                    plus[l][idx] += h
                    minus = {k: v.detach().clone() for k, v in levels_s.items()}
                    minus[l][idx] -= h
                    fd = (value(plus) - value(minus)) / (2 * h)
                denom = max(abs(float(fd)), abs(float(grad[idx])), 1e-8)
                assert abs(float(fd) - float(grad[idx])) / denom < 1e-3, (
                    f"scale {l} idx {idx}: fd={float(fd)} analytic={float(grad[idx])}"
                )

    def test_unidirectional_differs_from_bidirectional(self, rng):
        fw = torch.tensor(rng.standard_normal((4, 3, 3)))
        fn = torch.tensor(rng.standard_normal((4, 3, 3)))
        rel = torch.tensor((rng.random((9, 9)) < 0.7).astype(float))
        bi = add_loss_all_scales({4: fw}, {4: fn}, {4: rel}, bidirectional=True)
        uni = add_loss_all_scales({4: fw}, {4: fn}, {4: rel}, bidirectional=False)
        assert bi.item() != pytest.approx(uni.item(), rel=1e-6)

    def test_unidirectional_uses_teacher_given_student(self, rng):
        fw = torch.tensor(rng.standard_normal((4, 2, 2)))
        fn = torch.tensor(rng.standard_normal((4, 2, 2)))
        rel = torch.ones(4, 4, dtype=torch.float64)
        field = compute_affinity_field(fw, fn, rel, bidirectional=False)
        direct = directed_affinity(cosine_similarity_matrix(fw, fn), rel, "teacher_given_student")
        assert torch.equal(field.path_prob, direct)


class TestPairwiseDistance:
    def test_exact_zero_for_identical_positions(self):
        f = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 1, 2)
        d = pairwise_feature_distance(f, f)
        assert d[0, 0].item() == 0.0 and d[1, 1].item() == 0.0

    def test_matches_norm(self, rng):
        fw = torch.tensor(rng.standard_normal((5, 2, 2)))
        fn = torch.tensor(rng.standard_normal((5, 2, 2)))
        d = pairwise_feature_distance(fw, fn)
        vw = fw.reshape(5, -1).T
        vn = fn.reshape(5, -1).T
        for i in range(4):
            for j in range(4):
                assert d[i, j].item() == pytest.approx(float((vw[i] - vn[j]).norm()), rel=1e-9)
