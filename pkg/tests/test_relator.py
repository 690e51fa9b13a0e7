import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgkd.distill import TaskFeature
from fedgkd.nn import ModelParams, init_params
from fedgkd.relator import (
    KernelState,
    aggregate,
    compute_relations,
    kernelize,
    matrix_exp,
    relate,
    uniform_mixing,
)


def tf(matrix, client_id=0, round_idx=1):
    return TaskFeature(matrix=np.asarray(matrix, dtype=float), client_id=client_id,
                       round_idx=round_idx)


def taylor_expm(a, terms=50):
    out = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    for k in range(1, terms + 1):
        term = term @ a / k
        out = out + term
    return out


class TestComputeRelations:
    def test_identical_features_fully_related(self):
        m = [[1.0, 2.0], [3.0, 1.0], [0.5, 4.0]]
        rel = compute_relations([tf(m, 0), tf(m, 1)])
        assert rel.values[0, 1] == pytest.approx(1.0, abs=1e-12)
        assert rel.values[0, 0] == 1.0

    def test_negated_features_fully_anti_related(self):
        m = np.array([[1.0, 2.0], [3.0, 1.0], [0.5, 4.0]])
        rel = compute_relations([tf(m, 0), tf(-m, 1)])
        assert rel.values[0, 1] == pytest.approx(-1.0, abs=1e-12)

    def test_three_row_two_column_case_matches_frozen_oracle(self):
        # textbook per-column Pearson, averaged: frozen from the direct formula
        m1 = [[1.0, 2.0], [2.0, 4.0], [3.0, 5.0]]
        m2 = [[2.0, 1.0], [1.0, 3.0], [4.0, 6.0]]
        rel = compute_relations([tf(m1, 0), tf(m2, 1)])
        assert rel.values[0, 1] == pytest.approx(0.8042373185922547, abs=1e-12)

    def test_zero_variance_column_contributes_zero(self):
        # second column of m1 is constant: only column 1 correlates (corr=1),
        # average over 2 columns = 0.5
        m1 = [[1.0, 7.0], [2.0, 7.0], [3.0, 7.0]]
        m2 = [[2.0, 1.0], [4.0, 3.0], [6.0, 9.0]]
        rel = compute_relations([tf(m1, 0), tf(m2, 1)])
        assert rel.values[0, 1] == pytest.approx(0.5, abs=1e-12)

    def test_diagonal_forced_to_one_even_with_constant_columns(self):
        m = [[1.0, 7.0], [2.0, 7.0]]
        rel = compute_relations([tf(m, 0), tf(m, 1)])
        assert rel.values[0, 0] == 1.0 and rel.values[1, 1] == 1.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            compute_relations([tf(np.zeros((3, 2)), 0), tf(np.zeros((3, 3)), 1)])

    def test_fewer_than_two_rows_rejected(self):
        with pytest.raises(ValueError, match="at least 2 rows"):
            compute_relations([tf(np.zeros((1, 2)), 0), tf(np.zeros((1, 2)), 1)])

    def test_mixed_rounds_rejected(self):
        with pytest.raises(ValueError, match="rounds"):
            compute_relations([tf(np.zeros((2, 2)), 0, 1), tf(np.zeros((2, 2)), 1, 2)])

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 6))
        mats = [rng.standard_normal((4, 3)) for _ in range(n)]
        rel = compute_relations([tf(m, i) for i, m in enumerate(mats)]).values
        perm = rng.permutation(n)
        rel_p = compute_relations([tf(mats[p], i) for i, p in enumerate(perm)]).values
        np.testing.assert_allclose(rel_p, rel[np.ix_(perm, perm)], atol=1e-12)

    def test_entries_bounded_and_symmetric(self):
        rng = np.random.default_rng(5)
        mats = [rng.standard_normal((6, 4)) for _ in range(4)]
        rel = compute_relations([tf(m, i) for i, m in enumerate(mats)]).values
        assert np.abs(rel - rel.T).max() <= 1e-12
        assert rel.min() >= -1.0 - 1e-9 and rel.max() <= 1.0 + 1e-9


class TestMatrixExp:
    def test_zero_matrix_maps_to_identity(self):
        np.testing.assert_allclose(matrix_exp(np.zeros((3, 3)), 1.0), np.eye(3), atol=1e-14)

    def test_diagonal_matrix_exponentiates_entrywise(self):
        out = matrix_exp(np.diag([1.0, -2.0]), 1.0)
        np.testing.assert_allclose(out, np.diag([math.e, math.exp(-2.0)]), atol=1e-12)

    def test_swap_matrix_gives_cosh_sinh(self):
        # closed form: exp([[0,1],[1,0]]) = [[cosh 1, sinh 1], [sinh 1, cosh 1]]
        out = matrix_exp(np.array([[0.0, 1.0], [1.0, 0.0]]), 1.0)
        assert out[0, 0] == pytest.approx(1.5430806348152437, abs=1e-12)
        assert out[0, 1] == pytest.approx(1.1752011936438014, abs=1e-12)

    def test_non_symmetric_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            matrix_exp(np.array([[0.0, 1.0], [0.5, 0.0]]), 1.0)

    def test_matches_taylor_oracle_within_radius(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            n = int(rng.integers(2, 8))
            r = rng.uniform(-1, 1, (n, n))
            r = (r + r.T) / 2
            for tau in (0.05, 0.25, 1.0):
                if np.abs(tau * r).sum(axis=1).max() <= 2.0:
                    np.testing.assert_allclose(
                        matrix_exp(r, tau), taylor_expm(tau * r), atol=1e-8
                    )

    def test_result_is_positive_semidefinite(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(2, 10))
            r = rng.uniform(-1, 1, (n, n))
            r = (r + r.T) / 2
            for tau in (0.05, 0.1, 0.25, 0.5, 0.75, 1.0):
                assert np.linalg.eigvalsh(matrix_exp(r, tau)).min() >= -1e-8


class TestKernelize:
    def test_constant_connectivity_gives_uniform_mixing(self):
        state = kernelize(np.full((4, 4), 2.5), tau_s=3.0)
        np.testing.assert_allclose(state.mixing, uniform_mixing(4), atol=1e-12)

    def test_large_temperature_with_dominant_diagonal_approaches_identity(self):
        conn = np.full((3, 3), 0.2)
        np.fill_diagonal(conn, 1.0)
        state = kernelize(conn, tau_s=200.0)
        np.testing.assert_allclose(state.mixing, np.eye(3), atol=1e-6)

    def test_rows_sum_to_one_with_positive_entries(self):
        rng = np.random.default_rng(4)
        conn = rng.uniform(-3, 3, (5, 5))
        state = kernelize(conn, tau_s=5.0)
        np.testing.assert_allclose(state.mixing.sum(axis=1), np.ones(5), atol=1e-10)
        assert (state.mixing > 0).all()

    def test_row_shift_invariance_is_exact(self):
        rng = np.random.default_rng(5)
        conn = rng.standard_normal((4, 4))
        shifted = conn + rng.standard_normal((4, 1))  # constant per row
        a = kernelize(conn, tau_s=3.0).mixing
        b = kernelize(shifted, tau_s=3.0).mixing
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_huge_entries_do_not_overflow_mixing(self):
        conn = np.array([[4000.0, 3999.0], [3999.0, 4000.0]])
        state = kernelize(conn, tau_s=9.0)
        assert np.isfinite(state.mixing).all()
        np.testing.assert_allclose(state.mixing.sum(axis=1), [1.0, 1.0], atol=1e-12)

    def test_weak_pair_lifted_by_two_hop_path(self):
        # a weakly related pair strongly connected through a third client:
        # global connectivity exceeds the raw pairwise relation
        rel = np.array([[1.0, 0.01, 0.9], [0.01, 1.0, 0.9], [0.9, 0.9, 1.0]])
        conn = matrix_exp(rel, 1.0)
        assert conn[0, 1] > rel[0, 1]

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            kernelize(np.array([[np.inf, 0.0], [0.0, 1.0]]), tau_s=1.0)

    def test_relate_composes_and_records_temperatures(self):
        from fedgkd.relator import RelationMatrix

        rel = RelationMatrix(values=np.eye(2), round_idx=1)
        state: KernelState = relate(rel, tau=0.5, tau_s=3.0)
        assert state.tau == 0.5 and state.tau_s == 3.0
        np.testing.assert_allclose(state.mixing.sum(axis=1), [1.0, 1.0])


class TestAggregate:
    def params(self, value, like=None):
        base = like or init_params(2, 3, 2, seed=0)
        return ModelParams(*(np.full_like(a, value) for a in base.arrays()))

    def test_identity_mixing_returns_own_weights(self):
        weights = [init_params(2, 3, 2, seed=s) for s in range(3)]
        out = aggregate(weights, np.eye(3))
        for w, o in zip(weights, out):
            np.testing.assert_array_equal(w.flatten(), o.flatten())

    def test_uniform_mixing_equals_plain_mean(self):
        weights = [init_params(2, 3, 2, seed=s) for s in range(4)]
        out = aggregate(weights, uniform_mixing(4))
        stacked = np.stack([w.flatten() for w in weights])
        expected = uniform_mixing(4) @ stacked
        for i, o in enumerate(out):
            np.testing.assert_allclose(o.flatten(), expected[i], atol=0)

    def test_three_client_convex_combination_matches_scalar_oracle(self):
        vals = (1.0, 5.0, 9.0)
        weights = [self.params(v) for v in vals]
        mixing = np.array([[0.5, 0.25, 0.25], [0.25, 0.5, 0.25], [0.25, 0.25, 0.5]])
        out = aggregate(weights, mixing)
        # per-coordinate oracle: plain scalar arithmetic
        expected_first = 0.5 * 1.0 + 0.25 * 5.0 + 0.25 * 9.0
        assert out[0].w1[0, 0] == pytest.approx(expected_first, abs=1e-15)
        assert out[1].w1[0, 0] == pytest.approx(0.25 * 1.0 + 0.5 * 5.0 + 0.25 * 9.0, abs=1e-15)

    def test_convex_hull_preserved_coordinatewise(self):
        rng = np.random.default_rng(6)
        weights = [init_params(2, 3, 2, seed=s) for s in range(3)]
        mixing = rng.dirichlet(np.ones(3), size=3)
        out = aggregate(weights, mixing)
        stacked = np.stack([w.flatten() for w in weights])
        lo, hi = stacked.min(axis=0), stacked.max(axis=0)
        for o in out:
            flat = o.flatten()
            assert (flat >= lo - 1e-12).all() and (flat <= hi + 1e-12).all()

    def test_mixing_shape_mismatch_rejected(self):
        weights = [init_params(2, 3, 2, seed=s) for s in range(2)]
        with pytest.raises(ValueError, match="mixing matrix"):
            aggregate(weights, np.eye(3))

    def test_client_parameter_shape_mismatch_rejected(self):
        a = init_params(2, 3, 2, seed=0)
        b = init_params(2, 4, 2, seed=0)  # different hidden width
        with pytest.raises(ValueError, match="shapes differ"):
            aggregate([a, b], uniform_mixing(2))
