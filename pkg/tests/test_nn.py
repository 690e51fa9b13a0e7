import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgkd.graphs import canonical_edges, Graph, generate_sbm, normalize
from fedgkd.nn import (
    AdamState,
    ModelParams,
    adam_array_step,
    adam_step,
    backward,
    forward,
    init_adam,
    init_params,
    load_params,
    loss_ce,
    loss_ce_grad,
    loss_ce_soft,
    loss_ce_soft_grads,
    prox_penalty,
    save_params,
    softmax,
    softmax_vjp,
)


def small_params(feature_dim=3, hidden=4, classes=2, seed=0):
    return init_params(feature_dim, hidden, classes, seed)


class TestForward:
    def test_zero_weights_give_bias_logits(self):
        p = small_params()
        for a in (p.w1, p.w2, p.w_out):
            a[:] = 0.0
        p.b_out[:] = [0.3, -0.7]
        g = generate_sbm(1, 4, 0.5, 0.001, 3, 2, seed=0)
        trace = forward(p, normalize(g), g.features)
        np.testing.assert_allclose(trace.logits, np.tile([0.3, -0.7], (4, 1)))

    def test_isolated_node_identity_weights_pass_positive_input_through(self):
        # single node: normalized adjacency is [[1]]; identity weights and
        # positive inputs make both relus transparent
        d = 3
        p = ModelParams(w1=np.eye(d), w2=np.eye(d), w_out=np.eye(d), b_out=np.zeros(d))
        g = Graph(1, np.zeros((0, 2), int), np.array([[1.5, 0.2, 3.0]]), np.zeros(1, int),
                  np.zeros(1, bool), np.zeros(1, bool), np.zeros(1, bool), d)
        trace = forward(p, normalize(g), g.features)
        np.testing.assert_allclose(trace.logits, [[1.5, 0.2, 3.0]])

    def test_dense_and_sparse_paths_agree(self):
        g = generate_sbm(2, 8, 0.4, 0.05, 3, 2, seed=3)
        p = small_params(3, 4, 2, seed=1)
        sparse_trace = forward(p, normalize(g), g.features)
        dense = np.zeros((g.num_nodes, g.num_nodes))
        dense[g.edges[:, 0], g.edges[:, 1]] = 1.0
        dense[g.edges[:, 1], g.edges[:, 0]] = 1.0
        dense_trace = forward(p, dense, g.features)
        np.testing.assert_allclose(dense_trace.logits, sparse_trace.logits, atol=1e-10)
        np.testing.assert_allclose(dense_trace.h, sparse_trace.h, atol=1e-10)

    def test_shape_mismatch_rejected(self):
        p = small_params(3, 4, 2)
        with pytest.raises(ValueError, match="expected"):
            forward(p, np.zeros((2, 2)), np.zeros((2, 5)))

    def test_random_graph_matches_plain_dense_reimplementation(self):
        rng = np.random.default_rng(0)
        g = generate_sbm(1, 5, 0.6, 0.001, 3, 2, seed=7)
        p = small_params(3, 4, 2, seed=2)
        x = rng.standard_normal((5, 3))
        ahat = normalize(g).toarray()
        h1 = np.maximum(ahat @ (x @ p.w1), 0)
        h2 = np.maximum(ahat @ (h1 @ p.w2), 0)
        expected = h2 @ p.w_out + p.b_out
        trace = forward(p, normalize(g), x)
        np.testing.assert_allclose(trace.logits, expected, atol=1e-12)


class TestLossCe:
    def test_uniform_logits_give_log_num_classes(self):
        logits = np.zeros((5, 4))
        y = np.zeros(5, dtype=int)
        assert loss_ce(logits, y, np.ones(5, bool)) == pytest.approx(math.log(4.0), abs=1e-12)

    def test_confident_correct_logit_drives_loss_to_zero(self):
        logits = np.array([[100.0, 0.0, 0.0]])
        assert loss_ce(logits, np.array([0]), np.ones(1, bool)) < 1e-8

    def test_three_row_case_matches_frozen_oracle(self):
        # value computed with the plain softmax formula p = exp(z)/sum(exp(z))
        logits = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0], [-1.0, 3.0, 0.2]])
        targets = np.array([1, 0, 2])
        assert loss_ce(logits, targets, np.ones(3, bool)) == pytest.approx(
            1.4797107501420104, abs=1e-12
        )

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            loss_ce(np.zeros((2, 2)), np.zeros(2, int), np.zeros(2, bool))

    def test_mask_restricts_rows(self):
        logits = np.array([[3.0, 0.0], [0.0, 3.0]])
        y = np.array([0, 0])
        mask = np.array([True, False])
        full = loss_ce(logits, y, np.ones(2, bool))
        first = loss_ce(logits, y, mask)
        assert first < full


class TestLossCeSoft:
    def test_target_equal_softmax_gives_entropy(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((4, 3))
        p = softmax(logits)
        entropy = float(-(p * np.log(p)).sum(axis=1).mean())
        assert loss_ce_soft(logits, p) == pytest.approx(entropy, abs=1e-12)

    def test_one_hot_targets_equal_hard_loss(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((6, 4))
        y = rng.integers(0, 4, 6)
        onehot = np.eye(4)[y]
        assert loss_ce_soft(logits, onehot) == pytest.approx(
            loss_ce(logits, y, np.ones(6, bool)), abs=1e-12
        )

    def test_two_by_three_case_matches_frozen_oracle(self):
        logits = np.array([[0.2, -0.4, 1.0], [1.5, 0.3, -0.2]])
        probs = np.array([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3]])
        assert loss_ce_soft(logits, probs) == pytest.approx(1.4864438075548227, abs=1e-12)

    def test_negative_target_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            loss_ce_soft(np.zeros((1, 2)), np.array([[1.5, -0.5]]))

    def test_rows_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            loss_ce_soft(np.zeros((1, 2)), np.array([[0.7, 0.7]]))

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_one_hot_equivalence_property(self, seed):
        rng = np.random.default_rng(seed)
        n, c = int(rng.integers(1, 6)), int(rng.integers(2, 5))
        logits = rng.standard_normal((n, c)) * 3
        y = rng.integers(0, c, n)
        assert loss_ce_soft(logits, np.eye(c)[y]) == pytest.approx(
            loss_ce(logits, y, np.ones(n, bool)), abs=1e-12
        )


class TestBackward:
    def test_prox_gradient_vanishes_at_anchor(self):
        p = small_params(seed=3)
        g = generate_sbm(1, 5, 0.5, 0.001, 3, 2, seed=1)
        trace = forward(p, normalize(g), g.features)
        d_logits = loss_ce_grad(trace.logits, g.labels, np.ones(5, bool))
        plain = backward(trace, d_logits)
        anchored = backward(trace, d_logits, prox=(0.5, p))
        for a, b in zip(plain.grads.arrays(), anchored.grads.arrays()):
            np.testing.assert_allclose(a, b, atol=1e-15)

    def test_gradients_match_finite_differences_sparse_path(self):
        g = generate_sbm(2, 3, 0.5, 0.05, 3, 2, seed=5)
        adj = normalize(g)
        p = small_params(3, 4, 2, seed=9)
        anchor = small_params(3, 4, 2, seed=10)
        x = np.asarray(g.features)
        y, mask, lam = g.labels, np.ones(6, bool), 1e-2

        def full_loss():
            tr = forward(p, adj, x)
            return loss_ce(tr.logits, y, mask) + prox_penalty(p, anchor, lam)

        trace = forward(p, adj, x)
        back = backward(trace, loss_ce_grad(trace.logits, y, mask), prox=(lam, anchor))
        eps = 1e-6
        for arr, grad in zip(p.arrays(), back.grads.arrays()):
            it = np.nditer(grad, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                orig = arr[i]
                arr[i] = orig + eps
                lp = full_loss()
                arr[i] = orig - eps
                lm = full_loss()
                arr[i] = orig
                fd = (lp - lm) / (2 * eps)
                assert abs(grad[i] - fd) <= 1e-6 * max(1.0, abs(fd))

    def test_dense_adjacency_gradient_matches_finite_differences(self):
        # four-node distilled-style graph, perturbing every adjacency entry
        rng = np.random.default_rng(8)
        p = small_params(3, 3, 2, seed=4)
        x = rng.standard_normal((4, 3))
        adj = rng.random((4, 4))
        adj = (adj + adj.T) / 2
        np.fill_diagonal(adj, 0.0)
        y = rng.integers(0, 2, 4)
        mask = np.ones(4, bool)
        trace = forward(p, adj, x)
        back = backward(trace, loss_ce_grad(trace.logits, y, mask), want_input_grads=True)
        eps = 1e-6
        for i in range(4):
            for j in range(4):
                orig = adj[i, j]
                adj[i, j] = orig + eps
                lp = loss_ce(forward(p, adj, x).logits, y, mask)
                adj[i, j] = orig - eps
                lm = loss_ce(forward(p, adj, x).logits, y, mask)
                adj[i, j] = orig
                fd = (lp - lm) / (2 * eps)
                assert back.d_adjacency[i, j] == pytest.approx(fd, abs=1e-7)

    def test_property_fd_agreement_over_20_seeds(self):
        from fedgkd.acceptance import check_gradients

        worst = max(check_gradients(seed) for seed in range(20))
        assert worst < 1e-4


class TestFlattenRoundTrip:
    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_flatten_unflatten_exact(self, seed):
        rng = np.random.default_rng(seed)
        dims = rng.integers(1, 7, size=3)
        p = init_params(int(dims[0]), int(dims[1]), int(dims[2]), seed=seed)
        flat = p.flatten()
        back = ModelParams.from_flat(flat, like=p)
        for a, b in zip(p.arrays(), back.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_wrong_length_rejected(self):
        p = small_params()
        with pytest.raises(ValueError, match="entries"):
            ModelParams.from_flat(np.zeros(3), like=p)


class TestAdam:
    def test_zero_gradient_zero_decay_leaves_params_unchanged(self):
        p = small_params(seed=6)
        state = init_adam(p, lr=0.1, weight_decay=0.0)
        zero = ModelParams(*(np.zeros_like(a) for a in p.arrays()))
        new = adam_step(state, p, zero)
        for a, b in zip(p.arrays(), new.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_first_step_is_normalized_gradient_direction(self):
        # after bias correction the first update is -lr * g / (|g| + eps)
        value = np.array([1.0, -2.0, 0.5])
        grad = np.array([0.3, -0.1, 2.0])
        m, v = np.zeros(3), np.zeros(3)
        new = adam_array_step(value, grad, m, v, step=1, lr=0.05)
        expected = value - 0.05 * grad / (np.abs(grad) + 1e-8)
        np.testing.assert_allclose(new, expected, atol=1e-12)

    def test_quadratic_bowl_loss_decreases(self):
        # scalar oracle: f(w) = sum w^2 optimized coordinate-wise
        w = np.array([3.0, -2.0, 1.5])
        m, v = np.zeros(3), np.zeros(3)
        losses = [float((w**2).sum())]
        for step in range(1, 11):
            w = adam_array_step(w, 2 * w, m, v, step, lr=0.1)
            losses.append(float((w**2).sum()))
        assert all(b < a for a, b in zip(losses[1:], losses[2:]))
        assert losses[-1] < losses[0]

    def test_decoupled_weight_decay_shrinks_params(self):
        value = np.array([10.0])
        new = adam_array_step(value, np.zeros(1), np.zeros(1), np.zeros(1),
                              step=1, lr=0.1, weight_decay=0.5)
        assert new[0] == pytest.approx(10.0 - 0.1 * 0.5 * 10.0)

    def test_state_counts_steps(self):
        p = small_params()
        state: AdamState = init_adam(p, lr=0.01)
        grads = ModelParams(*(np.ones_like(a) for a in p.arrays()))
        adam_step(state, p, grads)
        adam_step(state, p, grads)
        assert state.step == 2


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        p = small_params(5, 7, 3, seed=12)
        path = tmp_path / "model.params"
        save_params(p, path)
        loaded = load_params(path)
        for a, b in zip(p.arrays(), loaded.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_corruption_detected(self, tmp_path):
        p = small_params()
        path = tmp_path / "model.params"
        save_params(p, path)
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="hash"):
            load_params(path)


def test_softmax_vjp_matches_finite_differences():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((3, 4))
    upstream = rng.standard_normal((3, 4))
    probs = softmax(logits)
    analytic = softmax_vjp(probs, upstream)
    eps = 1e-6
    for i in range(3):
        for j in range(4):
            orig = logits[i, j]
            logits[i, j] = orig + eps
            lp = float((softmax(logits) * upstream).sum())
            logits[i, j] = orig - eps
            lm = float((softmax(logits) * upstream).sum())
            logits[i, j] = orig
            assert analytic[i, j] == pytest.approx((lp - lm) / (2 * eps), abs=1e-6)
