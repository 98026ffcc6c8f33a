import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.spatial.distance import jensenshannon

from fusionmoe import tensor as T
from fusionmoe.gradcheck import max_relative_error
from fusionmoe.interaction import (DegenerateInputError, InteractionGate,
                                   InteractionThresholds, balance_loss,
                                   interaction_label, interaction_loss,
                                   js_divergence, router_z_loss,
                                   semantic_alignment)
from fusionmoe.tensor import Tensor

LN2 = np.log(2.0)


def unit(v):
    return v / np.linalg.norm(v)


class TestJsDivergence:
    def test_identical_distributions(self):
        assert js_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0

    def test_disjoint_support_reaches_ln2(self):
        assert_allclose(js_divergence([1.0, 0.0], [0.0, 1.0]), LN2, rtol=1e-12)

    def test_known_value(self):
        # direct evaluation: M=(0.5,0.5), both KL terms equal
        p, q = np.array([0.9, 0.1]), np.array([0.1, 0.9])
        expected = 0.9 * np.log(1.8) + 0.1 * np.log(0.2)
        got = js_divergence(p, q)
        assert_allclose(got, expected, atol=1e-12)
        assert abs(got - 0.368) < 1e-3

    def test_matches_scipy(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            p = rng.dirichlet(np.ones(2))
            q = rng.dirichlet(np.ones(2))
            ours = js_divergence(p, q)
            reference = jensenshannon(p, q, base=np.e) ** 2
            assert_allclose(ours, reference, atol=1e-12)

    def test_invalid_distribution_rejected(self):
        with pytest.raises(DegenerateInputError):
            js_divergence([0.5, 0.6], [0.5, 0.5])
        with pytest.raises(DegenerateInputError):
            js_divergence([-0.1, 1.1], [0.5, 0.5])

    @given(st.floats(1e-6, 1.0 - 1e-6), st.floats(1e-6, 1.0 - 1e-6))
    @settings(max_examples=300, deadline=None)
    def test_symmetric_nonnegative_bounded(self, a, b):
        p, q = [a, 1.0 - a], [b, 1.0 - b]
        d_pq = js_divergence(p, q)
        d_qp = js_divergence(q, p)
        assert_allclose(d_pq, d_qp, atol=1e-12)
        assert -1e-15 <= d_pq <= LN2 + 1e-12

    def test_zero_iff_equal(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            p = rng.dirichlet(np.ones(2))
            assert js_divergence(p, p) <= 1e-12
            q = rng.dirichlet(np.ones(2))
            if abs(p[0] - q[0]) > 1e-6:
                assert js_divergence(p, q) > 1e-12


class TestSemanticAlignment:
    def test_identical_vectors(self):
        v = np.array([1.0, 2.0, 3.0])
        assert_allclose(semantic_alignment(v, v), 1.0, rtol=1e-12)

    def test_orthogonal_vectors(self):
        assert_allclose(semantic_alignment([1.0, 0.0], [0.0, 1.0]), 0.0,
                        atol=1e-15)

    def test_constructed_pair_hits_target(self):
        rng = np.random.default_rng(5)
        v = unit(rng.standard_normal(16))
        w = rng.standard_normal(16)
        w = unit(w - (w @ v) * v)
        pair = 0.6 * v + np.sqrt(1 - 0.36) * w
        assert_allclose(semantic_alignment(v, pair), 0.6, atol=1e-6)

    def test_zero_vector_rejected(self):
        with pytest.raises(DegenerateInputError):
            semantic_alignment(np.zeros(4), np.ones(4))

    def test_positive_scale_invariance(self):
        rng = np.random.default_rng(6)
        a, b = rng.standard_normal(8), rng.standard_normal(8)
        base = semantic_alignment(a, b)
        for c in (1e-3, 0.5, 2.0, 1e4):
            assert_allclose(semantic_alignment(c * a, b), base, rtol=1e-12)


class TestInteractionLabel:
    thresholds = InteractionThresholds(theta_agr=0.1, theta_sem=0.2)

    def test_agree_aligned(self):
        v = unit(np.arange(1.0, 5.0))
        label = interaction_label([0.9, 0.1], [0.9, 0.1], v, v, self.thresholds)
        assert label.y_int == 3 and label.name == "AA"
        assert label.delta == 0.0
        assert_allclose(label.rho, 1.0, rtol=1e-12)

    def test_disagree_misaligned(self):
        label = interaction_label([1.0, 0.0], [0.0, 1.0],
                                  [1.0, 0.0], [0.0, 1.0], self.thresholds)
        assert label.y_int == 0 and label.name == "DM"

    def test_agree_misaligned(self):
        label = interaction_label([0.55, 0.45], [0.55, 0.45],
                                  [1.0, 0.0], [0.0, 1.0], self.thresholds)
        assert label.y_int == 2 and label.name == "AM"

    def test_disagree_aligned(self):
        v = unit(np.ones(4))
        label = interaction_label([0.95, 0.05], [0.05, 0.95], v, v, self.thresholds)
        assert label.y_int == 1 and label.name == "DA"

    def test_monotone_in_rho_and_delta(self):
        thr = self.thresholds
        rng = np.random.default_rng(7)
        v = unit(rng.standard_normal(8))
        w = unit(np.linalg.qr(rng.standard_normal((8, 2)))[0][:, 1])
        prev_bit = 1
        for rho in np.linspace(0.99, -0.99, 21):
            pair = rho * v + np.sqrt(1 - rho * rho) * w
            lab = interaction_label([0.9, 0.1], [0.9, 0.1], v, pair, thr)
            bit = lab.y_int & 1
            assert bit <= prev_bit  # decreasing rho never raises the bit
            prev_bit = bit

    def test_threshold_bounds_validated(self):
        with pytest.raises(ValueError):
            InteractionThresholds(theta_agr=1.0)  # above ln 2
        with pytest.raises(ValueError):
            InteractionThresholds(theta_sem=1.5)


class TestInteractionGate:
    def test_zero_gate_net_gives_uniform_dispatch(self):
        rng = np.random.default_rng(8)
        gate = InteractionGate(8, 4, rng, hidden=8)
        for p in gate.gate_net.parameters():
            p.data = np.zeros_like(p.data)
        probs, logits = gate(Tensor(rng.standard_normal((3, 8))),
                             Tensor(rng.standard_normal((3, 8))),
                             Tensor(rng.standard_normal((3, 4))),
                             Tensor(rng.standard_normal((3, 4))))
        assert_allclose(probs.data, 0.25, atol=1e-15)
        assert_allclose(logits.data, 0.0, atol=1e-15)

    def test_argmax_invariant_under_logit_shift(self):
        rng = np.random.default_rng(9)
        gate = InteractionGate(8, 4, rng)
        args = [Tensor(rng.standard_normal((5, 8))),
                Tensor(rng.standard_normal((5, 8))),
                Tensor(rng.standard_normal((5, 4))),
                Tensor(rng.standard_normal((5, 4)))]
        probs, logits = gate(*args)
        shifted = T.softmax(logits + 3.14, axis=-1)
        assert (np.argmax(shifted.data, axis=-1)
                == np.argmax(probs.data, axis=-1)).all()

    def test_single_sample_vectors(self):
        rng = np.random.default_rng(10)
        gate = InteractionGate(8, 4, rng)
        probs, logits = gate(Tensor(rng.standard_normal(8)),
                             Tensor(rng.standard_normal(8)),
                             Tensor(rng.standard_normal(4)),
                             Tensor(rng.standard_normal(4)))
        assert probs.shape == (4,) and logits.shape == (4,)
        assert_allclose(probs.data.sum(), 1.0, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(11)
        gate = InteractionGate(8, 8, rng, hidden=8)
        inputs = [Tensor(rng.uniform(-2, 2, size=(2, 8)), requires_grad=True)
                  for _ in range(4)]
        y_int = np.array([0, 3])
        def f():
            probs, logits = gate(*inputs)
            return interaction_loss(probs, logits, y_int, eta=0.01, gamma=0.1)
        err = max_relative_error(f, [*inputs, *gate.parameters()])
        assert err <= 1e-4


class TestRouterZLoss:
    def test_zero_logits(self):
        loss = router_z_loss(Tensor(np.zeros((1, 4))))
        assert_allclose(loss.item(), np.log(4.0) ** 2, rtol=1e-12)

    def test_analytic_zero(self):
        loss = router_z_loss(Tensor(np.full((1, 4), -np.log(4.0))))
        assert_allclose(loss.item(), 0.0, atol=1e-20)

    def test_matches_direct_formula_on_batch(self):
        rng = np.random.default_rng(12)
        logits = rng.uniform(-3, 3, size=(16, 4))
        loss = router_z_loss(Tensor(logits))
        expected = np.mean(np.log(np.exp(logits).sum(axis=1)) ** 2)
        assert_allclose(loss.item(), expected, atol=1e-10)


class TestBalanceLoss:
    def test_uniform_routing_gives_one(self):
        probs = Tensor(np.full((8, 4), 0.25))
        idx = np.arange(8) % 4
        assert_allclose(balance_loss(probs, idx).item(), 1.0, rtol=1e-12)

    def test_collapsed_routing_gives_expert_count(self):
        probs = np.zeros((6, 4))
        probs[:, 2] = 1.0
        loss = balance_loss(Tensor(probs), np.full(6, 2))
        assert_allclose(loss.item(), 4.0, rtol=1e-12)

    def test_paper_literal_mode(self):
        probs = Tensor(np.tile([0.4, 0.2, 0.2, 0.2], (10, 1)))
        loss = balance_loss(probs, np.zeros(10, dtype=int), mode="paper_literal")
        assert_allclose(loss.item(), 0.0075, rtol=1e-12)

    def test_st_moe_matches_direct_formula(self):
        rng = np.random.default_rng(13)
        probs = rng.dirichlet(np.ones(4), size=24)
        idx = np.argmax(probs, axis=1)
        loss = balance_loss(Tensor(probs), idx)
        frac = np.bincount(idx, minlength=4) / 24
        expected = 4.0 * float((probs.mean(axis=0) * frac).sum())
        assert_allclose(loss.item(), expected, atol=1e-10)

    def test_uniform_is_minimum_of_default_mode(self):
        rng = np.random.default_rng(14)
        uniform = balance_loss(Tensor(np.full((16, 4), 0.25)),
                               np.arange(16) % 4).item()
        for _ in range(50):
            probs = rng.dirichlet(np.ones(4) * 0.3, size=16)
            idx = np.argmax(probs, axis=1)
            assert balance_loss(Tensor(probs), idx).item() >= uniform - 1e-9

    def test_empty_batch_rejected(self):
        from fusionmoe.tensor import ShapeError
        with pytest.raises(ShapeError):
            balance_loss(Tensor(np.zeros((0, 4))), np.zeros(0, dtype=int))


class TestInteractionLoss:
    def test_reduces_to_cross_entropy_without_regularization(self):
        rng = np.random.default_rng(15)
        logits = Tensor(rng.uniform(-2, 2, size=(6, 4)))
        probs = T.softmax(logits, axis=-1)
        y_int = rng.integers(0, 4, size=6)
        loss = interaction_loss(probs, logits, y_int, eta=0.0, gamma=0.0)
        ce = T.cross_entropy_logits(logits, y_int)
        assert_allclose(loss.item(), ce.item(), atol=1e-12)

    def test_recomposes_from_parts(self):
        rng = np.random.default_rng(16)
        logits = Tensor(rng.uniform(-2, 2, size=(12, 4)))
        probs = T.softmax(logits, axis=-1)
        y_int = rng.integers(0, 4, size=12)
        idx = np.argmax(probs.data, axis=1)
        eta, gamma = 0.01, 0.1
        total = interaction_loss(probs, logits, y_int, eta, gamma)
        parts = (T.cross_entropy_logits(logits, y_int).item()
                 + eta * router_z_loss(logits).item()
                 + gamma * balance_loss(probs, idx).item())
        assert_allclose(total.item(), parts, atol=1e-10)
