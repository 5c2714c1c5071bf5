import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokenmoe.diffcore import grad_check_params, tsum
from tokenmoe.moe import (
    ExpertChoiceLayer,
    SoftMoELayer,
    TokenChoiceLayer,
    default_slot_count,
    expert_choice_assign,
    expert_choice_forward,
    moe_forward,
    softmoe_combine,
    softmoe_dispatch,
    softmoe_forward,
    token_choice_assign,
    token_choice_forward,
)


def np_softmax(z, axis):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmoe_reference(x, layer):
    """Straight-line SoftMoE written from the formulas, one expert at a time."""
    logits = x @ layer.phi.data
    d = np_softmax(logits, 0)
    c = np_softmax(logits, 1)
    slots = d.T @ x
    outs = []
    for e, ex in enumerate(layer.experts):
        s = slots[e * layer.p : (e + 1) * layer.p]
        h = np.maximum(s @ ex.W1.data + ex.b1.data, 0.0)
        outs.append(h @ ex.W2.data + ex.b2.data)
    return c @ np.vstack(outs)


def make_identity_experts(layer):
    for ex in layer.experts:
        d = ex.d_tok
        ex.W1.data[...] = np.eye(d, ex.d_hidden)
        ex.b1.data[...] = 0.0
        ex.W2.data[...] = np.eye(ex.d_hidden, d)
        ex.b2.data[...] = 0.0


class TestSoftMoE:
    def test_dispatch_uniform_when_phi_zero(self):
        x = np.random.default_rng(0).standard_normal((5, 3))
        d, slots = softmoe_dispatch(x, np.zeros((3, 4)))
        np.testing.assert_allclose(d.data, 0.2, atol=1e-15)
        np.testing.assert_allclose(slots.data, np.tile(x.mean(axis=0), (4, 1)), atol=1e-14)

    def test_dispatch_hand_example(self):
        d, slots = softmoe_dispatch(np.array([[0.0], [1.0]]), np.array([[1.0]]))
        e = math.e
        np.testing.assert_allclose(d.data[:, 0], [1 / (1 + e), e / (1 + e)], atol=1e-12)
        assert abs(slots.data[0, 0] - e / (1 + e)) <= 1e-12
        assert abs(slots.data[0, 0] - 0.7311) <= 1e-4

    def test_combine_single_slot(self):
        rng = np.random.default_rng(1)
        s = rng.standard_normal((1, 3))
        out = softmoe_combine(rng.standard_normal((4, 1)), s).data
        np.testing.assert_allclose(out, np.tile(s, (4, 1)), atol=1e-15)

    def test_combine_identical_slots(self):
        rng = np.random.default_rng(2)
        s = np.tile(rng.standard_normal(3), (6, 1))
        np.testing.assert_allclose(softmoe_combine(rng.standard_normal((4, 6)), s).data, s[:4], atol=1e-14)

    def test_combine_convex(self):
        rng = np.random.default_rng(3)
        s = rng.standard_normal((6, 3))
        out = softmoe_combine(rng.standard_normal((5, 6)) * 3, s).data
        assert np.all(out >= s.min(axis=0) - 1e-12) and np.all(out <= s.max(axis=0) + 1e-12)

    def test_single_identity_expert_gives_token_mean(self):
        x = np.random.default_rng(4).standard_normal((7, 3))
        layer = SoftMoELayer(3, 1, 1, 3, seed=0, activation="linear")
        layer.phi.data[...] = 0.0
        make_identity_experts(layer)
        out = softmoe_forward(x, layer).data
        np.testing.assert_allclose(out, np.tile(x.mean(axis=0), (7, 1)), atol=1e-14)

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(5)
        m, d = 16, 5
        layer = SoftMoELayer(d, 4, m // 4, 8, seed=3)
        x = rng.standard_normal((m, d))
        np.testing.assert_allclose(softmoe_forward(x, layer).data, softmoe_reference(x, layer), atol=1e-12)

    def test_batched_equals_per_sample(self):
        rng = np.random.default_rng(6)
        layer = SoftMoELayer(4, 2, 3, 6, seed=1)
        xs = rng.standard_normal((3, 6, 4))
        out = softmoe_forward(xs, layer).data
        for b in range(3):
            np.testing.assert_allclose(out[b], softmoe_forward(xs[b], layer).data, atol=1e-13)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            softmoe_forward(np.zeros((4, 3)), SoftMoELayer(5, 1, 1, 4))

    def test_grad(self):
        rng = np.random.default_rng(7)
        layer = SoftMoELayer(4, 2, 2, 5, seed=2)
        x = rng.standard_normal((6, 4))
        proj = rng.standard_normal((6, 4))
        err = grad_check_params(lambda: tsum(softmoe_forward(x, layer) * proj), list(layer.parameters().values()))
        assert err <= 1e-4

    def test_equal_experts_make_partition_irrelevant(self):
        # with identical experts, n experts of p slots equal one expert of n*p slots
        rng = np.random.default_rng(8)
        x = rng.standard_normal((8, 3))
        many = SoftMoELayer(3, 4, 2, 5, seed=0)
        one = SoftMoELayer(3, 1, 8, 5, seed=0)
        one.phi.data[...] = many.phi.data
        for ex in many.experts:
            ex.load_from(one.experts[0])
        np.testing.assert_allclose(softmoe_forward(x, many).data, softmoe_forward(x, one).data, atol=1e-13)


class TestSlotCount:
    def test_examples(self):
        assert default_slot_count(36, 4) == 9
        assert default_slot_count(36, 4, "tokens") == 36
        assert default_slot_count(36, 1, slot_fraction=0.1) == 3
        assert default_slot_count(3, 8) == 1
        assert default_slot_count(5, 1, slot_fraction=0.1) == 1


def brute_expert_choice(logits, p):
    m, n = logits.shape
    out = []
    for e in range(n):
        # smallest lexicographic set among those with maximal sorted values
        best = max(itertools.combinations(range(m), p),
                   key=lambda c: (sorted((logits[i, e] for i in c), reverse=True), [-i for i in c]))
        out.append(sorted(best))
    return out


def brute_token_choice(w, k, p):
    """Simulate the assignment rule directly: ranked preferences, then first-come by weight."""
    m, n = w.shape
    prefs = {i: sorted(range(n), key=lambda e: (-w[i, e], e))[:k] for i in range(m)}
    kept = {}
    for e in range(n):
        cands = sorted((i for i in range(m) if e in prefs[i]), key=lambda i: (-w[i, e], i))
        kept[e] = set(cands[:p])
    dropped = {i for i in range(m) if not any(i in kept[e] for e in range(n))}
    return kept, dropped


class TestExpertChoice:
    def test_hand_example(self):
        idx = expert_choice_assign(np.array([[2.0, 0.0], [1.0, 0.0], [0.0, 3.0]]), 1)
        assert idx.tolist() == [[0], [2]]

    def test_forward_zero_row_for_unselected(self):
        layer = ExpertChoiceLayer(2, 2, 1, 4, seed=0)
        layer.gate.data[...] = np.eye(2)
        x = np.array([[2.0, 0.0], [1.0, 0.0], [0.0, 3.0]])
        out = expert_choice_forward(x, layer).data
        np.testing.assert_array_equal(out[1], 0.0)
        assert np.any(out[0] != 0.0) or np.any(out[2] != 0.0)

    def test_single_expert_all_tokens(self):
        rng = np.random.default_rng(0)
        layer = ExpertChoiceLayer(3, 1, 5, 4, seed=1)
        x = rng.standard_normal((5, 3))
        ex = layer.experts[0]
        ref = np.maximum(x @ ex.W1.data + ex.b1.data, 0) @ ex.W2.data + ex.b2.data
        np.testing.assert_allclose(expert_choice_forward(x, layer).data, ref, atol=1e-13)

    def test_p_exceeding_m_rejected(self):
        with pytest.raises(ValueError):
            expert_choice_forward(np.zeros((2, 3)), ExpertChoiceLayer(3, 1, 3, 4))

    @settings(max_examples=80, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 4), st.data())
    def test_against_brute_force(self, m, n, data):
        p = data.draw(st.integers(1, m))
        vals = data.draw(st.lists(st.integers(-2, 2), min_size=m * n, max_size=m * n))
        logits = np.array(vals, dtype=float).reshape(m, n)
        idx = expert_choice_assign(logits, p)
        assert idx.shape == (n, p)
        assert [sorted(r) for r in idx.tolist()] == brute_expert_choice(logits, p)

    def test_grad(self):
        rng = np.random.default_rng(2)
        layer = ExpertChoiceLayer(3, 2, 2, 4, seed=3)
        x = rng.standard_normal((5, 3))
        proj = rng.standard_normal((5, 3))
        err = grad_check_params(lambda: tsum(expert_choice_forward(x, layer) * proj),
                                list(layer.parameters().values()), eps=1e-6)
        assert err <= 1e-4


class TestTokenChoice:
    def test_unlimited_capacity_no_drops(self):
        rng = np.random.default_rng(0)
        layer = TokenChoiceLayer(3, 2, 4, 1, 4, seed=0)
        x = rng.standard_normal((4, 3))
        g = np_softmax(x @ layer.gate.data, 1)
        ref = np.zeros_like(x)
        for i in range(4):
            e = int(np.argmax(g[i]))
            ex = layer.experts[e]
            ref[i] = g[i, e] * (np.maximum(x[i] @ ex.W1.data + ex.b1.data, 0) @ ex.W2.data + ex.b2.data)
        np.testing.assert_allclose(token_choice_forward(x, layer).data, ref, atol=1e-13)

    def test_capacity_drops_lowest_weight(self):
        w = np.array([[0.9, 0.1], [0.6, 0.4], [0.8, 0.2]])
        idx, valid = token_choice_assign(w, 1, 2)
        assert sorted(idx[0][valid[0]].tolist()) == [0, 2]
        assert not valid[1].any()

    def test_k_above_n_rejected(self):
        with pytest.raises(ValueError):
            TokenChoiceLayer(3, 2, 2, 3, 4)
        with pytest.raises(ValueError):
            token_choice_assign(np.ones((3, 2)) / 2, 3, 1)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(1, 10), st.integers(1, 4), st.data())
    def test_against_brute_force(self, m, n, data):
        k = data.draw(st.integers(1, n))
        p = data.draw(st.integers(1, m))
        vals = data.draw(st.lists(st.integers(0, 4), min_size=m * n, max_size=m * n))
        w = np.array(vals, dtype=float).reshape(m, n) + 1.0
        w /= w.sum(axis=1, keepdims=True)
        idx, valid = token_choice_assign(w, k, p)
        kept, dropped = brute_token_choice(w, k, p)
        for e in range(n):
            assert set(idx[e][valid[e]].tolist()) == kept[e]
            assert valid[e].sum() <= p
        got_dropped = {i for i in range(m) if not any(i in idx[e][valid[e]] for e in range(n))}
        assert got_dropped == dropped

    def test_grad(self):
        rng = np.random.default_rng(3)
        layer = TokenChoiceLayer(3, 3, 2, 2, 4, seed=4)
        x = rng.standard_normal((5, 3))
        proj = rng.standard_normal((5, 3))
        err = grad_check_params(lambda: tsum(token_choice_forward(x, layer) * proj),
                                list(layer.parameters().values()), eps=1e-6)
        assert err <= 1e-4


@pytest.mark.parametrize("make", [
    lambda: SoftMoELayer(4, 3, 2, 5),
    lambda: ExpertChoiceLayer(4, 3, 2, 5),
    lambda: TokenChoiceLayer(4, 3, 2, 2, 5),
])
def test_shape_preserved(make):
    layer = make()
    x = np.random.default_rng(0).standard_normal((2, 6, 4))
    assert moe_forward(x, layer).shape == x.shape

