import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from probembed.gaussian import LOG_VAR_MIN, GaussianEmbedding, MatchParams, SampleSet
from probembed.losses import (
    PairBatch,
    kl_regularizer,
    mil_from_logits,
    mil_loss,
    pairwise_logits,
    soft_contrastive_from_logits,
    soft_contrastive_loss,
    total_loss,
    triplet_hnm_batch_loss,
    triplet_hnm_loss,
    uniformity_loss,
    weighted_contrastive_from_logits,
)

import oracles
from gradutil import gradcheck, random_batch, random_params


def point(mu, id, modality="a"):
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    return GaussianEmbedding(id, modality, mu, np.full(mu.size, LOG_VAR_MIN))


class TestSoftContrastive:
    @pytest.mark.parametrize("label", [True, False])
    def test_half_probability_gives_ln2(self, label):
        # distance 1.5 with a=2, b=3 puts the logit at 0
        batch = PairBatch([(point([0.0, 0.0], "x"), point([1.5, 0.0], "y", "b"), label)], J=4)
        out = soft_contrastive_loss(batch, MatchParams(2.0, 3.0))
        assert out.value == pytest.approx(math.log(2), abs=1e-9)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        batch = random_batch(rng, B=4, D=8, J=3, seed=11)
        assert gradcheck(soft_contrastive_loss, batch, random_params(rng)) < 1e-4

    def test_clamping_is_counted(self):
        batch = PairBatch([(point([0.0], "x"), point([0.0], "y", "b"), False)], J=2)
        out = soft_contrastive_loss(batch, MatchParams(1.0, 40.0))
        assert out.clamp_count == 1
        assert out.value == pytest.approx(-math.log(1e-12))
        assert out.is_finite()

    def test_loss_vanishes_for_confident_correct_predictions(self):
        values = []
        for b in (2.0, 6.0, 12.0):
            batch = PairBatch([(point([0.0], "x"), point([0.0], "y", "b"), True)], J=2)
            values.append(soft_contrastive_loss(batch, MatchParams(1.0, b)).value)
        assert values[0] > values[1] > values[2]
        assert values[2] < 1e-5

    def test_invariant_to_pair_order(self):
        rng = np.random.default_rng(1)
        batch = random_batch(rng, B=4, D=5, J=3)
        params = random_params(rng)
        perm = rng.permutation(len(batch.pairs))
        shuffled = PairBatch([batch.pairs[i] for i in perm], batch.J, batch.seed)
        for fn in (soft_contrastive_loss, mil_loss):
            assert fn(batch, params).value == pytest.approx(fn(shuffled, params).value, abs=1e-12)

    def test_rejects_conflicting_ids(self):
        x1, x2 = point([0.0], "x"), point([1.0], "x")
        with pytest.raises(ValueError):
            PairBatch([(x1, point([0.0], "y", "b"), True), (x2, point([0.0], "z", "b"), True)]).embeddings()


class TestPairwiseLogits:
    def test_identical_samples(self):
        s = SampleSet("x", np.array([[0.3, 0.4]]))
        assert pairwise_logits(s, s, MatchParams(2.0, 1.5)).logits[0, 0] == 1.5

    def test_direct_value(self):
        za, zb = SampleSet("x", np.array([[0.0]])), SampleSet("y", np.array([[3.0]]))
        assert pairwise_logits(za, zb, MatchParams(1.0, 0.0)).logits[0, 0] == -3.0

    def test_linear_in_scale(self):
        rng = np.random.default_rng(2)
        za, zb = SampleSet("x", rng.normal(size=(3, 4))), SampleSet("y", rng.normal(size=(3, 4)))
        l1 = pairwise_logits(za, zb, MatchParams(1.5, 0.7)).logits
        l2 = pairwise_logits(za, zb, MatchParams(3.0, 0.7)).logits
        np.testing.assert_allclose(l2 - 0.7, 2 * (l1 - 0.7), rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pairwise_logits(SampleSet("x", np.zeros((2, 3))), SampleSet("y", np.zeros((2, 4))), MatchParams())


class TestGradientWeights:
    """dL/dl for one pair against the normalized-sigmoid weight expressions."""

    def test_positive_and_negative_forms(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            J = rng.integers(1, 6)
            logits = rng.normal(0, 3, size=(J, J))
            s = expit(logits)
            _, g_pos, _ = soft_contrastive_from_logits(logits, True)
            _, g_neg, _ = soft_contrastive_from_logits(logits, False)
            np.testing.assert_allclose(g_pos, -(s / s.sum()) * (1 - s), atol=1e-10, rtol=0)
            np.testing.assert_allclose(g_neg, ((1 - s) / (1 - s).sum()) * s, atol=1e-10, rtol=0)

    def test_closer_samples_get_larger_weight(self):
        rng = np.random.default_rng(4)
        logits = -rng.uniform(0.01, 6, size=(4, 4))
        _, g, _ = soft_contrastive_from_logits(logits, True)
        order = np.argsort(logits, axis=None)
        mags = np.abs(g).reshape(-1)[order]
        assert np.all(np.diff(mags) > 0)


class TestMIL:
    def test_single_sample_equals_soft(self):
        rng = np.random.default_rng(5)
        batch = random_batch(rng, B=3, D=4, J=1)
        params = random_params(rng)
        soft, mil = soft_contrastive_loss(batch, params), mil_loss(batch, params)
        assert soft.value == mil.value
        assert soft.a == mil.a and soft.b == mil.b
        for k in soft.mu:
            np.testing.assert_array_equal(soft.mu[k], mil.mu[k])
            np.testing.assert_array_equal(soft.log_var[k], mil.log_var[k])

    def test_best_of_four(self):
        logits = np.array([[-1.0, -2.0], [-3.0, -4.0]])
        value, grad, _ = mil_from_logits(logits, True)
        # enumerate candidates independently
        best = max(logits.reshape(-1))
        assert value == pytest.approx(-math.log(expit(best)), abs=1e-15)
        assert np.count_nonzero(grad) == 1 and grad[0, 0] != 0

    def test_negative_picks_farthest(self):
        logits = np.array([[-1.0, -2.0], [-3.0, -4.0]])
        value, grad, _ = mil_from_logits(logits, False)
        assert value == pytest.approx(-math.log(1 - expit(-4.0)), abs=1e-15)
        assert grad[1, 1] != 0 and np.count_nonzero(grad) == 1

    def test_tie_break_row_major(self):
        logits = np.array([[0.0, 2.0], [2.0, 1.0]])
        value, grad, _ = mil_from_logits(logits, True)
        assert grad[0, 1] != 0 and grad[1, 0] == 0
        swapped = np.array([[0.0, 2.0], [2.0, 1.0]])[::-1].copy()
        assert mil_from_logits(swapped, True)[0] == value

    def test_one_hot_weights_reproduce_mil(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            logits = rng.normal(0, 2, size=(5, 5))
            for label in (True, False):
                w = np.zeros_like(logits)
                idx = np.argmax(logits) if label else np.argmin(logits)
                w.reshape(-1)[idx] = 1.0
                v1, g1, _ = weighted_contrastive_from_logits(logits, label, w)
                v2, g2, _ = mil_from_logits(logits, label)
                assert v1 == pytest.approx(v2, abs=1e-12)
                np.testing.assert_allclose(g1, g2, atol=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        batch = random_batch(rng, B=3, D=5, J=3)
        assert gradcheck(mil_loss, batch, random_params(rng)) < 1e-4


class TestTriplet:
    def test_satisfied_margin_is_zero(self):
        anchor = point([1.0, 0.0], "a")
        pos = point([1.0, 0.1], "p", "b")
        negs = [point([0.0, 1.0], "n1", "b"), point([-1.0, 0.0], "n2", "b")]
        assert triplet_hnm_loss(anchor, pos, negs, 0.2).value == 0.0

    def test_hinge_arithmetic(self):
        # cosine sims: positive 0.5, negative 0.6
        anchor = point([1.0, 0.0], "a")
        pos = point([0.5, math.sqrt(0.75)], "p", "b")
        neg = point([0.6, -0.8], "n", "b")
        assert triplet_hnm_loss(anchor, pos, [neg], 0.2).value == pytest.approx(0.3, abs=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(8)
        checked = 0
        while checked < 5:
            embs = [GaussianEmbedding(f"e{i}", "a" if i == 0 else "b", rng.normal(size=6), np.zeros(6)) for i in range(5)]
            out = triplet_hnm_loss(embs[0], embs[1], embs[2:], 0.5)
            if out.value <= 1e-3:
                continue
            theta = np.concatenate([e.mu for e in embs])

            def f(th):
                es = [GaussianEmbedding(e.id, e.modality, th[i * 6 : (i + 1) * 6], np.zeros(6)) for i, e in enumerate(embs)]
                return triplet_hnm_loss(es[0], es[1], es[2:], 0.5).value

            numeric = oracles.central_difference(f, theta)
            analytic = np.concatenate([out.mu[e.id] for e in embs])
            assert oracles.max_relative_error(analytic, numeric) < 1e-4
            checked += 1

    def test_batch_version_matches_single_terms(self):
        rng = np.random.default_rng(9)
        labels = np.array([[1, 0, 1], [0, 1, 0], [1, 0, 1]], dtype=bool)
        batch = random_batch(rng, B=3, D=4, J=1, labels=labels)
        a = {e.id: e for e in batch.embeddings() if e.modality.value == "a"}
        b = {e.id: e for e in batch.embeddings() if e.modality.value == "b"}
        terms = []
        for x, y, m in batch.pairs:
            if not m:
                continue
            negs_b = [b[k] for k in b if not labels[int(x.id[1:]), int(k[1:])]]
            negs_a = [a[k] for k in a if not labels[int(k[1:]), int(y.id[1:])]]
            if negs_b:
                terms.append(triplet_hnm_loss(x, y, negs_b, 0.3).value)
            if negs_a:
                terms.append(triplet_hnm_loss(y, x, negs_a, 0.3).value)
        assert triplet_hnm_batch_loss(batch, 0.3).value == pytest.approx(np.mean(terms), abs=1e-12)

    def test_batch_gradients(self):
        rng = np.random.default_rng(10)
        batch = random_batch(rng, B=4, D=5, J=1)
        fn = lambda bt, params: triplet_hnm_batch_loss(bt, 0.8)
        assert gradcheck(fn, batch, MatchParams(), with_ab=False) < 1e-4

    def test_needs_negatives(self):
        with pytest.raises(ValueError):
            triplet_hnm_loss(point([1.0], "a"), point([1.0], "p"), [], 0.2)


class TestKLRegularizer:
    def test_standard_normal_is_zero(self):
        e = GaussianEmbedding("x", "a", np.zeros(3), np.zeros(3))
        assert kl_regularizer(e).value == 0.0

    def test_against_monte_carlo(self):
        e = GaussianEmbedding("x", "a", np.array([1.0, 0.0]), np.zeros(2))
        est, _ = oracles.kl_mc([1.0, 0.0], [1.0, 1.0], [0.0, 0.0], [1.0, 1.0], 10**6, np.random.default_rng(0))
        assert kl_regularizer(e).value == pytest.approx(0.5, abs=1e-12)
        assert abs(est - 0.5) < 0.01

    def test_gradients(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            mu, lv = rng.normal(size=4), rng.uniform(-2, 1, 4)
            out = kl_regularizer(GaussianEmbedding("x", "a", mu, lv))
            f = lambda th: kl_regularizer(GaussianEmbedding("x", "a", th[:4], th[4:])).value
            numeric = oracles.central_difference(f, np.concatenate([mu, lv]))
            analytic = np.concatenate([out.mu["x"], out.log_var["x"]])
            assert oracles.max_relative_error(analytic, numeric) < 1e-6


class TestUniformity:
    def test_single_vector(self):
        assert uniformity_loss([[0.6, 0.8]]).value == 1.0

    def test_antipodal_pair(self):
        assert uniformity_loss([[1.0, 0.0], [-1.0, 0.0]]).value == pytest.approx(2 + 2 * math.exp(-8), abs=1e-15)

    def test_separation_lowers_value(self):
        values = [
            uniformity_loss([[1.0, 0.0], [math.cos(t), math.sin(t)]]).value
            for t in np.linspace(0, math.pi, 7)
        ]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_requires_unit_vectors(self):
        with pytest.raises(ValueError):
            uniformity_loss([[1.0, 1.0]])

    def test_gradient_on_sphere_tangent(self):
        rng = np.random.default_rng(12)
        u = rng.normal(size=(6, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        grad = uniformity_loss(u).components["grad"]

        def f(flat):
            return float(np.sum(np.exp(-2 * np.sum((flat.reshape(6, 1, 3) - flat.reshape(1, 6, 3)) ** 2, axis=-1))))

        numeric = oracles.central_difference(f, u.reshape(-1))
        assert oracles.max_relative_error(grad.reshape(-1), numeric) < 1e-6


class TestTotalLoss:
    def test_zero_weights_equal_soft(self):
        rng = np.random.default_rng(13)
        batch, params = random_batch(rng), random_params(rng)
        assert total_loss(batch, params, 0.0, 0.0).value == soft_contrastive_loss(batch, params).value

    def test_additivity(self):
        rng = np.random.default_rng(14)
        batch, params = random_batch(rng), random_params(rng)
        embs = batch.embeddings()
        expected = soft_contrastive_loss(batch, params).value + np.mean([kl_regularizer(e).value for e in embs])
        assert total_loss(batch, params, 1.0, 0.0).value == pytest.approx(expected, abs=1e-12)

    def test_uniformity_part_uses_normalized_samples(self):
        from probembed.gaussian import sample_embeddings

        rng = np.random.default_rng(15)
        batch, params = random_batch(rng, B=2, D=3, J=2), random_params(rng)
        z = np.concatenate([sample_embeddings(e, 2, batch.seed).samples for e in batch.embeddings()])
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        out = total_loss(batch, params, 0.0, 1.0)
        assert out.components["uniformity"] == pytest.approx(uniformity_loss(z).value, abs=1e-12)

    @pytest.mark.parametrize("contrastive", ["soft", "mil"])
    def test_gradients(self, contrastive):
        rng = np.random.default_rng(16)
        batch = random_batch(rng, B=4, D=8, J=3, seed=3)
        fn = lambda bt, p: total_loss(bt, p, 0.3, 0.05, contrastive)
        assert gradcheck(fn, batch, random_params(rng)) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.floats(-8, 8), st.integers(1, 4))
def test_constant_logits_give_bernoulli_loss(logit, J):
    table = np.full((J, J), logit)
    assert soft_contrastive_from_logits(table, True)[0] == pytest.approx(-math.log(expit(logit)), rel=1e-9)
    assert soft_contrastive_from_logits(table, False)[0] == pytest.approx(-math.log(expit(-logit)), rel=1e-9)
