import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midisent import tensor as T
from midisent.errors import ConfigError, DegenerateBatchError
from midisent.mi import fit_gaussian_q
from midisent.model import CategoricalQ, DisentangleModel, ModelConfig, SpeakerHead, gaussian_logprob
from midisent.objectives import (OBJECTIVES, LossTerms, LossWeights, MarginConfig, aam_softmax_loss,
                                 angular_prototypical_loss, nll_categorical, nll_gaussian, speaker_cls_loss,
                                 total_loss, weighted_sum)
from midisent.training import compute_terms

from conftest import set_params


def _ce_on_cosines(emb, labels, W, s):
    """Independent reference: softmax cross-entropy over s * cosine logits."""
    e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    w = W / np.linalg.norm(W, axis=1, keepdims=True)
    z = s * e @ w.T
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


class TestAAM:
    def test_zero_margin_unit_scale_is_cross_entropy(self, rng):
        emb, W = rng.standard_normal((6, 4)), rng.standard_normal((5, 4))
        y = rng.integers(0, 5, 6)
        got = aam_softmax_loss(emb, y, W, s=1.0, m=0.0).item()
        assert got == pytest.approx(_ce_on_cosines(emb, y, W, 1.0), abs=1e-12)

    def test_zero_margin_scaled(self, rng):
        emb, W = rng.standard_normal((6, 4)), rng.standard_normal((5, 4))
        y = rng.integers(0, 5, 6)
        got = aam_softmax_loss(emb, y, W, s=30.0, m=0.0).item()
        assert got == pytest.approx(_ce_on_cosines(emb, y, W, 30.0), abs=1e-12)

    def test_aligned_with_target(self):
        W = np.eye(2)
        got = aam_softmax_loss(np.array([[1.0, 0.0]]), [0], W, s=30.0, m=0.2).item()
        expected = math.log1p(math.exp(-30.0 * math.cos(0.2)))
        assert got == pytest.approx(expected, rel=1e-9)
        assert got == pytest.approx(1.7e-13, rel=0.05)

    def test_aligned_with_other_class(self):
        W = np.eye(2)
        got = aam_softmax_loss(np.array([[0.0, 1.0]]), [0], W, s=30.0, m=0.2).item()
        expected = math.log1p(math.exp(30.0 * (1.0 - math.cos(math.pi / 2 + 0.2))))
        assert got == pytest.approx(expected, rel=1e-12)

    def test_margin_capped_at_pi(self):
        # target angle pi - 0.1 plus margin 0.2 is clamped to pi, cos = -1
        W = np.array([[1.0, 0.0], [0.0, 1.0]])
        emb = np.array([[math.cos(math.pi - 0.1), math.sin(math.pi - 0.1)]])
        got = aam_softmax_loss(emb, [0], W, s=2.0, m=0.2).item()
        other = 2.0 * math.sin(math.pi - 0.1)
        assert got == pytest.approx(math.log1p(math.exp(other + 2.0)), rel=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.01, 100.0))
    def test_embedding_scale_invariance(self, c):
        rng = np.random.default_rng(3)
        emb, W = rng.standard_normal((4, 3)), rng.standard_normal((6, 3))
        y = np.array([0, 5, 2, 2])
        assert aam_softmax_loss(emb * c, y, W).item() == pytest.approx(aam_softmax_loss(emb, y, W).item(), rel=1e-10)

    def test_gradient(self, rng):
        e, w = rng.standard_normal((5, 4)), rng.standard_normal((3, 4))
        # label each row with its least similar class: a confidently classified row has gradients
        # near 1e-7, below what central differences resolve against a loss of order 10
        cos = (e / np.linalg.norm(e, axis=1, keepdims=True)) @ (w / np.linalg.norm(w, axis=1, keepdims=True)).T
        y = cos.argmin(axis=1)
        emb, W = T.parameter(e), T.parameter(w)
        assert T.finite_diff_check(lambda ps: aam_softmax_loss(ps[0], y, ps[1], 30.0, 0.2), [emb, W]) < 1e-4


class TestAngularPrototypical:
    def test_two_speaker_fixture(self):
        a = np.eye(2)
        got = angular_prototypical_loss(a, a.copy(), T.Tensor([10.0]), T.Tensor([0.0])).item()
        assert got == pytest.approx(math.log1p(math.exp(-10.0)), rel=1e-12)
        assert got == pytest.approx(4.54e-5, rel=1e-3)

    def test_equal_cosines_give_log_n(self):
        a = np.ones((5, 3))
        got = angular_prototypical_loss(a, a, T.Tensor([7.0]), T.Tensor([1.0])).item()
        assert got == pytest.approx(math.log(5), abs=1e-12)

    def test_permutation_invariance(self, rng):
        a, b = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
        perm = rng.permutation(6)
        w, c = T.Tensor([9.0]), T.Tensor([-2.0])
        assert angular_prototypical_loss(a[perm], b[perm], w, c).item() == pytest.approx(
            angular_prototypical_loss(a, b, w, c).item(), abs=1e-12)

    def test_nonnegative(self, rng):
        for _ in range(20):
            a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
            assert angular_prototypical_loss(a, b, T.Tensor([5.0]), T.Tensor([0.3])).item() >= 0.0

    def test_scale_clamped_positive(self, rng):
        a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        neg = angular_prototypical_loss(a, b, T.Tensor([-4.0]), T.Tensor([0.0])).item()
        tiny = angular_prototypical_loss(a, b, T.Tensor([1e-6]), T.Tensor([0.0])).item()
        assert neg == tiny

    def test_single_speaker_rejected(self):
        with pytest.raises(DegenerateBatchError):
            angular_prototypical_loss(np.ones((1, 3)), np.ones((1, 3)), T.Tensor([1.0]), T.Tensor([0.0]))

    def test_gradient(self, rng):
        a, b = T.parameter(rng.standard_normal((4, 3))), T.parameter(rng.standard_normal((4, 3)))
        w, c = T.parameter([8.0]), T.parameter([0.5])
        f = lambda ps: angular_prototypical_loss(a, b, w, c)
        assert T.finite_diff_check(f, [a, b, w]) < 1e-4
        # the bias shifts every logit equally, so its gradient is structurally zero
        T.backward(f([]))
        assert abs(c.grad[0]) < 1e-12


class TestSpeakerClsLoss:
    def test_is_sum_of_parts(self, rng):
        head = SpeakerHead(5, 4, rng)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        y = np.array([4, 0, 2])
        mc = MarginConfig()
        aam = aam_softmax_loss(np.concatenate([a, b]), np.concatenate([y, y]), head.params["weight"], 30.0, 0.2)
        ap = angular_prototypical_loss(a, b, head.params["ap_scale"], head.params["ap_bias"])
        assert speaker_cls_loss(a, b, y, head, mc).item() == pytest.approx(aam.item() + ap.item(), abs=1e-12)

    def test_zero_when_parts_vanish(self):
        # one-hot embeddings on their class weights, huge AP scale: both parts underflow to 0
        head = SpeakerHead(2, 2, np.random.default_rng(0), ap_scale_init=1e4)
        head.params["weight"].data[...] = np.eye(2)
        a = np.eye(2)
        mc = MarginConfig(scale=1e4)
        assert speaker_cls_loss(a, a.copy(), [0, 1], head, mc).item() == 0.0

    def test_gradient(self, rng):
        head = SpeakerHead(4, 3, rng)
        a, b = T.parameter(rng.standard_normal((3, 3))), T.parameter(rng.standard_normal((3, 3)))
        y = np.array([3, 1, 0])
        params = [a, b] + head.parameters()
        assert T.finite_diff_check(lambda ps: speaker_cls_loss(ps[0], ps[1], y, head, MarginConfig()), params) < 1e-4


class TestNll:
    def test_single_pair(self, rng):
        q = CategoricalQ(3, 4, 5, rng)
        x = rng.standard_normal(3)
        logits = q(T.Tensor(x[None])).data[0]
        expected = -(logits[2] - np.log(np.exp(logits).sum()))
        assert nll_categorical(q, x[None], [2]).item() == pytest.approx(expected, abs=1e-12)

    def test_uniform_head_gives_log_c(self, rng):
        q = CategoricalQ(3, 4, 6, rng)
        set_params(q, **{"fc2.W": np.zeros((6, 4)), "fc2.b": np.zeros(6)})
        assert nll_categorical(q, rng.standard_normal((9, 3)), rng.integers(0, 6, 9)).item() == \
            pytest.approx(math.log(6), abs=1e-15)

    def test_inputs_detached(self, rng):
        q = CategoricalQ(3, 4, 2, rng)
        x = T.parameter(rng.standard_normal((4, 3)))
        T.backward(nll_categorical(q, x, [0, 1, 1, 0]))
        assert x.grad is None
        assert all(p.grad is not None for p in q.parameters())

    def test_fit_recovers_true_conditional(self):
        # y = 0.8 x + 0.5 eps: true log density averages -1/2 log(2 pi 0.25) - 1/2
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2048, 1))
        y = 0.8 * x + 0.5 * rng.standard_normal((2048, 1))
        q = fit_gaussian_q(x, y, steps=1500, lr=1e-2, hidden=16, seed=0)
        xt = rng.standard_normal((2048, 1))
        yt = 0.8 * xt + 0.5 * rng.standard_normal((2048, 1))
        fitted = gaussian_logprob(q, xt, yt).data
        true = -0.5 * np.log(2 * np.pi * 0.25) - (yt[:, 0] - 0.8 * xt[:, 0]) ** 2 / (2 * 0.25)
        assert abs(fitted.mean() - true.mean()) < 0.1

    def test_gaussian_nll_gradient(self, rng):
        from midisent.model import GaussianQ

        q = GaussianQ(2, 5, rng)
        xs, xd = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
        assert T.finite_diff_check(lambda ps: nll_gaussian(q, xs, xd), q.parameters()) < 1e-4

    def test_categorical_nll_gradient(self, rng):
        q = CategoricalQ(2, 5, 3, rng)
        x, y = rng.standard_normal((6, 2)), rng.integers(0, 3, 6)
        assert T.finite_diff_check(lambda ps: nll_categorical(q, x, y), q.parameters()) < 1e-4


class TestTotalLoss:
    def _terms(self, vals):
        return LossTerms(*(T.Tensor(v) for v in vals))

    def test_default_weights(self):
        vals = (1.3, 0.7, 0.21, -0.05, 0.33)
        got = total_loss(self._terms(vals), LossWeights()).item()
        assert got == pytest.approx(5 * 1.3 + 10 * 0.7 + 0.5 * 0.21 + 0.1 * -0.05 + 0.1 * 0.33, abs=1e-12)
        assert LossWeights().as_tuple() == (5.0, 10.0, 0.5, 0.1, 0.1)

    def test_selector_and_zero(self):
        vals = (1.3, 0.7, 0.21, -0.05, 0.33)
        assert total_loss(self._terms(vals), OBJECTIVES["cls_s"]).item() == 1.3
        assert total_loss(self._terms(vals), OBJECTIVES["embed_only"]).item() == 0.0

    def test_float_twin_bitwise(self, rng):
        for _ in range(20):
            vals = tuple(rng.standard_normal(5))
            w = LossWeights(*rng.uniform(0, 10, 5))
            assert total_loss(self._terms(vals), w).item() == weighted_sum(vals, w)

    @pytest.mark.parametrize("bad", [-0.1, float("nan"), float("inf")])
    def test_invalid_weight(self, bad):
        with pytest.raises(ConfigError):
            LossWeights(cls_s=bad)

    def test_presets(self):
        assert OBJECTIVES["cls_sd"].as_tuple() == (5.0, 10.0, 0.0, 0.0, 0.0)
        assert OBJECTIVES["cls_sd_m1"].as_tuple() == (5.0, 10.0, 0.5, 0.0, 0.0)
        assert OBJECTIVES["cls_sd_m23"].as_tuple() == (5.0, 10.0, 0.0, 0.1, 0.1)
        assert OBJECTIVES["full"] == LossWeights(5.0, 10.0, 0.5, 0.1, 0.1)


class TestGradientIsolation:
    def _setup(self):
        cfg = ModelConfig(feat_dim=3, frames=5, embed_dim=4, num_speakers=4, num_devices=2, enc_hidden=6,
                          var_hidden=5)
        m = DisentangleModel(cfg, seed=2)
        rng = np.random.default_rng(5)
        X = rng.standard_normal((6, 3, 5))
        ys = np.array([0, 1, 3, 0, 1, 3])
        yd = np.array([0, 1, 1, 0, 0, 1])
        return m, X, ys, yd

    def test_total_loss_leaves_phi_untouched(self):
        m, X, ys, yd = self._setup()
        xs, xd = m.embed(X, training=True)
        m.zero_grad()
        T.backward(total_loss(compute_terms(m, xs, xd, ys, yd, MarginConfig()), LossWeights()))
        assert all(p.grad is None for p in m.phi())
        assert any(p.grad is not None and np.abs(p.grad).sum() > 0 for p in m.encoder.parameters())

    def test_nll_leaves_theta_untouched(self):
        m, X, ys, yd = self._setup()
        xs, xd = m.embed(X, training=True)
        m.zero_grad()
        T.backward(nll_gaussian(m.q1, xs, xd) + nll_categorical(m.q2, xd, ys) + nll_categorical(m.q3, xs, yd))
        assert all(p.grad is None for p in m.theta())
        assert all(p.grad is not None for p in m.phi())

    def test_full_objective_gradient(self):
        m, X, ys, yd = self._setup()

        def f(ps):
            xs, xd = m.embed(X, training=True)
            return total_loss(compute_terms(m, xs, xd, ys, yd, MarginConfig()), LossWeights())

        assert T.finite_diff_check(f, m.decoupler.parameters() + m.device_head.parameters()) < 1e-4
