import math

import numpy as np
import pytest

from midisent import tensor as T
from midisent.errors import CheckpointError, DimensionError, LabelError
from midisent.model import (CategoricalQ, DisentangleModel, GaussianQ, ModelConfig, categorical_logprob,
                            frozen, gaussian_logprob, load_checkpoint, load_model, save_model, stats_pool)

from conftest import identity_gaussian_q, set_params

CFG = ModelConfig(feat_dim=4, frames=6, embed_dim=5, num_speakers=7, num_devices=3, enc_hidden=9, var_hidden=6)


def feats(b, seed=0, cfg=CFG):
    return np.random.default_rng(seed).standard_normal((b, cfg.feat_dim, cfg.frames))


class TestEncoder:
    def test_constant_over_time_pooling(self):
        col = np.array([1.0, -2.0, 0.5, 3.0])
        X = np.repeat(col[None, :, None], 6, axis=2)
        pooled = stats_pool(T.Tensor(X)).data[0]
        np.testing.assert_array_equal(pooled[:4], col)
        np.testing.assert_array_equal(pooled[4:], np.zeros(4))

    def test_pooling_matches_numpy(self):
        X = feats(3)
        pooled = stats_pool(T.Tensor(X)).data
        np.testing.assert_allclose(pooled, np.concatenate([X.mean(axis=2), X.std(axis=2)], axis=1), rtol=1e-13)

    def test_batch_shape(self):
        m = DisentangleModel(CFG)
        assert m.encoder(feats(5), training=True).shape == (5, 5)
        assert m.encoder(feats(1)[0], training=False).shape == (5,)

    def test_wrong_feature_dim(self):
        m = DisentangleModel(CFG)
        with pytest.raises(DimensionError):
            m.encoder(np.zeros((2, 3, 6)), training=True)

    def test_encoder_gradient(self):
        m = DisentangleModel(CFG, seed=3)
        X = T.Tensor(feats(4, seed=2))
        proj = T.Tensor(np.random.default_rng(5).standard_normal((4, 5)))
        f = lambda ps: (m.encoder(ps[0], training=True) * proj).sum()
        Xp = T.parameter(X.data)
        named = dict(m.encoder.named_parameters())
        # fc1.b feeds batchnorm, so its gradient is exactly zero on units active for every row;
        # relative error there only measures roundoff and is checked absolutely below
        others = [t for n, t in named.items() if n != "fc1.b"]
        assert T.finite_diff_check(f, [Xp] + others) < 1e-4
        b = named["fc1.b"]
        T.backward(f([Xp]))
        analytic = b.grad.copy()
        for i in range(b.shape[0]):
            b.data[i] += 1e-5
            fp = f([Xp]).item()
            b.data[i] -= 2e-5
            fm = f([Xp]).item()
            b.data[i] += 1e-5
            assert abs((fp - fm) / 2e-5 - analytic[i]) < 1e-8 * max(1.0, abs(analytic[i]))


class TestDecoupler:
    def test_shapes_and_distinct_branches(self):
        m = DisentangleModel(CFG)
        xs, xd = m.embed(feats(6), training=True)
        assert xs.shape == xd.shape == (6, 5)
        assert not np.allclose(xs.data, xd.data)

    def test_branch_isolation(self):
        m = DisentangleModel(CFG)
        X = feats(6)
        xs0, xd0 = m.embed(X, training=False)
        m.decoupler.speaker.fc.params["W"].data += 0.3
        xs1, xd1 = m.embed(X, training=False)
        assert not np.array_equal(xs0.data, xs1.data)
        np.testing.assert_array_equal(xd0.data, xd1.data)

    def test_eval_deterministic(self):
        m = DisentangleModel(CFG)
        X = feats(4)
        a = m.embed(X, training=False)
        b = m.embed(X, training=False)
        assert a[0].data.tobytes() == b[0].data.tobytes()
        assert a[1].data.tobytes() == b[1].data.tobytes()


class TestGaussianLogprob:
    def test_standard_normal_at_zero(self):
        q = identity_gaussian_q()
        val = gaussian_logprob(q, [0.0], [0.0]).item()
        assert val == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
        assert val == pytest.approx(-0.9189385332046727, abs=1e-15)

    def test_factorised_sum(self):
        q = GaussianQ(3, 5, np.random.default_rng(0))
        xs, xd = np.random.default_rng(1).standard_normal((2, 3))
        mu, logvar = (t.data for t in q(T.Tensor(xs[None])))
        var = np.exp(logvar[0])
        per_dim = [-0.5 * math.log(2 * math.pi * v) - (d - m) ** 2 / (2 * v) for d, m, v in zip(xd, mu[0], var)]
        assert gaussian_logprob(q, xs, xd).item() == pytest.approx(sum(per_dim), abs=1e-12)

    def test_mean_is_maximum(self):
        q = GaussianQ(2, 4, np.random.default_rng(0))
        xs = np.array([0.3, -0.7])
        mu, logvar = (t.data[0] for t in q(T.Tensor(xs[None])))
        at_mu = gaussian_logprob(q, xs, mu).item()
        assert at_mu == pytest.approx(-0.5 * np.sum(np.log(2 * np.pi * np.exp(logvar))), abs=1e-12)
        prev = at_mu
        for r in (0.1, 0.5, 1.0, 3.0):
            cur = gaussian_logprob(q, xs, mu + r).item()
            assert cur < prev
            prev = cur

    def test_logvar_clamped(self):
        q = GaussianQ(2, 4, np.random.default_rng(0))
        for scale in (1e3, -1e3):
            _, logvar = q(T.Tensor(np.full((3, 2), scale)))
            assert logvar.data.min() >= -10.0 and logvar.data.max() <= 10.0


class TestCategoricalLogprob:
    def test_uniform(self):
        q = CategoricalQ(2, 3, 5, np.random.default_rng(0))
        set_params(q, **{"fc2.W": np.zeros((5, 3)), "fc2.b": np.zeros(5)})
        assert categorical_logprob(q, [0.4, 1.0], 2).item() == pytest.approx(-math.log(5), abs=1e-15)

    def test_confident_head(self):
        q = CategoricalQ(1, 1, 2, np.random.default_rng(0))
        set_params(q, **{"fc1.W": [[0.0]], "fc1.b": [1.0], "fc2.W": [[10.0], [-10.0]], "fc2.b": [0.0, 0.0]})
        # log sigmoid(20) = -log(1 + e^-20)
        assert categorical_logprob(q, [0.0], 0).item() == pytest.approx(-math.log1p(math.exp(-20)), rel=1e-12)
        assert categorical_logprob(q, [0.0], 0).item() == pytest.approx(-2.0611536e-9, rel=1e-7)

    def test_non_positive(self, rng):
        q = CategoricalQ(3, 4, 6, rng)
        vals = categorical_logprob(q, rng.standard_normal((50, 3)) * 10, rng.integers(0, 6, 50)).data
        assert np.all(vals <= 0)

    def test_label_out_of_range(self):
        q = CategoricalQ(2, 3, 4, np.random.default_rng(0))
        with pytest.raises(LabelError):
            categorical_logprob(q, [0.0, 0.0], 4)
        with pytest.raises(LabelError):
            categorical_logprob(q, [0.0, 0.0], -1)


class TestGroups:
    def test_disjoint(self):
        m = DisentangleModel(CFG)
        theta = {id(t) for t in m.theta()}
        phis = [{id(t) for t in m.phi(i)} for i in (1, 2, 3)]
        assert all(not theta & p for p in phis)
        assert not phis[0] & phis[1] and not phis[1] & phis[2] and not phis[0] & phis[2]

    def test_frozen_blocks_gradient(self):
        m = DisentangleModel(CFG)
        xs = T.parameter(np.random.default_rng(0).standard_normal((4, 5)))
        with frozen(m.q1):
            loss = gaussian_logprob(m.q1, xs, T.Tensor(np.ones((4, 5)))).sum()
        m.q1.zero_grad()
        T.backward(loss)
        assert all(p.grad is None for p in m.q1.parameters())
        assert xs.grad is not None and np.abs(xs.grad).sum() > 0

    def test_frozen_restores_flag(self):
        m = DisentangleModel(CFG)
        with frozen(m.q2):
            inside = m.q2.fc1.p("W")
            assert inside is not m.q2.fc1.params["W"] and not inside.requires_grad
        assert m.q2.fc1.p("W") is m.q2.fc1.params["W"]


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = DisentangleModel(CFG, seed=4)
        m.embed(feats(6), training=True)  # moves the running statistics
        save_model(tmp_path / "m.ckpt", m, meta={"note": "x"})
        m2, header = load_model(tmp_path / "m.ckpt", seed=99)
        assert header["meta"] == {"note": "x"}
        assert header["config"] == CFG.to_dict()
        for (n1, a), (n2, b) in zip(sorted(m.state_arrays().items()), sorted(m2.state_arrays().items())):
            assert n1 == n2 and a.tobytes() == b.tobytes()

    def test_byte_identical_resave(self, tmp_path):
        m = DisentangleModel(CFG, seed=1)
        save_model(tmp_path / "a.ckpt", m)
        m2, _ = load_model(tmp_path / "a.ckpt")
        save_model(tmp_path / "b.ckpt", m2)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_partial_groups(self, tmp_path):
        m = DisentangleModel(CFG)
        save_model(tmp_path / "enc.ckpt", m, groups=["encoder"])
        header, arrays = load_checkpoint(tmp_path / "enc.ckpt")
        assert header["groups"] == ["encoder"]
        assert all(k.startswith("encoder.") for k in arrays)

    def test_corrupt(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"nope\n")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
        m = DisentangleModel(CFG)
        save_model(tmp_path / "t.ckpt", m)
        raw = (tmp_path / "t.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")
