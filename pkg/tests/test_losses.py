import numpy as np
import pytest

import oracles
from splatguide import DomainError
from splatguide.losses import (FeatureExtractor, LossWeights, evaluate, feature_losses_and_grad, gram, noise_loss,
                               noise_loss_grad, perceptual_loss, rec_loss, rec_loss_grad, style_loss, total_loss,
                               tv_loss, tv_loss_grad)


def batch(rng, b=2, c=3, n=8):
    m = (rng.uniform(size=(b, 1, n, n)) < 0.3).astype(np.float64)
    m[:, 0, 0, 0] = 1
    return rng.uniform(size=(b, c, n, n)), rng.uniform(size=(b, c, n, n)), m


def numeric_grad(f, x, idx, h=1e-6):
    xp, xm = x.copy(), x.copy()
    xp[idx] += h
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)


class TestMasked:
    def test_noise_basics(self, rng):
        a, _, m = batch(rng, b=1, c=1)
        assert noise_loss(a, a, m) == 0
        k = int(m.sum())
        b = a.copy()
        b[0, 0, 0, 0] += 1
        assert noise_loss(b, a, m) == pytest.approx(1 / k)

    def test_noise_oracle(self, rng):
        a, b, m = batch(rng)
        want = np.mean([oracles.masked_mean((a[i] - b[i]) ** 2, m[i, 0]) for i in range(2)])
        assert noise_loss(a, b, m) == pytest.approx(want, abs=1e-6)

    def test_rec_oracle_and_offset(self, rng):
        a, b, m = batch(rng)
        want = np.mean([oracles.masked_mean(np.abs(a[i] - b[i]), m[i, 0]) for i in range(2)])
        assert rec_loss(a, b, m) == pytest.approx(want, abs=1e-6)
        assert rec_loss(b + 0.5 * m, b, m) == pytest.approx(0.5)
        assert rec_loss(b, b, m) == 0

    def test_no_missing(self, rng):
        a, b, _ = batch(rng)
        with pytest.raises(DomainError):
            noise_loss(a, b, np.zeros((2, 1, 8, 8)))
        with pytest.raises(DomainError):
            rec_loss(a, b, np.zeros((2, 1, 8, 8)))

    def test_gradients(self, rng):
        a, b, m = batch(rng, b=1, c=2, n=4)
        for idx in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 0, 3, 1)]:
            assert noise_loss_grad(a, b, m)[idx] == pytest.approx(
                numeric_grad(lambda x: noise_loss(x, b, m), a, idx), abs=1e-7)
            assert rec_loss_grad(a, b, m)[idx] == pytest.approx(
                numeric_grad(lambda x: rec_loss(x, b, m), a, idx), abs=1e-7)


class TestTV:
    def test_constant_and_halves(self):
        assert tv_loss(np.full((1, 2, 5, 5), 0.3)) == 0
        img = np.zeros((1, 1, 4, 6))
        img[..., 3:] = 1
        assert tv_loss(img) == pytest.approx(1 / 6)

    def test_oracle_and_grad(self, rng):
        img = rng.uniform(size=(2, 3, 5, 6))
        assert tv_loss(img) == pytest.approx(np.mean([oracles.tv(img[i]) for i in range(2)]), abs=1e-6)
        for idx in [(0, 0, 0, 0), (1, 2, 4, 5), (0, 1, 2, 3)]:
            assert tv_loss_grad(img)[idx] == pytest.approx(numeric_grad(tv_loss, img, idx), abs=1e-7)


class TestGram:
    def test_constant_single_channel(self):
        np.testing.assert_allclose(gram(np.ones((1, 4, 5))), [[1.0]])

    def test_disjoint_supports(self):
        f = np.zeros((2, 2, 2))
        f[0, 0] = 1
        f[1, 1] = 1
        g = gram(f)
        assert g[0, 1] == 0 and g[1, 0] == 0

    def test_oracle(self, rng):
        f = rng.normal(size=(4, 3, 5))
        g = gram(f)
        np.testing.assert_allclose(g, oracles.gram(f), atol=1e-5)
        np.testing.assert_allclose(g, g.T)
        assert np.linalg.eigvalsh(g).min() > -1e-12
        np.testing.assert_allclose(gram(f[None])[0], g)


class TestFeatureLosses:
    def test_extractor_fixed(self):
        a, b = FeatureExtractor(), FeatureExtractor()
        for (wa, ba), (wb, bb) in zip(a.weights, b.weights):
            assert wa.tobytes() == wb.tobytes() and ba.tobytes() == bb.tobytes()
        with pytest.raises(ValueError):
            a.weights[0][0][0, 0, 0, 0] = 1.0

    def test_identity_symmetry_oracle(self, rng):
        fx = FeatureExtractor()
        x, y = rng.uniform(size=(2, 1, 3, 8, 8))
        assert perceptual_loss(x, x, fx) == 0 and style_loss(x, x, fx) == 0
        assert perceptual_loss(x, y, fx) == perceptual_loss(y, x, fx)
        assert style_loss(x, y, fx) == style_loss(y, x, fx)
        fa, fb = oracles.features(x, fx.weights), oracles.features(y, fx.weights)
        want_p = sum(np.mean(np.abs(a - b)) for a, b in zip(fa, fb))
        want_s = sum(np.mean(np.abs(oracles.gram(a[0]) - oracles.gram(b[0]))) for a, b in zip(fa, fb))
        assert perceptual_loss(x, y, fx) == pytest.approx(want_p, abs=1e-5)
        assert style_loss(x, y, fx) == pytest.approx(want_s, abs=1e-5)

    def test_supplied_weights(self, rng):
        w = [(rng.normal(size=(2, 1, 3, 3)), np.zeros(2))]
        fx = FeatureExtractor(1, weights=w)
        assert fx.depth == 1 and len(fx.features(rng.uniform(size=(1, 1, 4, 4)))) == 1

    def test_gradients(self, rng):
        fx = FeatureExtractor()
        x, y = rng.uniform(size=(2, 1, 3, 8, 8))
        _, _, gp, gs = feature_losses_and_grad(x, y, fx)
        for idx in [(0, 0, 1, 1), (0, 2, 7, 0), (0, 1, 4, 5)]:
            assert gp[idx] == pytest.approx(numeric_grad(lambda v: perceptual_loss(v, y, fx), x, idx), rel=1e-4,
                                            abs=1e-9)
            assert gs[idx] == pytest.approx(numeric_grad(lambda v: style_loss(v, y, fx), x, idx), rel=1e-4,
                                            abs=1e-9)


class TestTotal:
    def test_weighted_sum(self):
        assert total_loss({k: 0.0 for k in ("noise", "rec", "perc", "style", "tv")})[0] == 0
        assert total_loss({"noise": 1.0})[0] == 1.0
        terms = {"noise": 1.0, "rec": 2.0, "perc": 3.0, "style": 4.0, "tv": 5.0}
        total, br = total_loss(terms)
        assert total == pytest.approx(1 + 10 + 1.5 + 4 + 0.25) and br["total"] == total

    def test_noise_only_weights(self, rng):
        a, b, m = batch(rng)
        w = LossWeights(rec=0, perc=0, style=0, tv=0)
        br, _, g_img = evaluate(a, b, a, b, m, FeatureExtractor(), w)
        assert br["total"] == br["noise"] and not g_img.any()

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(tv=-1)
