"""Classifier head, energy score, binary classifier and loss assembly."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ffs import flow as fl
from ffs import heads as hd
from ffs.errors import InvalidArgument
from ffs.numerics import SeededRng, finite_diff_grad

from conftest import randomized_flow


def affine_head(W, b):
    W, b = np.asarray(W, float), np.asarray(b, float)
    return hd.ClassifierHead(W.shape[1] - 1, W.shape[0], (), {"W0": W, "b0": b})


class TestClassLogits:
    def test_zero_weights_give_bias(self):
        head = affine_head(np.zeros((2, 4)), [1.0, -2.0, 0.5, 3.0])
        np.testing.assert_array_equal(hd.class_logits(head, [7.0, -1.0]), [1.0, -2.0, 0.5, 3.0])

    def test_identity_block(self):
        head = affine_head(np.eye(3), np.zeros(3))
        np.testing.assert_array_equal(hd.class_logits(head, [0.1, 0.2, 0.3]), [0.1, 0.2, 0.3])

    def test_matches_matvec(self):
        rng = SeededRng(1)
        W, b, x = rng.normal((4, 3)), rng.normal(3), rng.normal(4)
        head = affine_head(W, b)
        ref = np.array([sum(x[i] * W[i, j] for i in range(4)) + b[j] for j in range(3)])
        np.testing.assert_allclose(hd.class_logits(head, x), ref, atol=1e-12)

    def test_mlp_brute_force(self):
        head = hd.ClassifierHead.create(3, 2, (5, 4), SeededRng(2))
        x = SeededRng(3).normal((6, 2))
        p = head.params
        h = np.maximum(x @ p["W0"] + p["b0"], 0)
        h = np.maximum(h @ p["W1"] + p["b1"], 0)
        np.testing.assert_allclose(hd.class_logits(head, x), h @ p["W2"] + p["b2"], atol=1e-12)

    def test_output_width(self):
        head = hd.ClassifierHead.create(5, 3, (8,), SeededRng(0))
        assert hd.class_logits(head, np.zeros(3)).shape == (6,)

    def test_dim_mismatch(self):
        head = hd.ClassifierHead.create(2, 3)
        with pytest.raises(InvalidArgument):
            hd.class_logits(head, [1.0, 2.0])


class TestEnergy:
    @pytest.mark.parametrize("logits, K, T, expected", [
        ([0.0, 0.0, 9.0], 2, 1.0, -0.693147),
        ([5.0, -3.0], 1, 1.0, -5.0),
        ([0.0, 0.0, 9.0], 2, 2.0, -1.386294),
    ])
    def test_examples(self, logits, K, T, expected):
        assert hd.energy_score(logits, hd.EnergyParams.create(K, T)) == pytest.approx(expected, abs=1e-6)

    def test_weights_positive(self):
        p = hd.EnergyParams(np.array([-50.0, 3.0]))
        assert np.all(p.weights > 0)

    def test_bad_temperature(self):
        with pytest.raises(InvalidArgument):
            hd.EnergyParams.create(2, 0.0)

    def test_large_logits_stable(self):
        e = hd.energy_score([1000.0, 1000.0, 0.0], hd.EnergyParams.create(2))
        assert e == pytest.approx(-1000.0 - math.log(2), abs=1e-9)

    def test_class_weights(self):
        params = hd.EnergyParams(np.log([2.0, 3.0]), T=1.5)
        lg = np.array([0.4, -1.2, 7.0])
        ref = -1.5 * math.log(2.0 * math.exp(0.4 / 1.5) + 3.0 * math.exp(-1.2 / 1.5))
        assert hd.energy_score(lg, params) == pytest.approx(ref, abs=1e-12)

    @given(st.lists(st.floats(-30, 30), min_size=4, max_size=4), st.floats(-100, 100))
    def test_background_invariance(self, lg, shift):
        params = hd.EnergyParams.create(3)
        moved = list(lg)
        moved[3] += shift
        assert hd.energy_score(moved, params) == hd.energy_score(lg, params)

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=6))
    def test_negative_logsumexp(self, lg):
        from scipy.special import logsumexp

        K = len(lg) - 1
        e = hd.energy_score(lg, hd.EnergyParams.create(K))
        assert e == pytest.approx(-logsumexp(lg[:K]), abs=1e-12)

    def test_batch(self):
        lg = SeededRng(0).normal((5, 4))
        params = hd.EnergyParams.create(3)
        np.testing.assert_allclose(hd.energy_score(lg, params),
                                   [hd.energy_score(row, params) for row in lg], atol=0)


class TestBinaryClassifier:
    def test_prior_sign(self):
        phi = hd.BinaryClassifier()
        assert phi(-5.0) > 0.5 > phi(5.0)

    @given(st.floats(-3e4, 3e4))
    def test_open_interval(self, e):
        # |u * e| <= 30 keeps both tails representable in float64
        p = hd.BinaryClassifier(u=-1e-3)(e)
        assert 0.0 < p < 1.0


class TestRegLoss:
    def test_saturated(self):
        assert hd.bce_from_probs([1 - 1e-12], [1e-12]) <= 1e-11

    def test_half(self):
        assert hd.bce_from_probs([0.5], [0.5]) == pytest.approx(1.386294, abs=1e-6)

    def test_point_nine(self):
        assert hd.bce_from_probs([0.9], [0.1]) == pytest.approx(0.210721, abs=1e-6)

    def test_clamped_extremes_finite(self):
        assert math.isfinite(hd.bce_from_probs([0.0], [1.0]))

    def test_unpaired_terms_averaged_separately(self):
        loss = hd.bce_from_probs([0.9, 0.5, 0.2], [0.1])
        ref = -(np.log([0.9, 0.5, 0.2]).mean() + math.log(0.9))
        assert loss == pytest.approx(ref, abs=1e-12)

    def test_from_energies(self):
        phi = hd.BinaryClassifier(u=-0.5, v=0.3)
        e_id, e_ood = np.array([-4.0, -2.0]), np.array([1.0, 3.0])
        s = lambda x: 1 / (1 + np.exp(-x))
        ref = -np.log(s(-0.5 * e_id + 0.3)).mean() - np.log(1 - s(-0.5 * e_ood + 0.3)).mean()
        assert hd.reg_loss_bce(e_id, e_ood, phi) == pytest.approx(ref, abs=1e-12)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=5),
           st.lists(st.floats(0, 1), min_size=1, max_size=5))
    def test_non_negative(self, p_id, p_ood):
        assert hd.bce_from_probs(p_id, p_ood) >= 0.0

    def test_empty(self):
        with pytest.raises(InvalidArgument):
            hd.reg_loss_bce([], [1.0], hd.BinaryClassifier())


class TestVariants:
    def test_jsd_uniform(self):
        assert hd.reg_loss_variant("JSD", None, np.full((3, 4), 2.5)) == pytest.approx(0.0, abs=1e-15)

    def test_jsd_brute_force(self):
        lg = SeededRng(4).normal((3, 4))
        p = np.exp(lg) / np.exp(lg).sum(1, keepdims=True)
        u = np.full(4, 0.25)
        m = (p + u) / 2
        kl = lambda a, b: (a * np.log(a / b)).sum(1)
        ref = (0.5 * kl(p, m) + 0.5 * kl(u, m)).mean()
        assert hd.reg_loss_variant("JSD", None, lg) == pytest.approx(ref, abs=1e-12)

    @pytest.mark.parametrize("K", [1, 3, 9])
    def test_ce_uniform(self, K):
        assert hd.reg_loss_variant("CE", None, np.zeros((2, K + 1))) == pytest.approx(
            math.log(K + 1), abs=1e-12)

    def test_hinge_margins_met(self):
        assert hd.hinge_from_energies([-25.0], [-5.0], -25.0, -5.0) == 0.0

    def test_hinge_values(self):
        assert hd.hinge_from_energies([-20.0, -30.0], [-8.0], -25.0, -5.0) == pytest.approx(2.5 + 3.0)

    def test_unknown(self):
        with pytest.raises(InvalidArgument):
            hd.reg_loss_variant("KL", None, np.zeros((1, 3)))

    def test_unknown_in_weights(self):
        with pytest.raises(InvalidArgument):
            hd.LossWeights(reg_variant="KL")


class TestTotalLoss:
    def test_no_weights(self):
        assert hd.total_loss(1.7, 5.0, 9.0, hd.LossWeights(0.0, 0.0)) == 1.7

    def test_paper_weights(self):
        assert hd.total_loss(1.0, 2.0, 3.0, hd.LossWeights(alpha=0.1, beta=1e-4)) == pytest.approx(
            1.3002, abs=1e-12)

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(-5, 5), st.floats(-5, 5))
    def test_linear(self, alpha, beta, nll, reg):
        w = hd.LossWeights(alpha, beta)
        base = hd.total_loss(0.5, nll, reg, w)
        assert hd.total_loss(0.5, nll, 2 * reg, w) - base == pytest.approx(alpha * reg, abs=1e-9)

    def test_negative_weight(self):
        with pytest.raises(InvalidArgument):
            hd.LossWeights(alpha=-0.1)


class TestDetLoss:
    def test_uniform_logits(self):
        head = affine_head(np.zeros((2, 4)), np.zeros(4))
        assert hd.det_loss_surrogate(head, np.ones((3, 2)), [0, 2, 3]) == pytest.approx(
            math.log(4), abs=1e-12)

    def test_saturated(self):
        head = affine_head(np.zeros((2, 3)), [20.0, 0.0, 0.0])
        assert hd.det_loss_surrogate(head, np.zeros((1, 2)), [0]) <= 1e-8

    def test_brute_force(self):
        head = hd.ClassifierHead.create(3, 2, (6,), SeededRng(5))
        x = SeededRng(6).normal((8, 2))
        y = np.array([0, 1, 2, 3, 0, 1, 2, 3])
        lg = hd.class_logits(head, x)
        ref = np.mean([-(lg[i, y[i]] - np.log(np.exp(lg[i]).sum())) for i in range(8)])
        assert hd.det_loss_surrogate(head, x, y) == pytest.approx(ref, abs=1e-12)

    @pytest.mark.parametrize("labels", [[4], [-1]])
    def test_label_range(self, labels):
        with pytest.raises(InvalidArgument, match="label"):
            hd.det_loss_surrogate(hd.ClassifierHead.create(3, 2), np.zeros((1, 2)), labels)


def _numeric_grads(flow, bundle, x, y, w, z):
    h0, f0 = bundle.get_params(), flow.get_params()

    def via_heads(p):
        bundle.set_params(p)
        return float(hd.objective_var(flow, bundle, x, y, w, outlier_z=z)[0].value)

    def via_flow(p):
        flow.set_params(p)
        return float(hd.objective_var(flow, bundle, x, y, w, outlier_z=z)[0].value)

    gh = finite_diff_grad(via_heads, h0)
    bundle.set_params(h0)
    gf = finite_diff_grad(via_flow, f0)
    flow.set_params(f0)
    return gh, gf


class TestGradients:
    @pytest.mark.parametrize("cfg", range(20))
    def test_total_loss_oracle(self, cfg):
        rng = SeededRng(cfg, (3,))
        variant = fl.VARIANTS[cfg % 4]
        reg = hd.REG_VARIANTS[cfg % 4 if cfg < 8 else 0]
        K, d = 3, 4
        flow = randomized_flow(variant, d, M=1 + cfg % 2, H=1, W=6, seed=cfg, scale=0.2)
        bundle = hd.HeadBundle.create(K, d, (5,) if cfg % 3 else (), T=1.0 + 0.5 * (cfg % 2), rng=rng)
        bundle.set_params(bundle.get_params() + 0.3 * rng.normal(bundle.get_params().size))
        x = rng.normal((6, d))
        y = np.array([0, 1, 2, 3, 0, 1])
        z = rng.normal((2, d))
        w = hd.LossWeights(alpha=0.7, beta=0.3, reg_variant=reg, m_in=-1.0, m_out=1.0)
        _, gh, gf = hd.grad_params_heads(flow, bundle, x, y, w, outlier_z=z)
        nh, nf = _numeric_grads(flow, bundle, x, y, w, z)
        np.testing.assert_allclose(gh, nh, rtol=1e-4, atol=1e-7)
        np.testing.assert_allclose(gf, nf, rtol=1e-4, atol=1e-7)

    @pytest.mark.parametrize("cfg", range(6))
    def test_input_gradient_oracle(self, cfg):
        rng = SeededRng(cfg, (4,))
        d = 3
        flow = randomized_flow(fl.VARIANTS[cfg % 4], d, seed=cfg + 40, scale=0.2)
        bundle = hd.HeadBundle.create(2, d, (5,), rng=rng)
        x, z = rng.normal((5, d)), rng.normal((2, d))
        y = np.array([0, 1, 2, 0, 1])
        w = hd.LossWeights(alpha=0.5, beta=0.7, reg_variant=hd.REG_VARIANTS[cfg % 4])
        _, dx, dz = hd.grad_inputs_heads(flow, bundle, x, y, w, outlier_z=z)
        loss = lambda xf, zf: float(hd.objective_var(flow, bundle, xf.reshape(5, d), y, w,
                                                     outlier_z=zf.reshape(2, d))[0].value)
        np.testing.assert_allclose(dx.ravel(), finite_diff_grad(lambda v: loss(v, z.ravel()), x.ravel()),
                                   rtol=1e-4, atol=1e-7)
        np.testing.assert_allclose(dz.ravel(), finite_diff_grad(lambda v: loss(x.ravel(), v), z.ravel()),
                                   rtol=1e-4, atol=1e-7)

    def _setup(self):
        flow = randomized_flow("Glow", 2, seed=1)
        bundle = hd.HeadBundle.create(2, 2, (4,), rng=SeededRng(2))
        x = SeededRng(3).normal((5, 2))
        return flow, bundle, x, np.array([0, 1, 2, 0, 1])

    def test_no_alpha_no_psi(self):
        flow, bundle, x, y = self._setup()
        _, gh, _ = hd.grad_params_heads(flow, bundle, x, y, hd.LossWeights(0.0, 1.0),
                                        outlier_z=np.ones((2, 2)))
        np.testing.assert_array_equal(gh[-2:], [0.0, 0.0])

    def test_warmup_leaves_flow_alone(self):
        flow, bundle, x, y = self._setup()
        _, _, gf = hd.grad_params_heads(flow, bundle, x, y, hd.LossWeights(0.0, 0.0),
                                        outliers=np.ones((2, 2)))
        np.testing.assert_array_equal(gf, 0.0)

    def test_detached_outliers_reach_no_flow_params(self):
        flow, bundle, x, y = self._setup()
        _, _, gf = hd.grad_params_heads(flow, bundle, x, y, hd.LossWeights(1.0, 0.0),
                                        outliers=np.ones((2, 2)))
        np.testing.assert_array_equal(gf, 0.0)

    def test_latent_outliers_reach_flow_params(self):
        flow, bundle, x, y = self._setup()
        _, _, gf = hd.grad_params_heads(flow, bundle, x, y, hd.LossWeights(1.0, 0.0),
                                        outlier_z=np.ones((2, 2)))
        assert np.any(gf != 0.0)

    def test_param_round_trip(self):
        bundle = hd.HeadBundle.create(3, 2, (4,), rng=SeededRng(0))
        v = SeededRng(1).normal(bundle.get_params().size)
        bundle.set_params(v)
        np.testing.assert_array_equal(bundle.get_params(), v)
        with pytest.raises(InvalidArgument):
            bundle.set_params(v[:-1])
