import math

import numpy as np
import pytest
import torch
from scipy import integrate, stats

from catvac.errors import NonFiniteError, ShapeError
from catvac.services.losses import (
    EmptyMaskError,
    LossError,
    kl_categorical,
    kl_gaussian,
    reconstruction_error,
    total_loss,
)
from catvac.services.model import GaussianPosterior


def _posterior(mu, var):
    mu = torch.as_tensor(mu, dtype=torch.float64)
    return GaussianPosterior(mu=mu, log_var=torch.log(torch.as_tensor(var, dtype=torch.float64)))


class TestReconstructionError:

    def test_half_reconstruction_costs_ln2(self):
        x = torch.randint(0, 2, (3, 4, 5), generator=torch.Generator().manual_seed(0)).double()
        x_hat = torch.full_like(x, 0.5)
        assert float(reconstruction_error(x, x_hat, torch.ones(3, 4))) == pytest.approx(math.log(2), rel=1e-12)

    def test_masked_frames_do_not_contribute(self):
        gen = torch.Generator().manual_seed(1)
        x = torch.rand(2, 6, 3, generator=gen, dtype=torch.float64)
        x_hat = torch.rand(2, 6, 3, generator=gen, dtype=torch.float64) * 0.98 + 0.01
        mask = torch.ones(2, 6)
        mask[:, 4:] = 0
        baseline = reconstruction_error(x, x_hat, mask)

        x_changed = x.clone()
        x_changed[:, 4:] = 1.0 - x_changed[:, 4:]
        hat_changed = x_hat.clone()
        hat_changed[:, 4:] = 0.5
        torch.testing.assert_close(reconstruction_error(x_changed, hat_changed, mask), baseline)

    def test_average_over_valid_cells(self):
        x = torch.zeros(1, 2, 2, dtype=torch.float64)
        x_hat = torch.tensor([[[0.5, 0.5], [0.9, 0.9]]], dtype=torch.float64)
        out = reconstruction_error(x, x_hat, torch.tensor([[1, 0]]))
        assert float(out) == pytest.approx(math.log(2))

    def test_empty_mask(self):
        x = torch.zeros(2, 3, 4)
        with pytest.raises(EmptyMaskError, match="empty mask"):
            reconstruction_error(x, torch.full_like(x, 0.5), torch.zeros(2, 3))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            reconstruction_error(torch.zeros(2, 3, 4), torch.zeros(2, 3, 5), torch.ones(2, 3))

    def test_non_finite_reconstruction(self):
        x_hat = torch.full((1, 2, 2), 0.5)
        x_hat[0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteError):
            reconstruction_error(torch.zeros(1, 2, 2), x_hat, torch.ones(1, 2))

    def test_batch_is_valid_frame_weighted_mean_of_items(self):
        gen = torch.Generator().manual_seed(4)
        x = torch.rand(3, 6, 5, generator=gen, dtype=torch.float64)
        x_hat = torch.rand(3, 6, 5, generator=gen, dtype=torch.float64).clamp(0.01, 0.99)
        mask = torch.zeros(3, 6, dtype=torch.float64)
        mask[0, :6] = 1
        mask[1, :2] = 1
        mask[2, :4] = 1
        per_item = torch.stack([reconstruction_error(x[i], x_hat[i], mask[i]) for i in range(3)])
        frames = mask.sum(dim=1)
        expected = (per_item * frames).sum() / frames.sum()
        torch.testing.assert_close(reconstruction_error(x, x_hat, mask), expected)


class TestKlGaussian:

    def test_standard_normal_is_zero(self):
        assert float(kl_gaussian(_posterior([0.0, 0.0], [1.0, 1.0]))) == 0.0

    @pytest.mark.parametrize("mu,var", [(0.7, 1.0), (-1.5, 0.3), (0.2, 2.5)])
    def test_matches_numerical_integral(self, mu, var):
        q = stats.norm(mu, math.sqrt(var))
        p = stats.norm(0.0, 1.0)
        expected, _ = integrate.quad(lambda z: q.pdf(z) * (q.logpdf(z) - p.logpdf(z)), -30, 30)
        assert float(kl_gaussian(_posterior([mu], [var]))) == pytest.approx(expected, rel=1e-6)

    def test_random_posteriors_match_quadrature(self):
        rng = np.random.default_rng(5)
        p = stats.norm(0.0, 1.0)
        for _ in range(100):
            mu = rng.uniform(-2.0, 2.0, 3)
            var = rng.uniform(0.2, 3.0, 3)
            expected = 0.0
            for m, v in zip(mu, var):
                q = stats.norm(m, math.sqrt(v))
                span = 12 * math.sqrt(v)
                value, _ = integrate.quad(lambda z: q.pdf(z) * (q.logpdf(z) - p.logpdf(z)), m - span, m + span)
                expected += value
            assert float(kl_gaussian(_posterior(mu.tolist(), var.tolist()))) == pytest.approx(expected, abs=1e-6)

    def test_sums_over_dimensions(self):
        joint = kl_gaussian(_posterior([[0.7, -1.5]], [[1.0, 0.3]]))
        parts = kl_gaussian(_posterior([[0.7]], [[1.0]])) + kl_gaussian(_posterior([[-1.5]], [[0.3]]))
        torch.testing.assert_close(joint, parts)

    def test_nonnegative(self):
        gen = torch.Generator().manual_seed(2)
        post = GaussianPosterior(mu=torch.randn(10000, 8, generator=gen, dtype=torch.float64),
                                 log_var=torch.randn(10000, 8, generator=gen, dtype=torch.float64))
        assert (kl_gaussian(post) >= -1e-12).all()


class TestKlCategorical:

    def test_uniform_is_zero(self):
        assert float(kl_categorical(torch.full((4,), 0.25, dtype=torch.float64))) == pytest.approx(0.0, abs=1e-15)

    def test_one_hot_is_log_k(self):
        probs = torch.tensor([0.0, 1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
        assert float(kl_categorical(probs)) == pytest.approx(math.log(5))

    def test_matches_direct_sum(self):
        probs = np.array([0.5, 0.3, 0.2, 0.0])
        nonzero = probs[probs > 0]
        expected = float(np.sum(nonzero * np.log(nonzero * 4)))
        assert float(kl_categorical(torch.as_tensor(probs))) == pytest.approx(expected, abs=1e-9)

    def test_nonnegative(self):
        probs = torch.softmax(torch.randn(10000, 10, generator=torch.Generator().manual_seed(3), dtype=torch.float64), -1)
        assert (kl_categorical(probs) >= -1e-12).all()

    def test_negative_probability(self):
        with pytest.raises(LossError):
            kl_categorical(torch.tensor([1.2, -0.2]))


class TestTotalLoss:

    def test_composition(self):
        gen = torch.Generator().manual_seed(4)
        x = torch.rand(3, 4, 5, generator=gen, dtype=torch.float64)
        x_hat = torch.rand(3, 4, 5, generator=gen, dtype=torch.float64) * 0.9 + 0.05
        post = GaussianPosterior(mu=torch.randn(3, 2, generator=gen, dtype=torch.float64),
                                 log_var=torch.randn(3, 2, generator=gen, dtype=torch.float64))
        probs = torch.softmax(torch.randn(3, 6, generator=gen, dtype=torch.float64), -1)
        mask = torch.ones(3, 4)

        breakdown = total_loss(x, x_hat, post, probs, mask, lam=0.5)
        expected = (reconstruction_error(x, x_hat, mask)
                    + 0.5 * (kl_gaussian(post).mean() + kl_categorical(probs).mean()))
        torch.testing.assert_close(breakdown.total, expected)
        floats = breakdown.as_floats()
        assert floats["lambda"] == 0.5
        assert floats["total"] == pytest.approx(floats["recon"] + 0.5 * (floats["kl_gauss"] + floats["kl_cat"]))

    def test_zero_lambda_is_reconstruction_only(self):
        x = torch.zeros(1, 2, 2, dtype=torch.float64)
        x_hat = torch.full_like(x, 0.5)
        post = _posterior([[3.0]], [[9.0]])
        breakdown = total_loss(x, x_hat, post, torch.tensor([[1.0, 0.0]], dtype=torch.float64), torch.ones(1, 2), 0.0)
        assert float(breakdown.total) == pytest.approx(math.log(2))

    def test_negative_lambda(self):
        x = torch.zeros(1, 2, 2)
        with pytest.raises(LossError):
            total_loss(x, torch.full_like(x, 0.5), _posterior([[0.0]], [[1.0]]), torch.tensor([[0.5, 0.5]]),
                       torch.ones(1, 2), -0.1)
