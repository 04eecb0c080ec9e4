"""Loss values against fixed points and finite-difference gradient oracles."""

import math

import numpy as np
import pytest
import torch

from dgvc import objectives as O
from dgvc import schedule as S
from conftest import (
    ToyDiscriminator,
    ToyGenerator,
    analytic_grads,
    numeric_grads,
    relative_grad_error,
)


class ConstantDisc:
    """Discriminator stub emitting the same probability for every patch."""

    def __init__(self, p, patches=(1, 1), dtype=torch.float64):
        self.p = p
        self.patches = patches
        self.dtype = dtype

    def __call__(self, x_prev, x_t, t):
        b = x_prev.shape[0] if x_prev.dim() == 3 else 1
        return torch.full((b, *self.patches), self.p, dtype=self.dtype)


def pair(seed=0, b=2, q=2, t=2, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return (
        torch.randn(b, q, t, generator=g, dtype=dtype),
        torch.randn(b, q, t, generator=g, dtype=dtype),
    )


class TestFixedPoints:
    def test_uninformative_discriminator_d_loss(self):
        disc = ConstantDisc(0.5)
        total, real_term, fake_term = O.d_loss(disc, pair(0), pair(1), 1)
        assert abs(float(total) - 2.0 * math.log(2.0)) < 1e-12
        assert abs(float(real_term) - math.log(2.0)) < 1e-12
        assert abs(float(fake_term) - math.log(2.0)) < 1e-12

    def test_uninformative_discriminator_g_adv(self):
        disc = ConstantDisc(0.5)
        value = O.g_adv_loss(disc, pair(2), 1)
        assert abs(float(value) - math.log(2.0)) < 1e-12

    def test_perfect_discriminator_vanishing_loss(self):
        class PerfectDisc:
            def __call__(self, x_prev, x_t, t):
                # 1 on the real pair, 0 on the fake pair (marked by caller)
                val = 1.0 if x_prev is real_prev else 0.0
                return torch.full((x_prev.shape[0], 1, 1), val, dtype=torch.float64)

        real_prev, real_t = pair(3)
        fake = pair(4)
        total, _, _ = O.d_loss(PerfectDisc(), (real_prev, real_t), fake, 1)
        # outputs clamp at machine epsilon distance from {0, 1}
        assert float(total) < 1e-6

    def test_confident_wrong_discriminator_is_finite(self):
        total, _, _ = O.d_loss(ConstantDisc(0.0), pair(0), pair(1), 1)
        assert math.isfinite(float(total))

    def test_g_adv_at_confident_discriminator(self):
        assert float(O.g_adv_loss(ConstantDisc(1.0), pair(0), 1)) < 1e-6


class TestDLossValidation:
    def test_pair_shape_mismatch(self):
        x_prev, x_t = pair(0)
        with pytest.raises(ValueError, match="pair shapes"):
            O.d_loss(ConstantDisc(0.5), (x_prev, x_t[:, :, :1]), pair(1), 1)

    def test_probability_range_enforced(self):
        with pytest.raises(ValueError, match="probabilities"):
            O.d_loss(ConstantDisc(1.5), pair(0), pair(1), 1)

    def test_nonfinite_output_aborts(self):
        with pytest.raises(O.NonFiniteLossError, match="non-finite"):
            O.d_loss(ConstantDisc(float("nan")), pair(0), pair(1), 1)

    def test_batch_permutation_symmetry(self):
        disc = ToyDiscriminator()
        real, fake = pair(5, b=4), pair(6, b=4)
        total, _, _ = O.d_loss(disc, real, fake, 2)
        perm = torch.tensor([2, 0, 3, 1])
        total_p, _, _ = O.d_loss(
            disc,
            (real[0][perm], real[1][perm]),
            (fake[0][perm], fake[1][perm]),
            2,
        )
        assert abs(float(total) - float(total_p)) < 1e-12


class TestL1Losses:
    def test_cycle_zero_on_equal(self):
        x = torch.randn(3, 4, generator=torch.Generator().manual_seed(0))
        assert float(O.cycle_loss(x, x.clone())) == 0.0

    def test_cycle_ones_vs_zeros(self):
        for shape in [(2, 3), (1, 7), (4, 4, 4)]:
            assert float(O.cycle_loss(torch.ones(shape), torch.zeros(shape))) == 1.0

    def test_cycle_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        expected = sum(abs(a[i, j] - b[i, j]) for i in range(3) for j in range(5)) / 15
        assert math.isclose(float(O.cycle_loss(a, b)), expected, rel_tol=1e-12)

    def test_identity_same_semantics(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        assert float(O.identity_loss(a, b)) == float(O.cycle_loss(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            O.cycle_loss(torch.ones(2, 3), torch.ones(3, 2))

    def test_chunking_invariance(self):
        # mean reduction makes the loss invariant to evaluating two halves
        # of the time axis and averaging
        g = torch.Generator().manual_seed(2)
        x, y = torch.randn(2, 6, 8, generator=g), torch.randn(2, 6, 8, generator=g)
        whole = float(O.cycle_loss(x, y))
        halves = 0.5 * (
            float(O.cycle_loss(x[..., :4], y[..., :4]))
            + float(O.cycle_loss(x[..., 4:], y[..., 4:]))
        )
        assert abs(whole - halves) < 1e-12


class TestGradientOracles:
    """Central finite differences (h = 1e-5) in double precision."""

    H = 1e-5
    TOL = 1e-4

    def test_d_loss_grads(self):
        disc = ToyDiscriminator(seed=3)
        real, fake = pair(7), pair(8)

        def loss_fn():
            total, _, _ = O.d_loss(disc, real, fake, 2)
            return float(total)

        total, _, _ = O.d_loss(disc, real, fake, 2)
        err = relative_grad_error(
            analytic_grads(total, disc), numeric_grads(loss_fn, disc, self.H)
        )
        assert err < self.TOL

    def _fake_pair_through_generator(self, gen, sched, x0, eps_t, eps_post, z, t):
        x_t = S.forward_marginal_sample(x0, t, sched, eps=eps_t)
        x0_hat = gen(x_t, z, t)
        x_prev = S.sample_posterior(x0_hat, x_t, t, sched, eps=eps_post)
        return x_prev, x_t

    def test_g_adv_grads_through_generator_and_posterior(self):
        gen = ToyGenerator(seed=4)
        disc = ToyDiscriminator(seed=5)
        sched = S.make_schedule(4)
        g = torch.Generator().manual_seed(9)
        x0 = torch.randn(2, 2, 2, generator=g, dtype=torch.float64)
        z = torch.randn(2, 2, generator=g, dtype=torch.float64)
        eps_t = torch.randn(x0.shape, generator=g, dtype=torch.float64)
        eps_post = torch.randn(x0.shape, generator=g, dtype=torch.float64)
        t = 3

        def loss_fn():
            fake = self._fake_pair_through_generator(gen, sched, x0, eps_t, eps_post, z, t)
            return float(O.g_adv_loss(disc, fake, t))

        fake = self._fake_pair_through_generator(gen, sched, x0, eps_t, eps_post, z, t)
        loss = O.g_adv_loss(disc, fake, t)
        err = relative_grad_error(
            analytic_grads(loss, gen), numeric_grads(loss_fn, gen, self.H)
        )
        assert err < self.TOL

    def test_cycle_grads_through_both_generators(self):
        g_fwd, g_bwd = ToyGenerator(seed=6), ToyGenerator(seed=7)
        sched = S.make_schedule(4)
        g = torch.Generator().manual_seed(10)
        x0 = torch.randn(1, 2, 2, generator=g, dtype=torch.float64)
        z1 = torch.randn(1, 2, generator=g, dtype=torch.float64)
        z2 = torch.randn(1, 2, generator=g, dtype=torch.float64)
        eps1 = torch.randn(x0.shape, generator=g, dtype=torch.float64)
        eps2 = torch.randn(x0.shape, generator=g, dtype=torch.float64)

        def compute():
            x_t = S.forward_marginal_sample(x0, 2, sched, eps=eps1)
            y_hat = g_fwd(x_t, z1, 2)
            y_rediff = S.forward_marginal_sample(y_hat, 3, sched, eps=eps2)
            x_back = g_bwd(y_rediff, z2, 3)
            return O.cycle_loss(x0, x_back)

        for module in (g_fwd, g_bwd):
            err = relative_grad_error(
                analytic_grads(compute(), module),
                numeric_grads(lambda: float(compute()), module, self.H),
            )
            assert err < self.TOL

    def test_identity_grads(self):
        gen = ToyGenerator(seed=8)
        sched = S.make_schedule(4)
        g = torch.Generator().manual_seed(11)
        y0 = torch.randn(2, 2, 2, generator=g, dtype=torch.float64)
        z = torch.randn(2, 2, generator=g, dtype=torch.float64)
        eps = torch.randn(y0.shape, generator=g, dtype=torch.float64)

        def compute():
            y_t = S.forward_marginal_sample(y0, 2, sched, eps=eps)
            return O.identity_loss(y0, gen(y_t, z, 2))

        err = relative_grad_error(
            analytic_grads(compute(), gen),
            numeric_grads(lambda: float(compute()), gen, self.H),
        )
        assert err < self.TOL


class TestR1Stub:
    def test_penalty_runs_and_is_nonnegative(self):
        disc = ToyDiscriminator(seed=9)
        value = O.r1_penalty(disc, pair(12), 1, gamma=0.1)
        assert float(value) >= 0.0

    def test_zero_gamma_rejected(self):
        with pytest.raises(ValueError):
            O.r1_penalty(ToyDiscriminator(), pair(0), 1, gamma=0.0)
