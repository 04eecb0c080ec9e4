"""Loss functions for per-step adversarial denoising with unpaired cycle training.

The discriminator judges (x_{t-1}, x_t) pairs at a given step and is trained
to separate true denoising transitions from generator-made ones; the
generator minimizes the non-saturating objective -log D on its own pairs.
Cycle-consistency and identity mapping are plain L1 terms.

All functions are pure in (params, inputs) and differentiable through torch;
gradients are obtained via autograd on the returned scalars.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch

from .schedule import _all_finite, _is_torch

# Probabilities are clamped away from {0, 1}, where the log terms blow up.
PROB_EPS = 1e-7


class NonFiniteLossError(FloatingPointError):
    """A loss or an intermediate forward value came out NaN/inf."""


@dataclass
class LossReport:
    """Per-step loss record for one conversion direction.

    total_g = g_adv + lambda_cyc * g_cyc + lambda_id * g_id with the weights
    in effect at that step (identity annealing may have zeroed lambda_id);
    total_d = d_loss_real + d_loss_fake.
    """

    d_loss_real: float
    d_loss_fake: float
    g_adv: float
    g_cyc: float
    g_id: float
    total_g: float
    total_d: float
    t_sampled: int

    def to_dict(self) -> dict:
        return asdict(self)


def _check_pair(pair, name: str) -> tuple[torch.Tensor, torch.Tensor]:
    x_prev, x_t = pair
    if x_prev.shape != x_t.shape:
        raise ValueError(
            f"{name} pair shapes differ: {tuple(x_prev.shape)} vs {tuple(x_t.shape)}"
        )
    return x_prev, x_t


def _check_probs(p: torch.Tensor, what: str) -> torch.Tensor:
    if not _all_finite(p):
        raise NonFiniteLossError(f"{what}: discriminator output is non-finite")
    if bool((p < 0).any()) or bool((p > 1).any()):
        raise ValueError(f"{what}: discriminator must output probabilities in [0, 1]")
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def d_loss(disc, real_pair, fake_pair, t: int):
    """Discriminator objective, averaged over patch grid and batch.

    Returns (total, real_term, fake_term) scalars where
    real_term = -E log D(real pair) and fake_term = -E log(1 - D(fake pair)).
    An uninformative D at 0.5 gives total = 2 ln 2.
    """
    real_prev, real_t = _check_pair(real_pair, "real")
    fake_prev, fake_t = _check_pair(fake_pair, "fake")
    p_real = _check_probs(disc(real_prev, real_t, t), "d_loss real")
    p_fake = _check_probs(disc(fake_prev, fake_t, t), "d_loss fake")
    real_term = -torch.log(p_real).mean()
    fake_term = -torch.log(1.0 - p_fake).mean()
    total = real_term + fake_term
    if not _all_finite(total):
        raise NonFiniteLossError("d_loss: total is non-finite")
    return total, real_term, fake_term


def g_adv_loss(disc, fake_pair, t: int) -> torch.Tensor:
    """Non-saturating generator objective: -E log D(fake pair)."""
    fake_prev, fake_t = _check_pair(fake_pair, "fake")
    p_fake = _check_probs(disc(fake_prev, fake_t, t), "g_adv")
    value = -torch.log(p_fake).mean()
    if not _all_finite(value):
        raise NonFiniteLossError("g_adv_loss: value is non-finite")
    return value


def _mean_abs(a, b, name: str):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")
    if _is_torch(a):
        value = torch.mean(torch.abs(a - b))
        if not _all_finite(value):
            raise NonFiniteLossError(f"{name}: value is non-finite")
        return value
    value = np.mean(np.abs(np.asarray(a) - np.asarray(b)))
    if not np.isfinite(value):
        raise NonFiniteLossError(f"{name}: value is non-finite")
    return value


def cycle_loss(x, x_cyc):
    """Mean absolute round-trip error between an input and its cycle
    reconstruction."""
    return _mean_abs(x, x_cyc, "cycle_loss")


def identity_loss(y, y_pred):
    """Mean absolute error of the target-direction generator asked to
    reproduce a (diffused) target-domain sample."""
    return _mean_abs(y, y_pred, "identity_loss")


def r1_penalty(disc, real_pair, t: int, gamma: float) -> torch.Tensor:
    """Gradient penalty on the discriminator at real pairs (config stub,
    off by default)."""
    if gamma <= 0.0:
        raise ValueError("r1_penalty called with gamma <= 0")
    real_prev, real_t = _check_pair(real_pair, "real")
    real_prev = real_prev.detach().requires_grad_(True)
    real_t = real_t.detach().requires_grad_(True)
    p = _check_probs(disc(real_prev, real_t, t), "r1")
    logits = torch.log(p) - torch.log1p(-p)
    grads = torch.autograd.grad(logits.sum(), [real_prev, real_t], create_graph=True)
    sq = sum(g.pow(2).reshape(g.shape[0], -1).sum(dim=1) for g in grads)
    return 0.5 * gamma * sq.mean()
