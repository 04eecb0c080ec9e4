"""Shared fixtures: small corpora, toy double-precision nets for gradient
checks, and finite-difference utilities."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from torch import nn

from dgvc.features import CorpusConfig, make_synthetic_corpus


SMALL_CORPUS_CFG = CorpusConfig(n_train=4, n_heldout=2, min_len=48, max_len=80)


@pytest.fixture(scope="session")
def small_corpus():
    """Tiny synthetic corpus for fast trainer tests."""
    return make_synthetic_corpus(SMALL_CORPUS_CFG, np.random.default_rng(7))


@pytest.fixture(scope="session")
def default_corpus():
    """The default-config corpus used by the acceptance suite."""
    return make_synthetic_corpus(CorpusConfig(), np.random.default_rng(0))


class ToyGenerator(nn.Module):
    """Double-precision generator stand-in (< 100 parameters) mapping a
    flattened (Q, T) matrix plus latent and step scalar to a same-shape
    prediction."""

    def __init__(self, q=2, t=2, z_dim=2, hidden=4, seed=0):
        super().__init__()
        self.q, self.t, self.z_dim = q, t, z_dim
        n = q * t
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.l1 = nn.Linear(n + z_dim + 1, hidden, dtype=torch.float64)
            self.l2 = nn.Linear(hidden, n, dtype=torch.float64)

    def forward(self, x, z, t):
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if z.dim() == 1:
            z = z.unsqueeze(0).expand(x.shape[0], -1)
        flat = x.reshape(x.shape[0], -1)
        step = torch.full((x.shape[0], 1), float(t), dtype=x.dtype)
        h = torch.tanh(self.l1(torch.cat([flat, z, step], dim=1)))
        out = self.l2(h).reshape(x.shape[0], self.q, self.t)
        return out.squeeze(0) if squeeze else out


class ToyDiscriminator(nn.Module):
    """Double-precision pair discriminator (< 100 parameters) emitting a
    single-patch probability grid."""

    def __init__(self, q=2, t=2, hidden=4, seed=1):
        super().__init__()
        n = q * t
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.l1 = nn.Linear(2 * n + 1, hidden, dtype=torch.float64)
            self.l2 = nn.Linear(hidden, 1, dtype=torch.float64)

    def forward(self, x_prev, x_t, t):
        squeeze = x_prev.dim() == 2
        if squeeze:
            x_prev, x_t = x_prev.unsqueeze(0), x_t.unsqueeze(0)
        flat = torch.cat(
            [x_prev.reshape(x_prev.shape[0], -1), x_t.reshape(x_t.shape[0], -1)], dim=1
        )
        step = torch.full((x_prev.shape[0], 1), float(t), dtype=x_prev.dtype)
        h = torch.tanh(self.l1(torch.cat([flat, step], dim=1)))
        out = torch.sigmoid(self.l2(h)).unsqueeze(-1)  # (B, 1, 1) patch grid
        return out.squeeze(0) if squeeze else out


def numeric_grads(loss_fn, module: nn.Module, h: float = 1e-5) -> dict[str, torch.Tensor]:
    """Central finite differences of loss_fn() w.r.t. every parameter of
    module; loss_fn must be a pure function of the current parameter values."""
    grads: dict[str, torch.Tensor] = {}
    for name, p in module.named_parameters():
        g = torch.zeros_like(p)
        flat = p.data.view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def analytic_grads(loss: torch.Tensor, module: nn.Module) -> dict[str, torch.Tensor]:
    params = dict(module.named_parameters())
    grads = torch.autograd.grad(
        loss, list(params.values()), retain_graph=False, allow_unused=True
    )
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(params.items(), grads)
    }


def relative_grad_error(analytic: dict, numeric: dict) -> float:
    """Worst per-tensor L2 relative error between gradient dictionaries."""
    worst = 0.0
    for name in analytic:
        a, n = analytic[name].ravel(), numeric[name].ravel()
        denom = max(float(a.norm()), float(n.norm()), 1e-12)
        worst = max(worst, float((a - n).norm()) / denom)
    return worst
