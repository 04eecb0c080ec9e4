"""Closed-form diffusion mathematics for few-step denoising chains.

Forward noising, marginals, the exact reverse-chain posterior and sampling
helpers. All schedule coefficients are computed and stored in float64;
samplers work on numpy arrays or torch tensors alike (noise is drawn from a
``numpy.random.Generator`` or ``torch.Generator`` matching the input type).

Convention: t = 0 is clean data, t = T is (near-)pure noise. Vectors stored
on the schedule are indexed 0..T-1 for steps 1..T; accessors take 1-based t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

try:
    import torch
except ImportError:  # schedule math itself has no torch dependency
    torch = None

MAX_STEPS = 1000

# terminal state must satisfy 1 - alpha_bar_T >= this
TERMINAL_NOISE_FLOOR = 0.99


class ScheduleError(ValueError):
    """Invalid schedule construction or out-of-range diffusion step."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step variances of a discrete noising chain and derived quantities.

    betas[i] is the noise variance added at step t = i + 1. alphas = 1 - betas,
    alpha_bars the cumulative products, and posterior_vars the variances of
    the exact reverse conditional given the clean sample,

        var_t = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t

    with alpha_bar_0 = 1, so posterior_vars[0] == 0 and the final denoising
    step is deterministic given the clean prediction.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    @property
    def t_diff(self) -> int:
        return len(self.betas)

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.t_diff:
            raise ScheduleError(f"step t={t} outside [1, {self.t_diff}]")

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal retention after t steps; alpha_bar(0) == 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def posterior_var(self, t: int) -> float:
        self._check_t(t)
        return float(self.posterior_vars[t - 1])

    def marginal_coeffs(self, t: int) -> tuple[float, float]:
        """(signal, noise) scales of the t-step marginal: x_t = a*x_0 + b*eps."""
        ab = self.alpha_bar(t)
        return math.sqrt(ab), math.sqrt(1.0 - ab)

    def posterior_coeffs(self, t: int) -> tuple[float, float, float]:
        """Coefficients (on x0_hat, on x_t) of the posterior mean, plus its variance.

        Raises if 1 - alpha_bar_t has underflowed to zero; the posterior is
        undefined there and silently clamping would hide the broken schedule.
        """
        self._check_t(t)
        one_minus_ab = 1.0 - self.alpha_bar(t)
        if one_minus_ab <= 0.0:
            raise ScheduleError(
                f"posterior undefined at t={t}: 1 - alpha_bar_t underflowed to zero"
            )
        ab_prev = self.alpha_bar(t - 1)
        c_x0 = math.sqrt(ab_prev) * self.beta(t) / one_minus_ab
        c_xt = math.sqrt(self.alpha(t)) * (1.0 - ab_prev) / one_minus_ab
        return c_x0, c_xt, self.posterior_var(t)


def schedule_from_betas(
    betas, *, check_terminal: bool = True
) -> DiffusionSchedule:
    """Build a schedule from explicit per-step variances.

    ``check_terminal=False`` skips the near-pure-noise requirement on the
    final step; intended for tests probing the beta -> 0 identity limit.
    """
    b = np.asarray(betas, dtype=np.float64).ravel()
    t_diff = len(b)
    if not 1 <= t_diff <= MAX_STEPS:
        raise ScheduleError(f"need 1 <= T <= {MAX_STEPS} steps, got {t_diff}")
    if not np.all(np.isfinite(b)):
        raise ScheduleError("betas must be finite")
    if np.any(b <= 0.0) or np.any(b > 1.0):
        raise ScheduleError("betas must lie in (0, 1]")
    # beta = 1 destroys all signal; only the terminal step may do that,
    # otherwise alpha_bar would stop decreasing strictly.
    if np.any(b[:-1] >= 1.0):
        raise ScheduleError("beta_t = 1 is only allowed at the final step")

    alphas = 1.0 - b
    alpha_bars = np.cumprod(alphas)
    if check_terminal and 1.0 - alpha_bars[-1] < TERMINAL_NOISE_FLOOR:
        raise ScheduleError(
            f"terminal state retains too much signal: 1 - alpha_bar_T = "
            f"{1.0 - alpha_bars[-1]:.6g} < {TERMINAL_NOISE_FLOOR}"
        )

    prev = np.concatenate(([1.0], alpha_bars[:-1]))
    posterior_vars = (1.0 - prev) / (1.0 - alpha_bars) * b
    posterior_vars[0] = 0.0
    return DiffusionSchedule(
        betas=b, alphas=alphas, alpha_bars=alpha_bars, posterior_vars=posterior_vars
    )


def make_schedule(
    t_diff: int, beta_min: float = 0.3, beta_max: float = 0.95
) -> DiffusionSchedule:
    """Linear beta schedule over t_diff steps.

    Defaults reach 1 - alpha_bar_4 ~ 0.9955 at t_diff = 4, comfortably past
    the near-pure-noise floor. Construction fails if the resulting terminal
    state keeps more than 1% of the signal variance.
    """
    if not isinstance(t_diff, int) or isinstance(t_diff, bool):
        raise ScheduleError(f"t_diff must be an int, got {type(t_diff).__name__}")
    if not 1 <= t_diff <= MAX_STEPS:
        raise ScheduleError(f"need 1 <= t_diff <= {MAX_STEPS}, got {t_diff}")
    if not (math.isfinite(beta_min) and math.isfinite(beta_max)):
        raise ScheduleError("beta_min/beta_max must be finite")
    if not 0.0 < beta_min <= beta_max <= 1.0:
        raise ScheduleError(
            f"need 0 < beta_min <= beta_max <= 1, got ({beta_min}, {beta_max})"
        )
    betas = np.linspace(beta_min, beta_max, t_diff)
    return schedule_from_betas(betas)


def _is_torch(x) -> bool:
    return torch is not None and isinstance(x, torch.Tensor)


def _all_finite(x) -> bool:
    if _is_torch(x):
        return bool(torch.isfinite(x).all())
    return bool(np.all(np.isfinite(x)))


def _randn_like(x, rng):
    """Standard-normal noise shaped like x, from a numpy or torch generator."""
    if _is_torch(x):
        if not isinstance(rng, torch.Generator):
            raise TypeError("torch inputs need a torch.Generator for noise")
        return torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)
    if not isinstance(rng, np.random.Generator):
        raise TypeError("numpy inputs need a numpy.random.Generator for noise")
    return rng.standard_normal(size=np.shape(x))


def forward_step_sample(x_prev, t: int, sched: DiffusionSchedule, rng=None, *, eps=None):
    """One forward noising step: sqrt(1 - beta_t) * x_prev + sqrt(beta_t) * eps.

    Pass ``eps`` to make the draw deterministic (tests inject eps = 0).
    """
    sched._check_t(t)
    if not _all_finite(x_prev):
        raise ValueError("x_prev contains non-finite values")
    if eps is None:
        eps = _randn_like(x_prev, rng)
    beta = sched.beta(t)
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * eps


def forward_marginal_sample(x0, t: int, sched: DiffusionSchedule, rng=None, *, eps=None):
    """Closed-form t-step noising: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    sched._check_t(t)
    if eps is None:
        eps = _randn_like(x0, rng)
    a, b = sched.marginal_coeffs(t)
    return a * x0 + b * eps


def posterior_params(x0_hat, x_t, t: int, sched: DiffusionSchedule):
    """Mean and variance of the reverse conditional given a clean prediction.

    mean = c_x0 * x0_hat + c_xt * x_t with coefficients from the schedule;
    variance is scalar. At t = 1 the variance is 0 and the mean collapses
    onto x0_hat.
    """
    c_x0, c_xt, var = sched.posterior_coeffs(t)
    return c_x0 * x0_hat + c_xt * x_t, var


def sample_posterior(x0_hat, x_t, t: int, sched: DiffusionSchedule, rng=None, *, eps=None):
    """Draw x_{t-1} from the reverse posterior around a clean prediction.

    Deterministic at t = 1 (zero posterior variance; returns x0_hat without
    consuming randomness).
    """
    if t == 1:
        sched._check_t(t)
        return x0_hat
    mean, var = posterior_params(x0_hat, x_t, t, sched)
    if eps is None:
        eps = _randn_like(x_t, rng)
    return mean + math.sqrt(var) * eps


def denoise_step(x_t, t: int, generator, z, sched: DiffusionSchedule, rng=None, *, eps=None):
    """One generator-driven denoising step.

    The generator predicts the clean sample from (x_t, z, t); x_{t-1} is then
    drawn from the exact posterior around that prediction. Returns
    (x_prev, x0_hat). Non-finite predictions abort the step.
    """
    sched._check_t(t)
    x0_hat = generator(x_t, z, t)
    if not _all_finite(x0_hat):
        raise ValueError(f"generator produced non-finite output at t={t}")
    return sample_posterior(x0_hat, x_t, t, sched, rng, eps=eps), x0_hat


def gaussian_reverse_step(x_t, t: int, mu_predictor, sched: DiffusionSchedule, rng=None, *, eps=None):
    """Baseline Gaussian reverse step: mu(x_t, t) plus fixed-variance noise.

    The per-step variance is the posterior variance, so the step to t = 0 is
    deterministic. Kept as a comparison baseline for the adversarial sampler.
    """
    sched._check_t(t)
    mu = mu_predictor(x_t, t)
    var = sched.posterior_var(t)
    if var == 0.0:
        return mu
    if eps is None:
        eps = _randn_like(x_t, rng)
    return mu + math.sqrt(var) * eps
