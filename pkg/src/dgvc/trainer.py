"""Unpaired two-direction training over the denoising chain, and conversion.

Two generators (X->Y, Y->X) and two step-conditioned patch discriminators are
trained adversarially on (x_{t-1}, x_t) pairs: real pairs come from ancestral
forward noising of target-domain data, fake pairs re-noise the generator's
clean prediction through the exact posterior. Cycle-consistency re-diffuses
the prediction at a fresh step and maps it back with the opposite generator;
identity mapping asks a generator to reconstruct diffused samples of its own
target domain.

Everything random is drawn from named per-purpose torch generators whose
states live in the checkpoint, so a resumed run reproduces an uninterrupted
one bit-exactly.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import objectives
from .features import (
    FeatureSequence,
    SpeakerStats,
    compute_speaker_stats,
    convert_logf0,
    denormalize_mcep,
    normalize_mcep,
)
from .nets import (
    DiscriminatorSpec,
    Generator,
    GeneratorSpec,
    PatchDiscriminator,
    build_discriminator,
    build_generator,
    load_module_arrays,
    module_arrays,
    read_checkpoint,
    write_checkpoint,
)
from .objectives import LossReport, NonFiniteLossError
from .schedule import (
    DiffusionSchedule,
    forward_marginal_sample,
    forward_step_sample,
    denoise_step,
    make_schedule,
    sample_posterior,
    schedule_from_betas,
)

DIRECTIONS = ("x2y", "y2x")


class TrainingDiverged(RuntimeError):
    """A loss or network output became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    g_lr: float = 2e-4
    d_lr: float = 1e-4
    momentum: float = 0.5
    optimizer: str = "sgd"  # "sgd" (heavy ball) or "adam" (beta1 = momentum)
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    t_diff: int = 4
    latent_dim: int = 16
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    # identity term switches off once step >= this; None means 20% of iterations
    id_anneal_steps: int | None = None
    crop_len: int = 64
    seed: int = 0
    checkpoint_every: int = 500
    r1_gamma: float = 0.0

    def validate(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.g_lr < 0 or self.d_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.t_diff < 1 or self.latent_dim < 1 or self.crop_len < 1:
            raise ValueError("t_diff, latent_dim and crop_len must be positive")
        if self.lambda_cyc < 0 or self.lambda_id < 0 or self.r1_gamma < 0:
            raise ValueError("loss weights must be >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.id_anneal_steps is not None and self.id_anneal_steps < 0:
            raise ValueError("id_anneal_steps must be >= 0")

    def effective_id_anneal_steps(self) -> int:
        if self.id_anneal_steps is not None:
            return self.id_anneal_steps
        return int(0.2 * self.iterations)


@dataclass
class RngStreams:
    """Named randomness sources; states are checkpointed individually so
    concurrent refactoring of one consumer cannot silently shift another."""

    data: torch.Generator
    noise: torch.Generator
    z: torch.Generator
    t: torch.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RngStreams":
        children = np.random.SeedSequence(seed).spawn(4)
        gens = [
            torch.Generator().manual_seed(int(c.generate_state(1, dtype=np.uint64)[0]))
            for c in children
        ]
        return cls(*gens)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            f"rng.{name}": getattr(self, name).get_state().numpy().astype(np.uint8)
            for name in ("data", "noise", "z", "t")
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in ("data", "noise", "z", "t"):
            key = f"rng.{name}"
            if key not in arrays:
                raise KeyError(f"checkpoint missing RNG state {key!r}")
            getattr(self, name).set_state(torch.from_numpy(arrays[key].copy()))


@dataclass
class TrainState:
    g_xy: Generator
    g_yx: Generator
    d_x: PatchDiscriminator
    d_y: PatchDiscriminator
    opt_state: dict[str, torch.Tensor]
    step: int
    rngs: RngStreams
    config: TrainConfig
    gen_spec: GeneratorSpec
    disc_spec: DiscriminatorSpec
    sched: DiffusionSchedule
    stats_x: SpeakerStats
    stats_y: SpeakerStats

    def modules(self) -> dict[str, torch.nn.Module]:
        return {"g_xy": self.g_xy, "g_yx": self.g_yx, "d_x": self.d_x, "d_y": self.d_y}


def init_train_state(
    config: TrainConfig,
    gen_spec: GeneratorSpec,
    disc_spec: DiscriminatorSpec,
    sched: DiffusionSchedule,
    stats_x: SpeakerStats,
    stats_y: SpeakerStats,
) -> TrainState:
    config.validate()
    if sched.t_diff != config.t_diff:
        raise ValueError(f"schedule has {sched.t_diff} steps, config expects {config.t_diff}")
    if gen_spec.latent_dim != config.latent_dim:
        raise ValueError("generator latent_dim must match config.latent_dim")
    if config.crop_len % gen_spec.downsample_factor:
        raise ValueError("crop_len must be divisible by the generator downsample factor")

    seeds = [
        int(c.generate_state(1, dtype=np.uint64)[0])
        for c in np.random.SeedSequence(config.seed).spawn(5)
    ]
    state = TrainState(
        g_xy=build_generator(gen_spec, seed=seeds[0]),
        g_yx=build_generator(gen_spec, seed=seeds[1]),
        d_x=build_discriminator(disc_spec, seed=seeds[2]),
        d_y=build_discriminator(disc_spec, seed=seeds[3]),
        opt_state={},
        step=0,
        rngs=RngStreams.from_seed(seeds[4]),
        config=config,
        gen_spec=gen_spec,
        disc_spec=disc_spec,
        sched=sched,
        stats_x=stats_x,
        stats_y=stats_y,
    )
    _init_opt_state(state)
    return state


def _opt_slot_names(optimizer: str) -> tuple[str, ...]:
    return ("v",) if optimizer == "sgd" else ("m", "v")


def _init_opt_state(state: TrainState) -> None:
    slots = _opt_slot_names(state.config.optimizer)
    for net_name, module in state.modules().items():
        for pname, p in module.named_parameters():
            for slot in slots:
                state.opt_state[f"opt.{slot}.{net_name}.{pname}"] = torch.zeros_like(p)


# ---------------------------------------------------------------------------
# Optimizers (pure functional updates)
# ---------------------------------------------------------------------------


def optimizer_step(params, grads, moments, lr: float, momentum: float):
    """Heavy-ball momentum SGD: v' = momentum*v + g; p' = p - lr*v'.

    params/grads/moments are name-keyed tensor dicts; returns fresh
    (params', moments') without touching the inputs.
    """
    new_params, new_moments = {}, {}
    for key, p in params.items():
        v = momentum * moments[key] + grads[key]
        new_moments[key] = v
        new_params[key] = p - lr * v
    return new_params, new_moments


def adam_step(params, grads, m, v, step_index: int, lr: float, beta1: float,
              beta2: float, eps: float):
    """Standard bias-corrected Adam update; step_index counts from 1."""
    new_params, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - beta1**step_index
    bc2 = 1.0 - beta2**step_index
    for key, p in params.items():
        g = grads[key]
        m_k = beta1 * m[key] + (1.0 - beta1) * g
        v_k = beta2 * v[key] + (1.0 - beta2) * g * g
        new_m[key], new_v[key] = m_k, v_k
        new_params[key] = p - lr * (m_k / bc1) / ((v_k / bc2).sqrt() + eps)
    return new_params, new_m, new_v


def _apply_update(state: TrainState, net_name: str, lr: float) -> None:
    module = state.modules()[net_name]
    cfg = state.config
    params = {name: p.detach() for name, p in module.named_parameters()}
    grads = {
        name: (p.grad if p.grad is not None else torch.zeros_like(p))
        for name, p in module.named_parameters()
    }
    if cfg.optimizer == "sgd":
        moments = {name: state.opt_state[f"opt.v.{net_name}.{name}"] for name in params}
        new_params, new_v = optimizer_step(params, grads, moments, lr, cfg.momentum)
        for name in params:
            state.opt_state[f"opt.v.{net_name}.{name}"] = new_v[name]
    else:
        m = {name: state.opt_state[f"opt.m.{net_name}.{name}"] for name in params}
        v = {name: state.opt_state[f"opt.v.{net_name}.{name}"] for name in params}
        new_params, new_m, new_v = adam_step(
            params, grads, m, v, state.step + 1, lr, cfg.momentum, cfg.adam_beta2, cfg.adam_eps
        )
        for name in params:
            state.opt_state[f"opt.m.{net_name}.{name}"] = new_m[name]
            state.opt_state[f"opt.v.{net_name}.{name}"] = new_v[name]
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(new_params[name])


def _zero_grads(state: TrainState) -> None:
    for module in state.modules().values():
        module.zero_grad(set_to_none=True)


# ---------------------------------------------------------------------------
# Training step
# ---------------------------------------------------------------------------


def _randn(shape, rng: torch.Generator) -> torch.Tensor:
    return torch.randn(shape, generator=rng, dtype=torch.float32)


def _draw_t(state: TrainState) -> int:
    return 1 + int(torch.randint(state.config.t_diff, (1,), generator=state.rngs.t))


def _check_finite(x: torch.Tensor, what: str, step: int) -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise TrainingDiverged(f"{what} is non-finite at step {step}")
    return x


def _direction_pass(
    state: TrainState,
    src: torch.Tensor,
    tgt: torch.Tensor,
    g_fwd_name: str,
    g_bwd_name: str,
    disc_name: str,
) -> LossReport:
    cfg = state.config
    sched = state.sched
    rngs = state.rngs
    g_fwd: Generator = state.modules()[g_fwd_name]
    g_bwd: Generator = state.modules()[g_bwd_name]
    disc: PatchDiscriminator = state.modules()[disc_name]
    b = src.shape[0]

    t = _draw_t(state)

    # Real pair by ancestral forward sampling in the target domain:
    # x_{t-1} from the closed-form marginal, then one more noising step.
    tgt_prev = (
        tgt if t == 1 else forward_marginal_sample(tgt, t - 1, sched, eps=_randn(tgt.shape, rngs.noise))
    )
    tgt_t = forward_step_sample(tgt_prev, t, sched, eps=_randn(tgt.shape, rngs.noise))

    # Fake pair: predict the clean target from the diffused source, then
    # re-noise that prediction through the exact posterior (reparameterized,
    # so generator gradients flow through the pair).
    src_t = forward_marginal_sample(src, t, sched, eps=_randn(src.shape, rngs.noise))
    z = _randn((b, cfg.latent_dim), rngs.z)
    fake_clean = _check_finite(g_fwd(src_t, z, t), f"{g_fwd_name} output", state.step)
    fake_prev = sample_posterior(
        fake_clean, src_t, t, sched,
        eps=None if t == 1 else _randn(src.shape, rngs.noise),
    )

    try:
        _zero_grads(state)
        d_total, d_real, d_fake = objectives.d_loss(
            disc, (tgt_prev, tgt_t), (fake_prev.detach(), src_t), t
        )
        if cfg.r1_gamma > 0.0:
            d_total = d_total + objectives.r1_penalty(disc, (tgt_prev, tgt_t), t, cfg.r1_gamma)
        d_total.backward()
        _apply_update(state, disc_name, cfg.d_lr)

        _zero_grads(state)
        g_adv = objectives.g_adv_loss(disc, (fake_prev, src_t), t)

        t_cyc = _draw_t(state)
        rediff = forward_marginal_sample(
            fake_clean, t_cyc, sched, eps=_randn(src.shape, rngs.noise)
        )
        z_cyc = _randn((b, cfg.latent_dim), rngs.z)
        cycled = _check_finite(g_bwd(rediff, z_cyc, t_cyc), f"{g_bwd_name} cycle output", state.step)
        g_cyc = objectives.cycle_loss(src, cycled)

        lam_id = cfg.lambda_id if state.step < cfg.effective_id_anneal_steps() else 0.0
        if lam_id > 0.0:
            tgt_t_id = forward_marginal_sample(tgt, t, sched, eps=_randn(tgt.shape, rngs.noise))
            z_id = _randn((b, cfg.latent_dim), rngs.z)
            ident = _check_finite(g_fwd(tgt_t_id, z_id, t), f"{g_fwd_name} identity output", state.step)
            g_id = objectives.identity_loss(tgt, ident)
            g_id_value = float(g_id.detach())
        else:
            g_id = None
            g_id_value = 0.0

        total_g = g_adv + cfg.lambda_cyc * g_cyc
        if g_id is not None:
            total_g = total_g + lam_id * g_id
        total_g.backward()
        _apply_update(state, g_fwd_name, cfg.g_lr)
        _zero_grads(state)
    except NonFiniteLossError as exc:
        raise TrainingDiverged(f"{exc} (direction {g_fwd_name}, step {state.step})") from exc

    d_real_v, d_fake_v = float(d_real.detach()), float(d_fake.detach())
    g_adv_v, g_cyc_v = float(g_adv.detach()), float(g_cyc.detach())
    return LossReport(
        d_loss_real=d_real_v,
        d_loss_fake=d_fake_v,
        g_adv=g_adv_v,
        g_cyc=g_cyc_v,
        g_id=g_id_value,
        total_g=g_adv_v + cfg.lambda_cyc * g_cyc_v + lam_id * g_id_value,
        total_d=d_real_v + d_fake_v,
        t_sampled=t,
    )


def train_step(
    state: TrainState, batch_x: torch.Tensor, batch_y: torch.Tensor
) -> tuple[TrainState, LossReport, LossReport]:
    """One optimization step over both directions on unpaired batches.

    Batches are (B, Q, T) normalized feature crops of equal shape. The state
    is mutated in place and also returned.
    """
    if batch_x.shape != batch_y.shape:
        raise ValueError(f"batch shapes differ: {tuple(batch_x.shape)} vs {tuple(batch_y.shape)}")
    if batch_x.dim() != 3:
        raise ValueError("batches must be (B, Q, T)")
    if batch_x.shape[1] != state.gen_spec.feature_dim:
        raise ValueError(
            f"batch feature dim {batch_x.shape[1]} != spec {state.gen_spec.feature_dim}"
        )
    if batch_x.shape[2] % state.gen_spec.downsample_factor:
        raise ValueError("batch length not divisible by the generator downsample factor")

    report_xy = _direction_pass(state, batch_x, batch_y, "g_xy", "g_yx", "d_y")
    report_yx = _direction_pass(state, batch_y, batch_x, "g_yx", "g_xy", "d_x")
    state.step += 1
    return state, report_xy, report_yx


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_train_state(state: TrainState, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for net_name, module in state.modules().items():
        arrays.update(module_arrays(module, f"params.{net_name}"))
    for key, tensor in state.opt_state.items():
        arrays[key] = tensor.detach().cpu().numpy().astype(np.float32, copy=True)
    arrays.update(state.rngs.state_arrays())
    meta = {
        "kind": "train_state",
        "step": state.step,
        "config": asdict(state.config),
        "gen_spec": asdict(state.gen_spec),
        "disc_spec": asdict(state.disc_spec),
        "betas": [float(b) for b in state.sched.betas],
        "stats_x": state.stats_x.to_dict(),
        "stats_y": state.stats_y.to_dict(),
    }
    write_checkpoint(path, arrays, meta)


def load_train_state(path) -> TrainState:
    arrays, meta = read_checkpoint(path)
    if meta.get("kind") != "train_state":
        raise ValueError(f"{path}: not a training checkpoint")
    config = TrainConfig(**meta["config"])
    gen_spec = GeneratorSpec(**meta["gen_spec"])
    disc_spec = DiscriminatorSpec(**meta["disc_spec"])
    sched = schedule_from_betas(meta["betas"])
    state = init_train_state(
        config,
        gen_spec,
        disc_spec,
        sched,
        SpeakerStats.from_dict(meta["stats_x"]),
        SpeakerStats.from_dict(meta["stats_y"]),
    )
    for net_name, module in state.modules().items():
        load_module_arrays(module, arrays, f"params.{net_name}")
    for key in list(state.opt_state):
        if key not in arrays:
            raise KeyError(f"checkpoint missing optimizer slot {key!r}")
        state.opt_state[key] = torch.from_numpy(arrays[key].copy())
    state.rngs.load_state_arrays(arrays)
    state.step = int(meta["step"])
    return state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    final_checkpoint: Path
    metrics_path: Path
    state: TrainState


def _normalized_tensors(
    corpus: Sequence[FeatureSequence], stats: SpeakerStats, crop_len: int
) -> list[torch.Tensor]:
    tensors = []
    for i, seq in enumerate(corpus):
        if seq.n_frames < crop_len:
            raise ValueError(
                f"utterance {i} has {seq.n_frames} frames, shorter than crop_len {crop_len}"
            )
        tensors.append(
            torch.as_tensor(normalize_mcep(seq.mcep, stats), dtype=torch.float32)
        )
    return tensors


def _sample_crops(
    tensors: list[torch.Tensor], batch_size: int, crop_len: int, rng: torch.Generator
) -> torch.Tensor:
    crops = []
    for _ in range(batch_size):
        idx = int(torch.randint(len(tensors), (1,), generator=rng))
        mat = tensors[idx]
        max_off = mat.shape[1] - crop_len
        off = int(torch.randint(max_off + 1, (1,), generator=rng)) if max_off > 0 else 0
        crops.append(mat[:, off : off + crop_len])
    return torch.stack(crops)


def train_loop(
    config: TrainConfig,
    corpus_x: Sequence[FeatureSequence],
    corpus_y: Sequence[FeatureSequence],
    out_dir,
    gen_spec: GeneratorSpec | None = None,
    disc_spec: DiscriminatorSpec | None = None,
    sched: DiffusionSchedule | None = None,
    resume_from=None,
    log_every: int = 1,
) -> TrainResult:
    """Run train_step for config.iterations with periodic checkpoints and a
    JSONL metrics stream; resumable bit-exactly from any checkpoint."""
    config.validate()
    if not corpus_x or not corpus_y:
        raise ValueError("both training corpora must be non-empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state = load_train_state(resume_from)
        if state.config != config:
            raise ValueError("resume checkpoint was written with a different config")
    else:
        gen_spec = gen_spec if gen_spec is not None else GeneratorSpec(latent_dim=config.latent_dim)
        disc_spec = disc_spec if disc_spec is not None else DiscriminatorSpec()
        sched = sched if sched is not None else make_schedule(config.t_diff)
        stats_x = compute_speaker_stats(corpus_x)
        stats_y = compute_speaker_stats(corpus_y)
        state = init_train_state(config, gen_spec, disc_spec, sched, stats_x, stats_y)

    tensors_x = _normalized_tensors(corpus_x, state.stats_x, config.crop_len)
    tensors_y = _normalized_tensors(corpus_y, state.stats_y, config.crop_len)

    def ckpt_path(step: int) -> Path:
        return out / f"checkpoint_{step:06d}.ckpt"

    metrics_path = out / "metrics.jsonl"
    if state.step == 0:
        save_train_state(state, ckpt_path(0))

    last_path = ckpt_path(state.step) if state.step else ckpt_path(0)
    with metrics_path.open("a") as metrics:
        while state.step < config.iterations:
            started = time.perf_counter()
            batch_x = _sample_crops(tensors_x, config.batch_size, config.crop_len, state.rngs.data)
            batch_y = _sample_crops(tensors_y, config.batch_size, config.crop_len, state.rngs.data)
            state, rep_xy, rep_yx = train_step(state, batch_x, batch_y)
            if log_every and state.step % log_every == 0:
                record = {
                    "step": state.step,
                    "wall_time_s": time.perf_counter() - started,
                    "x2y": rep_xy.to_dict(),
                    "y2x": rep_yx.to_dict(),
                }
                metrics.write(json.dumps(record) + "\n")
            if state.step % config.checkpoint_every == 0 or state.step == config.iterations:
                last_path = ckpt_path(state.step)
                save_train_state(state, last_path)
        metrics.flush()

    if not last_path.exists():
        last_path = ckpt_path(state.step)
        save_train_state(state, last_path)
    return TrainResult(final_checkpoint=last_path, metrics_path=metrics_path, state=state)


# ---------------------------------------------------------------------------
# Conversion (inference chain)
# ---------------------------------------------------------------------------


def convert(
    x_src: FeatureSequence,
    direction: str,
    state: TrainState,
    sched: DiffusionSchedule | None = None,
    rng: torch.Generator | None = None,
    n_samples: int = 1,
) -> list[FeatureSequence]:
    """Convert one utterance, returning n_samples distinct renditions.

    The source is z-scored with its speaker's stats, diffused to the terminal
    step via the closed-form marginal, then denoised with the cross-domain
    generator (fresh latent every step); the clean output is de-normalized
    with the target speaker's stats. Log-F0 is remapped by the log-Gaussian
    transform and the aperiodicity payload passes through byte-for-byte.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if sched is None:
        sched = state.sched
    if sched.t_diff != state.sched.t_diff:
        raise ValueError(
            f"schedule ({sched.t_diff} steps) does not match checkpoint ({state.sched.t_diff})"
        )
    if not np.array_equal(sched.betas, state.sched.betas):
        raise ValueError("schedule betas do not match the checkpoint")
    if rng is None:
        raise ValueError("convert needs an explicit torch.Generator")

    if direction == "x2y":
        gen, src_stats, tgt_stats = state.g_xy, state.stats_x, state.stats_y
    else:
        gen, src_stats, tgt_stats = state.g_yx, state.stats_y, state.stats_x

    if x_src.n_frames % state.gen_spec.downsample_factor:
        raise ValueError(
            f"utterance length {x_src.n_frames} not divisible by "
            f"{state.gen_spec.downsample_factor}"
        )

    x0 = torch.as_tensor(normalize_mcep(x_src.mcep, src_stats), dtype=torch.float32)
    logf0 = convert_logf0(x_src.logf0, x_src.voiced, src_stats, tgt_stats).astype(np.float32)
    t_diff = sched.t_diff

    outputs = []
    with torch.no_grad():
        for _ in range(n_samples):
            x = forward_marginal_sample(
                x0, t_diff, sched, eps=_randn(x0.shape, rng)
            )
            for t in range(t_diff, 0, -1):
                z = _randn((state.gen_spec.latent_dim,), rng)
                x, _ = denoise_step(
                    x, t, gen, z, sched,
                    eps=None if t == 1 else _randn(x0.shape, rng),
                )
            mcep = denormalize_mcep(x.numpy().astype(np.float64), tgt_stats).astype(np.float32)
            outputs.append(
                FeatureSequence(
                    mcep=mcep,
                    logf0=logf0.copy(),
                    voiced=x_src.voiced.copy(),
                    ap=x_src.ap,
                    frame_rate=x_src.frame_rate,
                    sample_rate=x_src.sample_rate,
                )
            )
    return outputs
