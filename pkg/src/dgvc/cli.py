"""Command-line surface tying the pipeline together.

One JSON experiment config drives every command; flags override config
values and the merged effective config is echoed into the output directory,
so any results directory is reproducible on its own. Every failure exits
with a machine-parseable single line on stderr:

    error class=<slug> detail="..."

Exit codes: 0 ok, 2 config error, 3 missing input, 4 unreadable data file,
5 diagnostic failure, 6 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import evalkit, schedule
from .features import (
    CorpusConfig,
    FeatureFormatError,
    FeatureSequence,
    make_synthetic_corpus,
    read_features,
    write_features,
)
from .nets import CheckpointFormatError, DiscriminatorSpec, GeneratorSpec
from .trainer import (
    DIRECTIONS,
    TrainConfig,
    TrainingDiverged,
    convert,
    load_train_state,
    train_loop,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_DIAG = 5
EXIT_DIVERGED = 6

log = logging.getLogger("dgvc")


class ConfigError(Exception):
    """Experiment config is malformed."""


@dataclass(frozen=True)
class ScheduleConfig:
    t_diff: int = 4
    beta_min: float = 0.3
    beta_max: float = 0.95

    def build(self) -> schedule.DiffusionSchedule:
        return schedule.make_schedule(self.t_diff, self.beta_min, self.beta_max)


@dataclass(frozen=True)
class PathsConfig:
    corpus_dir: str = "corpus"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _dataclass_from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value in {where}: {exc}") from exc


# keys of TrainConfig that the config file must not set directly because the
# experiment config derives them from other sections
_DERIVED_TRAIN_KEYS = ("t_diff", "latent_dim", "seed")


def parse_experiment_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    known = {"seed", "schedule", "generator", "discriminator", "train", "corpus", "paths"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")

    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    sched_cfg = _dataclass_from_dict(ScheduleConfig, data.get("schedule", {}), "schedule")
    gen_spec = _dataclass_from_dict(GeneratorSpec, data.get("generator", {}), "generator")
    disc_spec = _dataclass_from_dict(
        DiscriminatorSpec, data.get("discriminator", {}), "discriminator"
    )
    corpus_cfg = _dataclass_from_dict(CorpusConfig, data.get("corpus", {}), "corpus")
    paths_cfg = _dataclass_from_dict(PathsConfig, data.get("paths", {}), "paths")

    train_section = dict(data.get("train", {}))
    for key in _DERIVED_TRAIN_KEYS:
        if key in train_section:
            raise ConfigError(
                f"train.{key} is derived from other sections and cannot be set directly"
            )
    train_cfg = _dataclass_from_dict(TrainConfig, train_section, "train")
    train_cfg = dataclasses.replace(
        train_cfg, t_diff=sched_cfg.t_diff, latent_dim=gen_spec.latent_dim, seed=seed
    )

    cfg = ExperimentConfig(
        seed=seed,
        schedule=sched_cfg,
        generator=gen_spec,
        discriminator=disc_spec,
        train=train_cfg,
        corpus=corpus_cfg,
        paths=paths_cfg,
    )
    _validate_experiment(cfg)
    return cfg


def _validate_experiment(cfg: ExperimentConfig) -> None:
    try:
        cfg.schedule.build()
        cfg.generator.validate()
        cfg.discriminator.validate()
        cfg.train.validate()
        cfg.corpus.validate()
    except (ValueError, schedule.ScheduleError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.generator.feature_dim != cfg.corpus.feature_dim:
        raise ConfigError("generator.feature_dim must match corpus.feature_dim")
    if cfg.discriminator.feature_dim != cfg.corpus.feature_dim:
        raise ConfigError("discriminator.feature_dim must match corpus.feature_dim")


def load_experiment_config(path, seed_override: int | None = None) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p} does not exist")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON: {exc}") from exc
    if seed_override is not None:
        data["seed"] = seed_override
    return parse_experiment_config(data)


def _echo_config(cfg: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(json.dumps(cfg.to_dict(), indent=2))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _corpus_filename(speaker: str, split: str, index: int) -> str:
    return f"{speaker}_{split}_{index:03d}.dgvc"


def cmd_make_corpus(cfg: ExperimentConfig, out_dir: Path) -> int:
    _echo_config(cfg, out_dir)
    rng = np.random.default_rng(cfg.seed)
    corpus_x, corpus_y, _ = make_synthetic_corpus(cfg.corpus, rng)
    entries = []
    for speaker, corpus in (("x", corpus_x), ("y", corpus_y)):
        for split, seqs in (("train", corpus.train), ("heldout", corpus.heldout)):
            for i, seq in enumerate(seqs):
                name = _corpus_filename(speaker, split, i)
                path = out_dir / name
                write_features(seq, path)
                entries.append(
                    {
                        "name": name,
                        "speaker": speaker,
                        "split": split,
                        "index": i,
                        "sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
                    }
                )
    manifest = {
        "seed": cfg.seed,
        "parallel_heldout": True,
        "files": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    log.info("wrote %d feature files to %s", len(entries), out_dir)
    return EXIT_OK


def _load_corpus_split(corpus_dir: Path, speaker: str, split: str) -> list[FeatureSequence]:
    paths = sorted(corpus_dir.glob(f"{speaker}_{split}_*.dgvc"))
    if not paths:
        raise FileNotFoundError(f"no {speaker}/{split} feature files under {corpus_dir}")
    return [read_features(p) for p in paths]


def cmd_train(cfg: ExperimentConfig, out_dir: Path, resume=None) -> int:
    _echo_config(cfg, out_dir)
    corpus_dir = Path(cfg.paths.corpus_dir)
    train_x = _load_corpus_split(corpus_dir, "x", "train")
    train_y = _load_corpus_split(corpus_dir, "y", "train")
    result = train_loop(
        cfg.train,
        train_x,
        train_y,
        out_dir,
        gen_spec=cfg.generator,
        disc_spec=cfg.discriminator,
        sched=cfg.schedule.build(),
        resume_from=resume,
    )
    log.info("final checkpoint: %s", result.final_checkpoint)
    print(result.final_checkpoint)
    return EXIT_OK


def cmd_convert(
    cfg: ExperimentConfig,
    checkpoint: Path,
    input_path: Path,
    direction: str,
    n_samples: int,
    out_dir: Path,
) -> int:
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}")
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint {checkpoint} does not exist")
    if not input_path.exists():
        raise FileNotFoundError(f"input {input_path} does not exist")
    _echo_config(cfg, out_dir)
    state = load_train_state(checkpoint)
    sched = cfg.schedule.build()
    rng = torch.Generator().manual_seed(cfg.seed)
    inputs = (
        sorted(input_path.glob("*.dgvc")) if input_path.is_dir() else [input_path]
    )
    if not inputs:
        raise FileNotFoundError(f"no .dgvc files under {input_path}")
    for path in inputs:
        seq = read_features(path)
        outs = convert(seq, direction, state, sched=sched, rng=rng, n_samples=n_samples)
        for k, out_seq in enumerate(outs):
            write_features(out_seq, out_dir / f"{path.stem}_s{k:02d}.dgvc")
    log.info("converted %d utterance(s) x %d sample(s)", len(inputs), n_samples)
    return EXIT_OK


def cmd_evaluate(
    cfg: ExperimentConfig, converted_dir: Path, reference_dir: Path, out_dir: Path,
    direction: str = "x2y",
) -> int:
    if not converted_dir.is_dir():
        raise FileNotFoundError(f"converted dir {converted_dir} does not exist")
    if not reference_dir.is_dir():
        raise FileNotFoundError(f"reference dir {reference_dir} does not exist")
    _echo_config(cfg, out_dir)
    refs = sorted(reference_dir.glob("*.dgvc"))
    if not refs:
        raise FileNotFoundError(f"no reference .dgvc files under {reference_dir}")
    pairs = []
    sample_groups = []
    for ref_path in refs:
        conv_paths = sorted(converted_dir.glob(f"{ref_path.stem}_s*.dgvc"))
        if not conv_paths:
            exact = converted_dir / ref_path.name
            conv_paths = [exact] if exact.exists() else []
        if not conv_paths:
            raise FileNotFoundError(f"no conversions for {ref_path.name} under {converted_dir}")
        ref = read_features(ref_path)
        group = [read_features(p) for p in conv_paths]
        pairs.extend((ref, conv) for conv in group)
        if len(group) >= 2:
            sample_groups.append(group)
    report = evalkit.evaluate_pairs(pairs, direction, sample_groups or None)
    json_path, csv_path = evalkit.write_reports([report], out_dir)
    log.info("evaluation written to %s and %s", json_path, csv_path)
    print(f"mcd_mean_db={report.mcd_mean:.4f} n={len(report.mcd_per_utterance)}")
    return EXIT_OK


def _diag_checks(cfg: ExperimentConfig):
    """Schedule inspection: invariants plus small-sample statistical oracles.

    Yields (name, passed, detail) triples.
    """
    sched = cfg.schedule.build()
    rng = np.random.default_rng(cfg.seed)

    bars = np.concatenate(([1.0], sched.alpha_bars))
    yield (
        "alpha_bar_strictly_decreasing",
        bool(np.all(np.diff(bars) < 0)),
        f"alpha_bars={sched.alpha_bars.tolist()}",
    )
    yield ("posterior_var_zero_at_t1", sched.posterior_vars[0] == 0.0, "")
    yield (
        "terminal_near_pure_noise",
        1.0 - sched.alpha_bars[-1] >= schedule.TERMINAL_NOISE_FLOOR,
        f"1-alpha_bar_T={1.0 - sched.alpha_bars[-1]:.6f}",
    )

    # iterated single steps vs closed-form marginal, first two moments
    n = 20_000
    x0 = np.full(n, 0.8)
    ok = True
    detail = []
    for t in range(1, sched.t_diff + 1):
        x = x0
        for s in range(1, t + 1):
            x = schedule.forward_step_sample(x, s, sched, rng)
        a, b = sched.marginal_coeffs(t)
        mean_se = b / np.sqrt(n) if b > 0 else 1e-12
        var_se = b * b * np.sqrt(2.0 / (n - 1)) if b > 0 else 1e-12
        dm = abs(x.mean() - a * 0.8)
        dv = abs(x.var(ddof=1) - b * b)
        if dm > 4 * mean_se or dv > 4 * var_se:
            ok = False
        detail.append(f"t={t}: dmean={dm:.2e} dvar={dv:.2e}")
    yield ("marginal_matches_iterated_steps", ok, "; ".join(detail))

    # grid oracle for the reverse posterior on a scalar instance
    ok = True
    detail = []
    for t in range(2, sched.t_diff + 1):
        x0v, xtv = 0.7, -0.4
        grid = np.linspace(-8.0, 8.0, 8001)
        a_prev, b_prev = sched.marginal_coeffs(t - 1)
        beta = sched.beta(t)
        log_like = -0.5 * (xtv - np.sqrt(1 - beta) * grid) ** 2 / beta
        log_prior = -0.5 * (grid - a_prev * x0v) ** 2 / (b_prev**2)
        w = np.exp(log_like + log_prior - np.max(log_like + log_prior))
        w /= w.sum()
        gmean = float((w * grid).sum())
        gvar = float((w * (grid - gmean) ** 2).sum())
        mean, var = schedule.posterior_params(np.float64(x0v), np.float64(xtv), t, sched)
        if abs(gmean - float(mean)) > 1e-3 or abs(gvar - var) > 1e-3:
            ok = False
        detail.append(f"t={t}: dmean={abs(gmean - float(mean)):.2e} dvar={abs(gvar - var):.2e}")
    yield ("posterior_matches_grid_bayes", ok, "; ".join(detail))

    # chain determinism under a fixed seed with a stub generator
    target = np.linspace(-1, 1, 12).reshape(3, 4)
    stub = lambda x, z, t: target
    outs = []
    for _ in range(2):
        crng = np.random.default_rng(cfg.seed)
        x = crng.standard_normal((3, 4))
        for t in range(sched.t_diff, 0, -1):
            x, _ = schedule.denoise_step(x, t, stub, None, sched, crng)
        outs.append(x)
    yield (
        "denoising_chain_bit_reproducible",
        bool(np.array_equal(outs[0], outs[1])),
        "",
    )


def cmd_diffusion_diag(cfg: ExperimentConfig, out_dir: Path | None) -> int:
    if out_dir is not None:
        _echo_config(cfg, out_dir)
    failures = 0
    lines = []
    for name, passed, detail in _diag_checks(cfg):
        status = "ok" if passed else "FAIL"
        line = f"{status} {name}" + (f" ({detail})" if detail and not passed else "")
        lines.append(line)
        print(line)
        failures += 0 if passed else 1
    if out_dir is not None:
        (out_dir / "diffusion_diag.txt").write_text("\n".join(lines) + "\n")
    if failures:
        raise DiagnosticFailure(f"{failures} diffusion diagnostic(s) failed")
    return EXIT_OK


class DiagnosticFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgvc",
        description="Few-step denoising-diffusion GAN voice conversion toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("make-corpus", help="generate the synthetic two-speaker corpus")
    common(p)

    p = sub.add_parser("train", help="train both conversion directions")
    common(p)
    p.add_argument("--iterations", type=int, default=None, help="override train.iterations")
    p.add_argument("--checkpoint", default=None, help="resume from this checkpoint")

    p = sub.add_parser("convert", help="convert feature files with a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--input", required=True, help="feature file or directory")
    p.add_argument("--direction", required=True, choices=list(DIRECTIONS))
    p.add_argument("--n-samples", type=int, default=1, help="conversions per utterance")

    p = sub.add_parser("evaluate", help="score converted features against references")
    common(p)
    p.add_argument("--converted", required=True, help="directory of converted files")
    p.add_argument("--reference", required=True, help="directory of reference files")
    p.add_argument("--direction", default="x2y", choices=list(DIRECTIONS))

    p = sub.add_parser("diffusion-diag", help="verify schedule invariants and oracles")
    common(p, out_required=False)
    p.add_argument("--out", default=None, help="optional report directory")

    return parser


def _configure_logging() -> None:
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("DGVC_LOG", "info"), logging.INFO
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _fail(code: int, error_class: str, detail: str) -> int:
    print(f"error class={error_class} detail={json.dumps(detail)}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_experiment_config(args.config, seed_override=args.seed)
        if args.command == "train" and args.iterations is not None:
            if args.iterations < 0:
                raise ConfigError("--iterations must be >= 0")
            cfg = dataclasses.replace(
                cfg, train=dataclasses.replace(cfg.train, iterations=args.iterations)
            )
        if args.command == "make-corpus":
            return cmd_make_corpus(cfg, Path(args.out))
        if args.command == "train":
            resume = Path(args.checkpoint) if args.checkpoint else None
            if resume is not None and not resume.exists():
                raise FileNotFoundError(f"checkpoint {resume} does not exist")
            return cmd_train(cfg, Path(args.out), resume=resume)
        if args.command == "convert":
            return cmd_convert(
                cfg,
                Path(args.checkpoint),
                Path(args.input),
                args.direction,
                args.n_samples,
                Path(args.out),
            )
        if args.command == "evaluate":
            return cmd_evaluate(
                cfg, Path(args.converted), Path(args.reference), Path(args.out),
                direction=args.direction,
            )
        if args.command == "diffusion-diag":
            return cmd_diffusion_diag(cfg, Path(args.out) if args.out else None)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config_invalid", str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing_input", str(exc))
    except (FeatureFormatError, CheckpointFormatError) as exc:
        return _fail(EXIT_FORMAT, "bad_data_file", str(exc))
    except DiagnosticFailure as exc:
        return _fail(EXIT_DIAG, "diagnostic_failed", str(exc))
    except TrainingDiverged as exc:
        return _fail(EXIT_DIVERGED, "training_diverged", str(exc))


if __name__ == "__main__":
    sys.exit(main())
