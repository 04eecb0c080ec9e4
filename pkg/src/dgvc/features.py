"""Acoustic-feature handling.

Mel-cepstral (MCEP) sequences with a log-F0 track and an opaque aperiodicity
payload, per-speaker statistics, the log-Gaussian F0 transform, z-scoring of
MCEPs, a synthetic two-speaker corpus generator with known oracle conversions,
a binary feature-file format, and the subprocess adapter for external
analysis tools.
"""

from __future__ import annotations

import struct
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import lfilter

FEATURE_MAGIC = b"DGVC"
FEATURE_VERSION = 1

# Finite sentinel stored in logf0 on unvoiced frames; the voiced mask is
# authoritative, the sentinel just makes accidental use of unvoiced values
# blow up visibly instead of poisoning statistics quietly.
UNVOICED_LOGF0 = -1.0e9


class FeatureFormatError(Exception):
    """Feature file cannot be parsed."""


class MagicError(FeatureFormatError):
    """Leading magic bytes do not identify a feature file."""


class VersionError(FeatureFormatError):
    """Unsupported feature-file format version."""


class TruncatedError(FeatureFormatError):
    """File ends before the declared payload (or has trailing bytes)."""


class NonFiniteDataError(FeatureFormatError):
    """Payload contains NaN or infinity."""


class StatsError(ValueError):
    """Speaker statistics cannot be computed or are degenerate."""


class AnalyzerError(RuntimeError):
    """External feature analyzer failed or produced an unreadable file."""


@dataclass
class FeatureSequence:
    """One utterance worth of acoustic features.

    mcep is (Q, T) float32 with the 0th row the energy-like coefficient,
    logf0 is (T,) float32 carrying UNVOICED_LOGF0 where voiced is False, and
    ap is an opaque byte payload carried through conversion untouched.
    """

    mcep: np.ndarray
    logf0: np.ndarray
    voiced: np.ndarray
    ap: bytes = b""
    frame_rate: float = 200.0
    sample_rate: int = 16000

    def __post_init__(self) -> None:
        self.mcep = np.ascontiguousarray(self.mcep, dtype=np.float32)
        self.logf0 = np.ascontiguousarray(self.logf0, dtype=np.float32)
        self.voiced = np.ascontiguousarray(self.voiced, dtype=bool)
        if self.mcep.ndim != 2:
            raise ValueError(f"mcep must be 2-D (Q, T), got shape {self.mcep.shape}")
        q, t = self.mcep.shape
        if q < 1 or t < 1:
            raise ValueError(f"empty feature sequence: shape {self.mcep.shape}")
        if self.logf0.shape != (t,) or self.voiced.shape != (t,):
            raise ValueError("logf0/voiced length must match mcep frame count")
        if not np.all(np.isfinite(self.mcep)) or not np.all(np.isfinite(self.logf0)):
            raise ValueError("features contain non-finite values")
        if not isinstance(self.ap, (bytes, bytearray)):
            raise ValueError("ap payload must be bytes")
        self.ap = bytes(self.ap)
        if not self.frame_rate > 0:
            raise ValueError("frame_rate must be positive")

    @property
    def feature_dim(self) -> int:
        return self.mcep.shape[0]

    @property
    def n_frames(self) -> int:
        return self.mcep.shape[1]


@dataclass
class SpeakerStats:
    """Per-speaker moments: log-F0 over voiced frames, MCEP per dimension.

    Standard deviations use the n-1 (sample) convention and are strictly
    positive by construction.
    """

    logf0_mean: float
    logf0_std: float
    mcep_mean: np.ndarray
    mcep_std: np.ndarray

    def to_dict(self) -> dict:
        return {
            "logf0_mean": float(self.logf0_mean),
            "logf0_std": float(self.logf0_std),
            "mcep_mean": [float(v) for v in self.mcep_mean],
            "mcep_std": [float(v) for v in self.mcep_std],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpeakerStats":
        return cls(
            logf0_mean=float(d["logf0_mean"]),
            logf0_std=float(d["logf0_std"]),
            mcep_mean=np.asarray(d["mcep_mean"], dtype=np.float64),
            mcep_std=np.asarray(d["mcep_std"], dtype=np.float64),
        )


def compute_speaker_stats(corpus: Iterable[FeatureSequence]) -> SpeakerStats:
    """Sample mean/std of voiced log-F0 and per-dimension MCEP over a corpus."""
    seqs = list(corpus)
    if not seqs:
        raise StatsError("empty corpus")
    q = seqs[0].feature_dim
    if any(s.feature_dim != q for s in seqs):
        raise StatsError("corpus mixes feature dimensions")

    voiced_logf0 = np.concatenate(
        [s.logf0[s.voiced].astype(np.float64) for s in seqs]
    )
    if voiced_logf0.size == 0:
        raise StatsError("corpus has no voiced frames")
    if voiced_logf0.size < 2:
        raise StatsError("need at least 2 voiced frames for a std estimate")
    logf0_mean = float(np.mean(voiced_logf0))
    logf0_std = float(np.std(voiced_logf0, ddof=1))
    if logf0_std == 0.0:
        raise StatsError("log-F0 is constant over voiced frames; std would be zero")

    mcep = np.concatenate([s.mcep.astype(np.float64) for s in seqs], axis=1)
    if mcep.shape[1] < 2:
        raise StatsError("need at least 2 frames for MCEP stds")
    mcep_mean = np.mean(mcep, axis=1)
    mcep_std = np.std(mcep, axis=1, ddof=1)
    if np.any(mcep_std == 0.0):
        dims = np.nonzero(mcep_std == 0.0)[0].tolist()
        raise StatsError(f"constant MCEP dimensions {dims}; std would be zero")
    return SpeakerStats(logf0_mean, logf0_std, mcep_mean, mcep_std)


def convert_logf0(
    logf0: np.ndarray,
    voiced: np.ndarray,
    src: SpeakerStats,
    tgt: SpeakerStats,
) -> np.ndarray:
    """Log-Gaussian F0 transform: remap voiced frames onto target statistics.

    Unvoiced frames pass through unchanged. Returns float64.
    """
    if src.logf0_std == 0.0:
        raise StatsError("source log-F0 std is zero")
    x = np.asarray(logf0, dtype=np.float64)
    v = np.asarray(voiced, dtype=bool)
    if x.shape != v.shape:
        raise ValueError("logf0 and voiced mask must have the same shape")
    out = x.copy()
    out[v] = (x[v] - src.logf0_mean) / src.logf0_std * tgt.logf0_std + tgt.logf0_mean
    return out


def normalize_mcep(mcep: np.ndarray, stats: SpeakerStats) -> np.ndarray:
    """Per-dimension z-score; float64 output."""
    x = np.asarray(mcep, dtype=np.float64)
    return (x - stats.mcep_mean[:, None]) / stats.mcep_std[:, None]


def denormalize_mcep(mcep: np.ndarray, stats: SpeakerStats) -> np.ndarray:
    """Inverse of normalize_mcep."""
    x = np.asarray(mcep, dtype=np.float64)
    return x * stats.mcep_std[:, None] + stats.mcep_mean[:, None]


# ---------------------------------------------------------------------------
# Synthetic two-speaker corpus with known oracle conversions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusConfig:
    """Knobs for the synthetic corpus.

    Each speaker is a per-dimension monotone warp (slope + tanh bend + offset)
    of shared smooth content trajectories; warp parameters derive from the
    speaker seed, so two speakers with the same seed would be identical and
    are rejected.
    """

    feature_dim: int = 35
    n_train: int = 32
    n_heldout: int = 8
    min_len: int = 96
    max_len: int = 192
    len_multiple: int = 4
    frame_rate: float = 200.0
    sample_rate: int = 16000
    speaker_x_seed: int = 11
    speaker_y_seed: int = 29
    logf0_x_mean: float = 4.787
    logf0_x_std: float = 0.18
    logf0_y_mean: float = 5.394
    logf0_y_std: float = 0.25

    def validate(self) -> None:
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.n_train < 1 or self.n_heldout < 1:
            raise ValueError("need at least one train and one held-out utterance")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.len_multiple < 1:
            raise ValueError("len_multiple must be >= 1")
        if self.min_len // self.len_multiple < 1:
            raise ValueError("min_len shorter than len_multiple")
        if self.speaker_x_seed == self.speaker_y_seed:
            raise ValueError("speakers are identical (same warp seed); corpus is degenerate")
        if self.logf0_x_std <= 0 or self.logf0_y_std <= 0:
            raise ValueError("log-F0 stds must be positive")


@dataclass(frozen=True)
class SpeakerWarp:
    """Per-dimension monotone rendering of content: a*c + g*tanh(c) + b."""

    slope: np.ndarray
    tanh_gain: np.ndarray
    offset: np.ndarray
    logf0_mean: float
    logf0_std: float

    def render(self, content: np.ndarray) -> np.ndarray:
        return (
            self.slope[:, None] * content
            + self.tanh_gain[:, None] * np.tanh(content)
            + self.offset[:, None]
        )


# Amplitude envelope over cepstral dimensions: higher coefficients carry
# less energy, keeping distances in a plausible dB range.
_ENV_SCALE = 0.6
_ENV_DECAY = 0.5
_SLOPE_RANGE = (0.4, 0.7)
_TANH_GAIN_RANGE = (0.1, 0.35)
_OFFSET_RANGE = (-2.5, 2.5)
_CONTENT_RHO = 0.92
_SMOOTH_WINDOW = 5
_VOICED_THRESHOLD = -0.6


def _dimension_envelope(q: int) -> np.ndarray:
    return _ENV_SCALE / (1.0 + np.arange(q)) ** _ENV_DECAY


def _speaker_warp(seed: int, q: int, logf0_mean: float, logf0_std: float) -> SpeakerWarp:
    rng = np.random.default_rng(seed)
    env = _dimension_envelope(q)
    slope = env * rng.uniform(*_SLOPE_RANGE, size=q)
    tanh_gain = env * rng.uniform(*_TANH_GAIN_RANGE, size=q)
    offset = env * rng.uniform(*_OFFSET_RANGE, size=q)
    return SpeakerWarp(slope, tanh_gain, offset, logf0_mean, logf0_std)


def _smooth_trajectories(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Band-limited random walks: AR(1) driven to unit stationary variance,
    then box-smoothed. Burn-in trims the zero-state transient."""
    burn = 64
    n = shape[-1] + burn
    eps = rng.standard_normal(size=shape[:-1] + (n,))
    rho = _CONTENT_RHO
    ar = lfilter([np.sqrt(1.0 - rho**2)], [1.0, -rho], eps, axis=-1)
    ar = ar[..., burn:]
    return uniform_filter1d(ar, size=_SMOOTH_WINDOW, axis=-1, mode="nearest")


@dataclass(frozen=True)
class _Content:
    """Latent material behind one utterance, shared by parallel renditions."""

    trajectories: np.ndarray  # (Q, T)
    pitch: np.ndarray  # (T,)
    voiced: np.ndarray  # (T,)


def _draw_content(rng: np.random.Generator, q: int, n_frames: int) -> _Content:
    trajectories = _smooth_trajectories(rng, (q, n_frames))
    pitch = _smooth_trajectories(rng, (n_frames,))
    gate = _smooth_trajectories(rng, (n_frames,))
    voiced = gate > _VOICED_THRESHOLD
    if not voiced.any():  # keep stats computable on every utterance
        voiced = voiced.copy()
        voiced[: max(2, n_frames // 4)] = True
    return _Content(trajectories, pitch, voiced)


def _render(content: _Content, warp: SpeakerWarp, cfg: CorpusConfig, ap: bytes) -> FeatureSequence:
    logf0 = np.full(content.pitch.shape, UNVOICED_LOGF0, dtype=np.float64)
    logf0[content.voiced] = (
        warp.logf0_mean + warp.logf0_std * content.pitch[content.voiced]
    )
    return FeatureSequence(
        mcep=warp.render(content.trajectories).astype(np.float32),
        logf0=logf0.astype(np.float32),
        voiced=content.voiced,
        ap=ap,
        frame_rate=cfg.frame_rate,
        sample_rate=cfg.sample_rate,
    )


@dataclass
class SpeakerCorpus:
    train: list[FeatureSequence]
    heldout: list[FeatureSequence]


@dataclass
class OracleMap:
    """Index-aligned parallel renditions of the held-out content.

    pairs("x2y") yields (source, oracle-target) tuples; the oracle target is
    the other speaker's exact rendition of the same content.
    """

    heldout_x: list[FeatureSequence]
    heldout_y: list[FeatureSequence]

    def pairs(self, direction: str) -> list[tuple[FeatureSequence, FeatureSequence]]:
        if direction == "x2y":
            return list(zip(self.heldout_x, self.heldout_y))
        if direction == "y2x":
            return list(zip(self.heldout_y, self.heldout_x))
        raise ValueError(f"direction must be 'x2y' or 'y2x', got {direction!r}")


def make_synthetic_corpus(
    cfg: CorpusConfig, rng: np.random.Generator
) -> tuple[SpeakerCorpus, SpeakerCorpus, OracleMap]:
    """Generate unpaired training splits plus a parallel held-out split.

    Training utterances use disjoint content draws per speaker (non-parallel);
    held-out content is rendered by both speakers, giving an exact oracle
    conversion for evaluation. Deterministic given (cfg, rng state).
    """
    cfg.validate()
    warp_x = _speaker_warp(cfg.speaker_x_seed, cfg.feature_dim, cfg.logf0_x_mean, cfg.logf0_x_std)
    warp_y = _speaker_warp(cfg.speaker_y_seed, cfg.feature_dim, cfg.logf0_y_mean, cfg.logf0_y_std)

    def draw_len() -> int:
        n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        return max(cfg.len_multiple, (n // cfg.len_multiple) * cfg.len_multiple)

    def draw_ap(n_frames: int) -> bytes:
        return rng.bytes(2 * n_frames)

    train_x = []
    for _ in range(cfg.n_train):
        c = _draw_content(rng, cfg.feature_dim, draw_len())
        train_x.append(_render(c, warp_x, cfg, draw_ap(c.pitch.size)))
    train_y = []
    for _ in range(cfg.n_train):
        c = _draw_content(rng, cfg.feature_dim, draw_len())
        train_y.append(_render(c, warp_y, cfg, draw_ap(c.pitch.size)))

    heldout_x, heldout_y = [], []
    for _ in range(cfg.n_heldout):
        c = _draw_content(rng, cfg.feature_dim, draw_len())
        heldout_x.append(_render(c, warp_x, cfg, draw_ap(c.pitch.size)))
        heldout_y.append(_render(c, warp_y, cfg, draw_ap(c.pitch.size)))

    corpus_x = SpeakerCorpus(train=train_x, heldout=heldout_x)
    corpus_y = SpeakerCorpus(train=train_y, heldout=heldout_y)
    return corpus_x, corpus_y, OracleMap(heldout_x, heldout_y)


# ---------------------------------------------------------------------------
# Binary feature-file format
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIdI")  # magic, version, Q, T, frame_rate, sample_rate


def write_features(seq: FeatureSequence, path) -> None:
    """Serialize to the little-endian feature-file format (bit-exact round trip)."""
    q, t = seq.mcep.shape
    blob = bytearray()
    blob += _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, q, t, seq.frame_rate, seq.sample_rate)
    blob += seq.mcep.astype("<f4").tobytes(order="C")
    blob += seq.logf0.astype("<f4").tobytes()
    blob += seq.voiced.astype(np.uint8).tobytes()
    blob += struct.pack("<I", len(seq.ap))
    blob += seq.ap
    Path(path).write_bytes(bytes(blob))


def read_features(path) -> FeatureSequence:
    """Parse a feature file, rejecting malformed headers, truncation, trailing
    bytes and non-finite payloads with distinct error types."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TruncatedError(f"{path}: shorter than the fixed header")
    magic, version, q, t, frame_rate, sample_rate = _HEADER.unpack_from(data, 0)
    if magic != FEATURE_MAGIC:
        raise MagicError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise VersionError(f"{path}: unsupported version {version}")
    if q < 1 or t < 1:
        raise FeatureFormatError(f"{path}: empty sequence (Q={q}, T={t})")

    off = _HEADER.size

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise TruncatedError(f"{path}: truncated in {what}")
        chunk = data[off : off + n]
        off += n
        return chunk

    mcep = np.frombuffer(take(4 * q * t, "mcep"), dtype="<f4").reshape(q, t)
    logf0 = np.frombuffer(take(4 * t, "logf0"), dtype="<f4")
    voiced_u8 = np.frombuffer(take(t, "voiced mask"), dtype=np.uint8)
    if np.any(voiced_u8 > 1):
        raise FeatureFormatError(f"{path}: voiced mask bytes must be 0 or 1")
    (ap_len,) = struct.unpack("<I", take(4, "ap length"))
    ap = take(ap_len, "ap payload")
    if off != len(data):
        raise TruncatedError(f"{path}: {len(data) - off} trailing bytes")
    if not np.all(np.isfinite(mcep)) or not np.all(np.isfinite(logf0)):
        raise NonFiniteDataError(f"{path}: non-finite payload values")
    try:
        return FeatureSequence(
            mcep=mcep.copy(),
            logf0=logf0.copy(),
            voiced=voiced_u8.astype(bool),
            ap=bytes(ap),
            frame_rate=frame_rate,
            sample_rate=sample_rate,
        )
    except ValueError as exc:
        raise FeatureFormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# External analyzer adapter
# ---------------------------------------------------------------------------


def run_external_analyzer(
    command: Sequence[str], audio_path, out_path, timeout: float = 300.0
) -> FeatureSequence:
    """Invoke an external analysis tool through the subprocess contract.

    The tool is run as ``<command...> <audio_path> <out_path>`` and must exit
    0 after writing a valid feature file to out_path. This is the only
    boundary to vocoder-style analyzers; nothing in this package links one.
    """
    argv = [*command, str(audio_path), str(out_path)]
    try:
        proc = subprocess.run(argv, capture_output=True, timeout=timeout)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise AnalyzerError(f"analyzer {argv[0]!r} failed to run: {exc}") from exc
    if proc.returncode != 0:
        tail = proc.stderr.decode(errors="replace").strip()[-500:]
        raise AnalyzerError(f"analyzer exited with {proc.returncode}: {tail}")
    try:
        return read_features(out_path)
    except FeatureFormatError as exc:
        raise AnalyzerError(f"analyzer wrote an invalid feature file: {exc}") from exc
