"""Stand-in for an external acoustic analyzer, for tests and demos.

Implements the analyzer subprocess contract: ``python -m dgvc.fake_analyzer
<audio-path> <out-feature-path>`` reads the audio file's bytes, derives a
deterministic seed from them, and writes a plausible feature file. No actual
signal analysis happens here.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from .features import FeatureSequence, UNVOICED_LOGF0, write_features


def synthesize_features(payload: bytes, feature_dim: int = 35) -> FeatureSequence:
    digest = hashlib.sha256(payload).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    n_frames = 96 + 4 * int(rng.integers(0, 25))
    mcep = rng.normal(scale=0.5, size=(feature_dim, n_frames)) / (
        1.0 + np.arange(feature_dim)[:, None] ** 0.5
    )
    voiced = rng.random(n_frames) < 0.7
    if not voiced.any():
        voiced[:2] = True
    logf0 = np.full(n_frames, UNVOICED_LOGF0)
    logf0[voiced] = 4.8 + 0.2 * rng.standard_normal(int(voiced.sum()))
    return FeatureSequence(
        mcep=mcep.astype(np.float32),
        logf0=logf0.astype(np.float32),
        voiced=voiced,
        ap=digest,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fake-analyzer",
        description="Deterministic fake analyzer implementing the feature-file contract.",
    )
    parser.add_argument("audio", help="input audio file (any bytes)")
    parser.add_argument("out", help="output feature file path")
    args = parser.parse_args(argv)
    payload = Path(args.audio).read_bytes()
    write_features(synthesize_features(payload), args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
