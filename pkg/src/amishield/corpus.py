"""Synthetic labeled payload pools for training and simulation.

Normal payloads are dominated by printable bytes (telemetry readings,
ASCII headers); malware payloads are dominated by extended bytes
(packed or encrypted content). The dominant fraction is drawn per
payload from [0.6, 0.9], so the two populations are separable in
class-fraction feature space without being degenerate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bytevis, detector

PRINTABLE = np.arange(0x20, 0x7F, dtype=np.uint8)
EXTENDED = np.arange(0x80, 0xFF, dtype=np.uint8)


@dataclass(frozen=True)
class Corpus:
    normal: tuple[bytes, ...]
    malware: tuple[bytes, ...]


def _payload(rng, dominant, size):
    frac = rng.uniform(0.6, 0.9)
    n_dom = int(round(frac * size))
    body = np.concatenate(
        [
            rng.choice(dominant, size=n_dom),
            rng.integers(0, 256, size=size - n_dom, dtype=np.int64).astype(np.uint8),
        ]
    )
    rng.shuffle(body)
    return body.tobytes()


def synthetic_corpus(
    n_normal: int,
    n_malware: int,
    seed: int = 0,
    min_size: int = 200,
    max_size: int = 1023,
) -> Corpus:
    """Generate a labeled payload pool, every payload under 1 KiB."""
    rng = np.random.default_rng(seed)
    sizes_n = rng.integers(min_size, max_size + 1, size=n_normal)
    sizes_m = rng.integers(min_size, max_size + 1, size=n_malware)
    normal = tuple(_payload(rng, PRINTABLE, int(s)) for s in sizes_n)
    malware = tuple(_payload(rng, EXTENDED, int(s)) for s in sizes_m)
    return Corpus(normal, malware)


def features_for_payloads(payloads, order: int = 5, quadrants: int = 4) -> np.ndarray:
    """Render each payload (first chunk) and featurize it."""
    rows = []
    for p in payloads:
        img = bytevis.render(p, order=order)[0]
        rows.append(detector.featurize(img, quadrants))
    return np.array(rows)


def labeled_features(
    n_normal: int,
    n_malware: int,
    seed: int = 0,
    order: int = 5,
    quadrants: int = 4,
):
    """Feature matrix and 0/1 labels for a fresh synthetic corpus."""
    corpus = synthetic_corpus(n_normal, n_malware, seed)
    X = features_for_payloads(corpus.normal + corpus.malware, order, quadrants)
    y = np.concatenate([np.zeros(n_normal), np.ones(n_malware)])
    return X, y
