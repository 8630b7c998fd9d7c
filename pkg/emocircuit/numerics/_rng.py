"""
Seeded random streams.

Every generator is numpy's PCG64 seeded through `numpy.random.SeedSequence`, so a seed names
the same stream on every platform and numpy release that keeps these two algorithms. Named
sub-streams come from `derive_seed`, which feeds the parent seed and the labels to a
SeedSequence and keeps its first 64-bit word.
"""

import numpy as np

_SEED_LIMIT = 2**64


def seeded_rng(seed: int) -> np.random.Generator:
    """
    Deterministic generator for weights, datasets and random controls.

    The stream is numpy's PCG64 bit generator (PCG-XSL-RR 128/64), with the 64-bit seed expanded
    to its 128-bit state by `numpy.random.SeedSequence`. Gaussian draws use numpy's ziggurat
    `standard_normal`. These algorithms are fixed; changing any of them changes every weight file
    and dataset generated from a seed.

    Raises:
        ValueError: If `seed` is negative or does not fit in 64 bits.
    """
    if isinstance(seed, bool) or not 0 <= int(seed) < _SEED_LIMIT:
        raise ValueError(f"seed must be an integer in [0, 2**64), got {seed!r}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def derive_seed(seed: int, *labels: int | str) -> int:
    """Child seed for a named sub-stream (e.g. one emotion's plant), stable across runs."""
    words = [int(seed)]
    for label in labels:
        if isinstance(label, str):
            words.extend(label.encode("utf-8"))
        else:
            words.append(int(label))
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0])
