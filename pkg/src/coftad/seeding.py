"""Deterministic random-stream derivation.

Every random draw in a run derives from one integer run seed. Independent
streams are split off by hashing string labels (and optional integers) into
a numpy SeedSequence, so permuting work items or adding new consumers never
perturbs the draws of existing ones.
"""

from __future__ import annotations

import zlib
from contextlib import contextmanager
from typing import Iterator

import numpy as np
import torch


def _label_key(label: str | int) -> int:
    if isinstance(label, int):
        return label & 0xFFFFFFFF
    return zlib.crc32(label.encode("utf-8"))


def seed_stream(seed: int, *labels: str | int) -> np.random.Generator:
    """Return an independent generator for (seed, labels).

    The same (seed, labels) tuple always yields the same stream; distinct
    label paths yield statistically independent streams.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_label_key(l) for l in labels]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def child_seed(seed: int, *labels: str | int) -> int:
    """Collapse (seed, labels) to a single derived integer seed."""
    return int(seed_stream(seed, *labels).integers(0, 2**63 - 1))


@contextmanager
def torch_seed(seed: int) -> Iterator[None]:
    """Run a block under a fixed torch RNG state without leaking it.

    Used for deterministic parameter initialization; the surrounding global
    RNG state is restored on exit.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
        yield
