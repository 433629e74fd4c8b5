"""Deterministic seed derivation: one master seed expands to per-stage streams.

Scheme: sha256 over the repr of (master, *labels), truncated to 64 bits.
Labels are free-form (stage name, step index, utterance index), so any
partial pipeline re-run sees exactly the same stream as the full run.
"""

from __future__ import annotations

import hashlib

import numpy as np


def seed_for(master: int, *labels) -> int:
    digest = hashlib.sha256(repr((int(master),) + tuple(labels)).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master: int, *labels) -> np.random.Generator:
    return np.random.default_rng(seed_for(master, *labels))
