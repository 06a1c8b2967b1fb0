"""Deterministic per-purpose random streams derived from one run seed."""

import zlib

import numpy as np


def purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def derive_rng(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for ``purpose``; stable across versions for a fixed seed."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, purpose_key(purpose)])
    return np.random.default_rng(ss)
