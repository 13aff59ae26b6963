"""Named random streams derived from one root seed.

Every consumer (environment, negative sampling, network init, policy) asks for
its own stream by name, so two runs that differ in one component keep the
others bit-identical.
"""
from __future__ import annotations

import zlib

import numpy as np
import torch

STREAM_NAMES = ("env", "negatives", "init", "policy", "data", "eval")


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def seed_sequence(root_seed: int, name: str, *sub: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(root_seed), spawn_key=(_key(name), *map(int, sub)))


def stream(root_seed: int, name: str, *sub: int) -> np.random.Generator:
    """A numpy Generator for the stream ``name`` (optionally sub-indexed)."""
    return np.random.default_rng(seed_sequence(root_seed, name, *sub))


def derive_seed(root_seed: int, name: str, *sub: int) -> int:
    return int(seed_sequence(root_seed, name, *sub).generate_state(1, dtype=np.uint32)[0])


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g
