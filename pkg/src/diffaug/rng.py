"""Named random substreams derived from a root seed. No global RNG state is used."""

from __future__ import annotations

import contextlib
import hashlib

import numpy as np
import torch


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any sequence of str/int parts."""
    key = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big") >> 1


def torch_gen(*parts) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(*parts))


def np_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


@contextlib.contextmanager
def seeded_init(*parts):
    """Run a block (module init, dropout) under a fixed torch seed without leaking global state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(*parts))
        yield
