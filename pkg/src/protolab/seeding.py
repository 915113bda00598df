"""Seed splitting: every random stream derives from one master seed.

A stream is identified by a short label (``"init"``, ``"corrupt"``, ...). The
derived seed is the first 32-bit word of ``SeedSequence([master, *label
bytes])``, so streams are independent of each other and of call order.
"""

from __future__ import annotations

import numpy as np


def derive_seed(master: int, label: str) -> int:
    entropy = [int(master)] + list(label.encode("utf-8"))
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def derive_rng(master: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, label))
