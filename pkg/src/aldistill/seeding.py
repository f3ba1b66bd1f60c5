"""Deterministic seed derivation shared by augmentation, MC dropout and the AL loop."""

import numpy as np

_MASK64 = (1 << 64) - 1


def _words(value):
    v = int(value) & _MASK64
    return [v & 0xFFFFFFFF, v >> 32]


def mix_seed(*parts) -> int:
    """Combine integers (64-bit hashes allowed) into one 63-bit seed."""
    words = []
    for p in parts:
        words.extend(_words(p))
    state = np.random.SeedSequence(words).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1] & 0x7FFFFFFF) << 32)
