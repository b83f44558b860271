"""Seeded, splittable random number generation.

Every stochastic component draws from an `Rng` so that a run is a pure
function of its seed. The underlying bit generator is Philox4x64, a
counter-based generator whose streams are reproducible across platforms.
Independent child streams are derived by name (`split`), never by
sequential draws, so consumers cannot perturb each other.
"""

from __future__ import annotations

import numpy as np

_FNV64_OFFSET = 0xCBF29CE484222325
_FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _fnv1a64(data: bytes) -> int:
    h = _FNV64_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV64_PRIME) & _MASK64
    return h


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class Rng:
    """Named Philox stream with deterministic, label-based splitting."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, *labels: object) -> "Rng":
        """Derive an independent child stream from string/int labels.

        The child key depends only on (seed, labels), not on how many
        draws the parent has made.
        """
        key = self.seed
        for label in labels:
            key = _splitmix64(key ^ _fnv1a64(str(label).encode("utf-8")))
        return Rng(key)

    def normal(self, shape: tuple[int, ...] | list[int]) -> np.ndarray:
        return self._gen.standard_normal(size=tuple(shape), dtype=np.float32)

    def uniform(self, shape: tuple[int, ...] | list[int] = ()) -> np.ndarray:
        return self._gen.random(size=tuple(shape), dtype=np.float32)

    def randint(self, low: int, high: int, shape: tuple[int, ...] = ()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape, dtype=np.int64)

    def choice(self, n: int) -> int:
        return int(self._gen.integers(0, n))

    def state(self) -> dict:
        """Serializable bit-generator state (ints only)."""
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        st = self._gen.bit_generator.state
        st["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        st["state"]["key"] = np.array(state["key"], dtype=np.uint64)
        st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        st["buffer_pos"] = state["buffer_pos"]
        st["has_uint32"] = state["has_uint32"]
        st["uinteger"] = state["uinteger"]
        self._gen.bit_generator.state = st
