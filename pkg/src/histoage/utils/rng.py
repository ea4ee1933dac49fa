"""
Seeded random streams.

Algorithm (fixed so that draws are identical on every platform):

  SplitMix64   state += 0x9E3779B97F4A7C15
               z = (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
               z = (z ^ (z >> 27)) * 0x94D049BB133111EB
               out = z ^ (z >> 31)                       (all mod 2**64)

  Xoshiro256** four 64-bit words seeded by four SplitMix64 outputs;
               out = rotl(s1 * 5, 7) * 9, then the standard xoshiro256 state
               transition (t = s1 << 17; s2 ^= s0; s3 ^= s1; s1 ^= s2;
               s0 ^= s3; s2 ^= t; s3 = rotl(s3, 45)).
               Doubles use the top 53 bits: (out >> 11) * 2**-53.

  derive_seed  BLAKE2b-64 over the '|'-joined repr of its parts, passed once
               through the SplitMix64 finaliser. Used for per-member,
               per-slide, per-patch and per-epoch streams so results never
               depend on scheduling order.

Bulk arrays (slide textures, bootstrap resamples, k-means seeding) use
numpy.random.default_rng(derive_seed(...)), which is itself reproducible
across platforms.
"""
import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


class Xoshiro256StarStar:
    """Small integer-state generator for the handful of draws per augmentation."""

    def __init__(self, seed: int):
        mixer = SplitMix64(seed)
        self.s = [mixer.next() for _ in range(4)]

    def next(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def uniform_open_low(self, low: float, high: float) -> float:
        """Uniform in (low, high]."""
        return high - (high - low) * self.random()

    def bernoulli(self, p: float) -> bool:
        return self.random() < p

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in [low, high)."""
        span = high - low
        if span <= 0:
            raise ValueError(f"empty integer range [{low}, {high})")
        return low + (self.next() % span)


def derive_seed(*parts) -> int:
    digest = hashlib.blake2b("|".join(repr(p) for p in parts).encode("utf-8"), digest_size=8).digest()
    z = int.from_bytes(digest, "little")
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def numpy_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
