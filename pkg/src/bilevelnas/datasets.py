"""Seeded 2-D synthetic classification data.

Random numbers come from split-mix64 (Steele, Lea & Flood constants):
uniforms are the top 53 bits scaled to [0, 1); normals use the cosine
branch of Box-Muller on two consecutive uniforms. Labels alternate 0, 1, 0,
1, ... so every even-length prefix is class balanced.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

__all__ = ["GENERATORS", "SyntheticDataset", "SplitMix64", "generate_dataset"]

MASK64 = (1 << 64) - 1
GENERATORS = ("two_gaussians", "concentric_rings", "signal_noise_blocks")


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def normal(self) -> float:
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53  # (0, 1], keeps log finite
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def __iter__(self) -> Iterator[int]:
        while True:
            yield self.next_u64()


@dataclass(frozen=True)
class SyntheticDataset:
    points: np.ndarray
    labels: np.ndarray
    generator: str
    seed: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def split(self) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
        """First half for training omega, second half held out for alpha."""
        h = len(self) // 2
        return (self.points[:h], self.labels[:h]), (self.points[h:], self.labels[h:])

    def to_csv(self) -> str:
        from .serialization import csv_text

        cols = [f"x{k}" for k in range(self.points.shape[1])]
        rows = ([*map(float, p), int(y)] for p, y in zip(self.points, self.labels))
        return csv_text([*cols, "label"], rows)


def _two_gaussians(rng: SplitMix64, label: int) -> list[float]:
    cx = 2.0 if label else -2.0
    return [cx + rng.normal(), rng.normal()]


def _ring(rng: SplitMix64, label: int) -> list[float]:
    radius = (2.0 if label else 1.0) + 0.1 * rng.normal()
    theta = 2.0 * math.pi * rng.uniform()
    return [radius * math.cos(theta), radius * math.sin(theta)]


def _signal_noise_blocks(rng: SplitMix64, label: int) -> list[float]:
    # three 2-D blocks: two independent class-conditional draws around a pure-noise middle block
    a = _two_gaussians(rng, label)
    noise = [rng.normal(), rng.normal()]
    b = _two_gaussians(rng, label)
    return a + noise + b


_MAKERS = {
    "two_gaussians": _two_gaussians,
    "concentric_rings": _ring,
    "signal_noise_blocks": _signal_noise_blocks,
}


def generate_dataset(generator: str, seed: int, size: int) -> SyntheticDataset:
    """``size`` points from ``generator``; bit-identical for the same arguments.

    ``two_gaussians``: unit-variance blobs at (-2, 0) / (2, 0).
    ``concentric_rings``: radius 1 / 2 with radial noise 0.1.
    ``signal_noise_blocks``: 6-D, blocks 0 and 2 carry the label, block 1 is noise.
    """
    key = generator.strip().lower().replace("-", "_")
    aliases = {"twogaussians": "two_gaussians", "concentricrings": "concentric_rings", "rings": "concentric_rings"}
    key = aliases.get(key, key)
    if key not in _MAKERS:
        raise ValueError(f"unknown generator {generator!r}; choose from {GENERATORS}")
    if size <= 0 or size % 2:
        raise ValueError("size must be a positive even integer")
    rng = SplitMix64(seed)
    make = _MAKERS[key]
    labels = np.arange(size) % 2
    points = np.array([make(rng, int(y)) for y in labels], dtype=np.float64)
    return SyntheticDataset(points, labels.astype(np.int64), key, int(seed))
