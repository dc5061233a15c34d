"""Spatial group partitioning of sparse tensors.

Each active voxel is assigned to one of G groups and the groups are stacked
along the batch axis, so a site ``(b, x, y, z)`` in group ``i`` becomes
``(i*B + b, x, y, z)``.  Convolutions then run on every group independently
with shared weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import DataError
from .sparse_tensor import SparseTensor, kernel_offsets, pack_keys

RANDOM = "random"
PATTERN = "pattern"

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class PartitionSpec:
    groups: int = 1
    strategy: str = PATTERN
    pattern: Tuple[int, int, int] = (1, 1, 1)
    seed: int = 0

    def __post_init__(self):
        if self.groups < 1:
            raise DataError(f"group count must be >= 1, got {self.groups}")
        if self.strategy not in (RANDOM, PATTERN):
            raise DataError(f"unknown partition strategy {self.strategy!r}")
        if self.strategy == PATTERN:
            if len(self.pattern) != 3 or any(v < 0 for v in self.pattern):
                raise DataError(f"pattern must be three non-negative integers, got {self.pattern}")
            if self.groups > 1 and not any(self.pattern):
                raise DataError("an all-zero pattern puts every voxel in group 0")

    @classmethod
    def random(cls, groups: int, seed: int) -> "PartitionSpec":
        return cls(groups, RANDOM, (0, 0, 0), int(seed))

    @classmethod
    def fixed(cls, groups: int, a: int, b: int, c: int) -> "PartitionSpec":
        return cls(groups, PATTERN, (int(a), int(b), int(c)))

    def with_seed(self, seed: int) -> "PartitionSpec":
        return PartitionSpec(self.groups, self.strategy, self.pattern, int(seed))

    def describe(self) -> str:
        if self.groups == 1:
            return "G=1"
        if self.strategy == PATTERN:
            return f"G={self.groups} pattern{self.pattern}"
        return f"G={self.groups} random(seed={self.seed})"


def pattern_group_index(coord, a: int, b: int, c: int, groups: int):
    """``mod(a*x + b*y + c*z, G)`` for one ``(x, y, z)`` or an ``(N, 3)`` array."""
    arr = np.asarray(coord, dtype=np.int64)
    if arr.ndim == 1:
        x, y, z = arr[-3:]
        return int((a * x + b * y + c * z) % groups)
    return (a * arr[:, 0] + b * arr[:, 1] + c * arr[:, 2]) % groups


def _splitmix64(v: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (v + np.uint64(0x9E3779B97F4A7C15)) & _M64
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _M64
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _M64
        return z ^ (z >> np.uint64(31))


def random_group_index(xyz: np.ndarray, seed: int, groups: int) -> np.ndarray:
    """Counter-based uniform group draw, a pure function of (seed, x, y, z)."""
    xyz = np.asarray(xyz, dtype=np.int64).reshape(-1, 3).astype(np.uint64)
    h = _splitmix64(np.full(len(xyz), np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
    for col in range(3):
        h = _splitmix64(h ^ xyz[:, col])
    # top 32 bits scaled onto [0, G) avoid modulo bias for small G
    return ((h >> np.uint64(32)) * np.uint64(groups) >> np.uint64(32)).astype(np.int64)


def group_indices(t: SparseTensor, spec: PartitionSpec) -> np.ndarray:
    xyz = t.coords[:, 1:]
    if spec.groups == 1:
        return np.zeros(t.active_count, dtype=np.int64)
    if spec.strategy == PATTERN:
        return pattern_group_index(xyz, *spec.pattern, spec.groups)
    return random_group_index(xyz, spec.seed, spec.groups)


def partition(t: SparseTensor, spec: PartitionSpec, return_perm: bool = False):
    """Split ``t`` into ``spec.groups`` sparser tensors stacked on the batch axis.

    With ``return_perm`` also returns ``perm`` such that
    ``out.features == t.features[perm]``.
    """
    g = spec.groups
    if g == 1:
        out = t
        perm = np.arange(t.active_count)
    else:
        grp = group_indices(t, spec)
        coords = t.coords.copy()
        coords[:, 0] = grp * t.batch_size + coords[:, 0]
        keys = pack_keys(coords, t.extents)
        perm = np.argsort(keys, kind="stable")
        out = SparseTensor(coords[perm], t.features[perm], t.batch_size * g, t.extents)
    return (out, perm) if return_perm else out


def gather(t: SparseTensor, groups: int, return_perm: bool = False):
    """Inverse of :func:`partition`: fold group slices back onto the original batch."""
    if groups < 1 or t.batch_size % groups:
        raise DataError(f"batch size {t.batch_size} not divisible by {groups} groups")
    if groups == 1:
        out, perm = t, np.arange(t.active_count)
    else:
        b = t.batch_size // groups
        coords = t.coords.copy()
        coords[:, 0] %= b
        keys = pack_keys(coords, t.extents)
        perm = np.argsort(keys, kind="stable")
        sk = keys[perm]
        if len(sk) > 1:
            dup = np.flatnonzero(np.diff(sk) == 0)
            if len(dup):
                site = tuple(int(v) for v in coords[perm][dup[0]])
                raise DataError(f"gather collision at site (b, x, y, z) = {site}")
        out = SparseTensor(coords[perm], t.features[perm], b, t.extents)
    return (out, perm) if return_perm else out


def valid_kernel_shape(a: int, b: int, c: int, groups: int, k: int = 3) -> np.ndarray:
    """Offsets that can ever join two voxels of the same pattern group.

    Returned as a boolean ``(k, k, k)`` mask indexed ``[dz, dy, dx]`` (shifted
    by ``k // 2``), matching the canonical kernel offset order when flattened.
    """
    if k % 2 == 0:
        raise DataError(f"kernel size must be odd, got {k}")
    offs = kernel_offsets(k)
    m = (a * offs[:, 0] + b * offs[:, 1] + c * offs[:, 2]) % groups == 0
    return m.reshape(k, k, k)


def group_sizes(t: SparseTensor, spec: PartitionSpec) -> np.ndarray:
    return np.bincount(group_indices(t, spec), minlength=spec.groups)
