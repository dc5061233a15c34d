"""Coordinate-hashed sparse voxel tensors and convolution rulebooks.

Sites are stored as an ``(N, 4)`` integer array of ``(b, x, y, z)`` rows kept
in canonical order, i.e. lexicographic on ``(b, z, y, x)``.  The packed key
``((b*D + z)*H + y)*W + x`` is monotone in that order, so the sorted key
array doubles as the hash table: lookups are binary searches.

Dense arrays use the ``B x D x H x W x C`` layout, so a site ``(b, x, y, z)``
lives at ``dense[b, z, y, x]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DataError

SVOX_MAGIC = b"SVX1"

SUBMANIFOLD = "submanifold"
STRIDED = "strided"
DECONV = "deconv"


@dataclass(frozen=True, eq=False)
class SparseTensor:
    coords: np.ndarray
    features: np.ndarray
    batch_size: int
    extents: tuple

    def __post_init__(self):
        if self.coords.ndim != 2 or self.coords.shape[1] != 4:
            raise DataError(f"coords must be (N, 4), got {self.coords.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != self.coords.shape[0]:
            raise DataError(
                f"features {self.features.shape} do not match {self.coords.shape[0]} sites")

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def active_count(self) -> int:
        return self.coords.shape[0]

    @property
    def shape(self) -> tuple:
        return (self.batch_size,) + tuple(self.extents) + (self.channels,)

    def keys(self) -> np.ndarray:
        return pack_keys(self.coords, self.extents)

    def with_features(self, features: np.ndarray) -> "SparseTensor":
        """Same active set (sharing the coords array), new features."""
        return SparseTensor(self.coords, features, self.batch_size, self.extents)

    def same_layout(self, other: "SparseTensor") -> bool:
        return (self.batch_size == other.batch_size
                and tuple(self.extents) == tuple(other.extents)
                and self.channels == other.channels)

    def same_sites(self, other: "SparseTensor") -> bool:
        return self.coords is other.coords or np.array_equal(self.coords, other.coords)

    def __repr__(self):
        return (f"SparseTensor(B={self.batch_size}, extents={tuple(self.extents)}, "
                f"C={self.channels}, N={self.active_count})")


def pack_keys(coords: np.ndarray, extents) -> np.ndarray:
    d, h, w = extents
    c = coords.astype(np.int64, copy=False)
    return ((c[:, 0] * d + c[:, 3]) * h + c[:, 2]) * w + c[:, 1]


def unpack_keys(keys: np.ndarray, extents) -> np.ndarray:
    d, h, w = extents
    keys = np.asarray(keys, dtype=np.int64)
    x = keys % w
    rest = keys // w
    y = rest % h
    rest //= h
    z = rest % d
    b = rest // d
    return np.stack([b, x, y, z], axis=1)


def make_tensor(coords, features, batch_size: int, extents, check: bool = True) -> SparseTensor:
    """Build a tensor from unordered sites, sorting them into canonical order."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features.reshape(len(coords), -1)
    extents = tuple(int(e) for e in extents)
    if check:
        _check_bounds(coords, batch_size, extents)
        bad = ~np.isfinite(features).all(axis=1)
        if bad.any():
            raise DataError(f"non-finite feature at site {tuple(coords[np.argmax(bad)])}")
    keys = pack_keys(coords, extents)
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    if len(keys) > 1 and (np.diff(keys) == 0).any():
        dup = coords[order][1:][np.diff(keys) == 0][0]
        raise DataError(f"duplicate site {tuple(dup)}")
    return SparseTensor(coords[order], features[order], int(batch_size), extents)


def empty(batch_size: int, extents, channels: int) -> SparseTensor:
    return SparseTensor(np.zeros((0, 4), np.int64), np.zeros((0, channels)),
                        int(batch_size), tuple(int(e) for e in extents))


def _check_bounds(coords: np.ndarray, batch_size: int, extents) -> None:
    d, h, w = extents
    lim = np.array([batch_size, w, h, d])
    bad = ((coords < 0) | (coords >= lim)).any(axis=1)
    if bad.any():
        raise DataError(
            f"site {tuple(coords[np.argmax(bad)])} outside batch {batch_size} extents {extents}")


def from_dense(grid: np.ndarray, active_predicate: Optional[Callable] = None) -> SparseTensor:
    """Sparse view of a dense ``B x D x H x W x C`` array.

    ``active_predicate`` maps an ``(M, C)`` feature block to a boolean mask;
    the default keeps sites with any nonzero channel.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 5 or min(grid.shape[1:4]) <= 0:
        raise DataError(f"expected a B x D x H x W x C grid, got shape {grid.shape}")
    finite = np.isfinite(grid).all(axis=-1)
    if not finite.all():
        b, z, y, x = np.argwhere(~finite)[0]
        raise DataError(f"non-finite value at site (b={b}, x={x}, y={y}, z={z})")
    bsz, d, h, w, c = grid.shape
    flat = grid.reshape(-1, c)
    if active_predicate is None:
        mask = (flat != 0).any(axis=1)
    else:
        mask = np.asarray(active_predicate(flat), dtype=bool)
    keys = np.flatnonzero(mask)
    return SparseTensor(unpack_keys(keys, (d, h, w)), flat[keys].copy(), bsz, (d, h, w))


def to_dense(t: SparseTensor) -> np.ndarray:
    d, h, w = t.extents
    out = np.zeros((t.batch_size * d * h * w, t.channels))
    out[t.keys()] = t.features
    return out.reshape(t.batch_size, d, h, w, t.channels)


def zero_fill_sum(a: SparseTensor, b: SparseTensor):
    """Union of active sets; features summed with absent sites read as zero.

    Returns the sum together with the positions of ``a``'s and ``b``'s sites in
    the result, which the backward pass needs.
    """
    if not a.same_layout(b):
        raise DataError(f"zero_fill_sum layout mismatch: {a!r} vs {b!r}")
    if a.same_sites(b):
        idx = np.arange(a.active_count)
        return a.with_features(a.features + b.features), idx, idx
    ka, kb = a.keys(), b.keys()
    keys = np.union1d(ka, kb)
    ia = np.searchsorted(keys, ka)
    ib = np.searchsorted(keys, kb)
    feats = np.zeros((len(keys), a.channels))
    feats[ia] += a.features
    feats[ib] += b.features
    out = SparseTensor(unpack_keys(keys, a.extents), feats, a.batch_size, a.extents)
    return out, ia, ib


def lookup(t: SparseTensor, coords: np.ndarray) -> np.ndarray:
    """Index of each query coordinate in ``t``, or -1 where inactive/out of bounds."""
    d, h, w = t.extents
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
    inb = ((coords[:, 1:] >= 0) & (coords[:, 1:] < np.array([w, h, d]))).all(axis=1)
    inb &= (coords[:, 0] >= 0) & (coords[:, 0] < t.batch_size)
    keys = t.keys()
    out = np.full(len(coords), -1, dtype=np.int64)
    if not len(keys):
        return out
    q = pack_keys(coords[inb], t.extents)
    pos = np.searchsorted(keys, q)
    pos_c = np.minimum(pos, len(keys) - 1)
    hit = keys[pos_c] == q
    sub = np.full(len(q), -1, dtype=np.int64)
    sub[hit] = pos_c[hit]
    out[inb] = sub
    return out


def kernel_offsets(k: int) -> np.ndarray:
    """Offsets ``(dx, dy, dz)`` of a centred k^3 kernel in (dz, dy, dx) lexicographic order."""
    r = k // 2
    rng = range(-r, r + 1)
    return np.array([(dx, dy, dz) for dz in rng for dy in rng for dx in rng], dtype=np.int64)


def child_offsets() -> np.ndarray:
    """The eight 2x2x2 child offsets in (dz, dy, dx) lexicographic order."""
    return np.array([(dx, dy, dz) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)],
                    dtype=np.int64)


@dataclass(frozen=True, eq=False)
class Rulebook:
    mode: str
    kernel_offsets: np.ndarray
    pairs: list
    output_coords: np.ndarray
    batch_size: int
    in_extents: tuple
    out_extents: tuple
    in_count: int

    @property
    def out_count(self) -> int:
        return self.output_coords.shape[0]

    @property
    def pair_count(self) -> int:
        return int(sum(len(i) for i, _ in self.pairs))

    def output_sites(self) -> list:
        return [tuple(int(v) for v in c) for c in self.output_coords]


def build_rulebook(t: SparseTensor, kernel: int = 3, mode: str = SUBMANIFOLD,
                   stride: int = 2) -> Rulebook:
    """Input/output site pairs for every kernel offset.

    ``submanifold`` keeps the active set and pairs output site p with input
    p + o.  ``strided`` maps active children onto their parent at half
    resolution.  ``deconv`` emits all eight children of each active parent.
    """
    coords, extents = t.coords, tuple(t.extents)
    n = t.active_count
    if mode == SUBMANIFOLD:
        if kernel % 2 == 0:
            raise DataError(f"submanifold kernels must be odd, got {kernel}")
        offsets = kernel_offsets(kernel)
        keys = t.keys()
        d, h, w = extents
        lim = np.array([w, h, d])
        out_idx_all = np.arange(n)
        pairs = []
        for o in offsets:
            if not o.any():
                pairs.append((out_idx_all.copy(), out_idx_all.copy()))
                continue
            nb = coords[:, 1:] + o
            inb = ((nb >= 0) & (nb < lim)).all(axis=1)
            q = ((coords[inb, 0] * d + nb[inb, 2]) * h + nb[inb, 1]) * w + nb[inb, 0]
            pos = np.minimum(np.searchsorted(keys, q), max(n - 1, 0))
            hit = keys[pos] == q if n else np.zeros(0, bool)
            pairs.append((pos[hit], out_idx_all[inb][hit]))
        return Rulebook(mode, offsets, pairs, coords, t.batch_size, extents, extents, n)

    if kernel != 2 or stride != 2:
        raise DataError(f"{mode} mode supports kernel = stride = 2 only")
    offsets = child_offsets()
    if mode == STRIDED:
        if any(e % 2 for e in extents):
            raise DataError(f"extents {extents} not divisible by stride 2")
        out_ext = tuple(e // 2 for e in extents)
        parents = coords.copy()
        parents[:, 1:] //= 2
        pkeys = pack_keys(parents, out_ext)
        ukeys, inverse = np.unique(pkeys, return_inverse=True)
        slot = (coords[:, 3] % 2) * 4 + (coords[:, 2] % 2) * 2 + (coords[:, 1] % 2)
        pairs = []
        for s in range(8):
            sel = np.flatnonzero(slot == s)
            pairs.append((sel, inverse[sel]))
        return Rulebook(mode, offsets, pairs, unpack_keys(ukeys, out_ext), t.batch_size,
                        extents, out_ext, n)

    if mode == DECONV:
        out_ext = tuple(e * 2 for e in extents)
        base = coords.copy()
        base[:, 1:] *= 2
        child = (base[None, :, :] + np.concatenate(
            [np.zeros((8, 1), np.int64), offsets], axis=1)[:, None, :]).reshape(-1, 4)
        ckeys = pack_keys(child, out_ext)
        order = np.argsort(ckeys, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        rank = rank.reshape(8, n)
        src = np.arange(n)
        pairs = [(src.copy(), rank[s]) for s in range(8)]
        return Rulebook(mode, offsets, pairs, child[order], t.batch_size, extents, out_ext, n)

    raise DataError(f"unknown rulebook mode {mode!r}")


def write_svox(path, t: SparseTensor) -> None:
    d, h, w = t.extents
    rec = np.dtype([("c", "<i4", (4,)), ("f", "<f4", (t.channels,))])
    body = np.empty(t.active_count, dtype=rec)
    body["c"] = t.coords
    body["f"] = t.features
    with open(path, "wb") as fh:
        fh.write(SVOX_MAGIC)
        fh.write(struct.pack("<6I", t.batch_size, d, h, w, t.channels, t.active_count))
        fh.write(body.tobytes())


def read_svox(path) -> SparseTensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SVOX_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 28:
        raise DataError(f"{path}: truncated header")
    bsz, d, h, w, c, n = struct.unpack_from("<6I", raw, 4)
    rec = np.dtype([("c", "<i4", (4,)), ("f", "<f4", (c,))])
    if len(raw) != 28 + n * rec.itemsize:
        raise DataError(f"{path}: expected {n} records, size mismatch")
    body = np.frombuffer(raw, dtype=rec, offset=28, count=n)
    coords = body["c"].astype(np.int64).reshape(n, 4)
    feats = body["f"].astype(np.float64).reshape(n, c)
    _check_bounds(coords, bsz, (d, h, w))
    keys = pack_keys(coords, (d, h, w))
    if n > 1 and not (np.diff(keys) > 0).all():
        raise DataError(f"{path}: records not in canonical order")
    if not np.isfinite(feats).all():
        raise DataError(f"{path}: non-finite feature values")
    return SparseTensor(coords, feats, bsz, (d, h, w))
