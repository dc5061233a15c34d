"""Synthetic rooms, fTSDF encoding, loss-weight sampling and IoU evaluation.

Dense grids are indexed ``[z, y, x]``; positions and cameras are given as
``(x, y, z)`` in voxel units with voxel ``i`` spanning ``[i, i + 1)``.
Labels live at a quarter of the input resolution.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import DataError
from .sparse_tensor import SparseTensor, from_dense, read_svox, write_svox

log = logging.getLogger(__name__)

CLASS_NAMES = ("empty", "ceiling", "floor", "wall", "window", "chair", "bed", "sofa",
               "table", "tvs", "furniture", "objects")
SHORT_NAMES = ("empty", "ceil.", "floor", "wall", "win.", "chair", "bed", "sofa", "table",
               "tvs", "furn.", "objs.")
EMPTY = 0
FLOOR = 2
WALL = 3
OUTSIDE = 255
LABL_MAGIC = b"LBL1"


@dataclass(frozen=True)
class Camera:
    position: tuple


@dataclass
class Scene:
    """Fine-resolution ground truth: per-voxel classes plus the outside-room mask."""
    classes: np.ndarray
    outside: np.ndarray
    camera: Camera

    @property
    def resolution(self) -> int:
        return self.classes.shape[0]

    @property
    def occupancy(self) -> np.ndarray:
        return self.classes != EMPTY


@dataclass
class SceneSample:
    ftsdf: np.ndarray
    labels: np.ndarray
    observed_mask: np.ndarray
    weights: Optional[np.ndarray] = None
    gt_tsdf: Optional[np.ndarray] = None

    def input_tensor(self) -> SparseTensor:
        return from_dense(self.ftsdf[None, ..., None])


# scene generation ---------------------------------------------------------

def generate_scene(seed: int, resolution: int, class_count: int = 12) -> Scene:
    """A floor, one or two walls and 2-5 boxes/cylinders with distinct labels."""
    r = int(resolution)
    if r < 16 or r % 4:
        raise DataError(f"scene resolution must be a multiple of 4 and >= 16, got {r}")
    rng = np.random.default_rng(seed)
    th = max(1, r // 16)
    classes = np.zeros((r, r, r), dtype=np.uint8)
    outside = np.zeros((r, r, r), dtype=bool)

    xw = r - 4 * int(rng.integers(1, 3))
    x_end = xw + th
    side = bool(rng.integers(0, 2))
    zw = r - 4 * int(rng.integers(1, 3)) if side else r
    z_end = zw + th if side else r
    outside[:, :, x_end:] = True
    outside[z_end:, :, :] = True

    classes[:z_end, :th, :x_end] = FLOOR
    classes[:z_end, :, xw:x_end] = WALL
    if side:
        classes[zw:z_end, :, :x_end] = WALL

    candidates = list(range(4, class_count))
    n_obj = min(int(rng.integers(2, 6)), len(candidates))
    labels = rng.choice(candidates, size=n_obj, replace=False)
    zz, xx = np.mgrid[0:r, 0:r]
    for lab in labels:
        sx, sz = (int(v) for v in rng.integers(r // 8, r // 4 + 1, size=2))
        sy = int(rng.integers(r // 8, r // 2 + 1))
        x0 = int(rng.integers(1, max(2, xw - sx)))
        z0 = int(rng.integers(1, max(2, zw - sz)))
        y0, y1 = th, min(r, th + sy)
        if rng.random() < 0.5:
            foot = (xx >= x0) & (xx < x0 + sx) & (zz >= z0) & (zz < z0 + sz)
        else:
            cx, cz = x0 + sx / 2.0, z0 + sz / 2.0
            rad = min(sx, sz) / 2.0
            foot = (xx + 0.5 - cx) ** 2 + (zz + 0.5 - cz) ** 2 <= rad * rad
        foot &= (xx < xw) & (zz < zw)
        col = classes[:, y0:y1, :]
        col[np.broadcast_to(foot[:, None, :], col.shape)] = lab

    cam = Camera((-0.6 * r + float(rng.uniform(-0.05, 0.05)) * r,
                  0.85 * r + float(rng.uniform(-0.05, 0.05)) * r,
                  0.4 * r + float(rng.uniform(-0.1, 0.1)) * r))
    return Scene(classes, outside, cam)


# visibility ---------------------------------------------------------------

def compute_visibility(occupancy: np.ndarray, camera: Camera) -> np.ndarray:
    """Which voxels the camera sees, by 3D DDA from the camera to each voxel centre.

    A voxel is observed iff no occupied voxel lies strictly before it on that
    ray; occupied voxels hit first are observed surfaces.  At exact corner
    crossings the DDA advances x before y before z.
    """
    occ = np.asarray(occupancy, dtype=bool)
    d_, h_, w_ = occ.shape
    dims = np.array([w_, h_, d_], dtype=np.int64)
    zz, yy, xx = np.indices(occ.shape).reshape(3, -1)
    target = np.stack([xx, yy, zz], axis=1)
    p0 = np.asarray(camera.position, dtype=np.float64)
    if ((p0 >= 0) & (p0 < dims)).all() and occ[tuple(np.floor(p0[::-1]).astype(int))]:
        raise DataError("camera sits inside an occupied voxel")
    d = target + 0.5 - p0

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (0.0 - p0) * inv
        t2 = (dims - p0) * inv
    tlo = np.where(d != 0, np.minimum(t1, t2), -np.inf)
    t_enter = np.maximum(tlo.max(axis=1), 0.0)
    cur = np.floor(p0 + t_enter[:, None] * d).astype(np.int64)
    cur = np.clip(cur, 0, dims - 1)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tdelta = np.where(d != 0, np.abs(inv), np.inf)
        nxt = np.where(step > 0, cur + 1, cur).astype(np.float64)
        tmax = np.where(d != 0, (nxt - p0) * inv, np.inf)

    visible = np.ones(len(target), dtype=bool)
    live = np.arange(len(target))
    for _ in range(int(dims.sum()) * 2 + 4):
        if not len(live):
            break
        reached = (cur == target[live]).all(axis=1)
        blocked = occ[cur[:, 2], cur[:, 1], cur[:, 0]] & ~reached
        visible[live[blocked]] = False
        keep = ~(reached | blocked)
        live, cur, step, tdelta, tmax = live[keep], cur[keep], step[keep], tdelta[keep], tmax[keep]
        axis = np.argmin(tmax, axis=1)
        rows = np.arange(len(live))
        cur[rows, axis] += step[rows, axis]
        tmax[rows, axis] += tdelta[rows, axis]
        cur = np.clip(cur, 0, dims - 1)
    return visible.reshape(occ.shape)


# fTSDF --------------------------------------------------------------------

def nearest_distance(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from every voxel centre to the nearest ``mask`` voxel."""
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~mask)


def encode_ftsdf(occupancy: np.ndarray, observed: np.ndarray, tau: float = 3.0) -> np.ndarray:
    """Flipped TSDF: ``sign * max(0, 1 - d / tau)`` with d to the nearest seen surface.

    Sign is +1 in observed space (surface voxels included) and -1 elsewhere.
    """
    if tau < 1:
        raise DataError(f"tau must be >= 1 voxel, got {tau}")
    surface = np.asarray(occupancy, bool) & np.asarray(observed, bool)
    if not surface.any():
        raise DataError("scene has no observed surface voxels")
    d = nearest_distance(surface)
    mag = np.maximum(0.0, 1.0 - d / tau)
    return np.where(observed, mag, -mag) + 0.0  # no negative zeros


# labels, masks and weights ------------------------------------------------

def downsample_labels(scene: Scene, observed: np.ndarray, factor: int = 4):
    """Quarter-resolution labels and observed mask.

    A coarse voxel takes the most frequent non-empty class among its children
    (lowest id on ties), is 255 when all children are outside the room, and
    counts as observed when any in-room child is observed.
    """
    r = scene.resolution
    c = r // factor
    f3 = factor ** 3

    def blocks(a):
        return a.reshape(c, factor, c, factor, c, factor).transpose(0, 2, 4, 1, 3, 5).reshape(
            c, c, c, f3)

    cls = blocks(scene.classes).astype(np.int64)
    counts = np.zeros((c, c, c, 256), dtype=np.int32)
    for k in np.unique(cls):
        if k != EMPTY:
            counts[..., k] = (cls == k).sum(axis=-1)
    labels = np.where(counts.max(axis=-1) > 0, counts.argmax(axis=-1), EMPTY).astype(np.uint8)
    out = blocks(scene.outside).all(axis=-1)
    labels[out] = OUTSIDE
    seen = blocks(observed & ~scene.outside).any(axis=-1) & ~out
    return labels, seen


def gt_tsdf_magnitude(labels: np.ndarray, gt_tau: float = 2.0) -> np.ndarray:
    """``min(1, d / gt_tau)`` with d the distance to the nearest occupied label voxel."""
    occ = (labels != EMPTY) & (labels != OUTSIDE)
    return np.minimum(1.0, nearest_distance(occ) / gt_tau)


def sample_weights(labels: np.ndarray, gt_tsdf: np.ndarray, seed: int) -> np.ndarray:
    """Binary loss weights: every non-empty voxel plus ceil(n/2) sampled empties.

    Empties are drawn 90% from hard ones (``|gt_tsdf| < 1``) and 10% from
    easy ones without replacement; a short pool spills into the other.
    """
    labels = np.asarray(labels)
    w = np.zeros(labels.shape)
    nonempty = (labels != EMPTY) & (labels != OUTSIDE)
    n = int(nonempty.sum())
    if n == 0:
        log.warning("sample_weights: no non-empty voxels, all weights are zero")
        return w
    w[nonempty] = 1.0
    flat_empty = labels.reshape(-1) == EMPTY
    hard_flag = np.abs(np.asarray(gt_tsdf).reshape(-1)) < 1.0
    hard = np.flatnonzero(flat_empty & hard_flag)
    easy = np.flatnonzero(flat_empty & ~hard_flag)
    target = math.ceil(n / 2)
    want_hard = int(math.floor(0.9 * target + 0.5))
    n_hard = min(want_hard, len(hard))
    n_easy = min(target - n_hard, len(easy))
    n_hard = min(target - n_easy, len(hard))
    rng = np.random.default_rng(seed)
    picked = np.concatenate([rng.choice(hard, n_hard, replace=False),
                             rng.choice(easy, n_easy, replace=False)])
    w.reshape(-1)[picked] = 1.0
    return w


def build_sample(seed: int, resolution: int, class_count: int = 12, tau: float = 3.0,
                 gt_tau: float = 2.0) -> SceneSample:
    scene = generate_scene(seed, resolution, class_count)
    observed = compute_visibility(scene.occupancy, scene.camera)
    ftsdf = encode_ftsdf(scene.occupancy, observed, tau)
    labels, seen = downsample_labels(scene, observed)
    gt = gt_tsdf_magnitude(labels, gt_tau)
    return SceneSample(ftsdf, labels, seen, sample_weights(labels, gt, seed), gt)


# evaluation ---------------------------------------------------------------

@dataclass
class IouTally:
    class_count: int
    tp: int = 0
    fp: int = 0
    fn: int = 0
    inter: np.ndarray = None
    union: np.ndarray = None

    def __post_init__(self):
        if self.inter is None:
            self.inter = np.zeros(self.class_count, dtype=np.int64)
            self.union = np.zeros(self.class_count, dtype=np.int64)

    def __add__(self, other: "IouTally") -> "IouTally":
        return IouTally(self.class_count, self.tp + other.tp, self.fp + other.fp,
                        self.fn + other.fn, self.inter + other.inter, self.union + other.union)


def _ratio(a, b):
    return a / b if b else float("nan")


@dataclass
class IouMetrics:
    precision: float
    recall: float
    completion_iou: float
    class_iou: np.ndarray
    mean_iou: float

    @classmethod
    def from_tally(cls, t: IouTally) -> "IouMetrics":
        per = np.array([_ratio(t.inter[c], t.union[c]) for c in range(t.class_count)])
        per[0] = np.nan
        present = [c for c in range(1, t.class_count) if t.union[c] > 0]
        # correctly rounded sum, so the mean does not depend on summation order
        mean = math.fsum(per[present]) / len(present) if present else float("nan")
        return cls(_ratio(t.tp, t.tp + t.fp), _ratio(t.tp, t.tp + t.fn),
                   _ratio(t.tp, t.tp + t.fp + t.fn), per, mean)

    def as_row(self) -> dict:
        row = {"prec.": self.precision, "recall": self.recall, "IoU": self.completion_iou}
        for c in range(1, len(self.class_iou)):
            row[SHORT_NAMES[c] if c < len(SHORT_NAMES) else f"c{c}"] = self.class_iou[c]
        row["avg."] = self.mean_iou
        return row


def iou_tally(pred: np.ndarray, labels: np.ndarray, observed: np.ndarray,
              class_count: int = 12) -> IouTally:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    observed = np.asarray(observed, bool)
    if pred.shape != labels.shape or labels.shape != observed.shape:
        raise DataError(f"shape mismatch: pred {pred.shape}, labels {labels.shape}, "
                        f"observed {observed.shape}")
    labeled = labels != OUTSIDE
    region = labeled & ~observed
    p_occ = pred != EMPTY
    g_occ = (labels != EMPTY) & labeled
    t = IouTally(class_count)
    t.tp = int((p_occ & g_occ & region).sum())
    t.fp = int((p_occ & ~g_occ & region).sum())
    t.fn = int((~p_occ & g_occ & region).sum())
    p = pred[labeled]
    g = labels[labeled]
    for c in range(1, class_count):
        pc, gc = p == c, g == c
        t.inter[c] = int((pc & gc).sum())
        t.union[c] = int((pc | gc).sum())
    return t


def evaluate_iou(pred: np.ndarray, gt: SceneSample, class_count: int = 12) -> IouMetrics:
    """Completion IoU on unobserved labeled voxels, per-class IoU on all labeled voxels."""
    return IouMetrics.from_tally(iou_tally(pred, gt.labels, gt.observed_mask, class_count))


def format_iou_table(m: IouMetrics, title: str = "") -> str:
    row = m.as_row()
    head = "| " + " | ".join(["method"] + list(row)) + " |"
    sep = "|" + "---|" * (len(row) + 1)
    cells = ["-" if not np.isfinite(v) else f"{100 * v:.1f}" for v in row.values()]
    return "\n".join([head, sep, "| " + " | ".join([title or "model"] + cells) + " |"])


# files --------------------------------------------------------------------

def write_labl(path, labels: np.ndarray, observed: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    d, h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(LABL_MAGIC)
        fh.write(struct.pack("<3I", d, h, w))
        fh.write(labels.tobytes())
        fh.write(np.asarray(observed, dtype=np.uint8).tobytes())


def read_labl(path):
    raw = Path(path).read_bytes()
    if raw[:4] != LABL_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    d, h, w = struct.unpack_from("<3I", raw, 4)
    n = d * h * w
    if len(raw) != 16 + 2 * n:
        raise DataError(f"{path}: size does not match {d}x{h}x{w} grid")
    labels = np.frombuffer(raw, np.uint8, n, 16).reshape(d, h, w).copy()
    obs = np.frombuffer(raw, np.uint8, n, 16 + n).reshape(d, h, w)
    if ((obs != 0) & (obs != 1)).any():
        raise DataError(f"{path}: observed mask must be 0/1")
    return labels, obs.astype(bool)


def write_scene(directory, index: int, sample: SceneSample) -> tuple:
    directory = Path(directory)
    svox = directory / f"scene_{index:04d}.svox"
    labl = directory / f"scene_{index:04d}.lbl1"
    write_svox(svox, sample.input_tensor())
    write_labl(labl, sample.labels, sample.observed_mask)
    return svox, labl


def from_volumes(directory, index: int, ftsdf: np.ndarray, labels: np.ndarray,
                 observed: np.ndarray) -> tuple:
    """Store externally produced volumes in the dataset layout.

    Real depth-derived scenes fit the same pair of files: an fTSDF volume of
    side R (pad into the middle of an R^3 grid if the source is not cubic),
    a label volume of side R/4 using 0 = empty, 1..11 = classes and 255 for
    voxels outside the evaluated region, and the matching observed mask.
    Parsing any particular source dataset is left to the caller.
    """
    r = ftsdf.shape[0]
    if ftsdf.shape != (r, r, r) or labels.shape != (r // 4,) * 3 or observed.shape != labels.shape:
        raise DataError("expected an R^3 fTSDF with (R/4)^3 labels and mask")
    return write_scene(directory, index, SceneSample(np.asarray(ftsdf, float), labels, observed))


def load_scene(svox_path, gt_tau: float = 2.0) -> SceneSample:
    svox_path = Path(svox_path)
    t = read_svox(svox_path)
    labels, observed = read_labl(svox_path.with_suffix(".lbl1"))
    if t.channels != 1 or t.batch_size != 1:
        raise DataError(f"{svox_path}: expected a single-sample, single-channel fTSDF")
    r = t.extents[0]
    if t.extents != (r, r, r) or labels.shape != (r // 4,) * 3:
        raise DataError(f"{svox_path}: fTSDF {t.extents} and labels {labels.shape} disagree")
    ftsdf = np.zeros((r, r, r))
    c = t.coords
    ftsdf[c[:, 3], c[:, 2], c[:, 1]] = t.features[:, 0]
    return SceneSample(ftsdf, labels, observed, None, gt_tsdf_magnitude(labels, gt_tau))


def load_dataset(directory, gt_tau: float = 2.0) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"data directory {directory} does not exist")
    return [load_scene(p, gt_tau) for p in sorted(directory.glob("scene_*.svox"))]
