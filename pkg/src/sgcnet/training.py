"""Training loop, batch assembly, checkpoints and model evaluation."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .autograd import OptimState, ParamRegistry, Tape, sgd_step, total_loss, weighted_softmax_loss
from .data_eval import IouMetrics, IouTally, SceneSample, iou_tally, sample_weights
from .errors import DataError
from .model import HEAD_ABSTRACT, HEAD_FINAL, Config, LayerGraph, build, forward
from .sparse_tensor import SparseTensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SGCK"
CKPT_VERSION = 1
METRICS_HEADER = ("epoch", "step", "loss", "lr")


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def collate(samples: Sequence[SceneSample]) -> SparseTensor:
    """Stack fTSDF volumes into one batched single-channel tensor."""
    coords, feats = [], []
    for b, s in enumerate(samples):
        zz, yy, xx = np.nonzero(s.ftsdf)
        coords.append(np.stack([np.full(len(xx), b), xx, yy, zz], axis=1))
        feats.append(s.ftsdf[zz, yy, xx])
    r = samples[0].ftsdf.shape[0]
    # np.nonzero walks [z, y, x] in C order, so per-sample rows are already canonical
    return SparseTensor(np.concatenate(coords).astype(np.int64),
                        np.concatenate(feats)[:, None], len(samples), (r, r, r))


@dataclass
class TrainResult:
    graph: LayerGraph
    metrics: List[tuple] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


def write_checkpoint(path, registry: ParamRegistry) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for name, value in registry.values.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", value.size))
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def read_checkpoint(path) -> dict:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if raw[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 8, {}
    while pos < len(raw):
        (n,) = struct.unpack_from("<I", raw, pos)
        name = raw[pos + 4:pos + 4 + n].decode("utf-8")
        pos += 4 + n
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if pos + 4 * count > len(raw):
            raise DataError(f"{path}: truncated record {name!r}")
        out[name] = np.frombuffer(raw, "<f4", count, pos).astype(np.float64)
        pos += 4 * count
    return out


def load_into(graph: LayerGraph, values: dict) -> None:
    reg = graph.registry
    if list(values) != reg.names():
        missing = set(reg.names()) ^ set(values)
        raise DataError(f"checkpoint does not match the network (differs in {sorted(missing)[:3]})")
    for name, flat in values.items():
        shape = reg[name].shape
        if flat.size != reg[name].size:
            raise DataError(f"checkpoint tensor {name} has {flat.size} values, expected {shape}")
        reg[name] = flat.reshape(shape)


def train_step(graph: LayerGraph, batch: Sequence[SceneSample], weights: Sequence[np.ndarray],
               state: OptimState, partition_seed: Optional[int] = None) -> float:
    cfg = graph.config
    x = collate(batch)
    labels = np.stack([s.labels for s in batch])
    w = np.stack(weights)
    tape = Tape()
    res = forward(graph, x, "train", tape, partition_seed)
    losses, seeds = [], {}
    for head, alpha in zip((HEAD_ABSTRACT, HEAD_FINAL), cfg.loss_alphas):
        loss, g = weighted_softmax_loss(res.heads[head], labels, w, allow_empty=True)
        losses.append(loss)
        vid = res.head_ids[head]
        if vid is not None and alpha:
            seeds[vid] = alpha * g
    graph.registry.zero_grad()
    tape.backward(seeds, graph.registry)
    sgd_step(graph.registry, state)
    return total_loss(losses, cfg.loss_alphas)


def train_loop(config: Config, dataset: Sequence[SceneSample], out_dir=None,
               seed: Optional[int] = None, graph: Optional[LayerGraph] = None) -> TrainResult:
    """Momentum SGD over the dataset with a per-epoch exponential LR decay.

    Loss weights are resampled every epoch and the sample order is shuffled
    from ``(seed, epoch)``; the run is a pure function of seed and config.
    Writes ``metrics.csv`` and ``ckpt_XXXX.sgck`` files when ``out_dir`` is set.
    """
    if not len(dataset):
        raise DataError("training dataset is empty")
    tc = config.train
    seed = tc.seed if seed is None else seed
    graph = graph or build(config.network)
    state = OptimState(tc.learning_rate, tc.momentum, tc.weight_decay, tc.lr_decay)
    result = TrainResult(graph)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)

    def checkpoint(epoch):
        if out is not None:
            p = out / f"ckpt_{epoch:04d}.sgck"
            write_checkpoint(p, graph.registry)
            result.checkpoints.append(p)

    try:
        checkpoint(0)
        step = 0
        n = len(dataset)
        for epoch in range(tc.epochs):
            state.learning_rate = state.lr_at_epoch(tc.learning_rate, epoch)
            order = np.random.default_rng(derive_seed(seed, epoch, 1)).permutation(n)
            weights = [sample_weights(s.labels, s.gt_tsdf, derive_seed(seed, epoch, 2, i))
                       for i, s in enumerate(dataset)]
            for start in range(0, n, tc.batch_size):
                idx = order[start:start + tc.batch_size]
                loss = train_step(graph, [dataset[i] for i in idx], [weights[i] for i in idx],
                                  state, derive_seed(seed, epoch, 3, step))
                row = (epoch, step, loss, state.learning_rate)
                result.metrics.append(row)
                if writer is not None:
                    writer.writerow([epoch, step, repr(loss), repr(state.learning_rate)])
                step += 1
            last = epoch == tc.epochs - 1
            if last or (tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0):
                checkpoint(epoch + 1)
            if epoch % 25 == 0 or last:
                log.info("epoch %d loss %.4f lr %.4g", epoch, result.metrics[-1][2],
                         state.learning_rate)
    finally:
        if fh is not None:
            fh.close()
    return result


def predict(graph: LayerGraph, samples: Sequence[SceneSample], batch_size: int = 4) -> np.ndarray:
    preds = []
    for start in range(0, len(samples), batch_size):
        res = forward(graph, collate(samples[start:start + batch_size]), "infer")
        preds.append(res.prediction())
    return np.concatenate(preds)


def evaluate_model(graph: LayerGraph, samples: Sequence[SceneSample]) -> IouMetrics:
    """Dataset-level IoU: tallies summed over every sample before dividing."""
    k = graph.config.class_count
    pred = predict(graph, samples)
    tally = IouTally(k)
    for p, s in zip(pred, samples):
        tally = tally + iou_tally(p, s.labels, s.observed_mask, k)
    return IouMetrics.from_tally(tally)
