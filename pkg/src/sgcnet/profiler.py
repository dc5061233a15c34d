"""Multiply-accumulate accounting from rulebooks.

One MAC is one fused multiply-add; biases are not charged.  Convolution-type
layers (sparse convs, deconvs and 1x1x1 classifiers) cost ``P * C_in * C_out``
where ``P`` is the rulebook pair count (``N`` for a 1x1x1 layer).  Pooling,
normalisation, activations, sums and the softmax of the abstracting head are
listed separately as per-site element operations and stay out of the ratios.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import DataError
from .sgc import gather, partition
from .sparse_tensor import (DECONV, STRIDED, SparseTensor, build_rulebook, zero_fill_sum)

CSV_COLUMNS = ("layer", "scale", "N", "P", "c_in", "c_out", "macs")


@dataclass
class LayerCost:
    layer: str
    kind: str
    scale: int
    n: int
    p: int
    c_in: int
    c_out: int
    macs: int
    covered: bool = False


@dataclass
class ElementCost:
    layer: str
    kind: str
    scale: int
    n: int
    ops: int


@dataclass
class FlopsReport:
    records: List[LayerCost] = field(default_factory=list)
    elementwise: List[ElementCost] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.records)

    @property
    def covered_macs(self) -> int:
        return sum(r.macs for r in self.records if r.covered)

    @property
    def element_ops(self) -> int:
        return sum(e.ops for e in self.elementwise)

    def by_layer(self) -> Dict[str, LayerCost]:
        return {r.layer: r for r in self.records}

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(CSV_COLUMNS) + "\n")
        for r in self.records:
            buf.write(f"{r.layer},{r.scale},{r.n},{r.p},{r.c_in},{r.c_out},{r.macs}\n")
        return buf.getvalue()

    def to_markdown(self, title: str = "MAC totals") -> str:
        lines = [f"## {title}", "", "| quantity | value |", "|---|---:|",
                 f"| convolution MACs | {self.total_macs} |",
                 f"| SGC-covered MACs | {self.covered_macs} |",
                 f"| element ops (excluded) | {self.element_ops} |", ""]
        return "\n".join(lines)


def _shape_only(t: SparseTensor) -> SparseTensor:
    return SparseTensor(t.coords, np.zeros((t.active_count, 0)), t.batch_size, t.extents)


def count_flops(graph, inp: SparseTensor, reference=None) -> FlopsReport:
    """Walk ``graph`` on the active sets of ``inp`` without touching features.

    The abstracting layer depends on predicted classes, which a structure-only
    pass cannot know.  By default it keeps every site; pass the
    :class:`~sgcnet.model.ForwardResult` of a real forward as ``reference``
    to charge the refinement stage on the sites that run actually kept.
    """
    cfg = graph.config
    spec = cfg.partition_spec()
    report = FlopsReport()
    values: Dict[str, SparseTensor] = {"input": _shape_only(inp)}
    rulebooks = {}

    def rulebook(t, k, mode):
        key = (id(t.coords), t.batch_size, k, mode)
        if key not in rulebooks:
            rulebooks[key] = (t.coords, build_rulebook(t, k, mode))
        return rulebooks[key][1]

    for node in graph.nodes:
        xs = [values[i] for i in node.inputs]
        x = xs[0]
        n = x.active_count
        if node.kind == "conv":
            mode = node.attrs["mode"]
            if n == 0:
                ext = x.extents
                if mode == STRIDED:
                    ext = tuple(e // 2 for e in ext)
                elif mode == DECONV:
                    ext = tuple(e * 2 for e in ext)
                out = SparseTensor(np.zeros((0, 4), np.int64), np.zeros((0, 0)), x.batch_size, ext)
                p = 0
            else:
                rb = rulebook(x, node.attrs["k"], mode)
                out = SparseTensor(rb.output_coords, np.zeros((rb.out_count, 0)),
                                   rb.batch_size, rb.out_extents)
                p = rb.pair_count
            c_in = node.attrs["c_in"]
            report.records.append(LayerCost(node.name, node.kind, node.scale, n, p, c_in,
                                            node.channels, p * c_in * node.channels,
                                            node.covered))
        elif node.kind == "linear":
            out = x
            c_in = node.attrs["c_in"]
            report.records.append(LayerCost(node.name, node.kind, node.scale, n, n, c_in,
                                            node.channels, n * c_in * node.channels,
                                            node.covered))
            # softmax over the class logits, charged per class entry
            report.elementwise.append(ElementCost(f"{node.name}.softmax", "softmax", node.scale,
                                                  n, n * node.channels))
        elif node.kind == "maxpool":
            if n == 0:
                out = SparseTensor(x.coords, x.features, x.batch_size,
                                   tuple(e // 2 for e in x.extents))
                pairs = 0
            else:
                rb = rulebook(x, 2, STRIDED)
                out = SparseTensor(rb.output_coords, np.zeros((rb.out_count, 0)),
                                   rb.batch_size, rb.out_extents)
                pairs = rb.pair_count
            report.elementwise.append(ElementCost(node.name, node.kind, node.scale, n,
                                                  pairs * node.channels))
        elif node.kind == "add":
            out = zero_fill_sum(xs[0], xs[1])[0]
            report.elementwise.append(ElementCost(node.name, node.kind, node.scale,
                                                  out.active_count,
                                                  min(xs[0].active_count, xs[1].active_count)
                                                  * node.channels))
        elif node.kind in ("bn", "relu"):
            out = x
            report.elementwise.append(ElementCost(node.name, node.kind, node.scale, n,
                                                  n * node.channels))
        elif node.kind == "partition":
            out = partition(x, spec)
        elif node.kind == "gather":
            out = gather(x, node.attrs["groups"])
        elif node.kind == "abstract":
            if reference is not None:
                kept = reference.values[node.output]
                out = _shape_only(kept)
            else:
                out = x
            report.elementwise.append(ElementCost(node.name, node.kind, node.scale, n, n))
        else:
            raise DataError(f"unknown node kind {node.kind!r}")
        values[node.output] = out
    return report


@dataclass
class LayerRatio:
    layer: str
    scale: int
    macs_a: int
    macs_b: int
    ratio: float
    covered: bool
    degenerate: bool


@dataclass
class Comparison:
    layers: List[LayerRatio]
    total_a: int
    total_b: int
    covered_a: int
    covered_b: int

    @staticmethod
    def _ratio(a: int, b: int):
        if b == 0:
            return (1.0, True) if a == 0 else (float("inf"), True)
        return a / b, False

    @property
    def total_ratio(self) -> float:
        return self._ratio(self.total_a, self.total_b)[0]

    @property
    def covered_ratio(self) -> float:
        return self._ratio(self.covered_a, self.covered_b)[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer,scale,macs_a,macs_b,ratio,covered,degenerate\n")
        for r in self.layers:
            buf.write(f"{r.layer},{r.scale},{r.macs_a},{r.macs_b},{r.ratio!r},"
                      f"{int(r.covered)},{int(r.degenerate)}\n")
        return buf.getvalue()

    def to_markdown(self) -> str:
        out = ["## MAC ratios", "",
               "| layer | scale | MACs | baseline MACs | ratio |", "|---|---:|---:|---:|---:|"]
        for r in self.layers:
            flag = " (0/0)" if r.degenerate else ""
            mark = " *" if r.covered else ""
            out.append(f"| {r.layer}{mark} | {r.scale} | {r.macs_a} | {r.macs_b} | "
                       f"{r.ratio:.4f}{flag} |")
        out += ["", f"SGC-covered layers (*): {self.covered_a} / {self.covered_b} = "
                    f"{self.covered_ratio:.4f}",
                f"All convolution layers: {self.total_a} / {self.total_b} = "
                f"{self.total_ratio:.4f}", ""]
        return "\n".join(out)


def compare(a: FlopsReport, b: FlopsReport) -> Comparison:
    """Layer-by-layer MAC ratios ``a / b``; ``b`` is the baseline.

    Layers are matched by name and must agree on channel widths.  A layer is
    counted as SGC-covered if either report marks it so.  A 0/0 layer gets
    ratio 1.0 and the ``degenerate`` flag.
    """
    la, lb = a.by_layer(), b.by_layer()
    if list(la) != list(lb):
        diff = sorted(set(la) ^ set(lb))
        raise DataError(f"reports differ in topology: layers {diff[:4]} are not shared")
    rows, cov_a, cov_b = [], 0, 0
    for name, ra in la.items():
        rb = lb[name]
        if (ra.c_in, ra.c_out) != (rb.c_in, rb.c_out):
            raise DataError(f"layer {name}: channels {ra.c_in}->{ra.c_out} vs {rb.c_in}->{rb.c_out}")
        covered = ra.covered or rb.covered
        ratio, degenerate = Comparison._ratio(ra.macs, rb.macs)
        rows.append(LayerRatio(name, ra.scale, ra.macs, rb.macs, ratio, covered, degenerate))
        if covered:
            cov_a += ra.macs
            cov_b += rb.macs
    return Comparison(rows, a.total_macs, b.total_macs, cov_a, cov_b)


def summarize(report: FlopsReport, baseline: Optional[FlopsReport] = None) -> str:
    text = report.to_markdown()
    if baseline is not None:
        text += "\n" + compare(report, baseline).to_markdown()
    return text
