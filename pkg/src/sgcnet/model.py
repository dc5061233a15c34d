"""Scene-completion network: configuration, graph construction and execution.

The network is a flat list of :class:`Node` records over named registers.
``build`` lays out two max-pool layers, a U-Net of pre-activation residual
blocks with strided-conv / dense-deconv transitions, an abstracting head and
a refinement stage ending in a 1x1x1 classifier.  Scales whose resolution
reaches ``sgc_min_resolution`` run their block stacks on group-partitioned
tensors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import layers as L
from .autograd import ParamRegistry, Tape
from .errors import DataError
from .sgc import PATTERN, RANDOM, PartitionSpec
from .sparse_tensor import (DECONV, STRIDED, SUBMANIFOLD, SparseTensor, build_rulebook, empty)

HEAD_ABSTRACT = "abstract"
HEAD_FINAL = "final"


@dataclass
class NetworkConfig:
    input_resolution: int = 32
    class_count: int = 12
    channels: Tuple[int, ...] = (16, 32, 48)
    blocks: Tuple[int, ...] = (1, 1, 1)
    refine_blocks: int = 1
    kernel_size: int = 3
    sgc_groups: int = 1
    sgc_strategy: str = PATTERN
    sgc_pattern: Tuple[int, int, int] = (1, 1, 1)
    sgc_seed: int = 0
    sgc_min_resolution: int = 32
    abstract_k: int = 1
    loss_alphas: Tuple[float, float] = (1.0, 1.0)
    bn_momentum: float = 0.99
    bn_eps: float = 1e-4
    init_seed: int = 0

    @property
    def output_resolution(self) -> int:
        return self.input_resolution // 4

    @property
    def scale_count(self) -> int:
        return len(self.channels)

    def scale_resolutions(self) -> List[int]:
        return [self.output_resolution >> s for s in range(self.scale_count)]

    def partition_spec(self, seed: Optional[int] = None) -> PartitionSpec:
        if self.sgc_strategy == RANDOM:
            return PartitionSpec.random(self.sgc_groups, self.sgc_seed if seed is None else seed)
        return PartitionSpec(self.sgc_groups, PATTERN, tuple(self.sgc_pattern))

    def validate(self) -> None:
        r = self.input_resolution
        if r <= 0 or r % 4:
            raise DataError(f"input_resolution {r} must be a positive multiple of 4")
        n = self.scale_count
        if n < 1:
            raise DataError("channels must list at least one scale")
        if len(self.blocks) != n:
            raise DataError(f"blocks has {len(self.blocks)} entries, channels has {n}")
        if (r // 4) % (1 << (n - 1)):
            raise DataError(
                f"output resolution {r // 4} cannot be halved {n - 1} times for {n} scales")
        if self.class_count < 2:
            raise DataError("class_count must be at least 2")
        if self.kernel_size % 2 == 0:
            raise DataError("kernel_size must be odd")
        if len(self.loss_alphas) != 2:
            raise DataError("loss_alphas needs one weight per prediction head (2)")
        if self.abstract_k < 0:
            raise DataError("abstract_k must be non-negative")
        if not 0 < self.bn_momentum < 1:
            raise DataError("bn_momentum must lie in (0, 1)")
        self.partition_spec()


@dataclass
class TrainConfig:
    batch_size: int = 2
    epochs: int = 300
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0
    tau: float = 3.0
    gt_tau: float = 2.0
    eval_seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise DataError("batch_size >= 1, epochs >= 0 and learning_rate >= 0 required")
        if self.tau < 1:
            raise DataError("tau must be at least 1 voxel")


@dataclass
class Config:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_text(self) -> str:
        lines = []
        for section in (self.network, self.train):
            for f in dataclasses.fields(section):
                v = getattr(section, f.name)
                if isinstance(v, (tuple, list)):
                    v = ",".join(str(x) for x in v)
                lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(default, raw: str, key: str):
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else int
            return tuple(kind(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise DataError(f"config key {key!r}: cannot parse {raw!r}") from None


def parse_config(text: str, source: str = "<string>") -> Config:
    cfg = Config()
    owners = {f.name: cfg.network for f in dataclasses.fields(NetworkConfig)}
    owners.update({f.name: cfg.train for f in dataclasses.fields(TrainConfig)})
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in owners:
            raise DataError(f"{source}:{lineno}: unknown config key {key!r}")
        owner = owners[key]
        setattr(owner, key, _coerce(getattr(owner, key), raw, key))
    cfg.network.validate()
    cfg.train.validate()
    return cfg


def load_config(path) -> Config:
    path = Path(path)
    if not path.exists():
        packaged = Path(__file__).parent / "configs" / path.name
        if packaged.exists():
            path = packaged
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def packaged_config(name: str) -> Config:
    return load_config(Path(__file__).parent / "configs" / name)


# graph --------------------------------------------------------------------

@dataclass
class Node:
    name: str
    kind: str
    inputs: Tuple[str, ...]
    output: str
    scale: int
    resolution: int
    channels: int
    covered: bool = False
    attrs: dict = field(default_factory=dict)


@dataclass
class LayerGraph:
    config: NetworkConfig
    nodes: List[Node]
    heads: Dict[str, str]
    registry: ParamRegistry

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def kinds(self) -> List[str]:
        return [n.kind for n in self.nodes]

    def conv_nodes(self) -> List[Node]:
        return [n for n in self.nodes if n.kind in ("conv", "linear")]


class _Builder:
    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        self.nodes: List[Node] = []
        self.registry = ParamRegistry()
        self.rng = np.random.default_rng(cfg.init_seed)
        self.scale = -1
        self.res = cfg.input_resolution
        self.covered = False

    def _add(self, name, kind, inputs, channels, **attrs) -> str:
        self.nodes.append(Node(name, kind, tuple(inputs), name, self.scale, self.res, channels,
                               self.covered, attrs))
        return name

    def maxpool(self, name, x, channels):
        self.res //= 2
        return self._add(name, "maxpool", [x], channels)

    def conv(self, name, x, mode, k, c_in, c_out):
        offsets = k ** 3 if mode == SUBMANIFOLD else 8
        p = L.ConvParams.he(self.rng, offsets, c_in, c_out)
        self.registry.add(f"{name}.weight", p.weight, decay=True)
        self.registry.add(f"{name}.bias", p.bias)
        if mode == STRIDED:
            self.res //= 2
        elif mode == DECONV:
            self.res *= 2
        return self._add(name, "conv", [x], c_out, mode=mode, k=k, c_in=c_in)

    def linear(self, name, x, c_in, c_out):
        p = L.ConvParams.he(self.rng, 1, c_in, c_out)
        self.registry.add(f"{name}.weight", p.weight, decay=True)
        self.registry.add(f"{name}.bias", p.bias)
        return self._add(name, "linear", [x], c_out, c_in=c_in)

    def bn(self, name, x, c):
        self.registry.add(f"{name}.gamma", np.ones(c))
        self.registry.add(f"{name}.beta", np.zeros(c))
        self.registry.add(f"{name}.running_mean", np.zeros(c), buffer=True)
        self.registry.add(f"{name}.running_var", np.ones(c), buffer=True)
        return self._add(name, "bn", [x], c)

    def relu(self, name, x, c):
        return self._add(name, "relu", [x], c)

    def bn_relu(self, name, x, c):
        return self.relu(f"{name}.relu", self.bn(f"{name}.bn", x, c), c)

    def resblock(self, name, x, c):
        k = self.cfg.kernel_size
        h = self.bn_relu(f"{name}.pre1", x, c)
        h = self.conv(f"{name}.conv1", h, SUBMANIFOLD, k, c, c)
        h = self.bn_relu(f"{name}.pre2", h, c)
        h = self.conv(f"{name}.conv2", h, SUBMANIFOLD, k, c, c)
        return self._add(f"{name}.add", "add", [x, h], c)

    def stack(self, name, x, c, count):
        """Residual blocks, group-partitioned when this scale is SGC-covered."""
        cfg = self.cfg
        sgc = cfg.sgc_groups > 1 and self.res >= cfg.sgc_min_resolution and count > 0
        if sgc:
            x = self._add(f"{name}.partition", "partition", [x], c)
            self.covered = True
        for b in range(count):
            x = self.resblock(f"{name}.block{b}", x, c)
        if sgc:
            self.covered = False
            x = self._add(f"{name}.gather", "gather", [x], c, groups=cfg.sgc_groups)
        return x


def build(config: NetworkConfig) -> LayerGraph:
    config.validate()
    bld = _Builder(config)
    ch = list(config.channels)
    n = len(ch)
    x = "input"
    x = bld.maxpool("pool1", x, 1)
    x = bld.maxpool("pool2", x, 1)
    bld.scale = 0
    x = bld.conv("stem", x, SUBMANIFOLD, config.kernel_size, 1, ch[0])
    skips = []
    for s in range(n):
        bld.scale = s
        x = bld.stack(f"enc{s}", x, ch[s], config.blocks[s])
        skips.append(x)
        if s < n - 1:
            h = bld.bn_relu(f"enc{s}.down.pre", x, ch[s])
            x = bld.conv(f"enc{s}.down", h, STRIDED, 2, ch[s], ch[s + 1])
    for s in range(n - 2, -1, -1):
        h = bld.bn_relu(f"dec{s}.up.pre", x, ch[s + 1])
        x = bld.conv(f"dec{s}.up", h, DECONV, 2, ch[s + 1], ch[s])
        bld.scale = s
        x = bld._add(f"dec{s}.skip", "add", [skips[s], x], ch[s])
        x = bld.stack(f"dec{s}", x, ch[s], config.blocks[s])
    k = config.class_count
    h = bld.bn_relu("abstract.pre", x, ch[0])
    logits0 = bld.linear("abstract.cls", h, ch[0], k)
    x = bld._add("abstract.select", "abstract", [x, logits0], ch[0], k=config.abstract_k)
    x = bld.stack("refine", x, ch[0], config.refine_blocks)
    h = bld.bn_relu("final.pre", x, ch[0])
    logits1 = bld.linear("final.cls", h, ch[0], k)
    return LayerGraph(config, bld.nodes, {HEAD_ABSTRACT: logits0, HEAD_FINAL: logits1},
                      bld.registry)


# execution ----------------------------------------------------------------

@dataclass
class ForwardResult:
    heads: Dict[str, SparseTensor]
    head_ids: Dict[str, int]
    values: Dict[str, SparseTensor]

    @property
    def logits(self) -> SparseTensor:
        return self.heads[HEAD_FINAL]

    def prediction(self) -> np.ndarray:
        """Dense ``(B, D, H, W)`` class grid; sites pruned from the output are empty."""
        return predict_labels(self.heads[HEAD_FINAL])


def predict_labels(logits: SparseTensor) -> np.ndarray:
    d, h, w = logits.extents
    out = np.zeros((logits.batch_size, d, h, w), dtype=np.uint8)
    c = logits.coords
    if len(c):
        out[c[:, 0], c[:, 3], c[:, 2], c[:, 1]] = np.argmax(logits.features, axis=1)
    return out


class _RulebookCache:
    def __init__(self):
        self._store = {}

    def get(self, t: SparseTensor, k: int, mode: str):
        key = (id(t.coords), t.batch_size, k, mode)
        hit = self._store.get(key)
        if hit is not None and hit[0] is t.coords:
            return hit[1]
        rb = build_rulebook(t, k, mode)
        self._store[key] = (t.coords, rb)
        return rb


def _bn_state(reg: ParamRegistry, name: str, cfg: NetworkConfig) -> L.BatchNormState:
    return L.BatchNormState(reg[f"{name}.gamma"], reg[f"{name}.beta"],
                            reg[f"{name}.running_mean"], reg[f"{name}.running_var"],
                            momentum=cfg.bn_momentum, eps=cfg.bn_eps)


def forward(graph: LayerGraph, inp: SparseTensor, mode: str = "infer",
            tape: Optional[Tape] = None, partition_seed: Optional[int] = None) -> ForwardResult:
    """Run the network on an fTSDF tensor (``C = 1``, extents ``R^3``).

    ``mode`` is ``"train"`` (batch statistics, running-stat updates) or
    ``"infer"``.  ``partition_seed`` overrides the configured random-partition
    seed.  When ``tape`` is given every differentiable step is recorded.
    """
    cfg = graph.config
    r = cfg.input_resolution
    if mode not in ("train", "infer"):
        raise DataError(f"mode must be 'train' or 'infer', got {mode!r}")
    if tuple(inp.extents) != (r, r, r) or inp.channels != 1:
        raise DataError(f"input must be {r}^3 with one channel, got {inp!r}")
    if inp.active_count == 0:
        raise DataError("input tensor has no active sites; nothing to predict from")
    training = mode == "train"
    reg = graph.registry
    spec = cfg.partition_spec(partition_seed)
    cache = _RulebookCache()
    values: Dict[str, SparseTensor] = {"input": inp}
    ids: Dict[str, Optional[int]] = {"input": None}

    for node in graph.nodes:
        xs = [values[i] for i in node.inputs]
        in_ids = [ids[i] for i in node.inputs]
        x = xs[0]
        params = {}
        if x.active_count == 0 and node.kind not in ("add", "partition", "gather"):
            out, bwd, ctx = empty(x.batch_size, _out_extents(node, x), node.channels), None, None
        elif node.kind == "maxpool":
            out, ctx = L.max_pool_fwd(x, cache.get(x, 2, STRIDED))
            bwd = L.max_pool_bwd
        elif node.kind == "conv":
            rb = cache.get(x, node.attrs["k"], node.attrs["mode"])
            p = L.ConvParams(reg[f"{node.name}.weight"], reg[f"{node.name}.bias"])
            out, ctx = L.conv_fwd(x, p, rb)
            bwd = L.conv_bwd
            params = {"weight": f"{node.name}.weight", "bias": f"{node.name}.bias"}
        elif node.kind == "linear":
            p = L.ConvParams(reg[f"{node.name}.weight"], reg[f"{node.name}.bias"])
            out, ctx = L.linear_fwd(x, p)
            bwd = L.linear_bwd
            params = {"weight": f"{node.name}.weight", "bias": f"{node.name}.bias"}
        elif node.kind == "bn":
            s = _bn_state(reg, node.name, cfg)
            out, ctx = L.batch_norm_fwd(x, s, training)
            if training:
                reg[f"{node.name}.running_mean"] = s.running_mean
                reg[f"{node.name}.running_var"] = s.running_var
            bwd = L.batch_norm_bwd
            params = {"gamma": f"{node.name}.gamma", "beta": f"{node.name}.beta"}
        elif node.kind == "relu":
            out, ctx = L.relu_fwd(x)
            bwd = L.relu_bwd
        elif node.kind == "add":
            out, ctx = L.zero_fill_sum_fwd(xs[0], xs[1])
            bwd = L.zero_fill_sum_bwd
        elif node.kind == "partition":
            out, ctx = L.partition_fwd(x, spec)
            bwd = L.partition_bwd
        elif node.kind == "gather":
            out, ctx = L.gather_fwd(x, node.attrs["groups"])
            bwd = L.gather_bwd
        elif node.kind == "abstract":
            out, ctx = L.abstract_fwd(xs[0], xs[1], node.attrs["k"])
            bwd = L.abstract_bwd
            in_ids = in_ids[:1]
        else:
            raise DataError(f"unknown node kind {node.kind!r}")
        values[node.output] = out
        if tape is not None and bwd is not None and (
                params or any(i is not None for i in in_ids)):
            vid = tape.new_id()
            tape.record(in_ids, vid, bwd, ctx, params)
            ids[node.output] = vid
        else:
            ids[node.output] = None
    heads = {h: values[v] for h, v in graph.heads.items()}
    head_ids = {h: ids[v] for h, v in graph.heads.items()}
    return ForwardResult(heads, head_ids, values)


def _out_extents(node: Node, x: SparseTensor):
    if node.kind == "maxpool" or (node.kind == "conv" and node.attrs["mode"] == STRIDED):
        return tuple(e // 2 for e in x.extents)
    if node.kind == "conv" and node.attrs["mode"] == DECONV:
        return tuple(e * 2 for e in x.extents)
    return x.extents


def flops_forward(graph: LayerGraph, inp: SparseTensor, **kw):
    from .profiler import count_flops
    return count_flops(graph, inp, **kw)
