"""DenseNet-style and plain-chain CNN graphs.

A model is an ordered list of :class:`Node` objects plus a parameter table.
Each node names the earlier outputs it consumes, so the dense-block
concatenation pattern is explicit in the graph: inside a dense block,
layer ``l`` reads the block input and the outputs of layers ``1..l-1``.
The plain kind keeps the same layers but wires each one to its
predecessor only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, ParameterError, ShapeError
from .tensor import Rng, Tensor, no_grad

HEAD_PRESETS = {
    "A": (1024,),
    "B": (1024, 512),
    "C": (1024, 512, 256),
    "D": (1024, 512, 256, 128),
}

INPUT = "input"


@dataclass
class HeadConfig:
    dense_widths: list = field(default_factory=lambda: list(HEAD_PRESETS["B"]))
    dropout_rate: float = 0.5

    @classmethod
    def preset(cls, name, dropout_rate=0.5):
        try:
            widths = HEAD_PRESETS[name.upper()]
        except KeyError:
            raise ConfigError(f"unknown head preset {name!r}; expected one of A, B, C, D") from None
        return cls(list(widths), dropout_rate)

    def validate(self):
        if any(int(w) < 1 for w in self.dense_widths):
            raise ConfigError(f"head widths must be positive, got {self.dense_widths}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"head dropout rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class DenseNetConfig:
    stem_channels: int = 64
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool: bool = True
    block_sizes: list = field(default_factory=lambda: [6, 12, 24, 16])
    growth_rate: int = 32
    bottleneck_multiplier: int = 4
    compression: float = 0.5
    head: HeadConfig = field(default_factory=HeadConfig)
    num_classes: int = 2
    input_resolution: int = 224
    in_channels: int = 3
    seed: int = 0

    @classmethod
    def densenet121(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def toy(cls, **overrides):
        """Small 32x32 configuration used for desk-scale experiments."""
        kw = dict(stem_channels=16, stem_kernel=3, stem_stride=1, stem_pool=False,
                  block_sizes=[3, 3], growth_rate=12, compression=0.5,
                  head=HeadConfig([64], 0.5), input_resolution=32, in_channels=1)
        kw.update(overrides)
        return cls(**kw)

    def downsampling(self):
        return self.stem_stride * (2 if self.stem_pool else 1) * 2 ** (len(self.block_sizes) - 1)

    def validate(self):
        if not self.block_sizes:
            raise ConfigError("block_sizes must be nonempty")
        if any(int(b) < 0 for b in self.block_sizes):
            raise ConfigError(f"block sizes must be >= 0, got {self.block_sizes}")
        for key in ("stem_channels", "stem_kernel", "stem_stride", "growth_rate",
                    "bottleneck_multiplier", "num_classes", "input_resolution", "in_channels"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if not 0.0 < self.compression <= 1.0:
            raise ConfigError(f"compression must be in (0, 1], got {self.compression}")
        self.head.validate()
        factor = self.downsampling()
        if self.input_resolution % factor:
            raise ConfigError(
                f"input resolution {self.input_resolution} is not divisible by the cumulative "
                f"downsampling factor {factor}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        head = d.pop("head", None)
        cfg = cls(**d)
        if head is not None:
            cfg.head = HeadConfig(list(head["dense_widths"]), float(head["dropout_rate"]))
        cfg.block_sizes = [int(b) for b in cfg.block_sizes]
        return cfg


@dataclass
class Node:
    name: str
    op: str
    inputs: list
    attrs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)   # name -> (shape, init kind)
    buffers: dict = field(default_factory=dict)  # name -> (shape, fill value)

    @property
    def out_channels(self):
        return self.attrs.get("out_channels")


@dataclass
class Subgraph:
    nodes: list
    out_channels: int
    output: str


def _bn_entries(prefix, channels):
    params = {f"{prefix}.gamma": ((channels,), "ones"), f"{prefix}.beta": ((channels,), "zeros")}
    buffers = {f"{prefix}.running_mean": ((channels,), 0.0), f"{prefix}.running_var": ((channels,), 1.0)}
    return params, buffers


def _bn_node(name, source, channels):
    params, buffers = _bn_entries(name, channels)
    return Node(name, "bn", [source], {"out_channels": channels}, params, buffers)


def _conv_node(name, source, cin, cout, kernel, stride=1, pad=0):
    return Node(name, "conv", [source],
                {"out_channels": cout, "kernel": kernel, "stride": stride, "pad": pad},
                {f"{name}.weight": ((cout, cin, kernel, kernel), "he")})


def build_dense_block(in_channels, num_layers, growth_rate, bottleneck_multiplier,
                      prefix="block", source=INPUT, kind="dense"):
    """Dense block of ``num_layers`` BN-ReLU-1x1conv-BN-ReLU-3x3conv layers.

    In the dense kind, layer l (1-based) takes ``in_channels + growth*(l-1)``
    input channels and the block emits ``in_channels + num_layers*growth``.
    """
    if min(in_channels, num_layers, growth_rate, bottleneck_multiplier) < 0:
        raise ConfigError("dense block arguments must be nonnegative")
    if kind not in ("dense", "plain"):
        raise ConfigError(f"kind must be 'dense' or 'plain', got {kind!r}")
    if num_layers == 0:
        return Subgraph([], in_channels, source)

    width = bottleneck_multiplier * growth_rate
    nodes = []
    outputs = [source]
    for l in range(1, num_layers + 1):
        name = f"{prefix}.layer{l}"
        if kind == "dense":
            inputs = list(outputs)
            cin = in_channels + growth_rate * (l - 1)
        else:
            inputs = [outputs[-1]]
            cin = in_channels if l == 1 else growth_rate
        params, buffers = _bn_entries(f"{name}.bn1", cin)
        params[f"{name}.conv1.weight"] = ((width, cin, 1, 1), "he")
        p2, b2 = _bn_entries(f"{name}.bn2", width)
        params.update(p2)
        buffers.update(b2)
        params[f"{name}.conv2.weight"] = ((growth_rate, width, 3, 3), "he")
        nodes.append(Node(name, "dense_layer", inputs,
                          {"in_channels": cin, "out_channels": growth_rate, "bottleneck": width,
                           "index": l},
                          params, buffers))
        outputs.append(name)

    if kind == "dense":
        out_channels = in_channels + num_layers * growth_rate
        concat_inputs = outputs
    else:
        out_channels = growth_rate
        concat_inputs = [outputs[-1]]
    nodes.append(Node(f"{prefix}.concat", "concat", concat_inputs, {"out_channels": out_channels}))
    return Subgraph(nodes, out_channels, f"{prefix}.concat")


def transition_width(in_channels, compression):
    return int(math.floor(compression * in_channels + 1e-9))


def build_transition(in_channels, compression, prefix="trans", source=INPUT):
    """BN-ReLU-1x1conv to floor(compression*in) channels, then 2x2/2 average pool."""
    if in_channels < 1:
        raise ConfigError(f"transition needs at least one input channel, got {in_channels}")
    if not 0.0 < compression <= 1.0:
        raise ConfigError(f"compression must be in (0, 1], got {compression}")
    out = transition_width(in_channels, compression)
    if out < 1:
        raise ConfigError(
            f"transition compression {compression} of {in_channels} channels leaves no channels")
    nodes = [
        _bn_node(f"{prefix}.bn", source, in_channels),
        Node(f"{prefix}.relu", "relu", [f"{prefix}.bn"], {"out_channels": in_channels}),
        _conv_node(f"{prefix}.conv", f"{prefix}.relu", in_channels, out, 1),
        Node(f"{prefix}.pool", "avg_pool", [f"{prefix}.conv"], {"out_channels": out}),
    ]
    return Subgraph(nodes, out, f"{prefix}.pool")


class ModelGraph:
    """Layer DAG with a named parameter table and BN running statistics."""

    def __init__(self, config, kind, nodes):
        self.config = config
        self.kind = kind
        self.nodes = nodes
        self.params = {}
        self.buffers = {}
        self.frozen = set()
        self.mode = "eval"
        self._index = {n.name: i for i, n in enumerate(nodes)}

    # -- structure

    def node(self, name):
        try:
            return self.nodes[self._index[name]]
        except KeyError:
            from .errors import LayerNotFoundError

            raise LayerNotFoundError(f"no layer named {name!r}") from None

    def layer_names(self):
        return [n.name for n in self.nodes]

    def edges(self):
        return [(src, n.name) for n in self.nodes for src in n.inputs]

    def in_degree(self, name):
        return len(self.node(name).inputs)

    def dense_layers(self):
        return [n for n in self.nodes if n.op == "dense_layer"]

    def block_outputs(self):
        return [n for n in self.nodes if n.op == "concat"]

    def default_cam_layer(self):
        return self.block_outputs()[-1].name

    def is_head_param(self, name):
        return name.startswith("head.") or name.startswith("classifier.")

    def head_param_names(self):
        return [p for p in self.params if self.is_head_param(p)]

    def backbone_param_names(self):
        return [p for p in self.params if not self.is_head_param(p)]

    # -- parameters

    def set_frozen(self, names):
        names = set(names)
        unknown = names - set(self.params)
        if unknown:
            raise ConfigError(f"cannot freeze unknown parameters: {sorted(unknown)[:5]}")
        self.frozen = names
        for pname, t in self.params.items():
            t.requires_grad = pname not in names

    def set_dropout_rate(self, rate):
        """Change the rate of every head dropout layer (and the config echo)."""
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.config.head.dropout_rate = float(rate)
        for node in self.nodes:
            if node.op == "dropout":
                node.attrs["rate"] = float(rate)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_arrays(self):
        """Copies of every parameter and buffer, keyed by name."""
        out = {k: t.data.copy() for k, t in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state_arrays(self, arrays):
        for k, v in arrays.items():
            if k in self.params:
                self.params[k].data = np.array(v, dtype=np.float64, copy=True)
            elif k in self.buffers:
                self.buffers[k] = np.array(v, dtype=np.float64, copy=True)
            else:
                raise ShapeError(f"state entry {k!r} does not belong to this model")

    def _bn_state(self, prefix):
        return ops.BatchNormState(
            gamma=self.params[f"{prefix}.gamma"], beta=self.params[f"{prefix}.beta"],
            running_mean=self.buffers[f"{prefix}.running_mean"],
            running_var=self.buffers[f"{prefix}.running_var"])

    def _bn(self, x, prefix, mode, relu=False):
        state = self._bn_state(prefix)
        # A fully frozen BN layer keeps its statistics: it runs in inference mode.
        if mode == "train" and f"{prefix}.gamma" in self.frozen and f"{prefix}.beta" in self.frozen:
            mode = "eval"
        op = ops.batch_norm_relu if relu else ops.batch_norm
        out, new_state = op(x, state, mode)
        if mode == "train":
            self.buffers[f"{prefix}.running_mean"] = new_state.running_mean
            self.buffers[f"{prefix}.running_var"] = new_state.running_var
        return out

    # -- evaluation

    def _run_node(self, node, xs, mode, rng):
        op = node.op
        a = node.attrs
        if op == "conv":
            return ops.conv2d(xs[0], self.params[f"{node.name}.weight"], None, a["stride"], a["pad"])
        if op == "bn":
            return self._bn(xs[0], node.name, mode)
        if op == "relu":
            return ops.relu(xs[0])
        if op == "avg_pool":
            return ops.avg_pool(xs[0], 2, 2)
        if op == "concat":
            return ops.concat_channels(xs)
        if op == "dense_layer":
            x = ops.concat_channels(xs)
            if x.shape[1] != a["in_channels"]:
                raise ShapeError(
                    f"{node.name}: expected {a['in_channels']} input channels, got {x.shape[1]}",
                    axis="channel")
            h = self._bn(x, f"{node.name}.bn1", mode, relu=True)
            h = ops.conv2d(h, self.params[f"{node.name}.conv1.weight"])
            h = self._bn(h, f"{node.name}.bn2", mode, relu=True)
            return ops.conv2d(h, self.params[f"{node.name}.conv2.weight"], pad=1)
        if op == "gap":
            return ops.global_avg_pool(xs[0])
        if op == "dense":
            return ops.dense(xs[0], self.params[f"{node.name}.weight"], self.params[f"{node.name}.bias"])
        if op == "dropout":
            return ops.dropout(xs[0], a["rate"], mode, rng)
        raise ConfigError(f"unknown op {op!r} in node {node.name}")


def _init_param(rng, shape, kind):
    if kind == "ones":
        return np.ones(shape)
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "he":
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    raise ConfigError(f"unknown initializer {kind!r}")


def build_model(config, kind="dense"):
    """Assemble and initialize a model.

    Layout: stem -> [dense block -> transition]* -> dense block -> BN -> ReLU
    -> global average pool -> head (dense, ReLU, dropout)* -> classifier.
    """
    config.validate()
    if kind not in ("dense", "plain"):
        raise ConfigError(f"kind must be 'dense' or 'plain', got {kind!r}")

    nodes = []
    k0 = config.stem_channels
    nodes.append(_conv_node("stem.conv", INPUT, config.in_channels, k0, config.stem_kernel,
                            config.stem_stride, config.stem_kernel // 2))
    nodes.append(_bn_node("stem.bn", "stem.conv", k0))
    nodes.append(Node("stem.relu", "relu", ["stem.bn"], {"out_channels": k0}))
    cur, channels = "stem.relu", k0
    if config.stem_pool:
        nodes.append(Node("stem.pool", "avg_pool", [cur], {"out_channels": channels}))
        cur = "stem.pool"

    nblocks = len(config.block_sizes)
    for b, size in enumerate(config.block_sizes, start=1):
        blk = build_dense_block(channels, int(size), config.growth_rate,
                                config.bottleneck_multiplier, prefix=f"block{b}", source=cur, kind=kind)
        if not blk.nodes:
            # keep a named block output so every block is addressable
            blk = Subgraph([Node(f"block{b}.concat", "concat", [cur], {"out_channels": channels})],
                           channels, f"block{b}.concat")
        nodes.extend(blk.nodes)
        cur, channels = blk.output, blk.out_channels
        if b < nblocks:
            tr = build_transition(channels, config.compression, prefix=f"trans{b}", source=cur)
            nodes.extend(tr.nodes)
            cur, channels = tr.output, tr.out_channels

    nodes.append(_bn_node("final.bn", cur, channels))
    nodes.append(Node("final.relu", "relu", ["final.bn"], {"out_channels": channels}))
    nodes.append(Node("gap", "gap", ["final.relu"], {"out_channels": channels}))
    cur, width = "gap", channels
    for i, w in enumerate(config.head.dense_widths, start=1):
        w = int(w)
        nodes.append(Node(f"head.dense{i}", "dense", [cur], {"out_channels": w},
                          {f"head.dense{i}.weight": ((width, w), "he"),
                           f"head.dense{i}.bias": ((w,), "zeros")}))
        nodes.append(Node(f"head.relu{i}", "relu", [f"head.dense{i}"], {"out_channels": w}))
        nodes.append(Node(f"head.dropout{i}", "dropout", [f"head.relu{i}"],
                          {"out_channels": w, "rate": config.head.dropout_rate}))
        cur, width = f"head.dropout{i}", w
    nodes.append(Node("classifier", "dense", [cur], {"out_channels": config.num_classes},
                      {"classifier.weight": ((width, config.num_classes), "he"),
                       "classifier.bias": ((config.num_classes,), "zeros")}))

    model = ModelGraph(config, kind, nodes)
    rng = Rng(config.seed).stream("init")
    for node in nodes:
        for pname, (shape, init) in node.params.items():
            if pname in model.params:
                raise ConfigError(f"duplicate parameter name {pname!r}")
            model.params[pname] = Tensor(_init_param(rng, shape, init), requires_grad=True, name=pname)
        for bname, (shape, fill) in node.buffers.items():
            model.buffers[bname] = np.full(shape, float(fill))
    return model


def forward(model, batch, mode="eval", rng=None):
    """Run the graph; returns ``(logits, cache)``.

    ``cache`` maps every node name (and ``"input"``) to its output tensor,
    which backward and Grad-CAM both read from.
    """
    cfg = model.config
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 4:
        raise ShapeError(f"batch must be (N, C, S, S), got {x.shape}", axis="rank")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"batch has {x.shape[1]} channels, model expects {cfg.in_channels}",
                         axis="channel")
    s = cfg.input_resolution
    if x.shape[2] != s:
        raise ShapeError(f"batch height {x.shape[2]} != model resolution {s}", axis="height")
    if x.shape[3] != s:
        raise ShapeError(f"batch width {x.shape[3]} != model resolution {s}", axis="width")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and rng is None and cfg.head.dropout_rate > 0 and cfg.head.dense_widths:
        raise ParameterError("train-mode forward needs an rng for dropout")
    gen = rng.generator if isinstance(rng, Rng) else rng

    model.mode = mode
    cache = {INPUT: x}
    for node in model.nodes:
        cache[node.name] = model._run_node(node, [cache[i] for i in node.inputs], mode, gen)
    return cache[model.nodes[-1].name], cache


def infer_logits(model, x, batch_size=64):
    """Eval-mode logits for an (N, C, S, S) array, without graph recording."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    with no_grad():
        for lo in range(0, len(x), batch_size):
            logits, _ = forward(model, x[lo:lo + batch_size], "eval")
            out.append(logits.data)
    if not out:
        return np.zeros((0, model.config.num_classes))
    return np.concatenate(out, axis=0)


def param_count(model):
    return int(sum(t.size for t in model.params.values()))


def channel_trace(config):
    """Channel counts after the stem, each block and each transition."""
    trace = [config.stem_channels]
    c = config.stem_channels
    for b, size in enumerate(config.block_sizes, start=1):
        c = c + int(size) * config.growth_rate
        trace.append(c)
        if b < len(config.block_sizes):
            c = transition_width(c, config.compression)
            trace.append(c)
    return trace
