"""Graph IR and declarative construction of the CMSNet arrangements.

A :class:`Graph` is an ordered list of typed nodes plus a flat map of named
weight tensors.  :func:`build_arrangement` composes the adapted MobileNetV2
backbone, one of the GPP/SPP/ASPP context heads and the bilinear decoder
(optionally with the stride-4 shortcut) into such a graph.
"""

from __future__ import annotations

import copy
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .tensor import BN_EPSILON, DTYPE, same_padding

# name -> (output stride, pyramid, shortcut)
ARRANGEMENTS = {
    "CM0": (8, "GPP", False),
    "CM1": (8, "SPP", False),
    "CM2": (8, "ASPP", False),
    "CM3": (16, "GPP", False),
    "CM4": (16, "SPP", False),
    "CM5": (16, "ASPP", False),
    "CM6": (16, "GPP", True),
    "CM7": (16, "SPP", True),
    "CM8": (16, "ASPP", True),
}

# (expansion e, out channels d, repeats n, stride s)
MOBILENETV2_GROUPS = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 1),
    (6, 320, 1, 1),
]
STEM_CHANNELS = 32
HEAD_CHANNELS = 256
ASPP_RATES = {16: (1, 6, 12, 18), 8: (1, 12, 24, 36)}
SHORTCUT_GROUP = 1  # index of the (6, 24, 2, 2) group: stride 4, 24 channels

BACKBONES = ("mobilenetv2",)
PYRAMIDS = ("GPP", "SPP", "ASPP")

OP_KINDS = (
    "input",
    "conv2d",
    "batch_norm",
    "relu6",
    "add",
    "concat",
    "bilinear_resize",
    "avg_pool",
    "adaptive_avg_pool",
    "global_avg_pool",
)


@dataclass
class ArrangementConfig:
    name: str
    output_stride: int
    pyramid: str
    shortcut: bool
    num_classes: int = 10
    input_h: int = 483
    input_w: int = 769
    input_c: int = 3
    backbone: str = "mobilenetv2"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unsupported backbone {self.backbone!r}; supported: {', '.join(BACKBONES)}")
        if self.output_stride not in (8, 16):
            raise ConfigError(f"output_stride must be 8 or 16, got {self.output_stride}")
        if self.pyramid not in PYRAMIDS:
            raise ConfigError(f"pyramid must be one of {PYRAMIDS}, got {self.pyramid!r}")
        if self.shortcut and self.output_stride != 16:
            raise ConfigError("the shortcut is only available with output_stride 16")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if min(self.input_h, self.input_w, self.input_c) < 1:
            raise ConfigError("input dims must be positive")

    @classmethod
    def from_name(cls, name: str, num_classes: int = 10, input_h: int = 483, input_w: int = 769, input_c: int = 3):
        key = canonical_name(name)
        os_, pyramid, shortcut = ARRANGEMENTS[key]
        return cls(key, os_, pyramid, shortcut, num_classes, input_h, input_w, input_c)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "backbone": self.backbone,
            "output_stride": self.output_stride,
            "pyramid": self.pyramid,
            "shortcut": self.shortcut,
            "num_classes": self.num_classes,
            "input_h": self.input_h,
            "input_w": self.input_w,
            "input_c": self.input_c,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArrangementConfig":
        required = ("name", "output_stride", "pyramid", "shortcut", "num_classes", "input_h", "input_w")
        missing = [k for k in required if k not in d]
        if missing:
            raise ConfigError(f"config is missing fields: {', '.join(missing)}")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"config has unknown fields: {', '.join(sorted(unknown))}")
        return cls(
            name=str(d["name"]),
            output_stride=int(d["output_stride"]),
            pyramid=str(d["pyramid"]).upper(),
            shortcut=bool(d["shortcut"]),
            num_classes=int(d["num_classes"]),
            input_h=int(d["input_h"]),
            input_w=int(d["input_w"]),
            input_c=int(d.get("input_c", 3)),
            backbone=str(d.get("backbone", "mobilenetv2")),
        )


def canonical_name(name: str) -> str:
    """Map ``"CMSNet-M5"`` / ``"cm5"`` to ``"CM5"``."""
    m = re.fullmatch(r"(?:CMSNET-M|CM)(\d+)", name.strip().upper())
    if not m or f"CM{m.group(1)}" not in ARRANGEMENTS:
        raise ConfigError(f"unknown arrangement {name!r}; expected one of CM0..CM8")
    return f"CM{m.group(1)}"


def save_config(config: ArrangementConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


def load_config(path) -> ArrangementConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ParseError(f"{path}: config must be a JSON object")
    return ArrangementConfig.from_dict(data)


@dataclass
class BottleneckSpec:
    expansion: int
    out_channels: int
    repeats: int
    stride: int
    dilation: int = 1

    def __post_init__(self):
        if min(self.expansion, self.out_channels, self.repeats, self.dilation) < 1:
            raise ConfigError("bottleneck fields must be positive")
        if self.stride not in (1, 2):
            raise ConfigError("bottleneck stride must be 1 or 2")


@dataclass
class Node:
    id: str
    op: str
    inputs: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    params: dict[str, str] = field(default_factory=dict)


@dataclass
class Graph:
    nodes: list[Node]
    weights: dict[str, np.ndarray]
    outputs: list[str]
    meta: dict = field(default_factory=dict)

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.nodes[0].attrs["shape"])

    def consumers(self) -> dict[str, list[str]]:
        out = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                out[i].append(n.id)
        return out

    def ops(self, kind: str) -> list[Node]:
        return [n for n in self.nodes if n.op == kind]

    def copy(self) -> "Graph":
        return Graph(
            [Node(n.id, n.op, list(n.inputs), dict(n.attrs), dict(n.params)) for n in self.nodes],
            {k: v.copy() for k, v in self.weights.items()},
            list(self.outputs),
            copy.deepcopy(self.meta),
        )

    def validate(self) -> None:
        seen: set[str] = set()
        refs: dict[str, int] = {}
        for n in self.nodes:
            if n.op not in OP_KINDS:
                raise ConfigError(f"node {n.id}: unknown op {n.op!r}")
            if n.id in seen:
                raise ConfigError(f"duplicate node id {n.id}")
            for i in n.inputs:
                if i not in seen:
                    raise ConfigError(f"node {n.id}: input {i} does not precede it")
            seen.add(n.id)
            for w in n.params.values():
                refs[w] = refs.get(w, 0) + 1
        if self.nodes[0].op != "input" or len(self.ops("input")) != 1:
            raise ConfigError("graph must start with its single input node")
        for o in self.outputs:
            if o not in seen:
                raise ConfigError(f"output {o} is not a node")
        if set(refs) != set(self.weights) or any(c != 1 for c in refs.values()):
            raise ConfigError("every weight must be referenced by exactly one node")

    def astype(self, dtype) -> "Graph":
        """Copy with every weight cast to ``dtype`` (the interpreter follows the weights' precision)."""
        g = self.copy()
        g.weights = {k: v.astype(dtype) for k, v in g.weights.items()}
        return g

    def structure(self) -> list[tuple]:
        """Hashable summary used for structural equality checks."""
        return [
            (n.id, n.op, tuple(n.inputs), tuple(sorted(n.attrs.items(), key=str)), tuple(sorted(n.params.items())))
            for n in self.nodes
        ] + [("outputs", tuple(self.outputs))]


def node_output_shape(node: Node, in_shapes: list[tuple], weights: dict) -> tuple[int, int, int]:
    """Static ``(h, w, c)`` of ``node`` given its input shapes."""
    op, a = node.op, node.attrs
    if op == "input":
        return tuple(a["shape"])
    h, w, c = in_shapes[0]
    if op == "conv2d":
        kh, kw, cin_g, cout = weights[node.params["weight"]].shape
        if cin_g * a.get("groups", 1) != c:
            raise ConfigError(f"node {node.id}: expects {cin_g * a.get('groups', 1)} input channels, got {c}")
        s, r = a.get("stride", 1), a.get("dilation", 1)
        return same_padding(h, kh, s, r)[0], same_padding(w, kw, s, r)[0], cout
    if op == "batch_norm":
        if len(weights[node.params["gamma"]]) != c:
            raise ConfigError(f"node {node.id}: batch-norm channel mismatch")
        return h, w, c
    if op == "relu6":
        return h, w, c
    if op == "add":
        if any(s != in_shapes[0] for s in in_shapes):
            raise ConfigError(f"node {node.id}: add operands differ {in_shapes}")
        return h, w, c
    if op == "concat":
        if any(s[:2] != (h, w) for s in in_shapes):
            raise ConfigError(f"node {node.id}: concat operands differ spatially {in_shapes}")
        return h, w, sum(s[2] for s in in_shapes)
    if op in ("bilinear_resize", "adaptive_avg_pool"):
        return a["out_h"], a["out_w"], c
    if op == "avg_pool":
        s = a["stride"]
        return -(-h // s), -(-w // s), c
    if op == "global_avg_pool":
        return 1, 1, c
    raise ConfigError(f"node {node.id}: unknown op {op!r}")


def infer_shapes(graph: Graph, input_dims: tuple | None = None, batch: int = 1) -> dict[str, tuple]:
    """Propagate ``(n, h, w, c)`` through ``graph`` with the SAME/ceil rule."""
    shapes: dict[str, tuple] = {}
    for node in graph.nodes:
        if node.op == "input":
            hwc = tuple(input_dims) if input_dims is not None else tuple(node.attrs["shape"])
            if len(hwc) == 2:
                hwc = (*hwc, node.attrs["shape"][2])
        else:
            hwc = node_output_shape(node, [shapes[i][1:] for i in node.inputs], graph.weights)
        shapes[node.id] = (batch, *hwc)
    return shapes


def count_params(graph: Graph) -> int:
    return int(sum(w.size for w in graph.weights.values()))


class GraphBuilder:
    """Appends nodes while tracking static shapes and initialising weights."""

    def __init__(self, input_shape, seed: int = 0, dtype=DTYPE):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.nodes: list[Node] = []
        self.weights: dict[str, np.ndarray] = {}
        self.shapes: dict[str, tuple] = {}
        self.input = self.add(Node("input", "input", attrs={"shape": list(input_shape)}))

    def add(self, node: Node) -> str:
        if node.id in self.shapes:
            raise ConfigError(f"duplicate node id {node.id}")
        self.shapes[node.id] = node_output_shape(node, [self.shapes[i] for i in node.inputs], self.weights)
        self.nodes.append(node)
        return node.id

    def channels(self, x: str) -> int:
        return self.shapes[x][2]

    def spatial(self, x: str) -> tuple[int, int]:
        return self.shapes[x][:2]

    def conv(self, name, x, out_channels, kernel=1, stride=1, dilation=1, groups=1, bias=False, std=None):
        cin = self.channels(x)
        fan_in = kernel * kernel * cin // groups
        std = np.sqrt(2.0 / fan_in) if std is None else std
        self.weights[f"{name}/weight"] = (
            self.rng.standard_normal((kernel, kernel, cin // groups, out_channels)) * std
        ).astype(self.dtype)
        params = {"weight": f"{name}/weight"}
        if bias:
            self.weights[f"{name}/bias"] = np.zeros(out_channels, self.dtype)
            params["bias"] = f"{name}/bias"
        attrs = {"stride": stride, "dilation": dilation, "groups": groups, "activation": None}
        return self.add(Node(name, "conv2d", [x], attrs, params))

    def bn(self, name, x):
        c = self.channels(x)
        init = {"gamma": np.ones, "beta": np.zeros, "mean": np.zeros, "var": np.ones}
        params = {}
        for role, fn in init.items():
            self.weights[f"{name}/{role}"] = fn(c, self.dtype)
            params[role] = f"{name}/{role}"
        return self.add(Node(name, "batch_norm", [x], {"epsilon": BN_EPSILON}, params))

    def relu6(self, name, x):
        return self.add(Node(name, "relu6", [x]))

    def conv_bn(self, name, x, out_channels, relu=True, **kw):
        y = self.bn(f"{name}_bn", self.conv(name, x, out_channels, **kw))
        return self.relu6(f"{name}_relu", y) if relu else y

    def resize(self, name, x, out_h, out_w):
        return self.add(Node(name, "bilinear_resize", [x], {"out_h": out_h, "out_w": out_w}))

    def concat(self, name, xs):
        return self.add(Node(name, "concat", list(xs)))

    def sum(self, name, a, b):
        return self.add(Node(name, "add", [a, b]))

    def finish(self, outputs, meta) -> Graph:
        g = Graph(self.nodes, self.weights, list(outputs), meta)
        g.validate()
        return g


def backbone_specs(output_stride: int) -> list[BottleneckSpec]:
    """Per-group bottleneck specs with stride/dilation resolved for ``output_stride``.

    Once the running stride reaches ``output_stride`` further strides are
    replaced by dilation.  A converted group records the new rate; its first
    block still runs at the previous rate (see :func:`build_backbone`).
    """
    current, rate, specs = 2, 1, []
    for e, d, n, s in MOBILENETV2_GROUPS:
        if s > 1 and current >= output_stride:
            rate *= s
            specs.append(BottleneckSpec(e, d, n, 1, rate))
        else:
            specs.append(BottleneckSpec(e, d, n, s, rate))
            current *= s
    return specs


def build_backbone(b: GraphBuilder, config: ArrangementConfig):
    """Adapted MobileNetV2 trunk; returns ``(features, stride4_tap, group_outputs)``."""
    if config.backbone != "mobilenetv2":
        raise ConfigError(f"unsupported backbone {config.backbone!r}")
    x = b.conv_bn("backbone/conv0", b.input, STEM_CHANNELS, kernel=3, stride=2)
    groups_out, tap, block = [x], None, 0
    pending_rate = 1
    for gi, spec in enumerate(backbone_specs(config.output_stride)):
        for k in range(spec.repeats):
            stride = spec.stride if k == 0 else 1
            # the group whose stride was converted runs at the previous rate on its first block
            rate = pending_rate if k == 0 else spec.dilation
            x = _bottleneck(b, f"backbone/block{block}", x, spec.expansion, spec.out_channels, stride, rate)
            block += 1
        pending_rate = spec.dilation
        groups_out.append(x)
        if gi == SHORTCUT_GROUP:
            tap = x
    return x, tap, groups_out


def _bottleneck(b: GraphBuilder, name, x, expansion, out_channels, stride, dilation):
    cin = b.channels(x)
    h = x
    if expansion != 1:
        h = b.conv_bn(f"{name}/expand", h, cin * expansion)
    h = b.conv_bn(f"{name}/depthwise", h, cin * expansion, kernel=3, stride=stride,
                  dilation=dilation, groups=cin * expansion)
    h = b.conv_bn(f"{name}/project", h, out_channels, relu=False)
    if stride == 1 and cin == out_channels:
        h = b.sum(f"{name}/residual", x, h)
    return h


def spp_levels(fh: int, fw: int) -> list[tuple[int, int]]:
    return [(1, 1)] + [(max(fh // k, 1), max(fw // k, 1)) for k in (2, 3, 6)]


def build_pyramid(b: GraphBuilder, features: str, config: ArrangementConfig) -> str:
    fh, fw = b.spatial(features)
    d = b.channels(features)
    if config.pyramid == "GPP":
        a = b.conv_bn("head/gpp/features", features, HEAD_CHANNELS)
        p = b.add(Node("head/gpp/pool", "global_avg_pool", [features]))
        p = b.conv_bn("head/gpp/pool_conv", p, HEAD_CHANNELS)
        p = b.resize("head/gpp/pool_resize", p, fh, fw)
        x = b.concat("head/concat", [a, p])
        return b.conv_bn("head/project", x, HEAD_CHANNELS)
    if config.pyramid == "SPP":
        branches = [features]
        for k, (oh, ow) in enumerate(spp_levels(fh, fw)):
            if k == 0:
                p = b.add(Node(f"head/spp/pool{k}", "global_avg_pool", [features]))
            else:
                p = b.add(Node(f"head/spp/pool{k}", "adaptive_avg_pool", [features], {"out_h": oh, "out_w": ow}))
            p = b.conv_bn(f"head/spp/conv{k}", p, d // 4)
            branches.append(b.resize(f"head/spp/resize{k}", p, fh, fw))
        x = b.concat("head/concat", branches)
        x = b.conv_bn("head/project_depthwise", x, b.channels(x), kernel=3, groups=b.channels(x))
        return b.conv_bn("head/project", x, HEAD_CHANNELS)
    if config.pyramid == "ASPP":
        branches = []
        for rate in ASPP_RATES[config.output_stride]:
            kernel = 1 if rate == 1 else 3
            branches.append(b.conv_bn(f"head/aspp/rate{rate}", features, HEAD_CHANNELS, kernel=kernel, dilation=rate))
        x = b.concat("head/concat", branches)
        return b.conv_bn("head/project", x, HEAD_CHANNELS)
    raise ConfigError(f"unknown pyramid {config.pyramid!r}")


def build_decoder(b: GraphBuilder, head: str, tap: str | None, config: ArrangementConfig) -> str:
    c = config.num_classes
    logits = b.conv("decoder/logits", head, c, bias=True, std=np.sqrt(1.0 / b.channels(head)))
    if config.shortcut:
        th, tw = b.spatial(tap)
        up = b.resize("decoder/resize_to_tap", logits, th, tw)
        proj = b.conv("decoder/shortcut", tap, c, bias=True, std=np.sqrt(1.0 / b.channels(tap)))
        logits = b.sum("decoder/shortcut_add", up, proj)
    return b.resize("decoder/resize_to_input", logits, config.input_h, config.input_w)


def build_graph(config: ArrangementConfig, seed: int = 0) -> Graph:
    config.validate()
    b = GraphBuilder((config.input_h, config.input_w, config.input_c), seed)
    features, tap, groups_out = build_backbone(b, config)
    head = build_pyramid(b, features, config)
    out = build_decoder(b, head, tap, config)
    meta = {
        "config": config.to_dict(),
        "backbone_groups": groups_out,
        "features": features,
        "shortcut_tap": tap,
        "head": head,
    }
    return b.finish([out], meta)


def build_arrangement(name: str, num_classes: int = 10, input_h: int = 483, input_w: int = 769,
                      input_c: int = 3, seed: int = 0) -> Graph:
    return build_graph(ArrangementConfig.from_name(name, num_classes, input_h, input_w, input_c), seed)


def graph_config(graph: Graph) -> ArrangementConfig:
    return ArrangementConfig.from_dict(graph.meta["config"])


_WEIGHTS_MAGIC = b"CMSW"
_WEIGHTS_VERSION = 1


def save_weights(weights: dict[str, np.ndarray], path) -> None:
    """Little-endian ``CMSW`` weights file; tensors keep their insertion order."""
    chunks = [_WEIGHTS_MAGIC, struct.pack("<II", _WEIGHTS_VERSION, len(weights))]
    for name, arr in weights.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _WEIGHTS_MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:4]!r}, expected {_WEIGHTS_MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != _WEIGHTS_VERSION:
            raise ParseError(f"{path}: unsupported version {version}")
        pos, out = 12, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (rank,) = struct.unpack_from("<B", raw, pos)
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(raw, "<f4", size, pos).astype(DTYPE).reshape(dims)
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise ParseError(f"{path}: truncated or corrupt weights file at byte {pos}") from exc
    if pos != len(raw):
        raise ParseError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def assign_weights(graph: Graph, weights: dict[str, np.ndarray]) -> Graph:
    """Return a copy of ``graph`` carrying ``weights`` (names and shapes must match)."""
    if set(weights) != set(graph.weights):
        missing = sorted(set(graph.weights) - set(weights))[:3]
        extra = sorted(set(weights) - set(graph.weights))[:3]
        raise ConfigError(f"weights do not match graph (missing {missing}, unexpected {extra})")
    g = graph.copy()
    for name, arr in weights.items():
        if arr.shape != g.weights[name].shape:
            raise ConfigError(f"weight {name}: shape {arr.shape} != expected {g.weights[name].shape}")
        g.weights[name] = arr.astype(DTYPE)
    return g


def describe(graph: Graph, input_dims=None) -> list[dict]:
    """Layer table rows: node id, op, output h/w/c and parameter count."""
    shapes = infer_shapes(graph, input_dims)
    rows = []
    for n in graph.nodes:
        _, h, w, c = shapes[n.id]
        rows.append({
            "node": n.id,
            "op": n.op,
            "h": h, "w": w, "c": c,
            "params": int(sum(graph.weights[p].size for p in n.params.values())),
        })
    return rows
