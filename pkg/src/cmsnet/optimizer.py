"""Inference-graph rewrite passes: batch-norm folding, activation fusion, dead-node removal.

Each pass returns a new :class:`~cmsnet.graph.Graph` and leaves its input
untouched.  A pass that finds nothing to do returns a graph that is
structurally equal to its input, so :func:`optimize` reaches a fixpoint after
one application.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .graph import Graph, Node

log = logging.getLogger(__name__)


@dataclass
class PassReport:
    name: str
    nodes_before: int
    nodes_after: int
    weight_bytes_before: int
    weight_bytes_after: int

    @property
    def changed(self) -> bool:
        return (self.nodes_before, self.weight_bytes_before) != (self.nodes_after, self.weight_bytes_after)


def weight_bytes(graph: Graph) -> int:
    return int(sum(w.nbytes for w in graph.weights.values()))


def _rewire(graph: Graph, old: str, new: str) -> None:
    """Point every use of node ``old`` (inputs and graph outputs) at ``new``."""
    for n in graph.nodes:
        n.inputs = [new if i == old else i for i in n.inputs]
    graph.outputs = [new if o == old else o for o in graph.outputs]


def _drop_unused_weights(graph: Graph) -> None:
    used = {w for n in graph.nodes for w in n.params.values()}
    for name in [k for k in graph.weights if k not in used]:
        del graph.weights[name]


def fold_bn(graph: Graph) -> Graph:
    """Absorb each batch-norm node into the convolution that feeds it.

    ``w' = w * gamma / sqrt(var + eps)`` per output channel and
    ``b' = (b - mean) * gamma / sqrt(var + eps) + beta``.  A batch norm whose
    input is not a plain convolution used only by that batch norm is kept, and
    a warning is appended to ``graph.meta["warnings"]``.
    """
    g = graph.copy()
    consumers = g.consumers()
    outputs = set(g.outputs)
    removed = set()
    warnings = g.meta.setdefault("warnings", [])
    for bn in g.ops("batch_norm"):
        src = g.node(bn.inputs[0])
        if src.op != "conv2d" or src.attrs.get("activation") or len(consumers[src.id]) != 1 or src.id in outputs:
            msg = f"fold_bn: {bn.id} left in place (input {src.id} is not a foldable convolution)"
            warnings.append(msg)
            log.warning(msg)
            continue
        w = g.weights
        gamma, beta = w[bn.params["gamma"]].astype(np.float64), w[bn.params["beta"]].astype(np.float64)
        mean, var = w[bn.params["mean"]].astype(np.float64), w[bn.params["var"]].astype(np.float64)
        scale = gamma / np.sqrt(var + bn.attrs["epsilon"])
        kernel = w[src.params["weight"]]
        bias_name = src.params.get("bias", f"{src.id}/bias")
        bias = w[bias_name].astype(np.float64) if "bias" in src.params else np.zeros(kernel.shape[-1])
        w[src.params["weight"]] = (kernel.astype(np.float64) * scale).astype(kernel.dtype)
        w[bias_name] = ((bias - mean) * scale + beta).astype(kernel.dtype)
        src.params["bias"] = bias_name
        _rewire(g, bn.id, src.id)
        removed.add(bn.id)
    g.nodes = [n for n in g.nodes if n.id not in removed]
    _drop_unused_weights(g)
    if not warnings:
        del g.meta["warnings"]
    return g


def fuse_activation(graph: Graph) -> Graph:
    """Merge ``conv -> relu6`` into the convolution when the relu6 is the conv's only consumer."""
    g = graph.copy()
    consumers = g.consumers()
    removed = set()
    for act in g.ops("relu6"):
        src = g.node(act.inputs[0])
        if (src.op == "conv2d" and not src.attrs.get("activation") and consumers[src.id] == [act.id]
                and src.id not in g.outputs):
            src.attrs["activation"] = "relu6"
            _rewire(g, act.id, src.id)
            removed.add(act.id)
    g.nodes = [n for n in g.nodes if n.id not in removed]
    return g


def _is_identity_resize(node: Node, shapes: dict) -> bool:
    if node.op != "bilinear_resize":
        return False
    h, w = shapes[node.inputs[0]][:2]
    return (node.attrs["out_h"], node.attrs["out_w"]) == (h, w)


def eliminate_dead(graph: Graph) -> Graph:
    """Drop identity resizes and nodes that no output depends on, then unused weights."""
    from .graph import infer_shapes

    g = graph.copy()
    shapes = {k: v[1:] for k, v in infer_shapes(g).items()}
    for node in list(g.nodes):
        if _is_identity_resize(node, shapes):
            _rewire(g, node.id, node.inputs[0])
            g.nodes.remove(node)
    live = set(g.outputs)
    for node in reversed(g.nodes):
        if node.id in live:
            live.update(node.inputs)
    g.nodes = [n for n in g.nodes if n.id in live or n.op == "input"]
    _drop_unused_weights(g)
    return g


PASSES = (("fold_bn", fold_bn), ("fuse_activation", fuse_activation), ("eliminate_dead", eliminate_dead))


def optimize(graph: Graph) -> tuple[Graph, list[PassReport]]:
    """Run every pass in order; the report lists only passes that changed the graph."""
    reports = []
    g = graph
    for name, fn in PASSES:
        out = fn(g)
        rep = PassReport(name, len(g.nodes), len(out.nodes), weight_bytes(g), weight_bytes(out))
        if out.structure() != g.structure():
            reports.append(rep)
        g = out
    g.validate()
    return g, reports


def write_reports(reports: list[PassReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pass", "nodes_before", "nodes_after", "weight_bytes_before", "weight_bytes_after"])
        for r in reports:
            w.writerow([r.name, r.nodes_before, r.nodes_after, r.weight_bytes_before, r.weight_bytes_after])
