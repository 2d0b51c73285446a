"""Topological interpreter for :class:`~cmsnet.graph.Graph` (forward and backward)."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .graph import Graph, Node


def thread_count() -> int:
    """Parallel width from ``CMSNET_THREADS``; 0 selects deterministic single-threaded mode."""
    raw = os.environ.get("CMSNET_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CMSNET_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("CMSNET_THREADS must be >= 0")
    return n


def bn_params(graph: Graph, node: Node) -> T.BatchNormParams:
    w, p = graph.weights, node.params
    return T.BatchNormParams(w[p["gamma"]], w[p["beta"]], w[p["mean"]], w[p["var"]], node.attrs["epsilon"])


@dataclass
class Tape:
    """Activations and per-node caches recorded by a training-mode forward pass."""

    values: dict[str, np.ndarray] = field(default_factory=dict)
    caches: dict[str, dict] = field(default_factory=dict)


def _run_node(graph: Graph, node: Node, args: list[np.ndarray], training: bool, cache: dict | None):
    op, a, w = node.op, node.attrs, graph.weights
    if op == "conv2d":
        bias = w[node.params["bias"]] if "bias" in node.params else None
        y = T.conv2d(args[0], w[node.params["weight"]], bias, a["stride"], a["dilation"], a["groups"])
        if a.get("activation") == "relu6":
            if cache is not None:
                cache["pre_activation"] = y
            y = T.relu6(y)
        return y
    if op == "batch_norm":
        y, bn_cache = T.batch_norm_forward(args[0], bn_params(graph, node), training)
        if cache is not None:
            cache.update(bn_cache)
        return y
    if op == "relu6":
        return T.relu6(args[0])
    if op == "add":
        return T.add(args[0], args[1])
    if op == "concat":
        return T.concat_channels(*args)
    if op == "bilinear_resize":
        return T.bilinear_resize(args[0], a["out_h"], a["out_w"])
    if op == "avg_pool":
        return T.avg_pool(args[0], a["window_h"], a["window_w"], a["stride"])
    if op == "adaptive_avg_pool":
        return T.adaptive_avg_pool(args[0], a["out_h"], a["out_w"])
    if op == "global_avg_pool":
        return T.global_avg_pool(args[0])
    raise ConfigError(f"node {node.id}: cannot execute op {op!r}")


def execute(graph: Graph, x: np.ndarray, training: bool = False, record: bool = False):
    """Run ``graph`` on ``x``; returns ``(outputs, tape)`` (``tape`` is None unless recording)."""
    T.check_tensor(x)
    expected = tuple(graph.input_shape)
    if x.shape[1:] != expected:
        raise ConfigError(f"input has shape {x.shape[1:]}, graph expects {expected}")
    tape = Tape() if record else None
    consumers = graph.consumers()
    remaining = {k: len(v) for k, v in consumers.items()}
    keep = set(graph.outputs)
    values: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        if node.op == "input":
            values[node.id] = x
        else:
            cache = {} if record else None
            values[node.id] = _run_node(graph, node, [values[i] for i in node.inputs], training, cache)
            if record:
                tape.caches[node.id] = cache
            if not record:
                for i in node.inputs:
                    remaining[i] -= 1
                    if remaining[i] == 0 and i not in keep:
                        del values[i]
    outputs = [values[o] for o in graph.outputs]
    if record:
        tape.values = values
    return outputs, tape


def forward(graph: Graph, x: np.ndarray, threads: int | None = None) -> np.ndarray:
    """Inference-mode logits for the graph's first output.

    With ``threads > 1`` the batch is split across a thread pool; results
    agree with the single-threaded path to within float rounding.
    """
    threads = thread_count() if threads is None else threads
    if threads > 1 and x.shape[0] > 1:
        chunks = np.array_split(x, min(threads, x.shape[0]))
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(lambda c: execute(graph, c)[0][0], chunks))
        return np.concatenate(parts, axis=0)
    return execute(graph, x)[0][0]


def predict(graph: Graph, x: np.ndarray, threads: int | None = None) -> np.ndarray:
    """Per-pixel argmax of the logits; ties resolve to the lowest class id."""
    return argmax_mask(forward(graph, x, threads))


def argmax_mask(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    return np.argmax(logits, axis=-1).astype(np.int64)


def preprocess(image: np.ndarray) -> np.ndarray:
    """Map an ``HxWxC`` (or ``NxHxWxC``) 0..255 image to the network's [-1, 1] input."""
    x = np.asarray(image, dtype=T.DTYPE)
    if x.ndim == 3:
        x = x[None]
    return x / np.float32(127.5) - np.float32(1.0)


def backward(graph: Graph, tape: Tape, grad_outputs: list[np.ndarray]) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Reverse-mode pass; returns ``(weight grads, grad w.r.t. the input)``."""
    grads: dict[str, np.ndarray] = {}
    for o, g in zip(graph.outputs, grad_outputs):
        grads[o] = grads[o] + g if o in grads else g
    wgrads: dict[str, np.ndarray] = {}
    values, w = tape.values, graph.weights

    def accumulate(node_id, g):
        grads[node_id] = grads[node_id] + g if node_id in grads else g

    for node in reversed(graph.nodes):
        g = grads.pop(node.id, None)
        if node.op == "input":
            input_grad = g if g is not None else np.zeros_like(values[node.id])
            continue
        if g is None:
            continue
        ins = [values[i] for i in node.inputs]
        op, a, cache = node.op, node.attrs, tape.caches[node.id]
        if op == "conv2d":
            if a.get("activation") == "relu6":
                g = T.relu6_backward(g, cache["pre_activation"])
            gx, gw, gb = T.conv2d_backward(g, ins[0], w[node.params["weight"]], a["stride"], a["dilation"], a["groups"])
            wgrads[node.params["weight"]] = gw
            if "bias" in node.params:
                wgrads[node.params["bias"]] = gb
            accumulate(node.inputs[0], gx)
        elif op == "batch_norm":
            gx, gg, gb = T.batch_norm_backward(g, bn_params(graph, node), cache)
            wgrads[node.params["gamma"]] = gg
            wgrads[node.params["beta"]] = gb
            accumulate(node.inputs[0], gx)
        elif op == "relu6":
            accumulate(node.inputs[0], T.relu6_backward(g, ins[0]))
        elif op == "add":
            accumulate(node.inputs[0], g)
            accumulate(node.inputs[1], g)
        elif op == "concat":
            for i, part in zip(node.inputs, T.split_channels(g, [v.shape[3] for v in ins])):
                accumulate(i, part)
        elif op == "bilinear_resize":
            accumulate(node.inputs[0], T.bilinear_resize_backward(g, ins[0].shape))
        elif op == "avg_pool":
            accumulate(node.inputs[0], T.avg_pool_backward(g, ins[0].shape, a["window_h"], a["window_w"], a["stride"]))
        elif op == "adaptive_avg_pool":
            accumulate(node.inputs[0], T.adaptive_avg_pool_backward(g, ins[0].shape))
        elif op == "global_avg_pool":
            accumulate(node.inputs[0], T.global_avg_pool_backward(g, ins[0].shape))
        else:
            raise ConfigError(f"node {node.id}: no backward rule for {op!r}")
    return wgrads, input_grad


def updated_running_stats(graph: Graph, tape: Tape, momentum: float = T.BN_MOMENTUM) -> dict[str, np.ndarray]:
    """New running mean/var tensors for every batch-norm node seen in a training pass."""
    out = {}
    for node in graph.ops("batch_norm"):
        cache = tape.caches.get(node.id)
        if cache and cache.get("training"):
            p = T.update_running_stats(bn_params(graph, node), cache, momentum)
            out[node.params["mean"]] = p.running_mean
            out[node.params["var"]] = p.running_var
    return out
