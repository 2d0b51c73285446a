"""Small independent oracles, runnable from the command line as a smoke check.

Every check compares library output with a deliberately naive reimplementation
(loops, brute force, closed forms).  The whole suite runs in a few seconds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import bench, dataset, impairments, metrics, optimizer
from . import tensor as T
from .graph import build_arrangement, infer_shapes


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def naive_conv(x, w, stride=1, dilation=1, groups=1):
    """Direct loop convolution with SAME padding (float64)."""
    n, h, wd, cin = x.shape
    kh, kw, cin_g, cout = w.shape
    oh, ph, _ = T.same_padding(h, kh, stride, dilation)
    ow, pw, _ = T.same_padding(wd, kw, stride, dilation)
    cout_g = cout // groups
    out = np.zeros((n, oh, ow, cout))
    for i in range(oh):
        for j in range(ow):
            for a in range(kh):
                for b in range(kw):
                    y, xx = i * stride + a * dilation - ph, j * stride + b * dilation - pw
                    if 0 <= y < h and 0 <= xx < wd:
                        for co in range(cout):
                            g = co // cout_g
                            out[:, i, j, co] += x[:, y, xx, g * cin_g:(g + 1) * cin_g] @ w[a, b, :, co]
    return out


def _check_conv(rng):
    worst = 0.0
    for stride, dilation, groups in [(1, 1, 1), (2, 1, 1), (1, 2, 1), (1, 1, 4), (2, 1, 2)]:
        x = rng.standard_normal((2, 7, 6, 4))
        w = rng.standard_normal((3, 3, 4 // groups, 4))
        worst = max(worst, np.abs(T.conv2d(x, w, None, stride, dilation, groups) - naive_conv(x, w, stride, dilation, groups)).max())
    return worst < 1e-10, f"max |conv - loop| = {worst:.2e}"


def _check_gradient(rng):
    x = rng.standard_normal((2, 5, 5, 3))
    w = rng.standard_normal((3, 3, 3, 2))
    g = rng.standard_normal((2, 5, 5, 2))
    _, gw, _ = T.conv2d_backward(g, x, w)
    eps, num = 1e-6, np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        d = np.zeros_like(w)
        d[idx] = eps
        num[idx] = (np.sum(T.conv2d(x, w + d) * g) - np.sum(T.conv2d(x, w - d) * g)) / (2 * eps)
    err = np.abs(gw - num).max() / np.abs(num).max()
    return err < 1e-4, f"relative error {err:.2e}"


def _brute_metrics(gt, pred, c):
    ious, accs, t = [], [], []
    for i in range(c):
        inter = sum(1 for a, b in zip(gt.flat, pred.flat) if a == i and b == i)
        union = sum(1 for a, b in zip(gt.flat, pred.flat) if a == i or b == i)
        ti = sum(1 for a in gt.flat if a == i)
        if union:
            ious.append((inter / union, ti))
        if ti:
            accs.append(inter / ti)
        t.append(ti)
    p_acc = sum(1 for a, b in zip(gt.flat, pred.flat) if a == b) / gt.size
    miou = sum(v for v, _ in ious) / len(ious)
    fw = sum(v * ti for v, ti in ious) / sum(t)
    return p_acc, sum(accs) / len(accs), miou, fw


def _check_metrics(rng):
    worst = 0.0
    for _ in range(20):
        gt, pred = rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))
        cm = metrics.confusion_matrix(gt, pred, 4)
        got = (cm.pixel_accuracy(), cm.mean_accuracy(), cm.miou(), cm.fwiou())
        worst = max(worst, max(abs(a - b) for a, b in zip(got, _brute_metrics(gt, pred, 4))))
    cm = metrics.confusion_matrix(np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]]), 2)
    example = abs(cm.miou() - 7 / 12) < 1e-15 and cm.pixel_accuracy() == 0.75
    return worst < 1e-12 and example, f"max deviation {worst:.1e}, 2x2 example {'ok' if example else 'wrong'}"


def _point_in_polygon(px, py, poly):
    inside = False
    for (x1, y1), (x2, y2) in zip(poly, np.roll(poly, -1, axis=0)):
        if (y1 > py) != (y2 > py) and px < x1 + (py - y1) * (x2 - x1) / (y2 - y1):
            inside = not inside
    return inside


def _check_rasterizer(rng):
    bad = 0
    for _ in range(5):
        pts = rng.uniform(-2, 14, (3, 2))
        ann = dataset.SceneAnnotation(12, 10, [dataset.Shape("car-0", "car", 0, pts)])
        mask = dataset.rasterize(ann)
        ref = np.array([[3 if _point_in_polygon(x + 0.5, y + 0.5, pts) else 0 for x in range(12)] for y in range(10)])
        bad += int((mask != ref).sum())
    return bad == 0, f"{bad} mismatched pixels"


def _check_shapes(rng):
    g = build_arrangement("CM3", 10, 483, 769)
    s = infer_shapes(g)[g.meta["features"]]
    return s[1:3] == (31, 49), f"CM3 features {s[1]}x{s[2]}"


def _check_fold(rng):
    g = build_arrangement("CM4", 3, 32, 48, seed=int(rng.integers(1000))).astype(np.float64)
    for k, v in g.weights.items():
        if k.endswith("/mean"):
            g.weights[k] = rng.normal(0, 0.3, v.shape)
        elif k.endswith("/var"):
            g.weights[k] = rng.uniform(0.5, 2.0, v.shape)
    o, _ = optimizer.optimize(g)
    from .runtime import forward

    x = rng.uniform(-1, 1, (2, 32, 48, 3))
    diff = np.abs(forward(g, x) - forward(o, x)).max()
    return diff < 1e-9 and not o.ops("batch_norm"), f"max diff {diff:.1e}, {len(g.nodes)}->{len(o.nodes)} nodes"


def _check_noise(rng):
    sd = impairments.noise_field((256, 256, 3), 0.25, int(rng.integers(1000))).std()
    return abs(sd / 63.75 - 1) < 0.02, f"noise sd {sd:.2f} (target 63.75)"


def _check_bench(rng):
    b = bench.boxplot_params(range(1, 10))
    d = bench.reaction_distance(30, 21)
    ok = (b.q1, b.median, b.q3) == (3.0, 5.0, 7.0) and abs(d - 0.397) < 0.005
    return ok, f"quartiles {b.q1:g}/{b.median:g}/{b.q3:g}, 30 km/h at 21 FPS -> {d:.3f} m"


CHECKS = [
    ("conv-vs-loop", _check_conv),
    ("conv-gradient", _check_gradient),
    ("metrics-brute-force", _check_metrics),
    ("rasterizer-pip", _check_rasterizer),
    ("shape-trace", _check_shapes),
    ("bn-fold-equivalence", _check_fold),
    ("noise-calibration", _check_noise),
    ("bench-oracles", _check_bench),
]


def run_selftest(seed: int = 42) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crashing oracle is a failed check, not a crashed suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results
