"""Shared oracles for the test-suite: finite differences and naive reference ops."""

import numpy as np

from cmsnet import tensor as T

FD_EPS = 1e-6


def numeric_grad(f, x, eps=FD_EPS):
    """Central-difference gradient of scalar ``f`` w.r.t. every entry of ``x`` (float64)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        up = f()
        x[idx] = old - eps
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def rel_error(analytic, numeric):
    return float(np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1e-12))


def _away_from_kinks(x, kinks=(0.0, 6.0), margin=1e-2):
    for k in kinks:
        close = np.abs(x - k) < margin
        x[close] = k + margin * np.sign(x[close] - k + 1e-12) * 3
    return x


def _conv_case(stride=1, dilation=1, groups=1, cout=4, kernel=3, bias=True):
    def case(rng):
        x = rng.standard_normal((2, 6, 6, 4))
        w = rng.standard_normal((kernel, kernel, 4 // groups, cout))
        b = rng.standard_normal(cout) if bias else None
        g = rng.standard_normal(T.conv2d(x, w, b, stride, dilation, groups).shape)

        def loss():
            return np.sum(T.conv2d(x, w, b, stride, dilation, groups) * g)

        gx, gw, gb = T.conv2d_backward(g, x, w, stride, dilation, groups)
        pairs = [(gx, numeric_grad(loss, x)), (gw, numeric_grad(loss, w))]
        if bias:
            pairs.append((gb, numeric_grad(loss, b)))
        return pairs
    return case


def _bn_case(training):
    def case(rng):
        x = rng.standard_normal((2, 4, 5, 3)) * 2 + 1
        p = T.BatchNormParams(rng.uniform(0.5, 1.5, 3), rng.standard_normal(3), rng.standard_normal(3),
                              rng.uniform(0.5, 2, 3))
        g = rng.standard_normal(x.shape)

        def loss():
            return np.sum(T.batch_norm(x, p, training) * g)

        _, cache = T.batch_norm_forward(x, p, training)
        gx, gg, gb = T.batch_norm_backward(g, p, cache)
        return [(gx, numeric_grad(loss, x)), (gg, numeric_grad(loss, p.gamma)), (gb, numeric_grad(loss, p.beta))]
    return case


def _relu6_case(rng):
    x = _away_from_kinks(rng.uniform(-3, 9, (2, 5, 5, 3)))
    g = rng.standard_normal(x.shape)
    return [(T.relu6_backward(g, x), numeric_grad(lambda: np.sum(T.relu6(x) * g), x))]


def _avg_pool_case(wh, ww, stride):
    def case(rng):
        x = rng.standard_normal((2, 6, 5, 2))
        g = rng.standard_normal(T.avg_pool(x, wh, ww, stride).shape)
        return [(T.avg_pool_backward(g, x.shape, wh, ww, stride),
                 numeric_grad(lambda: np.sum(T.avg_pool(x, wh, ww, stride) * g), x))]
    return case


def _adaptive_case(oh, ow):
    def case(rng):
        x = rng.standard_normal((2, 6, 5, 2))
        g = rng.standard_normal((2, oh, ow, 2))
        return [(T.adaptive_avg_pool_backward(g, x.shape),
                 numeric_grad(lambda: np.sum(T.adaptive_avg_pool(x, oh, ow) * g), x))]
    return case


def _global_pool_case(rng):
    x = rng.standard_normal((2, 6, 6, 3))
    g = rng.standard_normal((2, 1, 1, 3))
    return [(T.global_avg_pool_backward(g, x.shape), numeric_grad(lambda: np.sum(T.global_avg_pool(x) * g), x))]


def _resize_case(oh, ow):
    def case(rng):
        x = rng.standard_normal((2, 4, 5, 2))
        g = rng.standard_normal((2, oh, ow, 2))
        return [(T.bilinear_resize_backward(g, x.shape),
                 numeric_grad(lambda: np.sum(T.bilinear_resize(x, oh, ow) * g), x))]
    return case


def _concat_case(rng):
    a, b = rng.standard_normal((2, 3, 3, 2)), rng.standard_normal((2, 3, 3, 3))
    g = rng.standard_normal((2, 3, 3, 5))
    ga, gb = T.split_channels(g, [2, 3])

    def loss():
        return np.sum(T.concat_channels(a, b) * g)
    return [(ga, numeric_grad(loss, a)), (gb, numeric_grad(loss, b))]


def _add_case(rng):
    a, b = rng.standard_normal((2, 3, 3, 2)), rng.standard_normal((2, 3, 3, 2))
    g = rng.standard_normal(a.shape)

    def loss():
        return np.sum(T.add(a, b) * g)
    return [(g, numeric_grad(loss, a)), (g, numeric_grad(loss, b))]


def _xent_case(ignore):
    def case(rng):
        logits = rng.standard_normal((2, 4, 4, 3)) * 2
        target = rng.integers(0, 3, (2, 4, 4))
        if ignore:
            target[rng.random(target.shape) < 0.3] = 255
        ignore_id = 255 if ignore else None
        _, grad = T.softmax_cross_entropy(logits, target, ignore_id)
        return [(grad, numeric_grad(lambda: T.softmax_cross_entropy(logits, target, ignore_id)[0], logits))]
    return case


GRADIENT_CASES = {
    "conv2d": _conv_case(),
    "conv2d_stride2": _conv_case(stride=2),
    "conv2d_dilated": _conv_case(dilation=2),
    "conv2d_depthwise": _conv_case(groups=4, bias=False),
    "conv2d_grouped": _conv_case(groups=2),
    "conv2d_pointwise": _conv_case(kernel=1, cout=3),
    "batch_norm_train": _bn_case(True),
    "batch_norm_infer": _bn_case(False),
    "relu6": _relu6_case,
    "avg_pool": _avg_pool_case(3, 2, 2),
    "avg_pool_stride1": _avg_pool_case(3, 3, 1),
    "adaptive_avg_pool": _adaptive_case(4, 3),
    "global_avg_pool": _global_pool_case,
    "bilinear_up": _resize_case(7, 9),
    "bilinear_down": _resize_case(3, 2),
    "concat": _concat_case,
    "add": _add_case,
    "softmax_xent": _xent_case(False),
    "softmax_xent_ignore": _xent_case(True),
}


def worst_gradient_error(case, seeds=range(10)):
    worst = 0.0
    for seed in seeds:
        for analytic, numeric in case(np.random.default_rng(seed)):
            worst = max(worst, rel_error(analytic, numeric))
    return worst


def naive_conv(x, w, b=None, stride=1, dilation=1, groups=1):
    from cmsnet.selftest import naive_conv as loop_conv

    out = loop_conv(x, w, stride, dilation, groups)
    return out if b is None else out + b


def brute_metrics(gt, pred, num_classes):
    """Pixel loops for (P_acc, mCP_acc, mIoU, FWIoU) with absent classes skipped."""
    n = len(gt.flat)
    ious, accs, freq = [], [], []
    for i in range(num_classes):
        inter = union = t = 0
        for a, b in zip(gt.flat, pred.flat):
            inter += a == i and b == i
            union += a == i or b == i
            t += a == i
        if union:
            ious.append(inter / union)
            freq.append(t)
        if t:
            accs.append(inter / t)
    p_acc = sum(int(a == b) for a, b in zip(gt.flat, pred.flat)) / n
    return p_acc, sum(accs) / len(accs), sum(ious) / len(ious), sum(f * v for f, v in zip(freq, ious)) / n


def perfect_vs_chance(n=10, size=(16, 16), num_classes=2, seed=0):
    """Clear and impaired sample sets plus a predictor that is exact on clear
    images and uniformly random on impaired ones.

    Each image carries its set and index in pixel (0, 0) so the predictor can
    find the matching ground truth.
    """
    rng = np.random.default_rng(seed)
    h, w = size
    good, bad, truth = [], [], {}
    for k in range(n):
        for flag, dest in ((0, good), (1, bad)):
            img = rng.integers(0, 256, (h, w, 3)).astype(np.uint8)
            img[0, 0] = (flag, k, 0)
            mask = rng.integers(0, num_classes, (h, w))
            truth[(flag, k)] = mask
            dest.append((f"{'gb'[flag]}{k:03d}", img, mask))

    def predict(images):
        out = []
        for img in images:
            flag, k = int(img[0, 0, 0]), int(img[0, 0, 1])
            gt = truth[(flag, k)]
            out.append(gt if flag == 0 else np.random.default_rng(1000 + k).integers(0, num_classes, gt.shape))
        return out

    return good, bad, predict


def chord_deviation(curve):
    """Largest distance (mIoU points) between a curve and the straight line through its endpoints."""
    (f0, m0), (f1, m1) = curve[0], curve[-1]
    return max(abs(m - (m0 + (m1 - m0) * (f - f0) / (f1 - f0))) for f, m in curve) * 100
