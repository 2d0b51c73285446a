"""Dense NHWC tensor primitives with forward and backward rules.

Every operator takes and returns plain ``numpy`` arrays of rank 4 laid out
as ``(batch, height, width, channels)``.  Operators preserve the floating
dtype of their inputs: models run in float32, while the gradient checks
drive the very same code in float64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError

DTYPE = np.float32
BN_EPSILON = 1e-3
BN_MOMENTUM = 0.9

_DUMP_MAGIC = b"CMST"
_DUMP_VERSION = 1


def check_tensor(x: np.ndarray, name: str = "input") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        shape = getattr(x, "shape", None)
        raise ConfigError(f"{name} must be a rank-4 NHWC array, got shape {shape}")
    if 0 in x.shape[1:3]:
        raise ConfigError(f"{name} has zero-sized spatial dims {x.shape}")
    return x


def zeros(n: int, h: int, w: int, c: int, dtype=DTYPE) -> np.ndarray:
    return np.zeros((n, h, w, c), dtype=dtype)


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    out_channels: int
    stride: int = 1
    dilation: int = 1
    groups: int = 1

    def validate(self, in_channels: int) -> None:
        for attr in ("kernel_h", "kernel_w", "out_channels", "stride", "dilation", "groups"):
            if getattr(self, attr) < 1:
                raise ConfigError(f"ConvSpec.{attr} must be positive")
        if self.stride > 1 and self.dilation > 1:
            raise ConfigError("stride > 1 cannot be combined with dilation > 1")
        if in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"channels ({in_channels} in, {self.out_channels} out) not divisible "
                f"by groups={self.groups}"
            )

    def weight_shape(self, in_channels: int) -> tuple[int, int, int, int]:
        return (self.kernel_h, self.kernel_w, in_channels // self.groups, self.out_channels)


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPSILON

    def __post_init__(self):
        c = len(self.gamma)
        if not all(len(a) == c for a in (self.beta, self.running_mean, self.running_var)):
            raise ConfigError("batch-norm parameter arrays differ in length")
        if np.any(self.running_var < 0):
            raise ConfigError("running_var must be nonnegative")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")

    @classmethod
    def identity(cls, channels: int, dtype=DTYPE, epsilon: float = BN_EPSILON):
        return cls(
            np.ones(channels, dtype),
            np.zeros(channels, dtype),
            np.zeros(channels, dtype),
            np.ones(channels, dtype),
            epsilon,
        )

    @property
    def channels(self) -> int:
        return len(self.gamma)


def same_padding(size: int, kernel: int, stride: int = 1, dilation: int = 1) -> tuple[int, int, int]:
    """Return ``(out, pad_before, pad_after)`` under the SAME policy."""
    extent = kernel + (kernel - 1) * (dilation - 1)
    out = -(-size // stride)
    total = max((out - 1) * stride + extent - size, 0)
    return out, total // 2, total - total // 2


def _tap_slices(oh, ow, kh, kw, stride, dilation):
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            yield (
                slice(None),
                slice(r0, r0 + (oh - 1) * stride + 1, stride),
                slice(c0, c0 + (ow - 1) * stride + 1, stride),
            )


def _pad_input(x, kh, kw, stride, dilation):
    n, h, w, c = x.shape
    oh, pt, pb = same_padding(h, kh, stride, dilation)
    ow, pl, pr = same_padding(w, kw, stride, dilation)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    return x, oh, ow, (pt, pl)


def _check_conv(x, weights, stride, dilation, groups):
    check_tensor(x)
    if weights.ndim != 4:
        raise ConfigError(f"conv weights must be (kh, kw, cin/groups, cout), got {weights.shape}")
    kh, kw, cin_g, cout = weights.shape
    spec = ConvSpec(kh, kw, cout, stride, dilation, groups)
    spec.validate(x.shape[3])
    if x.shape[3] // groups != cin_g:
        raise ConfigError(
            f"channel mismatch: input has {x.shape[3]} channels, weights expect "
            f"{cin_g * groups} (groups={groups})"
        )
    return kh, kw, cin_g, cout


def conv2d(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    dilation: int = 1,
    groups: int = 1,
) -> np.ndarray:
    """SAME-padded grouped, strided, dilated 2-D convolution.

    ``weights`` has shape ``(kh, kw, cin // groups, cout)``.  The output has
    spatial size ``ceil(h / stride) x ceil(w / stride)``.
    """
    kh, kw, cin_g, cout = _check_conv(x, weights, stride, dilation, groups)
    n, h, w, cin = x.shape
    dtype = np.result_type(x, weights)

    if kh == kw == 1 and stride == 1:
        out = _grouped_matmul(x.reshape(-1, cin), weights.reshape(cin_g, cout), groups)
        out = out.reshape(n, h, w, cout)
    else:
        xp, oh, ow, _ = _pad_input(x, kh, kw, stride, dilation)
        taps = list(_tap_slices(oh, ow, kh, kw, stride, dilation))
        if groups == 1:
            cols = np.concatenate([xp[t] for t in taps], axis=-1)
            out = (cols.reshape(-1, kh * kw * cin) @ weights.reshape(-1, cout)).reshape(n, oh, ow, cout)
        elif groups == cin:
            mult = cout // cin
            wk = weights.reshape(kh * kw, cout)
            out = np.zeros((n, oh, ow, cout), dtype=dtype)
            for k, t in enumerate(taps):
                src = xp[t] if mult == 1 else np.repeat(xp[t], mult, axis=-1)
                out += src * wk[k]
        else:
            cout_g = cout // groups
            parts = []
            for g in range(groups):
                xs = xp[..., g * cin_g:(g + 1) * cin_g]
                cols = np.concatenate([xs[t] for t in taps], axis=-1)
                wg = weights[..., g * cout_g:(g + 1) * cout_g].reshape(-1, cout_g)
                parts.append(cols.reshape(-1, kh * kw * cin_g) @ wg)
            out = np.concatenate(parts, axis=-1).reshape(n, oh, ow, cout)
    if bias is not None:
        out = out + bias
    return out.astype(dtype, copy=False)


def _grouped_matmul(x2, w2, groups):
    if groups == 1:
        return x2 @ w2
    cin_g, cout = w2.shape
    cout_g = cout // groups
    return np.concatenate(
        [x2[:, g * cin_g:(g + 1) * cin_g] @ w2[:, g * cout_g:(g + 1) * cout_g] for g in range(groups)],
        axis=-1,
    )


def conv2d_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    weights: np.ndarray,
    stride: int = 1,
    dilation: int = 1,
    groups: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d` w.r.t. input, weights and bias."""
    kh, kw, cin_g, cout = _check_conv(x, weights, stride, dilation, groups)
    n, h, w, cin = x.shape
    oh, _, _ = same_padding(h, kh, stride, dilation)
    ow, _, _ = same_padding(w, kw, stride, dilation)
    if grad_out.shape != (n, oh, ow, cout):
        raise RuntimeError(f"grad_out shape {grad_out.shape} does not match forward output {(n, oh, ow, cout)}")

    grad_bias = grad_out.sum(axis=(0, 1, 2))
    if kh == kw == 1 and stride == 1:
        g2 = grad_out.reshape(-1, cout)
        x2 = x.reshape(-1, cin)
        if groups == 1:
            gw = x2.T @ g2
            gx = g2 @ weights.reshape(cin, cout).T
        else:
            cout_g = cout // groups
            w2 = weights.reshape(cin_g, cout)
            gw = np.concatenate(
                [x2[:, g * cin_g:(g + 1) * cin_g].T @ g2[:, g * cout_g:(g + 1) * cout_g] for g in range(groups)],
                axis=-1,
            )
            gx = np.concatenate(
                [g2[:, g * cout_g:(g + 1) * cout_g] @ w2[:, g * cout_g:(g + 1) * cout_g].T for g in range(groups)],
                axis=-1,
            )
        return gx.reshape(x.shape), gw.reshape(weights.shape), grad_bias

    xp, _, _, (pt, pl) = _pad_input(x, kh, kw, stride, dilation)
    taps = list(_tap_slices(oh, ow, kh, kw, stride, dilation))
    gxp = np.zeros_like(xp, dtype=np.result_type(xp, grad_out))
    if groups == 1:
        cols = np.concatenate([xp[t] for t in taps], axis=-1).reshape(-1, kh * kw * cin)
        g2 = grad_out.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weights.shape)
        gcols = (g2 @ weights.reshape(-1, cout).T).reshape(n, oh, ow, kh * kw, cin)
        for k, t in enumerate(taps):
            gxp[t] += gcols[..., k, :]
    elif groups == cin:
        mult = cout // cin
        wk = weights.reshape(kh * kw, cout)
        gw = np.zeros((kh * kw, cout), dtype=gxp.dtype)
        for k, t in enumerate(taps):
            src = xp[t] if mult == 1 else np.repeat(xp[t], mult, axis=-1)
            gw[k] = (src * grad_out).sum(axis=(0, 1, 2))
            contrib = grad_out * wk[k]
            if mult > 1:
                contrib = contrib.reshape(n, oh, ow, cin, mult).sum(axis=-1)
            gxp[t] += contrib
        gw = gw.reshape(weights.shape)
    else:
        cout_g = cout // groups
        gws = []
        for g in range(groups):
            xs = xp[..., g * cin_g:(g + 1) * cin_g]
            cols = np.concatenate([xs[t] for t in taps], axis=-1).reshape(-1, kh * kw * cin_g)
            g2 = grad_out[..., g * cout_g:(g + 1) * cout_g].reshape(-1, cout_g)
            wg = weights[..., g * cout_g:(g + 1) * cout_g].reshape(-1, cout_g)
            gws.append((cols.T @ g2).reshape(kh, kw, cin_g, cout_g))
            gcols = (g2 @ wg.T).reshape(n, oh, ow, kh * kw, cin_g)
            gsub = gxp[..., g * cin_g:(g + 1) * cin_g]
            for k, t in enumerate(taps):
                gsub[t] += gcols[..., k, :]
        gw = np.concatenate(gws, axis=-1)
    gx = gxp[:, pt:pt + h, pl:pl + w, :]
    return np.ascontiguousarray(gx), gw, grad_bias


def dilate_kernel(weights: np.ndarray, rate: int) -> np.ndarray:
    """Insert ``rate - 1`` zero rows/columns between kernel taps."""
    kh, kw, ci, co = weights.shape
    out = np.zeros((kh + (kh - 1) * (rate - 1), kw + (kw - 1) * (rate - 1), ci, co), weights.dtype)
    out[::rate, ::rate] = weights
    return out


def batch_norm_forward(x: np.ndarray, params: BatchNormParams, training: bool = False):
    """Return ``(out, cache)``; ``cache`` holds what the backward rule needs.

    In training mode ``cache["batch_mean"]`` and ``cache["batch_var"]`` carry
    the (biased) batch statistics used for normalization.
    """
    check_tensor(x)
    if params.channels != x.shape[3]:
        raise ConfigError(f"batch-norm has {params.channels} channels, input has {x.shape[3]}")
    if training:
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
    else:
        mean, var = params.running_mean, params.running_var
    inv_std = (1.0 / np.sqrt(var + params.epsilon)).astype(x.dtype)
    xhat = (x - mean) * inv_std
    out = xhat * params.gamma + params.beta
    cache = {"xhat": xhat, "inv_std": inv_std, "training": training}
    if training:
        cache["batch_mean"], cache["batch_var"] = mean, var
    return out.astype(x.dtype, copy=False), cache


def batch_norm(x: np.ndarray, params: BatchNormParams, training: bool = False) -> np.ndarray:
    return batch_norm_forward(x, params, training)[0]


def batch_norm_backward(grad_out: np.ndarray, params: BatchNormParams, cache: dict):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    grad_beta = grad_out.sum(axis=(0, 1, 2))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 1, 2))
    if cache["training"]:
        m = grad_out.shape[0] * grad_out.shape[1] * grad_out.shape[2]
        gx = (params.gamma * inv_std) * (grad_out - grad_beta / m - xhat * (grad_gamma / m))
    else:
        gx = grad_out * (params.gamma * inv_std)
    return gx.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


def update_running_stats(params: BatchNormParams, cache: dict, momentum: float = BN_MOMENTUM) -> BatchNormParams:
    mean = momentum * params.running_mean + (1 - momentum) * cache["batch_mean"]
    var = momentum * params.running_var + (1 - momentum) * cache["batch_var"]
    dt = params.running_mean.dtype
    return BatchNormParams(params.gamma, params.beta, mean.astype(dt), var.astype(dt), params.epsilon)


def relu6(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0, 6).astype(x.dtype, copy=False)


def relu6_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * ((x > 0) & (x < 6))


def _pool_counts(h, w, window_h, window_w, stride, dtype):
    ones = np.ones((1, h, w, 1), dtype)
    op, oh, ow, _ = _pad_input(ones, window_h, window_w, stride, 1)
    cnt = np.zeros((1, oh, ow, 1), dtype)
    for t in _tap_slices(oh, ow, window_h, window_w, stride, 1):
        cnt += op[t]
    return cnt


def avg_pool(x: np.ndarray, window_h: int, window_w: int, stride: int) -> np.ndarray:
    """SAME-padded average pooling; ragged windows average valid cells only."""
    check_tensor(x)
    if window_h < 1 or window_w < 1 or stride < 1:
        raise ConfigError("pool window and stride must be positive")
    if window_h > x.shape[1] or window_w > x.shape[2]:
        raise ConfigError(f"pool window {window_h}x{window_w} exceeds input {x.shape[1]}x{x.shape[2]}")
    xp, oh, ow, _ = _pad_input(x, window_h, window_w, stride, 1)
    acc = np.zeros((x.shape[0], oh, ow, x.shape[3]), x.dtype)
    for t in _tap_slices(oh, ow, window_h, window_w, stride, 1):
        acc += xp[t]
    return acc / _pool_counts(x.shape[1], x.shape[2], window_h, window_w, stride, x.dtype)


def avg_pool_backward(grad_out, input_shape, window_h, window_w, stride):
    n, h, w, c = input_shape
    g = grad_out / _pool_counts(h, w, window_h, window_w, stride, grad_out.dtype)
    _, pt, pb = same_padding(h, window_h, stride)
    _, pl, pr = same_padding(w, window_w, stride)
    gxp = np.zeros((n, h + pt + pb, w + pl + pr, c), grad_out.dtype)
    for t in _tap_slices(g.shape[1], g.shape[2], window_h, window_w, stride, 1):
        gxp[t] += g
    return gxp[:, pt:pt + h, pl:pl + w, :]


def adaptive_bins(size: int, out: int) -> list[tuple[int, int]]:
    """Bin edges ``[floor(i*size/out), ceil((i+1)*size/out))`` for each output cell."""
    return [((i * size) // out, -(-((i + 1) * size) // out)) for i in range(out)]


def adaptive_avg_pool(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Average pooling onto a fixed ``out_h x out_w`` grid."""
    check_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ConfigError("adaptive pool target must be at least 1x1")
    n, h, w, c = x.shape
    out = np.empty((n, out_h, out_w, c), x.dtype)
    for i, (y0, y1) in enumerate(adaptive_bins(h, out_h)):
        for j, (x0, x1) in enumerate(adaptive_bins(w, out_w)):
            out[:, i, j, :] = x[:, y0:y1, x0:x1, :].sum(axis=(1, 2)) / ((y1 - y0) * (x1 - x0))
    return out


def adaptive_avg_pool_backward(grad_out, input_shape):
    n, h, w, c = input_shape
    _, out_h, out_w, _ = grad_out.shape
    gx = np.zeros(input_shape, grad_out.dtype)
    for i, (y0, y1) in enumerate(adaptive_bins(h, out_h)):
        for j, (x0, x1) in enumerate(adaptive_bins(w, out_w)):
            gx[:, y0:y1, x0:x1, :] += (grad_out[:, i, j, :] / ((y1 - y0) * (x1 - x0)))[:, None, None, :]
    return gx


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    check_tensor(x)
    return x.sum(axis=(1, 2), keepdims=True) / (x.shape[1] * x.shape[2])


def global_avg_pool_backward(grad_out, input_shape):
    n, h, w, c = input_shape
    return np.broadcast_to(grad_out / (h * w), input_shape).copy()


def _interp_matrix(in_size: int, out_size: int, dtype) -> np.ndarray:
    """Row-stochastic half-pixel-center interpolation matrix, edges clamped."""
    m = np.zeros((out_size, in_size), np.float64)
    scale = in_size / out_size
    for i in range(out_size):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), in_size - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m.astype(dtype)


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping."""
    check_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize target {out_h}x{out_w} must be at least 1x1")
    n, h, w, c = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()
    ry = _interp_matrix(h, out_h, x.dtype)
    rx = _interp_matrix(w, out_w, x.dtype)
    tmp = np.einsum("ph,nhwc->npwc", ry, x, optimize=True)
    return np.einsum("qw,npwc->npqc", rx, tmp, optimize=True)


def bilinear_resize_backward(grad_out: np.ndarray, input_shape) -> np.ndarray:
    n, h, w, c = input_shape
    out_h, out_w = grad_out.shape[1:3]
    if (h, w) == (out_h, out_w):
        return grad_out.copy()
    ry = _interp_matrix(h, out_h, grad_out.dtype)
    rx = _interp_matrix(w, out_w, grad_out.dtype)
    tmp = np.einsum("qw,npqc->npwc", rx, grad_out, optimize=True)
    return np.einsum("ph,npwc->nhwc", ry, tmp, optimize=True)


def concat_channels(*xs: np.ndarray) -> np.ndarray:
    if not xs:
        raise ConfigError("concat needs at least one input")
    base = xs[0].shape[:3]
    for x in xs:
        check_tensor(x)
        if x.shape[:3] != base:
            raise ConfigError(f"concat inputs disagree on n,h,w: {base} vs {x.shape[:3]}")
    return np.concatenate(xs, axis=-1)


def split_channels(x: np.ndarray, sizes) -> list[np.ndarray]:
    """Inverse of :func:`concat_channels`; also its backward rule."""
    if sum(sizes) != x.shape[3]:
        raise ConfigError(f"split sizes {list(sizes)} do not sum to {x.shape[3]} channels")
    return np.split(x, np.cumsum(sizes)[:-1], axis=-1)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ConfigError(f"add operands differ in shape: {a.shape} vs {b.shape}")
    return a + b


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, target: np.ndarray, ignore_id: int | None = None):
    """Mean pixel-wise cross entropy over non-ignored pixels.

    Returns ``(loss, grad_logits)``.  When every pixel is ignored the loss is
    defined as 0 with a zero gradient.
    """
    check_tensor(logits, "logits")
    if target.shape != logits.shape[:3]:
        raise ConfigError(f"target shape {target.shape} does not match logits {logits.shape[:3]}")
    num_classes = logits.shape[3]
    valid = np.ones(target.shape, bool) if ignore_id is None else target != ignore_id
    tgt = np.where(valid, target, 0).astype(np.int64)
    if np.any((tgt < 0) | (tgt >= num_classes)):
        raise DataError(f"target contains class ids outside [0, {num_classes})")
    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros_like(logits)

    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    loss = float(-(picked * valid).sum() / count)

    grad = np.exp(logp)
    np.put_along_axis(grad, tgt[..., None], np.take_along_axis(grad, tgt[..., None], axis=-1) - 1, axis=-1)
    grad *= (valid / count)[..., None]
    return loss, grad.astype(logits.dtype, copy=False)


def write_tensor(path, x: np.ndarray) -> None:
    """Write the little-endian ``CMST`` tensor dump."""
    check_tensor(x)
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(struct.pack("<5I", _DUMP_VERSION, *x.shape))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _DUMP_MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:4]!r}, expected {_DUMP_MAGIC!r}")
    if len(raw) < 24:
        raise ParseError(f"{path}: truncated header")
    version, *dims = struct.unpack_from("<5I", raw, 4)
    if version != _DUMP_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    count = int(np.prod(dims))
    if len(raw) != 24 + 4 * count:
        raise ParseError(f"{path}: payload has {len(raw) - 24} bytes, expected {4 * count}")
    return np.frombuffer(raw, dtype="<f4", offset=24).astype(DTYPE).reshape(dims)
