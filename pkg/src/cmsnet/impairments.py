"""Synthetic adverse conditions (noise, fog), augmentation, and the condition sweep.

The sweep replaces a growing fraction of a clear-condition evaluation set with
impaired samples and tracks mIoU, or alternatively (``mode="severity"``)
applies an impairment of increasing strength to the whole clear set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import runtime as R
from . import tensor as T
from .errors import ConfigError
from .graph import Graph
from .metrics import ConfusionMatrix, confusion_matrix

FOG_LIGHT = 255.0
FOG_FIELD_RANGE = (0.6, 1.0)


def _check_level(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{name} must be in [0, 1], got {value}")
    return value


def _as_output(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    out = np.clip(values, 0, 255)
    if np.issubdtype(like.dtype, np.integer):
        out = np.rint(out)
    return out.astype(like.dtype)


def noise_field(shape, severity: float, seed: int) -> np.ndarray:
    """Zero-mean Gaussian noise with standard deviation ``severity * 255``."""
    severity = _check_level(severity, "severity")
    return np.random.default_rng(seed).normal(0.0, severity * 255.0, shape)


def add_gaussian_noise(image: np.ndarray, severity: float, seed: int) -> np.ndarray:
    """Additive per-channel Gaussian noise, clamped to 0..255."""
    image = np.asarray(image)
    if _check_level(severity, "severity") == 0.0:
        return image.copy()
    return _as_output(image + noise_field(image.shape, severity, seed), image)


def value_noise(h: int, w: int, seed: int, octaves: int = 4) -> np.ndarray:
    """Multi-octave value noise in [0, 1]: coarse random grids, bilinearly upsampled and summed."""
    rng = np.random.default_rng(seed)
    total = np.zeros((h, w))
    amp_sum = 0.0
    for k in range(octaves):
        cells = 2 ** (k + 1) + 1
        grid = rng.random((1, cells, cells, 1))
        total += 0.5 ** k * T.bilinear_resize(grid, h, w)[0, :, :, 0]
        amp_sum += 0.5 ** k
    total /= amp_sum
    lo, hi = total.min(), total.max()
    return (total - lo) / (hi - lo) if hi > lo else np.zeros_like(total)


def fog_field(h: int, w: int, seed: int) -> np.ndarray:
    """Fog thickness ``m`` in [0.6, 1.0], thicker toward the top of the frame (farther away)."""
    depth = np.linspace(1.0, 0.0, h)[:, None]
    mix = np.clip(0.65 * depth + 0.35 * value_noise(h, w, seed), 0.0, 1.0)
    lo, hi = FOG_FIELD_RANGE
    return lo + (hi - lo) * mix


def apply_fog(image: np.ndarray, density: float, seed: int, field: np.ndarray | None = None) -> np.ndarray:
    """Blend toward white: ``(1 - a) * img + a * 255`` with ``a = density * m(x, y)``.

    ``field`` overrides the generated thickness map ``m`` (useful for tests).
    """
    image = np.asarray(image)
    density = _check_level(density, "density")
    if density == 0.0:
        return image.copy()
    h, w = image.shape[:2]
    m = fog_field(h, w, seed) if field is None else np.broadcast_to(np.asarray(field, float), (h, w))
    a = (density * m)[..., None] if image.ndim == 3 else density * m
    return _as_output((1.0 - a) * image + a * FOG_LIGHT, image)


@dataclass
class AugmentConfig:
    p_rotate: float = 0.5
    max_angle: float = 10.0
    p_crop: float = 0.5
    crop_scale: tuple[float, float] = (0.8, 1.0)
    p_noise: float = 0.0
    max_noise: float = 0.1
    p_fog: float = 0.0
    max_fog: float = 0.5


def rotate_pair(image: np.ndarray, mask: np.ndarray, angle: float):
    """Rotate about the centre; bilinear for the image, nearest-neighbour for the mask."""
    img = ndimage.rotate(image.astype(np.float64), angle, axes=(1, 0), reshape=False, order=1, mode="nearest")
    msk = ndimage.rotate(mask, angle, axes=(1, 0), reshape=False, order=0, mode="nearest")
    return _as_output(img, image), msk.astype(mask.dtype)


def crop_pair(image: np.ndarray, mask: np.ndarray, top: int, left: int, ch: int, cw: int):
    """Cut a window and scale it back to the original size."""
    h, w = mask.shape
    win = image[top:top + ch, left:left + cw].astype(np.float64)
    img = T.bilinear_resize(win.reshape(1, ch, cw, -1), h, w)[0].reshape((h, w) + image.shape[2:])
    rows = top + np.minimum(((np.arange(h) + 0.5) * ch / h).astype(int), ch - 1)
    cols = left + np.minimum(((np.arange(w) + 0.5) * cw / w).astype(int), cw - 1)
    return _as_output(img, image), mask[np.ix_(rows, cols)]


def augment(image: np.ndarray, mask: np.ndarray, seed: int, config: AugmentConfig | None = None):
    """Seeded rotation / crop / noise / fog pipeline; geometry is shared by image and mask."""
    cfg = config or AugmentConfig()
    rng = np.random.default_rng(seed)
    image, mask = np.asarray(image), np.asarray(mask)
    if image.shape[:2] != mask.shape:
        raise ConfigError(f"image {image.shape[:2]} and mask {mask.shape} sizes differ")
    if rng.random() < cfg.p_rotate:
        image, mask = rotate_pair(image, mask, rng.uniform(-cfg.max_angle, cfg.max_angle))
    if rng.random() < cfg.p_crop:
        h, w = mask.shape
        s = rng.uniform(*cfg.crop_scale)
        ch, cw = max(1, round(h * s)), max(1, round(w * s))
        top, left = int(rng.integers(h - ch + 1)), int(rng.integers(w - cw + 1))
        image, mask = crop_pair(image, mask, top, left, ch, cw)
    if rng.random() < cfg.p_noise:
        image = add_gaussian_noise(image, rng.uniform(0, cfg.max_noise), int(rng.integers(2**31)))
    if rng.random() < cfg.p_fog:
        image = apply_fog(image, rng.uniform(0, cfg.max_fog), int(rng.integers(2**31)))
    return image, mask


# --- condition sweep -------------------------------------------------------

Sample = tuple  # (sample_id, image, mask)


def default_fractions() -> tuple[float, ...]:
    return tuple(round(0.1 * k, 10) for k in range(11))


@dataclass
class SweepSpec:
    """What to sweep.

    ``mode="mix"`` draws the first ``ceil((1 - f) S)`` clear samples and the
    first ``floor(f S)`` impaired samples (ids sorted) at each fraction ``f``.
    ``mode="severity"`` applies ``impairment(image, level, seed)`` to the whole
    clear set at each level in ``fractions``.
    """

    good: Sequence[Sample]
    bad: Sequence[Sample] | None = None
    fractions: Sequence[float] = field(default_factory=default_fractions)
    num_classes: int = 2
    mode: str = "mix"
    impairment: Callable | None = None
    size: int | None = None
    per_image: bool = False
    ignore_id: int | None = None
    seed: int = 42

    def validate(self) -> None:
        if not self.good:
            raise ConfigError("sweep needs a non-empty clear-condition set")
        f = [float(v) for v in self.fractions]
        if not f or any(b < a for a, b in zip(f, f[1:])) or min(f) < 0 or max(f) > 1:
            raise ConfigError("fractions must be sorted values in [0, 1]")
        if self.mode == "mix":
            if not self.bad:
                raise ConfigError("mix sweep needs a non-empty impaired set")
            if f[0] != 0.0 or f[-1] != 1.0:
                raise ConfigError("mix fractions must include both endpoints 0 and 1")
            if self.size is not None and not 0 < self.size <= min(len(self.good), len(self.bad)):
                raise ConfigError("size must be positive and no larger than either set")
        elif self.mode == "severity":
            if self.impairment is None:
                raise ConfigError("severity sweep needs an impairment function")
        else:
            raise ConfigError(f"unknown sweep mode {self.mode!r}")


def _predictor(model):
    if isinstance(model, Graph):
        return lambda images: R.predict(model, np.concatenate([R.preprocess(i) for i in images]))
    if callable(model):
        return model
    raise ConfigError("model must be a Graph or a callable mapping images to masks")


def mix_counts(fraction: float, size: int) -> tuple[int, int]:
    """``(clear, impaired)`` sample counts at one mix fraction; they always sum to ``size``."""
    n_bad = int(np.floor(fraction * size + 1e-9))
    return size - n_bad, n_bad


class _Scorer:
    """Per-sample confusion matrices, computed once and reused across fractions."""

    def __init__(self, model, num_classes, ignore_id, batch_size=4):
        self.predict = _predictor(model)
        self.num_classes = num_classes
        self.ignore_id = ignore_id
        self.batch_size = batch_size
        self.cache: dict = {}

    def matrices(self, key_prefix, samples):
        todo = [(i, s) for i, s in enumerate(samples) if (key_prefix, s[0]) not in self.cache]
        for start in range(0, len(todo), self.batch_size):
            chunk = todo[start:start + self.batch_size]
            preds = self.predict([s[1] for _, s in chunk])
            for (_, s), p in zip(chunk, preds):
                self.cache[(key_prefix, s[0])] = confusion_matrix(np.asarray(s[2]), p, self.num_classes, self.ignore_id)
        return [self.cache[(key_prefix, s[0])] for s in samples]

    def score(self, matrices, per_image):
        if per_image:
            return float(np.mean([m.miou() for m in matrices]))
        total = ConfusionMatrix(self.num_classes)
        for m in matrices:
            total = total + m
        return total.miou()


def condition_sweep(model, spec: SweepSpec, batch_size: int = 4) -> list[tuple[float, float]]:
    """Curve of ``(fraction or severity, mIoU)`` for ``model`` (a Graph or a mask predictor)."""
    spec.validate()
    scorer = _Scorer(model, spec.num_classes, spec.ignore_id, batch_size)
    good = sorted(spec.good, key=lambda s: s[0])
    curve = []
    if spec.mode == "mix":
        bad = sorted(spec.bad, key=lambda s: s[0])
        size = spec.size or min(len(good), len(bad))
        for f in spec.fractions:
            n_good, n_bad = mix_counts(f, size)
            mats = scorer.matrices("good", good[:n_good]) + scorer.matrices("bad", bad[:n_bad])
            curve.append((float(f), scorer.score(mats, spec.per_image)))
    else:
        for level in spec.fractions:
            impaired = [
                (sid, spec.impairment(img, float(level), spec.seed + k), m) for k, (sid, img, m) in enumerate(good)
            ]
            mats = scorer.matrices(("level", float(level)), impaired)
            curve.append((float(level), scorer.score(mats, spec.per_image)))
    return curve


def degradation(curve: Sequence[tuple[float, float]]) -> float:
    """Drop in mIoU from the first to the last point of a curve, in percentage points."""
    if len(curve) < 2:
        raise ConfigError("a degradation needs at least two curve points")
    return 100.0 * (curve[0][1] - curve[-1][1])


def write_sweep_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", "miou"])
        for f, m in curve:
            w.writerow([f"{f:.6g}", f"{m:.6f}"])


IMPAIRMENTS = {"noise": add_gaussian_noise, "fog": apply_fog}
