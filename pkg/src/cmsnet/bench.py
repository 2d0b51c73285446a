"""Latency statistics (mean, SD, boxplot) and the reaction-distance calculator."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import runtime as R
from .errors import ConfigError
from .graph import Graph

DEFAULT_ITERATIONS = 500
DEFAULT_WARMUP = 20


@dataclass
class BoxPlot:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    whisker_low: float
    whisker_high: float
    outliers: list[float] = field(default_factory=list)

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


def boxplot_params(values) -> BoxPlot:
    """Five-number summary with linearly interpolated quartiles and 1.5*IQR whiskers.

    >>> b = boxplot_params(range(1, 10))
    >>> (b.q1, b.median, b.q3)
    (3.0, 5.0, 7.0)
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ConfigError("boxplot of an empty series")
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    lo_fence, hi_fence = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    outliers = v[(v < lo_fence) | (v > hi_fence)]
    return BoxPlot(float(v[0]), float(q1), float(med), float(q3), float(v[-1]),
                   float(inside.min()), float(inside.max()), [float(x) for x in outliers])


@dataclass
class LatencyStats:
    """Per-iteration wall times (seconds) for one batch size."""

    times: np.ndarray
    batch: int = 1
    threads: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.times.size == 0:
            raise ConfigError("latency stats need at least one iteration")
        if np.any(self.times <= 0):
            raise ConfigError("latencies must be positive")

    @property
    def iterations(self) -> int:
        return int(self.times.size)

    @property
    def mean_latency(self) -> float:
        # correctly rounded sum, so the statistic does not depend on sample order
        return math.fsum(self.times) / self.iterations

    @property
    def fps(self) -> float:
        """Batches per second."""
        return 1.0 / self.mean_latency

    @property
    def per_image_fps(self) -> float:
        return self.batch / self.mean_latency

    @property
    def sd_pct(self) -> float:
        """Sample standard deviation of the latencies as a percentage of their mean."""
        if self.iterations < 2:
            return 0.0
        mean = self.mean_latency
        var = math.fsum((t - mean) ** 2 for t in self.times) / (self.iterations - 1)
        return 100.0 * math.sqrt(var) / mean

    @property
    def latency_box(self) -> BoxPlot:
        return boxplot_params(self.times)

    @property
    def fps_samples(self) -> np.ndarray:
        """Per-iteration images-per-second."""
        return self.batch / self.times

    @property
    def fps_box(self) -> BoxPlot:
        return boxplot_params(self.fps_samples)


def time_inference(model, input_dims=None, batch: int = 1, iterations: int = DEFAULT_ITERATIONS,
                   warmup: int = DEFAULT_WARMUP, seed: int = 42, threads: int | None = None) -> LatencyStats:
    """Time ``model`` on one fixed random batch.

    ``model`` is a :class:`Graph` (run with :func:`cmsnet.runtime.forward`) or
    any callable taking the input batch.  Warmup runs are discarded.
    """
    if iterations < 1:
        raise ConfigError("iterations must be at least 1")
    if warmup < 0 or batch < 1:
        raise ConfigError("warmup must be >= 0 and batch >= 1")
    threads = R.thread_count() if threads is None else threads
    if isinstance(model, Graph):
        h, w, c = model.input_shape
        if input_dims is not None and tuple(input_dims[:2]) != (h, w):
            raise ConfigError(f"graph was built for {h}x{w}, not {input_dims[0]}x{input_dims[1]}")

        def run(x):
            return R.forward(model, x, threads)
    else:
        if input_dims is None:
            raise ConfigError("input_dims is required when timing a plain callable")
        h, w = input_dims[:2]
        c = input_dims[2] if len(input_dims) > 2 else 3
        run = model
    x = np.random.default_rng(seed).uniform(-1, 1, (batch, h, w, c)).astype(np.float32)
    for _ in range(warmup):
        run(x)
    times = np.empty(iterations)
    for i in range(iterations):
        t0 = time.perf_counter()
        run(x)
        times[i] = time.perf_counter() - t0
    return LatencyStats(times, batch, threads)


def reaction_latency(fps: float) -> float:
    """Seconds between capture and result at a given frame rate."""
    if fps <= 0:
        raise ConfigError("fps must be positive")
    return 1.0 / fps


def reaction_distance(speed_kmh: float, fps: float) -> float:
    """Metres travelled during one inference: ``V / (3.6 * FPS)``."""
    if speed_kmh < 0:
        raise ConfigError("speed must be non-negative")
    return speed_kmh / 3.6 * reaction_latency(fps)


BENCH_FIELDS = ["arrangement", "batch", "threads", "mean_fps", "sd_pct", "min", "q1", "median", "q3", "max"]


def bench_row(arrangement: str, stats: LatencyStats) -> dict:
    """One CSV row; FPS columns are images per second, ``sd_pct`` is over latencies."""
    box = stats.fps_box
    return {
        "arrangement": arrangement,
        "batch": stats.batch,
        "threads": stats.threads,
        "mean_fps": f"{stats.per_image_fps:.4f}",
        "sd_pct": f"{stats.sd_pct:.4f}",
        **{k: f"{getattr(box, k):.4f}" for k in ("min", "q1", "median", "q3", "max")},
    }


def write_bench_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
