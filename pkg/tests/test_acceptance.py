"""End-to-end acceptance checks, one test per criterion.

Each test records a ``ACCEPT n: PASS|FAIL ...`` line (printed immediately and
repeated in the terminal summary) before asserting.
"""

import time

import numpy as np
import pytest

from cmsnet import bench as B
from cmsnet import dataset as D
from cmsnet import impairments as I
from cmsnet import metrics as M
from cmsnet import optimizer as O
from cmsnet import runtime as R
from cmsnet.graph import ARRANGEMENTS, build_arrangement, count_params, infer_shapes
from cmsnet.selftest import _point_in_polygon
from cmsnet.trainer import TrainConfig, train
from conftest import ACCEPTANCE_LINES
from helpers import GRADIENT_CASES, brute_metrics, chord_deviation, perfect_vs_chance, worst_gradient_error


def verdict(number, title, ok, detail):
    line = f"ACCEPT {number}: {'PASS' if ok else 'FAIL'} {title} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    worst = {name: worst_gradient_error(case, seeds=range(10)) for name, case in GRADIENT_CASES.items()}
    elapsed = time.perf_counter() - t0
    name = max(worst, key=worst.get)
    verdict(1, "gradient suite", max(worst.values()) < 1e-4 and elapsed < 60,
            f"{len(worst)} operator cases x 10 seeds, worst rel err {worst[name]:.2e} ({name}), {elapsed:.1f} s")


def test_criterion_02_shape_fidelity():
    def trace(name):
        g = build_arrangement(name, 10, 483, 769)
        shapes = infer_shapes(g)
        return [shapes[i][1:3] for i in g.meta["backbone_groups"]]

    os16, os8 = trace("CM3"), trace("CM0")
    heights16 = sorted({h for h, _ in os16}, reverse=True)
    widths16 = sorted({w for _, w in os16}, reverse=True)
    ok = heights16 == [242, 121, 61, 31] and widths16 == [385, 193, 97, 49] and os8[-1] == (61, 97)
    verdict(2, "shape fidelity", ok, f"OS16 heights 483->{'->'.join(map(str, heights16))}, "
            f"widths 769->{'->'.join(map(str, widths16))}, OS8 final {os8[-1][0]}x{os8[-1][1]}")


def test_criterion_03_parameter_structure():
    p = {name: count_params(build_arrangement(name, 10, 64, 96)) for name in ARRANGEMENTS}
    checks = [
        p["CM0"] == p["CM3"], p["CM1"] == p["CM4"], p["CM2"] == p["CM5"],
        p["CM6"] > p["CM3"], p["CM7"] > p["CM4"], p["CM8"] > p["CM5"],
        # ASPP (CM2/CM5) against SPP (CM0/CM3) and GPP (CM1/CM4) at fixed output stride
        p["CM2"] > p["CM0"] and p["CM2"] > p["CM1"], p["CM5"] > p["CM3"] and p["CM5"] > p["CM4"],
    ]
    verdict(3, "parameter equalities", all(checks), ", ".join(f"{k} {v:,}" for k, v in p.items()))


def _randomize_bn(graph, rng):
    for k, v in graph.weights.items():
        role = k.rsplit("/", 1)[-1]
        if role == "gamma":
            graph.weights[k] = rng.uniform(0.5, 1.5, v.shape)
        elif role in ("beta", "mean"):
            graph.weights[k] = rng.normal(0, 0.3, v.shape)
        elif role == "var":
            graph.weights[k] = rng.uniform(0.5, 2.0, v.shape)


def test_criterion_04_optimizer_equivalence():
    # float64 weights: the check targets the rewrite, not float32 accumulation order
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst, ok = 0.0, True
    for name in ARRANGEMENTS:
        ref = build_arrangement(name, 10, 64, 96, seed=1).astype(np.float64)
        _randomize_bn(ref, rng)
        opt, _ = O.optimize(ref)
        again, reports = O.optimize(opt)
        ok &= not opt.ops("batch_norm") and reports == [] and again.structure() == opt.structure()
        for _ in range(10):
            x = rng.uniform(-1, 1, (1, 64, 96, 3))
            a, b = R.forward(ref, x), R.forward(opt, x)
            worst = max(worst, float(np.max(np.abs(a - b))))
            ok &= np.array_equal(R.argmax_mask(a), R.argmax_mask(b))
    elapsed = time.perf_counter() - t0
    ok &= worst <= 1e-5 and elapsed < 300
    verdict(4, "optimizer equivalence", bool(ok),
            f"CM0-CM8 x 10 inputs, max |diff| {worst:.1e}, all BN folded, idempotent, {elapsed:.1f} s")


def test_criterion_05_metric_oracle():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        c = int(rng.integers(2, 6))
        gt, pred = rng.integers(0, c, (8, 8)), rng.integers(0, c, (8, 8))
        cm = M.confusion_matrix(gt, pred, c)
        got = np.array([cm.pixel_accuracy(), cm.mean_accuracy(), cm.miou(), cm.fwiou()])
        worst = max(worst, float(np.max(np.abs(got - brute_metrics(gt, pred, c)))))
    ex = M.confusion_matrix(np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]]), 2)
    exact = (ex.pixel_accuracy() == 0.75 and abs(ex.miou() - 7 / 12) < 1e-15
             and abs(ex.fwiou() - 7 / 12) < 1e-15 and ex.mean_accuracy() == 0.75)
    verdict(5, "metric oracle", worst <= 1e-12 and exact,
            f"100 random 8x8 pairs, max diff {worst:.1e}; 2x2 example P_acc {ex.pixel_accuracy()}, "
            f"mIoU {ex.miou():.6f}, FWIoU {ex.fwiou():.6f}, mCP_acc {ex.mean_accuracy()}")


@pytest.mark.slow
def test_criterion_06_overfit():
    t0 = time.perf_counter()
    scenes = [D.generate_synthetic_scene(s, (64, 96), 2) for s in range(8)]
    graph = build_arrangement("CM3", 2, 64, 96, seed=0)
    cfg = TrainConfig(epochs=150, batch_size=4, base_lr=0.007, seed=42)
    _, log = train(graph, scenes, cfg)
    elapsed = time.perf_counter() - t0
    losses = np.array(log.step_losses)
    best = max(r["miou"] for r in log.rows)
    at = next(r["iter"] for r in log.rows if r["miou"] == best)
    ok = len(losses) == 300 and np.isfinite(losses).all() and best >= 0.95 and elapsed < 300
    verdict(6, "overfit", bool(ok), f"{len(losses)} iterations, best training mIoU {best:.4f} at iter {at}, "
            f"loss {losses[:4].mean():.3f} -> {losses[-4:].mean():.3f}, {elapsed:.0f} s")


def test_criterion_07_reaction_distance():
    d, t = B.reaction_distance(30, 21), B.reaction_latency(21) * 1000
    verdict(7, "reaction distance", abs(d - 0.397) <= 0.005 and abs(t - 47.6) <= 0.1,
            f"30 km/h at 21 FPS: {d:.4f} m, {t:.2f} ms")


@pytest.mark.slow
def test_criterion_08_bench_harness():
    def stub(_x):
        time.sleep(0.005)

    stats = B.time_inference(stub, (8, 8), iterations=500, warmup=20)
    box = stats.latency_box
    shuffled = B.LatencyStats(np.random.default_rng(0).permutation(stats.times))
    invariant = (shuffled.mean_latency, shuffled.sd_pct, shuffled.latency_box, shuffled.fps_box) == (
        stats.mean_latency, stats.sd_pct, box, stats.fps_box)
    err = abs(stats.fps - 200) / 200
    verdict(8, "bench harness", stats.iterations == 500 and err < 0.10 and invariant,
            f"sleep stub 200 FPS measured {stats.fps:.1f} ({100 * err:.1f}% off), SD {stats.sd_pct:.2f}%, "
            f"median {1000 * box.median:.3f} ms, permutation-invariant {invariant}")


def test_criterion_09_sweep_protocol():
    good, bad, predict = perfect_vs_chance(n=10)

    def standalone(samples, per_image):
        pairs = list(zip([s[2] for s in samples], predict([s[1] for s in samples])))
        if per_image:
            return M.per_image_miou(pairs, 2)
        cm = M.ConfusionMatrix(2)
        for g, p in pairs:
            cm.accumulate(g, p)
        return cm.miou()

    ok = True
    for per_image in (False, True):
        curve = I.condition_sweep(predict, I.SweepSpec(good, bad, per_image=per_image))
        ok &= curve[0][1] == standalone(good, per_image) and curve[-1][1] == standalone(bad, per_image)
    deviation = chord_deviation(curve)
    ok &= deviation <= 2.0
    verdict(9, "sweep protocol", bool(ok), f"endpoints exact; perfect-vs-chance curve {curve[0][1]:.3f} -> "
            f"{curve[-1][1]:.3f}, max chord deviation {deviation:.3f} points (per-image mIoU)")


def test_criterion_10_impairments():
    img = D.generate_synthetic_scene(0, (96, 128), 4)[0]
    identity = (np.array_equal(I.add_gaussian_noise(img, 0.0, 1), img)
                and np.array_equal(I.apply_fog(img, 0.0, 1), img))
    std = float(I.noise_field((480, 640, 3), 0.25, seed=0).std())
    means = [float(I.apply_fog(img.astype(np.float64), d, 2).mean()) for d in np.linspace(0, 1, 21)]
    monotone = all(b > a for a, b in zip(means, means[1:]))
    std_err = abs(std - 63.75) / 63.75
    verdict(10, "impairment calibration", identity and std_err < 0.02 and monotone,
            f"zero levels bit-identical {identity}, noise std {std:.2f} ({100 * std_err:.2f}% off 63.75), "
            f"fog mean brightness {means[0]:.1f} -> {means[-1]:.1f} strictly increasing {monotone}")


def test_criterion_11_rasterizer():
    rng = np.random.default_rng(11)
    table = D.DEFAULT_CLASSES
    mismatches = 0
    for _ in range(50):
        shapes = [D.Shape("road", "road", None, rng.uniform(-4, 28, (int(rng.integers(3, 8)), 2)))]
        for k in range(int(rng.integers(1, 4))):
            cls = table.names[int(rng.integers(2, len(table)))]
            shapes.append(D.Shape(f"{cls}-{k}", cls, k, rng.uniform(-4, 28, (int(rng.integers(3, 8)), 2))))
        ann = D.SceneAnnotation(24, 18, shapes)
        oracle = np.zeros((18, 24), np.uint8)
        for s in sorted(shapes, key=lambda s: table.by_name(s.class_name).priority):
            for y in range(18):
                for x in range(24):
                    if _point_in_polygon(x + 0.5, y + 0.5, s.points):
                        oracle[y, x] = table.by_name(s.class_name).id
        mismatches += int(np.count_nonzero(D.rasterize(ann) != oracle))
    person = D.Shape("person-0", "person", 0, np.array([[4, 4], [10, 4], [10, 12], [4, 12]], float))
    road = D.Shape("road", "road", None, np.array([[0, 0], [24, 0], [24, 18], [0, 18]], float))
    layered = D.rasterize(D.SceneAnnotation(24, 18, [person, road]))
    person_wins = bool((layered[4:12, 4:10] == table.by_name("person").id).all() and layered[0, 0] == 1)
    verdict(11, "rasterizer", mismatches == 0 and person_wins,
            f"50 random scenes, {mismatches} pixels differ from the point-in-polygon oracle; person over road {person_wins}")
