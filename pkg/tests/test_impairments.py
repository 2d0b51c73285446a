import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmsnet import impairments as I
from cmsnet.dataset import generate_synthetic_scene
from cmsnet.errors import ConfigError
from cmsnet.metrics import ConfusionMatrix, confusion_matrix, per_image_miou
from helpers import chord_deviation, perfect_vs_chance

IMG = generate_synthetic_scene(3, (48, 64), 4)[0]


def test_zero_levels_are_bit_identity():
    assert np.array_equal(I.add_gaussian_noise(IMG, 0.0, 1), IMG)
    assert np.array_equal(I.apply_fog(IMG, 0.0, 1), IMG)


def test_noise_calibration():
    field = I.noise_field((480, 640, 3), 0.25, seed=0)
    assert abs(field.std() - 63.75) / 63.75 < 0.02
    assert abs(field.mean()) < 0.5


def test_noise_is_seeded_and_clamped():
    a, b = I.add_gaussian_noise(IMG, 0.3, 5), I.add_gaussian_noise(IMG, 0.3, 5)
    assert np.array_equal(a, b) and a.dtype == np.uint8
    assert not np.array_equal(a, I.add_gaussian_noise(IMG, 0.3, 6))


@pytest.mark.parametrize("fn", [I.add_gaussian_noise, I.apply_fog])
def test_levels_outside_unit_interval_rejected(fn):
    with pytest.raises(ConfigError):
        fn(IMG, 1.5, 0)


def test_fog_brightness_strictly_increases_with_density():
    means = [I.apply_fog(IMG.astype(np.float64), d, 4).mean() for d in np.linspace(0, 1, 11)]
    assert all(b > a for a, b in zip(means, means[1:]))


def test_fog_with_constant_field_is_alpha_blend():
    img = np.full((2, 2, 3), 100.0)
    out = I.apply_fog(img, 0.5, 0, field=1.0)
    np.testing.assert_allclose(out, 0.5 * 100 + 0.5 * 255)


def test_fog_is_thicker_at_the_top():
    m = I.fog_field(60, 80, 1)
    assert m.min() >= 0.6 and m.max() <= 1.0
    assert m[:10].mean() > m[-10:].mean()


def test_value_noise_range():
    v = I.value_noise(20, 30, 2)
    assert v.min() == 0.0 and v.max() == 1.0


def test_augment_keeps_mask_labels_and_sizes():
    img, mask = generate_synthetic_scene(1, (40, 56), 5)
    cfg = I.AugmentConfig(p_rotate=1, p_crop=1, p_noise=1, p_fog=1)
    out_img, out_mask = I.augment(img, mask, 9, cfg)
    assert out_img.shape == img.shape and out_mask.shape == mask.shape
    assert set(np.unique(out_mask)) <= set(np.unique(mask))
    again = I.augment(img, mask, 9, cfg)
    assert np.array_equal(out_img, again[0]) and np.array_equal(out_mask, again[1])


def test_rotate_zero_and_full_crop_are_identity():
    img, mask = generate_synthetic_scene(2, (20, 30), 3)
    r_img, r_mask = I.rotate_pair(img, mask, 0.0)
    assert np.array_equal(r_img, img) and np.array_equal(r_mask, mask)
    c_img, c_mask = I.crop_pair(img, mask, 0, 0, 20, 30)
    assert np.array_equal(c_img, img) and np.array_equal(c_mask, mask)


@settings(max_examples=50, deadline=None)
@given(f=st.floats(0, 1), size=st.integers(1, 50))
def test_mix_counts_sum_to_size(f, size):
    n_good, n_bad = I.mix_counts(f, size)
    assert n_good + n_bad == size and 0 <= n_bad <= size


def test_mix_counts_are_exact_at_tenths():
    assert [I.mix_counts(k / 10, 10)[1] for k in range(11)] == list(range(11))


def standalone_miou(samples, predict):
    cm = ConfusionMatrix(2)
    for (_, _, mask), pred in zip(samples, predict([s[1] for s in samples])):
        cm = cm + confusion_matrix(mask, pred, 2)
    return cm.miou()


def test_sweep_endpoints_equal_standalone_evaluations():
    good, bad, predict = perfect_vs_chance(n=10)
    curve = I.condition_sweep(predict, I.SweepSpec(good, bad))
    assert curve[0][1] == standalone_miou(good, predict) == 1.0
    assert curve[-1][1] == standalone_miou(bad, predict)


def test_perfect_vs_chance_is_affine_per_image():
    good, bad, predict = perfect_vs_chance(n=10)
    curve = I.condition_sweep(predict, I.SweepSpec(good, bad, per_image=True))
    assert curve[-1][1] == pytest.approx(per_image_miou([(m, p) for (_, _, m), p in
                                                          zip(bad, predict([b[1] for b in bad]))], 2))
    assert chord_deviation(curve) <= 2.0
    assert I.degradation(curve) > 40


def test_severity_sweep_degrades_a_threshold_model():
    def predict(images):
        return [(img.mean(axis=2) > 127).astype(int) for img in images]

    good = [(f"s{k}", img, predict([img])[0]) for k, img in
            enumerate(generate_synthetic_scene(k, (32, 48), 3)[0] for k in range(4))]
    spec = I.SweepSpec(good, mode="severity", impairment=I.add_gaussian_noise, fractions=(0.0, 0.1, 0.3))
    curve = I.condition_sweep(predict, spec)
    assert curve[0] == (0.0, 1.0)
    assert curve[2][1] < curve[1][1] < 1.0


def test_sweep_spec_validation():
    good, bad, _ = perfect_vs_chance(n=3)
    with pytest.raises(ConfigError):
        I.SweepSpec(good, bad, fractions=(0.0, 0.5)).validate()
    with pytest.raises(ConfigError):
        I.SweepSpec(good, None).validate()
    with pytest.raises(ConfigError):
        I.SweepSpec(good, bad, size=5).validate()
    with pytest.raises(ConfigError):
        I.SweepSpec(good, mode="severity").validate()


def test_sweep_csv(tmp_path):
    I.write_sweep_csv([(0.0, 1.0), (0.5, 0.75)], tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text() == "fraction,miou\n0,1.000000\n0.5,0.750000\n"
