import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hybrid3d import augment as aug
from hybrid3d.augment import AugSpec, SeedContext, build_volume, default_roster, derive_stream

from oracles import naive_bilinear_sample, naive_gaussian_blur

rng0 = np.random.default_rng(99)


def rand_img(c=3, h=16, w=16, lo=0.0, hi=1.0, rng=rng0):
    return rng.uniform(lo, hi, (c, h, w))


# -- seeding ---------------------------------------------------------------------------------

def test_splitmix64_reference_outputs():
    # first two outputs of the reference splitmix64 generator seeded with 0
    assert aug.splitmix64(0) == 0xE220A8397B1DCDAF
    assert aug.splitmix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4


def test_golden_seed_vector():
    ctx = SeedContext(0x123456789ABCDEF0, 3, 17, 5)
    assert ctx.stream_seed() == 0x3F65BE47B2FCF7E6
    assert derive_stream(ctx).random() == 0.08257004927040834


def test_same_context_same_stream_and_aug_index_changes_it():
    ctx = SeedContext(7, 1, 2, 3)
    a, b = derive_stream(ctx).random(10), derive_stream(ctx).random(10)
    assert np.array_equal(a, b)
    other = derive_stream(SeedContext(7, 1, 2, 4)).random(10)
    assert not np.array_equal(a, other)


def test_swapped_fields_give_different_streams():
    assert SeedContext(0, 1, 2, 0).stream_seed() != SeedContext(0, 2, 1, 0).stream_seed()


# -- kernels -----------------------------------------------------------------------------------

def test_elastic_identity_and_constant():
    img = rand_img()
    assert np.array_equal(aug.elastic_deform(img, 0.0, 4.0, np.random.default_rng(0)), img)
    const = np.full((3, 12, 12), 0.37)
    np.testing.assert_allclose(aug.elastic_deform(const, 8.0, 4.0, np.random.default_rng(1)),
                               const, atol=1e-15)


def test_elastic_matches_straight_line_resampler():
    img = np.zeros((1, 24, 24))
    img[0, 12, 12] = 1.0
    out = aug.elastic_deform(img, 8.0, 4.0, np.random.default_rng(5))
    dy, dx = aug.elastic_displacement((24, 24), 8.0, 4.0, np.random.default_rng(5))
    gy, gx = np.meshgrid(np.arange(24.0), np.arange(24.0), indexing="ij")
    ref = np.clip(naive_bilinear_sample(img, gy + dy, gx + dx), 0, 1)
    np.testing.assert_allclose(out, ref, atol=1e-12)
    # backward warping of a one-hot pixel redistributes, but roughly keeps, its mass
    assert abs(out.sum() - 1.0) < 0.25


def test_invert_examples():
    assert aug.invert(np.full((1, 1, 1), 0.2))[0, 0, 0] == pytest.approx(0.8, abs=1e-15)
    img = rand_img()
    np.testing.assert_allclose(aug.invert(aug.invert(img)), img, atol=1e-15)
    assert np.all(aug.invert(np.zeros((3, 4, 4))) == 1.0)


def _ref_sharpen(img, factor):
    c, h, w = img.shape
    blur = img.copy()
    for ch in range(c):
        for i in range(1, h - 1):
            for j in range(1, w - 1):
                blur[ch, i, j] = img[ch, i - 1:i + 2, j - 1:j + 2].mean()
    return np.clip(blur + factor * (img - blur), 0, 1)


def test_sharpness_examples():
    img = rand_img()
    assert np.array_equal(aug.sharpness(img, 1.0), img)
    const = np.full((3, 8, 8), 0.6)
    np.testing.assert_allclose(aug.sharpness(const, 3.0), const, atol=1e-15)
    step = np.zeros((1, 8, 8))
    step[:, :, 4:] = 1.0
    out = aug.sharpness(step, 2.0)
    np.testing.assert_allclose(out, _ref_sharpen(step, 2.0), atol=1e-12)
    assert out.min() >= 0 and out.max() <= 1


def test_salt_pepper_count_contract():
    img = np.full((3, 100, 100), 0.5)
    assert np.array_equal(aug.salt_pepper(img, 0.0, np.random.default_rng(0)), img)
    out = aug.salt_pepper(img, 0.015, np.random.default_rng(0))
    changed = np.any(out != img, axis=0)
    assert changed.sum() == 150
    # the same positions are hit in every channel
    assert np.all((out[0] != 0.5) == (out[2] != 0.5))
    full = aug.salt_pepper(rand_img(h=10, w=10), 1.0, np.random.default_rng(1))
    assert set(np.unique(full)) <= {0.0, 1.0}


def test_brightness_examples():
    img = rand_img()
    assert np.array_equal(aug.brightness(img, 0.0), img)
    assert np.all(aug.brightness(img, 1.0) == 1.0)
    assert aug.brightness(np.full((1, 1, 1), 0.3), 0.5)[0, 0, 0] == pytest.approx(0.8, abs=1e-15)


def test_contrast_examples():
    img = rand_img()
    assert np.array_equal(aug.contrast(img, 0.0), img)
    assert np.all(aug.contrast(img, 1.0) == 0.5)
    assert aug.contrast(np.full((1, 1, 1), 0.9), 0.5)[0, 0, 0] == pytest.approx(0.7, abs=1e-15)


def test_color_jitter_examples():
    img = rand_img()
    assert np.array_equal(aug.color_jitter(img, 0.0, np.random.default_rng(0)), img)
    a = aug.color_jitter(img, 0.3, np.random.default_rng(4))
    b = aug.color_jitter(img, 0.3, np.random.default_rng(4))
    assert np.array_equal(a, b)
    out = aug.color_jitter(img, 0.5, np.random.default_rng(5))
    assert out.min() >= 0 and out.max() <= 1


def test_gaussian_noise_statistics():
    img = np.full((1, 1000, 1000), 0.5)
    assert np.array_equal(aug.gaussian_noise(img, 0.0, np.random.default_rng(0)), img)
    diff = aug.gaussian_noise(img, 0.03, np.random.default_rng(0)) - img
    assert abs(diff.std() - 0.03) < 0.003
    assert abs(diff.mean()) < 1e-3


def test_gaussian_blur_examples():
    const = np.full((3, 9, 9), 0.42)
    np.testing.assert_allclose(aug.gaussian_blur(const, 1.5), const, atol=1e-15)
    impulse = np.zeros((1, 15, 15))
    impulse[0, 7, 7] = 1.0
    np.testing.assert_allclose(aug.gaussian_blur(impulse, 1.0),
                               naive_gaussian_blur(impulse, 1.0), atol=1e-9)
    interior = np.zeros((1, 64, 64))
    interior[0, 20:44, 20:44] = rng0.uniform(0, 1, (24, 24))
    assert abs(aug.gaussian_blur(interior, 1.0).mean() - interior.mean()) < 1e-6


def test_occlusion_examples():
    img = np.ones((3, 100, 100))
    out = aug.occlude(img, 0.04, np.random.default_rng(0))
    zero = np.all(out == 0, axis=0)
    rows, cols = np.flatnonzero(zero.any(axis=1)), np.flatnonzero(zero.any(axis=0))
    assert zero.sum() == 400 and len(rows) == 20 and len(cols) == 20
    tiny = aug.occlude(np.ones((1, 10, 10)), 0.004, np.random.default_rng(0))
    assert (tiny == 0).sum() <= 1
    a = aug.occlude(img, 0.1, np.random.default_rng(3))
    b = aug.occlude(img, 0.1, np.random.default_rng(3))
    assert np.array_equal(a, b)


images = arrays(np.float64, (3, 8, 8), elements=st.floats(0, 1))


@given(images, st.sampled_from(sorted(aug.DEFAULT_PARAMS)), st.integers(0, 2**32 - 1))
def test_every_kernel_stays_in_unit_range(img, kind, seed):
    out = AugSpec(kind).apply(img, np.random.default_rng(seed))
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


@given(images, st.integers(0, 2**32 - 1))
def test_identity_parameters_are_exact(img, seed):
    ident = [AugSpec("elastic", {"alpha": 0.0}), AugSpec("sharpness", {"factor": 1.0}),
             AugSpec("brightness", {"delta": 0.0}), AugSpec("contrast", {"p": 0.0}),
             AugSpec("color_jitter", {"strength": 0.0}),
             AugSpec("gaussian_noise", {"sigma": 0.0}), AugSpec("salt_pepper", {"amount": 0.0})]
    for spec in ident:
        assert np.array_equal(spec.apply(img, np.random.default_rng(seed)), img), spec.kind


def test_augspec_validation():
    with pytest.raises(ValueError):
        AugSpec("swirl")
    with pytest.raises(ValueError):
        AugSpec("brightness", {"delta": 2.0})
    with pytest.raises(ValueError):
        AugSpec("sharpness", {"radius": 2.0})
    assert AugSpec.coerce({"kind": "invert"}) == AugSpec("invert")


# -- volumes -------------------------------------------------------------------------------------

@pytest.mark.parametrize("n", [3, 6, 9])
def test_volume_depth_equals_roster_length(n):
    vol = build_volume(rand_img(), default_roster(n), SeedContext(1))
    assert vol.shape == (n, 3, 16, 16)


def test_volume_slices_use_the_original_image():
    img = rand_img()
    ctx = SeedContext(11, 2, 5)
    roster = default_roster()
    vol = build_volume(img, roster, ctx)
    for i, spec in enumerate(roster):
        one = aug.apply_slice(img, spec, SeedContext(11, 2, 5, i))
        assert np.array_equal(vol[i], one)


def test_identity_roster_repeats_the_input():
    img = rand_img()
    roster = [AugSpec("brightness", {"delta": 0.0})] * 9
    vol = build_volume(img, roster, SeedContext(0))
    assert all(np.array_equal(s, img) for s in vol)


def test_empty_roster_rejected_and_default_order():
    with pytest.raises(ValueError):
        build_volume(rand_img(), [], SeedContext(0))
    assert [s.kind for s in default_roster()] == list(aug.DEFAULT_KINDS)
    assert [s.kind for s in default_roster(3)] == ["elastic", "invert", "sharpness"]


def test_volume_batch_layout_and_epoch_dependence():
    imgs = rand_img(c=3)[None].repeat(2, axis=0)
    v1 = aug.build_volume_batch(imgs, [0, 1], default_roster(), 5, 1)
    v2 = aug.build_volume_batch(imgs, [0, 1], default_roster(), 5, 2)
    assert v1.shape == (2, 3, 9, 16, 16)
    assert not np.array_equal(v1, v2)
    assert np.array_equal(v1, aug.build_volume_batch(imgs, [0, 1], default_roster(), 5, 1))
