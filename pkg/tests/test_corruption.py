import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from med.corruption import (
    CorruptionPool,
    CorruptionSpec,
    ParameterError,
    PoolConfigError,
    apply_downscale,
    apply_drop_mask,
    apply_gaussian,
    apply_local_var_gaussian,
    apply_poisson,
    apply_salt_pepper,
    apply_spec,
    apply_speckle,
    apply_speckle_uniform,
    downscale,
    local_std,
    parse_pool,
    sample_spec,
)

MEGA = (1000, 1000, 1)


def psnr_255(a, b):
    return 10 * np.log10(1.0 / np.mean((a - b) ** 2))


def natural_patch(size=96, seed=3):
    """Smooth random field with some edges; stands in for a natural image."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = 0.5 + 0.2 * np.sin(6 * xx + 3 * yy) + 0.15 * np.cos(11 * yy * xx)
    img += 0.1 * (xx > 0.6) + 0.02 * rng.standard_normal((size, size))
    return np.clip(np.stack([img, img**1.2, 1 - img], -1), 0, 1)


class TestGaussian:
    def test_zero_sigma_is_identity(self):
        img = natural_patch()
        assert np.array_equal(apply_gaussian(img, 0, seed=1), img)

    def test_residual_std_one_megapixel(self):
        img = np.full(MEGA, 0.5)
        res = apply_gaussian(img, 25, seed=7) - img
        assert abs(res.std() - 25 / 255) < 0.02 * 25 / 255

    def test_psnr_mid_gray(self):
        # analytic 20.172 dB, clipping at 0.5 +- 4 sigma is negligible
        img = np.full((512, 512, 1), 0.5)
        out = apply_gaussian(img, 25, seed=2)
        assert abs(psnr_255(out, img) - 10 * np.log10(255**2 / 625)) < 0.1

    def test_negative_sigma(self):
        with pytest.raises(ParameterError):
            apply_gaussian(np.zeros((4, 4, 1)), -1, 0)


def brute_local_std(img, window):
    r = window // 2
    padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode="symmetric")
    h, w, c = img.shape
    out = np.empty_like(img)
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                out[i, j, ch] = padded[i : i + window, j : j + window, ch].std()
    return out


class TestLocalVarGaussian:
    def test_constant_image_unchanged(self):
        img = np.full((32, 32, 3), 0.3)
        assert np.array_equal(apply_local_var_gaussian(img, 2.0, 7, seed=1), img)

    def test_k_zero_is_identity(self):
        img = natural_patch(32)
        assert np.array_equal(apply_local_var_gaussian(img, 0.0, 7, seed=1), img)

    def test_local_std_matches_sliding_window(self):
        img = natural_patch(24)
        np.testing.assert_allclose(local_std(img, 5), brute_local_std(img, 5), atol=1e-12)

    def test_checkerboard_noise_std(self):
        n = 64
        board = (np.add.outer(np.arange(n), np.arange(n)) % 2).astype(float)[:, :, None]
        oracle = brute_local_std(board, 3)
        np.testing.assert_allclose(local_std(board, 3), oracle, atol=1e-12)
        # same std map on a {0.4, 0.6} board (scaled by 0.2) keeps clipping out of the picture
        mid = 0.4 + 0.2 * board
        z = np.concatenate(
            [((apply_local_var_gaussian(mid, 1.0, 3, seed=s) - mid) / (0.2 * oracle)).ravel() for s in range(30)]
        )
        assert abs(z.std() - 1.0) < 0.05

    def test_even_window_rejected(self):
        with pytest.raises(ParameterError):
            apply_local_var_gaussian(np.zeros((8, 8, 1)), 1.0, 4, seed=0)


class TestPoisson:
    def test_zero_lambda_identity(self):
        img = natural_patch(16)
        assert np.array_equal(apply_poisson(img, 0, 1), img)

    def test_moments_on_black(self):
        out = apply_poisson(np.zeros(MEGA), 10, seed=5)
        assert abs(out.mean() - 10 / 255) < 0.01 * 10 / 255
        assert abs(out.var() - 10 / 255**2) < 0.02 * 10 / 255**2

    def test_saturates_on_white(self):
        out = apply_poisson(np.ones((64, 64, 3)), 10, seed=5)
        assert np.all(out == 1.0)

    def test_negative(self):
        with pytest.raises(ParameterError):
            apply_poisson(np.zeros((2, 2, 1)), -0.1, 0)


class TestSpeckle:
    def test_zero_level_identity(self):
        img = natural_patch(16)
        assert np.array_equal(apply_speckle(img, 0, 3), img)

    def test_black_stays_black(self):
        assert np.all(apply_speckle(np.zeros((32, 32, 3)), 50, 3) == 0)
        assert np.all(apply_speckle_uniform(np.zeros((32, 32, 3)), 3) == 0)

    def test_residual_std(self):
        img = np.full(MEGA, 0.5)
        res = apply_speckle(img, 50, seed=9) - img
        assert abs(res.std() - 0.5 * 50 / 255) < 0.02 * 0.5 * 50 / 255

    def test_uniform_variant_mean(self):
        img = np.full(MEGA, 0.8)
        out = apply_speckle_uniform(img, seed=2)
        assert abs(out.mean() - 0.4) < 0.002
        assert out.max() <= 0.8


class TestSaltPepper:
    def test_r_zero(self):
        img = natural_patch(16)
        assert np.array_equal(apply_salt_pepper(img, 0, 1), img)

    def test_r_one_all_extreme(self):
        out = apply_salt_pepper(natural_patch(32), 1.0, 1)
        assert np.all((out == 0) | (out == 1))

    def test_fraction_and_balance(self):
        img = np.full((1000, 1000, 3), 0.5)
        out = apply_salt_pepper(img, 0.3, seed=11)
        px = out[:, :, 0]
        assert np.array_equal(out[:, :, 0], out[:, :, 2])  # joint across channels
        salt, pepper = (px == 1).mean(), (px == 0).mean()
        assert abs(salt + pepper - 0.3) < 0.005
        assert abs(salt / pepper - 1.0) < 0.02

    @pytest.mark.parametrize("r", [-0.1, 1.5])
    def test_out_of_range(self, r):
        with pytest.raises(ParameterError):
            apply_salt_pepper(np.zeros((2, 2, 1)), r, 0)


class TestDownscale:
    @pytest.mark.parametrize("kernel", ["bicubic", "lanczos", "bilinear", "hamming"])
    @pytest.mark.parametrize("scale", [2, 3, 4])
    def test_constant_preserved(self, kernel, scale):
        img = np.full((48, 48, 3), 0.37)
        np.testing.assert_allclose(apply_downscale(img, scale, kernel), img, atol=1e-6)

    def test_bilinear_block_means(self):
        rng = np.random.default_rng(0)
        blocks = rng.uniform(size=(8, 8, 3))
        img = blocks.repeat(2, axis=0).repeat(2, axis=1)
        # bilinear at exactly half resolution samples the centre of each 2x2 block
        np.testing.assert_allclose(downscale(img, 2, "bilinear"), blocks, atol=1e-12)

    def test_stronger_scale_loses_more(self):
        img = natural_patch(96)
        assert psnr_255(apply_downscale(img, 4, "bicubic"), img) < psnr_255(apply_downscale(img, 2, "bicubic"), img)

    def test_indivisible(self):
        with pytest.raises(ParameterError):
            apply_downscale(np.zeros((10, 10, 1)), 3)


class TestDropMask:
    def test_zero_ratio(self):
        img = natural_patch(20)
        out, mask = apply_drop_mask(img, 0.0, 1)
        assert np.array_equal(out, img) and np.all(mask == 1)

    def test_exact_count(self):
        out, mask = apply_drop_mask(np.ones((100, 100, 3)), 0.9, 1)
        assert int((mask == 0).sum()) == 9000
        assert int((out[:, :, 0] == 0).sum()) == 9000

    def test_two_seeds_overlap(self):
        _, m1 = apply_drop_mask(np.ones((100, 100, 1)), 0.5, 1)
        _, m2 = apply_drop_mask(np.ones((100, 100, 1)), 0.5, 2)
        both = ((m1 == 0) & (m2 == 0)).mean()
        assert abs(both - 0.25) < 0.01

    def test_ratio_one_rejected(self):
        with pytest.raises(ParameterError):
            apply_drop_mask(np.ones((4, 4, 1)), 1.0, 0)


ALL_SPECS = [
    CorruptionSpec("gaussian", {"sigma": 25.0}, 5),
    CorruptionSpec("local_var_gaussian", {"k": 1.0, "window": 7}, 5),
    CorruptionSpec("poisson", {"lambda_mean": 10.0}, 5),
    CorruptionSpec("speckle", {"v": 30.0}, 5),
    CorruptionSpec("speckle_uniform", {}, 5),
    CorruptionSpec("salt_pepper", {"r": 0.2}, 5),
    CorruptionSpec("downscale", {"scale": 2, "kernel": "lanczos"}, 5),
    CorruptionSpec("drop_mask", {"drop_ratio": 0.5}, 5),
    CorruptionSpec("identity", {}, 5),
]


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.family)
def test_determinism_and_range(spec):
    img = natural_patch(48)
    a, ma = apply_spec(img, spec)
    b, mb = apply_spec(img, spec)
    assert a.tobytes() == b.tobytes() and ma.tobytes() == mb.tobytes()
    assert a.min() >= 0 and a.max() <= 1
    assert set(np.unique(ma)) <= {0.0, 1.0}


def test_distinct_seeds_independent():
    img = np.full(MEGA, 0.5)
    r1 = apply_gaussian(img, 25, 1) - img
    r2 = apply_gaussian(img, 25, 2) - img
    assert abs(np.corrcoef(r1.ravel(), r2.ravel())[0, 1]) < 0.01


@pytest.mark.parametrize(
    "family,params",
    [
        ("gaussian", {}),
        ("gaussian", {"sigma": 1.0, "k": 2.0}),
        ("salt_pepper", {"r": 2.0}),
        ("downscale", {"scale": 5, "kernel": "bicubic"}),
        ("nope", {}),
    ],
)
def test_spec_validation(family, params):
    with pytest.raises(ParameterError):
        CorruptionSpec(family, params, 0)


class TestPool:
    def test_parse_and_roundtrip(self):
        pool = parse_pool(
            """
            # comment
            gaussian sigma=5:50 2
            speckle v=25:50
            downscale scale=2:4 kernel=bicubic,lanczos 0.5
            local_var_gaussian k=0.5:1.5
            """
        )
        assert [e.family for e in pool.entries] == ["gaussian", "speckle", "downscale", "local_var_gaussian"]
        assert pool.entries[0].weight == 2.0 and pool.entries[1].weight == 1.0
        assert pool.entries[3].ranges["window"] == (7, 7)
        again = parse_pool(pool.to_text())
        assert again == pool

    @pytest.mark.parametrize("text", ["", "# nothing", "gaussian sigma=5:50 -1", "gaussian", "wobble x=1", "gaussian sigma=9:3"])
    def test_bad_pools(self, text):
        with pytest.raises(PoolConfigError):
            parse_pool(text)

    def test_degenerate_range(self):
        pool = parse_pool("gaussian sigma=25:25 1")
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = sample_spec(pool, rng)
            assert s.family == "gaussian" and s.params == {"sigma": 25.0}

    def test_family_frequencies(self):
        pool = parse_pool("gaussian sigma=25 1\nspeckle v=25 1")
        rng = np.random.default_rng(1)
        fams = [sample_spec(pool, rng).family for _ in range(10_000)]
        assert abs(fams.count("gaussian") / 1e4 - 0.5) < 0.02

    def test_uniform_sigma_mean(self):
        pool = parse_pool("gaussian sigma=5:50")
        rng = np.random.default_rng(2)
        sig = [sample_spec(pool, rng).params["sigma"] for _ in range(10_000)]
        assert abs(np.mean(sig) - 27.5) < 1
        assert min(sig) >= 5 and max(sig) <= 50

    def test_fresh_seeds(self):
        pool = CorruptionPool.single("gaussian", sigma=25)
        rng = np.random.default_rng(3)
        seeds = {sample_spec(pool, rng).seed for _ in range(100)}
        assert len(seeds) == 100

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32), st.floats(0, 1))
    def test_sampled_specs_valid(self, seed, w):
        pool = parse_pool(f"salt_pepper r=0.3:0.5 {w + 0.01}\nlocal_var_gaussian k=0:2 window=3:9 1\ndownscale scale=2:4 kernel=hamming,bilinear 1")
        spec = sample_spec(pool, np.random.default_rng(seed))
        CorruptionSpec(spec.family, spec.params, spec.seed)  # re-validates
        if spec.family == "local_var_gaussian":
            assert spec.params["window"] in (3, 5, 7, 9)


@pytest.mark.parametrize(
    "line",
    ["gaussian sigma=-1:3 1", "salt_pepper r=0.5:1.5 1", "drop_mask drop_ratio=0:1 1", "downscale scale=2:5 1",
     "downscale scale=2 kernel=nearest 1", "gaussian sigma=5 0", "local_var_gaussian k=1 window=4:4 1"],
)
def test_pool_rejects_invalid_ranges(line):
    with pytest.raises(PoolConfigError):
        parse_pool(line)
