"""Augmentation tests: branch statistics over seeded draws plus per-branch
post-conditions."""
import numpy as np
import pytest
from scipy.stats import chisquare

from facespeak.augment import (
    BRANCHES,
    AugmentConfig,
    augment_face,
    blur,
    grayscale,
    toy_stylize,
)
from facespeak.errors import ConfigError, InputError

N_DRAWS = 12000
EXPECTED = {"none": 0.5, "stylize": 1 / 6, "grayscale": 1 / 6, "blur": 1 / 6}


def classify(img, out, style_pool):
    if out is img:
        return "none"
    if np.allclose(out, grayscale(img)):
        return "grayscale"
    for style in style_pool:
        if np.allclose(out, toy_stylize(img, style)):
            return "stylize"
    return "blur"


@pytest.fixture(scope="module")
def draw_counts():
    rng = np.random.default_rng(1234)
    img_rng = np.random.default_rng(5)
    img = img_rng.random((32, 32, 3))
    styles = [img_rng.random((32, 32, 3)) for _ in range(3)]
    counts = {k: 0 for k in EXPECTED}
    for _ in range(N_DRAWS):
        out = augment_face(img, styles, rng)
        counts[classify(img, out, styles)] += 1
    return counts


class TestBranchStatistics:
    def test_frequencies_within_3_sigma(self, draw_counts):
        for name, p in EXPECTED.items():
            sigma = np.sqrt(N_DRAWS * p * (1 - p))
            assert abs(draw_counts[name] - N_DRAWS * p) <= 3 * sigma, (
                name, draw_counts)

    def test_chi_square_not_rejected(self, draw_counts):
        observed = [draw_counts[k] for k in EXPECTED]
        expected = [N_DRAWS * p for p in EXPECTED.values()]
        _, p_value = chisquare(observed, expected)
        assert p_value > 0.001

    def test_reproducible_stream(self):
        img = np.random.default_rng(0).random((16, 16, 3))
        styles = [np.random.default_rng(1).random((16, 16, 3))]
        a = [augment_face(img, styles, np.random.default_rng(9)) for _ in range(50)]
        b = [augment_face(img, styles, np.random.default_rng(9)) for _ in range(50)]
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


class TestPostConditions:
    rng = np.random.default_rng(42)
    img = rng.random((24, 24, 3))

    def test_all_branches_preserve_shape_and_range(self):
        styles = [self.rng.random((24, 24, 3))]
        rng = np.random.default_rng(3)
        for _ in range(200):
            out = augment_face(self.img, styles, rng)
            assert out.shape == self.img.shape
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_grayscale_channels_equal(self):
        g = grayscale(self.img)
        assert np.array_equal(g[:, :, 0], g[:, :, 1])
        assert np.array_equal(g[:, :, 1], g[:, :, 2])
        assert np.allclose(g[:, :, 0], self.img @ np.array([0.299, 0.587, 0.114]))

    def test_grayscale_of_gray_is_identity(self):
        g = grayscale(self.img)
        assert np.allclose(grayscale(g), g, atol=1e-12)

    def test_blur_constant_image_unchanged(self):
        const = np.full((16, 16, 3), 0.37)
        assert np.allclose(blur(const, 1.5), const)

    def test_blur_preserves_mean(self):
        # interior mean preserved by kernel normalization with reflect padding
        out = blur(self.img, 1.0)
        assert abs(out.mean() - self.img.mean()) < 1e-4

    def test_blur_rejects_nonpositive_sigma(self):
        with pytest.raises(InputError):
            blur(self.img, 0.0)

    def test_stylize_matches_moments(self):
        style = self.rng.random((24, 24, 3)) * 0.5 + 0.25
        out = toy_stylize(self.img, style)
        for c in range(3):
            assert out[:, :, c].mean() == pytest.approx(style[:, :, c].mean(), abs=5e-2)

    def test_stylize_constant_style_mean_shift(self):
        # keep the shifted image inside [0, 1] so the final clip is a no-op
        style = np.full((24, 24, 3), 0.6)
        out = toy_stylize(self.img * 0.5 + 0.25, style)
        for c in range(3):
            assert out[:, :, c].mean() == pytest.approx(0.6, abs=1e-9)

    def test_empty_style_pool_raises_config_error(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            for _ in range(100):
                augment_face(self.img, [], rng)

    def test_bad_image_shape_rejected(self):
        with pytest.raises(InputError):
            grayscale(np.zeros((8, 8)))

    def test_bad_p_augment_rejected(self):
        with pytest.raises(ConfigError):
            AugmentConfig(p_augment=1.5)

    def test_branch_tuple_stable(self):
        assert BRANCHES == ("stylize", "grayscale", "blur")
