import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import centered, dft2
from sfda_prompt import spectral
from sfda_prompt.errors import RejectedInputError
from sfda_prompt.spectral import AugConfig, Spectrum, amplitude_swap, batch_style_permute, fft2, low_freq_mask


def wrapped(a, b):
    return np.abs(np.angle(np.exp(1j * (a - b))))


def phase_error(x, y):
    sx, sy = fft2(x), fft2(y)
    keep = (sx.amplitude > 1e-12) & (sy.amplitude > 1e-12)
    return float(wrapped(sx.phase, sy.phase)[keep].max())


# -------------------------------------------------------------------- fft2

def test_constant_image_has_only_dc():
    spec = fft2(np.full((8, 6), 2.5))
    expected = np.zeros((8, 6))
    expected[4, 3] = 2.5 * 48
    np.testing.assert_allclose(spec.amplitude, expected, atol=1e-12)
    assert spec.phase[4, 3] == 0.0


def test_horizontal_cosine_has_two_symmetric_peaks():
    w, f = 16, 3
    x = np.tile(np.cos(2 * np.pi * f * np.arange(w) / w), (8, 1))
    amp = fft2(x).amplitude
    peaks = np.argwhere(amp > 1e-9)
    assert sorted(map(tuple, peaks)) == [(4, 8 - f), (4, 8 + f)]
    assert amp[4, 8 - f] == pytest.approx(amp[4, 8 + f])


@pytest.mark.parametrize("shape", [(8, 8), (6, 10), (5, 7)])
def test_forward_matches_direct_dft(shape):
    x = np.random.default_rng(shape[0]).standard_normal(shape)
    ref = centered(dft2(x))
    spec = fft2(x)
    np.testing.assert_allclose(spec.amplitude * np.exp(1j * spec.phase), ref, atol=1e-10)


def test_round_trip_on_64x64_fields():
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.standard_normal((64, 64))
        assert np.abs(fft2(fft2(x), "inverse") - x).max() <= 1e-9


def test_round_trip_single_precision():
    x = np.random.default_rng(1).standard_normal((32, 32)).astype(np.float32)
    assert np.abs(fft2(fft2(x), "inverse") - x).max() <= 1e-4


@given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(2, 12)),
              elements=st.floats(-100, 100)))
def test_round_trip_property(x):
    assert np.abs(fft2(fft2(x), "inverse") - x).max() <= 1e-9 * max(1.0, np.abs(x).max())


def test_amplitude_is_nonnegative_and_phase_in_range(rng):
    spec = fft2(rng.standard_normal((9, 9)))
    assert np.all(spec.amplitude >= 0)
    assert np.all(spec.phase > -np.pi - 1e-15) and np.all(spec.phase <= np.pi)


def test_fft_rejects_non_finite():
    x = np.ones((4, 4))
    x[1, 1] = np.nan
    with pytest.raises(RejectedInputError):
        fft2(x)
    with pytest.raises(RejectedInputError):
        fft2(Spectrum(np.full((4, 4), np.inf), np.zeros((4, 4))), "inverse")


def test_fft_rejects_tiny_sides():
    with pytest.raises(RejectedInputError):
        fft2(np.ones((1, 4)))


# ----------------------------------------------------------- low_freq_mask

def test_mask_degenerate_beta_keeps_only_dc():
    mask = low_freq_mask(64, 64, 0.01)
    assert mask.sum() == 1 and mask[32, 32]


def test_mask_half_band_is_33_square():
    mask = low_freq_mask(64, 64, 0.5)
    rows, cols = np.nonzero(mask)
    assert mask.sum() == 33 * 33
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (16, 48, 16, 48)


@given(h=st.integers(2, 40), w=st.integers(2, 40), beta=st.floats(0.001, 0.5))
def test_mask_size_and_point_symmetry(h, w, beta):
    mask = low_freq_mask(h, w, beta)
    sh, sw = 2 * int(np.floor(beta * h / 2)) + 1, 2 * int(np.floor(beta * w / 2)) + 1
    assert mask.sum() == sh * sw
    # 180 degree rotation about DC maps index k -> (2*center - k) mod n
    ys, xs = np.nonzero(mask)
    assert np.all(mask[(2 * (h // 2) - ys) % h, (2 * (w // 2) - xs) % w])


@pytest.mark.parametrize("beta", [0.0, -0.1, 0.6])
def test_mask_rejects_bad_beta(beta):
    with pytest.raises(RejectedInputError):
        low_freq_mask(8, 8, beta)


# ---------------------------------------------------------- amplitude_swap

def test_self_swap_is_identity(rng):
    x = rng.standard_normal((2, 64, 64))
    for beta in (0.01, 0.15, 0.5):
        assert np.abs(amplitude_swap(x, x, beta) - x).max() <= 1e-5


def test_dc_only_swap_with_equal_means_is_identity(rng):
    x = rng.standard_normal((16, 16))
    ref = rng.standard_normal((16, 16))
    ref += x.mean() - ref.mean()
    assert np.abs(amplitude_swap(x, ref, 0.01) - x).max() <= 1e-5


def test_swap_preserves_phase(rng):
    for _ in range(5):
        x = rng.standard_normal((64, 64))
        ref = rng.standard_normal((64, 64)) * 3 + 1
        out = amplitude_swap(x, ref, 0.15)
        assert phase_error(out, x) <= 1e-9


def test_swap_output_is_real_and_same_dtype(rng):
    x = rng.standard_normal((8, 8)).astype(np.float32)
    out = amplitude_swap(x, x[::-1].copy(), 0.3)
    assert out.dtype == np.float32 and np.all(np.isfinite(out))


def test_swap_moves_mean_toward_reference(rng):
    x = np.abs(rng.standard_normal((16, 16))) + 1.0
    ref = x + 2.0
    assert amplitude_swap(x, ref, 0.01).mean() == pytest.approx(ref.mean())
    low = amplitude_swap(x, ref, 0.2)
    assert abs(low.mean() - ref.mean()) < abs(x.mean() - ref.mean())


def test_swap_rejects_shape_mismatch():
    with pytest.raises(RejectedInputError):
        amplitude_swap(np.ones((4, 4)), np.ones((4, 6)), 0.1)


# ----------------------------------------------------- batch_style_permute

def test_identical_batch_is_unchanged(rng):
    img = rng.standard_normal((1, 16, 16))
    out, _, _ = batch_style_permute([img] * 4, AugConfig(0.15, seed=2))
    for o in out:
        assert np.abs(o - img).max() <= 1e-5


def test_permute_is_deterministic(rng):
    batch = [rng.standard_normal((1, 16, 16)) for _ in range(5)]
    a, pa, ba = batch_style_permute(batch, AugConfig(0.15, seed=7))
    b, pb, bb = batch_style_permute(batch, AugConfig(0.15, seed=7))
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    np.testing.assert_array_equal(pa, pb)
    np.testing.assert_array_equal(ba, bb)


def test_pair_swap_matches_direct_call(rng):
    batch = [rng.standard_normal((1, 32, 32)) for _ in range(2)]
    out, perm, betas = batch_style_permute(batch, AugConfig(0.15, seed=0))
    np.testing.assert_array_equal(perm, [1, 0])
    np.testing.assert_array_equal(out[0], amplitude_swap(batch[0], batch[1], betas[0]))
    np.testing.assert_array_equal(out[1], amplitude_swap(batch[1], batch[0], betas[1]))


@given(n=st.integers(1, 8), seed=st.integers(0, 2 ** 16), beta_max=st.floats(0.01, 0.5))
def test_permute_shapes_and_beta_range(n, seed, beta_max):
    batch = [np.random.default_rng([seed, i]).standard_normal((1, 8, 8)) for i in range(n)]
    out, perm, betas = batch_style_permute(batch, AugConfig(beta_max, seed=seed))
    assert len(out) == n and all(o.shape == (1, 8, 8) for o in out)
    assert sorted(perm) == list(range(n))
    assert np.all(betas > 0) and np.all(betas <= beta_max)


def test_permutation_prefers_derangements():
    rng = np.random.default_rng(0)
    fixed = sum(np.any(spectral.draw_permutation(6, rng) == np.arange(6)) for _ in range(200))
    # about 37% of uniform permutations have a fixed point; nine draws make it rare
    assert fixed <= 2


def test_permute_rejects_empty_batch():
    with pytest.raises(RejectedInputError):
        batch_style_permute([], AugConfig())


@pytest.mark.parametrize("beta_max", [0.0, 0.51])
def test_aug_config_range(beta_max):
    with pytest.raises(RejectedInputError):
        AugConfig(beta_max)
