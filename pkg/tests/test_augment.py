import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adlda.augment import (
    KINDS,
    AugFamily,
    apply_family,
    color_jitter,
    cutout,
    cutout_side,
    default_partition,
    gaussian_noise,
    hflip,
    label_and_augment,
    rotate,
    validate_partition,
)


def img(seed=0, shape=(3, 8, 8)):
    return np.random.default_rng(seed).random(shape).astype(np.float32)


def test_default_partition():
    part = default_partition()
    assert [f.kind for f in part] == list(KINDS)
    assert [f.id for f in part] == list(range(5))
    assert part[1].params == {"max_degrees": 15.0, "flip_prob": 0.5}
    assert part[4].params["fraction"] == 0.25


def test_partition_invariants():
    with pytest.raises(ValueError):
        validate_partition([AugFamily(0, "identity")])
    with pytest.raises(ValueError):
        validate_partition([AugFamily(0, "noise"), AugFamily(1, "identity")])
    with pytest.raises(ValueError):
        validate_partition([AugFamily(0, "identity"), AugFamily(2, "noise")])


@pytest.mark.parametrize("kind,params", [("noise", {"sigma": -1}), ("cutout", {"fraction": 0}),
                                         ("cutout", {"fraction": 1.0}), ("geometric", {"flip_prob": 2}),
                                         ("noise", {"sigma_typo": 1})])
def test_family_parameter_ranges(kind, params):
    with pytest.raises(ValueError):
        AugFamily(1, kind, params)


def test_unknown_kind():
    with pytest.raises(ValueError):
        AugFamily(1, "mixup")


def test_identity_bitwise():
    x = img()
    out = apply_family(AugFamily(0, "identity"), x, np.random.default_rng(0))
    assert out.tobytes() == x.tobytes()


def test_noise_sigma_zero():
    x = img()
    np.testing.assert_array_equal(apply_family(AugFamily(1, "noise", {"sigma": 0}), x, np.random.default_rng(0)), x)
    np.testing.assert_array_equal(gaussian_noise(x, 0.0, np.random.default_rng(1)), x)


def test_cutout_quarter_of_32x32_is_16x16():
    assert cutout_side(0.25, 32, 32) == 16
    x = np.zeros((3, 32, 32), dtype=np.float32)
    out = cutout(x, 0.25, np.random.default_rng(4), fill=0.5)
    changed = np.any(out != x, axis=0)
    assert changed.sum() == 256
    rows, cols = np.nonzero(changed)
    assert rows.max() - rows.min() == 15 and cols.max() - cols.min() == 15
    assert np.all(out[:, changed] == 0.5)


def test_rotate_zero_is_identity():
    x = img()
    np.testing.assert_allclose(rotate(x, 0.0), x, atol=1e-6)


def test_rotate_90_on_2x2_marker():
    x = np.array([[[1.0, 0.0], [0.0, 0.0]]])  # marker top-left
    out = rotate(x, 90.0)
    # counter-clockwise quarter turn moves top-left to bottom-left
    np.testing.assert_allclose(out, [[[0.0, 0.0], [1.0, 0.0]]], atol=1e-12)
    np.testing.assert_allclose(out, np.rot90(x, 1, axes=(1, 2)), atol=1e-12)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_rotate_quarter_turns_match_rot90(k):
    x = img(k, (2, 5, 5)).astype(np.float64)
    np.testing.assert_allclose(rotate(x, 90.0 * k), np.rot90(x, k, axes=(1, 2)), atol=1e-9)


def test_rotate_fills_outside_with_zero():
    x = np.ones((1, 9, 9))
    out = rotate(x, 45.0)
    assert out[0, 0, 0] == 0.0 and out[0, 4, 4] == pytest.approx(1.0)


def test_hflip_involution():
    x = img()
    assert hflip(hflip(x)).tobytes() == x.tobytes()
    np.testing.assert_array_equal(hflip(x)[:, :, 0], x[:, :, -1])


def test_color_jitter_clamps():
    x = np.array([[[0.0, 0.5, 1.0]]])
    np.testing.assert_allclose(color_jitter(x, 1.5, 0.2), [[[0.2, 0.95, 1.0]]])


@given(st.sampled_from(range(5)), st.integers(0, 2**16))
def test_families_keep_shape_and_range(fid, seed):
    fam = default_partition()[fid]
    x = img(seed)
    out = apply_family(fam, x, np.random.default_rng(seed))
    assert out.shape == x.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_degenerate_probabilities_give_clean_domain_zero():
    x = img(0, (6, 3, 8, 8))
    batch = label_and_augment(x, np.arange(6), default_partition(), [1, 0, 0, 0, 0], (7,))
    assert batch.domain_labels.tolist() == [0] * 6
    assert batch.images.tobytes() == x.tobytes()


def test_domain_counts_binomial_5_sigma():
    n, k = 10000, 5
    x = np.zeros((n, 1, 2, 2), dtype=np.float32)
    batch = label_and_augment(x, np.zeros(n, dtype=int), default_partition(), [0.2] * 5, (11,))
    counts = np.bincount(batch.domain_labels, minlength=k)
    sigma = np.sqrt(n * 0.2 * 0.8)
    assert np.all(np.abs(counts - 2000) < 5 * sigma), counts


def test_same_key_bit_identical():
    x = img(0, (16, 3, 8, 8))
    y = np.arange(16) % 3
    a = label_and_augment(x, y, default_partition(), [0.2] * 5, (3, 1))
    b = label_and_augment(x, y, default_partition(), [0.2] * 5, (3, 1))
    assert a.images.tobytes() == b.images.tobytes()
    assert a.domain_labels.tolist() == b.domain_labels.tolist()


def test_sample_randomness_independent_of_batch_composition():
    x = img(0, (8, 3, 8, 8))
    y = np.zeros(8, dtype=int)
    full = label_and_augment(x, y, default_partition(), [0.2] * 5, (3,), indices=np.arange(8))
    part = label_and_augment(x[4:], y[4:], default_partition(), [0.2] * 5, (3,), indices=np.arange(4, 8))
    assert full.images[4:].tobytes() == part.images.tobytes()


@pytest.mark.parametrize("probs", [[0.5, 0.5], [0.2] * 4 + [0.3], [-0.1, 0.3, 0.3, 0.3, 0.2], [np.nan] * 5])
def test_invalid_probabilities(probs):
    with pytest.raises(ValueError):
        label_and_augment(img(0, (2, 3, 4, 4)), np.zeros(2, dtype=int), default_partition(), probs, (0,))


@given(st.integers(0, 2**16))
def test_labels_domains_and_families_consistent(seed):
    """Instrumented check: each image equals its family applied with its own key."""
    from adlda.augment import sample_rng

    x = img(seed, (6, 3, 6, 6))
    y = np.arange(6)
    part = default_partition()
    batch = label_and_augment(x, y, part, [0.2] * 5, (seed,))
    assert batch.class_labels.tolist() == y.tolist()
    assert batch.images.shape == x.shape
    assert batch.images.min() >= 0 and batch.images.max() <= 1
    for i, s in enumerate(batch):
        assert 0 <= s.domain_label < 5
        if s.domain_label == 0:
            assert s.image.tobytes() == x[i].tobytes()


def test_all_variants_emits_k_copies():
    x = img(0, (3, 3, 6, 6))
    batch = label_and_augment(x, np.arange(3), default_partition(), [0.2] * 5, (0,), all_variants=True)
    assert len(batch) == 15
    assert sorted(batch.domain_labels.tolist()) == sorted(list(range(5)) * 3)
    assert sorted(batch.class_labels.tolist()) == sorted([0, 1, 2] * 5)
