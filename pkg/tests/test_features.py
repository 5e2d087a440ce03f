import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octa.errors import ShapeError
from octa.features import (
    LARGE,
    SMALL,
    PcaModel,
    embed_dataset,
    extract_patch_pair,
    extract_patch_pairs,
    pca_embed,
    pca_fit,
)
from octa.neuralnet import CompositeEncoder, DdaeModel


def test_patch_geometry():
    assert SMALL == (32, 32)
    assert LARGE == (32, 128)


def test_constant_image_gives_constant_patches():
    img = np.full((60, 80), 0.4, np.float32)
    s, l = extract_patch_pairs(img, [[30, 40], [0, 0], [59, 79]])
    assert s.shape == l.shape == (3, 1024)
    np.testing.assert_allclose(s, 0.4)
    np.testing.assert_allclose(l, 0.4, rtol=1e-6)


def test_horizontal_ramp_box_average():
    img = np.tile(np.arange(128, dtype=np.float32) / 255, (40, 1))
    pair = extract_patch_pair(img, (20, 64))
    expected = (np.arange(32) * 4 + 1.5) / 255
    for row in pair.large_ds:
        np.testing.assert_allclose(row, expected, rtol=1e-6)
    np.testing.assert_allclose(pair.small[0], np.arange(48, 80) / 255, rtol=1e-6)


def test_corner_center_uses_mirror_padding(rng):
    img = rng.random((40, 50)).astype(np.float32)
    pair = extract_patch_pair(img, (0, 0))
    assert 0 <= pair.small.min() and pair.small.max() <= 1
    # row 16 of the small patch is image row 0; row 15 mirrors it
    np.testing.assert_array_equal(pair.small[16, 16:], img[0, :16])
    np.testing.assert_array_equal(pair.small[15, 16:], img[0, :16])
    np.testing.assert_array_equal(pair.small[14, 16:], img[1, :16])


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(-10, 10), st.integers(-10, 10))
def test_translation_consistency(seed, dr, dc):
    rng = np.random.default_rng(seed)
    img = rng.random((120, 300)).astype(np.float32)
    r, c = 60, 150
    shifted = np.roll(img, (dr, dc), axis=(0, 1))
    a = extract_patch_pairs(img, [[r, c]])
    b = extract_patch_pairs(shifted, [[r + dr, c + dc]])
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def _small_encoder(rng):
    return CompositeEncoder(DdaeModel.init([1024, 16, 8], rng), DdaeModel.init([1024, 16, 8], rng),
                            DdaeModel.init([16, 6], rng))


def test_embed_dataset_matches_per_sample(rng):
    enc = _small_encoder(rng)
    img = rng.random((64, 96)).astype(np.float32)
    centers = rng.integers(0, [64, 96], size=(7, 2))
    s, l = extract_patch_pairs(img, centers)
    z = embed_dataset(enc, s, l, chunk=3)
    assert z.shape == (7, 6)
    for i, c in enumerate(centers):
        p = extract_patch_pair(img, c)
        np.testing.assert_allclose(z[i], enc.encode(p.small.reshape(-1), p.large_ds.reshape(-1)),
                                   rtol=1e-5, atol=1e-6)  # batched vs single-row f32 matmul
    perm = rng.permutation(7)
    np.testing.assert_allclose(embed_dataset(enc, s[perm], l[perm]), z[perm], rtol=1e-5, atol=1e-6)
    with pytest.raises(ShapeError):
        embed_dataset(enc, s, l[:3])


def test_pca_fixed_mode_dims_and_orthonormal(rng):
    x1 = rng.random((300, 1024))
    x2 = rng.random((300, 1024))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m = pca_fit([x1, x2])
    assert m.code_dim == 256
    for c in m.components:
        np.testing.assert_allclose(c @ c.T, np.eye(128), atol=1e-5)
    assert m.encode(x1[:5], x2[:5]).shape == (5, 256)


def test_pca_variance_mode_on_plane(rng):
    x = rng.normal(size=(200, 2)) @ rng.normal(size=(2, 1024)) + 0.3
    m = pca_fit([x, x], mode="variance-0.95")
    assert [len(c) for c in m.components] == [2, 2]


def test_pca_full_reconstruction_is_identity(rng):
    x = rng.random((80, 16))
    m = pca_fit([x, x], mode="fixed-128", n_fixed=16)
    y = m.project(0, x)
    np.testing.assert_allclose(m.reconstruct(0, y), x, atol=1e-5)


def test_pca_eigenvalues_match_svd_oracle(rng):
    x = rng.normal(size=(50, 16)) * np.linspace(0.2, 3, 16)
    m = pca_fit([x, x], mode="fixed-128", n_fixed=16)
    sv = np.linalg.svd(x - x.mean(axis=0), compute_uv=False)
    np.testing.assert_allclose(m.eigenvalues[0], sv ** 2 / 49, rtol=1e-5)
    # variance of projections along each component equals its eigenvalue
    np.testing.assert_allclose(m.project(0, x).var(axis=0, ddof=1), m.eigenvalues[0], rtol=1e-4)


def test_pca_rank_deficient_pads_with_warning(rng):
    x = rng.random((40, 64))
    with pytest.warns(UserWarning):
        m = pca_fit([x, x], n_fixed=128)
    assert m.code_dim == 256
    assert np.all(m.eigenvalues[0][64:] == 0)


def test_pca_embed_single_pair(rng):
    x = rng.random((100, 1024)).astype(np.float32)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m = pca_fit([x, x], n_fixed=8)
    img = rng.random((50, 70)).astype(np.float32)
    p = extract_patch_pair(img, (25, 35))
    s, l = extract_patch_pairs(img, [[25, 35]])
    np.testing.assert_allclose(pca_embed(m, p), m.encode(s, l)[0], rtol=1e-6)
    assert isinstance(m, PcaModel)
