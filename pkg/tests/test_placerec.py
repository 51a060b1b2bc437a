from __future__ import annotations

import numpy as np
import numpy.testing as npt
import pytest

from seqloc.errors import BadGeometry, SequenceTooShort
from seqloc.placerec import (PlacerecParams, contrast_enhance,
                             difference_matrix, match_experiences,
                             match_sequences, preprocess)


def frames(dataset, eid: int, count: int | None = None):
    imgs = [f.left for f in dataset.experience(eid).frames]
    return imgs if count is None else imgs[:count]


def test_preprocess_constant_image_is_zero():
    out = preprocess(np.full((48, 64), 37, dtype=np.uint8))
    npt.assert_array_equal(out, np.zeros((24, 32)))


def test_preprocess_affine_invariant(dataset):
    img = frames(dataset, 0)[30].astype(np.float64)
    a = preprocess(img)
    b = preprocess(img * 1.5 + 20.0)
    npt.assert_allclose(a, b, atol=1e-6)


def test_preprocess_patch_statistics(dataset):
    img = frames(dataset, 0)[30]
    out = preprocess(img, down_w=32, down_h=24, patch=8)
    small = img.astype(np.float64).reshape(24, 2, 32, 2).mean(axis=(1, 3))
    tiles = out.reshape(3, 8, 4, 8).transpose(0, 2, 1, 3).reshape(12, -1)
    raw = small.reshape(3, 8, 4, 8).transpose(0, 2, 1, 3).reshape(12, -1)
    nontrivial = 0
    for tile, src in zip(tiles, raw):
        assert abs(tile.mean()) < 1e-9
        if src.std() > 1e-3:
            assert abs(tile.std() - 1.0) < 1e-6
            nontrivial += 1
    assert nontrivial >= 4


def test_preprocess_rejects_bad_geometry():
    with pytest.raises(BadGeometry):
        preprocess(np.zeros((50, 64), dtype=np.uint8))
    with pytest.raises(BadGeometry):
        preprocess(np.zeros((48, 64), dtype=np.uint8), patch=5)
    with pytest.raises(BadGeometry):
        preprocess(np.zeros((48, 64, 3), dtype=np.uint8))


def test_difference_matrix_self_diagonal(dataset):
    imgs = frames(dataset, 0, 20)
    D = difference_matrix(imgs, imgs)
    assert D.shape == (20, 20)
    assert np.all(D >= 0.0) and np.all(np.isfinite(D))
    npt.assert_array_equal(np.argmin(D, axis=1), np.arange(20))


def test_difference_matrix_gain_keeps_diagonal(dataset):
    imgs = frames(dataset, 0, 20)
    brighter = [im.astype(np.float64) * 1.3 for im in imgs]
    D = difference_matrix(imgs, brighter)
    hits = np.mean(np.argmin(D, axis=1) == np.arange(20))
    assert hits >= 0.95


def test_difference_matrix_entry_symmetry(dataset):
    a = frames(dataset, 0, 10)
    b = frames(dataset, 1, 12)
    D_ab = difference_matrix(a, b)
    D_ba = difference_matrix(b, a)
    npt.assert_allclose(D_ab, D_ba.T, atol=1e-9)


def test_contrast_enhance_constant_matrix():
    out = contrast_enhance(np.full((30, 25), 4.2))
    npt.assert_allclose(out, np.zeros((30, 25)), atol=1e-9)


def test_contrast_enhance_shift_invariant(dataset):
    D = difference_matrix(frames(dataset, 0, 15), frames(dataset, 1, 15))
    npt.assert_allclose(contrast_enhance(D), contrast_enhance(D + 7.3),
                        atol=1e-9)


def test_contrast_enhance_amplifies_spike():
    D = np.ones((30, 8))
    D[10, 3] = 2.0
    out = contrast_enhance(D, window_r=5)
    assert out[10, 3] == out.max()
    assert out[10, 3] > 2.5
    off_col = np.delete(out, 3, axis=1)
    assert np.all(np.abs(off_col) < 1e-9)


def test_match_sequences_identity_matrix():
    D = 1.0 - np.eye(30)
    raw = match_sequences(D)
    npt.assert_array_equal(raw.ref_frames, np.arange(30))
    assert np.all(np.isfinite(raw.scores))


def test_match_sequences_rejects_short_query():
    with pytest.raises(SequenceTooShort):
        match_sequences(np.ones((5, 30)))
    with pytest.raises(SequenceTooShort):
        match_sequences(np.ones((30, 30)), PlacerecParams(seq_len=4))


def test_self_match_is_identity_on_interior(dataset):
    imgs = frames(dataset, 2)
    raw = match_experiences(imgs, imgs)
    assert len(raw) == len(imgs)
    half = PlacerecParams().seq_len // 2
    interior = slice(half, len(imgs) - half)
    npt.assert_array_equal(raw.ref_frames[interior],
                           np.arange(len(imgs))[interior])


def test_matches_invariant_to_brightness(dataset):
    q = frames(dataset, 0, 30)
    r = frames(dataset, 1, 30)
    base = match_experiences(q, r)
    warped = match_experiences([im * 0.6 + 12.0 for im in np.asarray(q, dtype=np.float64)],
                               [im * 0.6 + 12.0 for im in np.asarray(r, dtype=np.float64)])
    npt.assert_array_equal(base.ref_frames, warped.ref_frames)
    npt.assert_allclose(base.scores, warped.scores, atol=1e-6)


def test_reversed_reference_scores_worse(dataset):
    D = difference_matrix(frames(dataset, 0), frames(dataset, 1))
    fwd = match_sequences(D)
    rev = match_sequences(D[:, ::-1])
    assert rev.scores.mean() > fwd.scores.mean()
