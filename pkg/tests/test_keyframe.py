import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kmm.errors import KMMError
from kmm.keyframe import (
    DEFAULT_RATIO,
    DensityStats,
    build_mask,
    density_stats,
    key_frames,
    mask_document,
    mask_from_document,
    n_selected,
    pairwise_distances,
    select_key_frames,
)
from kmm.seqdata import EmbeddingSequence
from oracles import brute_density_peaks, brute_key_frames

MICRO = EmbeddingSequence([[0.0], [1.0], [10.0]])

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False, width=32)
token_matrices = st.integers(1, 12).flatmap(
    lambda n: st.integers(1, 4).flatmap(lambda l: arrays(np.float64, (n, l), elements=finite))
)


def test_three_four_five():
    d = pairwise_distances(EmbeddingSequence([[3.0, 4.0], [0.0, 0.0]]))
    assert d.tolist() == [[0.0, 5.0], [5.0, 0.0]]


def test_single_token_distance():
    assert pairwise_distances(EmbeddingSequence([[2.5, -1.0]])).tolist() == [[0.0]]


def test_micro_distances():
    assert pairwise_distances(MICRO).tolist() == [[0, 1, 10], [1, 0, 9], [10, 9, 0]]


def test_micro_density_stats():
    stats = density_stats(MICRO)
    e = math.exp
    expected_density = [1 + e(-1) + e(-100), 1 + e(-1) + e(-81), 1 + e(-100) + e(-81)]
    np.testing.assert_allclose(stats.density, expected_density, rtol=0, atol=1e-12)
    np.testing.assert_allclose(stats.density, [1.3679, 1.3679, 1.0], atol=5e-5)
    assert stats.delta.tolist() == [1.0, 10.0, 9.0]
    np.testing.assert_allclose(stats.gamma, [1.3679, 13.679, 9.0], atol=5e-4)
    # the two leading densities differ only below float64 resolution
    assert list(stats.density_rank) == [1, 0, 2]


def test_micro_matches_mpmath():
    _, dens, delta, gamma = brute_density_peaks(MICRO.tokens)
    stats = density_stats(MICRO)
    np.testing.assert_allclose(stats.density, [float(v) for v in dens], rtol=0, atol=1e-12)
    np.testing.assert_allclose(stats.delta, [float(v) for v in delta], rtol=0, atol=1e-12)
    np.testing.assert_allclose(stats.gamma, [float(v) for v in gamma], rtol=0, atol=1e-9)


def test_micro_selection():
    _, mask = key_frames(MICRO, 0.30)
    assert mask.selected == (1,)
    assert mask.mask_bits.tolist() == [False, True, False]


def test_single_token_stats():
    stats = density_stats(EmbeddingSequence([[7.0, 1.0]]))
    assert stats.density.tolist() == [1.0]
    assert stats.delta.tolist() == [0.0]
    assert stats.gamma.tolist() == [0.0]


def test_identical_pair_is_exact_tie():
    stats = density_stats(EmbeddingSequence([[1.5, 2.0], [1.5, 2.0]]))
    assert stats.density.tolist() == [2.0, 2.0]
    assert stats.delta.tolist() == [0.0, 0.0]
    assert stats.gamma.tolist() == [0.0, 0.0]


def test_all_identical_selects_lowest_indices():
    seq = EmbeddingSequence(np.ones((10, 3)))
    _, mask = key_frames(seq, 0.3)
    assert mask.selected == (0, 1, 2)


def test_gamma_tie_broken_by_index():
    stats = DensityStats(
        distances=np.zeros((3, 3)),
        density=np.array([2.0, 2.0, 2.0]),
        delta=np.array([2.5, 2.5, 0.5]),
        gamma=np.array([5.0, 5.0, 1.0]),
    )
    # ceil(0.33 * 3) = 1
    assert select_key_frames(stats, 0.33).selected == (0,)
    assert select_key_frames(stats, 0.6).selected == (0, 1)


def test_gamma_tie_broken_by_density_first():
    stats = DensityStats(
        distances=np.zeros((3, 3)),
        density=np.array([2.0, 4.0, 1.0]),
        delta=np.array([2.5, 1.25, 1.0]),
        gamma=np.array([5.0, 5.0, 1.0]),
    )
    assert select_key_frames(stats, 0.33).selected == (1,)


def test_full_and_empty_ratio():
    seq = EmbeddingSequence(np.random.default_rng(0).normal(size=(9, 2))).padded(3)
    stats = density_stats(seq)
    assert select_key_frames(stats, 1.0).selected == tuple(range(9))
    assert select_key_frames(stats, 0.0).selected == ()


def test_default_ratio_cardinality():
    assert DEFAULT_RATIO == 0.30
    for n in (1, 2, 3, 7, 10, 100, 512):
        assert n_selected(DEFAULT_RATIO, n) == math.ceil(3 * n / 10)


def test_ratio_out_of_range():
    with pytest.raises(KMMError):
        n_selected(1.5, 4)


def test_bandwidth_must_be_positive():
    with pytest.raises(KMMError):
        density_stats(MICRO, 0.0)


def test_build_mask_examples():
    assert build_mask([], 4).mask_bits.tolist() == [False] * 4
    assert build_mask({1, 3}, 5, 0).mask_bits.tolist() == [False, True, False, True, False]
    padded = build_mask([0, 2], 6, pad_len=2)
    assert padded.mask_bits.tolist() == [True, False, True, False, False, False]


def test_build_mask_rejects_padding_index():
    with pytest.raises(KMMError):
        build_mask([4], 6, pad_len=2)
    with pytest.raises(KMMError):
        build_mask([-1], 3)


@given(st.sets(st.integers(0, 30)), st.integers(0, 10))
def test_popcount_equals_selection(chosen, pad):
    n = 31 + pad
    mask = build_mask(chosen, n, pad)
    assert int(mask.mask_bits.sum()) == len(chosen)
    assert not mask.mask_bits[n - pad :].any()


def test_mask_document_round_trip():
    stats, mask = key_frames(MICRO.padded(2), 0.5)
    doc = mask_document(stats, mask)
    assert set(doc) == {"n", "pad_len", "ratio", "selected", "gamma", "density", "delta"}
    again = mask_from_document(doc)
    assert again.selected == mask.selected
    assert again.mask_bits.tolist() == mask.mask_bits.tolist()


@given(token_matrices)
def test_distance_matrix_shape_symmetry(x):
    d = pairwise_distances(EmbeddingSequence(x))
    assert np.array_equal(d, d.T)
    assert np.all(np.diag(d) == 0)
    assert np.all(d >= 0)


@given(token_matrices, st.sampled_from([0.15, 0.3, 0.5, 1.0]))
def test_stats_invariants(x, ratio):
    seq = EmbeddingSequence(x)
    stats, mask = key_frames(seq, ratio)
    assert np.all(stats.density >= 1)
    assert np.all(stats.delta >= 0)
    assert np.array_equal(stats.gamma, stats.density * stats.delta)
    assert len(mask.selected) == math.ceil(round(ratio * len(x), 9))
    assert mask.selected == tuple(sorted(mask.selected))


@settings(max_examples=60, deadline=None)
@given(token_matrices, st.sampled_from([0.15, 0.3, 0.5]))
def test_matches_brute_force(x, ratio):
    _, mask = key_frames(EmbeddingSequence(x), ratio)
    assert list(mask.selected) == brute_key_frames(x, ratio)


@settings(deadline=None)
@given(token_matrices, st.integers(1, 5), st.floats(-3, 3, width=32))
def test_padding_never_changes_active_results(x, pad, fill):
    seq = EmbeddingSequence(x)
    base_stats, base_mask = key_frames(seq, 0.4)
    stats, mask = key_frames(seq.padded(pad, fill), 0.4)
    for name in ("distances", "density", "delta", "gamma"):
        assert np.array_equal(getattr(stats, name), getattr(base_stats, name))
    assert mask.selected == base_mask.selected
    assert not mask.mask_bits[len(x) :].any()


@given(token_matrices, st.randoms(use_true_random=False))
def test_permutation_equivariance(x, rnd):
    perm = list(range(len(x)))
    rnd.shuffle(perm)
    perm = np.array(perm)
    base = density_stats(EmbeddingSequence(x))
    moved = density_stats(EmbeddingSequence(x[perm]))
    np.testing.assert_allclose(moved.density, base.density[perm], rtol=1e-12)
    np.testing.assert_allclose(moved.delta, base.delta[perm], rtol=1e-12)
    assert sorted(moved.gamma.tolist()) == pytest.approx(sorted(base.gamma.tolist()), rel=1e-12)
    gamma = base.gamma
    if len(np.unique(gamma)) == len(gamma) and np.min(np.diff(np.sort(gamma)), initial=1) > 1e-9:
        k = n_selected(0.3, len(x))
        base_sel = set(select_key_frames(base, 0.3).selected)
        moved_sel = set(select_key_frames(moved, 0.3).selected)
        assert {int(perm[i]) for i in moved_sel} == base_sel
        assert len(moved_sel) == k


@pytest.mark.parametrize("scale", [0.1, 1.0, 10.0])
def test_brute_force_at_several_scales(scale):
    x = np.random.default_rng(3).normal(size=(20, 3)) * scale
    _, mask = key_frames(EmbeddingSequence(x), 0.3)
    assert list(mask.selected) == brute_key_frames(x, 0.3)


def test_duplicates_match_brute_force():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(12, 2))
    x[5] = x[2]
    x[9] = x[2]
    x[7] = x[0]
    for ratio in (0.15, 0.3, 0.5):
        _, mask = key_frames(EmbeddingSequence(x), ratio)
        assert list(mask.selected) == brute_key_frames(x, ratio)


def test_padding_excluded_from_distances():
    seq = MICRO.padded(2, fill=1e6)
    assert pairwise_distances(seq).shape == (3, 3)
