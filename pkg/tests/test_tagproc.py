import math

import numpy as np
import pytest

from conftest import make_tag_stream
from fiberqkd.tagproc import (
    Coincidences,
    ModeFilterWarning,
    NoCorrelationPeakError,
    correlation_histogram,
    estimate_visibility_and_qber,
    find_offset,
    match_coincidences,
    read_coincidences,
    temporal_mode_filter,
    write_coincidences,
)


def _poisson_times(rng, rate_cps, duration_s=1.0):
    n = rng.poisson(rate_cps * duration_s)
    return np.sort(rng.integers(0, int(duration_s * 1e12), size=n, dtype=np.int64))


def _records(delta, det_a=None, det_b=None):
    delta = np.asarray(delta, dtype=np.int64)
    n = delta.size
    if det_a is None:
        det_a = np.zeros(n, dtype=np.int8)
    if det_b is None:
        det_b = np.zeros(n, dtype=np.int8)
    times_a = np.arange(n, dtype=np.int64) * 1_000_000
    return Coincidences(
        times_a=times_a,
        times_b=times_a + delta,
        det_a=np.asarray(det_a, dtype=np.int8),
        det_b=np.asarray(det_b, dtype=np.int8),
        delta=delta,
        idx_a=np.arange(n, dtype=np.int64),
        idx_b=np.arange(n, dtype=np.int64),
        offset_ps=0,
    )


def test_histogram_counts_all_pairings(rng):
    # Total histogram mass equals a brute-force count of in-range pairings.
    ta = _poisson_times(rng, 2_000, 0.001)
    tb = _poisson_times(rng, 2_000, 0.001)
    span, width = 100_000, 200
    hist = correlation_histogram(
        make_tag_stream(ta), make_tag_stream(tb), span, width
    )
    lo = hist.origin_ps
    hi = hist.origin_ps + hist.counts.size * width
    brute = sum(
        1 for a in ta.tolist() for b in tb.tolist() if lo <= b - a < hi
    )
    assert hist.total() == brute


def test_find_offset_exact_for_shifted_stream(rng):
    times = _poisson_times(rng, 50_000)
    tags_a = make_tag_stream(times)
    tags_b = make_tag_stream(times + 5_000_000)
    assert find_offset(tags_a, tags_b) == 5_000_000


def test_find_offset_with_jitter_near_truth(rng):
    # Gaussian jitter sigma 500 ps on both sides, 200 ps bins: the peak of
    # the convolved distribution stays within 600 ps of the true offset.
    times = _poisson_times(rng, 50_000)
    jit_a = np.rint(rng.normal(0, 500, times.size)).astype(np.int64)
    jit_b = np.rint(rng.normal(0, 500, times.size)).astype(np.int64)
    tags_a = make_tag_stream(times + jit_a)
    tags_b = make_tag_stream(times + 5_000_000 + jit_b)
    offset = find_offset(tags_a, tags_b)
    assert abs(offset - 5_000_000) <= 600
    # Brute-force scan oracle: argmax over an independent difference
    # histogram around the truth agrees with the returned bin center.
    diffs = []
    tb = tags_b.times_ps
    for t in tags_a.times_ps[:20_000].tolist():
        lo = np.searchsorted(tb, t + 5_000_000 - 10_000)
        hi = np.searchsorted(tb, t + 5_000_000 + 10_000)
        diffs.extend((tb[lo:hi] - t).tolist())
    centers = np.arange(5_000_000 - 10_000, 5_000_000 + 10_001, 200)
    counts = [
        int(np.sum(np.abs(np.asarray(diffs) - c) <= 100)) for c in centers.tolist()
    ]
    brute_peak = centers[int(np.argmax(counts))]
    assert abs(offset - brute_peak) <= 200


def test_find_offset_unrelated_streams_raise(rng):
    tags_a = make_tag_stream(_poisson_times(rng, 10_000))
    tags_b = make_tag_stream(_poisson_times(rng, 10_000))
    with pytest.raises(NoCorrelationPeakError):
        find_offset(tags_a, tags_b)


def test_find_offset_empty_stream_raises(rng):
    tags = make_tag_stream(_poisson_times(rng, 1_000))
    with pytest.raises(ValueError):
        find_offset(make_tag_stream([]), tags)


def test_find_offset_shift_equivariance(rng):
    times = _poisson_times(rng, 30_000)
    tags_a = make_tag_stream(times)
    base = find_offset(tags_a, tags_a)
    for shift in (-2_000_000, -200, 200, 7_400, 3_141_800):
        shifted = make_tag_stream(times + shift)
        assert find_offset(tags_a, shifted) == base + shift


def test_match_disjoint_ranges_empty(rng):
    tags_a = make_tag_stream(np.arange(100, dtype=np.int64) * 1000)
    tags_b = make_tag_stream(np.arange(100, dtype=np.int64) * 1000 + 10_000_000)
    assert len(match_coincidences(tags_a, tags_b, 0, 2000)) == 0


def test_match_aligned_streams_all_matched():
    times = np.arange(1_000, dtype=np.int64) * 100_000
    tags = make_tag_stream(times)
    records = match_coincidences(tags, tags, 0, 2000)
    assert len(records) == 1_000
    assert np.all(records.delta == 0)


def _match_oracle(ta, tb, offset, window):
    """Greedy earliest-first matching, written as an explicit scan over
    unused partners (independent of the two-pointer implementation)."""
    used = np.zeros(len(tb), dtype=bool)
    pairs = []
    start = 0
    for i, t in enumerate(ta):
        for j in range(start, len(tb)):
            if used[j]:
                continue
            doubled = 2 * (tb[j] - t - offset)
            if doubled < -window:
                start = j + 1
                continue
            if doubled > window:
                break
            used[j] = True
            pairs.append((i, j))
            break
    return pairs


def test_match_equals_oracle_on_random_instances(rng):
    for _ in range(100):
        na, nb = rng.integers(0, 60, size=2)
        ta = np.sort(rng.integers(0, 500, size=na, dtype=np.int64))
        tb = np.sort(rng.integers(0, 500, size=nb, dtype=np.int64))
        offset = int(rng.integers(-40, 40))
        window = int(rng.integers(0, 120))
        records = match_coincidences(make_tag_stream(ta), make_tag_stream(tb), offset, window)
        expected = _match_oracle(ta.tolist(), tb.tolist(), offset, window)
        assert list(zip(records.idx_a.tolist(), records.idx_b.tolist())) == expected


def test_match_equals_oracle_large_instance(rng):
    n = 10_000
    ta = np.sort(rng.integers(0, 10_000_000_000, size=n, dtype=np.int64))
    tb = np.sort(ta + rng.normal(0, 700, size=n).astype(np.int64))
    extra = np.sort(rng.integers(0, 10_000_000_000, size=n // 2, dtype=np.int64))
    tb = np.sort(np.concatenate([tb, extra]))
    records = match_coincidences(make_tag_stream(ta), make_tag_stream(tb), 0, 2000)
    expected = _match_oracle(ta.tolist(), tb.tolist(), 0, 2000)
    assert list(zip(records.idx_a.tolist(), records.idx_b.tolist())) == expected


def test_match_injective(rng):
    ta = np.sort(rng.integers(0, 2_000, size=500, dtype=np.int64))
    tb = np.sort(rng.integers(0, 2_000, size=500, dtype=np.int64))
    records = match_coincidences(make_tag_stream(ta), make_tag_stream(tb), 0, 400)
    assert np.unique(records.idx_a).size == len(records)
    assert np.unique(records.idx_b).size == len(records)


def test_match_capture_fraction_matches_erf(rng):
    # Correlated pairs with 500 ps jitter per side: a 2 ns window captures
    # erf(1) of them (the delta spread is sqrt(2)*500 ps).
    n = 10_000
    base = np.sort(rng.integers(0, int(1e12), size=n, dtype=np.int64))
    ta = base + np.rint(rng.normal(0, 500, n)).astype(np.int64)
    tb = base + np.rint(rng.normal(0, 500, n)).astype(np.int64)
    records = match_coincidences(
        make_tag_stream(ta).sorted_by_time(), make_tag_stream(tb).sorted_by_time(), 0, 2000
    )
    capture = math.erf(1.0)
    sigma = math.sqrt(n * capture * (1 - capture))
    assert abs(len(records) - capture * n) < 4 * sigma


def test_match_rejects_unsorted():
    from fiberqkd.receiver import TagStream

    bad = TagStream(
        times_ps=np.array([5, 1], dtype=np.int64),
        detectors=np.zeros(2, dtype=np.int8),
        origins=np.zeros(2, dtype=np.int8),
        pair_ids=np.full(2, -1, dtype=np.int64),
        modes=np.full(2, -1, dtype=np.int8),
    )
    good = make_tag_stream([1, 5])
    with pytest.raises(ValueError):
        match_coincidences(bad, good, 0, 100)


def test_mode_filter_identity_on_prompt_records():
    records = _records(np.zeros(100, dtype=np.int64))
    kept = temporal_mode_filter(records, mode_delay_ps=4400, reject_half_width_ps=1000)
    assert len(kept) == 100


def test_mode_filter_removes_delayed_records():
    # 2 km arms delay the second mode by 4400 ps, well past the 1000 ps
    # retained half-width.
    delta = np.concatenate(
        [np.zeros(50, dtype=np.int64), np.full(30, 4400), np.full(20, -4400)]
    )
    records = _records(delta)
    kept = temporal_mode_filter(records, mode_delay_ps=4400, reject_half_width_ps=1000)
    assert len(kept) == 50
    assert np.all(np.abs(kept.delta) <= 1000)


def test_mode_filter_warns_when_modes_overlap():
    records = _records(np.zeros(10, dtype=np.int64))
    with pytest.warns(ModeFilterWarning):
        temporal_mode_filter(records, mode_delay_ps=550, reject_half_width_ps=1000)


def test_mode_filter_subset_and_idempotent(rng):
    delta = rng.integers(-6_000, 6_000, size=5_000).astype(np.int64)
    records = _records(delta)
    once = temporal_mode_filter(records, 4400, 1000)
    twice = temporal_mode_filter(once, 4400, 1000)
    assert len(once) <= len(records)
    assert np.array_equal(once.delta, twice.delta)
    assert np.isin(once.idx_a, records.idx_a).all()


def test_mode_filter_requires_positive_delay():
    with pytest.raises(ValueError):
        temporal_mode_filter(_records([0]), mode_delay_ps=0)


def test_visibility_all_concordant():
    records = _records(np.zeros(100), det_a=np.zeros(100), det_b=np.zeros(100))
    visibility, qber, n = estimate_visibility_and_qber(records)
    assert (visibility, qber, n) == (1.0, 0.0, 100)


def test_visibility_error_population(rng):
    # 2.5% discordant matched-basis records give visibility 0.95.
    n = 40_000
    errors = rng.random(n) < 0.025
    det_a = np.zeros(n, dtype=np.int8)
    det_b = errors.astype(np.int8)  # same basis, flipped bit on error
    visibility, qber, count = estimate_visibility_and_qber(_records(np.zeros(n), det_a, det_b))
    sigma = math.sqrt(0.025 * 0.975 / n)
    assert count == n
    assert abs(qber - 0.025) < 4 * sigma
    assert abs(visibility - 0.95) < 8 * sigma


def test_visibility_depolarized_limit(rng):
    n = 40_000
    det_a = rng.integers(0, 2, size=n).astype(np.int8)
    det_b = rng.integers(0, 2, size=n).astype(np.int8)
    visibility, qber, _ = estimate_visibility_and_qber(_records(np.zeros(n), det_a, det_b))
    sigma = math.sqrt(0.25 / n)
    assert abs(qber - 0.5) < 4 * sigma
    assert abs(visibility) < 8 * sigma


def test_visibility_excludes_mismatched_bases():
    # Rows: concordant, discordant, basis mismatch (ignored), concordant.
    det_a = np.array([0, 0, 2, 2], dtype=np.int8)
    det_b = np.array([0, 1, 1, 2], dtype=np.int8)
    visibility, qber, n = estimate_visibility_and_qber(_records(np.zeros(4), det_a, det_b))
    assert n == 3
    assert qber == pytest.approx(1 / 3)
    assert visibility == pytest.approx(1 / 3)


def test_visibility_requires_matched_records():
    records = _records([0, 0], det_a=[0, 1], det_b=[2, 3])
    with pytest.raises(ValueError):
        estimate_visibility_and_qber(records)


def test_filtered_visibility_never_below_unfiltered(rng):
    # Mixed population: correlated records near zero delay plus depolarized
    # ones at the mode delay; filtering must not lower the visibility.
    n_good, n_bad = 12_000, 6_000
    delta = np.concatenate(
        [
            np.rint(rng.normal(0, 707, n_good)).astype(np.int64),
            np.rint(rng.normal(4400, 707, n_bad)).astype(np.int64),
        ]
    )
    det_a = np.zeros(n_good + n_bad, dtype=np.int8)
    det_b = np.concatenate(
        [
            (rng.random(n_good) < 0.025).astype(np.int8),
            rng.integers(0, 2, size=n_bad).astype(np.int8),
        ]
    )
    records = _records(delta, det_a, det_b)
    v_unfiltered, _, n_unf = estimate_visibility_and_qber(records)
    filtered = temporal_mode_filter(records, 4400, 1000)
    v_filtered, _, _ = estimate_visibility_and_qber(filtered)
    assert n_unf >= 10_000
    assert v_filtered >= v_unfiltered


def test_reanalysis_from_text_dump(tmp_path, rng):
    # Tag streams written by the receiver re-enter the processing chain.
    from fiberqkd.receiver import read_tags, write_tags

    base = np.sort(rng.integers(0, int(1e12), size=20_000, dtype=np.int64))
    tags_a = make_tag_stream(base + np.rint(rng.normal(0, 500, base.size)).astype(np.int64))
    tags_b = make_tag_stream(
        base + 123_400 + np.rint(rng.normal(0, 500, base.size)).astype(np.int64)
    )
    write_tags(tags_a, tmp_path / "a.txt")
    write_tags(tags_b, tmp_path / "b.txt")
    loaded_a = read_tags(tmp_path / "a.txt")
    loaded_b = read_tags(tmp_path / "b.txt")
    offset = find_offset(loaded_a, loaded_b)
    assert abs(offset - 123_400) <= 600
    records = match_coincidences(loaded_a, loaded_b, offset, 2000)
    assert len(records) > 0.7 * base.size


def test_coincidence_csv_roundtrip(tmp_path, rng):
    delta = rng.integers(-1000, 1000, size=200).astype(np.int64)
    det_a = rng.integers(0, 4, size=200).astype(np.int8)
    det_b = rng.integers(0, 4, size=200).astype(np.int8)
    records = _records(delta, det_a, det_b)
    path = tmp_path / "coincidences.csv"
    write_coincidences(records, path)
    loaded = read_coincidences(path)
    assert np.array_equal(loaded.times_a, records.times_a)
    assert np.array_equal(loaded.times_b, records.times_b)
    assert np.array_equal(loaded.det_a, records.det_a)
    assert np.array_equal(loaded.det_b, records.det_b)
    assert np.array_equal(loaded.delta, records.delta)
    first_line = path.read_text().splitlines()[0]
    assert first_line == "time_a_ps,time_b_ps,det_a,det_b,delta_ps"
