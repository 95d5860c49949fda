"""Timetag post-processing: clock-offset recovery, coincidence matching,
arrival-time mode filtering, and visibility/QBER estimation.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .receiver import TagStream

DEFAULT_SEARCH_SPAN_PS = 50_000_000  # +-50 us
DEFAULT_BIN_WIDTH_PS = 200
DEFAULT_COINCIDENCE_WINDOW_PS = 2000  # full width
DEFAULT_REJECT_HALF_WIDTH_PS = 1000
PEAK_SIGNIFICANCE = 5.0

# Offset recovery needs only enough source tags for a clear peak; capping
# them keeps the pairing histogram cheap on multi-megatag streams.
DEFAULT_MAX_SOURCE_TAGS = 1_000_000
_PAIRING_CHUNK = 1 << 22


class NoCorrelationPeakError(RuntimeError):
    """The A-B pairing histogram has no bin above the accidental floor."""


class ModeFilterWarning(UserWarning):
    """The mode delay is inside the retained window; filtering cannot
    separate the delayed mode from the prompt one."""


@dataclass(eq=False)
class CorrelationHistogram:
    """Histogram of B-minus-A time differences.

    Bin k covers [origin + k*w, origin + (k+1)*w); bin centers sit on
    integer multiples of the bin width, so an exact shift of one stream
    lands on a bin center.
    """

    bin_width_ps: int
    origin_ps: int
    counts: np.ndarray

    @property
    def centers_ps(self) -> np.ndarray:
        half = self.bin_width_ps // 2
        return (
            self.origin_ps + half
            + self.bin_width_ps * np.arange(self.counts.size, dtype=np.int64)
        )

    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(eq=False)
class Coincidences:
    """Matched A/B detection pairs. ``delta`` is time_b - time_a - offset;
    ``idx_a``/``idx_b`` index into the source tag streams."""

    times_a: np.ndarray
    times_b: np.ndarray
    det_a: np.ndarray
    det_b: np.ndarray
    delta: np.ndarray
    idx_a: np.ndarray
    idx_b: np.ndarray
    offset_ps: int

    def __len__(self) -> int:
        return int(self.delta.size)

    def take(self, index) -> "Coincidences":
        return Coincidences(
            times_a=self.times_a[index],
            times_b=self.times_b[index],
            det_a=self.det_a[index],
            det_b=self.det_b[index],
            delta=self.delta[index],
            idx_a=self.idx_a[index],
            idx_b=self.idx_b[index],
            offset_ps=self.offset_ps,
        )


def correlation_histogram(
    tags_a: TagStream,
    tags_b: TagStream,
    search_span_ps: int = DEFAULT_SEARCH_SPAN_PS,
    bin_width_ps: int = DEFAULT_BIN_WIDTH_PS,
    max_source_tags: int = DEFAULT_MAX_SOURCE_TAGS,
) -> CorrelationHistogram:
    """Count A-B tag pairings per time-difference bin over +-search_span.

    Uses the earliest ``max_source_tags`` A tags against the full B stream.
    """
    if len(tags_a) == 0 or len(tags_b) == 0:
        raise ValueError("cannot correlate empty tag streams")
    if bin_width_ps <= 0 or search_span_ps <= 0:
        raise ValueError("search_span_ps and bin_width_ps must be > 0")
    w = int(bin_width_ps)
    n_half = -(-int(search_span_ps) // w)  # ceil: bins out to at least the span
    n_bins = 2 * n_half + 1
    origin = -n_half * w - w // 2
    lo_edge = origin
    hi_edge = origin + n_bins * w

    ta = tags_a.times_ps[: int(max_source_tags)]
    tb = tags_b.times_ps
    counts = np.zeros(n_bins, dtype=np.int64)
    start = 0
    while start < ta.size:
        chunk = ta[start : start + _PAIRING_CHUNK // 8]
        left = np.searchsorted(tb, chunk + lo_edge, side="left")
        right = np.searchsorted(tb, chunk + hi_edge, side="left")
        per_a = right - left
        total = int(per_a.sum())
        if total:
            # Flat indices of every (a, b) pairing in range.
            starts = np.concatenate(([0], np.cumsum(per_a)[:-1]))
            flat = np.arange(total, dtype=np.int64)
            flat += np.repeat(left - starts, per_a)
            diffs = tb[flat] - np.repeat(chunk, per_a)
            bins = (diffs - origin) // w
            np.add.at(counts, bins, 1)
        start += chunk.size
    return CorrelationHistogram(bin_width_ps=w, origin_ps=origin, counts=counts)


def find_offset(
    tags_a: TagStream,
    tags_b: TagStream,
    search_span_ps: int = DEFAULT_SEARCH_SPAN_PS,
    bin_width_ps: int = DEFAULT_BIN_WIDTH_PS,
    max_source_tags: int = DEFAULT_MAX_SOURCE_TAGS,
) -> int:
    """Recover the B-minus-A clock offset from the pairing histogram peak.

    Returns the center of the bin with the most pairings, ties broken
    toward the smallest absolute offset. Raises NoCorrelationPeakError when
    no bin clears the accidental floor by 5 sigma.
    """
    hist = correlation_histogram(
        tags_a, tags_b, search_span_ps, bin_width_ps, max_source_tags
    )
    counts = hist.counts
    floor = float(np.median(counts))
    sigma = max(floor, 1.0) ** 0.5
    peak = int(counts.max())
    if peak < floor + PEAK_SIGNIFICANCE * sigma:
        raise NoCorrelationPeakError(
            f"no correlation peak: max bin {peak} vs floor {floor:.1f} "
            f"(needs {PEAK_SIGNIFICANCE} sigma)"
        )
    candidates = np.flatnonzero(counts == peak)
    centers = hist.centers_ps[candidates]
    best = centers[np.lexsort((centers, np.abs(centers)))[0]]
    return int(best)


def match_coincidences(
    tags_a: TagStream,
    tags_b: TagStream,
    offset_ps: int,
    window_ps: int = DEFAULT_COINCIDENCE_WINDOW_PS,
) -> Coincidences:
    """Greedily pair tags with |time_b - time_a - offset| <= window/2.

    Two-pointer scan: earlier tags are matched first and every tag is used
    at most once. ``window_ps`` is the full window width.
    """
    if window_ps < 0:
        raise ValueError(f"window_ps must be >= 0, got {window_ps}")
    if not tags_a.is_sorted() or not tags_b.is_sorted():
        raise ValueError("tag streams must be sorted by time")
    ta = tags_a.times_ps.tolist()
    tb = tags_b.times_ps.tolist()
    offset = int(offset_ps)
    window = int(window_ps)
    idx_a: list[int] = []
    idx_b: list[int] = []
    i = j = 0
    na, nb = len(ta), len(tb)
    while i < na and j < nb:
        doubled = 2 * (tb[j] - ta[i] - offset)
        if doubled < -window:
            j += 1
        elif doubled > window:
            i += 1
        else:
            idx_a.append(i)
            idx_b.append(j)
            i += 1
            j += 1
    ia = np.asarray(idx_a, dtype=np.int64)
    ib = np.asarray(idx_b, dtype=np.int64)
    times_a = tags_a.times_ps[ia]
    times_b = tags_b.times_ps[ib]
    return Coincidences(
        times_a=times_a,
        times_b=times_b,
        det_a=tags_a.detectors[ia],
        det_b=tags_b.detectors[ib],
        delta=times_b - times_a - offset,
        idx_a=ia,
        idx_b=ib,
        offset_ps=offset,
    )


def temporal_mode_filter(
    records: Coincidences,
    mode_delay_ps: int,
    reject_half_width_ps: int = DEFAULT_REJECT_HALF_WIDTH_PS,
) -> Coincidences:
    """Keep only records with |delta| <= reject_half_width_ps.

    Records involving a second-order-mode photon sit at +-mode_delay, so
    retaining the central window removes them whenever the delay exceeds
    the half width; otherwise the two populations overlap and a
    ModeFilterWarning is issued.
    """
    if mode_delay_ps <= 0:
        raise ValueError(f"mode_delay_ps must be > 0, got {mode_delay_ps}")
    if reject_half_width_ps < 0:
        raise ValueError(
            f"reject_half_width_ps must be >= 0, got {reject_half_width_ps}"
        )
    if mode_delay_ps <= reject_half_width_ps:
        warnings.warn(
            f"mode delay {mode_delay_ps} ps is within the retained window "
            f"(+-{reject_half_width_ps} ps); second-order-mode records "
            "cannot be separated",
            ModeFilterWarning,
            stacklevel=2,
        )
    keep = np.abs(records.delta) <= reject_half_width_ps
    return records.take(keep)


def estimate_visibility_and_qber(records: Coincidences) -> tuple[float, float, int]:
    """Estimate (visibility, qber, matched_basis_count) from coincidences.

    Only matched-basis records enter the estimate: qber is the discordant
    fraction and visibility is 1 - 2*qber.
    """
    basis_a = records.det_a >> 1
    basis_b = records.det_b >> 1
    matched = basis_a == basis_b
    n_matched = int(matched.sum())
    if n_matched == 0:
        raise ValueError("no matched-basis records to estimate from")
    discordant = (records.det_a & 1) != (records.det_b & 1)
    qber = float((matched & discordant).sum()) / n_matched
    return 1.0 - 2.0 * qber, qber, n_matched


_COINCIDENCE_FIELDS = ("time_a_ps", "time_b_ps", "det_a", "det_b", "delta_ps")


def write_coincidences(records: Coincidences, path) -> None:
    """Write records as CSV: time_a_ps,time_b_ps,det_a,det_b,delta_ps."""
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_COINCIDENCE_FIELDS)
        for row in zip(
            records.times_a.tolist(),
            records.times_b.tolist(),
            records.det_a.tolist(),
            records.det_b.tolist(),
            records.delta.tolist(),
        ):
            writer.writerow(row)


def read_coincidences(path, offset_ps: int = 0) -> Coincidences:
    """Parse a coincidence CSV written by ``write_coincidences``."""
    with open(path, "r", encoding="ascii", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != _COINCIDENCE_FIELDS:
            raise ValueError(f"{path}: unexpected header {header!r}")
        rows = [[int(v) for v in row] for row in reader if row]
    data = np.asarray(rows, dtype=np.int64).reshape(len(rows), len(_COINCIDENCE_FIELDS))
    return Coincidences(
        times_a=data[:, 0],
        times_b=data[:, 1],
        det_a=data[:, 2].astype(np.int8),
        det_b=data[:, 3].astype(np.int8),
        delta=data[:, 4],
        idx_a=np.full(len(rows), -1, dtype=np.int64),
        idx_b=np.full(len(rows), -1, dtype=np.int64),
        offset_ps=offset_ps,
    )
