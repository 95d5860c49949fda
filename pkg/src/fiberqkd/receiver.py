"""Passive-basis polarization analyzer and detector front end.

Each party has four single-photon detectors indexed 0..3 as
(rectilinear, 0), (rectilinear, 1), (diagonal, 0), (diagonal, 1); a tag's
basis is ``detector >> 1`` and its outcome bit ``detector & 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .channel import ArmTransits
from .pairgen import PS_PER_SECOND, matched_basis_error_probability

NUM_DETECTORS = 4


class TagOrigin(IntEnum):
    PAIR = 0
    BACKGROUND = 1
    DARK = 2


_ORIGIN_CODES = {TagOrigin.PAIR: "p", TagOrigin.BACKGROUND: "b", TagOrigin.DARK: "d"}
_CODE_ORIGINS = {code: origin for origin, code in _ORIGIN_CODES.items()}


@dataclass(frozen=True)
class DetectorParams:
    """Detector stack settings for one party.

    The quad-APD module used in this kind of receiver does not come with
    published figures; efficiency 0.5, 300 cps dark counts, 500 ps timing
    jitter and 50 ns dead time are typical for the class and all exposed
    here. ``second_mode_rejection_db`` is the extra attenuation the
    mode-selective fiber jumper in front of the analyzer applies to photons
    arriving in the second-order spatial mode (0 disables it).
    """

    efficiency: float = 0.5
    dark_cps: float = 300.0
    jitter_sigma_ps: float = 500.0
    dead_time_ns: float = 50.0
    second_mode_rejection_db: float = 13.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.efficiency <= 1.0):
            raise ValueError(f"efficiency must be in [0, 1], got {self.efficiency}")
        for name in ("dark_cps", "jitter_sigma_ps", "dead_time_ns", "second_mode_rejection_db"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


@dataclass(eq=False)
class TagStream:
    """Detector clicks of one party, sorted by time.

    ``pair_ids`` holds the originating pair id for pair tags and -1
    otherwise; ``modes`` is 1 for second-order-mode photons, 0 for
    first-order, -1 for noise tags.
    """

    times_ps: np.ndarray   # int64
    detectors: np.ndarray  # int8, 0..3
    origins: np.ndarray    # int8, TagOrigin values
    pair_ids: np.ndarray   # int64
    modes: np.ndarray      # int8

    def __len__(self) -> int:
        return int(self.times_ps.size)

    @classmethod
    def empty(cls) -> "TagStream":
        return cls(
            times_ps=np.empty(0, dtype=np.int64),
            detectors=np.empty(0, dtype=np.int8),
            origins=np.empty(0, dtype=np.int8),
            pair_ids=np.empty(0, dtype=np.int64),
            modes=np.empty(0, dtype=np.int8),
        )

    def take(self, index: np.ndarray) -> "TagStream":
        return TagStream(
            times_ps=self.times_ps[index],
            detectors=self.detectors[index],
            origins=self.origins[index],
            pair_ids=self.pair_ids[index],
            modes=self.modes[index],
        )

    def sorted_by_time(self) -> "TagStream":
        order = np.argsort(self.times_ps, kind="stable")
        return self.take(order)

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.times_ps) >= 0))


def concat_streams(*streams: TagStream) -> TagStream:
    merged = TagStream(
        times_ps=np.concatenate([s.times_ps for s in streams]),
        detectors=np.concatenate([s.detectors for s in streams]),
        origins=np.concatenate([s.origins for s in streams]),
        pair_ids=np.concatenate([s.pair_ids for s in streams]),
        modes=np.concatenate([s.modes for s in streams]),
    )
    return merged.sorted_by_time()


def detect_pairs(
    transits_a: ArmTransits,
    transits_b: ArmTransits,
    visibility_first_order: float,
    det_a: DetectorParams,
    det_b: DetectorParams,
    seed,
    qber_drift_per_s: float = 0.0,
) -> tuple[TagStream, TagStream]:
    """Measure both arms and emit one click stream per party.

    Each arriving photon takes a 50/50 passive basis choice. When both
    photons of a pair are first-order and the bases match, the outcome pair
    is drawn from the correlated distribution with contrast
    ``visibility_first_order``; a depolarized photon yields a uniform
    outcome regardless of its partner. Detection succeeds with the
    detector efficiency, reduced by the second-mode rejection for photons
    in the delayed mode. Tag time is arrival plus Gaussian timing jitter,
    rounded to ps.

    ``qber_drift_per_s`` adds a linear-in-time term to the matched-basis
    error probability (clamped to [0, 0.5]) to emulate slow polarization
    drift of the link; 0 disables it.

    Deterministic under ``seed``; the draw order is basis A, basis B,
    outcome A, correlation flip, uncorrelated outcome B, detection A,
    detection B, jitter A, jitter B.
    """
    n = len(transits_a)
    if len(transits_b) != n:
        raise ValueError(
            f"transit lists disagree on pair count: {n} vs {len(transits_b)}"
        )
    if not (0.0 <= visibility_first_order <= 1.0):
        raise ValueError(
            f"visibility_first_order must be in [0, 1], got {visibility_first_order}"
        )
    rng = np.random.default_rng(seed)

    basis_a = rng.integers(0, 2, size=n, dtype=np.int8)
    basis_b = rng.integers(0, 2, size=n, dtype=np.int8)
    bit_a = rng.integers(0, 2, size=n, dtype=np.int8)
    flip_draw = rng.random(n)
    bit_b_uncorrelated = rng.integers(0, 2, size=n, dtype=np.int8)

    error_p = np.full(n, matched_basis_error_probability(visibility_first_order))
    if qber_drift_per_s != 0.0:
        t_seconds = transits_a.arrival_ps / PS_PER_SECOND
        error_p = np.clip(error_p + qber_drift_per_s * t_seconds, 0.0, 0.5)
    correlated = (
        (basis_a == basis_b) & ~transits_a.depolarized & ~transits_b.depolarized
    )
    bit_b = np.where(
        correlated, bit_a ^ (flip_draw < error_p), bit_b_uncorrelated
    ).astype(np.int8)

    streams = []
    for transits, basis, bit, det in (
        (transits_a, basis_a, bit_a, det_a),
        (transits_b, basis_b, bit_b, det_b),
    ):
        rejection = 10.0 ** (-det.second_mode_rejection_db / 10.0)
        p_detect = det.efficiency * np.where(transits.second_order, rejection, 1.0)
        kept = transits.survived & (rng.random(n) < p_detect)
        idx = np.flatnonzero(kept)
        times = transits.arrival_ps[idx]
        if det.jitter_sigma_ps > 0:
            times = times + np.rint(
                rng.normal(0.0, det.jitter_sigma_ps, size=idx.size)
            ).astype(np.int64)
        stream = TagStream(
            times_ps=times.astype(np.int64),
            detectors=(2 * basis[idx] + bit[idx]).astype(np.int8),
            origins=np.full(idx.size, TagOrigin.PAIR, dtype=np.int8),
            pair_ids=idx.astype(np.int64),
            modes=transits.second_order[idx].astype(np.int8),
        )
        streams.append(stream.sorted_by_time())
    return streams[0], streams[1]


def add_noise_tags(
    stream: TagStream,
    rate_cps_per_detector: float,
    origin: TagOrigin,
    duration_s: float,
    seed,
) -> TagStream:
    """Merge an independent Poisson click process into the stream.

    Each of the four detectors receives Poisson(rate * duration) extra tags
    uniform over [0, duration); the result is re-sorted.
    """
    if not (math.isfinite(rate_cps_per_detector) and rate_cps_per_detector >= 0):
        raise ValueError(
            f"rate_cps_per_detector must be finite and >= 0, got {rate_cps_per_detector}"
        )
    if rate_cps_per_detector == 0:
        return stream
    rng = np.random.default_rng(seed)
    duration_ps = int(round(duration_s * PS_PER_SECOND))
    counts = rng.poisson(rate_cps_per_detector * duration_s, size=NUM_DETECTORS)
    total = int(counts.sum())
    noise = TagStream(
        times_ps=rng.integers(0, duration_ps, size=total, dtype=np.int64),
        detectors=np.repeat(
            np.arange(NUM_DETECTORS, dtype=np.int8), counts
        ),
        origins=np.full(total, int(origin), dtype=np.int8),
        pair_ids=np.full(total, -1, dtype=np.int64),
        modes=np.full(total, -1, dtype=np.int8),
    )
    return concat_streams(stream, noise)


def apply_dead_time(stream: TagStream, dead_time_ns: float) -> TagStream:
    """Drop tags arriving within the dead time of the previous kept tag.

    The rule is the usual non-paralyzable one, applied per detector: scan in
    time order, keep a tag only if it is at least ``dead_time_ns`` after the
    last kept tag on the same detector. Idempotent.
    """
    if not (math.isfinite(dead_time_ns) and dead_time_ns >= 0):
        raise ValueError(f"dead_time_ns must be finite and >= 0, got {dead_time_ns}")
    if not stream.is_sorted():
        raise ValueError("stream must be sorted by time")
    dead_ps = int(round(dead_time_ns * 1000.0))
    if dead_ps == 0 or len(stream) == 0:
        return stream
    keep = np.ones(len(stream), dtype=bool)
    for det in range(NUM_DETECTORS):
        det_idx = np.flatnonzero(stream.detectors == det)
        times = stream.times_ps[det_idx]
        keep[det_idx] = _dead_time_keep(times, dead_ps)
    return stream.take(np.flatnonzero(keep))


def _dead_time_keep(times: np.ndarray, dead_ps: int) -> np.ndarray:
    """Vectorized emulation of the sequential dead-time scan.

    Each pass removes, in every run of too-close tags, the first tag whose
    predecessor is already final; a tag's predecessor only ever moves
    earlier, so survivors of a pass stay valid and the result equals the
    left-to-right scan.
    """
    keep = np.ones(times.size, dtype=bool)
    while True:
        kept_idx = np.flatnonzero(keep)
        if kept_idx.size < 2:
            return keep
        gaps = np.diff(times[kept_idx])
        violating = gaps < dead_ps
        if not violating.any():
            return keep
        first_of_run = violating & np.concatenate(([True], ~violating[:-1]))
        keep[kept_idx[1:][first_of_run]] = False


def write_tags(stream: TagStream, path) -> None:
    """Dump a tag stream as text, one ``<time_ps> <detector> <origin>`` line
    per tag (origin codes: p=pair, b=background, d=dark).
    """
    with open(path, "w", encoding="ascii") as fh:
        for t, d, o in zip(
            stream.times_ps.tolist(), stream.detectors.tolist(), stream.origins.tolist()
        ):
            fh.write(f"{t} {d} {_ORIGIN_CODES[TagOrigin(o)]}\n")


def read_tags(path) -> TagStream:
    """Parse a tag stream from the text format written by ``write_tags``.

    Pair identities and mode flags are not part of the format and come back
    as -1.
    """
    times, detectors, origins = [], [], []
    with open(path, "r", encoding="ascii") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 3 or fields[2] not in _CODE_ORIGINS:
                raise ValueError(f"{path}:{line_no}: malformed tag line {line!r}")
            times.append(int(fields[0]))
            detectors.append(int(fields[1]))
            origins.append(int(_CODE_ORIGINS[fields[2]]))
    stream = TagStream(
        times_ps=np.asarray(times, dtype=np.int64),
        detectors=np.asarray(detectors, dtype=np.int8),
        origins=np.asarray(origins, dtype=np.int8),
        pair_ids=np.full(len(times), -1, dtype=np.int64),
        modes=np.full(len(times), -1, dtype=np.int8),
    )
    if not stream.is_sorted():
        stream = stream.sorted_by_time()
    return stream
