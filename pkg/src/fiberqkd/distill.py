"""Key sifting and secret-key-rate bounds.

The asymptotic bound is the symmetric-error one,
rate = sifted_rate * (1 - f*H2(Q) - H2(Q)), which vanishes at the usual
11% error threshold for f = 1. The finite-size bound is a conservative
Hoeffding-corrected variant of the same expression; error correction and
privacy amplification themselves are out of scope, only their rate costs
enter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tagproc import Coincidences

DEFAULT_EC_INEFFICIENCY = 1.1
DEFAULT_EPSILON = 1e-10
_MAX_SEARCH_BITS = 2**40


class KeyRateError(ValueError):
    """No positive secret key is possible for the given error rate."""


@dataclass(eq=False)
class SiftedKey:
    """Raw key bits of both parties after basis reconciliation."""

    bits_a: np.ndarray  # uint8
    bits_b: np.ndarray  # uint8
    qber: float
    duration_s: float

    def __len__(self) -> int:
        return int(self.bits_a.size)


@dataclass(frozen=True)
class KeyRateReport:
    """Secret-key figures for one session or one analytic operating point."""

    length_km_per_arm: float
    traffic_mbps: float
    duration_s: float
    sifted_bits: int
    sifted_rate: float               # bits/s
    qber: float
    asymptotic_rate: float           # bits/s
    finite_length: int               # extractable bits at the collected size
    n_required: float                # min sifted bits for any positive key; inf if none
    retained_fraction: float         # coincidences surviving the mode filter
    offset_ps: int
    ec_inefficiency: float
    epsilon: float

    CSV_FIELDS = (
        "length_km_per_arm",
        "traffic_mbps",
        "sifted_rate",
        "qber",
        "asymptotic_rate",
        "finite_length",
        "n_required",
    )

    def csv_row(self) -> dict:
        return {name: getattr(self, name) for name in self.CSV_FIELDS}


def sift(records: Coincidences, duration_s: float = 0.0) -> SiftedKey:
    """Keep matched-basis records and read the key bits off the detectors."""
    matched = (records.det_a >> 1) == (records.det_b >> 1)
    if not matched.any():
        raise ValueError("no matched-basis records to sift")
    bits_a = (records.det_a[matched] & 1).astype(np.uint8)
    bits_b = (records.det_b[matched] & 1).astype(np.uint8)
    qber = float(np.count_nonzero(bits_a != bits_b)) / bits_a.size
    return SiftedKey(bits_a=bits_a, bits_b=bits_b, qber=qber, duration_s=duration_s)


def binary_entropy(p: float) -> float:
    """H2(p) = -p*log2(p) - (1-p)*log2(1-p), with H2(0) = H2(1) = 0."""
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"p must be in [0, 1], got {p}")
    if p == 0.0 or p == 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def asymptotic_rate(
    sifted_rate: float, qber: float, ec_inefficiency: float = DEFAULT_EC_INEFFICIENCY
) -> float:
    """Secret bits per second in the infinite-key limit."""
    if not (0.0 <= qber <= 0.5):
        raise ValueError(f"qber must be in [0, 0.5], got {qber}")
    if not (math.isfinite(ec_inefficiency) and ec_inefficiency >= 1.0):
        raise ValueError(f"ec_inefficiency must be >= 1, got {ec_inefficiency}")
    if not (math.isfinite(sifted_rate) and sifted_rate >= 0):
        raise ValueError(f"sifted_rate must be finite and >= 0, got {sifted_rate}")
    h = binary_entropy(qber)
    return sifted_rate * max(0.0, 1.0 - ec_inefficiency * h - h)


def finite_key_length(
    n: int,
    qber: float,
    ec_inefficiency: float = DEFAULT_EC_INEFFICIENCY,
    epsilon: float = DEFAULT_EPSILON,
) -> int:
    """Extractable secret bits from n sifted bits at the observed qber.

    Applies a Hoeffding fluctuation mu = sqrt(ln(2/eps) / 2n) to the
    phase-error estimate and charges 2*log2(1/eps) bits of overhead:

        l = floor(n*(1 - H2(min(0.5, qber + mu))) - f*n*H2(qber)
                  - 2*log2(1/eps))

    clamped at zero. Monotone non-decreasing in n for fixed qber.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not (0.0 < epsilon < 1.0):
        raise ValueError(f"epsilon must be in (0, 1), got {epsilon}")
    if not (0.0 <= qber <= 0.5):
        raise ValueError(f"qber must be in [0, 0.5], got {qber}")
    if not (math.isfinite(ec_inefficiency) and ec_inefficiency >= 1.0):
        raise ValueError(f"ec_inefficiency must be >= 1, got {ec_inefficiency}")
    mu = math.sqrt(math.log(2.0 / epsilon) / (2.0 * n))
    phase_estimate = min(0.5, qber + mu)
    length = (
        n * (1.0 - binary_entropy(phase_estimate))
        - ec_inefficiency * n * binary_entropy(qber)
        - 2.0 * math.log2(1.0 / epsilon)
    )
    return max(0, math.floor(length))


def required_raw_bits(
    qber: float,
    ec_inefficiency: float = DEFAULT_EC_INEFFICIENCY,
    epsilon: float = DEFAULT_EPSILON,
) -> int:
    """Smallest sifted-key size from which any secret bits survive.

    Located by exponential bracketing followed by binary search, valid
    because the finite-key length is monotone in n.
    """
    h = binary_entropy(qber)
    if 1.0 - (1.0 + ec_inefficiency) * h <= 0.0:
        # The finite length is bounded by n * asymptotic yield minus overhead.
        raise KeyRateError(f"no positive key at any n for qber {qber}")
    hi = 1
    while finite_key_length(hi, qber, ec_inefficiency, epsilon) < 1:
        hi *= 2
        if hi > _MAX_SEARCH_BITS:
            raise KeyRateError(f"no positive key at any n for qber {qber}")
    lo = max(1, hi // 2)
    while lo < hi:
        mid = (lo + hi) // 2
        if finite_key_length(mid, qber, ec_inefficiency, epsilon) >= 1:
            hi = mid
        else:
            lo = mid + 1
    return hi
