"""Star-topology network orchestration: a central switched pair source,
per-user fiber arms, and end-to-end key-distribution sessions.
"""

from __future__ import annotations

import dataclasses
import math
import threading
from dataclasses import dataclass

import numpy as np

from . import channel as chan
from . import distill, receiver, tagproc
from .channel import ChannelConfig
from .distill import KeyRateReport
from .pairgen import SourceParams, generate_pair_stream, matched_basis_error_probability
from .receiver import DetectorParams, TagOrigin, TagStream


class SourceBusyError(RuntimeError):
    """The shared pair source is already switched to another session."""


class UnknownUserError(KeyError):
    pass


class Topology:
    """Central provider with one pair source and switched arms to users.

    The source is a shared resource: at most one session may hold it at a
    time, enforced across threads.
    """

    def __init__(
        self,
        users: list[tuple[str, ChannelConfig]],
        source: SourceParams,
        detector: DetectorParams | None = None,
        qber_drift_per_s: float = 0.0,
        coincidence_window_ps: int = tagproc.DEFAULT_COINCIDENCE_WINDOW_PS,
        offset_search_span_ps: int = tagproc.DEFAULT_SEARCH_SPAN_PS,
        offset_bin_width_ps: int = tagproc.DEFAULT_BIN_WIDTH_PS,
        ec_inefficiency: float = distill.DEFAULT_EC_INEFFICIENCY,
        epsilon: float = distill.DEFAULT_EPSILON,
    ):
        names = [name for name, _ in users]
        if len(names) < 2:
            raise ValueError("topology needs at least 2 users")
        if len(set(names)) != len(names):
            raise ValueError(f"user names must be unique, got {names}")
        self.users: dict[str, ChannelConfig] = dict(users)
        self.source = source
        self.detector = detector if detector is not None else DetectorParams()
        self.qber_drift_per_s = qber_drift_per_s
        self.coincidence_window_ps = int(coincidence_window_ps)
        self.offset_search_span_ps = int(offset_search_span_ps)
        self.offset_bin_width_ps = int(offset_bin_width_ps)
        self.ec_inefficiency = ec_inefficiency
        self.epsilon = epsilon
        self._lock = threading.Lock()
        self._active: SessionPlan | None = None

    def _acquire(self, plan: "SessionPlan") -> None:
        with self._lock:
            if self._active is not None:
                raise SourceBusyError(
                    f"source busy: session {self._active.user_a}-"
                    f"{self._active.user_b} is active"
                )
            self._active = plan

    def _release(self, plan: "SessionPlan") -> None:
        with self._lock:
            if self._active is plan:
                self._active = None


@dataclass(frozen=True)
class SessionPlan:
    """One scheduled key-distribution session between two users."""

    topology: Topology
    user_a: str
    user_b: str
    config_a: ChannelConfig
    config_b: ChannelConfig
    duration_s: float
    seed: int


@dataclass(eq=False)
class SessionArtifacts:
    """Raw per-session data kept alongside the key-rate report."""

    tags_a: TagStream
    tags_b: TagStream
    records: tagproc.Coincidences          # wide-window matches, pre mode filter
    filtered_records: tagproc.Coincidences
    offset_ps: int
    retained_fraction: float
    mode_filter_ambiguous: bool


def schedule_session(
    topology: Topology,
    user_a: str,
    user_b: str,
    duration_s: float,
    seed: int,
    traffic_mbps: float | None = None,
) -> SessionPlan:
    """Switch the source to a user pair and return the session plan.

    Holds the source until ``run_session`` completes (or ``release_session``
    is called); scheduling while a session is active fails with
    SourceBusyError. ``traffic_mbps`` overrides the data rate on both arms'
    traffic settings; under the constant-power transceiver model this does
    not change the induced noise.
    """
    for name in (user_a, user_b):
        if name not in topology.users:
            raise UnknownUserError(f"unknown user {name!r}")
    if user_a == user_b:
        raise ValueError(f"cannot pair user {user_a!r} with itself")
    if not (math.isfinite(duration_s) and duration_s > 0):
        raise ValueError(f"duration_s must be finite and > 0, got {duration_s}")
    config_a = topology.users[user_a]
    config_b = topology.users[user_b]
    if traffic_mbps is not None:
        config_a = dataclasses.replace(
            config_a,
            traffic=dataclasses.replace(config_a.traffic, data_rate_mbps=traffic_mbps),
        )
        config_b = dataclasses.replace(
            config_b,
            traffic=dataclasses.replace(config_b.traffic, data_rate_mbps=traffic_mbps),
        )
    plan = SessionPlan(
        topology=topology,
        user_a=user_a,
        user_b=user_b,
        config_a=config_a,
        config_b=config_b,
        duration_s=float(duration_s),
        seed=int(seed),
    )
    topology._acquire(plan)
    return plan


def release_session(plan: SessionPlan) -> None:
    plan.topology._release(plan)


def run_session(plan: SessionPlan) -> tuple[KeyRateReport, SessionArtifacts]:
    """Execute a session end to end and release the source when done.

    Pipeline: pair emission, per-arm propagation with pair-coordinated mode
    assignment, detection, traffic/dark noise, dead time, offset recovery,
    wide-window coincidence matching, arrival-time mode filtering, sifting,
    and key-rate evaluation. Deterministic under the plan seed.
    """
    topo = plan.topology
    try:
        seeds = np.random.SeedSequence(plan.seed).spawn(8)
        (
            s_pairs,
            s_modes,
            s_arm_a,
            s_arm_b,
            s_detect,
            s_bg_a,
            s_bg_b,
            s_dark,
        ) = seeds

        source = dataclasses.replace(
            topo.source,
            duration_s=plan.duration_s,
            seed=int(s_pairs.generate_state(1, np.uint64)[0]),
        )
        pairs = generate_pair_stream(source)

        # Mode flags are drawn per pair, not per arm, so the degraded
        # population carries the mode delay on exactly one side; the
        # two arms might have different configured fractions, in which
        # case the larger one drives the pair-level draw.
        fraction = max(
            plan.config_a.second_mode_fraction, plan.config_b.second_mode_fraction
        )
        mode_a, mode_b = chan.assign_pair_modes(len(pairs), fraction, s_modes)
        transits_a = chan.propagate_arm(pairs, plan.config_a, s_arm_a, second_order=mode_a)
        transits_b = chan.propagate_arm(pairs, plan.config_b, s_arm_b, second_order=mode_b)

        tags_a, tags_b = receiver.detect_pairs(
            transits_a,
            transits_b,
            source.intrinsic_visibility,
            topo.detector,
            topo.detector,
            s_detect,
            qber_drift_per_s=topo.qber_drift_per_s,
        )
        del transits_a, transits_b

        dark_seeds = s_dark.spawn(2)
        tags_a = receiver.add_noise_tags(
            tags_a,
            chan.background_rate_per_detector(plan.config_a.traffic),
            TagOrigin.BACKGROUND,
            plan.duration_s,
            s_bg_a,
        )
        tags_b = receiver.add_noise_tags(
            tags_b,
            chan.background_rate_per_detector(plan.config_b.traffic),
            TagOrigin.BACKGROUND,
            plan.duration_s,
            s_bg_b,
        )
        tags_a = receiver.add_noise_tags(
            tags_a, topo.detector.dark_cps, TagOrigin.DARK, plan.duration_s, dark_seeds[0]
        )
        tags_b = receiver.add_noise_tags(
            tags_b, topo.detector.dark_cps, TagOrigin.DARK, plan.duration_s, dark_seeds[1]
        )
        tags_a = receiver.apply_dead_time(tags_a, topo.detector.dead_time_ns)
        tags_b = receiver.apply_dead_time(tags_b, topo.detector.dead_time_ns)

        offset = tagproc.find_offset(
            tags_a,
            tags_b,
            search_span_ps=topo.offset_search_span_ps,
            bin_width_ps=topo.offset_bin_width_ps,
        )

        delay_a = plan.config_a.mode_delay_ps
        delay_b = plan.config_b.mode_delay_ps
        max_delay = max(delay_a, delay_b)
        min_delay = min(delay_a, delay_b)
        jitter_spread = math.hypot(
            topo.detector.jitter_sigma_ps, topo.detector.jitter_sigma_ps
        )
        # Wide enough to capture the delayed-mode populations so the
        # arrival-time filter, not the matching window, removes them.
        match_window = topo.coincidence_window_ps + 2 * max_delay + 8 * round(jitter_spread)
        records = tagproc.match_coincidences(tags_a, tags_b, offset, match_window)

        reject_half_width = topo.coincidence_window_ps // 2
        if min_delay > 0:
            filtered = tagproc.temporal_mode_filter(records, min_delay, reject_half_width)
        else:
            filtered = records.take(np.abs(records.delta) <= reject_half_width)
        retained = len(filtered) / len(records) if len(records) else 0.0

        key = distill.sift(filtered, plan.duration_s)
        n = len(key)
        sifted_rate = n / plan.duration_s
        asymptotic = distill.asymptotic_rate(sifted_rate, key.qber, topo.ec_inefficiency)
        finite = distill.finite_key_length(n, key.qber, topo.ec_inefficiency, topo.epsilon)
        try:
            n_required = float(
                distill.required_raw_bits(key.qber, topo.ec_inefficiency, topo.epsilon)
            )
        except distill.KeyRateError:
            n_required = math.inf

        report = KeyRateReport(
            length_km_per_arm=(plan.config_a.length_km + plan.config_b.length_km) / 2.0,
            traffic_mbps=(
                plan.config_a.traffic.data_rate_mbps
                + plan.config_b.traffic.data_rate_mbps
            )
            / 2.0,
            duration_s=plan.duration_s,
            sifted_bits=n,
            sifted_rate=sifted_rate,
            qber=key.qber,
            asymptotic_rate=asymptotic,
            finite_length=finite,
            n_required=n_required,
            retained_fraction=retained,
            offset_ps=offset,
            ec_inefficiency=topo.ec_inefficiency,
            epsilon=topo.epsilon,
        )
        artifacts = SessionArtifacts(
            tags_a=tags_a,
            tags_b=tags_b,
            records=records,
            filtered_records=filtered,
            offset_ps=offset,
            retained_fraction=retained,
            mode_filter_ambiguous=min_delay <= reject_half_width,
        )
        return report, artifacts
    finally:
        release_session(plan)


def _normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def predict_key_rates(
    source: SourceParams,
    config_a: ChannelConfig,
    config_b: ChannelConfig,
    detector: DetectorParams | None = None,
    duration_s: float = 60.0,
    coincidence_window_ps: int = tagproc.DEFAULT_COINCIDENCE_WINDOW_PS,
    ec_inefficiency: float = distill.DEFAULT_EC_INEFFICIENCY,
    epsilon: float = distill.DEFAULT_EPSILON,
) -> KeyRateReport:
    """Closed-form rate prediction for an operating point, no tag simulation.

    Standard link-budget arithmetic: per-arm detection probabilities,
    jitter-limited capture of the retained window, accidental coincidences
    from the singles rates, and the error-rate mix of correlated pairs
    (error (1-V)/2), depolarized-mode leakage and accidentals (error 1/2).
    Dead-time losses are neglected.
    """
    det = detector if detector is not None else DetectorParams()
    reject_half_width = coincidence_window_ps // 2
    sigma = math.hypot(det.jitter_sigma_ps, det.jitter_sigma_ps)

    def capture(center_ps: float) -> float:
        if sigma == 0:
            return 1.0 if abs(center_ps) <= reject_half_width else 0.0
        return _normal_cdf((reject_half_width - center_ps) / sigma) - _normal_cdf(
            (-reject_half_width - center_ps) / sigma
        )

    rejection = 10.0 ** (-det.second_mode_rejection_db / 10.0)
    fraction = max(config_a.second_mode_fraction, config_b.second_mode_fraction)

    p_first = []
    p_second = []
    for cfg in (config_a, config_b):
        arm = chan.transmittance(cfg.alpha_quantum_db_per_km, cfg.length_km) * 10.0 ** (
            -cfg.splitter_quantum_loss_db * cfg.splitters_per_arm / 10.0
        )
        p_first.append(arm * det.efficiency)
        p_second.append(arm * det.efficiency * rejection)

    rate = source.pair_rate
    good_rate = rate * (1.0 - fraction) * p_first[0] * p_first[1] * capture(0.0)
    # Degraded pairs carry the delay on one side, picked 50/50.
    degraded_rate = rate * fraction * 0.5 * (
        p_second[0] * p_first[1] * capture(config_a.mode_delay_ps)
        + p_first[0] * p_second[1] * capture(config_b.mode_delay_ps)
    )

    mode_mix = (1.0 - fraction / 2.0) + (fraction / 2.0) * rejection
    singles = []
    for cfg, p1 in zip((config_a, config_b), p_first):
        noise = chan.background_rate_per_detector(cfg.traffic) + det.dark_cps
        singles.append(rate * p1 * mode_mix + receiver.NUM_DETECTORS * noise)
    accidental_rate = (
        singles[0] * singles[1] * (2.0 * reject_half_width) / 1e12
    )

    total = good_rate + degraded_rate + accidental_rate
    if total <= 0:
        raise ValueError("operating point yields no coincidences")
    error_rate = (
        good_rate * matched_basis_error_probability(source.intrinsic_visibility)
        + 0.5 * (degraded_rate + accidental_rate)
    )
    qber = error_rate / total
    sifted_rate = 0.5 * total
    all_true_pairs = rate * (1.0 - fraction) * p_first[0] * p_first[1] + rate * fraction * 0.5 * (
        p_second[0] * p_first[1] + p_first[0] * p_second[1]
    )
    retained = (good_rate + degraded_rate) / all_true_pairs if all_true_pairs else 0.0
    n = max(1, int(round(sifted_rate * duration_s)))
    asymptotic = distill.asymptotic_rate(sifted_rate, qber, ec_inefficiency)
    finite = distill.finite_key_length(n, qber, ec_inefficiency, epsilon)
    try:
        n_required = float(distill.required_raw_bits(qber, ec_inefficiency, epsilon))
    except distill.KeyRateError:
        n_required = math.inf
    return KeyRateReport(
        length_km_per_arm=(config_a.length_km + config_b.length_km) / 2.0,
        traffic_mbps=(
            config_a.traffic.data_rate_mbps + config_b.traffic.data_rate_mbps
        )
        / 2.0,
        duration_s=duration_s,
        sifted_bits=n,
        sifted_rate=sifted_rate,
        qber=qber,
        asymptotic_rate=asymptotic,
        finite_length=finite,
        n_required=n_required,
        retained_fraction=retained,
        offset_ps=0,
        ec_inefficiency=ec_inefficiency,
        epsilon=epsilon,
    )
