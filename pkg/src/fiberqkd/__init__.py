"""Simulator and analysis toolkit for entanglement-based key distribution
over telecom fibers shared with classical gigabit traffic."""

from .channel import (
    ArmTransits,
    ChannelConfig,
    ClassicalTraffic,
    TrafficDirection,
    background_rate_per_detector,
    propagate_arm,
    second_mode_delay_ps,
    transmittance,
)
from .cli import ExperimentConfig, emit_csv, load_config, run_experiment
from .distill import (
    KeyRateError,
    KeyRateReport,
    SiftedKey,
    asymptotic_rate,
    binary_entropy,
    finite_key_length,
    required_raw_bits,
    sift,
)
from .netsim import (
    SessionPlan,
    SourceBusyError,
    Topology,
    predict_key_rates,
    run_session,
    schedule_session,
)
from .pairgen import (
    Basis,
    PairStream,
    SourceParams,
    generate_pair_stream,
    joint_outcome_probability,
    matched_basis_error_probability,
)
from .receiver import (
    DetectorParams,
    TagOrigin,
    TagStream,
    add_noise_tags,
    apply_dead_time,
    detect_pairs,
    read_tags,
    write_tags,
)
from .tagproc import (
    Coincidences,
    CorrelationHistogram,
    ModeFilterWarning,
    NoCorrelationPeakError,
    correlation_histogram,
    estimate_visibility_and_qber,
    find_offset,
    match_coincidences,
    temporal_mode_filter,
)

__version__ = "0.1.0"
