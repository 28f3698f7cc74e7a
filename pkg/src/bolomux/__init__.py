"""Simulation bench for frequency-multiplexed thermal bolometer readout.

A chip of resonant microwave bolometers shares one probe line; each
bolometer's heater sits behind a dedicated bandpass filter, so tone
frequency selects the channel.  The package models the full loop: filter
bank, electrothermal operating point, time-domain probe synthesis,
digital down-conversion, averaging, and the fits and tables the bench
produces (resonance characterization, compression points, crosstalk,
per-pattern SNR).
"""
from .analysis import (
    CompressionFit,
    CrosstalkMatrix,
    ExponentialFit,
    FitError,
    LorentzianFit,
    P_1DB_FACTOR,
    SnrTable,
    capacity_estimate,
    crosstalk_matrix,
    fit_compression,
    fit_exponential,
    fit_lorentzian,
    snr_table,
)
from .config import (
    ConfigError,
    ExperimentConfig,
    config_hash,
    default_config_dict,
    load_config,
    merge_config,
    validate_config,
)
from .device import (
    BolometerParams,
    BolometerState,
    OperatingPoint,
    SolverError,
    absorbed_probe_power,
    reflection_coefficient,
    solve_operating_point,
    thermal_step,
)
from .dsp import (
    IQTrace,
    PairwiseAccumulator,
    ResponseMetric,
    TimeTrace,
    add_noise,
    average_traces,
    brickwall_bandpass,
    demodulate,
    response_metric,
)
from .experiments import (
    CalibrationError,
    CalibrationTargets,
    ChipConfig,
    FilterSweepResult,
    MultiplexRun,
    NonlinearOperationError,
    PowerSweepResult,
    ProbeSweepResult,
    RunSettings,
    apply_preset,
    calibrate_chip,
    characterize,
    operating_tones,
    power_sweep_matrix,
    run_filter_sweep,
    run_full_multiplex,
    run_power_sweep,
    run_probe_sweep,
    run_trigger,
)
from .frontend import (
    FilterParams,
    PulseSpec,
    ToneSpec,
    TriggerPattern,
    filter_transmission,
    heater_power_delivered,
    make_probe_comb,
    schedule_heaters,
)
from .traceio import (
    RunManifest,
    TraceFormatError,
    read_manifest,
    read_trace,
    verify_manifest,
    write_manifest,
    write_trace,
)
from .units import (
    Seed,
    dbm_to_watts,
    db_to_power_ratio,
    derive_stream,
    power_ratio_to_db,
    tone_amplitude_volts,
    watts_to_dbm,
)

__version__ = "0.1.0"
