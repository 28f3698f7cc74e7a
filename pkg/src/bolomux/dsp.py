"""Deterministic signal chain: traces, noise, brick-wall filters, demodulation.

All filtering is done by exact DFT bin masking (brick-wall), which makes the
operations idempotent projections and keeps the whole chain reproducible to
the bit.  Band edges are inclusive; a bin sitting exactly on an edge is kept
(comparisons carry a guard of 1e-6 of a bin spacing so edge bins survive
floating-point rounding of the edge itself).

Filtered traces carry their masked spectrum along as a private cache, so
re-filtering reuses the exact masked bins instead of re-transforming the
samples.  That is what makes "filter twice == filter once" hold bit-exactly
rather than only to roundoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "TimeTrace",
    "IQTrace",
    "ResponseMetric",
    "PairwiseAccumulator",
    "add_noise",
    "brickwall_bandpass",
    "demodulate",
    "average_traces",
    "response_metric",
]


@dataclass(frozen=True)
class TimeTrace:
    """Uniformly sampled real-valued trace.  Sample n sits at t0_s + n/fs."""

    sample_rate_hz: float
    t0_s: float
    samples: np.ndarray
    _rfft_cache: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not math.isfinite(self.sample_rate_hz) or self.sample_rate_hz <= 0.0:
            raise ValueError(f"sample rate must be finite and > 0, got {self.sample_rate_hz}")
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("samples must be a non-empty 1-d array")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    def times(self) -> np.ndarray:
        return self.t0_s + np.arange(self.samples.size) / self.sample_rate_hz

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class IQTrace:
    """Complex baseband trace produced by demodulation at carrier_hz."""

    carrier_hz: float
    sample_rate_hz: float
    t0_s: float
    samples: np.ndarray

    def __post_init__(self) -> None:
        if not math.isfinite(self.sample_rate_hz) or self.sample_rate_hz <= 0.0:
            raise ValueError(f"sample rate must be finite and > 0, got {self.sample_rate_hz}")
        samples = np.asarray(self.samples, dtype=complex)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("samples must be a non-empty 1-d array")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    def times(self) -> np.ndarray:
        return self.t0_s + np.arange(self.samples.size) / self.sample_rate_hz

    def magnitude(self) -> np.ndarray:
        return np.abs(self.samples)


def add_noise(trace: TimeTrace, sigma_v: float, stream: np.random.Generator) -> TimeTrace:
    """Add white Gaussian digitizer noise with standard deviation sigma_v.

    Drawing from the same derived stream gives bit-identical output.
    sigma_v == 0 returns the trace unchanged (no draw is consumed).
    """
    if not math.isfinite(sigma_v) or sigma_v < 0.0:
        raise ValueError(f"noise sigma must be finite and >= 0 V, got {sigma_v}")
    if sigma_v == 0.0:
        return replace(trace, _rfft_cache=None)
    noise = stream.normal(0.0, sigma_v, trace.samples.size)
    return TimeTrace(trace.sample_rate_hz, trace.t0_s, trace.samples + noise)


def _band_mask(freqs: np.ndarray, f_lo_hz: float, f_hi_hz: float, bin_hz: float) -> np.ndarray:
    guard = 1e-6 * bin_hz
    return (freqs >= f_lo_hz - guard) & (freqs <= f_hi_hz + guard)


def brickwall_bandpass(trace: TimeTrace, f_center_hz: float, bandwidth_hz: float) -> TimeTrace:
    """Zero every DFT bin outside [f_center - bw/2, f_center + bw/2].

    Edges are inclusive.  The band must lie inside (0, fs/2] and contain at
    least one bin.  Output is exactly real (real FFT pair) and carries its
    masked spectrum, so applying the same filter again is a bit-exact no-op.
    """
    fs = trace.sample_rate_hz
    if not math.isfinite(bandwidth_hz) or bandwidth_hz <= 0.0:
        raise ValueError(f"bandwidth must be finite and > 0, got {bandwidth_hz}")
    f_lo = f_center_hz - 0.5 * bandwidth_hz
    f_hi = f_center_hz + 0.5 * bandwidth_hz
    if f_lo < 0.0 or f_hi > 0.5 * fs:
        raise ValueError(
            f"band [{f_lo:.6g}, {f_hi:.6g}] Hz must lie within [0, fs/2] = [0, {0.5 * fs:.6g}] Hz")
    n = trace.samples.size
    spectrum = trace._rfft_cache
    if spectrum is None:
        spectrum = np.fft.rfft(trace.samples)
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    mask = _band_mask(freqs, f_lo, f_hi, fs / n)
    if not mask.any():
        raise ValueError("band contains no DFT bins")
    masked = np.where(mask, spectrum, 0.0)
    filtered = np.fft.irfft(masked, n=n)
    return TimeTrace(fs, trace.t0_s, filtered, _rfft_cache=masked)


def demodulate(trace: TimeTrace, f_carrier_hz: float, lp_bandwidth_hz: float,
               decimation: int) -> IQTrace:
    """Digital down-conversion at f_carrier_hz.

    Multiplies by exp(-2 pi i f_c t), brick-wall low-passes the complex
    signal at +-lp_bandwidth/2, and keeps every decimation-th sample.  A pure
    tone a*cos(2 pi f_c t) demodulates to the constant a/2 (magnitude
    convention used by every response metric downstream).
    """
    fs = trace.sample_rate_hz
    if not 0.0 < f_carrier_hz < 0.5 * fs:
        raise ValueError(
            f"carrier {f_carrier_hz:.6g} Hz must lie in (0, fs/2) = (0, {0.5 * fs:.6g}) Hz")
    if not math.isfinite(lp_bandwidth_hz) or lp_bandwidth_hz <= 0.0:
        raise ValueError(f"low-pass bandwidth must be finite and > 0, got {lp_bandwidth_hz}")
    if 0.5 * lp_bandwidth_hz > 0.5 * fs:
        raise ValueError("low-pass bandwidth exceeds the sampled band")
    n = trace.samples.size
    if not isinstance(decimation, int) or decimation < 1:
        raise ValueError(f"decimation must be a positive integer, got {decimation!r}")
    if n % decimation != 0:
        raise ValueError(f"decimation {decimation} must divide the trace length {n}")

    t = trace.times()
    mixed = trace.samples * np.exp(-2j * np.pi * f_carrier_hz * t)
    spectrum = np.fft.fft(mixed)
    freqs = np.fft.fftfreq(n, 1.0 / fs)
    half = 0.5 * lp_bandwidth_hz
    mask = _band_mask(np.abs(freqs), 0.0, half, fs / n)
    baseband = np.fft.ifft(np.where(mask, spectrum, 0.0))
    return IQTrace(f_carrier_hz, fs / decimation, trace.t0_s, baseband[::decimation])


class PairwiseAccumulator:
    """Streaming pairwise summation with a tree fixed by push order.

    Partial sums are held per rank (rank r = sum of 2**r pushed arrays) and
    merged binary-counter style; the final reduction combines the leftover
    ranks from lowest to highest.  The tree shape depends only on the number
    of pushes, so the result is bit-identical for a given input order no
    matter how the inputs were produced.
    """

    def __init__(self) -> None:
        self._levels: list[np.ndarray | None] = []
        self.count = 0

    def push(self, values: np.ndarray) -> None:
        carry = np.array(values, copy=True)
        rank = 0
        while rank < len(self._levels) and self._levels[rank] is not None:
            carry = self._levels[rank] + carry
            self._levels[rank] = None
            rank += 1
        if rank == len(self._levels):
            self._levels.append(carry)
        else:
            self._levels[rank] = carry
        self.count += 1

    def total(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("nothing accumulated")
        acc = None
        for level in self._levels:
            if level is None:
                continue
            acc = level.copy() if acc is None else level + acc
        return acc


def average_traces(traces):
    """Pointwise arithmetic mean of equally shaped traces.

    Uses the fixed-order pairwise tree of PairwiseAccumulator, so the mean of
    a given sequence is bit-identical regardless of how the sequence was
    computed.  All traces must share type, length, sample rate and t0 (and
    carrier, for IQ traces).
    """
    traces = list(traces)
    if not traces:
        raise ValueError("cannot average an empty list of traces")
    first = traces[0]
    acc = PairwiseAccumulator()
    for tr in traces:
        if type(tr) is not type(first):
            raise ValueError("traces must all be of the same type")
        if len(tr) != len(first):
            raise ValueError(f"trace lengths differ: {len(tr)} vs {len(first)}")
        if tr.sample_rate_hz != first.sample_rate_hz or tr.t0_s != first.t0_s:
            raise ValueError("traces must share sample rate and t0")
        if isinstance(tr, IQTrace) and tr.carrier_hz != first.carrier_hz:
            raise ValueError("IQ traces must share the carrier")
        acc.push(tr.samples)
    mean = acc.total() / acc.count
    if isinstance(first, IQTrace):
        return IQTrace(first.carrier_hz, first.sample_rate_hz, first.t0_s, mean)
    return TimeTrace(first.sample_rate_hz, first.t0_s, mean)


@dataclass(frozen=True)
class ResponseMetric:
    """Windowed pulse-response summary of a demodulated magnitude trace.

    snr = (signal_mean - baseline_mean) / baseline_std.  zero_noise marks a
    perfectly quiet baseline (std == 0), in which case snr is reported as 0
    rather than raising.
    """

    signal_mean: float
    baseline_mean: float
    baseline_std: float
    snr: float
    zero_noise: bool

    @property
    def response(self) -> float:
        return self.signal_mean - self.baseline_mean


def _window_slice(trace_t0: float, rate_hz: float, n: int, window_s) -> slice:
    w0, w1 = float(window_s[0]), float(window_s[1])
    if not (math.isfinite(w0) and math.isfinite(w1)) or w1 <= w0:
        raise ValueError(f"window must satisfy start < end, got ({w0}, {w1})")
    # half-open [w0, w1); a sample exactly on the start edge is included
    i0 = math.ceil((w0 - trace_t0) * rate_hz - 1e-9)
    i1 = math.ceil((w1 - trace_t0) * rate_hz - 1e-9)
    if i0 < 0 or i1 > n:
        raise ValueError(f"window ({w0}, {w1}) s falls outside the trace")
    if i1 <= i0:
        raise ValueError(f"window ({w0}, {w1}) s contains no samples")
    return slice(i0, i1)


def response_metric(iq: IQTrace, baseline_window_s, signal_window_s) -> ResponseMetric:
    """Compare |IQ| in a signal window against a pre-pulse baseline window."""
    if float(baseline_window_s[1]) > float(signal_window_s[0]):
        raise ValueError("baseline window must end before the signal window starts")
    mag = iq.magnitude()
    base = mag[_window_slice(iq.t0_s, iq.sample_rate_hz, mag.size, baseline_window_s)]
    sig = mag[_window_slice(iq.t0_s, iq.sample_rate_hz, mag.size, signal_window_s)]
    baseline_mean = float(np.mean(base))
    baseline_std = float(np.std(base))
    signal_mean = float(np.mean(sig))
    if baseline_std == 0.0:
        return ResponseMetric(signal_mean, baseline_mean, 0.0, 0.0, True)
    snr = (signal_mean - baseline_mean) / baseline_std
    return ResponseMetric(signal_mean, baseline_mean, baseline_std, float(snr), False)
