"""Heater filters, probe/heater tone bookkeeping and comb synthesis.

The heater line is shared: one wideband input feeds every channel through
that channel's band-pass filter, so a tone aimed at one filter leaks into
the others at their stopband floor.  Filters are Lorentzian passbands with a
hard stopband floor; the heater path is modelled as a power envelope (the
GHz carrier itself is never sampled), and powers from distinct heater tones
add incoherently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dsp import TimeTrace
from .units import db_to_power_ratio, dbm_to_watts, tone_amplitude_volts

__all__ = [
    "FilterParams",
    "ToneSpec",
    "PulseSpec",
    "TriggerPattern",
    "filter_transmission",
    "heater_power_delivered",
    "make_probe_comb",
    "schedule_heaters",
]


@dataclass(frozen=True)
class FilterParams:
    """One heater band-pass filter.

    Passband is a Lorentzian in power: IL / (1 + (2 (f - f_c)/fwhm)^2),
    clipped from below by the stopband floor.  stopband_floors optionally
    lists (frequency, floor_db) pairs giving a different floor near other
    filters' centers; the floor in effect at f is the one whose listed
    frequency is closest (falling back to the scalar default).
    """

    f_center_hz: float
    fwhm_hz: float
    insertion_loss_db: float = 0.0
    stopband_floor_db: float = -18.0
    stopband_floors: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.f_center_hz) or self.f_center_hz <= 0.0:
            raise ValueError(f"filter center must be finite and > 0 Hz, got {self.f_center_hz}")
        if not math.isfinite(self.fwhm_hz) or self.fwhm_hz <= 0.0:
            raise ValueError(f"filter fwhm must be finite and > 0 Hz, got {self.fwhm_hz}")
        if not math.isfinite(self.insertion_loss_db) or self.insertion_loss_db > 0.0:
            raise ValueError(
                f"insertion loss must be finite and <= 0 dB, got {self.insertion_loss_db}")
        if not math.isfinite(self.stopband_floor_db) or self.stopband_floor_db >= 0.0:
            raise ValueError(
                f"stopband floor must be finite and < 0 dB, got {self.stopband_floor_db}")
        if self.stopband_floors is not None:
            floors = tuple((float(f), float(db)) for f, db in self.stopband_floors)
            for f, db in floors:
                if not math.isfinite(f) or f <= 0.0:
                    raise ValueError(f"stopband floor frequency must be > 0 Hz, got {f}")
                if not math.isfinite(db) or db >= 0.0:
                    raise ValueError(f"stopband floor must be < 0 dB, got {db}")
            object.__setattr__(self, "stopband_floors", floors)

    def floor_db_at(self, f_hz: float) -> float:
        if not self.stopband_floors:
            return self.stopband_floor_db
        best = min(self.stopband_floors, key=lambda pair: abs(pair[0] - f_hz))
        return best[1]


def filter_transmission(filt: FilterParams, f_hz: float) -> float:
    """Power transmission |H(f)|^2 of the filter, linear scale in [0, 1].

    max(Lorentzian passband, stopband floor); both include the insertion
    loss at the passband peak.
    """
    if not math.isfinite(f_hz) or f_hz <= 0.0:
        raise ValueError(f"frequency must be finite and > 0 Hz, got {f_hz}")
    il = db_to_power_ratio(filt.insertion_loss_db)
    detuning = 2.0 * (f_hz - filt.f_center_hz) / filt.fwhm_hz
    passband = il / (1.0 + detuning * detuning)
    floor = db_to_power_ratio(filt.floor_db_at(f_hz))
    return max(passband, floor)


@dataclass(frozen=True)
class ToneSpec:
    """One CW tone: frequency, source power, initial phase."""

    f_hz: float
    p_dbm: float
    phase_rad: float = 0.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.f_hz) or self.f_hz <= 0.0:
            raise ValueError(f"tone frequency must be finite and > 0 Hz, got {self.f_hz}")
        if not math.isfinite(self.p_dbm):
            raise ValueError(f"tone power must be finite, got {self.p_dbm}")
        if not math.isfinite(self.phase_rad):
            raise ValueError(f"tone phase must be finite, got {self.phase_rad}")


@dataclass(frozen=True)
class PulseSpec:
    """A heater tone gated on for [t_start, t_start + duration)."""

    tone: ToneSpec
    t_start_s: float
    duration_s: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.t_start_s) or self.t_start_s < 0.0:
            raise ValueError(f"pulse start must be finite and >= 0 s, got {self.t_start_s}")
        if not math.isfinite(self.duration_s) or self.duration_s <= 0.0:
            raise ValueError(f"pulse duration must be finite and > 0 s, got {self.duration_s}")

    def active_at(self, t_s: float) -> bool:
        return self.t_start_s <= t_s < self.t_start_s + self.duration_s


@dataclass(frozen=True)
class TriggerPattern:
    """On/off heater bits, ordered by increasing bolometer probe frequency.

    The string label reads left to right in that same order, so for three
    channels "001" fires only the highest-probe-frequency bolometer's
    heater.
    """

    bits: tuple[bool, ...]

    def __post_init__(self) -> None:
        if not 1 <= len(self.bits) <= 16:
            raise ValueError(f"pattern length must be in [1, 16], got {len(self.bits)}")
        object.__setattr__(self, "bits", tuple(bool(b) for b in self.bits))

    @classmethod
    def from_label(cls, label: str) -> "TriggerPattern":
        if not label or any(c not in "01" for c in label):
            raise ValueError(f"pattern label must be a non-empty string of 0/1, got {label!r}")
        return cls(tuple(c == "1" for c in label))

    @property
    def label(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)

    @property
    def value(self) -> int:
        return int(self.label, 2) if self.bits else 0

    def __len__(self) -> int:
        return len(self.bits)

    @classmethod
    def all_patterns(cls, n_channels: int) -> list["TriggerPattern"]:
        """All 2**n patterns in ascending label order."""
        if not 1 <= n_channels <= 16:
            raise ValueError(f"channel count must be in [1, 16], got {n_channels}")
        return [cls.from_label(format(v, f"0{n_channels}b")) for v in range(2 ** n_channels)]


def heater_power_delivered(filters, tones, channel: int) -> float:
    """Total heater power (W) reaching the absorber of one channel.

    Each tone passes the channel's own filter evaluated at the tone
    frequency; powers add incoherently.  An empty tone list delivers 0 W.
    """
    filters = list(filters)
    if not 0 <= channel < len(filters):
        raise ValueError(f"channel {channel} out of range for {len(filters)} filters")
    filt = filters[channel]
    total = 0.0
    for tone in tones:
        total += dbm_to_watts(tone.p_dbm) * filter_transmission(filt, tone.f_hz)
    return total


def make_probe_comb(tones, sample_rate_hz: float, duration_s: float,
                    z0_ohm: float = 50.0, t0_s: float = 0.0) -> TimeTrace:
    """Synthesize the sum of probe tones as a real voltage trace.

    v(t) = sum_k a_k cos(2 pi f_k t + phi_k) with a_k = sqrt(2 P_k Z0).
    Every tone must satisfy sample_rate > 2 f_k; violations name the
    offending tone.  An empty tone list gives a zero trace.
    """
    if not math.isfinite(sample_rate_hz) or sample_rate_hz <= 0.0:
        raise ValueError(f"sample rate must be finite and > 0, got {sample_rate_hz}")
    if not math.isfinite(duration_s) or duration_s <= 0.0:
        raise ValueError(f"duration must be finite and > 0 s, got {duration_s}")
    n = round(duration_s * sample_rate_hz)
    if n < 1 or abs(n - duration_s * sample_rate_hz) > 1e-6:
        raise ValueError(
            f"duration {duration_s} s must be an integer number of samples at "
            f"{sample_rate_hz} S/s")
    tones = list(tones)
    for tone in tones:
        if 2.0 * tone.f_hz >= sample_rate_hz:
            raise ValueError(
                f"tone at {tone.f_hz:.6g} Hz violates Nyquist at {sample_rate_hz:.6g} S/s")
    t = t0_s + np.arange(n) / sample_rate_hz
    samples = np.zeros(n)
    for tone in tones:
        a = tone_amplitude_volts(tone.p_dbm, z0_ohm)
        samples += a * np.cos(2.0 * np.pi * tone.f_hz * t + tone.phase_rad)
    return TimeTrace(sample_rate_hz, t0_s, samples)


def schedule_heaters(pattern: TriggerPattern, filters, channel_map,
                     p_dbm: float, t_start_s: float, duration_s: float) -> list[PulseSpec]:
    """Heater pulses implementing a trigger pattern.

    Channel i's bit, when set, produces one pulse at the center of the
    filter assigned to channel i by channel_map, all sharing power, start
    and duration.
    """
    filters = list(filters)
    channel_map = list(channel_map)
    if len(pattern) != len(channel_map):
        raise ValueError(
            f"pattern length {len(pattern)} does not match {len(channel_map)} channels")
    if sorted(channel_map) != list(range(len(filters))):
        raise ValueError(f"channel_map {channel_map} is not a bijection onto the filters")
    pulses = []
    for ch, bit in enumerate(pattern.bits):
        if not bit:
            continue
        filt = filters[channel_map[ch]]
        tone = ToneSpec(f_hz=filt.f_center_hz, p_dbm=p_dbm)
        pulses.append(PulseSpec(tone=tone, t_start_s=t_start_s, duration_s=duration_s))
    return pulses
