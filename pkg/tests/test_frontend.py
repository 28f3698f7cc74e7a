"""Room-temperature side of the readout: heater filters, tone synthesis,
trigger patterns, and heater scheduling."""

import math

import numpy as np
import pytest

from bolomux.frontend import (
    FilterParams,
    PulseSpec,
    ToneSpec,
    TriggerPattern,
    filter_transmission,
    heater_power_delivered,
    make_probe_comb,
    schedule_heaters,
)
from bolomux.units import dbm_to_watts


def make_filter(**overrides) -> FilterParams:
    base = dict(f_center_hz=5.0e9, fwhm_hz=100e6, insertion_loss_db=0.0,
                stopband_floor_db=-15.0)
    base.update(overrides)
    return FilterParams(**base)


# -------------------------------------------------------------- filter shape


def test_transmission_peak_and_half_power():
    filt = make_filter()
    assert filter_transmission(filt, filt.f_center_hz) == pytest.approx(1.0, abs=1e-12)
    # Lorentzian in power: half transmission at +-fwhm/2
    for sign in (+1, -1):
        t = filter_transmission(filt, filt.f_center_hz + sign * filt.fwhm_hz / 2)
        assert t == pytest.approx(0.5, rel=1e-12)


def test_transmission_insertion_loss_scales_peak():
    filt = make_filter(insertion_loss_db=-3.0)
    t = filter_transmission(filt, filt.f_center_hz)
    assert t == pytest.approx(10 ** -0.3, rel=1e-12)


def test_transmission_floor_far_from_passband():
    filt = make_filter(stopband_floor_db=-15.0)
    assert filter_transmission(filt, 2.0e9) == pytest.approx(10 ** -1.5, rel=1e-12)
    assert filter_transmission(filt, 9.0e9) == pytest.approx(10 ** -1.5, rel=1e-12)


def test_transmission_never_below_floor_never_above_peak():
    filt = make_filter(stopband_floor_db=-20.0)
    freqs = np.linspace(1e9, 9e9, 1001)
    values = np.array([filter_transmission(filt, f) for f in freqs])
    assert np.all(values >= 10 ** -2.0 - 1e-15)
    assert np.all(values <= 1.0 + 1e-15)


def test_transmission_frequency_dependent_floors():
    filt = make_filter(stopband_floors=[(4.0e9, -20.0), (6.0e9, -10.0)])
    # the floor in effect is the listed one closest in frequency
    assert filt.floor_db_at(4.2e9) == -20.0
    assert filt.floor_db_at(5.9e9) == -10.0
    assert filter_transmission(filt, 4.0e9) == pytest.approx(10 ** -2.0, rel=1e-12)
    assert filter_transmission(filt, 6.0e9) == pytest.approx(10 ** -1.0, rel=1e-12)


def test_transmission_floor_fallback_without_list():
    filt = make_filter(stopband_floor_db=-17.0, stopband_floors=None)
    assert filt.floor_db_at(1.0e9) == -17.0


def test_filter_validation():
    with pytest.raises(ValueError):
        make_filter(f_center_hz=0.0)
    with pytest.raises(ValueError):
        make_filter(fwhm_hz=-1.0)
    with pytest.raises(ValueError):
        make_filter(insertion_loss_db=1.0)
    with pytest.raises(ValueError):
        make_filter(stopband_floor_db=0.0)
    with pytest.raises(ValueError):
        make_filter(stopband_floors=[(4.0e9, 1.0)])
    with pytest.raises(ValueError):
        filter_transmission(make_filter(), -1.0)


# ----------------------------------------------------------- delivered power


def test_heater_power_matched_channel():
    filters = [make_filter(f_center_hz=4.4e9), make_filter(f_center_hz=5.8e9)]
    tones = [ToneSpec(f_hz=4.4e9, p_dbm=-135.0)]
    p = heater_power_delivered(filters, tones, 0)
    assert p == pytest.approx(dbm_to_watts(-135.0), rel=1e-12)
    assert p == pytest.approx(3.1623e-17, rel=1e-4)


def test_heater_power_mismatched_channel_hits_floor():
    filters = [make_filter(f_center_hz=4.4e9, stopband_floor_db=-12.0),
               make_filter(f_center_hz=5.8e9)]
    tones = [ToneSpec(f_hz=5.8e9, p_dbm=-135.0)]
    p = heater_power_delivered(filters, tones, 0)
    assert p == pytest.approx(dbm_to_watts(-135.0) * 10 ** -1.2, rel=1e-9)


def test_heater_power_sums_incoherently():
    filters = [make_filter(f_center_hz=4.4e9, stopband_floor_db=-12.0)]
    t_matched = ToneSpec(f_hz=4.4e9, p_dbm=-140.0)
    t_leak = ToneSpec(f_hz=8.0e9, p_dbm=-130.0)
    both = heater_power_delivered(filters, [t_matched, t_leak], 0)
    solo = (heater_power_delivered(filters, [t_matched], 0)
            + heater_power_delivered(filters, [t_leak], 0))
    assert both == pytest.approx(solo, rel=1e-12)


def test_heater_power_empty_and_bad_channel():
    filters = [make_filter()]
    assert heater_power_delivered(filters, [], 0) == 0.0
    with pytest.raises(ValueError):
        heater_power_delivered(filters, [], 1)
    with pytest.raises(ValueError):
        heater_power_delivered(filters, [], -1)


def test_heater_power_default_chip_selectivity(default_chip):
    # each filter passes its own band at full strength and attenuates the
    # other two by at least 10 dB
    filters = default_chip.filters
    for i, filt in enumerate(filters):
        for j, other in enumerate(filters):
            tone = ToneSpec(f_hz=other.f_center_hz, p_dbm=-135.0)
            p = heater_power_delivered(filters, [tone], i)
            if i == j:
                assert p == pytest.approx(dbm_to_watts(-135.0), rel=1e-9)
            else:
                assert p < dbm_to_watts(-135.0) * 0.1


# ------------------------------------------------------------ tone synthesis


def test_comb_single_tone_amplitude_and_phase():
    tone = ToneSpec(f_hz=10e6, p_dbm=0.0, phase_rad=0.3)
    trace = make_probe_comb([tone], 1e9, 1e-6)
    assert trace.sample_rate_hz == 1e9
    assert len(trace.samples) == 1000
    # 0 dBm into 50 ohm: a = sqrt(2 * 1 mW * 50 ohm) = 0.3162 V
    assert np.max(np.abs(trace.samples)) == pytest.approx(math.sqrt(0.1), rel=1e-3)
    assert trace.samples[0] == pytest.approx(math.sqrt(0.1) * math.cos(0.3), rel=1e-12)


def test_comb_spectrum_has_one_line_per_tone():
    tones = [ToneSpec(f_hz=10e6, p_dbm=0.0),
             ToneSpec(f_hz=20e6, p_dbm=-6.0),
             ToneSpec(f_hz=40e6, p_dbm=-12.0)]
    fs, dur = 1e9, 1e-6
    trace = make_probe_comb(tones, fs, dur)
    spectrum = np.abs(np.fft.rfft(trace.samples)) / len(trace.samples) * 2.0
    bins = np.round(np.array([t.f_hz for t in tones]) * dur).astype(int)
    for tone, b in zip(tones, bins):
        expected = math.sqrt(2 * dbm_to_watts(tone.p_dbm) * 50.0)
        assert spectrum[b] == pytest.approx(expected, rel=1e-9)
    # everything off the comb lines is numerically zero
    mask = np.ones(spectrum.size, dtype=bool)
    mask[bins] = False
    mask[0] = False
    assert np.max(spectrum[mask]) < 1e-12


def test_comb_power_parseval():
    tones = [ToneSpec(f_hz=10e6, p_dbm=-3.0), ToneSpec(f_hz=25e6, p_dbm=-9.0)]
    trace = make_probe_comb(tones, 1e9, 2e-6)
    mean_square = float(np.mean(trace.samples ** 2))
    expected = sum(2 * dbm_to_watts(t.p_dbm) * 50.0 / 2 for t in tones)
    assert mean_square == pytest.approx(expected, rel=1e-6)


def test_comb_time_origin_offset():
    tone = ToneSpec(f_hz=10e6, p_dbm=0.0)
    t0 = 3.7e-7
    trace = make_probe_comb([tone], 1e9, 1e-6, t0_s=t0)
    assert trace.t0_s == t0
    expected = math.sqrt(0.1) * math.cos(2 * math.pi * tone.f_hz * t0)
    assert trace.samples[0] == pytest.approx(expected, rel=1e-9)


def test_comb_empty_tone_list_is_silence():
    trace = make_probe_comb([], 1e9, 1e-6)
    assert np.all(trace.samples == 0.0)


def test_comb_rejects_nyquist_violation():
    with pytest.raises(ValueError, match="Nyquist"):
        make_probe_comb([ToneSpec(f_hz=600e6, p_dbm=-20.0)], 1e9, 1e-6)


def test_comb_rejects_fractional_sample_count():
    with pytest.raises(ValueError):
        make_probe_comb([ToneSpec(f_hz=10e6, p_dbm=0.0)], 1e9, 1.0000005e-6)


# ------------------------------------------------------------ pulses


def test_pulse_window_is_half_open():
    pulse = PulseSpec(tone=ToneSpec(f_hz=4.4e9, p_dbm=-135.0),
                      t_start_s=40e-6, duration_s=10e-6)
    assert not pulse.active_at(39.999e-6)
    assert pulse.active_at(40e-6)
    assert pulse.active_at(49.999e-6)
    assert not pulse.active_at(50e-6)


def test_pulse_validation():
    tone = ToneSpec(f_hz=4.4e9, p_dbm=-135.0)
    with pytest.raises(ValueError):
        PulseSpec(tone=tone, t_start_s=-1e-6, duration_s=1e-6)
    with pytest.raises(ValueError):
        PulseSpec(tone=tone, t_start_s=0.0, duration_s=0.0)


# ------------------------------------------------------- trigger patterns


def test_pattern_label_round_trip():
    for label in ("000", "001", "010", "101", "111", "1", "1010"):
        pat = TriggerPattern.from_label(label)
        assert pat.label == label
        assert TriggerPattern.from_label(pat.label) == pat


def test_pattern_value_is_big_endian():
    assert TriggerPattern.from_label("001").value == 1
    assert TriggerPattern.from_label("100").value == 4
    assert TriggerPattern.from_label("111").value == 7


def test_pattern_all_patterns_ascending():
    pats = TriggerPattern.all_patterns(3)
    assert len(pats) == 8
    assert [p.value for p in pats] == list(range(8))
    assert pats[0].label == "000"
    assert pats[-1].label == "111"


def test_pattern_validation():
    with pytest.raises(ValueError):
        TriggerPattern.from_label("")
    with pytest.raises(ValueError):
        TriggerPattern.from_label("102")
    with pytest.raises(ValueError):
        TriggerPattern.all_patterns(0)
    with pytest.raises(ValueError):
        TriggerPattern.all_patterns(17)


# ------------------------------------------------------- heater scheduling


def test_schedule_routes_bits_through_channel_map(default_chip):
    filters = default_chip.filters
    cmap = default_chip.channel_map
    pulses = schedule_heaters(TriggerPattern.from_label("001"), filters, cmap,
                              -135.0, 40e-6, 10e-6)
    assert len(pulses) == 1
    # last bit is channel 2; its filter under the shipped map is the 7.6 GHz one
    assert pulses[0].tone.f_hz == filters[cmap[2]].f_center_hz
    assert pulses[0].tone.p_dbm == -135.0
    assert pulses[0].t_start_s == 40e-6
    assert pulses[0].duration_s == 10e-6


def test_schedule_all_on_uses_every_filter_once(default_chip):
    filters = default_chip.filters
    pulses = schedule_heaters(TriggerPattern.from_label("111"), filters,
                              default_chip.channel_map, -135.0, 40e-6, 10e-6)
    assert sorted(p.tone.f_hz for p in pulses) == sorted(
        f.f_center_hz for f in filters)


def test_schedule_all_off_is_empty(default_chip):
    pulses = schedule_heaters(TriggerPattern.from_label("000"),
                              default_chip.filters, default_chip.channel_map,
                              -135.0, 40e-6, 10e-6)
    assert pulses == []


def test_schedule_validation(default_chip):
    filters = default_chip.filters
    with pytest.raises(ValueError):
        schedule_heaters(TriggerPattern.from_label("01"), filters,
                         default_chip.channel_map, -135.0, 40e-6, 10e-6)
    with pytest.raises(ValueError):
        schedule_heaters(TriggerPattern.from_label("111"), filters,
                         (0, 0, 1), -135.0, 40e-6, 10e-6)
