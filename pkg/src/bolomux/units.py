"""Unit conversions and deterministic random stream derivation.

Conventions used throughout the package:

* frequencies in Hz, powers in dBm or W, times in s, temperatures in K,
  voltages in V.  Argument and field names carry the unit as a suffix
  (``f_hz``, ``p_dbm``, ``p_w``, ...); converting between dBm and W is
  always explicit, never implied.
* random streams are derived from a single master seed plus a tuple of
  integer labels.  The construction is counter based (Philox keyed through
  a SeedSequence spawn key), so a stream depends only on (master, labels)
  and never on the order in which streams are created.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_DBM_REF_W = 1e-3


def dbm_to_watts(p_dbm: float) -> float:
    """Convert a power in dBm to W.  0 dBm = 1 mW."""
    p_dbm = float(p_dbm)
    if not math.isfinite(p_dbm):
        raise ValueError(f"power must be finite, got {p_dbm}")
    return _DBM_REF_W * 10.0 ** (p_dbm / 10.0)


def watts_to_dbm(p_w: float) -> float:
    """Convert a power in W to dBm.  Requires p_w > 0."""
    p_w = float(p_w)
    if not math.isfinite(p_w) or p_w <= 0.0:
        raise ValueError(f"power must be finite and > 0 W, got {p_w}")
    return 10.0 * math.log10(p_w / _DBM_REF_W)


def db_to_power_ratio(x_db: float) -> float:
    """Convert a dB value to a linear power ratio."""
    x_db = float(x_db)
    if not math.isfinite(x_db):
        raise ValueError(f"dB value must be finite, got {x_db}")
    return 10.0 ** (x_db / 10.0)


def power_ratio_to_db(ratio: float) -> float:
    """Convert a linear power ratio (> 0) to dB."""
    ratio = float(ratio)
    if not math.isfinite(ratio) or ratio <= 0.0:
        raise ValueError(f"power ratio must be finite and > 0, got {ratio}")
    return 10.0 * math.log10(ratio)


def tone_amplitude_volts(p_dbm: float, z0_ohm: float = 50.0) -> float:
    """Peak voltage amplitude of a sinusoid carrying p_dbm into z0_ohm.

    P = a**2 / (2 Z0), hence a = sqrt(2 P Z0).  0 dBm into 50 ohm gives
    0.3162 V.
    """
    if z0_ohm <= 0.0 or not math.isfinite(z0_ohm):
        raise ValueError(f"impedance must be finite and > 0, got {z0_ohm}")
    return math.sqrt(2.0 * dbm_to_watts(p_dbm) * z0_ohm)


_MASTER_MAX = 2**64


@dataclass(frozen=True)
class Seed:
    """Master seed plus a label path identifying one derived stream.

    Children extend the label path; the generator for a given (master,
    labels) pair is always the same regardless of creation order, which is
    what makes multi-threaded experiment drivers reproducible.
    """

    master: int
    labels: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.master, int) or not 0 <= self.master < _MASTER_MAX:
            raise ValueError(f"master seed must be an int in [0, 2**64), got {self.master!r}")
        for lab in self.labels:
            if not isinstance(lab, int) or lab < 0:
                raise ValueError(f"stream labels must be non-negative ints, got {lab!r}")

    def child(self, *labels: int) -> "Seed":
        return Seed(self.master, self.labels + tuple(labels))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.master, spawn_key=self.labels)
        return np.random.Generator(np.random.Philox(ss))


def derive_stream(seed: Seed, *labels: int) -> np.random.Generator:
    """Generator for the stream (seed.master, seed.labels + labels)."""
    return seed.child(*labels).generator()
