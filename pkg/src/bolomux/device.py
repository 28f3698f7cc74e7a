"""Single-channel bolometer model: resonator reflection and thermal state.

The device is a one-port resonant circuit whose resonance frequency is a
linear function of the electron temperature of a normal-metal absorber, plus
a single-pole thermal model for that temperature.  Probe power absorbed in
the resonator heats the absorber, which moves the resonance, which changes
the absorption: the electrothermal feedback loop closed by
:func:`solve_operating_point`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "BolometerParams",
    "BolometerState",
    "OperatingPoint",
    "SolverError",
    "reflection_coefficient",
    "absorbed_probe_power",
    "thermal_step",
    "solve_operating_point",
]


class SolverError(RuntimeError):
    """Operating-point iteration failed to converge."""


@dataclass(frozen=True)
class BolometerParams:
    """Static parameters of one bolometer channel.

    f_r0_hz is the resonance at the bath temperature; heating by t_e - t_bath
    pulls it down by dfdt_hz_per_k per kelvin.  kappa_* are linewidths in Hz
    (external coupling and internal loss); their sum is the total linewidth.
    g_th_w_per_k and tau_th_s define the thermal link; heat capacity is their
    product.
    """

    f_r0_hz: float
    kappa_ext_hz: float
    kappa_int_hz: float
    tau_th_s: float
    g_th_w_per_k: float
    dfdt_hz_per_k: float
    t_bath_k: float
    p_nonlinear_dbm: float = -125.0

    def __post_init__(self) -> None:
        positive = {
            "f_r0_hz": self.f_r0_hz,
            "kappa_ext_hz": self.kappa_ext_hz,
            "tau_th_s": self.tau_th_s,
            "g_th_w_per_k": self.g_th_w_per_k,
            "t_bath_k": self.t_bath_k,
        }
        for name, value in positive.items():
            if not math.isfinite(value) or value <= 0.0:
                raise ValueError(f"{name} must be finite and > 0, got {value}")
        for name, value in (("kappa_int_hz", self.kappa_int_hz),
                            ("dfdt_hz_per_k", self.dfdt_hz_per_k)):
            if not math.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if not math.isfinite(self.p_nonlinear_dbm):
            raise ValueError("p_nonlinear_dbm must be finite")

    @property
    def kappa_total_hz(self) -> float:
        return self.kappa_ext_hz + self.kappa_int_hz

    @property
    def heat_capacity_j_per_k(self) -> float:
        return self.g_th_w_per_k * self.tau_th_s

    def state_at(self, t_e_k: float) -> "BolometerState":
        """State with the resonance consistent with electron temperature t_e_k."""
        if not math.isfinite(t_e_k) or t_e_k <= 0.0:
            raise ValueError(f"electron temperature must be finite and > 0, got {t_e_k}")
        if t_e_k < self.t_bath_k - 1e-12:
            raise ValueError(
                f"electron temperature {t_e_k} below bath {self.t_bath_k}; "
                "nothing in this model cools below the bath"
            )
        f_r = self.f_r0_hz - self.dfdt_hz_per_k * (t_e_k - self.t_bath_k)
        return BolometerState(t_e_k=t_e_k, f_r_hz=f_r)


@dataclass(frozen=True)
class BolometerState:
    """Instantaneous electron temperature and the resonance it implies.

    Build through BolometerParams.state_at so f_r_hz stays consistent with
    the linearized thermometry.
    """

    t_e_k: float
    f_r_hz: float


def _gamma(f_hz, f_r_hz, kappa_ext_hz: float, kappa_int_hz: float):
    """Complex reflection; broadcasts over f_hz and f_r_hz."""
    detuning = np.asarray(f_hz, dtype=float) - f_r_hz
    half_total = 0.5 * (kappa_ext_hz + kappa_int_hz)
    return 1.0 - kappa_ext_hz / (1j * detuning + half_total)


def reflection_coefficient(params: BolometerParams, state: BolometerState, f_hz):
    """One-port reflection Gamma(f) of the resonator at the given state.

    Gamma = 1 - kappa_ext / (i (f - f_r) + (kappa_ext + kappa_int)/2), all
    rates in Hz.  |Gamma| <= 1 for any passive device (kappa_int >= 0); at
    critical coupling (kappa_ext == kappa_int) the on-resonance reflection
    vanishes.  Scalar in, scalar out; array in, array out.
    """
    out = _gamma(f_hz, state.f_r_hz, params.kappa_ext_hz, params.kappa_int_hz)
    if np.isscalar(f_hz) or np.ndim(f_hz) == 0:
        return complex(out)
    return out


def absorbed_probe_power(params: BolometerParams, state: BolometerState,
                         f_p_hz: float, p_in_w: float) -> float:
    """Probe power dissipated in the device: p_in * (1 - |Gamma|^2)."""
    if not math.isfinite(p_in_w) or p_in_w < 0.0:
        raise ValueError(f"incident power must be finite and >= 0 W, got {p_in_w}")
    gamma = _gamma(f_p_hz, state.f_r_hz, params.kappa_ext_hz, params.kappa_int_hz)
    frac = 1.0 - float(np.abs(gamma)) ** 2
    # clamp fp droppings; the fraction is in [0, 1] exactly in real arithmetic
    return p_in_w * min(max(frac, 0.0), 1.0)


def thermal_step(params: BolometerParams, state: BolometerState,
                 dt_s: float, p_abs_w: float) -> BolometerState:
    """Advance the electron temperature by dt_s under constant absorbed power.

    Single-pole model, integrated exactly:
    T(t+dt) = T_inf + (T - T_inf) exp(-dt/tau) with
    T_inf = t_bath + p_abs/g_th.  Exact integration makes the update a
    semigroup: two half steps equal one full step.
    """
    if not math.isfinite(dt_s) or dt_s < 0.0:
        raise ValueError(f"dt must be finite and >= 0 s, got {dt_s}")
    if not math.isfinite(p_abs_w) or p_abs_w < 0.0:
        raise ValueError(f"absorbed power must be finite and >= 0 W, got {p_abs_w}")
    t_inf = params.t_bath_k + p_abs_w / params.g_th_w_per_k
    t_new = t_inf + (state.t_e_k - t_inf) * math.exp(-dt_s / params.tau_th_s)
    return params.state_at(t_new)


@dataclass(frozen=True)
class OperatingPoint:
    """Self-consistent steady state under a CW probe tone."""

    t_star_k: float
    f_r_star_hz: float
    gamma: complex
    p_abs_w: float
    residual_w: float
    iterations: int
    stable: bool
    multivalued: bool


def _steady_residual(params: BolometerParams, f_p_hz: float, p_probe_w: float,
                     extra_power_w: float, t_e_k):
    """g_th (T - t_bath) - p_absorbed(T); vectorized over t_e_k."""
    t_e = np.asarray(t_e_k, dtype=float)
    f_r = params.f_r0_hz - params.dfdt_hz_per_k * (t_e - params.t_bath_k)
    gamma = _gamma(f_p_hz, f_r, params.kappa_ext_hz, params.kappa_int_hz)
    p_abs = p_probe_w * np.clip(1.0 - np.abs(gamma) ** 2, 0.0, 1.0) + extra_power_w
    return params.g_th_w_per_k * (t_e - params.t_bath_k) - p_abs


def _count_sign_changes(values: np.ndarray) -> int:
    signs = np.sign(values)
    nonzero = signs[signs != 0]
    if nonzero.size < 2:
        return 0
    return int(np.count_nonzero(np.diff(nonzero) != 0))


def solve_operating_point(params: BolometerParams, f_p_hz: float, p_probe_w: float,
                          extra_power_w: float = 0.0, damping: float = 0.5,
                          tol_k: float = 1e-9, max_iter: int = 10_000,
                          scan_points: int = 2001) -> OperatingPoint:
    """Solve the electrothermal fixed point for a CW probe at f_p_hz.

    Damped fixed-point iteration on T <- T + damping * (t_bath +
    p_abs(T)/g_th - T) from T = t_bath.  extra_power_w models any constant
    additional load (e.g. a steady heater tone).  Raises SolverError if the
    temperature step has not fallen below tol_k after max_iter iterations.

    Multivaluedness is detected by a bracketing scan of the steady-state
    residual over T in [t_bath, t_bath + p_total/g_th] on a scan_points
    grid; more than one sign change sets the flag.  Roots closer together
    than the grid pitch are not resolved.
    """
    if not math.isfinite(p_probe_w) or p_probe_w < 0.0:
        raise ValueError(f"probe power must be finite and >= 0 W, got {p_probe_w}")
    if not math.isfinite(extra_power_w) or extra_power_w < 0.0:
        raise ValueError(f"extra power must be finite and >= 0 W, got {extra_power_w}")
    if not 0.0 < damping <= 1.0:
        raise ValueError(f"damping must be in (0, 1], got {damping}")

    # scalar inline of state_at/absorbed_probe_power; this loop dominates
    # sweep runtimes
    ke, ki = params.kappa_ext_hz, params.kappa_int_hz
    half = 0.5 * (ke + ki)
    t_bath, g_th, dfdt = params.t_bath_k, params.g_th_w_per_k, params.dfdt_hz_per_k

    def _p_abs(t_e: float) -> float:
        detuning = f_p_hz - (params.f_r0_hz - dfdt * (t_e - t_bath))
        gamma = 1.0 - ke / complex(half, detuning)
        frac = 1.0 - (gamma.real * gamma.real + gamma.imag * gamma.imag)
        return p_probe_w * min(max(frac, 0.0), 1.0) + extra_power_w

    t_e = t_bath
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        t_target = t_bath + _p_abs(t_e) / g_th
        t_next = t_e + damping * (t_target - t_e)
        step = abs(t_next - t_e)
        t_e = t_next
        if step < tol_k:
            converged = True
            break

    state = params.state_at(t_e)
    p_abs = absorbed_probe_power(params, state, f_p_hz, p_probe_w) + extra_power_w
    residual = params.g_th_w_per_k * (t_e - params.t_bath_k) - p_abs
    if not converged:
        raise SolverError(
            f"operating point did not converge after {max_iter} iterations "
            f"(last residual {residual:.3e} W at T = {t_e:.9f} K)")

    multivalued = False
    p_total = p_probe_w + extra_power_w
    if p_total > 0.0:
        t_hi = params.t_bath_k + p_total / params.g_th_w_per_k
        grid = np.linspace(params.t_bath_k, t_hi, scan_points)
        res_grid = _steady_residual(params, f_p_hz, p_probe_w, extra_power_w, grid)
        multivalued = _count_sign_changes(res_grid) > 1

    return OperatingPoint(
        t_star_k=t_e,
        f_r_star_hz=state.f_r_hz,
        gamma=complex(reflection_coefficient(params, state, f_p_hz)),
        p_abs_w=p_abs,
        residual_w=residual,
        iterations=iterations,
        stable=True,
        multivalued=multivalued,
    )
