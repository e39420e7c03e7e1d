"""Physical parameter types, validation, and calibration conversions.

Frequencies and rates are angular (rad/s) everywhere inside the package.
The command line layer multiplies user-facing Hz values by 2*pi before
anything else sees them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

HBAR = 1.054571817e-34  # J s, CODATA 2018
KB = 1.380649e-23       # J / K, exact since the 2019 SI redefinition


@dataclass(frozen=True)
class Violation:
    """One failed validity check, with a stable machine-readable code."""

    code: str
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.field}: {self.message} [{self.code}]"


@dataclass(frozen=True)
class OscillatorParams:
    """One damped harmonic mode coupled to a thermal bath.

    Parameters
    ----------
    omega : float
        Resonance frequency (rad/s).
    gamma : float
        Energy damping rate (rad/s), full linewidth.
    n_bath : float
        Bath occupation the mode relaxes to when uncoupled.
    """

    omega: float
    gamma: float
    n_bath: float

    @property
    def quality_factor(self) -> float:
        return self.omega / self.gamma if self.gamma > 0 else math.inf


@dataclass(frozen=True)
class CoupledSystem:
    """Membrane and collective spin coupled through a delayed light link.

    ``g`` is the single-pass coupling rate; the observed normal-mode
    splitting at resonance is 2 g.  ``tau`` is the one-way propagation
    delay between the oscillators, so a signal completes the feedback
    loop after 2 tau.  ``eta_sq`` is the power transmission between the
    oscillators; the lost fraction enters as extra vacuum noise.
    ``gamma_meas_m`` / ``gamma_meas_s`` are measurement (backaction)
    rates; zero turns the corresponding optical noise drive off.
    """

    membrane: OscillatorParams
    spin: OscillatorParams
    g: float
    tau: float
    eta_sq: float = 0.8
    gamma_meas_m: float = 0.0
    gamma_meas_s: float = 0.0

    @property
    def detuning(self) -> float:
        """Spin-membrane detuning (rad/s), positive when the spin is higher."""
        return self.spin.omega - self.membrane.omega


def _check_finite(value: float, field: str, out: list[Violation]) -> bool:
    if not math.isfinite(value):
        out.append(Violation("non_finite", field, f"value {value!r} is not finite"))
        return False
    return True


def validate(system: CoupledSystem) -> list[Violation]:
    """Collect every violated invariant of ``system``.

    Total over all float inputs: never raises, returns an empty list for
    a usable parameter set.
    """

    out: list[Violation] = []
    for name, osc in (("membrane", system.membrane), ("spin", system.spin)):
        if _check_finite(osc.omega, f"{name}.omega", out) and osc.omega <= 0:
            out.append(Violation("omega_nonpositive", f"{name}.omega",
                                 f"resonance frequency must be > 0, got {osc.omega}"))
        if _check_finite(osc.gamma, f"{name}.gamma", out) and osc.gamma < 0:
            out.append(Violation("gamma_negative", f"{name}.gamma",
                                 f"damping rate must be >= 0, got {osc.gamma}"))
        if _check_finite(osc.n_bath, f"{name}.n_bath", out) and osc.n_bath < 0:
            out.append(Violation("n_bath_negative", f"{name}.n_bath",
                                 f"bath occupation must be >= 0, got {osc.n_bath}"))
    if _check_finite(system.g, "g", out) and system.g < 0:
        out.append(Violation("g_negative", "g", f"coupling rate must be >= 0, got {system.g}"))
    if _check_finite(system.tau, "tau", out) and system.tau < 0:
        out.append(Violation("tau_negative", "tau", f"delay must be >= 0, got {system.tau}"))
    if _check_finite(system.eta_sq, "eta_sq", out) and not 0.0 < system.eta_sq <= 1.0:
        out.append(Violation("eta_sq_out_of_range", "eta_sq",
                             f"power transmission must be in (0, 1], got {system.eta_sq}"))
    for field in ("gamma_meas_m", "gamma_meas_s"):
        value = getattr(system, field)
        if _check_finite(value, field, out) and value < 0:
            out.append(Violation("gamma_meas_negative", field,
                                 f"measurement rate must be >= 0, got {value}"))
    return out


def require_valid(system: CoupledSystem) -> None:
    """Raise ValueError listing all violations, or return silently."""

    violations = validate(system)
    if violations:
        raise ValueError("invalid system: " + "; ".join(str(v) for v in violations))


def thermal_occupation(temperature: float, omega: float) -> float:
    """Bose occupation 1 / (exp(hbar omega / kB T) - 1).

    Returns 0 at T = 0 by continuity.  Raises ValueError for a negative
    temperature or a non-positive frequency.
    """

    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if omega <= 0:
        raise ValueError(f"omega must be > 0, got {omega}")
    if temperature == 0:
        return 0.0
    return 1.0 / math.expm1(HBAR * omega / (KB * temperature))


@dataclass(frozen=True)
class CalibrationParams:
    """Measurement-chain calibration constants, all optional.

    ``alpha1`` is the single-quantum Faraday rotation angle and stays a
    symbolic input: no numeric default is published for it, callers must
    supply their own calibration.  If ``x_zpf``, ``m_eff`` and
    ``omega_m`` are all given they must satisfy
    x_zpf = sqrt(hbar / (2 m_eff omega_m)) to 1e-9 relative.
    """

    alpha1: float | None = None     # rad per spin quantum
    n_atoms: float | None = None
    kappa: float | None = None      # cavity linewidth (rad/s)
    g0: float | None = None         # single-photon optomechanical rate (rad/s)
    eta_c: float | None = None      # detection efficiency of the membrane readout
    v0: float | None = None         # volts per x_zpf of displacement
    x_zpf: float | None = None      # zero-point displacement (m)
    m_eff: float | None = None      # effective mass (kg)
    omega_m: float | None = None    # membrane frequency (rad/s), for the x_zpf check

    def __post_init__(self) -> None:
        if self.x_zpf is not None and self.m_eff is not None and self.omega_m is not None:
            expected = zero_point_displacement(self.m_eff, self.omega_m)
            if abs(self.x_zpf - expected) > 1e-9 * expected:
                raise ValueError(
                    f"x_zpf={self.x_zpf} inconsistent with m_eff and omega_m "
                    f"(expected {expected})")


def zero_point_displacement(m_eff: float, omega: float) -> float:
    """x_zpf = sqrt(hbar / (2 m_eff omega))."""

    if m_eff <= 0 or omega <= 0:
        raise ValueError("m_eff and omega must be > 0")
    return math.sqrt(HBAR / (2.0 * m_eff * omega))


@dataclass(frozen=True)
class OccupationReading:
    """A converted occupation; ``sub_ground`` marks values below zero."""

    value: float
    sub_ground: bool


def spin_occupation_from_faraday(theta_rms: float, calib: CalibrationParams) -> OccupationReading:
    """Convert an RMS Faraday rotation angle to a spin occupation.

    Uses n + 1/2 = 2 theta_rms^2 / (alpha1^2 N_atoms).  The raw value is
    returned even if negative (flagged) so calibration errors stay visible.
    """

    if calib.alpha1 is None or calib.n_atoms is None:
        raise ValueError("alpha1 and n_atoms are required for the Faraday conversion")
    if calib.alpha1 <= 0 or calib.n_atoms <= 0:
        raise ValueError("alpha1 and n_atoms must be > 0")
    value = 2.0 * theta_rms ** 2 / (calib.alpha1 ** 2 * calib.n_atoms) - 0.5
    return OccupationReading(value, value < 0.0)


def membrane_occupation_from_voltage(v_rms: float, calib: CalibrationParams) -> OccupationReading:
    """Convert an RMS photodetector voltage to a membrane occupation.

    Uses n + 1/2 = (v_rms / (eta_c v0))^2 (kappa / (2 g0))^2, the
    sideband-resolved cavity readout calibration.
    """

    needed = {"kappa": calib.kappa, "g0": calib.g0, "eta_c": calib.eta_c, "v0": calib.v0}
    missing = [k for k, v in needed.items() if v is None]
    if missing:
        raise ValueError(f"missing calibration fields: {', '.join(missing)}")
    if any(v <= 0 for v in needed.values()):  # type: ignore[operator]
        raise ValueError("kappa, g0, eta_c, v0 must all be > 0")
    amplitude = (v_rms / (calib.eta_c * calib.v0)) * (calib.kappa / (2.0 * calib.g0))
    value = amplitude ** 2 - 0.5
    return OccupationReading(value, value < 0.0)
