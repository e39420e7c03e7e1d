"""Closed-form cooling predictions, steady states, and stability analysis."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .dynamics import CharPoly, build_matrix, char_poly, eigenvalues
from .model import CoupledSystem, require_valid
from .simulator import NoiseSpec

_TWO_PI = 2.0 * math.pi


class UnstableSystemError(RuntimeError):
    """Raised when a steady-state computation is refused for an unstable system."""


class NumericalError(RuntimeError):
    """A linear-algebra result failed its residual or conditioning check."""


def _loop_phase(system: CoupledSystem) -> float:
    """2 omega_m tau folded mod 2 pi, the round-trip phase of the feedback loop."""

    phase = 2.0 * system.membrane.omega * system.tau
    if abs(phase) <= math.pi:
        return phase
    return math.remainder(phase, _TWO_PI)


@dataclass(frozen=True)
class CoolingPrediction:
    """Sympathetic damping rate and frequency-shift prediction.

    ``gamma_sym`` is the extra membrane energy damping produced by the
    spin, ``domega_shift_sq`` the accompanying squared frequency shift.
    ``n_ss_asymptotic`` = n_bath gamma_m / (gamma_m + gamma_sym) is None
    when the total damping is not positive (``diverges`` set).
    """

    gamma_sym: float
    domega_shift_sq: float
    n_ss_asymptotic: float | None
    diverges: bool
    simplified: bool


def _finish_prediction(system: CoupledSystem, gamma_sym: float, shift_sq: float,
                       simplified: bool) -> CoolingPrediction:
    total = system.membrane.gamma + gamma_sym
    diverges = not total > 0.0
    n_ss = None if diverges else system.membrane.n_bath * system.membrane.gamma / total
    return CoolingPrediction(gamma_sym, shift_sq, n_ss, diverges, simplified)


def sympathetic_rate_full(system: CoupledSystem) -> CoolingPrediction:
    """Evaluate the effective-susceptibility rate at the membrane frequency.

    Valid for any detuning; reduces to the simplified form when the two
    resonances are close and the spin response is broad.
    """

    require_valid(system)
    wm, ws = system.membrane.omega, system.spin.omega
    gs = system.spin.gamma
    phase = _loop_phase(system)
    c, s = math.cos(phase), math.sin(phase)
    split = ws ** 2 - wm ** 2
    common = 4.0 * system.g ** 2 * wm * ws / (split ** 2 + (wm * gs) ** 2)
    gamma_sym = common * (gs * c + split / wm * s)
    shift_sq = common * (split * c - wm * gs * s)
    return _finish_prediction(system, gamma_sym, shift_sq, simplified=False)


def sympathetic_rate_simplified(system: CoupledSystem) -> CoolingPrediction:
    """Near-resonant broad-spin limit of the sympathetic cooling rate.

    gamma_sym = 4 g^2 / (4 delta^2 + gamma_s^2)
                * (gamma_s cos(2 omega_m tau) + 2 delta sin(2 omega_m tau)),
    with the matching frequency-shift expression.  At delta = tau = 0 this
    is exactly 4 g^2 / gamma_s.
    """

    require_valid(system)
    delta = system.detuning
    gs = system.spin.gamma
    phase = _loop_phase(system)
    c, s = math.cos(phase), math.sin(phase)
    pref = 4.0 * system.g ** 2 / (4.0 * delta ** 2 + gs ** 2)
    gamma_sym = pref * (gs * c + 2.0 * delta * s)
    shift_sq = pref * system.membrane.omega * (2.0 * delta * c - gs * s)
    return _finish_prediction(system, gamma_sym, shift_sq, simplified=True)


def steady_state_asymptotic(system: CoupledSystem) -> CoolingPrediction:
    """Weak-coupling steady state from the simplified sympathetic rate."""

    return sympathetic_rate_simplified(system)


@dataclass(frozen=True)
class LyapunovSteadyState:
    """Stationary second moments and the occupations they imply."""

    covariance: np.ndarray
    n_membrane: float
    n_spin: float
    residual: float

    def __post_init__(self) -> None:
        self.covariance.flags.writeable = False


def steady_state_lyapunov(system: CoupledSystem, noise: NoiseSpec,
                          gamma_s: float | None = None,
                          omega_s: float | None = None) -> LyapunovSteadyState:
    """Solve M Sigma + Sigma M^T = D for the stationary covariance.

    Refuses (UnstableSystemError) when any mode of -M has a non-negative
    real part, since no stationary state exists there.  The diffusion D is
    the same block-diagonal rotating-frame matrix the simulator steps
    with, so the two routes are consistent by construction.
    """

    mat = build_matrix(system, gamma_s=gamma_s, omega_s=omega_s)
    modes = eigenvalues(mat)
    if modes.real.max() >= 0.0:
        raise UnstableSystemError(
            f"no stationary state: max mode growth rate {modes.real.max():.6g} "
            f"rad/s >= 0 (modes {np.array2string(modes, precision=4)})")
    d = noise.diffusion_matrix(mat.gamma_m, mat.gamma_s)
    sigma = scipy.linalg.solve_continuous_lyapunov(mat.m, d)
    sigma = 0.5 * (sigma + sigma.T)
    residual = np.linalg.norm(mat.m @ sigma + sigma @ mat.m.T - d)
    bound = 1e-10 * max(np.linalg.norm(d), 1e-300)
    if residual > bound:
        raise NumericalError(f"Lyapunov residual {residual:.3e} exceeds {bound:.3e}")
    n_m = 0.5 * (sigma[0, 0] + sigma[1, 1]) - 0.5
    n_s = 0.5 * (sigma[2, 2] + sigma[3, 3]) - 0.5
    return LyapunovSteadyState(sigma, n_m, n_s, residual)


@dataclass(frozen=True)
class StabilityVerdict:
    """Routh-Hurwitz verdict with its eigenvalue cross-check.

    ``minors`` are the leading principal minors of the Hurwitz matrix of
    the scale-normalized polynomial.  ``eigen_check`` is the largest real
    part of the companion-matrix roots (rad/s); ``agreement`` records
    whether both routes give the same verdict.  Disagreements are kept
    visible, never silently resolved.
    """

    stable: bool
    minors: tuple[float, ...]
    coefficients: tuple[float, ...]
    eigen_check: float
    agreement: bool
    expansion_order: int


def _scaled_coefficients(poly: CharPoly, omega_ref: float) -> np.ndarray:
    """Substitute s -> omega_ref s' and normalize the leading coefficient.

    Keeps every Hurwitz entry O(1) so the minors evaluate without
    overflow; positive rescaling preserves all minor signs.
    """

    coeffs = poly.coefficients.copy()
    n = poly.degree
    top = coeffs[0]
    if top == 0.0 or not np.isfinite(top):
        raise NumericalError("degenerate polynomial: zero leading coefficient")
    if top < 0.0:
        coeffs = -coeffs
        top = -top
    powers = omega_ref ** np.arange(n, -1, -1, dtype=float)
    return coeffs * powers / (top * omega_ref ** n)


def hurwitz_minors(coefficients: np.ndarray) -> np.ndarray:
    """Leading principal minors of the Hurwitz matrix, degree-n polynomial.

    ``coefficients`` descending, a_n first.  H[i, j] = a_{n - 1 - 2j + i}
    with zero outside 0..n (indices 0-based).
    """

    coeffs = np.asarray(coefficients, dtype=float)
    n = len(coeffs) - 1
    a = coeffs[::-1]  # a[k] multiplies s^k
    h = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            k = n - 1 - 2 * j + i
            if 0 <= k <= n:
                h[i, j] = a[k]
    return np.array([np.linalg.det(h[:m, :m]) for m in range(1, n + 1)])


def stability(system: CoupledSystem, order: int = 4) -> StabilityVerdict:
    """Routh-Hurwitz stability of the delay-expanded characteristic polynomial.

    Stable iff every coefficient and every Hurwitz minor of the normalized
    polynomial is positive.  The companion-matrix eigenvalues of the same
    polynomial provide an independent check of the algebra (not of the
    Taylor truncation itself).
    """

    poly = char_poly(system, order)
    scaled = _scaled_coefficients(poly, system.membrane.omega)
    minors = hurwitz_minors(scaled)
    stable = bool(np.all(scaled > 0.0) and np.all(minors > 0.0))
    roots = np.roots(scaled) * system.membrane.omega
    eigen_check = float(roots.real.max())
    return StabilityVerdict(stable, tuple(minors), tuple(scaled), eigen_check,
                            stable == (eigen_check < 0.0), order)


def _with_spin(system: CoupledSystem, gamma_s: float | None = None,
               delta: float | None = None, tau: float | None = None) -> CoupledSystem:
    spin = system.spin
    if gamma_s is not None:
        spin = replace(spin, gamma=gamma_s)
    if delta is not None:
        spin = replace(spin, omega=system.membrane.omega + delta)
    out = replace(system, spin=spin)
    if tau is not None:
        out = replace(out, tau=tau)
    return out


@dataclass(frozen=True)
class StabilityMap:
    """Grid of Hurwitz verdicts over (tau, delta, gamma_s).

    ``stable`` has shape (n_tau, n_delta, n_gamma).  ``boundaries`` lists
    (tau, delta, gamma_s) points where the verdict flips along the
    gamma_s axis, located by bisection to 1e-3 relative width.
    ``agreement`` is the fraction of grid points where the minors and the
    companion roots give the same verdict.
    """

    taus: np.ndarray
    deltas: np.ndarray
    gamma_ss: np.ndarray
    stable: np.ndarray
    boundaries: tuple[tuple[float, float, float], ...]
    agreement: float

    def __post_init__(self) -> None:
        for arr in (self.taus, self.deltas, self.gamma_ss, self.stable):
            arr.flags.writeable = False


def stability_map(system: CoupledSystem, deltas: np.ndarray, gamma_ss: np.ndarray,
                  taus: np.ndarray, order: int = 4, threads: int = 1) -> StabilityMap:
    """Evaluate ``stability`` over a (tau, delta, gamma_s) grid.

    Work is split over rows deterministically; the result does not depend
    on ``threads``.
    """

    deltas = np.asarray(deltas, dtype=float)
    gamma_ss = np.asarray(gamma_ss, dtype=float)
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    if deltas.size == 0 or gamma_ss.size == 0 or taus.size == 0:
        raise ValueError("empty stability grid axis")

    verdicts = np.zeros((taus.size, deltas.size, gamma_ss.size), dtype=bool)
    agree = np.zeros_like(verdicts)

    def fill_row(it: int, idel: int) -> None:
        sys_d = _with_spin(system, delta=deltas[idel], tau=taus[it])
        for ig, gs in enumerate(gamma_ss):
            verdict = stability(_with_spin(sys_d, gamma_s=gs), order)
            verdicts[it, idel, ig] = verdict.stable
            agree[it, idel, ig] = verdict.agreement

    jobs = [(it, idel) for it in range(taus.size) for idel in range(deltas.size)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda ij: fill_row(*ij), jobs))
    else:
        for it, idel in jobs:
            fill_row(it, idel)

    boundaries: list[tuple[float, float, float]] = []
    for it in range(taus.size):
        for idel in range(deltas.size):
            sys_d = _with_spin(system, delta=deltas[idel], tau=taus[it])
            row = verdicts[it, idel]
            for ig in range(gamma_ss.size - 1):
                if row[ig] != row[ig + 1]:
                    lo, hi = gamma_ss[ig], gamma_ss[ig + 1]
                    lo_stable = row[ig]
                    while (hi - lo) > 1e-3 * hi:
                        mid = 0.5 * (lo + hi)
                        if stability(_with_spin(sys_d, gamma_s=mid), order).stable == lo_stable:
                            lo = mid
                        else:
                            hi = mid
                    boundaries.append((float(taus[it]), float(deltas[idel]),
                                       0.5 * (lo + hi)))
    return StabilityMap(taus, deltas, gamma_ss, verdicts, tuple(boundaries),
                        float(agree.mean()))
