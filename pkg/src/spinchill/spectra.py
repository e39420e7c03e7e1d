"""Susceptibilities, spectrum estimation, and the global multi-dataset fit.

Measured and modeled spectra live on detuning grids relative to a fixed
reference frequency near the membrane resonance; that keeps the fit
parameters at comparable, well-conditioned magnitudes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.signal

from .leastsq import LMResult, least_squares_lm
from .model import CoupledSystem
from .simulator import TrajectoryEnsemble


@dataclass(frozen=True)
class SusceptibilityModel:
    """Bare and effective linear response of the coupled pair."""

    omega_m: float
    gamma_m: float
    omega_s: float
    gamma_s: float
    g: float
    tau: float

    @classmethod
    def from_system(cls, system: CoupledSystem) -> "SusceptibilityModel":
        return cls(system.membrane.omega, system.membrane.gamma,
                   system.spin.omega, system.spin.gamma, system.g, system.tau)


def chi0(omega: np.ndarray, resonance: float, gamma: float) -> np.ndarray:
    """Bare susceptibility resonance / (resonance^2 - omega^2 - i omega gamma)."""

    omega = np.asarray(omega, dtype=float)
    return resonance / (resonance ** 2 - omega ** 2 - 1j * omega * gamma)


def chi_eff(model: SusceptibilityModel, which: str, omega: np.ndarray) -> np.ndarray:
    """Effective susceptibility with the delayed feedback of the partner.

    1 / chi_eff = 1 / chi_0 - 4 g^2 exp(2 i omega tau) chi_partner; the
    exponent carries the full loop delay 2 tau.
    """

    omega = np.asarray(omega, dtype=float)
    loop = np.exp(2j * omega * model.tau)
    if which == "membrane":
        own = chi0(omega, model.omega_m, model.gamma_m)
        partner = chi0(omega, model.omega_s, model.gamma_s)
    elif which == "spin":
        own = chi0(omega, model.omega_s, model.gamma_s)
        partner = chi0(omega, model.omega_m, model.gamma_m)
    else:
        raise ValueError(f"which must be 'membrane' or 'spin', got {which!r}")
    return 1.0 / (1.0 / own - 4.0 * model.g ** 2 * loop * partner)


@dataclass(frozen=True)
class PSDEstimate:
    """Averaged displacement spectrum on a detuning grid.

    ``omega`` is angular detuning from the membrane rotating frame
    (rad/s); ``psd`` is one-sided lab-frame displacement density per
    rad/s, normalized so its integral equals the displacement variance.
    """

    omega: np.ndarray
    psd: np.ndarray
    stderr: np.ndarray
    n_segments: int

    def __post_init__(self) -> None:
        for arr in (self.omega, self.psd, self.stderr):
            arr.flags.writeable = False


def estimate_psd(ensemble: TrajectoryEnsemble, which: str = "membrane",
                 segment_length: int | None = None, overlap: float = 0.5,
                 window: str = "hann") -> PSDEstimate:
    """Welch estimate of the lab-frame displacement spectrum.

    The lab signal X(t) = Xq cos(wt) - Pq sin(wt) is narrowband around the
    frame frequency, so its one-sided spectrum at detuning d equals half
    the two-sided spectrum of the complex envelope Xq + i Pq at d.  The
    envelope is what gets transformed; a positive detuning means a
    component above the frame frequency.
    """

    if which == "membrane":
        sl = slice(0, 2)
    elif which == "spin":
        sl = slice(2, 4)
    else:
        raise ValueError(f"which must be 'membrane' or 'spin', got {which!r}")
    live = np.ones(ensemble.n_trajectories, dtype=bool)
    live[list(ensemble.aborted)] = False
    quads = ensemble.quadratures[live]
    if quads.shape[0] == 0:
        raise ValueError("empty ensemble")
    z = quads[:, :, sl.start] + 1j * quads[:, :, sl.start + 1]
    n_samples = z.shape[1]
    if segment_length is None:
        segment_length = n_samples
    if not 2 <= segment_length <= n_samples:
        raise ValueError(f"segment_length must be in [2, {n_samples}]")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")

    sample_dt = float(ensemble.times[1] - ensemble.times[0])
    fs = 1.0 / sample_dt
    noverlap = int(segment_length * overlap)
    freqs, psd = scipy.signal.welch(z, fs=fs, window=window, nperseg=segment_length,
                                    noverlap=noverlap, detrend=False,
                                    return_onesided=False, scaling="density", axis=1)
    # half the envelope density, converted from per Hz to per rad/s
    psd = psd.real / (2.0 * 2.0 * math.pi)
    omega = 2.0 * math.pi * freqs
    order = np.argsort(omega)
    omega = omega[order]
    psd = psd[:, order]
    mean = psd.mean(axis=0)
    stderr = (psd.std(axis=0, ddof=1) / math.sqrt(psd.shape[0])
              if psd.shape[0] > 1 else np.zeros_like(mean))
    n_segments = max(1, (n_samples - noverlap) // (segment_length - noverlap))
    return PSDEstimate(omega, mean, stderr, n_segments * psd.shape[0])


@dataclass(frozen=True)
class GlobalParams:
    """Parameters shared by all datasets of a global fit."""

    a: float
    omega_m: float
    tau: float
    g: float
    floor: float


@dataclass(frozen=True)
class SpinParams:
    """Per-dataset spin resonance and linewidth."""

    omega_s: float
    gamma_s: float


@dataclass(frozen=True)
class FitDataset:
    """One measured spectrum: detuning grid (rad/s from omega_ref), power, weights."""

    detuning: np.ndarray
    psd: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.detuning.shape != self.psd.shape:
            raise ValueError("detuning and psd must have the same shape")
        if self.weights is not None and self.weights.shape != self.psd.shape:
            raise ValueError("weights must match the psd shape")


@dataclass
class FitProblem:
    """Joint fit of several spectra sharing (a, omega_m, tau, g, floor).

    ``gamma_m`` is fixed from an independent calibration, not fitted.
    With ``log_space`` the residuals are taken between log powers, the
    right choice for multiplicative noise.
    """

    omega_ref: float
    gamma_m: float
    datasets: list[FitDataset]
    initial_globals: GlobalParams
    initial_spins: list[SpinParams]
    log_space: bool = True

    def __post_init__(self) -> None:
        if not self.datasets:
            raise ValueError("fit problem needs at least one dataset")
        if len(self.initial_spins) != len(self.datasets):
            raise ValueError("need one SpinParams per dataset")


def psd_model(problem: FitProblem, index: int, detuning: np.ndarray,
              globals_: GlobalParams | None = None,
              spin: SpinParams | None = None) -> np.ndarray:
    """a^2 |chi_eff_membrane(omega_ref + detuning)|^2 + floor for one dataset."""

    gp = problem.initial_globals if globals_ is None else globals_
    sp = problem.initial_spins[index] if spin is None else spin
    model = SusceptibilityModel(gp.omega_m, problem.gamma_m, sp.omega_s, sp.gamma_s,
                                gp.g, gp.tau)
    omega = problem.omega_ref + np.asarray(detuning, dtype=float)
    return gp.a ** 2 * np.abs(chi_eff(model, "membrane", omega)) ** 2 + gp.floor


# ---------------------------------------------------------------------------
# parameter packing:  [a, omega_m - omega_ref, tau, g, floor,
#                      (omega_s_i - omega_ref, gamma_s_i) per dataset]

_N_GLOBAL = 5


def _pack(problem: FitProblem, gp: GlobalParams, spins: list[SpinParams]) -> np.ndarray:
    x = [gp.a, gp.omega_m - problem.omega_ref, gp.tau, gp.g, gp.floor]
    for sp in spins:
        x.extend([sp.omega_s - problem.omega_ref, sp.gamma_s])
    return np.array(x)


def _unpack(problem: FitProblem, x: np.ndarray) -> tuple[GlobalParams, list[SpinParams]]:
    gp = GlobalParams(x[0], problem.omega_ref + x[1], x[2], x[3], x[4])
    spins = [SpinParams(problem.omega_ref + x[_N_GLOBAL + 2 * i],
                        x[_N_GLOBAL + 2 * i + 1])
             for i in range(len(problem.datasets))]
    return gp, spins


def _typical_scales(problem: FitProblem, x0: np.ndarray) -> np.ndarray:
    span = max(float(np.max(np.abs(ds.detuning))) for ds in problem.datasets)
    span = max(span, 1.0)
    scales = np.empty_like(x0)
    scales[0] = max(abs(x0[0]), 1e-30)
    scales[1] = span
    scales[2] = max(abs(x0[2]), 0.3 / problem.omega_ref)  # delay phase of order one
    scales[3] = max(abs(x0[3]), 0.1 * span)
    scales[4] = max(abs(x0[4]), 1e-30)
    for i in range(len(problem.datasets)):
        scales[_N_GLOBAL + 2 * i] = span
        scales[_N_GLOBAL + 2 * i + 1] = max(abs(x0[_N_GLOBAL + 2 * i + 1]), 0.1 * span)
    return scales


def _model_and_grads(problem: FitProblem, x: np.ndarray,
                     index: int) -> tuple[np.ndarray, np.ndarray]:
    """Model values and analytic gradients for one dataset.

    Gradient columns follow the packed layout; per-dataset columns are
    returned for this dataset only.
    """

    a, dwm, tau, g, floor = x[:_N_GLOBAL]
    wm = problem.omega_ref + dwm
    ws = problem.omega_ref + x[_N_GLOBAL + 2 * index]
    gs = x[_N_GLOBAL + 2 * index + 1]
    gm = problem.gamma_m
    omega = problem.omega_ref + problem.datasets[index].detuning

    den_m = wm ** 2 - omega ** 2 - 1j * omega * gm
    inv_chi_m = den_m / wm
    den_s = ws ** 2 - omega ** 2 - 1j * omega * gs
    chi_s = ws / den_s
    loop = np.exp(2j * omega * tau)
    d = inv_chi_m - 4.0 * g ** 2 * loop * chi_s
    abs2 = (d * d.conj()).real
    model = a ** 2 / abs2 + floor

    # d(|d|^-2)/dp = -2 Re[conj(d) dd/dp] / |d|^4
    def via_d(dd: np.ndarray) -> np.ndarray:
        return -2.0 * a ** 2 * (d.conj() * dd).real / abs2 ** 2

    grads = np.zeros((omega.size, _N_GLOBAL + 2), dtype=float)
    grads[:, 0] = 2.0 * a / abs2
    grads[:, 1] = via_d(1.0 + omega ** 2 / wm ** 2 + 1j * omega * gm / wm ** 2)
    grads[:, 2] = via_d(-4.0 * g ** 2 * (2j * omega) * loop * chi_s)
    grads[:, 3] = via_d(-8.0 * g * loop * chi_s)
    grads[:, 4] = 1.0
    grads[:, 5] = via_d(-4.0 * g ** 2 * loop * (den_s - 2.0 * ws ** 2) / den_s ** 2)
    grads[:, 6] = via_d(-4.0 * g ** 2 * loop * (1j * omega * ws) / den_s ** 2)
    return model, grads


def _residual_and_jacobian(problem: FitProblem, x: np.ndarray,
                           want_jacobian: bool) -> tuple[np.ndarray, np.ndarray | None]:
    n_par = _N_GLOBAL + 2 * len(problem.datasets)
    res_parts, jac_parts = [], []
    for i, ds in enumerate(problem.datasets):
        model, grads = _model_and_grads(problem, x, i)
        weights = np.ones_like(ds.psd) if ds.weights is None else ds.weights
        if problem.log_space:
            safe = np.maximum(model, 1e-300)
            res = weights * (np.log(safe) - np.log(np.maximum(ds.psd, 1e-300)))
            scale = weights / safe
        else:
            res = weights * (model - ds.psd)
            scale = weights
        res_parts.append(res)
        if want_jacobian:
            jac = np.zeros((ds.psd.size, n_par))
            jac[:, :_N_GLOBAL] = grads[:, :_N_GLOBAL] * scale[:, None]
            jac[:, _N_GLOBAL + 2 * i:_N_GLOBAL + 2 * i + 2] = \
                grads[:, _N_GLOBAL:] * scale[:, None]
            jac_parts.append(jac)
    residual = np.concatenate(res_parts)
    jacobian = np.vstack(jac_parts) if want_jacobian else None
    return residual, jacobian


def fit_residual(problem: FitProblem, gp: GlobalParams,
                 spins: list[SpinParams]) -> np.ndarray:
    """Residual vector at the given parameters, for external diagnostics."""

    return _residual_and_jacobian(problem, _pack(problem, gp, spins), False)[0]


def fit_jacobian(problem: FitProblem, gp: GlobalParams,
                 spins: list[SpinParams]) -> np.ndarray:
    """Analytic Jacobian in the packed parameter layout (unscaled)."""

    return _residual_and_jacobian(problem, _pack(problem, gp, spins), True)[1]


@dataclass(frozen=True)
class StartOutcome:
    """One multi-start attempt of the global fit."""

    globals_: GlobalParams
    spins: tuple[SpinParams, ...]
    cost: float
    converged: bool
    status: str


@dataclass
class FitResult:
    """Best fit plus every multi-start outcome and the LM diagnostics."""

    problem: FitProblem
    globals_: GlobalParams
    spins: list[SpinParams]
    cost: float
    converged: bool
    status: str
    n_iterations: int
    cost_history: list[float]
    covariance: np.ndarray | None
    parameter_names: tuple[str, ...]
    residual_norms: tuple[float, ...]
    starts: tuple[StartOutcome, ...] = field(default_factory=tuple)

    def model(self, index: int, detuning: np.ndarray | None = None) -> np.ndarray:
        ds = self.problem.datasets[index]
        grid = ds.detuning if detuning is None else detuning
        return psd_model(self.problem, index, grid, self.globals_, self.spins[index])


def _default_bounds(problem: FitProblem, x0: np.ndarray,
                    scales: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    span = max(float(np.max(np.abs(ds.detuning))) for ds in problem.datasets)
    lo = np.full_like(x0, -np.inf)
    hi = np.full_like(x0, np.inf)
    lo[0] = 1e-12 * scales[0]          # a > 0
    lo[1], hi[1] = -10.0 * span, 10.0 * span
    lo[2], hi[2] = 0.0, 10.0 * math.pi / problem.omega_ref
    lo[3], hi[3] = 0.0, 10.0 * span
    lo[4] = 0.0
    for i in range(len(problem.datasets)):
        lo[_N_GLOBAL + 2 * i] = -10.0 * span
        hi[_N_GLOBAL + 2 * i] = 10.0 * span
        lo[_N_GLOBAL + 2 * i + 1] = 1e-6 * span
        hi[_N_GLOBAL + 2 * i + 1] = 100.0 * span
    return lo, hi


def global_fit(problem: FitProblem, *, n_starts: int = 1, seed: int = 0,
               max_iterations: int = 300, step_tol: float = 1e-8,
               cost_tol: float = 1e-10, perturbation: float = 0.3) -> FitResult:
    """Levenberg-Marquardt fit of all datasets with shared global parameters.

    ``n_starts`` > 1 re-runs the optimizer from randomly perturbed initial
    points (uniform in the internally rescaled coordinates) and returns
    the lowest-cost converged solution; every outcome is kept in
    ``starts`` so callers can audit the success rate.
    """

    x0 = _pack(problem, problem.initial_globals, problem.initial_spins)
    scales = _typical_scales(problem, x0)
    lo, hi = _default_bounds(problem, x0, scales)
    z0 = x0 / scales
    zbounds = (lo / scales, hi / scales)

    def residual_z(z: np.ndarray) -> np.ndarray:
        return _residual_and_jacobian(problem, z * scales, False)[0]

    def jacobian_z(z: np.ndarray) -> np.ndarray:
        jac = _residual_and_jacobian(problem, z * scales, True)[1]
        return jac * scales[None, :]

    rng = np.random.Generator(np.random.PCG64(seed))
    outcomes: list[tuple[LMResult, StartOutcome]] = []
    for start in range(max(1, n_starts)):
        z_start = z0.copy()
        if start > 0:
            z_start = z_start + perturbation * rng.uniform(-1.0, 1.0, z0.shape)
            z_start = np.clip(z_start, zbounds[0], zbounds[1])
        lm = least_squares_lm(residual_z, jacobian_z, z_start, bounds=zbounds,
                              max_iterations=max_iterations, step_tol=step_tol,
                              cost_tol=cost_tol)
        gp, spins = _unpack(problem, lm.x * scales)
        outcomes.append((lm, StartOutcome(gp, tuple(spins), lm.cost, lm.converged,
                                          lm.status)))

    converged = [pair for pair in outcomes if pair[0].converged]
    best_lm, best_start = min(converged or outcomes, key=lambda pair: pair[0].cost)

    names = ["a", "omega_m", "tau", "g", "floor"]
    for i in range(len(problem.datasets)):
        names += [f"omega_s[{i}]", f"gamma_s[{i}]"]
    cov = None
    if best_lm.covariance is not None:
        cov = best_lm.covariance * np.outer(scales, scales)

    norms = []
    pos = 0
    for ds in problem.datasets:
        norms.append(float(np.linalg.norm(best_lm.residual[pos:pos + ds.psd.size])))
        pos += ds.psd.size
    return FitResult(problem, best_start.globals_, list(best_start.spins),
                     best_lm.cost, best_lm.converged, best_lm.status,
                     best_lm.n_iterations, best_lm.cost_history, cov, tuple(names),
                     tuple(norms), tuple(out for _, out in outcomes))


def _single_peak_guess(detuning: np.ndarray, psd: np.ndarray,
                       floor: float) -> tuple[float, float, float]:
    """Peak center, half separation (0 if single), and width estimate."""

    smooth = np.convolve(psd, np.ones(5) / 5.0, mode="same")
    above = smooth - floor
    imax = int(np.argmax(above))
    half = above[imax] / 2.0
    mask = above > half
    width = max((mask.sum()) * abs(detuning[1] - detuning[0]), abs(detuning[1] - detuning[0]))

    # look for a second local maximum away from the first
    candidates = []
    for i in range(2, len(smooth) - 2):
        if smooth[i] >= smooth[i - 1] and smooth[i] >= smooth[i + 1] \
                and above[i] > 0.25 * above[imax]:
            candidates.append(i)
    separated = [i for i in candidates if abs(detuning[i] - detuning[imax]) > width]
    if separated:
        second = max(separated, key=lambda i: above[i])
        center = 0.5 * (detuning[imax] + detuning[second])
        half_split = 0.5 * abs(detuning[imax] - detuning[second])
        return float(center), float(half_split), float(width)
    return float(detuning[imax]), 0.0, float(width)


def auto_initial_guess(omega_ref: float, gamma_m: float,
                       datasets: list[FitDataset]) -> tuple[GlobalParams, list[SpinParams]]:
    """Seed a FitProblem from the data: peak positions, splittings, floor.

    Datasets showing a resolved normal-mode doublet vote for g with half
    their peak separation; the spectrum floor comes from the low quantile.
    """

    floors, g_votes, spins = [], [], []
    for ds in datasets:
        floor = float(np.quantile(ds.psd, 0.1))
        floors.append(floor)
        center, half_split, width = _single_peak_guess(ds.detuning, ds.psd, floor)
        if half_split > 0:
            g_votes.append(half_split)
        spins.append(SpinParams(omega_ref + center, max(width, gamma_m)))
    g0 = float(np.median(g_votes)) if g_votes else 0.25 * max(
        float(np.max(np.abs(ds.detuning))) for ds in datasets)
    floor0 = float(np.median(floors))

    gp = GlobalParams(a=1.0, omega_m=omega_ref, tau=0.0, g=g0, floor=floor0)
    # set the amplitude from the tallest peak of the first dataset
    ds0 = datasets[0]
    probe = FitProblem(omega_ref, gamma_m, [ds0], gp, [spins[0]])
    unit = psd_model(probe, 0, ds0.detuning)
    peak_model = float(np.max(unit - floor0))
    peak_data = float(np.max(ds0.psd) - floor0)
    a0 = math.sqrt(max(peak_data, 1e-300) / max(peak_model, 1e-300))
    return replace(gp, a=a0), spins
