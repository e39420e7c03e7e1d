"""Exact-step stochastic simulation of the coupled quadrature dynamics.

Each step advances the state by the full propagator expm(-M dt) plus a
Gaussian noise increment whose covariance is the exact Ornstein-Uhlenbeck
integral per oscillator.  Steps span an integer number of rotating-frame
periods so the sin/cos prefactors of the lab-frame noise average cleanly
to the factor 1/2 built into the diffusion densities.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dynamics import DynamicalMatrix, build_matrix, expm, step_propagator
from .model import CoupledSystem, require_valid

_TWO_PI = 2.0 * math.pi
_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MAX_STEP_MULTIPLE = 64
_CHUNK_STEPS = 1024


class RWAValidityWarning(UserWarning):
    """The requested parameters strain the rotating-wave assumptions."""


def mix_seed(seed: int, index: int) -> int:
    """Per-trajectory sub-seed: splitmix64 finalizer of seed + (i+1)*golden.

    The mix is the standard splitmix64 output function (shift-xor and
    multiply twice), so sub-streams are decorrelated for any seed and
    contiguous indices.  Documented here as the reproducibility contract:
    trajectory i always consumes the stream PCG64(mix_seed(seed, i)).
    """

    z = (seed + (index + 1) * _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class NoiseSpec:
    """Noise amplitudes driving the two oscillators.

    The total force on oscillator j has white spectral density
    2 gamma_j (n_bath_j + 1/2) + 2 gamma_meas_j * vacuum_j^2, the sum in
    quadrature of the thermal force and the measurement backaction.  The
    optical vacuum amplitudes are sqrt(eta_sq / 2) on the membrane side
    and sqrt((1 - eta_sq^2) / 2) on the spin side, from the transmission
    loss of the link.  ``scale`` multiplies every amplitude and exists for
    linearity checks; physical runs leave it at 1.
    """

    rng_seed: int
    thermal_m: float
    thermal_s: float
    vacuum_m: float
    vacuum_s: float
    gamma_meas_m: float = 0.0
    gamma_meas_s: float = 0.0
    scale: float = 1.0

    @classmethod
    def from_system(cls, system: CoupledSystem, rng_seed: int, scale: float = 1.0) -> "NoiseSpec":
        require_valid(system)
        return cls(
            rng_seed=int(rng_seed) & _MASK64,
            thermal_m=math.sqrt(system.membrane.n_bath + 0.5),
            thermal_s=math.sqrt(system.spin.n_bath + 0.5),
            vacuum_m=math.sqrt(system.eta_sq / 2.0),
            vacuum_s=math.sqrt((1.0 - system.eta_sq ** 2) / 2.0),
            gamma_meas_m=system.gamma_meas_m,
            gamma_meas_s=system.gamma_meas_s,
            scale=scale,
        )

    def total_amplitude_sq(self, which: str, gamma: float) -> float:
        """(n_bath + 1/2) + (2 gamma_meas / gamma) vacuum^2, per oscillator."""

        if which == "membrane":
            thermal, vacuum, meas = self.thermal_m, self.vacuum_m, self.gamma_meas_m
        elif which == "spin":
            thermal, vacuum, meas = self.thermal_s, self.vacuum_s, self.gamma_meas_s
        else:
            raise ValueError(f"which must be 'membrane' or 'spin', got {which!r}")
        if gamma <= 0:
            raise ValueError("total amplitude needs gamma > 0; use diffusion() instead")
        return self.scale ** 2 * (thermal ** 2 + 2.0 * meas / gamma * vacuum ** 2)

    def diffusion(self, gamma_m: float, gamma_s: float) -> tuple[float, float]:
        """Rotating-frame per-quadrature diffusion densities (d_m, d_s).

        d_j = gamma_j (n_bath_j + 1/2) + 2 gamma_meas_j vacuum_j^2; the
        extra factor 1/2 relative to the lab-frame force density comes
        from averaging sin^2 and cos^2 over the integer number of frame
        rotations per step (cross terms average to zero).
        """

        s2 = self.scale ** 2
        d_m = s2 * (gamma_m * self.thermal_m ** 2 + 2.0 * self.gamma_meas_m * self.vacuum_m ** 2)
        d_s = s2 * (gamma_s * self.thermal_s ** 2 + 2.0 * self.gamma_meas_s * self.vacuum_s ** 2)
        return d_m, d_s

    def diffusion_matrix(self, gamma_m: float, gamma_s: float) -> np.ndarray:
        d_m, d_s = self.diffusion(gamma_m, gamma_s)
        return np.diag([d_m, d_m, d_s, d_s])


def _phi(x: float) -> float:
    """(1 - exp(-x)) / x, the OU variance filling factor; phi(0) = 1."""

    if x == 0.0:
        return 1.0
    return -math.expm1(-x) / x


def increment_stds(matrix: DynamicalMatrix, noise: NoiseSpec, dt: float) -> np.ndarray:
    """Per-quadrature standard deviations of the exact one-step noise.

    Within each oscillator the drift block is a damped rotation, so the
    OU integral is isotropic with variance d_j dt phi(gamma_j dt); the
    X-P cross covariance vanishes and cross-oscillator correlations of
    order g dt are neglected (see ``exact_increment_covariance``).
    """

    d_m, d_s = noise.diffusion(matrix.gamma_m, matrix.gamma_s)
    var_m = d_m * dt * _phi(matrix.gamma_m * dt)
    var_s = d_s * dt * _phi(matrix.gamma_s * dt)
    return np.sqrt([var_m, var_m, var_s, var_s])


def exact_increment_covariance(matrix: DynamicalMatrix, noise: NoiseSpec, dt: float) -> np.ndarray:
    """Full 4x4 one-step noise covariance via the Van Loan block method.

    Keeps the cross-oscillator correlations the block-diagonal route
    drops; used to validate that they are negligible at g dt << 1.
    """

    d = noise.diffusion_matrix(matrix.gamma_m, matrix.gamma_s)
    block = np.zeros((8, 8))
    block[:4, :4] = -matrix.m
    block[:4, 4:] = d
    block[4:, 4:] = matrix.m.T
    full = expm(block * dt)
    propagator = step_propagator(matrix, dt)
    return full[:4, 4:] @ propagator.T


def _check_frame_alignment(matrix: DynamicalMatrix, dt: float) -> None:
    periods = dt * matrix.omega_m / _TWO_PI
    if abs(periods - round(periods)) > 1e-9 * max(1.0, periods):
        raise ValueError(
            f"dt = {dt} is not an integer number of frame rotations "
            f"(2 pi / omega_m = {_TWO_PI / matrix.omega_m})")


def noise_increments(matrix: DynamicalMatrix, noise: NoiseSpec, dt: float,
                     draws: np.ndarray) -> np.ndarray:
    """Map standard Gaussian draws (..., 4) to one-step noise increments."""

    draws = np.asarray(draws, dtype=float)
    if draws.shape[-1] != 4:
        raise ValueError(f"draws must have trailing dimension 4, got {draws.shape}")
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    _check_frame_alignment(matrix, dt)
    return draws * increment_stds(matrix, noise, dt)


@dataclass(frozen=True)
class Segment:
    """One schedule segment; ``None`` fields fall back to the system values."""

    duration: float
    gamma_s: float | None = None
    omega_s: float | None = None


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant spin parameter program, segments contiguous in time."""

    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        if not self.segments:
            raise ValueError("schedule needs at least one segment")
        for i, seg in enumerate(self.segments):
            if not (seg.duration > 0 and math.isfinite(seg.duration)):
                raise ValueError(f"segment {i}: duration must be finite and > 0")

    @classmethod
    def constant(cls, duration: float, gamma_s: float | None = None,
                 omega_s: float | None = None) -> "Schedule":
        return cls((Segment(duration, gamma_s, omega_s),))

    @classmethod
    def cycle(cls, segments: tuple[Segment, ...] | list[Segment], repeat: int) -> "Schedule":
        if repeat < 1:
            raise ValueError(f"repeat must be >= 1, got {repeat}")
        return cls(tuple(segments) * repeat)

    @property
    def total_duration(self) -> float:
        return sum(seg.duration for seg in self.segments)


@dataclass(frozen=True)
class InitialState:
    """Gaussian initial occupations; spin defaults to its own bath."""

    n_membrane: float
    n_spin: float | None = None


@dataclass
class TrajectoryEnsemble:
    """Recorded quadrature trajectories on a uniform step grid.

    ``quadratures`` has shape (n_traj, n_times, 4) with the rotating
    frame ordering (X_m, P_m, X_s, P_s).  Aborted trajectories (non-finite
    state) are NaN from the point of failure and excluded from derived
    statistics.
    """

    times: np.ndarray
    quadratures: np.ndarray
    dt: float
    step_multiple: int
    omega_m: float
    seed: int
    aborted: tuple[int, ...]
    metadata: dict = field(default_factory=dict)

    @property
    def n_trajectories(self) -> int:
        return self.quadratures.shape[0]

    def _live(self) -> np.ndarray:
        mask = np.ones(self.n_trajectories, dtype=bool)
        mask[list(self.aborted)] = False
        return mask

    def occupation(self, which: str = "membrane") -> tuple[np.ndarray, np.ndarray]:
        """Ensemble mean and std of n_j(t) = <X^2 + P^2>/2 - 1/2."""

        sl = slice(0, 2) if which == "membrane" else slice(2, 4)
        if which not in ("membrane", "spin"):
            raise ValueError(f"which must be 'membrane' or 'spin', got {which!r}")
        quads = self.quadratures[self._live()][:, :, sl]
        per_traj = 0.5 * np.sum(quads ** 2, axis=-1) - 0.5
        return per_traj.mean(axis=0), per_traj.std(axis=0, ddof=1)

    def covariance(self, t_min: float = 0.0) -> np.ndarray:
        """Time- and ensemble-averaged 4x4 second-moment matrix for t >= t_min."""

        keep = self.times >= t_min
        x = self.quadratures[self._live()][:, keep, :].reshape(-1, 4)
        return x.T @ x / x.shape[0]


@dataclass(frozen=True)
class OccupationTrace:
    """Sliding-window occupation statistics; sub_ground marks mean < 0."""

    times: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    sub_ground: np.ndarray


def occupation_trace(ensemble: TrajectoryEnsemble, which: str = "membrane",
                     window: float = 0.0) -> OccupationTrace:
    """Windowed occupation trace n(t) with ensemble mean and std.

    ``window`` is the sliding average length in seconds (0 means the bare
    sampling grid); it must not be shorter than the sampling interval.
    """

    if ensemble.quadratures.shape[0] == 0:
        raise ValueError("empty ensemble")
    sample_dt = ensemble.times[1] - ensemble.times[0] if len(ensemble.times) > 1 else ensemble.dt
    if window and window < sample_dt:
        raise ValueError(f"window {window} shorter than sampling interval {sample_dt}")
    mean, std = ensemble.occupation(which)
    n_pts = max(1, int(round(window / sample_dt))) if window else 1
    if n_pts > 1:
        kernel = np.ones(n_pts)
        counts = np.convolve(np.ones_like(mean), kernel, mode="same")
        mean = np.convolve(mean, kernel, mode="same") / counts
        std = np.convolve(std, kernel, mode="same") / counts
    return OccupationTrace(ensemble.times, mean, std, mean < 0.0)


def _auto_step_multiple(system: CoupledSystem, segments: list[Segment]) -> tuple[int, list[str]]:
    """Largest k with k 2 pi / omega_m below the resolution bounds, clamped to 1."""

    period = _TWO_PI / system.membrane.omega
    bound = math.inf
    for seg in segments:
        gs = system.spin.gamma if seg.gamma_s is None else seg.gamma_s
        ws = system.spin.omega if seg.omega_s is None else seg.omega_s
        delta = ws - system.membrane.omega
        for rate in (system.g, gs, abs(delta)):
            if rate > 0:
                bound = min(bound, 1.0 / (20.0 * rate))
    warnings_out: list[str] = []
    if math.isinf(bound):
        return _MAX_STEP_MULTIPLE, warnings_out
    k = int(bound / period)
    if k < 1:
        warnings_out.append(
            f"resolution bound {bound:.3e} s is below one frame rotation "
            f"({period:.3e} s); using k = 1")
        k = 1
    return min(k, _MAX_STEP_MULTIPLE), warnings_out


def _rwa_check(system: CoupledSystem, segments: list[Segment]) -> list[str]:
    notes = []
    for seg in segments:
        gs = system.spin.gamma if seg.gamma_s is None else seg.gamma_s
        ws = system.spin.omega if seg.omega_s is None else seg.omega_s
        worst = max(system.g, gs, abs(ws - system.membrane.omega))
        if system.tau * worst > 0.1:
            notes.append(
                f"tau * max rate = {system.tau * worst:.3g} > 0.1; the static-phase "
                "treatment of the delay is strained")
    return notes


def simulate(system: CoupledSystem, noise: NoiseSpec, schedule: Schedule,
             n_trajectories: int, initial: InitialState, *,
             record_stride: int = 1, step_multiple: int | None = None,
             exact_noise_covariance: bool = False, threads: int = 1) -> TrajectoryEnsemble:
    """Run a trajectory ensemble through the schedule.

    Deterministic for a fixed ``noise.rng_seed`` regardless of ``threads``
    or internal chunking: trajectory i draws from its own generator seeded
    with mix_seed(seed, i), consuming 4 numbers for the initial state and
    4 per step thereafter.

    Parameters
    ----------
    record_stride : int
        Keep every record_stride-th step in the output grid.
    step_multiple : int, optional
        Force the base step to step_multiple frame rotations instead of
        the automatic resolution choice.
    exact_noise_covariance : bool
        Draw increments from the full 4x4 covariance (Cholesky of the Van
        Loan integral) instead of the per-oscillator blocks.
    """

    require_valid(system)
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    if initial.n_membrane < 0:
        raise ValueError("initial membrane occupation must be >= 0")
    if record_stride < 1:
        raise ValueError("record_stride must be >= 1")

    segments = list(schedule.segments)
    notes: list[str] = []
    if step_multiple is None:
        k, notes = _auto_step_multiple(system, segments)
    else:
        if step_multiple < 1:
            raise ValueError("step_multiple must be >= 1")
        k = step_multiple
    for note in _rwa_check(system, segments):
        notes.append(note)
        warnings.warn(note, RWAValidityWarning, stacklevel=2)

    dt = k * _TWO_PI / system.membrane.omega
    seg_steps: list[int] = []
    roundings: list[dict] = []
    for i, seg in enumerate(segments):
        n_steps = max(1, round(seg.duration / dt))
        seg_steps.append(n_steps)
        snapped = n_steps * dt
        roundings.append({"segment": i, "requested": seg.duration, "snapped": snapped})

    total_steps = sum(seg_steps)
    n_rec = total_steps // record_stride + 1
    times = np.arange(n_rec) * (dt * record_stride)

    # Per-segment propagators and noise maps, built once.
    propagators: list[np.ndarray] = []
    noise_maps: list[np.ndarray] = []   # stds (4,) or Cholesky factors (4, 4)
    for seg in segments:
        mat = build_matrix(system, gamma_s=seg.gamma_s, omega_s=seg.omega_s)
        propagators.append(step_propagator(mat, dt).T)   # right-multiplied below
        if exact_noise_covariance:
            cov = exact_increment_covariance(mat, noise, dt)
            noise_maps.append(np.linalg.cholesky(cov).T)
        else:
            noise_maps.append(increment_stds(mat, noise, dt))

    n_spin = system.spin.n_bath if initial.n_spin is None else initial.n_spin
    init_std = np.sqrt([initial.n_membrane + 0.5, initial.n_membrane + 0.5,
                        n_spin + 0.5, n_spin + 0.5])

    seed = noise.rng_seed
    rngs = [np.random.Generator(np.random.PCG64(mix_seed(seed, i)))
            for i in range(n_trajectories)]
    out = np.empty((n_trajectories, n_rec, 4))
    aborted: set[int] = set()

    def run_block(lo: int, hi: int) -> None:
        block_rngs = rngs[lo:hi]
        x = np.stack([rng.standard_normal(4) for rng in block_rngs]) * init_std
        out[lo:hi, 0] = x
        dead = np.zeros(hi - lo, dtype=bool)
        step = 0
        for seg_idx, n_steps in enumerate(seg_steps):
            prop_t = propagators[seg_idx]
            nmap = noise_maps[seg_idx]
            done = 0
            while done < n_steps:
                chunk = min(_CHUNK_STEPS, n_steps - done)
                draws = np.stack([rng.standard_normal((chunk, 4)) for rng in block_rngs])
                if exact_noise_covariance:
                    draws = draws @ nmap
                else:
                    draws *= nmap
                for j in range(chunk):
                    x = x @ prop_t + draws[:, j]
                    step += 1
                    if step % record_stride == 0:
                        out[lo:hi, step // record_stride] = x
                done += chunk
                bad = ~np.isfinite(x).all(axis=1) & ~dead
                if bad.any():
                    dead |= bad
                    x[dead] = np.nan
        for idx in np.nonzero(dead)[0]:
            aborted.add(lo + idx)

    threads = max(1, threads)
    if threads == 1 or n_trajectories < 2 * threads:
        run_block(0, n_trajectories)
    else:
        bounds = np.linspace(0, n_trajectories, threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(run_block, lo, hi)
                       for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
            for fut in futures:
                fut.result()

    if aborted:
        notes.append(f"aborted {len(aborted)} trajectories on non-finite state")
    metadata = {
        "step_multiple": k,
        "dt": dt,
        "segment_roundings": roundings,
        "record_stride": record_stride,
        "exact_noise_covariance": exact_noise_covariance,
        "sub_seed_rule": "pcg64(splitmix64(seed + (i+1)*0x9E3779B97F4A7C15))",
        "notes": notes,
    }
    return TrajectoryEnsemble(times, out, dt, k, system.membrane.omega, seed,
                              tuple(sorted(aborted)), metadata)
