"""Rotating-frame drift matrix, exact step propagator, delay polynomial.

State ordering is (X_m, P_m, X_s, P_s) in the frame rotating at the
membrane frequency.  The first-moment dynamics is dx/dt = -M x; the
propagator over one step is expm(-M dt).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import CoupledSystem, require_valid

_TWO_PI = 2.0 * math.pi


def _reduced_phase(omega: float, tau: float) -> float:
    """omega * tau folded into (-pi, pi]; exact for small arguments."""

    phase = omega * tau
    if abs(phase) <= math.pi:
        return phase
    return math.remainder(phase, _TWO_PI)


@dataclass(frozen=True)
class DynamicalMatrix:
    """The 4x4 drift matrix together with the scalars it was built from."""

    m: np.ndarray
    gamma_m: float
    gamma_s: float
    g: float
    delta: float
    phase: float     # membrane frequency times one-way delay, folded mod 2 pi
    omega_m: float

    def __post_init__(self) -> None:
        self.m.flags.writeable = False


def build_matrix(system: CoupledSystem,
                 gamma_s: float | None = None,
                 omega_s: float | None = None) -> DynamicalMatrix:
    """Assemble the rotating-frame drift matrix.

    The coupling block carries the propagation phase of the light: each
    leg of the loop is delayed by ``tau``, which under the rotating-wave
    approximation turns the real coupling rate g into entries
    +-g sin(omega_m tau) and +-g cos(omega_m tau).  ``gamma_s`` and
    ``omega_s`` override the spin parameters for schedule segments.

    Deterministic: identical inputs give bitwise identical matrices.
    """

    require_valid(system)
    gs = system.spin.gamma if gamma_s is None else gamma_s
    ws = system.spin.omega if omega_s is None else omega_s
    if not (math.isfinite(gs) and math.isfinite(ws)):
        raise ValueError("overrides must be finite")
    if gs < 0 or ws <= 0:
        raise ValueError("gamma_s must be >= 0 and omega_s > 0")

    gm = system.membrane.gamma
    g = system.g
    delta = ws - system.membrane.omega
    phase = _reduced_phase(system.membrane.omega, system.tau)
    s, c = math.sin(phase), math.cos(phase)

    m = np.array([
        [gm / 2.0, 0.0, -g * s, -g * c],
        [0.0, gm / 2.0, g * c, -g * s],
        [-g * s, -g * c, gs / 2.0, -delta],
        [g * c, -g * s, delta, gs / 2.0],
    ])
    return DynamicalMatrix(m, gm, gs, g, delta, phase, system.membrane.omega)


# Degree-13 Pade approximant of exp, Higham's scaling-and-squaring form.
_PADE13 = (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
           1187353796428800.0, 129060195264000.0, 10559470521600.0,
           670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
           960960.0, 16380.0, 182.0, 1.0)
_THETA13 = 5.371920351148152


def expm(a: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a [13/13] Pade core."""

    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    norm = np.linalg.norm(a, 1)
    squarings = max(0, int(math.ceil(math.log2(norm / _THETA13)))) if norm > _THETA13 else 0
    a = a / (2.0 ** squarings)

    b = _PADE13
    ident = np.eye(n)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a2 @ a4
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
             + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
    v = (a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
         + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident)
    result = np.linalg.solve(v - u, v + u)
    for _ in range(squarings):
        result = result @ result
    return result


def step_propagator(matrix: DynamicalMatrix, dt: float) -> np.ndarray:
    """expm(-M dt), the exact coherent propagator over one step."""

    if dt < 0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    if dt == 0.0:
        return np.eye(4)
    return expm(-matrix.m * dt)


def eigenvalues(matrix: DynamicalMatrix) -> np.ndarray:
    """Eigenvalues of -M, sorted by real part descending then imaginary part.

    A positive real part means an exponentially growing mode.
    """

    vals = np.linalg.eigvals(-matrix.m)
    order = np.lexsort((vals.imag, -vals.real))
    return vals[order]


@dataclass(frozen=True)
class CharPoly:
    """Delay-expanded characteristic polynomial, leading coefficient first.

    The exact characteristic function of the coupled pair is
    (s^2 + s gamma_m + omega_m^2)(s^2 + s gamma_s + omega_s^2)
    - 4 g^2 omega_m omega_s exp(-2 s tau) = 0; ``coefficients`` holds its
    Taylor truncation of the exponential at ``expansion_order``.
    """

    coefficients: np.ndarray
    expansion_order: int

    def __post_init__(self) -> None:
        self.coefficients.flags.writeable = False

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    def __call__(self, s: complex) -> complex:
        return complex(np.polyval(self.coefficients, s))


def char_poly(system: CoupledSystem, order: int = 1) -> CharPoly:
    """Expand exp(-2 s tau) to ``order`` and collect polynomial coefficients.

    Order 1 reproduces the closed-form quartic whose s^1 coefficient picks
    up the delay term 8 g^2 omega_m omega_s tau.  Orders above 4 raise the
    polynomial degree; the truncation can then introduce spurious
    far-from-origin roots, so order 4 is the recommended ceiling for
    stability work.
    """

    if not 1 <= order <= 6:
        raise ValueError(f"expansion order must be in 1..6, got {order}")
    require_valid(system)
    wm, gm = system.membrane.omega, system.membrane.gamma
    ws, gs = system.spin.omega, system.spin.gamma
    coupling = 4.0 * system.g ** 2 * wm * ws

    degree = max(4, order)
    # ascending coefficients a_0 .. a_degree
    asc = np.zeros(degree + 1)
    asc[0] = wm ** 2 * ws ** 2
    asc[1] = gm * ws ** 2 + gs * wm ** 2
    asc[2] = wm ** 2 + ws ** 2 + gm * gs
    asc[3] = gm + gs
    asc[4] = 1.0
    fact = 1.0
    for k in range(order + 1):
        if k > 0:
            fact *= k
        asc[k] -= coupling * (-2.0 * system.tau) ** k / fact
    return CharPoly(asc[::-1].copy(), order)


def characteristic_function(system: CoupledSystem, s: complex) -> complex:
    """The exact transcendental characteristic function, for root checks."""

    wm, gm = system.membrane.omega, system.membrane.gamma
    ws, gs = system.spin.omega, system.spin.gamma
    return ((s * s + s * gm + wm ** 2) * (s * s + s * gs + ws ** 2)
            - 4.0 * system.g ** 2 * wm * ws * np.exp(-2.0 * s * system.tau))
