"""Two-qubit gate analysis: exchange-amplitude switching, CROT error budget,
fidelity grids and the refocused CROT pulse sequence.

Unitaries act on the dressed basis ``(uu, ~ud, ~du, dd)`` of the ``DownUp``
nuclear configuration.  Propagators use ``exp(-2 pi i H t)`` with ``H`` in Hz.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.optimize import minimize_scalar

from .pulses import (
    PulseShape,
    PulseSpec,
    TransitionChannel,
    envelope_amplitude,
    pi_pulse_amplitude,
    pi_probability,
)
from .spin import (
    NuclearConfig,
    SystemParams,
    build_electron_hamiltonian,
    build_full_hamiltonian,
    delta_bz,
    dressed_basis,
    electron_ops,
    eigensystem,
    transition_frequencies,
)

SIGMA_NAT_SI = 3.2e6  # Hz
SIGMA_ISO_SI = 2e3  # Hz
MATERIAL_SIGMA = {"nat": SIGMA_NAT_SI, "iso": SIGMA_ISO_SI}


# --- hyperfine-regulated SWAP ------------------------------------------------


def rabi_amplitude(J: float, dBz: float) -> float:
    """Maximum exchange probability ``J^2 / (J^2 + dBz^2)``."""
    if J == 0 and dBz == 0:
        raise ValueError("J and dBz cannot both vanish: the precession axis is undefined")
    return J * J / (J * J + dBz * dBz)


def swap_duration(alpha: float, J: float, dBz: float) -> float:
    """Time (s) for a SWAP**alpha: ``alpha / (2 sqrt(J^2 + dBz^2))``."""
    if not J > 0:
        raise ValueError("J must be positive")
    if not 0 < alpha <= 2:
        raise ValueError("alpha must lie in (0, 2]")
    return alpha / (2 * math.hypot(J, dBz))


def _initial_state(config: NuclearConfig, dim: int, e_index: int = 2) -> np.ndarray:
    """Electron basis state (default ``|du>``), tensored with ``config`` if ``dim == 16``."""
    psi = np.zeros(dim, dtype=complex)
    psi[4 * e_index + config.index if dim == 16 else e_index] = 1
    return psi


def _propagator_factory(H: np.ndarray):
    w, v = eigensystem(H)

    def evolve(psi0: np.ndarray, t: np.ndarray) -> np.ndarray:
        c = v.conj().T @ psi0
        phases = np.exp(-2j * math.pi * np.outer(t, w))
        return (phases * c[None, :]) @ v.T

    return evolve


def exchange_trace(params: SystemParams, config: NuclearConfig, psi0, t_grid):
    """``<S1z>(t)`` and ``<S2z>(t)`` under the static Hamiltonian.

    A 4-dim ``psi0`` evolves under the electron-only Hamiltonian for
    ``config``; a 16-dim ``psi0`` under the full two-donor Hamiltonian.
    """
    psi0 = np.asarray(psi0, dtype=complex)
    if psi0.ndim != 1 or psi0.size not in (4, 16):
        raise ValueError(f"psi0 must be a 4- or 16-component vector, got shape {psi0.shape}")
    if abs(np.linalg.norm(psi0) - 1) > 1e-9:
        raise ValueError("psi0 must be normalised")
    dim = psi0.size
    H = build_electron_hamiltonian(params, config) if dim == 4 else build_full_hamiltonian(params)
    states = _propagator_factory(H)(psi0, np.asarray(t_grid, dtype=float))
    norms = np.sum(np.abs(states) ** 2, axis=1)
    if np.max(np.abs(norms - 1)) > 1e-9:
        raise RuntimeError("norm not conserved during evolution")
    s1z = np.real(np.diag(electron_ops(1, dim)[2]))
    s2z = np.real(np.diag(electron_ops(2, dim)[2]))
    pops = np.abs(states) ** 2
    return pops @ s1z, pops @ s2z


def swap_probability(params: SystemParams, config: NuclearConfig, t, model: str = "reduced") -> np.ndarray:
    """Probability of finding the electrons in ``|ud>`` after starting in ``|du>``."""
    dim = {"reduced": 4, "full": 16}[model]
    psi0 = _initial_state(config, dim)
    H = build_electron_hamiltonian(params, config) if dim == 4 else build_full_hamiltonian(params)
    states = _propagator_factory(H)(psi0, np.atleast_1d(np.asarray(t, dtype=float)))
    sel = [1] if dim == 4 else list(range(4, 8))
    return np.sum(np.abs(states[:, sel]) ** 2, axis=1)


def simulated_swap_amplitude(params: SystemParams, config: NuclearConfig, model: str = "reduced", samples: int = 2001) -> float:
    """Largest exchange probability over one oscillation period, from simulation."""
    dBz = delta_bz(params, config)
    freq = math.hypot(params.J, dBz)
    if freq == 0:
        return 0.0
    period = 1.0 / freq
    t = np.linspace(0.0, period, samples)
    p = swap_probability(params, config, t, model)
    k = int(np.argmax(p))
    lo, hi = t[max(k - 1, 0)], t[min(k + 1, samples - 1)]
    res = minimize_scalar(
        lambda tt: -swap_probability(params, config, tt, model)[0],
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": period * 1e-12},
    )
    return float(max(p[k], -res.fun))


def residual_swap_error(J_off: float, dBz: float, wait: float) -> float:
    """Worst-case exchange probability of ``|du>`` accumulated within ``wait`` seconds."""
    if wait < 0:
        raise ValueError("wait must be non-negative")
    if J_off == 0:
        return 0.0
    freq = math.hypot(J_off, dBz)
    amp = J_off * J_off / (freq * freq)
    if freq * wait >= 0.5:
        return amp
    return amp * math.sin(math.pi * freq * wait) ** 2


# --- CROT error budget ---------------------------------------------------------


@dataclass(frozen=True)
class ErrorBudget:
    """Worst-case CROT error terms and the resulting fidelity.

    ``off_resonant`` holds the pi probabilities of the ``up_x``, ``x_up`` and
    ``x_down`` transitions while driving ``down_x``.
    """

    inherent: float
    off_resonant: tuple[float, float, float]
    incomplete: float

    @property
    def total_error(self) -> float:
        return self.inherent + sum(self.off_resonant) + self.incomplete

    @property
    def fidelity(self) -> float:
        return max(0.0, 1.0 - self.total_error)


def crot_pulse(params: SystemParams, T_crot: float) -> PulseSpec:
    """Gaussian pulse calibrated for a pi rotation on the ``down_x`` transition."""
    mu_t = dressed_basis(params).mu_t
    return PulseSpec(PulseShape.GAUSSIAN, pi_pulse_amplitude(PulseShape.GAUSSIAN, T_crot, mu_t, params.gamma_e), T_crot)


def crot_error_budget(params: SystemParams, T_crot: float, sigma: float) -> ErrorBudget:
    db = dressed_basis(params)
    nu = transition_frequencies(params)
    pulse = crot_pulse(params, T_crot)
    drive = nu["down_x"]

    def p(key, mu):
        return pi_probability(TransitionChannel(nu[key], mu, sigma), drive, pulse, params.gamma_e)

    off = (p("up_x", db.mu_s), p("x_up", db.mu_t), p("x_down", db.mu_s))
    return ErrorBudget(
        inherent=math.sin(db.theta) ** 2,
        off_resonant=off,
        incomplete=1.0 - p("down_x", db.mu_t),
    )


@dataclass
class FidelityGrid:
    """Worst-case CROT fidelity on a ``(J, T_crot)`` grid; ``F[i, k]`` is at ``J[i], T[k]``."""

    J: np.ndarray
    T: np.ndarray
    F: np.ndarray
    sigma: float
    material: str = ""
    budgets: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if np.any(np.diff(self.J) <= 0) or np.any(np.diff(self.T) <= 0):
            raise ValueError("grid axes must be strictly increasing")

    def peak(self) -> tuple[float, float, float]:
        """``(F_max, J_at_max, T_at_max)``."""
        i, k = np.unravel_index(int(np.argmax(self.F)), self.F.shape)
        return float(self.F[i, k]), float(self.J[i]), float(self.T[k])

    def j_extent(self, threshold: float) -> tuple[float, float] | None:
        """Smallest and largest J whose row contains ``F > threshold``."""
        rows = np.any(self.F > threshold, axis=1)
        if not rows.any():
            return None
        return float(self.J[rows].min()), float(self.J[rows].max())

    def j_span_decades(self, threshold: float) -> float:
        ext = self.j_extent(threshold)
        return 0.0 if ext is None else math.log10(ext[1] / ext[0])

    def t_extent(self, threshold: float) -> tuple[float, float] | None:
        cols = np.any(self.F > threshold, axis=0)
        if not cols.any():
            return None
        return float(self.T[cols].min()), float(self.T[cols].max())

    def summary(self) -> dict:
        F, J, T = self.peak()
        out = {
            "material": self.material,
            "sigma_hz": self.sigma,
            "peak_fidelity": F,
            "argmax_j_hz": J,
            "argmax_t_crot_s": T,
        }
        for thr in (0.99, 0.999, 0.9999):
            ext, text = self.j_extent(thr), self.t_extent(thr)
            out[f"region_{thr}"] = {
                "j_min_hz": None if ext is None else ext[0],
                "j_max_hz": None if ext is None else ext[1],
                "j_span_decades": self.j_span_decades(thr),
                "t_min_s": None if text is None else text[0],
                "t_max_s": None if text is None else text[1],
            }
        return out


def _grid_row(args):
    params, T_values, sigma = args
    return [crot_error_budget(params, T, sigma) for T in T_values]


def fidelity_grid(
    params_base: SystemParams,
    J_values,
    T_values,
    sigma: float,
    material: str = "",
    workers: int | None = 1,
) -> FidelityGrid:
    """Evaluate :func:`crot_error_budget` at every ``(J, T_crot)`` point.

    Rows (one per J) are independent and are distributed over ``workers``
    processes; ``None`` uses every available CPU.
    """
    J_values = np.asarray(J_values, dtype=float)
    T_values = np.asarray(T_values, dtype=float)
    if np.any(J_values <= 0) or np.any(T_values <= 0):
        raise ValueError("grid ranges must be positive")
    tasks = [(params_base.replace(J=float(J)), tuple(T_values), sigma) for J in J_values]
    if workers is None:
        workers = os.cpu_count() or 1
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_grid_row, tasks))
    else:
        rows = [_grid_row(t) for t in tasks]
    F = np.array([[b.fidelity for b in row] for row in rows])
    return FidelityGrid(J=J_values, T=T_values, F=F, sigma=sigma, material=material, budgets=rows)


def log_axis(lo: float, hi: float, n: int) -> np.ndarray:
    return np.logspace(math.log10(lo), math.log10(hi), n)


# --- rotating-frame Hamiltonians and sequence unitaries -------------------------


def _drive_coupling(params: SystemParams, drive: PulseSpec | None, t: float) -> float:
    if drive is None:
        return 0.0
    return params.gamma_e * envelope_amplitude(drive, t)


def rotating_frame_hamiltonian(params: SystemParams, drive: PulseSpec | None, t: float, nu: float) -> np.ndarray:
    """Dressed-basis Hamiltonian in the frame rotating at ``nu`` with all four couplings."""
    db = dressed_basis(params)
    E = db.energies
    c = _drive_coupling(params, drive, t)
    s, tr = c * db.mu_s, c * db.mu_t
    H = np.diag(np.array([E[0] - nu, E[1], E[2], E[3] + nu], dtype=complex))
    H[0, 1] = H[1, 0] = s
    H[0, 2] = H[2, 0] = tr
    H[1, 3] = H[3, 1] = s
    H[2, 3] = H[3, 2] = tr
    return H


def secular_hamiltonian(params: SystemParams, drive: PulseSpec | None, t: float) -> np.ndarray:
    """Rotating-frame Hamiltonian at ``nu = down_x`` keeping only the resonant coupling."""
    db = dressed_basis(params)
    E_uu, E_ud, E_du, E_dd = db.energies
    c = _drive_coupling(params, drive, t) * db.mu_t
    H = np.diag(np.array([E_uu - (E_du - E_dd), E_ud, E_du, E_du], dtype=complex))
    H[2, 3] = H[3, 2] = c
    return H


def _gammas(params: SystemParams, t: float) -> tuple[float, float, float]:
    E_uu, E_ud, E_du, E_dd = dressed_basis(params).energies
    w = -2 * math.pi * t
    return w * (E_uu - (E_du - E_dd)), w * E_ud, w * E_du


def crot_unitary(params: SystemParams, phi: float, t: float) -> np.ndarray:
    """Propagator of the secular Hamiltonian over ``t`` for a pulse of total angle ``2 phi``."""
    g1, g2, g3 = _gammas(params, t)
    U = np.zeros((4, 4), dtype=complex)
    U[0, 0] = np.exp(1j * g1)
    U[1, 1] = np.exp(1j * g2)
    e3 = np.exp(1j * g3)
    U[2, 2] = U[3, 3] = e3 * math.cos(phi)
    U[2, 3] = U[3, 2] = -1j * e3 * math.sin(phi)
    return U


def secular_propagator(params: SystemParams, drive: PulseSpec) -> np.ndarray:
    """Numerical propagator of :func:`secular_hamiltonian` over the whole pulse.

    The secular Hamiltonian commutes with itself at all times, so the
    propagator is the exponential of its time integral.
    """
    T = drive.duration
    area, _ = quad(lambda tt: envelope_amplitude(drive, tt), 0.0, T, epsabs=0, epsrel=1e-13)
    Hint = secular_hamiltonian(params, None, 0.0) * T
    Hint[2, 3] = Hint[3, 2] = params.gamma_e * area * dressed_basis(params).mu_t
    w, v = np.linalg.eigh(Hint)
    return (v * np.exp(-2j * math.pi * w)) @ v.conj().T


def x2_unitary(params: SystemParams, t: float) -> np.ndarray:
    """Unconditional pi flip of electron 2 (two-tone pulse of duration ``t``)."""
    _, g2, g3 = _gammas(params, t)
    U = np.zeros((4, 4), dtype=complex)
    U[0, 1] = U[1, 0] = -1j * np.exp(1j * g2)
    U[2, 3] = U[3, 2] = -1j * np.exp(1j * g3)
    return U


def x2_amplitude_ratio(params: SystemParams) -> float:
    """Drive amplitude ratio (``mu_s`` pair over ``mu_t`` pair) for equal-time pi flips."""
    db = dressed_basis(params)
    c, s = math.cos(db.theta), math.sin(db.theta)
    return (c + s) / (c - s)


def crot_sequence(params: SystemParams, t_sqrt: float = 100e-9, t_flip: float = 100e-9) -> np.ndarray:
    """Refocused CROT ``X2 U_sqrt X2 U_sqrt`` with ``U_sqrt`` a pi/2 pulse."""
    u_half = crot_unitary(params, math.pi / 4, t_sqrt)
    x2 = x2_unitary(params, t_flip)
    return x2 @ u_half @ x2 @ u_half


@dataclass(frozen=True)
class PhaseDecomposition:
    """Single-qubit, interaction and global phases of a permutation-like unitary.

    ``basis_phases`` are ``(uu, ud, du, dd)``.  ``theta_12`` is reported in
    ``(-pi/4, pi/4]``; a shift by ``pi/2`` is a product of local Z rotations.
    """

    theta_1: float
    theta_2: float
    theta_12: float
    theta_g: float
    basis_phases: tuple[float, float, float, float]


def _wrap_quarter(x: float) -> float:
    q = math.pi / 2
    r = math.fmod(x + q / 2, q)
    if r <= 0:
        r += q
    return r - q / 2


def phase_decomposition(U: np.ndarray, tol: float = 1e-9) -> PhaseDecomposition:
    U = np.asarray(U)
    if U.shape != (4, 4):
        raise ValueError(f"expected a 4x4 unitary, got {U.shape}")
    mags = np.abs(U)
    rows = []
    for col in range(4):
        nz = np.flatnonzero(mags[:, col] > tol)
        if nz.size != 1:
            raise ValueError(f"column {col} has {nz.size} non-zero elements; expected exactly one")
        rows.append(int(nz[0]))
    if sorted(rows) != [0, 1, 2, 3]:
        raise ValueError("non-zero elements do not form a permutation")
    th = [float(np.angle(U[r, c])) for c, r in enumerate(rows)]
    uu, ud, du, dd = th
    return PhaseDecomposition(
        theta_1=(uu + ud - du - dd) / 4,
        theta_2=(uu - ud + du - dd) / 4,
        theta_12=_wrap_quarter((ud + du - uu - dd) / 4),
        theta_g=(uu + ud + du + dd) / 4,
        basis_phases=(uu, ud, du, dd),
    )


def population_map(U: np.ndarray) -> np.ndarray:
    """``|<i|U|j>|^2``: probability of ending in ``i`` from basis state ``j``."""
    return np.abs(np.asarray(U)) ** 2


def unitarity_residual(U: np.ndarray) -> float:
    U = np.asarray(U)
    return float(np.linalg.norm(U.conj().T @ U - np.eye(U.shape[0]), ord=2))


def dephasing_error_estimate(T_crot: float, T2: float) -> float:
    """Order-of-magnitude phase error ``T_crot / T2``."""
    if not T2 > 0:
        raise ValueError("T2 must be positive")
    return T_crot / T2
