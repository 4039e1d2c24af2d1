"""Spin operators and Hamiltonians for an exchange-coupled pair of donors.

Two electron spins S1, S2 and two nuclear spins I1, I2 (all spin-1/2) are
described in units of frequency (Hz).  The full Hilbert space is ordered as

    (up-up, up-down, down-up, down-down)_electrons x (same)_nuclei

with the electron index varying slowest, i.e. ``index = 4 * e + n`` where
``e = 2 * e1 + e2`` and ``n = 2 * n1 + n2`` and ``0`` means spin up.  The
reduced electron-only space uses the same four-state ordering.
"""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

__all__ = [
    "SystemParams",
    "NuclearConfig",
    "DressedBasis",
    "SZ",
    "SX",
    "SY",
    "electron_ops",
    "nuclear_ops",
    "total_sz",
    "build_full_hamiltonian",
    "build_electron_hamiltonian",
    "project_full_hamiltonian",
    "dressed_basis",
    "eigensystem",
    "transition_frequencies",
    "delta_bz",
    "params_from_mapping",
    "load_params",
    "NotHermitianError",
]

GAMMA_E_DEFAULT = 27.97e9  # Hz/T
GAMMA_N_DEFAULT = -17.23e6  # Hz/T, 31P
B0_DEFAULT = 1.0  # T
A_BULK = 117e6  # Hz

SX = np.array([[0, 1], [1, 0]], dtype=complex) / 2
SY = np.array([[0, -1j], [1j, 0]], dtype=complex) / 2
SZ = np.array([[1, 0], [0, -1]], dtype=complex) / 2
_I2 = np.eye(2, dtype=complex)

ELECTRON_LABELS = ("uu", "ud", "du", "dd")


class NotHermitianError(ValueError):
    pass


@dataclass(frozen=True)
class SystemParams:
    """Physical parameters of the donor pair.

    All couplings are in Hz, gyromagnetic ratios in Hz/T and the field in T.
    The defaults describe a 31P pair at 1 T with ``A_bar = 117 MHz`` and
    ``dA / A_bar = 2.5 %`` (``A2 > A1``).
    """

    gamma_e: float = GAMMA_E_DEFAULT
    gamma_n: float = GAMMA_N_DEFAULT
    B0: float = B0_DEFAULT
    A1: float = A_BULK * (1 - 0.025)
    A2: float = A_BULK * (1 + 0.025)
    J: float = 1e6

    def __post_init__(self):
        if not self.B0 > 0:
            raise ValueError(f"B0 must be positive, got {self.B0}")
        if not (self.A1 > 0 and self.A2 > 0):
            raise ValueError(f"hyperfine couplings must be positive, got A1={self.A1}, A2={self.A2}")
        if not self.J >= 0:
            raise ValueError(f"J must be non-negative, got {self.J}")
        if not self.high_field:
            warnings.warn(
                f"gamma_e*B0 = {self.zeeman:.4g} Hz is below 10*A_bar = {10 * self.A_bar:.4g} Hz; "
                "high-field approximations are unreliable",
                stacklevel=3,
            )

    @property
    def A_bar(self) -> float:
        return (self.A1 + self.A2) / 2

    @property
    def dA(self) -> float:
        return (self.A2 - self.A1) / 2

    @property
    def zeeman(self) -> float:
        """Electron Zeeman frequency ``gamma_e * B0``."""
        return self.gamma_e * self.B0

    @property
    def high_field(self) -> bool:
        return self.zeeman >= 10 * self.A_bar

    def replace(self, **changes) -> "SystemParams":
        kw = asdict(self)
        kw.update(changes)
        return SystemParams(**kw)

    def to_dict(self) -> dict:
        return {
            "gamma_e_hz_per_t": self.gamma_e,
            "gamma_n_hz_per_t": self.gamma_n,
            "b0_t": self.B0,
            "a1_hz": self.A1,
            "a2_hz": self.A2,
            "j_hz": self.J,
        }

    @classmethod
    def from_physical(cls, zeeman: float, A_bar: float, dA: float, J: float, **kw) -> "SystemParams":
        """Build parameters from ``(gamma_e*B0, A_bar, dA, J)``.

        ``gamma_e`` (and ``gamma_n``) keep their defaults unless given, and
        ``B0`` is chosen to reproduce ``zeeman``.
        """
        gamma_e = kw.pop("gamma_e", GAMMA_E_DEFAULT)
        return cls(gamma_e=gamma_e, B0=zeeman / gamma_e, A1=A_bar - dA, A2=A_bar + dA, J=J, **kw)


_PARAM_KEYS = {
    "gamma_e_hz_per_t": "gamma_e",
    "gamma_n_hz_per_t": "gamma_n",
    "b0_t": "B0",
    "a1_hz": "A1",
    "a2_hz": "A2",
    "j_hz": "J",
}


def params_from_mapping(data: Mapping) -> SystemParams:
    """Parameters from the JSON-style key set; missing keys take defaults."""
    unknown = set(data) - set(_PARAM_KEYS)
    if unknown:
        raise KeyError(f"unknown parameter keys: {sorted(unknown)}")
    kw = {}
    for key, name in _PARAM_KEYS.items():
        if key in data:
            value = data[key]
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError(f"{key} must be a number, got {value!r}")
            kw[name] = float(value)
    return SystemParams(**kw)


def load_params(path) -> SystemParams:
    with open(Path(path), encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise TypeError("parameter file must hold a JSON object")
    return params_from_mapping(data)


class NuclearConfig(enum.Enum):
    """Static nuclear configuration ``(I1z, I2z)``."""

    UpUp = (0.5, 0.5)
    UpDown = (0.5, -0.5)
    DownUp = (-0.5, 0.5)
    DownDown = (-0.5, -0.5)

    @property
    def m1(self) -> float:
        return self.value[0]

    @property
    def m2(self) -> float:
        return self.value[1]

    @property
    def parallel(self) -> bool:
        return self.m1 == self.m2

    @property
    def index(self) -> int:
        """Position of this configuration in the nuclear basis."""
        return 2 * int(self.m1 < 0) + int(self.m2 < 0)

    @classmethod
    def parse(cls, label: str) -> "NuclearConfig":
        key = label.replace("_", "").replace("-", "").lower()
        for cfg in cls:
            if cfg.name.lower() == key:
                return cfg
        raise ValueError(f"unknown nuclear configuration {label!r}")


def _embed(op: np.ndarray, site: int) -> np.ndarray:
    mats = [_I2] * 4
    mats[site] = op
    out = mats[0]
    for m in mats[1:]:
        out = np.kron(out, m)
    return out


def electron_ops(n: int, dim: int = 16) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(Sx, Sy, Sz)`` of electron ``n`` (1 or 2) in the 16- or 4-dim space."""
    if n not in (1, 2):
        raise ValueError("electron index must be 1 or 2")
    if dim == 16:
        return tuple(_embed(op, n - 1) for op in (SX, SY, SZ))
    if dim == 4:
        pair = (lambda op: np.kron(op, _I2)) if n == 1 else (lambda op: np.kron(_I2, op))
        return tuple(pair(op) for op in (SX, SY, SZ))
    raise ValueError(f"dim must be 4 or 16, got {dim}")


def nuclear_ops(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n not in (1, 2):
        raise ValueError("nucleus index must be 1 or 2")
    return tuple(_embed(op, n + 1) for op in (SX, SY, SZ))


def total_sz() -> np.ndarray:
    """``S1z + S2z + I1z + I2z`` in the full space."""
    return sum(_embed(SZ, k) for k in range(4))


def _dot(a, b) -> np.ndarray:
    return sum(x @ y for x, y in zip(a, b))


def build_full_hamiltonian(params: SystemParams, flip_flop: bool = True) -> np.ndarray:
    """16x16 two-donor Hamiltonian in Hz.

    ``flip_flop=False`` keeps only the ``Sz*Iz`` part of each hyperfine term,
    which is the secular form used for the electron-only model.
    """
    S1, S2 = electron_ops(1), electron_ops(2)
    I1, I2 = nuclear_ops(1), nuclear_ops(2)
    ez = params.gamma_e * params.B0
    nz = params.gamma_n * params.B0
    H = ez * (S1[2] + S2[2]) + nz * (I1[2] + I2[2]) + params.J * _dot(S1, S2)
    if flip_flop:
        H = H + params.A1 * _dot(S1, I1) + params.A2 * _dot(S2, I2)
    else:
        H = H + params.A1 * S1[2] @ I1[2] + params.A2 * S2[2] @ I2[2]
    return H


def build_electron_hamiltonian(params: SystemParams, config: NuclearConfig) -> np.ndarray:
    """4x4 electron Hamiltonian with the nuclei frozen in ``config``.

    Diagonal entries include the (constant) nuclear Zeeman energy, which
    vanishes for the antiparallel configurations.
    """
    ez = params.gamma_e * params.B0
    m1, m2 = config.value
    h1, h2 = params.A1 * m1, params.A2 * m2
    nz = params.gamma_n * params.B0 * (m1 + m2)
    J = params.J
    diag = [
        ez + J / 4 + (h1 + h2) / 2,
        -J / 4 + (h1 - h2) / 2,
        -J / 4 + (-h1 + h2) / 2,
        -ez + J / 4 - (h1 + h2) / 2,
    ]
    H = np.diag(np.array(diag, dtype=complex) + nz)
    H[1, 2] = H[2, 1] = J / 2
    return H


def project_full_hamiltonian(params: SystemParams, config: NuclearConfig) -> np.ndarray:
    """Electron block of the secular full Hamiltonian for one nuclear state.

    Independent route to :func:`build_electron_hamiltonian`.
    """
    H = build_full_hamiltonian(params, flip_flop=False)
    idx = [4 * e + config.index for e in range(4)]
    return H[np.ix_(idx, idx)]


@dataclass(frozen=True)
class DressedBasis:
    """Exchange-dressed eigenbasis for the ``DownUp`` nuclear configuration.

    ``states`` holds the columns ``(uu, ~ud, ~du, dd)`` in the bare electron
    basis; ``energies`` the matching eigenenergies in Hz.
    """

    theta: float
    states: np.ndarray = field(repr=False)
    energies: np.ndarray

    @property
    def ud(self) -> np.ndarray:
        return self.states[:, 1]

    @property
    def du(self) -> np.ndarray:
        return self.states[:, 2]

    @property
    def mu_s(self) -> float:
        return (math.cos(self.theta) - math.sin(self.theta)) / 2

    @property
    def mu_t(self) -> float:
        return (math.cos(self.theta) + math.sin(self.theta)) / 2


def dressed_basis(params: SystemParams) -> DressedBasis:
    Ab, J, dA = params.A_bar, params.J, params.dA
    if not Ab > 0:
        raise ValueError("A_bar must be positive")
    ez = params.gamma_e * params.B0
    theta = 0.5 * math.atan(J / Ab)
    c, s = math.cos(theta), math.sin(theta)
    root = math.hypot(Ab, J)
    states = np.zeros((4, 4), dtype=complex)
    states[0, 0] = 1
    states[:, 1] = [0, c, -s, 0]
    states[:, 2] = [0, s, c, 0]
    states[3, 3] = 1
    energies = np.array(
        [
            ez + J / 4 + dA / 2,
            -J / 4 - root / 2,
            -J / 4 + root / 2,
            -ez + J / 4 - dA / 2,
        ]
    )
    return DressedBasis(theta=theta, states=states, energies=energies)


def eigensystem(H: np.ndarray, atol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and orthonormal eigenvectors of a Hermitian matrix.

    Raises
    ------
    NotHermitianError
        If ``H`` deviates from ``H^dagger`` by more than ``atol * ||H||``.
    """
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise NotHermitianError(f"expected a square matrix, got shape {H.shape}")
    scale = max(np.linalg.norm(H), 1.0)
    if np.linalg.norm(H - H.conj().T) > atol * scale:
        raise NotHermitianError("matrix is not Hermitian")
    w, v = np.linalg.eigh(H)
    return w, v


def transition_frequencies(params: SystemParams) -> dict[str, float]:
    """ESR line positions for the ``DownUp`` nuclear configuration.

    Keys name the transition by which electron flips: ``"up_x"`` rotates
    electron 2 with electron 1 up, ``"x_down"`` rotates electron 1 with
    electron 2 down, and so on.
    """
    ez, Ab, dA, J = params.gamma_e * params.B0, params.A_bar, params.dA, params.J
    root = math.hypot(Ab, J)
    base = ez + dA / 2
    return {
        "up_x": base + J / 2 + root / 2,
        "down_x": base - J / 2 + root / 2,
        "x_up": base + J / 2 - root / 2,
        "x_down": base - J / 2 - root / 2,
    }


def delta_bz(params: SystemParams, config: NuclearConfig) -> float:
    """Effective longitudinal field difference seen by the electrons, in Hz."""
    if config.parallel:
        return abs(params.dA)
    return params.A_bar
