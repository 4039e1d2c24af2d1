"""ESR spectrum of the two-donor system: line enumeration, the J fingerprint,
readout filtering and parameter extraction from observed line positions.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares, linear_sum_assignment

from .spin import (
    NuclearConfig,
    SystemParams,
    build_electron_hamiltonian,
    build_full_hamiltonian,
    eigensystem,
    electron_ops,
)

DIPOLE_THRESHOLD = 1e-4
MERGE_TOLERANCE = 1e-3  # in units of A_bar
RESOLUTION = 1e-5  # in units of A_bar; closer lines are one unresolved line
ANCHOR_J_OVER_ABAR = 0.1
DD_CHARACTER = 0.5
MIN_CONTRAST = 0.1

# sigma_x = 2 S_x on each electron
_MX = 2 * (electron_ops(1)[0] + electron_ops(2)[0])
_S1Z = np.real(np.diag(electron_ops(1)[2]))
_S2Z = np.real(np.diag(electron_ops(2)[2]))

LINE_LABELS = ("up_x", "down_x", "x_up", "x_down")


class DegenerateInputError(ValueError):
    """Observed lines do not determine the requested parameters."""


class ExtractionError(RuntimeError):
    """The line-position fit failed to converge."""

    def __init__(self, message: str, residuals=None):
        super().__init__(message)
        self.residuals = residuals


@dataclass(frozen=True)
class TransitionLine:
    """One ESR line between eigenstates ``initial`` (lower) and ``final`` (upper).

    ``contrast1`` and ``contrast2`` are ``<S_nz>_final - <S_nz>_initial``.
    """

    initial: int
    final: int
    frequency: float
    weight: float
    contrast1: float
    contrast2: float
    branch: int | None = None
    flagged: bool = False
    initial_state: np.ndarray = field(default=None, repr=False, compare=False)
    final_state: np.ndarray = field(default=None, repr=False, compare=False)

    def reversed(self) -> "TransitionLine":
        """The same line traversed downwards (emission); contrasts change sign."""
        return replace(
            self,
            initial=self.final,
            final=self.initial,
            contrast1=-self.contrast1,
            contrast2=-self.contrast2,
            initial_state=self.final_state,
            final_state=self.initial_state,
        )

    def dd_character(self) -> float:
        """Weight of ``|dd>`` (any nuclear state) in the initial state."""
        if self.initial_state is None:
            raise ValueError("line carries no eigenstate decomposition")
        return float(np.sum(np.abs(self.initial_state[12:16]) ** 2))


def _in_window(freq: float, params: SystemParams) -> bool:
    ez = params.zeeman
    return 0.5 * ez < freq < 1.5 * ez


def all_transitions(params: SystemParams, threshold: float = DIPOLE_THRESHOLD) -> list[TransitionLine]:
    """Enumerate ESR lines of the full Hamiltonian, sorted by frequency.

    Only eigenstate pairs whose splitting lies within ``gamma_e B0 / 2`` of
    the electron Zeeman frequency are considered, and lines weaker than
    ``threshold`` times the strongest are dropped.
    """
    w, v = eigensystem(build_full_hamiltonian(params))
    M = v.conj().T @ _MX @ v
    weights = np.abs(M) ** 2
    pops = np.abs(v) ** 2
    s1, s2 = _S1Z @ pops, _S2Z @ pops
    cand = []
    for i in range(16):
        for f in range(i + 1, 16):
            nu = w[f] - w[i]
            if _in_window(nu, params):
                cand.append((i, f, nu, weights[i, f]))
    if not cand:
        return []
    wmax = max(c[3] for c in cand)
    lines = [
        TransitionLine(
            initial=i,
            final=f,
            frequency=float(nu),
            weight=float(wt),
            contrast1=float(s1[f] - s1[i]),
            contrast2=float(s2[f] - s2[i]),
            initial_state=v[:, i].copy(),
            final_state=v[:, f].copy(),
        )
        for i, f, nu, wt in cand
        if wt >= threshold * wmax
    ]
    return sorted(lines, key=lambda ln: ln.frequency)


@dataclass
class FingerprintDataset:
    """Lines at each ``J / A_bar`` of a sweep; ``lines[k]`` belongs to ``j_over_abar[k]``."""

    j_over_abar: np.ndarray
    lines: list
    params: SystemParams
    threshold: float = DIPOLE_THRESHOLD

    def branches(self) -> set[int]:
        return {ln.branch for slc in self.lines for ln in slc if ln.branch is not None}

    def branch_track(self, label: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(j_over_abar, frequency, weight)`` of one branch where it is above threshold."""
        rows = [(x, ln.frequency, ln.weight) for x, slc in zip(self.j_over_abar, self.lines) for ln in slc if ln.branch == label]
        if not rows:
            return np.empty(0), np.empty(0), np.empty(0)
        a = np.array(rows)
        return a[:, 0], a[:, 1], a[:, 2]

    def slice_at(self, j_over_abar: float) -> list:
        k = int(np.argmin(np.abs(np.log(self.j_over_abar / j_over_abar))))
        return self.lines[k]


def _clusters(lines, resolution: float) -> list[list]:
    """Group frequency-sorted lines whose neighbours lie within ``resolution``."""
    groups = []
    for ln in sorted(lines, key=lambda ln: ln.frequency):
        if groups and ln.frequency - groups[-1][-1].frequency <= resolution:
            groups[-1].append(ln)
        else:
            groups.append([ln])
    return groups


def distinct_lines(lines, resolution: float) -> list[TransitionLine]:
    """Merge lines closer than ``resolution`` (Hz) into their strongest member.

    The merged line carries the summed weight of its group.
    """
    out = []
    for g in _clusters(lines, resolution):
        top = max(g, key=lambda ln: ln.weight)
        out.append(replace(top, weight=float(sum(ln.weight for ln in g))))
    return out


def _collapse_branches(lines) -> list[TransitionLine]:
    groups: dict = {}
    out = []
    for ln in lines:
        if ln.branch is None:
            out.append(ln)
        else:
            groups.setdefault(ln.branch, []).append(ln)
    for g in groups.values():
        top = max(g, key=lambda ln: ln.weight)
        out.append(replace(top, weight=float(sum(ln.weight for ln in g))))
    return sorted(out, key=lambda ln: ln.frequency)


def _eigenvectors(params: SystemParams) -> np.ndarray:
    return eigensystem(build_full_hamiltonian(params))[1]


def _slice(args):
    params, threshold = args
    return all_transitions(params, threshold), _eigenvectors(params)


def fingerprint_sweep(
    params_base: SystemParams,
    j_over_abar_values,
    threshold: float = DIPOLE_THRESHOLD,
    merge_tolerance: float = MERGE_TOLERANCE,
    resolution: float = RESOLUTION,
    workers: int = 1,
) -> FingerprintDataset:
    """Sweep ``J`` and label branches.

    Branches are numbered 1, 2, ... by ascending frequency on the slice
    ``J = 0.1 A_bar``; lines within ``resolution * A_bar`` of each other
    there (weak nuclear-flip satellites) share one branch and are reported
    as a single line carrying their summed weight.  Eigenstates are followed between neighbouring sweep
    points by maximum overlap, so a branch keeps its label through crossings
    with lines of other nuclear configurations.  Two labelled lines closer
    than ``merge_tolerance * A_bar`` on the same slice are both flagged.
    """
    x = np.asarray(j_over_abar_values, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("sweep values must be a non-empty 1-d sequence")
    if np.any(x <= 0):
        raise ValueError("sweep values must be positive")
    if np.any(np.diff(x) <= 0):
        raise ValueError("sweep values must be strictly increasing")
    Ab = params_base.A_bar
    if np.any(x * Ab >= params_base.zeeman):
        raise ValueError("sweep must stay within J < gamma_e B0")

    # the anchor slice is inserted into the tracking path if absent
    xs = np.union1d(x, [ANCHOR_J_OVER_ABAR])
    tasks = [(params_base.replace(J=float(xx * Ab)), threshold) for xx in xs]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_slice, tasks))
    else:
        results = [_slice(t) for t in tasks]

    # perm[k][j] = eigenstate index at slice k of anchor state j
    a = int(np.flatnonzero(xs == ANCHOR_J_OVER_ABAR)[0])
    perm = [None] * len(xs)
    perm[a] = np.arange(16)
    for step in (1, -1):
        k = a + step
        while 0 <= k < len(xs):
            prev_v, cur_v = results[k - step][1], results[k][1]
            overlap = np.abs(prev_v.conj().T @ cur_v) ** 2
            _, cols = linear_sum_assignment(-overlap)
            perm[k] = cols[perm[k - step]]
            k += step

    anchor_keys = {}
    for b, cluster in enumerate(_clusters(results[a][0], resolution * Ab)):
        for ln in cluster:
            anchor_keys[(ln.initial, ln.final)] = b + 1
    keep = set(np.searchsorted(xs, x))
    tol = merge_tolerance * Ab
    sweep_lines = []
    for k, (lines, _) in enumerate(results):
        if k not in keep:
            continue
        inv = np.empty(16, dtype=int)
        inv[perm[k]] = np.arange(16)
        labelled = [replace(ln, branch=anchor_keys.get((int(inv[ln.initial]), int(inv[ln.final])))) for ln in lines]
        labelled = _collapse_branches(labelled)
        flags = [False] * len(labelled)
        for p, q in itertools.combinations(range(len(labelled)), 2):
            lp, lq = labelled[p], labelled[q]
            if lp.branch is not None and lq.branch is not None and abs(lp.frequency - lq.frequency) < tol:
                flags[p] = flags[q] = True
        sweep_lines.append([replace(ln, flagged=fl) for ln, fl in zip(labelled, flags)])
    return FingerprintDataset(j_over_abar=x, lines=sweep_lines, params=params_base, threshold=threshold)


def readout_filter(lines, mode: str = "full", min_contrast: float = MIN_CONTRAST) -> list:
    """Lines visible to a given readout scheme.

    ``donor2_only`` keeps lines out of a mostly-``|dd>`` state that raise
    ``<S2z>`` by more than ``min_contrast``.
    """
    if mode == "full":
        return list(lines)
    if mode != "donor2_only":
        raise ValueError(f"unknown readout mode {mode!r}")
    return [ln for ln in lines if ln.dd_character() > DD_CHARACTER and ln.contrast2 > min_contrast]


# --- parameter extraction ------------------------------------------------------


@dataclass(frozen=True)
class ObservedLine:
    """Observed line position, its nuclear configuration and optional transition label."""

    frequency: float
    config: NuclearConfig
    label: str | None = None

    def __post_init__(self):
        if not (math.isfinite(self.frequency) and self.frequency > 0):
            raise ValueError(f"line frequency must be positive, got {self.frequency}")
        if self.label is not None and self.label not in LINE_LABELS:
            raise ValueError(f"unknown transition label {self.label!r}; expected one of {LINE_LABELS}")


@dataclass(frozen=True)
class ExtractionResult:
    zeeman: float
    A_bar: float
    dA: float
    J: float
    residual_norm: float
    residuals: tuple
    labels: tuple

    def as_params(self, **kw) -> SystemParams:
        return SystemParams.from_physical(self.zeeman, self.A_bar, self.dA, self.J, **kw)


def _label_states(v: np.ndarray, w: np.ndarray, ud_above: bool | None = None) -> dict[str, int]:
    """Map ``uu, ud, du, dd`` to eigenvector columns of a 4x4 electron block.

    The dressed pair never crosses, so ``~ud`` is the upper middle state
    whenever the bare ``|ud>`` energy lies above ``|du>`` (``ud_above``).
    Population is used only when that ordering is not supplied.
    """
    pops = np.abs(v) ** 2
    uu, dd = int(np.argmax(pops[0])), int(np.argmax(pops[3]))
    mid = [k for k in range(4) if k not in (uu, dd)]
    if len(mid) != 2:
        raise ExtractionError("could not identify the dressed electron states")
    lo, hi = sorted(mid, key=lambda k: w[k])
    if ud_above is not None:
        ud, du = (hi, lo) if ud_above else (lo, hi)
    elif pops[1, lo] != pops[1, hi]:
        ud, du = (lo, hi) if pops[1, lo] > pops[1, hi] else (hi, lo)
    else:
        raise ExtractionError("dressed states are equal mixtures; transition labels are ambiguous")
    return {"uu": uu, "ud": ud, "du": du, "dd": dd}


def _ud_above(params: SystemParams, config: NuclearConfig) -> bool | None:
    # bare E_ud - E_du = A1 m1 - A2 m2
    d = params.A1 * config.m1 - params.A2 * config.m2
    return None if d == 0 else bool(d > 0)


def _lines_from_block(w, v, ud_above: bool | None = None) -> dict[str, float]:
    s = _label_states(v, w, ud_above)
    return {
        "up_x": w[s["uu"]] - w[s["ud"]],
        "down_x": w[s["du"]] - w[s["dd"]],
        "x_up": w[s["uu"]] - w[s["du"]],
        "x_down": w[s["ud"]] - w[s["dd"]],
    }


def model_lines(params: SystemParams, model: str = "full") -> dict[NuclearConfig, dict[str, float]]:
    """Labelled ESR line positions for every nuclear configuration.

    ``model="reduced"`` uses the electron-only Hamiltonian of each
    configuration; ``"full"`` diagonalises the two-donor Hamiltonian and
    assigns each eigenstate to the configuration it overlaps most.
    """
    out = {}
    if model == "reduced":
        for c in NuclearConfig:
            w, v = eigensystem(build_electron_hamiltonian(params, c))
            out[c] = _lines_from_block(w, v, _ud_above(params, c))
        return out
    if model != "full":
        raise ValueError(f"unknown model {model!r}")
    w, v = eigensystem(build_full_hamiltonian(params))
    pops = (np.abs(v) ** 2).reshape(4, 4, 16)  # electron, nucleus, eigenstate
    nuc = pops.sum(axis=0)
    owner = np.argmax(nuc, axis=0)
    for c in NuclearConfig:
        cols = np.flatnonzero(owner == c.index)
        if cols.size != 4:
            raise ExtractionError("nuclear configurations are too strongly mixed to label lines")
        block = pops[:, c.index, :][:, cols]
        out[c] = _lines_from_block(w[cols], np.sqrt(block), _ud_above(params, c))
    return out


def _small_j_row(config: NuclearConfig, label: str) -> np.ndarray:
    """Coefficients of ``(zeeman, A_bar, dA, J)`` in the first-order line position."""
    m1, m2 = config.m1, config.m2
    # A1 = A_bar - dA, A2 = A_bar + dA
    if label in ("up_x", "down_x"):  # electron 2 flips
        s1 = 0.5 if label == "up_x" else -0.5
        return np.array([1.0, m2, m2, s1])
    s2 = 0.5 if label == "x_up" else -0.5
    return np.array([1.0, m1, -m1, s2])


def _params_from_vector(p, base: SystemParams) -> SystemParams:
    ez, Ab, dA, J = p
    return SystemParams.from_physical(ez, Ab, dA, J, gamma_e=base.gamma_e, gamma_n=base.gamma_n)


def _fit(lines, labels, p0, base: SystemParams, model: str):
    def resid(p):
        try:
            ml = model_lines(_params_from_vector(p, base), model)
        except (ValueError, ExtractionError):
            return np.full(len(lines), 1e12)
        return np.array([ml[ln.config][lab] - ln.frequency for ln, lab in zip(lines, labels)])

    scale = np.array([abs(p0[0]), abs(p0[1]), max(abs(p0[1]) * 1e-2, abs(p0[2])), max(abs(p0[1]) * 1e-2, abs(p0[3]))])
    lo = np.array([0.0, 0.0, -np.inf, 0.0])
    p0 = np.clip(p0, lo + np.array([1.0, 1.0, 0.0, 0.0]), np.inf)
    res = least_squares(resid, p0, bounds=(lo, np.inf), x_scale=scale, xtol=1e-15, ftol=1e-15, gtol=1e-15, method="trf", diff_step=1e-7, max_nfev=2000)
    return res


def _line_jacobian(lines, labels, x, base: SystemParams) -> np.ndarray:
    """Finite-difference Jacobian of full-model line positions.

    ``dA`` and ``J`` closer to zero than the step are differenced one-sidedly
    away from zero: the dressed-state labels of the parallel configurations
    swap when ``dA`` changes sign, and ``J`` is bounded below.
    """
    h = 1e-6 * x[1]

    def f(p):
        ml = model_lines(_params_from_vector(p, base), "full")
        return np.array([ml[ln.config][lab] for ln, lab in zip(lines, labels)])

    f0 = None
    cols = []
    for i in range(4):
        e = np.zeros(4)
        if i in (2, 3) and abs(x[i]) < 2 * h:
            e[i] = h if x[i] >= 0 else -h
            f0 = f(x) if f0 is None else f0
            cols.append((f(x + e) - f0) / e[i])
        else:
            e[i] = h
            cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.array(cols).T


def _check_rank(jac: np.ndarray, rtol: float = 1e-5):
    s = np.linalg.svd(jac, compute_uv=False)
    if s.size < 4 or s[-1] < rtol * s[0]:
        raise DegenerateInputError(
            "observed lines constrain fewer than four independent parameter combinations"
            f" (relative singular values {(s / s[0]).tolist()})"
        )


def _linear_init(lines, labels) -> np.ndarray:
    A = np.array([_small_j_row(ln.config, lab) for ln, lab in zip(lines, labels)])
    b = np.array([ln.frequency for ln in lines])
    p, *_ = np.linalg.lstsq(A, b, rcond=None)
    return p


def _starts(lines, labels, fallback: bool = False):
    """Initial guesses for one labelling.

    The primary guess is the small-J linear solution.  Far outside the
    small-J regime it can return a negative ``A_bar`` or settle in a wrong
    basin; the fallback guesses keep its Zeeman estimate and combine a few
    ``A_bar`` and ``J`` scales set by the spread of the observed lines.
    """
    p0 = _linear_init(lines, labels)
    if p0[0] <= 0:
        return
    if not fallback:
        if p0[1] > 0:
            yield p0
        return
    spread = float(np.ptp([ln.frequency for ln in lines])) or abs(p0[1])
    for J in (max(p0[3], 0.0), spread / 2):
        for a in (abs(p0[1]), spread / 4, spread / 16, spread / 64):
            if a > 0:
                yield np.array([p0[0], a, 0.0, J])


def _assignments(lines):
    by_cfg = {}
    for k, ln in enumerate(lines):
        by_cfg.setdefault(ln.config, []).append(k)
    per_cfg = []
    for cfg, idx in by_cfg.items():
        fixed = [lines[k].label for k in idx if lines[k].label is not None]
        if len(set(fixed)) != len(fixed):
            raise DegenerateInputError(f"duplicate transition labels within configuration {cfg.name}")
        free = [k for k in idx if lines[k].label is None]
        pool = [lab for lab in LINE_LABELS if lab not in fixed]
        if len(free) > len(pool):
            raise DegenerateInputError(f"more than four lines given for configuration {cfg.name}")
        per_cfg.append([(free, perm) for perm in itertools.permutations(pool, len(free))])
    for combo in itertools.product(*per_cfg):
        labels = [ln.label for ln in lines]
        for free, perm in combo:
            for k, lab in zip(free, perm):
                labels[k] = lab
        yield tuple(labels)


def extract_parameters(observed, base: SystemParams | None = None, rtol: float = 1e-9) -> ExtractionResult:
    """Fit ``(gamma_e B0, A_bar, dA, J)`` to observed ESR line positions.

    Parameters
    ----------
    observed : sequence of ObservedLine
        At least four lines from at least two nuclear configurations.
        Unlabelled lines are assigned by trying every labelling and keeping
        the physically valid exact fits.
    base : SystemParams, optional
        Supplies the known gyromagnetic ratios.
    rtol : float
        Relative residual (to the mean line frequency) accepted as an exact fit.

    Raises
    ------
    DegenerateInputError
        Fewer than four lines, a single nuclear configuration, a
        rank-deficient fit or several incompatible labellings.
    ExtractionError
        No labelling reproduces the observed lines.
    """
    base = base or SystemParams()
    lines = list(observed)
    if len(lines) < 4:
        raise DegenerateInputError(f"need at least four lines, got {len(lines)}")
    configs = {ln.config for ln in lines}
    if len(configs) < 2:
        raise DegenerateInputError(
            "all lines come from one nuclear configuration; its four lines share the combination"
            " gamma_e*B0 + dA/2 and fix only three independent parameters"
        )
    fmean = float(np.mean([ln.frequency for ln in lines]))
    candidates = list(itertools.islice(_assignments(lines), 20001))
    if len(candidates) > 20000:
        raise DegenerateInputError("too many unlabelled lines; supply transition labels")

    full_rank = []
    for labels in candidates:
        rows = np.array([_small_j_row(ln.config, lab) for ln, lab in zip(lines, labels)])
        if np.linalg.matrix_rank(rows) == 4:
            full_rank.append(labels)
    rank_deficient = len(candidates) - len(full_rank)

    solutions = []
    best = None
    # the rescaled starts are only tried when no labelling fits from the linear one
    for fallback in (False, True):
        for labels in full_rank:
            for p0 in _starts(lines, labels, fallback):
                coarse = _fit(lines, labels, p0, base, "reduced")
                fine = _fit(lines, labels, coarse.x, base, "full")
                rn = float(np.linalg.norm(fine.fun))
                if best is None or rn < best[0]:
                    best = (rn, fine, labels)
                valid = fine.x[1] > 0 and abs(fine.x[2]) < fine.x[1] and fine.x[3] < fine.x[0]
                if valid and rn <= rtol * fmean:
                    solutions.append((rn, fine, labels))
                    break
        if solutions:
            break
    if not solutions and rank_deficient == len(candidates):
        raise DegenerateInputError(
            "the selected transitions depend on (A_bar, dA, J) only through three combinations;"
            " choose lines with hyperfine shifts of both signs"
        )
    if not solutions:
        raise ExtractionError(
            "no transition assignment reproduces the observed lines",
            residuals=None if best is None else best[1].fun,
        )
    solutions.sort(key=lambda s: s[0])
    rn, fit, labels = solutions[0]
    for _, other, _ in solutions[1:]:
        if not np.allclose(other.x, fit.x, rtol=1e-6, atol=1e-6 * fit.x[1]):
            raise DegenerateInputError(
                f"{len(solutions)} different transition assignments fit the observed lines;"
                " supply transition labels"
            )
    _check_rank(_line_jacobian(lines, labels, fit.x, base))
    ez, Ab, dA, J = (float(v) for v in fit.x)
    return ExtractionResult(
        zeeman=ez,
        A_bar=Ab,
        dA=dA,
        J=J,
        residual_norm=rn,
        residuals=tuple(float(r) for r in fit.fun),
        labels=labels,
    )


def synthetic_lines(params: SystemParams, selection) -> list[ObservedLine]:
    """Full-model line positions for ``(config, label)`` pairs, labelled."""
    ml = model_lines(params, "full")
    return [ObservedLine(float(ml[c][lab]), c, lab) for c, lab in selection]
