"""Command-line front end: ``donorpair <subcommand> [options]``.

Every subcommand computes its dataset first and writes files afterwards.
CSV files start with ``#`` comment lines recording the tool version and the
resolved parameters; JSON files carry the same record under ``"_header"``.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O failure,
4 degenerate input.
"""

from __future__ import annotations

import argparse
import io
import json
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .esr import (
    DegenerateInputError,
    ExtractionError,
    ObservedLine,
    extract_parameters,
    fingerprint_sweep,
    readout_filter,
)
from .gates import (
    MATERIAL_SIGMA,
    crot_sequence,
    crot_unitary,
    dephasing_error_estimate,
    exchange_trace,
    fidelity_grid,
    log_axis,
    phase_decomposition,
    population_map,
    rabi_amplitude,
    simulated_swap_amplitude,
    unitarity_residual,
    x2_unitary,
)
from .pulses import IntegrationError, PulseShape, PulseSpec, QuadratureError, excitation_profile, pi_pulse_amplitude
from .spin import NotHermitianError, NuclearConfig, SystemParams, delta_bz, dressed_basis, load_params

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO, EXIT_DEGENERATE = 0, 1, 2, 3, 4

# T_CROT values inserted into the grid axis when inside the requested range
T_ANCHORS = (80e-9, 400e-9)
BASIS_LABELS = ("uu", "ud", "du", "dd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def fmt(x) -> str:
    """Twelve significant digits in scientific notation."""
    return f"{float(x):.11e}"


def _header(args, params: SystemParams, extra: dict | None = None) -> dict:
    h = {
        "tool": "donorpair",
        "version": __version__,
        "subcommand": args.command,
        "params": params.to_dict(),
        "seed": args.seed,
    }
    if extra:
        h.update(extra)
    return h


def _csv_text(header: dict, columns, rows) -> str:
    buf = io.StringIO()
    for key, value in header.items():
        buf.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def _json_text(header: dict, body: dict) -> str:
    return json.dumps({"_header": header, **body}, indent=2, sort_keys=True) + "\n"


def _plan(out: Path, names, force: bool) -> list[Path]:
    paths = [out / n for n in names]
    if not force:
        existing = [str(p) for p in paths if p.exists()]
        if existing:
            raise FileExistsError(f"refusing to overwrite {', '.join(existing)} (use --force)")
    return paths


def _write(files: dict[Path, str], force: bool):
    for path, text in files.items():
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w" if force else "x", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        print(path)


def _axis(lo: float, hi: float, n: int, name: str) -> np.ndarray:
    if not (lo > 0 and hi > lo):
        raise UsageError(f"--{name}-min/--{name}-max must satisfy 0 < min < max")
    if n < 2:
        raise UsageError(f"--{name}-points must be at least 2")
    return log_axis(lo, hi, n)


# --- subcommands -----------------------------------------------------------------


def cmd_swap_sweep(args, params: SystemParams) -> dict[str, str]:
    ratios = _axis(args.j_min, args.j_max, args.j_points, "j")
    cols = ("j_over_dbz", "amplitude_formula", "amplitude_sim", "amplitude_full")
    files = {}
    for name, cfg in (("parallel", NuclearConfig.UpUp), ("antiparallel", NuclearConfig.DownUp)):
        dbz = delta_bz(params, cfg)
        if dbz == 0:
            raise UsageError(f"delta Bz vanishes for the {name} configuration; J/dBz is undefined")
        rows = []
        for r in ratios:
            p = params.replace(J=float(r * dbz))
            rows.append(
                (
                    fmt(r),
                    fmt(rabi_amplitude(p.J, dbz)),
                    fmt(simulated_swap_amplitude(p, cfg, "reduced")),
                    fmt(simulated_swap_amplitude(p, cfg, "full")),
                )
            )
        hdr = _header(args, params, {"configuration": cfg.name, "delta_bz_hz": dbz})
        files[f"swap_{name}.csv"] = _csv_text(hdr, cols, rows)

    cfg = NuclearConfig.DownUp
    dbz = delta_bz(params, cfg)
    for name, ratio in (("on", 10.0), ("off", 0.1)):
        p = params.replace(J=ratio * dbz)
        period = 1.0 / math.hypot(p.J, dbz)
        t = np.linspace(0.0, 3 * period, 601)
        s1, s2 = exchange_trace(p, cfg, np.array([0, 0, 1, 0], dtype=complex), t)
        hdr = _header(args, params, {"configuration": cfg.name, "j_over_dbz": ratio, "initial_state": "du"})
        files[f"swap_trace_{name}.csv"] = _csv_text(hdr, ("t_s", "s1z", "s2z"), [(fmt(a), fmt(b), fmt(c)) for a, b, c in zip(t, s1, s2)])
    return files


def _t_axis(args) -> np.ndarray:
    T = _axis(args.t_min, args.t_max, args.t_points, "t")
    extra = [t for t in T_ANCHORS if args.t_min <= t <= args.t_max]
    return np.union1d(T, extra)


def cmd_crot_grid(args, params: SystemParams) -> dict[str, str]:
    J = _axis(args.j_min, args.j_max, args.j_points, "j")
    T = _t_axis(args)
    sigma = MATERIAL_SIGMA[args.material]
    grid = fidelity_grid(params, J, T, sigma, args.material, workers=args.workers)
    rows = [(fmt(j), fmt(t), fmt(grid.F[i, k])) for i, j in enumerate(J) for k, t in enumerate(T)]
    hdr = _header(args, params, {"material": args.material, "sigma_hz": sigma, "j_points": len(J), "t_points": len(T)})
    summary = grid.summary()
    summary["t_anchor_peak"] = {fmt(t): float(grid.F[:, int(np.argmin(np.abs(T - t)))].max()) for t in T_ANCHORS if T[0] <= t <= T[-1]}
    bound = np.array([1 - math.sin(dressed_basis(params.replace(J=float(j))).theta) ** 2 for j in J])
    summary["inherent_bound_margin"] = float(np.min(bound[:, None] - grid.F))
    return {
        f"crot_grid_{args.material}.csv": _csv_text(hdr, ("j_hz", "t_crot_s", "fidelity"), rows),
        f"crot_summary_{args.material}.json": _json_text(hdr, summary),
    }


def _phases(U) -> dict:
    d = phase_decomposition(U)
    return {
        "theta_1": d.theta_1,
        "theta_2": d.theta_2,
        "theta_12": d.theta_12,
        "theta_g": d.theta_g,
        "basis_phases": dict(zip(BASIS_LABELS, d.basis_phases)),
    }


def _is_conditional_flip(pm: np.ndarray, tol: float = 1e-9) -> bool:
    target = np.zeros((4, 4))
    target[0, 0] = target[1, 1] = target[2, 3] = target[3, 2] = 1
    return bool(np.max(np.abs(pm - target)) <= tol)


def _random_params(rng: np.random.Generator, base: SystemParams) -> SystemParams:
    Ab = rng.uniform(50e6, 150e6)
    dA = Ab * rng.uniform(0.005, 0.1)
    J = Ab * 10 ** rng.uniform(-3, 0)
    return base.replace(A1=Ab - dA, A2=Ab + dA, J=J)


def cmd_sequence_report(args, params: SystemParams) -> dict[str, str]:
    if not (args.t_sqrt > 0 and args.t_flip > 0 and args.t_crot > 0):
        raise UsageError("pulse durations must be positive")
    U3 = crot_sequence(params, args.t_sqrt, args.t_flip)
    X2 = x2_unitary(params, args.t_flip)
    pm = population_map(U3)
    rng = np.random.default_rng(args.seed)
    worst = {"theta_12_u3": 0.0, "theta_12_x2": 0.0, "unitarity_residual": 0.0}
    flips = True
    for _ in range(args.draws):
        p = _random_params(rng, params)
        u = crot_sequence(p, args.t_sqrt, args.t_flip)
        worst["theta_12_u3"] = max(worst["theta_12_u3"], abs(phase_decomposition(u).theta_12))
        worst["theta_12_x2"] = max(worst["theta_12_x2"], abs(phase_decomposition(x2_unitary(p, args.t_flip)).theta_12))
        worst["unitarity_residual"] = max(worst["unitarity_residual"], unitarity_residual(u))
        flips = flips and _is_conditional_flip(population_map(u))
    body = {
        "basis": ["uu", "~ud", "~du", "dd"],
        "u3": {
            "phases": _phases(U3),
            "unitarity_residual": unitarity_residual(U3),
            "population_map": pm.tolist(),
            "conditional_flip": _is_conditional_flip(pm),
        },
        "x2": {"phases": _phases(X2), "unitarity_residual": unitarity_residual(X2)},
        "u_crot": {"phases": _phases(crot_unitary(params, math.pi / 2, args.t_crot))},
        "dephasing": {
            "t_crot_s": args.t_crot,
            "t2_s": args.t2,
            "estimate": dephasing_error_estimate(args.t_crot, args.t2),
        },
        "randomized": {"draws": args.draws, "worst": worst, "all_conditional_flips": flips},
    }
    hdr = _header(args, params, {"t_sqrt_s": args.t_sqrt, "t_flip_s": args.t_flip})
    return {"sequence_report.json": _json_text(hdr, body)}


def _fingerprint_rows(ds, lines_of):
    rows = []
    for x, slc in zip(ds.j_over_abar, ds.lines):
        for ln in lines_of(slc):
            rows.append(
                (
                    fmt(x),
                    fmt(ln.frequency),
                    fmt(ln.weight),
                    fmt(ln.contrast1),
                    fmt(ln.contrast2),
                    "" if ln.branch is None else str(ln.branch),
                    str(int(ln.flagged)),
                )
            )
    return rows


def cmd_fingerprint(args, params: SystemParams) -> dict[str, str]:
    x = _axis(args.j_min, args.j_max, args.j_points, "j")
    ds = fingerprint_sweep(params, x, workers=args.workers)
    cols = ("j_over_abar", "frequency_hz", "weight", "contrast1", "contrast2", "branch", "flagged")
    hdr = _header(args, params, {"threshold": ds.threshold})
    full = _fingerprint_rows(ds, lambda s: s)
    donor2 = _fingerprint_rows(ds, lambda s: readout_filter(s, "donor2_only"))
    return {
        "fingerprint.csv": _csv_text({**hdr, "readout": "full"}, cols, full),
        "fingerprint_donor2.csv": _csv_text({**hdr, "readout": "donor2_only"}, cols, donor2),
    }


def _read_lines(path: Path) -> list[ObservedLine]:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(data, list):
        raise UsageError(f"{path}: expected a JSON list of lines")
    out = []
    for k, item in enumerate(data):
        if not isinstance(item, dict) or "frequency_hz" not in item or "nuclear_config" not in item:
            raise UsageError(f"{path}: entry {k} needs frequency_hz and nuclear_config")
        unknown = set(item) - {"frequency_hz", "nuclear_config", "transition"}
        if unknown:
            raise UsageError(f"{path}: entry {k} has unknown keys {sorted(unknown)}")
        f = item["frequency_hz"]
        if isinstance(f, bool) or not isinstance(f, (int, float)):
            raise UsageError(f"{path}: entry {k} frequency_hz must be a number")
        try:
            out.append(ObservedLine(float(f), NuclearConfig.parse(str(item["nuclear_config"])), item.get("transition")))
        except ValueError as exc:
            raise UsageError(f"{path}: entry {k}: {exc}") from exc
    return out


def cmd_extract(args, params: SystemParams) -> dict[str, str]:
    if args.lines is None:
        raise UsageError("extract requires --lines <file>")
    observed = _read_lines(Path(args.lines))
    res = extract_parameters(observed, base=params)
    fitted = res.as_params(gamma_e=params.gamma_e, gamma_n=params.gamma_n)
    body = {
        "zeeman_hz": res.zeeman,
        "a_bar_hz": res.A_bar,
        "delta_a_hz": res.dA,
        "j_hz": res.J,
        "residual_norm_hz": res.residual_norm,
        "residuals_hz": list(res.residuals),
        "transitions": list(res.labels),
        "fitted_params": fitted.to_dict(),
    }
    hdr = _header(args, params, {"lines_file": str(args.lines)})
    return {"extract.json": _json_text(hdr, body)}


def cmd_profile(args, params: SystemParams) -> dict[str, str]:
    shape = PulseShape[args.shape.upper()]
    T = args.duration
    if not T > 0:
        raise UsageError("--duration must be positive")
    b1 = pi_pulse_amplitude(shape, T, 0.5, params.gamma_e)
    pulse = PulseSpec(shape, b1, T)
    det = np.linspace(-args.span / T, args.span / T, args.points)
    prob = excitation_profile(pulse, det, 0.5, params.gamma_e)
    hdr = _header(args, params, {"shape": shape.name.lower(), "duration_s": T, "b1_max_t": b1})
    return {f"profile_{shape.name.lower()}.csv": _csv_text(hdr, ("detuning_hz", "probability"), [(fmt(d), fmt(p)) for d, p in zip(det, prob)])}


# --- argument parsing --------------------------------------------------------------

_OUTPUTS = {
    "swap-sweep": lambda a: ["swap_parallel.csv", "swap_antiparallel.csv", "swap_trace_on.csv", "swap_trace_off.csv"],
    "crot-grid": lambda a: [f"crot_grid_{a.material}.csv", f"crot_summary_{a.material}.json"],
    "sequence-report": lambda a: ["sequence_report.json"],
    "fingerprint": lambda a: ["fingerprint.csv", "fingerprint_donor2.csv"],
    "extract": lambda a: ["extract.json"],
    "profile": lambda a: [f"profile_{a.shape}.csv"],
}

_COMMANDS = {
    "swap-sweep": cmd_swap_sweep,
    "crot-grid": cmd_crot_grid,
    "sequence-report": cmd_sequence_report,
    "fingerprint": cmd_fingerprint,
    "extract": cmd_extract,
    "profile": cmd_profile,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--params", help="JSON parameter file (missing keys take defaults)")
    common.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    common.add_argument("--seed", type=int, default=0, help="seed for randomized checks")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="worker processes")
    common.add_argument("--force", action="store_true", help="overwrite existing output files")

    def j_range(p, lo, hi, n, unit):
        p.add_argument("--j-min", type=float, default=lo, help=f"smallest J ({unit})")
        p.add_argument("--j-max", type=float, default=hi, help=f"largest J ({unit})")
        p.add_argument("--j-points", type=int, default=n)

    parser = _Parser(prog="donorpair", description="Exchange-coupled donor qubit simulations.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("swap-sweep", parents=[common], help="SWAP amplitude versus J/dBz")
    j_range(p, 1e-2, 1e2, 100, "units of dBz")

    p = sub.add_parser("crot-grid", parents=[common], help="worst-case CROT fidelity grid")
    p.add_argument("--material", choices=sorted(MATERIAL_SIGMA), default="iso")
    j_range(p, 1e3, 1e9, 60, "Hz")
    p.add_argument("--t-min", type=float, default=1e-8, help="shortest T_CROT (s)")
    p.add_argument("--t-max", type=float, default=1e-4, help="longest T_CROT (s)")
    p.add_argument("--t-points", type=int, default=60)

    p = sub.add_parser("sequence-report", parents=[common], help="phases of the refocused CROT sequence")
    p.add_argument("--t-sqrt", type=float, default=100e-9, help="duration of each sqrt-CROT pulse (s)")
    p.add_argument("--t-flip", type=float, default=100e-9, help="duration of each X2 flip (s)")
    p.add_argument("--t-crot", type=float, default=1e-6, help="gate time for the dephasing estimate (s)")
    p.add_argument("--t2", type=float, default=0.1, help="coherence time T2 (s)")
    p.add_argument("--draws", type=int, default=100, help="randomized parameter draws")

    p = sub.add_parser("fingerprint", parents=[common], help="ESR fingerprint versus J/A_bar")
    j_range(p, 1e-2, 1e2, 201, "units of A_bar")

    p = sub.add_parser("extract", parents=[common], help="fit parameters to observed ESR lines")
    p.add_argument("--lines", help="JSON list of {frequency_hz, nuclear_config[, transition]}")

    p = sub.add_parser("profile", parents=[common], help="excitation profile of a calibrated pi pulse")
    p.add_argument("--shape", choices=("gaussian", "square"), default="gaussian")
    p.add_argument("--duration", type=float, default=100e-9, help="pulse duration (s)")
    p.add_argument("--span", type=float, default=10.0, help="half-width of the detuning range in units of 1/duration")
    p.add_argument("--points", type=int, default=401)
    return parser


def _load(args) -> SystemParams:
    if args.params is None:
        return SystemParams()
    try:
        return load_params(args.params)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.params}: malformed JSON ({exc})") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{args.params}: {exc}") from exc


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.workers < 1:
            raise UsageError("--workers must be at least 1")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            params = _load(args)
        out = Path(args.out)
        paths = _plan(out, _OUTPUTS[args.command](args), args.force)
        texts = _COMMANDS[args.command](args, params)
        _write({out / name: texts[name] for name in (p.name for p in paths)}, args.force)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DegenerateInputError as exc:
        print(f"degenerate input: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (IntegrationError, QuadratureError, ExtractionError, NotHermitianError, ArithmeticError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        where = f" ({exc.filename})" if getattr(exc, "filename", None) else ""
        print(f"I/O failure{where}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK
