"""``pfode`` command line: sample, bound, validate, sweep.

Every option can also come from a JSON config file (``--config``); flags given
on the command line win. Unknown config keys are rejected. Each run writes a
``manifest.json`` echoing the resolved configuration next to its outputs.

Exit codes: 0 success, 1 validation failure, 2 configuration error,
3 numerical failure, 4 step size outside the bound's hypotheses.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import BoundEngine, BoundInputs, min_K_for_accuracy, select_T
from .errors import ConfigError, DomainError, NumericError
from .sampler import SamplerConfig, propagate_affine, run_sampler
from .schedules import FAMILY_NAMES, from_config
from .targets import ScoreOracle, target_from_config, time_lipschitz_L1
from .validation import CorruptedPhi, run_suite

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_NUMERIC, EXIT_GATE = 0, 1, 2, 3, 4

# parameters used when a family is named without some of its parameters
FAMILY_DEFAULTS = {
    "ve_exp": {"a": 1.0, "b": 1.0},
    "ve_poly": {"a": 1.0, "b": 1.0, "c": 1.0},
    "vp_const": {"b": 2.0},
    "vp_linear": {"a": 1.0, "b": 0.1},
    "vp_poly": {"a": 1.0, "b": 0.1, "rho": 2.0},
}


class UsageError(Exception):
    """Raised by the parser instead of exiting, so main() owns exit codes."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _names(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _add_common(p):
    p.add_argument("--config", help="JSON file with option values (flags override it)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)


def _add_schedule(p):
    p.add_argument("--family", choices=FAMILY_NAMES)
    for name in ("a", "b", "c", "rho"):
        p.add_argument(f"--{name}", type=float)


def _add_target(p):
    p.add_argument("--target", choices=("gauss", "convolved1d"))
    p.add_argument("--d", type=int)
    p.add_argument("--mean", type=_floats, help="mean vector (one value is broadcast)")
    p.add_argument("--variance", type=float, help="isotropic covariance scale")
    p.add_argument("--potential", help="Convolved1D potential name")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pfode", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"pfode {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("sample", help="run the exponential-integrator sampler")
    _add_common(p)
    _add_schedule(p)
    _add_target(p)
    p.add_argument("--T", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--n", type=int, help="number of trajectories")
    p.add_argument("--method", choices=("exponential", "euler"))
    p.add_argument("--mode", choices=("mc", "affine"))
    p.add_argument("--M", type=float, help="score perturbation size")
    p.add_argument("--policy", choices=("fixed", "rotating"))

    p = sub.add_parser("bound", help="evaluate the W2 bound for one configuration")
    _add_common(p)
    _add_schedule(p)
    _add_target(p)
    p.add_argument("--T", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--M", type=float)
    p.add_argument("--L1", type=float, help="time-Lipschitz constant (default: analytic or estimated)")
    p.add_argument("--allow-ungated", action="store_true", default=None)
    p.add_argument("--per-step", action="store_true", default=None, help="include per-step arrays in the report")

    p = sub.add_parser("validate", help="run the invariant suite")
    _add_common(p)
    _add_schedule(p)
    _add_target(p)
    p.add_argument("--T", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--M", type=float)
    p.add_argument("--policy", choices=("fixed", "rotating"))
    p.add_argument("--corrupt-phi", type=float, help=argparse.SUPPRESS)

    p = sub.add_parser("sweep", help="minimal K over (family, d, eps) grids")
    _add_common(p)
    p.add_argument("--families", type=_names)
    for name in ("a", "b", "c", "rho"):
        p.add_argument(f"--{name}", type=float, help=f"override {name} for every family that has it")
    p.add_argument("--eps", type=_floats)
    p.add_argument("--d", type=_ints)
    p.add_argument("--variance", type=float, help="isotropic target covariance scale")
    p.add_argument("--mean", type=float, help="target mean (every coordinate)")
    p.add_argument("--K-max", dest="K_max", type=int)
    return parser


DEFAULTS = {
    "sample": {
        "family": "vp_const", "target": "gauss", "d": 2, "n": 1000,
        "method": "exponential", "mode": "mc", "M": 0.0, "policy": "fixed", "seed": 0, "out": "pfode-sample",
    },
    "bound": {
        "family": "vp_const", "target": "gauss", "d": 2, "M": 0.0,
        "allow_ungated": False, "per_step": False, "seed": 0, "out": "pfode-bound",
    },
    "validate": {
        "family": "vp_const", "target": "gauss", "d": 2, "T": 6.0, "K": 600, "M": 0.0,
        "policy": "fixed", "seed": 0, "out": "pfode-validate",
    },
    "sweep": {
        "families": ["vp_const"], "eps": [0.2, 0.1, 0.05, 0.02, 0.01], "d": [4], "variance": 1.0, "mean": 0.0,
        "K_max": 10**8, "seed": 0, "out": "pfode-sweep",
    },
}

REQUIRED = {"sample": ("T", "K"), "bound": ("T", "K"), "validate": ("T", "K"), "sweep": ("eps",)}


def resolve_config(command: str, args: argparse.Namespace, parser) -> dict:
    """Merge defaults < config file < flags; reject keys the command does not know."""
    sub = parser._subparsers._group_actions[0].choices[command]
    known = {a.dest for a in sub._actions if a.dest not in ("help", "config")} | {"covariance"}
    resolved = dict(DEFAULTS[command])
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(file_cfg) - known)
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {unknown}")
        resolved.update(file_cfg)
    for key, value in vars(args).items():
        if key in known and value is not None:
            resolved[key] = value
    if "covariance" in resolved and command == "sweep":
        raise ConfigError("sweep targets are isotropic; 'covariance' is not accepted")
    missing = [k for k in REQUIRED[command] if resolved.get(k) is None]
    if missing:
        sub.print_usage(sys.stderr)
        raise ConfigError(f"missing required option(s): {', '.join('--' + k for k in missing)}")
    return resolved


def _schedule_from(cfg: dict, strict: bool = True):
    """Schedule from flat options, filling unset parameters from FAMILY_DEFAULTS.

    With ``strict`` a parameter the family does not take is an error; sweeps
    pass ``strict=False`` so one --b can apply to several families.
    """
    family = cfg.get("family")
    if family not in FAMILY_DEFAULTS:
        raise ConfigError(f"unknown schedule family {family!r}; expected one of {FAMILY_NAMES}")
    defaults = FAMILY_DEFAULTS[family]
    given = {k: cfg[k] for k in ("a", "b", "c", "rho") if cfg.get(k) is not None}
    extra = sorted(set(given) - set(defaults))
    if extra and strict:
        raise ConfigError(f"family {family} takes no parameter(s) {extra}")
    params = {**defaults, **{k: v for k, v in given.items() if k in defaults}}
    return from_config({"family": family, **params})


def _target_from(cfg: dict):
    kind = cfg.get("target", "gauss")
    if kind == "convolved1d":
        return target_from_config({"kind": "convolved1d", "potential": cfg.get("potential") or "quadratic_logcosh"})
    if kind != "gauss":
        raise ConfigError(f"unknown target {kind!r}")
    spec = {"kind": "gaussian"}
    if cfg.get("covariance") is not None:
        spec["covariance"] = cfg["covariance"]
        if cfg.get("mean") is not None:
            spec["mean"] = cfg["mean"]
        return target_from_config(spec)
    d = int(cfg.get("d") or 1)
    mean = cfg.get("mean")
    spec.update(d=d, isotropic=float(cfg.get("variance") if cfg.get("variance") is not None else 1.0))
    if mean is not None:
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        if mean.size not in (1, d):
            raise ConfigError(f"mean has {mean.size} entries, expected 1 or d={d}")
        spec["mean"] = mean.tolist()
    return target_from_config(spec)


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _manifest(out: Path, command: str, cfg: dict, outputs: list[str], result: dict) -> None:
    write_json(
        out / "manifest.json",
        {"command": command, "config": cfg, "seed": cfg.get("seed"), "version": __version__, "outputs": outputs, "result": result},
    )


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sampler_config(cfg, n=1):
    return SamplerConfig(T=float(cfg["T"]), K=int(cfg["K"]), seed=int(cfg["seed"]), n_samples=int(n))


def cmd_sample(cfg: dict) -> int:
    sched, target = _schedule_from(cfg), _target_from(cfg)
    mode = cfg["mode"]
    if mode == "affine":
        run = propagate_affine(sched, target, _sampler_config(cfg), M=float(cfg["M"]), policy=cfg["policy"], keep=())
        out = _outdir(cfg)
        terminal = run.terminal.to_dict()
        write_json(out / "terminal_law.json", terminal)
        _manifest(out, "sample", cfg, ["terminal_law.json"], {"mode": "affine", "terminal": terminal})
        print(f"terminal mean {np.array2string(run.terminal.mean, precision=6)}")
        return EXIT_OK
    if int(cfg["n"]) < 1:
        raise ConfigError(f"n must be at least 1, got {cfg['n']}")
    oracle = ScoreOracle(target, sched, float(cfg["M"]), policy=cfg["policy"])
    run = run_sampler(sched, oracle, _sampler_config(cfg, cfg["n"]), method=cfg["method"])
    out = _outdir(cfg)
    run.write_samples_csv(out / "samples.csv")
    x = run.terminal
    summary = {"n": int(x.shape[0]), "d": int(x.shape[1]), "mean": x.mean(axis=0).tolist()}
    _manifest(out, "sample", cfg, ["samples.csv"], summary)
    print(f"wrote {x.shape[0]} samples of dimension {x.shape[1]} to {out / 'samples.csv'}")
    return EXIT_OK


def _bound_inputs(cfg, sched, target):
    T, K, M = float(cfg["T"]), int(cfg["K"]), float(cfg["M"])
    L1 = cfg.get("L1")
    if L1 is None and not target.is_gaussian:
        L1 = time_lipschitz_L1(target, sched, T, T / K, K, seed=int(cfg["seed"]))
    return BoundInputs.from_target(target, sched, T=T, K=K, M=M, L1=L1)


def cmd_bound(cfg: dict) -> int:
    sched, target = _schedule_from(cfg), _target_from(cfg)
    inputs = _bound_inputs(cfg, sched, target)
    report = BoundEngine(inputs).evaluate(inputs.K, store_per_step=bool(cfg["per_step"]))
    out = _outdir(cfg)
    data = report.to_dict()
    write_json(out / "bound.json", data)
    _manifest(out, "bound", cfg, ["bound.json"], {k: data[k] for k in ("total", "init_error", "E1", "E2", "gate_passed")})
    for key in ("total", "init_error", "E1", "E2", "eta_bar"):
        print(f"{key:<12}{data[key]:.12g}")
    print(f"{'gate_passed':<12}{str(report.gate_passed).lower()}")
    if not report.gate_passed and not cfg["allow_ungated"]:
        print("outside theorem hypotheses: eta > eta_bar (use --allow-ungated to accept)", file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


def cmd_validate(cfg: dict) -> int:
    sched, target = _schedule_from(cfg), _target_from(cfg)
    if cfg.get("corrupt_phi") is not None:
        sched = CorruptedPhi(sched, float(cfg["corrupt_phi"]))
    results = run_suite(sched, target, float(cfg["T"]), int(cfg["K"]), M=float(cfg["M"]), policy=cfg["policy"])
    out = _outdir(cfg)
    rows = [r.to_dict() for r in results]
    write_json(out / "validation.json", rows)
    failed = [r.name for r in results if r.passed is False]
    _manifest(out, "validate", cfg, ["validation.json"], {"failed": failed})
    width = max(len(r.name) for r in results)
    for r in results:
        value = "" if r.value is None else f"{r.value:.6g}"
        print(f"{r.status:<5} {r.name:<{width}}  {value}")
    return EXIT_VALIDATION if failed else EXIT_OK


def fit_slope(eps, K) -> float | None:
    """Least-squares slope of log K against log(1/eps); None with fewer than two points."""
    pts = [(e, k) for e, k in zip(eps, K) if k is not None]
    if len(pts) < 2:
        return None
    x = np.log([1.0 / e for e, _ in pts])
    y = np.log([float(k) for _, k in pts])
    return float(np.polyfit(x, y, 1)[0])


def worker_count(n_tasks: int) -> int:
    cap = os.environ.get("PFODE_THREADS")
    limit = os.cpu_count() or 1
    if cap:
        try:
            limit = max(1, int(cap))
        except ValueError as exc:
            raise ConfigError(f"PFODE_THREADS must be an integer, got {cap!r}") from exc
    return max(1, min(limit, n_tasks))


def run_sweep(schedules: dict, eps_grid, d_grid, variance=1.0, mean=0.0, K_max=10**8, seed=0) -> list[dict]:
    """K* for every (family, d, eps); rows come back in grid order."""
    from .targets import GaussianTarget

    points = [(name, d, e) for name in schedules for d in d_grid for e in eps_grid]

    def solve(index):
        name, d, e = points[index]
        target = GaussianTarget.isotropic(d, variance, np.full(d, mean))
        base = BoundInputs.from_target(target, schedules[name])
        res = min_K_for_accuracy(base, e, K_max=K_max, T=select_T(base, e))
        rep = res.report
        return {
            "family": name, "params": json.dumps(schedules[name].params, sort_keys=True), "d": d, "eps": e,
            "T": res.T, "K_star": res.K, "eta": res.eta, "eta_bar": rep.eta_bar, "init_error": rep.init_error,
            "E1": rep.E1, "E2": rep.E2, "total": rep.total, "reachable": res.reachable,
            "evaluations": res.evaluations, "seed": seed ^ index,
        }

    with ThreadPoolExecutor(max_workers=worker_count(len(points))) as pool:
        return list(pool.map(solve, range(len(points))))


SWEEP_COLUMNS = (
    "family", "params", "d", "eps", "T", "K_star", "eta", "eta_bar", "init_error", "E1", "E2", "total",
    "reachable", "evaluations", "seed",
)
_FLOAT_COLUMNS = ("eps", "T", "eta", "eta_bar", "init_error", "E1", "E2", "total")
_INT_COLUMNS = ("d", "K_star", "evaluations", "seed")


def write_sweep_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(float(r[c])) if c in _FLOAT_COLUMNS else r[c]) for c in SWEEP_COLUMNS])


def read_sweep_csv(path: Path) -> list[dict]:
    """Inverse of :func:`write_sweep_csv` (floats round-trip exactly via repr)."""
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = dict(raw)
            for c in _FLOAT_COLUMNS:
                row[c] = float(raw[c]) if raw[c] else None
            for c in _INT_COLUMNS:
                row[c] = int(raw[c]) if raw[c] else None
            row["reachable"] = raw["reachable"] == "True"
            rows.append(row)
    return rows


def sweep_svg(rows, slopes: dict) -> str:
    """Log-log line chart of K* against 1/eps, one polyline per (family, d)."""
    series = {}
    for r in rows:
        if r["K_star"] is not None:
            series.setdefault((r["family"], r["d"]), []).append((math.log10(1 / r["eps"]), math.log10(r["K_star"])))
    W, H, pad = 640, 420, 60
    xs = [p[0] for pts in series.values() for p in pts] or [0.0, 1.0]
    ys = [p[1] for pts in series.values() for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1
    y0, y1 = min(ys), max(ys) if max(ys) > min(ys) else min(ys) + 1

    def px(x, y):
        return pad + (x - x0) / (x1 - x0) * (W - 2 * pad), H - pad - (y - y0) / (y1 - y0) * (H - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle">log10(1/eps)</text>',
        f'<text x="15" y="{H / 2}" transform="rotate(-90 15 {H / 2})" text-anchor="middle">log10(K*)</text>',
    ]
    for x, y in ((x0, y0), (x1, y0)):
        X, Y = px(x, y)
        parts.append(f'<text x="{X:.1f}" y="{Y + 16:.1f}" text-anchor="middle">{x:.2f}</text>')
    for y in (y0, y1):
        X, Y = px(x0, y)
        parts.append(f'<text x="{X - 6:.1f}" y="{Y + 4:.1f}" text-anchor="end">{y:.2f}</text>')
    for i, ((family, d), pts) in enumerate(sorted(series.items())):
        color = colors[i % len(colors)]
        coords = " ".join(f"{X:.1f},{Y:.1f}" for X, Y in (px(x, y) for x, y in sorted(pts)))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        slope = slopes.get(f"{family}/d={d}")
        label = f"{family} d={d}" + ("" if slope is None else f" slope {slope:.3f}")
        parts.append(f'<text x="{pad + 10}" y="{pad + 16 * i}" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_sweep(cfg: dict) -> int:
    eps_grid = list(cfg["eps"] or [])
    if not eps_grid:
        raise ConfigError("empty eps grid")
    if any(not e > 0 for e in eps_grid):
        raise ConfigError("eps values must be positive")
    d_grid = list(cfg["d"] or [])
    if not d_grid or any(d < 1 for d in d_grid):
        raise ConfigError("d grid must be nonempty with d >= 1")
    families = list(cfg["families"] or [])
    if not families:
        raise ConfigError("no families to sweep")
    schedules = {}
    for name in families:
        if name not in FAMILY_DEFAULTS:
            raise ConfigError(f"unknown family {name!r}; expected one of {FAMILY_NAMES}")
        schedules[name] = _schedule_from({"family": name, **{k: cfg.get(k) for k in ("a", "b", "c", "rho")}}, strict=False)
    rows = run_sweep(
        schedules, eps_grid, d_grid, float(cfg["variance"]), float(cfg["mean"]), int(cfg["K_max"]), int(cfg["seed"])
    )
    out = _outdir(cfg)
    write_sweep_csv(out / "sweep.csv", rows)
    slopes = {}
    for name in families:
        for d in d_grid:
            sel = [r for r in rows if r["family"] == name and r["d"] == d]
            slopes[f"{name}/d={d}"] = fit_slope([r["eps"] for r in sel], [r["K_star"] for r in sel])
    outputs = ["sweep.csv", "sweep.svg"]
    (out / "sweep.svg").write_text(sweep_svg(rows, slopes))
    if len(families) > 1:
        with open(out / "comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["d", "eps", *(f"K_star_{n}" for n in families)])
            for d in d_grid:
                for e in eps_grid:
                    ks = [next(r["K_star"] for r in rows if r["family"] == n and r["d"] == d and r["eps"] == e) for n in families]
                    w.writerow([d, repr(e), *("" if k is None else k for k in ks)])
        outputs.append("comparison.csv")
    unreachable = sum(1 for r in rows if not r["reachable"])
    _manifest(out, "sweep", cfg, outputs, {"slopes": slopes, "unreachable_points": unreachable})
    for key, slope in slopes.items():
        print(f"{key:<20} slope {'n/a' if slope is None else f'{slope:.4f}'}")
    for r in rows:
        print(f"  {r['family']:<10} d={r['d']:<3} eps={r['eps']:<6g} K*={r['K_star']}")
    return EXIT_OK


COMMANDS = {"sample": cmd_sample, "bound": cmd_bound, "validate": cmd_validate, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = resolve_config(args.command, args, parser)
        return COMMANDS[args.command](cfg)
    except (ConfigError, DomainError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
