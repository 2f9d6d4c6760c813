"""Command-line interface: data ingestion, configuration and result files.

Subcommands::

    dfr fit      --config c.json --obs obs.csv --cov cov.csv --out DIR
    dfr simulate --scenario s.json --out DIR
    dfr eval     --sweep sweep.json --out DIR [--threads N]
    dfr predict  --params params.json --cov cov.csv [--obs partial.csv] --out DIR

Exit codes: 0 success, 2 invalid input or configuration, 3 file system
errors, 4 numerical failure. The ``DFR_LOG`` environment variable sets the
log level (e.g. ``DEBUG``, ``INFO``; default ``WARNING``).
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from dfr import __version__
from dfr.basis import BasisSystem
from dfr.errors import ValidationError
from dfr.fit import FitConfig, FitResult, fit, predict_conditional, predict_mean
from dfr.model import ModelParams, ObservedDataset
from dfr.mstep import standardize
from dfr.rng import REPLICATE_FIT, derived_seed
from dfr.simulate import TABLE_PARAMS, SimScenario, generate_dataset, mse_eval

log = logging.getLogger("dfr")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

OBS_COLUMNS = ("subject_id", "time", "y")
FLOAT_FMT = "{:.17g}"

FIT_KEYS = {
    "seed", "basis", "penalty_order", "K", "max_iter", "tol", "window", "delta_grid",
    "burn_in", "thin", "max_tries", "grid_size", "rescale", "time_range",
}
BASIS_KEYS = {"kind", "J", "degree", "knots"}
SCENARIO_KEYS = set(SimScenario.__dataclass_fields__)


# ---------------------------------------------------------------------------
# atomic output


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, (str, np.str_)):
        return str(v)
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return FLOAT_FMT.format(float(v))


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    _atomic_write(path, _csv_text(header, rows))


def write_json(path: Path, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    return obj


# ---------------------------------------------------------------------------
# ingestion


def _read_rows(path) -> Tuple[List[str], List[Tuple[int, List[str]]]]:
    """Header and (line number, fields) of a CSV file; blank lines are skipped."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: file is empty") from None
        rows = [(reader.line_num, [f.strip() for f in r]) for r in reader if any(f.strip() for f in r)]
    return header, rows


def _parse_float(text: str, path, line: int, col: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ValidationError(f"{path}:{line}: column {col!r} is not a number: {text!r}") from None
    if not np.isfinite(v):
        raise ValidationError(f"{path}:{line}: column {col!r} is not finite")
    return v


def read_covariates(cov_path) -> Tuple[List[str], List[str], np.ndarray]:
    """Subject ids, covariate names and the covariate matrix (no intercept)."""
    header, rows = _read_rows(cov_path)
    if not header or header[0] != "subject_id":
        raise ValidationError(f"{cov_path}:1: first column must be 'subject_id', got {header[:1]}")
    names = header[1:]
    ids, values, seen = [], [], set()
    for line, r in rows:
        if len(r) != len(header):
            raise ValidationError(f"{cov_path}:{line}: expected {len(header)} fields, got {len(r)}")
        if r[0] in seen:
            raise ValidationError(f"{cov_path}:{line}: duplicate subject {r[0]!r}")
        seen.add(r[0])
        ids.append(r[0])
        values.append([_parse_float(v, cov_path, line, c) for v, c in zip(r[1:], names)])
    X = np.array(values, dtype=float).reshape(len(ids), len(names))
    return ids, names, X


def read_observations(obs_path, known: Optional[set] = None) -> Dict[str, List[Tuple[float, int]]]:
    """Per-subject (raw time, y) records in file order, validated."""
    header, rows = _read_rows(obs_path)
    if tuple(header) != OBS_COLUMNS:
        raise ValidationError(f"{obs_path}:1: header must be {','.join(OBS_COLUMNS)}, got {','.join(header)}")
    out: Dict[str, List[Tuple[float, int]]] = {}
    seen = set()
    for line, r in rows:
        if len(r) != 3:
            raise ValidationError(f"{obs_path}:{line}: expected 3 fields, got {len(r)}")
        sid, t_text, y_text = r
        if known is not None and sid not in known:
            raise ValidationError(f"{obs_path}:{line}: unknown subject {sid!r}")
        t = _parse_float(t_text, obs_path, line, "time")
        if y_text not in ("0", "1"):
            raise ValidationError(f"{obs_path}:{line}: y must be 0 or 1, got {y_text!r}")
        if (sid, t) in seen:
            raise ValidationError(f"{obs_path}:{line}: duplicate observation for subject {sid!r} at time {t_text}")
        seen.add((sid, t))
        out.setdefault(sid, []).append((t, int(y_text)))
    return out


def _rescale(t: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi == lo:
        return np.zeros_like(t)
    return (t - lo) / (hi - lo)


def ingest(obs_path, cov_path, time_range: Optional[Tuple[float, float]] = None) -> ObservedDataset:
    """Long-format observations plus one covariate row per subject.

    Raw times are mapped to [0, 1] by min-max rescaling over the whole file,
    or by the fixed ``time_range`` when given. Subject order follows the
    covariate file; subjects without observations are dropped with a
    warning. The intercept column is prepended.
    """
    ids, names, Xraw = read_covariates(cov_path)
    obs = read_observations(obs_path, known=set(ids))
    if not obs:
        raise ValidationError(f"{obs_path}: no observations")
    all_t = np.array([t for recs in obs.values() for t, _ in recs])
    if time_range is None:
        lo, hi = float(all_t.min()), float(all_t.max())
    else:
        lo, hi = (float(v) for v in time_range)
        if not hi > lo:
            raise ValidationError(f"time_range must be increasing, got {time_range}")
        if all_t.min() < lo or all_t.max() > hi:
            raise ValidationError(f"observation times fall outside time_range {list(time_range)}")
    keep = [i for i, s in enumerate(ids) if s in obs]
    dropped = [s for s in ids if s not in obs]
    if dropped:
        msg = f"dropping {len(dropped)} subject(s) without observations: {dropped[:5]}"
        warnings.warn(msg, stacklevel=2)
        log.warning(msg)
    times, ys = [], []
    for i in keep:
        recs = sorted(obs[ids[i]])
        t = np.array([r[0] for r in recs])
        times.append(_rescale(t, lo, hi))
        ys.append(np.array([r[1] for r in recs], dtype=np.int8))
    X = np.column_stack([np.ones(len(keep)), Xraw[keep]])
    return ObservedDataset(
        X, times, ys,
        subject_ids=[ids[i] for i in keep],
        covariate_names=["intercept"] + names,
        time_range=(lo, hi),
    )


def write_dataset(data: ObservedDataset, out_dir: Path) -> None:
    """obs.csv and cov.csv in the ingestion format (times on the dataset scale)."""
    lo, hi = data.time_range
    obs_rows = []
    for sid, t, y in zip(data.subject_ids, data.times, data.y):
        for tk, yk in zip(lo + t * (hi - lo), y):
            obs_rows.append((sid, float(tk), int(yk)))
    write_csv(out_dir / "obs.csv", OBS_COLUMNS, obs_rows)
    cov_rows = [(sid, *row[1:]) for sid, row in zip(data.subject_ids, data.X)]
    write_csv(out_dir / "cov.csv", ["subject_id"] + list(data.covariate_names[1:]), cov_rows)


# ---------------------------------------------------------------------------
# configuration


def _require(cfg: dict, key: str, where: str):
    if key not in cfg:
        raise ValidationError(f"missing required key {where}{key!r}")
    return cfg[key]


def _reject_unknown(cfg: dict, allowed: set, where: str) -> None:
    extra = sorted(set(cfg) - allowed)
    if extra:
        raise ValidationError(f"unknown key(s) in {where or 'config'}: {extra}")


def parse_basis(spec: dict) -> BasisSystem:
    if not isinstance(spec, dict):
        raise ValidationError("'basis' must be an object")
    _reject_unknown(spec, BASIS_KEYS, "basis")
    kind = _require(spec, "kind", "basis.")
    J = _require(spec, "J", "basis.")
    try:
        return BasisSystem.from_dict({"kind": kind, "J": J, **{k: spec[k] for k in ("degree", "knots") if k in spec}})
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid basis: {exc}") from exc


def parse_fit_config(cfg: dict) -> Tuple[FitConfig, Optional[Tuple[float, float]]]:
    """FitConfig and the optional fixed time range from a config object."""
    _reject_unknown(cfg, FIT_KEYS, "")
    seed = _require(cfg, "seed", "")
    basis = parse_basis(_require(cfg, "basis", ""))
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ValidationError(f"seed must be a nonnegative integer, got {seed!r}")
    kwargs = {k: cfg[k] for k in FIT_KEYS - {"seed", "basis", "time_range"} if k in cfg}
    try:
        config = FitConfig(basis=basis, seed=seed, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid fit configuration: {exc}") from exc
    tr = cfg.get("time_range")
    if tr is not None and (not isinstance(tr, list) or len(tr) != 2):
        raise ValidationError("time_range must be a list [min, max]")
    return config, None if tr is None else (float(tr[0]), float(tr[1]))


def parse_scenario(cfg: dict) -> SimScenario:
    _reject_unknown(cfg, SCENARIO_KEYS, "scenario")
    try:
        return SimScenario(**cfg)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid scenario: {exc}") from exc


# ---------------------------------------------------------------------------
# fit outputs


def params_payload(res: FitResult, data: ObservedDataset) -> dict:
    return {
        **res.params.to_dict(),
        "metadata": {
            "version": __version__,
            "converged": bool(res.converged),
            "n_iter": int(res.n_iter),
            "forced_accepts": res.forced_total,
            "basis": res.basis.to_dict(),
            "config": res.config.to_dict() if res.config else None,
            "covariate_names": list(data.covariate_names),
            "time_range": [float(v) for v in data.time_range],
            "eigenvalues": [float(v) for v in res.standardized.eigvals],
            "standardization_warnings": list(res.standardized.warnings),
        },
    }


def write_standardized(path: Path, std, covariate_names: Sequence[str]) -> None:
    grid = std.grid
    alpha = std.alpha_curves(grid)
    phi = std.eigenfunctions(grid)
    header = ["t"] + [f"alpha_{n}" for n in covariate_names] + [f"phi_{j + 1}" for j in range(phi.shape[0])]
    header += ["kernel_diag", "std_kernel_diag"]
    cols = [grid, *alpha, *phi, std.kernel_diag, std.std_kernel_diag(grid)]
    write_csv(path, header, zip(*cols))


def write_eigenvalues(path: Path, std) -> None:
    write_csv(path, ["index", "eigenvalue"], [(j + 1, v) for j, v in enumerate(std.eigvals)])


def write_trace(path: Path, res: FitResult) -> None:
    rows = []
    for k in range(res.n_iter):
        lam = res.lambda_trace[k]
        mean_lam = float(np.mean(lam)) if np.all(np.isfinite(lam)) else float("inf")
        rows.append((k + 1, res.sigma2_trace[k], res.xi_trace[k], res.delta_trace[k], mean_lam, int(res.forced_trace[k])))
    write_csv(path, ["iteration", "sigma2", "xi", "delta", "mean_lambda", "forced"], rows)


def cmd_fit(args) -> int:
    config, time_range = parse_fit_config(read_json(args.config))
    data = ingest(args.obs, args.cov, time_range)
    log.info("fitting N=%d subjects, %d observations", data.N, data.total_obs)
    res = fit(data, config)
    if not res.converged:
        log.warning("no convergence within %d iterations", config.max_iter)
    out = Path(args.out)
    write_json(out / "params.json", params_payload(res, data))
    write_standardized(out / "standardized.csv", res.standardized, data.covariate_names)
    write_eigenvalues(out / "eigenvalues.csv", res.standardized)
    write_trace(out / "trace.csv", res)
    return EXIT_OK


def load_params(path) -> Tuple[ModelParams, BasisSystem, dict]:
    payload = read_json(path)
    try:
        params = ModelParams.from_dict(payload)
        meta = payload["metadata"]
        basis = BasisSystem.from_dict(meta["basis"])
    except KeyError as exc:
        raise ValidationError(f"{path}: missing key {exc.args[0]!r}") from exc
    if basis.J != params.J:
        raise ValidationError(f"{path}: basis has J={basis.J} but B has {params.J} columns")
    return params, basis, meta


def restandardize(params_path) -> "object":
    """Standardized estimate recomputed from a params.json file."""
    params, basis, meta = load_params(params_path)
    grid_size = (meta.get("config") or {}).get("grid_size", 101)
    return standardize(params.B, params.Sigma_theta, basis, np.linspace(0, 1, grid_size))


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    sc = parse_scenario(read_json(args.scenario))
    data, truth = generate_dataset(sc)
    out = Path(args.out)
    write_dataset(data, out)
    curves = truth.curves()
    header = list(curves)
    write_csv(out / "truth_curves.csv", header, zip(*(curves[h] for h in header)))
    write_csv(out / "truth_eigenvalues.csv", ["index", "eigenvalue"], [(j + 1, v) for j, v in enumerate(truth.rho)])
    write_json(out / "meta.json", {
        "scenario": sc.to_dict(),
        "time_range": [0.0, 1.0],
        "nu": [float(v) for v in truth.nu],
        "version": __version__,
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def expand_sweep(sweep: dict) -> Tuple[List[SimScenario], int, dict, int]:
    """Scenarios, replicate count, fit settings and seed of a sweep file.

    ``scenarios`` lists explicit scenario objects; ``grid`` maps scenario
    fields to lists whose Cartesian product is appended.
    """
    _reject_unknown(sweep, {"seed", "replicates", "scenarios", "grid", "fit"}, "sweep")
    seed = _require(sweep, "seed", "")
    reps = int(sweep.get("replicates", 30))
    if reps < 1:
        raise ValidationError("replicates must be >= 1")
    scenarios = [parse_scenario({**s, "seed": seed}) for s in sweep.get("scenarios", [])]
    grid = sweep.get("grid")
    if grid:
        _reject_unknown(grid, SCENARIO_KEYS - {"seed", "replicate"}, "grid")
        keys = sorted(grid)
        for combo in itertools.product(*(grid[k] if isinstance(grid[k], list) else [grid[k]] for k in keys)):
            scenarios.append(parse_scenario({**dict(zip(keys, combo)), "seed": seed}))
    if not scenarios:
        raise ValidationError("sweep defines no scenarios")
    fit_cfg = dict(sweep.get("fit", {}))
    _reject_unknown(fit_cfg, FIT_KEYS - {"seed", "time_range"}, "fit")
    fit_cfg.setdefault("basis", {"kind": "fourier", "J": 11})
    fit_cfg["seed"] = 0
    parse_fit_config(fit_cfg)  # validate early
    return scenarios, reps, fit_cfg, int(seed)


def run_replicate(task) -> Dict[str, float]:
    """Simulate and fit one (scenario, replicate); top level so it pickles."""
    sc_dict, rep, fit_cfg, seed = task
    sc = SimScenario(**{**sc_dict, "replicate": rep})
    data, truth = generate_dataset(sc)
    config, _ = parse_fit_config({**fit_cfg, "seed": derived_seed(seed, REPLICATE_FIT, rep)})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = fit(data, config)
    return mse_eval(res, truth)


def run_sweep(scenarios, reps, fit_cfg, seed, threads: int = 1):
    tasks = [(sc.to_dict(), r, fit_cfg, seed) for sc in scenarios for r in range(reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run_replicate, tasks))
    else:
        results = [run_replicate(t) for t in tasks]
    table = []
    for s, sc in enumerate(scenarios):
        chunk = results[s * reps : (s + 1) * reps]
        means = {p: float(np.mean([r[p] for r in chunk])) for p in TABLE_PARAMS}
        table.append((sc, means))
    return table


def cmd_eval(args) -> int:
    scenarios, reps, fit_cfg, seed = expand_sweep(read_json(args.sweep))
    threads = max(1, int(args.threads))
    table = run_sweep(scenarios, reps, fit_cfg, seed, threads)
    out = Path(args.out)
    long_rows, wide_rows = [], []
    for sc, means in table:
        key = (sc.design, sc.N, sc.M, sc.sigma2, sc.rho)
        for p in TABLE_PARAMS:
            long_rows.append((*key, p, means[p], reps))
        wide_rows.append((*key, *(1e4 * means[p] for p in TABLE_PARAMS)))
    write_csv(out / "mse.csv", ["design", "N", "M", "sigma2", "rho", "parameter", "mse", "replicates"], long_rows)
    write_csv(out / "mse_table.csv", ["design", "N", "M", "sigma2", "rho", *(f"{p}_x1e4" for p in TABLE_PARAMS)], wide_rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict


def cmd_predict(args) -> int:
    params, basis, meta = load_params(args.params)
    lo, hi = meta.get("time_range", [0.0, 1.0])
    ids, names, Xraw = read_covariates(args.cov)
    expected = meta.get("covariate_names", [])[1:]
    if expected and names != expected:
        raise ValidationError(f"{args.cov}: covariate columns {names} differ from the fitted {expected}")
    obs = read_observations(args.obs, known=set(ids)) if args.obs else {}
    grid = np.linspace(0.0, 1.0, 101)
    seed = int((meta.get("config") or {}).get("seed", 0))
    rows = []
    for i, sid in enumerate(ids):
        x = np.concatenate([[1.0], Xraw[i]])
        recs = sorted(obs.get(sid, []))
        if recs:
            t = _rescale(np.array([r[0] for r in recs]), lo, hi)
            if t.min() < 0 or t.max() > 1:
                raise ValidationError(f"{args.obs}: times of subject {sid!r} fall outside the fitted range [{lo}, {hi}]")
            y = np.array([r[1] for r in recs])
            curve = predict_conditional((params, basis), x, y, t, grid, seed=seed, subject=i)
            kind = "conditional"
        else:
            curve = predict_mean((params, basis), x, grid)
            kind = "mean"
        for g, v in zip(grid, curve):
            rows.append((sid, kind, g, lo + g * (hi - lo), v))
    write_csv(Path(args.out) / "predictions.csv", ["subject_id", "kind", "t", "t_raw", "latent"], rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfr", description="Function-on-scalar regression for dichotomized longitudinal data.")
    p.add_argument("--version", action="version", version=f"dfr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit the model to long-format binary data")
    f.add_argument("--config", required=True)
    f.add_argument("--obs", required=True)
    f.add_argument("--cov", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="simulate one dataset with its ground truth")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("eval", help="Monte Carlo MSE study over a scenario sweep")
    e.add_argument("--sweep", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="predict latent curves for new subjects")
    r.add_argument("--params", required=True)
    r.add_argument("--cov", required=True)
    r.add_argument("--obs")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)
    return p


def _setup_logging() -> None:
    level = os.environ.get("DFR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        # LinAlgError derives from ValueError, so it must be caught first
        print(f"dfr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as exc:
        print(f"dfr: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"dfr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO

if __name__ == "__main__":
    sys.exit(main())
