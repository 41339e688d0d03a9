"""Command-line front end: ``test-mean``, ``test-auction``, ``test-did`` and ``simulate``.

Exit codes
----------
0  success
2  configuration error (bad flag or config value, unknown config key)
3  data error (unreadable CSV, missing column, inconsistent auction rows)
4  numerical failure (empty usable region, insufficient local data, solver failure)
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .applications import (
    AuctionFieldBuilder,
    AuctionSpec,
    DiDFieldBuilder,
    DiDSpec,
    MeanFieldBuilder,
    auction_grid,
    auction_level_covariates,
    did_grid,
    prepare_auction_sample,
    two_period_sample,
    _as_box,
    _quantile_box,
)
from .engine import EmptyRegionError, TestResult, TestSpec, run_test
from .estimators import DEFAULT_MASS_FLOOR, InsufficientDataError, Sample
from .montecarlo import DGPS, DgpSpec, ExperimentConfig, ReplicationError, run_experiment
from .numerics import DegenerateCovariateError, EvalGrid, RandomSource, rule_of_thumb_bandwidth

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------- config


@dataclass
class TestOptions:
    __test__ = False

    alpha: float = 0.05
    p: int = 1
    form: str = "sum"
    eta: float = 1e-3
    c_cs: float = 0.5
    n_boot: int = 200
    c_hat_pass: str = "same"
    seed: int = 0
    nx: int = 101
    mass_floor: float = DEFAULT_MASS_FLOOR
    x_region: list | None = None

    def test_spec(self) -> TestSpec:
        return TestSpec(self.p, self.form, self.alpha, self.eta, self.c_cs, self.n_boot, self.c_hat_pass)


@dataclass
class MeanConfig(TestOptions):
    data: str = ""
    theta: float = 0.0
    h: float | None = None


@dataclass
class AuctionConfig(TestOptions):
    data: str = ""
    h: float | None = None
    bidder_counts: list = field(default_factory=lambda: [2, 3])
    tau_range: list = field(default_factory=lambda: [0.1, 0.9])
    n_tau: int = 20
    poly_order: int = 1
    b_lower_mode: str = "sample_min"
    b_lower: float | None = None
    normalize_covariate: bool = False


@dataclass
class DiDConfig(TestOptions):
    data: str = ""
    period_t: str = ""
    period_s: str = ""
    h_t: float | None = None
    h_s: float | None = None
    tau_range: list = field(default_factory=lambda: [0.1, 0.9])
    n_tau: int = 17
    poly_order: int = 1


@dataclass
class SimulateConfig:
    dgp: int = 1
    n: int = 250
    n_mc: int = 500
    n_boot: int = 200
    c_cs: list = field(default_factory=lambda: [0.4, 0.5, 0.6])
    alpha: float = 0.05
    theta_mode: str = "cp"
    sigma: float = 1.0
    seed: int = 20240101
    p: int = 1
    form: str = "sum"
    eta: float = 1e-3
    nx: int = 101

    def experiment(self) -> ExperimentConfig:
        dgp = DgpSpec.numbered(self.dgp, self.n, self.sigma)
        return ExperimentConfig(dgp, self.n_mc, self.n_boot, tuple(self.c_cs), self.alpha,
                                self.theta_mode, self.seed, self.p, self.form, self.eta, self.nx)


COMMANDS = {
    "test-mean": MeanConfig,
    "test-auction": AuctionConfig,
    "test-did": DiDConfig,
    "simulate": SimulateConfig,
}


@dataclass
class RunConfig:
    """A command plus its parameters; serialises to JSON with a version field."""

    command: str
    params: object
    version: int = CONFIG_VERSION

    def to_dict(self) -> dict:
        return {"version": self.version, "command": self.command, "params": dataclasses.asdict(self.params)}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - {"version", "command", "params"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if doc.get("version") != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {doc.get('version')!r}")
        command = doc.get("command")
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}")
        kind = COMMANDS[command]
        params = doc.get("params", {})
        names = {f.name for f in dataclasses.fields(kind)}
        unknown = set(params) - names
        if unknown:
            raise ConfigError(f"unknown parameters for {command}: {sorted(unknown)}")
        cfg = cls(command, kind(**params))
        validate(cfg)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)


def validate(cfg: RunConfig) -> None:
    """Raise ConfigError for any value the library would reject."""
    p = cfg.params
    try:
        if isinstance(p, SimulateConfig):
            p.experiment()
            if p.n < 4:
                raise ValueError("simulate needs n >= 4")
        else:
            p.test_spec()
            if not p.data:
                raise ValueError("a data file is required")
            if p.nx < 1:
                raise ValueError("nx must be positive")
            if getattr(p, "h", None) is not None and not p.h > 0:
                raise ValueError("h must be positive")
            if not 0 <= p.seed < 2**64:
                raise ValueError("seed must be a 64-bit unsigned integer")
        if isinstance(p, AuctionConfig):
            AuctionSpec(tuple(p.bidder_counts), tuple(p.tau_range), p.n_tau, None, (0.1, 0.9),
                        p.poly_order, p.b_lower_mode, p.b_lower, p.normalize_covariate)
        if isinstance(p, DiDConfig):
            if not p.period_t or not p.period_s or p.period_t == p.period_s:
                raise ValueError("two distinct periods are required")
            DiDSpec(p.period_t, p.period_s, tuple(p.tau_range), p.n_tau)
            for hh in (p.h_t, p.h_s):
                if hh is not None and not hh > 0:
                    raise ValueError("bandwidths must be positive")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# ------------------------------------------------------------------------ data

SCHEMAS = {
    "mean": ("y",),
    "auction": ("bid", "auction_id", "n_bidders"),
    "did": ("y", "period"),
}


def _read_table(path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path} is empty")
    header = [c.strip() for c in rows[0]]
    body = rows[1:]
    for k, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"line {k} has {len(r)} fields, header has {len(header)}")
    if not body:
        raise DataError(f"{path} has no data rows")
    return header, body


def _numeric(header, body, name) -> np.ndarray:
    j = header.index(name)
    out = np.empty(len(body))
    for k, r in enumerate(body):
        try:
            out[k] = float(r[j])
        except ValueError:
            raise DataError(f"non-numeric value {r[j]!r} in column {name!r}, line {k + 2}") from None
        if not math.isfinite(out[k]):
            raise DataError(f"non-finite value in column {name!r}, line {k + 2}")
    return out


def covariate_columns(header) -> list[str]:
    cols = []
    while f"x{len(cols) + 1}" in header:
        cols.append(f"x{len(cols) + 1}")
    if not cols:
        raise DataError("no covariate columns (expected x1, x2, ...)")
    return cols


def ingest_csv(path, schema: str) -> Sample:
    """Read a CSV in one of the ``mean``, ``auction`` or ``did`` layouts."""
    if schema not in SCHEMAS:
        raise ValueError(f"schema must be one of {sorted(SCHEMAS)}")
    header, body = _read_table(path)
    missing = [c for c in SCHEMAS[schema] if c not in header]
    if missing:
        raise DataError(f"missing columns {missing} for the {schema} layout")
    xcols = covariate_columns(header)
    x = np.column_stack([_numeric(header, body, c) for c in xcols])
    if schema == "mean":
        return Sample(_numeric(header, body, "y"), x)
    if schema == "auction":
        bids = _numeric(header, body, "bid")
        nb = _numeric(header, body, "n_bidders")
        ids = np.array([r[header.index("auction_id")].strip() for r in body])
        for a in dict.fromkeys(ids):
            rows = ids == a
            counts = np.unique(nb[rows])
            if counts.size != 1:
                raise DataError(f"auction {a!r} has inconsistent n_bidders")
            if int(counts[0]) != rows.sum():
                raise DataError(f"auction {a!r} declares {int(counts[0])} bidders but has {rows.sum()} bid rows")
            if np.ptp(x[rows], axis=0).max() > 0:
                raise DataError(f"auction {a!r} has varying covariates across bids")
        return Sample(bids, x, group=nb.astype(int), cluster=ids)
    y = _numeric(header, body, "y")
    w = _numeric(header, body, "weight") if "weight" in header else None
    period = np.array([r[header.index("period")].strip() for r in body])
    try:
        return Sample(y, x, w, group=period, stratum=period)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def describe(sample: Sample) -> dict:
    out = {"rows": sample.n_obs, "units": sample.n_units, "d": sample.d}
    if sample.group is not None:
        labels, counts = np.unique(sample.group, return_counts=True)
        out["group_rows"] = {str(k): int(c) for k, c in zip(labels, counts)}
    return out


# ------------------------------------------------------------------- commands


def _bandwidth(x: np.ndarray) -> float:
    """Rule of thumb per coordinate, averaged when there are several."""
    x = np.atleast_2d(x.T).T
    return float(np.mean([rule_of_thumb_bandwidth(x[:, k]) for k in range(x.shape[1])]))


def _box(region, x, default_q=(0.1, 0.9)):
    return _as_box(region) if region is not None else _quantile_box(x, default_q)


def result_payload(res: TestResult) -> dict:
    s = res.summary
    diag = {k: v for k, v in res.diagnostics.items()}
    return {
        "theta_hat": res.theta_hat,
        "reject": res.reject,
        "p_value": res.p_value,
        "c_hat_n": res.contact.c_hat_n,
        "a_star": s.a_star,
        "c_alpha_star": s.c_alpha_star,
        "c_alpha_eta_star": s.c_alpha_eta_star,
        "lfc": {
            "reject": res.reject_lfc,
            "a_star": s.a_star_lfc,
            "c_alpha": s.c_alpha_lfc,
            "c_alpha_eta": s.c_alpha_eta_lfc,
        },
        "theta_star": s.theta_star.tolist(),
        "theta_star_lfc": s.theta_star_lfc.tolist(),
        "sup_stats": s.sup_stats.tolist(),
        "diagnostics": _jsonable(diag),
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def grid_rows(res: TestResult, grid: EvalGrid) -> tuple[list[str], list[list]]:
    """Per grid point: covariates, tau, usability, studentized fields, contact masks."""
    J = res.fields.J
    sets = list(res.contact.masks)
    header = [f"x{k + 1}" for k in range(grid.d)] + ["tau", "usable"]
    header += [f"u{j + 1}" for j in range(J)]
    header += ["contact_" + "_".join(str(j + 1) for j in A) for A in sets]
    rows = []
    for g in range(grid.n_x):
        for t in range(grid.n_tau):
            row = [repr(float(v)) for v in grid.x_points[g]]
            row.append("" if np.isnan(grid.tau_axis[t]) else repr(float(grid.tau_axis[t])))
            row.append(int(res.fields.usable[g, t]))
            row += [repr(float(res.fields.u[j, g, t])) for j in range(J)]
            row += [int(res.contact.masks[A][g, t]) for A in sets]
            rows.append(row)
    return header, rows


def build_test(cfg: RunConfig):
    """Returns ``(builder, extra)`` for a test command."""
    p = cfg.params
    if isinstance(p, MeanConfig):
        sample = ingest_csv(p.data, "mean")
        h = p.h if p.h is not None else _bandwidth(sample.x)
        grid = EvalGrid.midpoint(_box(p.x_region, sample.x), p.nx)
        return MeanFieldBuilder(sample, grid, h, p.theta, mass_floor=p.mass_floor), {"h": h, "data": describe(sample)}
    if isinstance(p, AuctionConfig):
        spec = AuctionSpec(tuple(p.bidder_counts), tuple(p.tau_range), p.n_tau,
                           None if p.x_region is None else tuple(map(tuple, _as_box(p.x_region))),
                           (0.1, 0.9), p.poly_order, p.b_lower_mode, p.b_lower, p.normalize_covariate)
        sample = prepare_auction_sample(ingest_csv(p.data, "auction"), spec)
        for k in spec.bidder_counts:
            if not np.any(sample.group == k):
                raise DataError(f"no auctions with {k} bidders")
        h = p.h if p.h is not None else _bandwidth(auction_level_covariates(sample))
        grid = auction_grid(sample, spec, p.nx)
        return AuctionFieldBuilder(sample, grid, h, spec, mass_floor=p.mass_floor), {"h": h, "data": describe(sample)}
    if isinstance(p, DiDConfig):
        spec = DiDSpec(p.period_t, p.period_s, tuple(p.tau_range), p.n_tau,
                       None if p.x_region is None else tuple(map(tuple, _as_box(p.x_region))))
        raw = ingest_csv(p.data, "did")
        try:
            sample = two_period_sample(raw, spec)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        xt = sample.x[sample.group == spec.period_t]
        xs = sample.x[sample.group == spec.period_s]
        h_t = p.h_t if p.h_t is not None else _bandwidth(xt)
        h_s = p.h_s if p.h_s is not None else _bandwidth(xs)
        grid = did_grid(sample, spec, p.nx)
        builder = DiDFieldBuilder(sample, grid, spec, h_t, h_s, mass_floor=p.mass_floor)
        return builder, {"h_t": h_t, "h_s": h_s, "r_n": builder.rate, "data": describe(sample)}
    raise ConfigError(f"{cfg.command} is not a test command")


def command_test(cfg: RunConfig, workers: int = 1, grid_csv=None) -> dict:
    t0 = time.perf_counter()
    builder, extra = build_test(cfg)
    res = run_test(builder, cfg.params.test_spec(), RandomSource(cfg.params.seed), workers)
    if grid_csv is not None:
        header, rows = grid_rows(res, builder.grid)
        with open(grid_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    payload = result_payload(res)
    payload["setup"] = _jsonable(extra)
    return report(cfg, payload, time.perf_counter() - t0)


def command_simulate(cfg: RunConfig, workers: int = 1) -> dict:
    rep = run_experiment(cfg.params.experiment(), workers)
    payload = rep.to_dict()
    wall = payload.pop("wall_clock_seconds")
    payload.pop("config")
    return report(cfg, payload, wall)


def report(cfg: RunConfig, payload: dict, wall: float) -> dict:
    return {
        "library_version": __version__,
        "config": cfg.to_dict(),
        "seed": cfg.params.seed,
        "result": payload,
        "wall_clock_seconds": wall,
    }


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ----------------------------------------------------------------------- argv


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_common(sp):
    sp.add_argument("--config", help="JSON run config; flags given explicitly override it")
    sp.add_argument("--data")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--p", type=int)
    sp.add_argument("--form", choices=["max", "sum"])
    sp.add_argument("--eta", type=float)
    sp.add_argument("--ccs", dest="c_cs", type=float)
    sp.add_argument("--boot", dest="n_boot", type=int)
    sp.add_argument("--c-hat-pass", dest="c_hat_pass", choices=["same", "separate"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--nx", type=int)
    sp.add_argument("--mass-floor", dest="mass_floor", type=float)
    sp.add_argument("--x-region", dest="x_region", type=_floats, help="lo,hi[,lo,hi...]")
    sp.add_argument("--out", help="report path (default: stdout)")
    sp.add_argument("--grid-csv", help="write grid-level diagnostics to this CSV")
    sp.add_argument("--workers", type=int, default=1)


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="funcineq", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("test-mean", help="E[Y - theta | X = x] <= 0 on a covariate region")
    _add_common(sp)
    sp.add_argument("--theta", type=float)
    sp.add_argument("--h", type=float)

    sp = sub.add_parser("test-auction", help="bid-quantile inequalities for two bidder counts")
    _add_common(sp)
    sp.add_argument("--h", type=float)
    sp.add_argument("--tau-range", dest="tau_range", type=_floats)
    sp.add_argument("--n-tau", dest="n_tau", type=int)
    sp.add_argument("--order", dest="poly_order", type=int)
    sp.add_argument("--b-lower", dest="b_lower", type=float, help="supply the bid lower bound")
    sp.add_argument("--normalize-covariate", dest="normalize_covariate", action="store_const", const=True)

    sp = sub.add_parser("test-did", help="quantile difference-in-differences inequality")
    _add_common(sp)
    sp.add_argument("--period-t", dest="period_t")
    sp.add_argument("--period-s", dest="period_s")
    sp.add_argument("--h-t", dest="h_t", type=float)
    sp.add_argument("--h-s", dest="h_s", type=float)
    sp.add_argument("--tau-range", dest="tau_range", type=_floats)
    sp.add_argument("--n-tau", dest="n_tau", type=int)
    sp.add_argument("--order", dest="poly_order", type=int)

    sp = sub.add_parser("simulate", help="coverage experiment for the mean test")
    sp.add_argument("--config")
    sp.add_argument("--dgp", type=int, choices=sorted(DGPS))
    sp.add_argument("--n", type=int)
    sp.add_argument("--reps", dest="n_mc", type=int)
    sp.add_argument("--boot", dest="n_boot", type=int)
    sp.add_argument("--ccs", dest="c_cs", type=_floats)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--mode", dest="theta_mode", choices=["cp", "fcp"])
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--nx", type=int)
    sp.add_argument("--out")
    sp.add_argument("--csv", help="write per-replication outcomes to this CSV")
    sp.add_argument("--workers", type=int, default=1)
    return ap


_RUNTIME_FLAGS = {"command", "config", "out", "grid_csv", "workers", "csv"}


def config_from_args(args) -> RunConfig:
    if args.config:
        base = RunConfig.load(args.config)
        if base.command != args.command:
            raise ConfigError(f"config is for {base.command}, not {args.command}")
        params = base.to_dict()["params"]
    else:
        params = {}
    for k, v in vars(args).items():
        if k in _RUNTIME_FLAGS or v is None:
            continue
        params[k] = v
    if params.get("b_lower") is not None and args.command == "test-auction":
        params["b_lower_mode"] = "supplied"
    if "x_region" in params and params["x_region"] is not None:
        xr = list(params["x_region"])
        if len(xr) % 2:
            raise ConfigError("--x-region needs lo,hi pairs")
        params["x_region"] = [xr[i:i + 2] for i in range(0, len(xr), 2)]
    return RunConfig.from_dict({"version": CONFIG_VERSION, "command": args.command, "params": params})


def _write(path, text):
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def main(argv=None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = config_from_args(args)
        if args.command == "simulate":
            doc = command_simulate(cfg, args.workers)
            if args.csv:
                _write_replications(args.csv, doc)
        else:
            doc = command_test(cfg, args.workers, args.grid_csv)
        _write(args.out, dumps(doc))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DegenerateCovariateError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EmptyRegionError, InsufficientDataError, ReplicationError, RuntimeError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def _write_replications(path, doc):
    reps = doc["result"]["replications"]
    ccs = list(reps[0]["reject"]) if reps else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "theta_hat", "reject_lfc"] + [f"reject_ccs_{c}" for c in ccs])
        for r in reps:
            w.writerow([r["index"], repr(r["theta_hat"]), int(r["reject_lfc"])] + [int(r["reject"][c]) for c in ccs])


if __name__ == "__main__":
    sys.exit(main())
