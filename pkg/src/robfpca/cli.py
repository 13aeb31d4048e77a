"""Command-line front end.

``robfpca fit`` fits a model to a CSV file, ``robfpca simulate`` runs a
Monte Carlo study described by an INI file and ``robfpca report`` turns a
raw simulation CSV into per-K curve data.

Exit codes: 0 success, 2 input or configuration error, 3 estimator and
data incompatible (for example a complete-data estimator on data with
missing cells).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from robfpca import simulation as sim
from robfpca.data import DataFormatError, load_csv
from robfpca.mm import MmConfig
from robfpca.model import save_model

EXIT_OK, EXIT_INPUT, EXIT_INCOMPATIBLE = 0, 2, 3
SCHEMA_VERSION = 1
CONFIG_DIR = Path(__file__).with_name("configs")


class ConfigError(ValueError):
    """Invalid simulation config file."""


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# simulation config

_SIM_KEYS = {"schema_version", "scenario", "estimators", "d", "replications", "k_points",
             "settings", "case_direction", "case_center"}
_SCENARIO_KEYS = {"p": int, "n": int, "pi": "floats", "direction_norm": float}
_K_KEYS = {"case", "cell"}
_MM_KEYS = {"knot_divisor": int, "n_knots": int, "rho": str, "rho_c": float, "final_c": float,
            "max_outer_iterations": int, "tolerance": float, "overlap_threshold": int,
            "loess_span": float, "loess2d_span": float, "final_adjustment": bool}
_SECTIONS = {"simulation": _SIM_KEYS, "scenario": set(_SCENARIO_KEYS), "k_grid": _K_KEYS,
             "mm": set(_MM_KEYS)}


@dataclass
class RunConfig:
    """Validated contents of a simulation config plus the command-line seed and paths."""

    scenario: sim.ScenarioConfig
    settings: tuple
    estimators: tuple = sim.ESTIMATORS
    d_values: tuple = (1.0,)
    replications: int = 25
    k_points: int = 5
    k_case: Optional[tuple] = None
    k_cell: Optional[tuple] = None
    case_direction: str = "next_eigenvector"
    case_center: str = "mean"
    mm: MmConfig = field(default_factory=MmConfig)
    seed: Optional[int] = None
    threads: int = 1
    out_dir: Path = Path(".")
    name: str = "simulation"

    def k_grids(self):
        grids = {}
        for s in self.settings:
            if s.eps_case > 0 and self.k_case is not None:
                grids[s] = self.k_case
            elif s.eps_case == 0 and s.eps_cell > 0 and self.k_cell is not None:
                grids[s] = self.k_cell
        return grids

    def run(self):
        if self.seed is None:
            raise ConfigError("a seed is required for simulations")
        return sim.run_monte_carlo(
            self.scenario, self.settings, estimators=self.estimators, d_values=self.d_values,
            seed=self.seed, replications=self.replications, k_grids=self.k_grids(),
            n_k=self.k_points, threads=self.threads, mm_config=self.mm,
            case_direction=self.case_direction, case_center=self.case_center,
        )


def _floats(text, key):
    try:
        return tuple(float(tok) for tok in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: expected numbers, got {text!r}") from None


def _settings(text):
    out = []
    for tok in text.replace(",", " ").split():
        parts = tok.split("/")
        if len(parts) != 2:
            raise ConfigError(f"settings: expected eps_case/eps_cell, got {tok!r}")
        a, b = _floats(" ".join(parts), "settings")
        if a > 0 and b > 0:
            raise ConfigError(f"settings: {tok!r} mixes casewise and cellwise contamination")
        out.append(sim.Setting(a, b))
    if not out:
        raise ConfigError("settings: at least one setting is required")
    return tuple(out)


def _convert(kind, text, key):
    try:
        if kind is bool:
            low = text.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError
            return low in ("true", "yes", "1")
        if kind == "floats":
            return _floats(text, key)
        return kind(text.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r}") from None


def parse_run_config(text, name="simulation"):
    """Parse and validate an INI simulation config.

    Raises
    ------
    ConfigError
        On unknown sections or keys, a missing or unsupported
        ``schema_version`` or any invalid value.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    for sec in cp.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        unknown = set(cp[sec]) - _SECTIONS[sec]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(sorted(unknown))}")
    if "simulation" not in cp:
        raise ConfigError("missing [simulation] section")
    s = cp["simulation"]
    if "schema_version" not in s:
        raise ConfigError("missing schema_version")
    if _convert(int, s["schema_version"], "schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {s['schema_version']!r} (expected {SCHEMA_VERSION})")

    preset = s.get("scenario", "lrs-like").strip()
    if preset not in sim.PRESETS:
        raise ConfigError(f"scenario must be one of {sorted(sim.PRESETS)}")
    overrides = {}
    if "scenario" in cp:
        for key, val in cp["scenario"].items():
            overrides[key] = _convert(_SCENARIO_KEYS[key], val, key)
    mm_kw = {}
    if "mm" in cp:
        for key, val in cp["mm"].items():
            mm_kw[key] = _convert(_MM_KEYS[key], val, key)
    k_case = k_cell = None
    if "k_grid" in cp:
        k_case = _floats(cp["k_grid"]["case"], "case") if "case" in cp["k_grid"] else None
        k_cell = _floats(cp["k_grid"]["cell"], "cell") if "cell" in cp["k_grid"] else None
    estimators = tuple(e.strip() for e in s.get("estimators", ",".join(sim.ESTIMATORS)).split(",") if e.strip())
    try:
        scenario = sim.PRESETS[preset](**overrides)
        cfg = RunConfig(
            scenario=scenario,
            settings=_settings(s.get("settings", "0/0")),
            estimators=estimators,
            d_values=_floats(s.get("d", "1.0"), "d"),
            replications=_convert(int, s.get("replications", "25"), "replications"),
            k_points=_convert(int, s.get("k_points", "5"), "k_points"),
            k_case=k_case,
            k_cell=k_cell,
            case_direction=s.get("case_direction", "next_eigenvector").strip(),
            case_center=s.get("case_center", "mean").strip(),
            mm=MmConfig(q=scenario.q, **mm_kw),
            name=name,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    for e in cfg.estimators:
        if e not in sim.ESTIMATORS:
            raise ConfigError(f"unknown estimator {e!r}")
    if not cfg.estimators:
        raise ConfigError("estimators: at least one is required")
    if any(not 0.0 < d <= 1.0 for d in cfg.d_values) or not cfg.d_values:
        raise ConfigError("d: decimation rates must lie in (0, 1]")
    if cfg.replications < 1 or cfg.k_points < 1:
        raise ConfigError("replications and k_points must be positive")
    for ks in (cfg.k_case, cfg.k_cell):
        if ks is not None and (not ks or min(ks) < 0):
            raise ConfigError("K grids must be nonempty and nonnegative")
    if cfg.case_direction not in sim.CASE_DIRECTIONS:
        raise ConfigError(f"case_direction must be one of {sim.CASE_DIRECTIONS}")
    if cfg.case_center not in sim.CASE_CENTERS:
        raise ConfigError(f"case_center must be one of {sim.CASE_CENTERS}")
    for st in cfg.settings:
        try:
            sim.ContaminationSpec(st.eps_case, st.eps_cell)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if any(st.eps_case > 0 for st in cfg.settings) and cfg.case_direction == "next_eigenvector" \
            and cfg.scenario.extra_fn is None:
        raise ConfigError("casewise settings need a scenario with an outlier direction")


def load_run_config(path):
    path = _resolve_config(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_run_config(text, name=path.stem)


def _resolve_config(path):
    p = Path(path)
    if not p.exists() and (CONFIG_DIR / p.name).exists() and p.parent == Path("."):
        return CONFIG_DIR / p.name
    return p


# --------------------------------------------------------------------------
# commands


def _write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")
    return path


def cmd_fit(args):
    from robfpca.naive import IncompleteDataError, fit_classical, fit_naive

    try:
        data = load_csv(args.data, grid_path=args.grid)
    except DataFormatError as exc:
        raise CliError(f"{args.data}: {exc}", EXIT_INPUT) from None
    except OSError as exc:
        raise CliError(f"cannot read {exc.filename}: {exc.strerror}", EXIT_INPUT) from None
    except ValueError as exc:
        raise CliError(f"{args.data}: {exc}", EXIT_INPUT) from None
    try:
        if args.estimator == "mm":
            model = sim.fit_estimator("mm", data, args.q, MmConfig(
                q=args.q, target_explained=args.target_explained, knot_divisor=args.knot_divisor))
        elif args.target_explained is not None:
            raise CliError("--target-explained applies to the mm estimator only", EXIT_INPUT)
        elif args.estimator == "naive":
            model = fit_naive(data, args.q)
        else:
            model = fit_classical(data, args.q)
    except IncompleteDataError as exc:
        raise CliError(f"incomplete data: {exc}", EXIT_INCOMPATIBLE) from None
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        raise CliError(f"{args.estimator} cannot fit these data: {exc}", EXIT_INCOMPATIBLE) from None

    out = Path(args.out_dir)
    stem = Path(args.data).stem
    model_path = out / f"{stem}_{args.estimator}_model.json"
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, model_path)
    m = model.case_mae(data)
    diag_path = out / f"{stem}_{args.estimator}_cases.csv"
    with diag_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "n_observed", "mae"])
        for cid, k, v in zip(data.case_ids, data.mask.sum(axis=1), m):
            w.writerow([cid, int(k), repr(float(v))])
    print(f"estimator={args.estimator} n={data.n} p={data.p} d={data.decimation_rate:.4f} q={model.q}")
    print(f"u_{model.q} = {model.explained:.4f}")
    print(f"overall MAE = {float(np.mean(m)):.6g}")
    print(f"model: {model_path}")
    print(f"case diagnostics: {diag_path}")
    return EXIT_OK


def cmd_simulate(args):
    if args.seed is None:
        raise CliError("simulate needs --seed (all randomness derives from it)", EXIT_INPUT)
    try:
        cfg = load_run_config(args.config)
    except ConfigError as exc:
        raise CliError(f"{args.config}: {exc}", EXIT_INPUT) from None
    overrides = dict(seed=args.seed, threads=args.threads, out_dir=Path(args.out_dir))
    if args.estimator:
        overrides["estimators"] = tuple(args.estimator)
    if args.knot_divisor is not None:
        overrides["mm"] = replace(cfg.mm, knot_divisor=args.knot_divisor)
    if args.replications is not None:
        overrides["replications"] = args.replications
    cfg = replace(cfg, **overrides)
    try:
        _validate(cfg)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    result = cfg.run()
    raw = _write(cfg.out_dir / f"{cfg.name}_raw.csv", result.raw_csv())
    table = _write(cfg.out_dir / f"{cfg.name}_table.csv", result.table_csv())
    print(f"{cfg.scenario.name}: {cfg.replications} replications, seed {cfg.seed}")
    print(sim.format_table(result.reports()))
    bad = [r for r in result.records if r.status.startswith("error")]
    if bad:
        print(f"{len(bad)} fits failed; see the status column of the raw CSV", file=sys.stderr)
    print(f"raw: {raw}")
    print(f"table: {table}")
    return EXIT_OK


def cmd_report(args):
    path = Path(args.raw)
    try:
        records = sim.records_from_csv(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", EXIT_INPUT) from None
    except ValueError as exc:
        raise CliError(f"{path}: {exc}", EXIT_INPUT) from None
    stem = path.stem[:-4] if path.stem.endswith("_raw") else path.stem
    out = _write(Path(args.out_dir) / f"{stem}_curves.csv", sim.curves_csv(records))
    print(f"curves: {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="robfpca", description="Robust functional principal components")
    sub = parser.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model to a CSV file")
    f.add_argument("data", help="long (case_id,time,value) or matrix CSV")
    f.add_argument("--grid", help="time grid file for matrix-format input")
    f.add_argument("--estimator", choices=sim.ESTIMATORS, default="mm")
    f.add_argument("--q", type=int, default=2, help="number (or maximum number) of components")
    f.add_argument("--target-explained", type=float, default=None,
                   help="mm: stop once the explained proportion reaches this value")
    f.add_argument("--knot-divisor", type=int, default=6, help="mm: floor(p / K) interior knots")
    f.add_argument("--out-dir", default=".")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run a Monte Carlo study from a config file")
    s.add_argument("config", help="INI config (bundled names such as lrs_complete.cfg also work)")
    s.add_argument("--seed", type=int, default=None, help="master seed (required)")
    s.add_argument("--threads", type=int, default=1, help="worker processes; results do not depend on it")
    s.add_argument("--estimator", action="append", choices=sim.ESTIMATORS,
                   help="restrict to this estimator (repeatable)")
    s.add_argument("--knot-divisor", type=int, default=None)
    s.add_argument("--replications", type=int, default=None)
    s.add_argument("--out-dir", default=".")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="per-K curve data from a raw simulation CSV")
    r.add_argument("raw")
    r.add_argument("--out-dir", default=".")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("robfpca: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except CliError as exc:
        print(f"robfpca: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
