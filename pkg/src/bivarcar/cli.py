"""Command-line interface: fit, deconfound, moran, simulate, compare, validate.

Settings are resolved as built-in defaults, then the ``--config`` file
section named after the subcommand, then explicit flags.

Exit codes: 0 ok, 2 validation error, 3 numerical failure, 4 unconverged.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as bio
from .deconfound import (
    MORAN_THRESHOLD,
    RemovalPattern,
    deconfounded_design,
    default_caps,
    moran_i,
    search_moran_minimal,
    search_waic_optimal,
    waic_scorer,
)
from .graph import GraphError, eigendecompose
from .multilevel import LevelMapError, aggregate
from .spatial_prior import PriorError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_UNCONVERGED = 0, 2, 3, 4


class UsageError(ValueError):
    pass


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in _csv_list(text)]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    return str(text).strip().lower() in ("1", "true", "yes", "on")


# option name -> (type, default); flags default to None so that explicit use is detectable
OPTIONS = {
    "fit": {
        "obs": (str, None),
        "adj": (str, None),
        "out": (str, None),
        "model": (str, "icar"),
        "likelihoods": (_csv_list, ["gaussian", "skew_normal"]),
        "outcomes": (_csv_list, None),
        "rsr": (_bool, False),
        "spatial_plus": (str, None),
        "no_rescale": (_bool, False),
        "unscaled": (_bool, False),
        "intercepts": (str, None),
        "constraints": (str, None),
        "wishart_df": (float, None),
        "pc_lambda": (float, 4.0),
        "fix": (_csv_list, []),
        "label": (str, None),
        "seed": (int, 0),
        "draws": (int, 4000),
        "threads": (int, 1),
        "no_grid": (_bool, False),
        "bit_reproducible": (_bool, False),
        "oracle": (_bool, False),
        "oracle_iters": (int, 4000),
        "oracle_chains": (int, 4),
    },
    "deconfound": {
        "obs": (str, None),
        "adj": (str, None),
        "out": (str, None),
        "method": (str, "moran"),
        "threshold": (float, MORAN_THRESHOLD),
        "caps": (_int_list, None),
        "budget": (int, 200),
        "model": (str, "icar"),
        "likelihoods": (_csv_list, ["gaussian", "skew_normal"]),
        "outcomes": (_csv_list, None),
        "seed": (int, 0),
        "threads": (int, 1),
        "design": (str, None),
    },
    "moran": {
        "obs": (str, None),
        "adj": (str, None),
        "pattern": (str, None),
        "out": (str, None),
        "outcomes": (_csv_list, None),
    },
    "simulate": {
        "scenario": (str, None),
        "out": (str, None),
        "replicates": (int, 1),
    },
    "compare": {
        "out": (str, None),
    },
    "validate": {
        "obs": (str, None),
        "adj": (str, None),
        "outcomes": (_csv_list, None),
    },
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bivarcar", description="Bivariate multilevel CAR models for areal data.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, obs=True):
        sp.add_argument("--config", help="INI file; the section named after the subcommand is used")
        if obs:
            sp.add_argument("--obs", help="observation CSV")
            sp.add_argument("--adj", help="adjacency file")
            sp.add_argument("--outcomes", help="comma-separated outcome columns")

    f = sub.add_parser("fit", help="fit a model and write reports")
    common(f)
    f.add_argument("--out", help="output directory")
    f.add_argument("--model", choices=["null", "iid", "indep_icar", "icar", "pcar"])
    f.add_argument("--likelihoods", help="per outcome: gaussian or skew_normal (comma-separated)")
    f.add_argument("--rsr", action="store_true", default=None, help="restricted spatial regression")
    f.add_argument("--spatial-plus", metavar="PATTERN", help="deconfound with a removal-pattern JSON file")
    f.add_argument("--no-rescale", action="store_true", default=None, help="keep deconfounded covariates unscaled")
    f.add_argument("--unscaled", action="store_true", default=None, help="do not scale the ICAR structure")
    f.add_argument("--intercepts", choices=["component", "single"])
    f.add_argument("--constraints", choices=["none", "sum_to_zero", "rsr"])
    f.add_argument("--wishart-df", type=float)
    f.add_argument("--pc-lambda", type=float)
    f.add_argument("--fix", help="fixed hyperparameters, e.g. phi=0.999999,rho=0.5")
    f.add_argument("--label", help="model label in reports and tables")
    f.add_argument("--seed", type=int)
    f.add_argument("--draws", type=int, help="posterior draws for the criteria")
    f.add_argument("--threads", type=int)
    f.add_argument("--no-grid", action="store_true", default=None, help="use the mode only")
    f.add_argument("--bit-reproducible", action="store_true", default=None, help="omit timings; single thread")
    f.add_argument("--oracle", action="store_true", default=None, help="also run the MCMC oracle")
    f.add_argument("--oracle-iters", type=int)
    f.add_argument("--oracle-chains", type=int)

    d = sub.add_parser("deconfound", help="search a Spatial+ removal pattern")
    common(d)
    d.add_argument("--out", help="pattern JSON to write")
    d.add_argument("--method", choices=["moran", "waic"])
    d.add_argument("--threshold", type=float)
    d.add_argument("--caps", help="per-component maximum K (comma-separated)")
    d.add_argument("--budget", type=int, help="maximum fits for the WAIC search")
    d.add_argument("--model", choices=["icar", "pcar", "iid", "indep_icar"])
    d.add_argument("--likelihoods")
    d.add_argument("--seed", type=int)
    d.add_argument("--threads", type=int)
    d.add_argument("--design", help="also write the deconfounded design to this CSV")

    m = sub.add_parser("moran", help="Moran's I of covariate macro-area means")
    common(m)
    m.add_argument("--pattern", help="report the nonspatial parts under this removal pattern")
    m.add_argument("--out", help="CSV to write")

    s = sub.add_parser("simulate", help="generate synthetic datasets")
    s.add_argument("--config")
    s.add_argument("--scenario", help="scenario INI file")
    s.add_argument("--out", help="output directory")
    s.add_argument("--replicates", type=int)

    c = sub.add_parser("compare", help="merge criteria from fit reports")
    c.add_argument("--config")
    c.add_argument("reports", nargs="+")
    c.add_argument("--out", help="CSV to write")

    v = sub.add_parser("validate", help="check an observation/adjacency pair")
    common(v)
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config-file values and explicit flags."""
    spec = OPTIONS[args.command]
    cfg = {}
    if getattr(args, "config", None):
        cfg = bio.read_config(args.config, args.command)
        unknown = sorted(set(cfg) - set(spec))
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {unknown}")
    out = {}
    for key, (typ, default) in spec.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = typ(flag) if isinstance(flag, str) and typ is not str else flag
        elif key in cfg:
            out[key] = typ(cfg[key])
        else:
            out[key] = default
    if args.command == "compare":
        out["reports"] = args.reports
    return out


def _require(cfg: dict, *keys):
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    for k in ("obs", "adj", "scenario", "spatial_plus"):
        if k in keys or (k in cfg and cfg.get(k)):
            if cfg.get(k) and not Path(cfg[k]).exists():
                raise UsageError(f"file not found: {cfg[k]}")


def _fail(code: int, errors: list, out: str | None = None) -> int:
    payload = {"ok": False, "exit_code": code, "errors": errors}
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text, file=sys.stderr)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "errors.json").write_text(text + "\n")
    return code


def _parse_fix(items: list[str]) -> dict:
    fixed = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--fix expects name=value, got {item!r}")
        k, v = item.split("=", 1)
        fixed[k.strip()] = float(v)
    return fixed


def _model_spec(cfg: dict):
    from .inference.model import ModelSpec

    if cfg.get("rsr") and cfg.get("spatial_plus"):
        raise UsageError("--rsr and --spatial-plus are mutually exclusive")
    confounding, pattern = "base", None
    if cfg.get("rsr"):
        confounding = "rsr"
    if cfg.get("spatial_plus"):
        confounding = "spatial_plus"
        pattern = bio.read_pattern(cfg["spatial_plus"])
    return ModelSpec(
        likelihoods=tuple(cfg["likelihoods"]),
        family=cfg["model"],
        confounding=confounding,
        pattern=pattern,
        rescale=not cfg.get("no_rescale", False),
        scaled=False if cfg.get("unscaled") else None,
        intercepts=cfg.get("intercepts"),
        constraints=cfg.get("constraints"),
        wishart_df=cfg.get("wishart_df"),
        pc_lambda=cfg.get("pc_lambda", 4.0),
        fixed=_parse_fix(cfg.get("fix") or []),
        label=cfg.get("label"),
    )


# -- subcommands ---------------------------------------------------------------


def cmd_fit(cfg: dict) -> int:
    from .inference import fit
    from .inference.mcmc import mcmc_fit
    from .inference.model import ModelError, NumericalError

    _require(cfg, "obs", "adj", "out")
    out = Path(cfg["out"])
    try:
        data, _ = bio.load_dataset(cfg["obs"], cfg["adj"], cfg.get("outcomes"))
    except bio.DataError as exc:
        return _fail(EXIT_VALIDATION, [f.to_dict() for f in exc.findings], cfg["out"])
    try:
        spec = _model_spec(cfg)
    except (ModelError, UsageError, ValueError, KeyError, OSError) as exc:
        return _fail(EXIT_VALIDATION, [{"code": "spec", "message": str(exc)}], cfg["out"])
    threads = 1 if cfg["bit_reproducible"] else max(1, cfg["threads"])
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            res = fit(spec, data, seed=cfg["seed"], draws=cfg["draws"], workers=threads, grid=not cfg["no_grid"])
    except (ModelError, PriorError, LevelMapError, GraphError) as exc:
        return _fail(EXIT_VALIDATION, [{"code": "spec", "message": str(exc)}], cfg["out"])
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERICAL, [{"code": "numerical", "message": str(exc)}], cfg["out"])

    out.mkdir(parents=True, exist_ok=True)
    digest = data.digest()
    rep = bio.fit_report(res, digest, include_timings=not cfg["bit_reproducible"])
    rep["warnings"] = sorted({str(w.message) for w in caught})
    _write_fit_outputs(res, rep, out, "")
    code = EXIT_OK if res.convergence.ok else EXIT_UNCONVERGED

    if cfg["oracle"]:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            orc = mcmc_fit(
                spec,
                data,
                iters=cfg["oracle_iters"],
                chains=cfg["oracle_chains"],
                seed=cfg["seed"],
                workers=threads,
                draws=cfg["draws"],
            )
        orep = bio.fit_report(orc, digest, include_timings=not cfg["bit_reproducible"])
        orep["warnings"] = sorted({str(w.message) for w in caught})
        _write_fit_outputs(orc, orep, out, "oracle_")
        _write_deltas(rep, orep, out / "deltas.csv")
        if not orc.convergence.ok:
            code = EXIT_UNCONVERGED
    print(f"wrote {out}/report.json (WAIC {res.criteria.waic:.3f})")
    return code


def _write_fit_outputs(res, rep: dict, out: Path, prefix: str) -> None:
    bio.write_report(rep, out / f"{prefix}report.json")
    bio.write_fixed_effects_csv(rep, out / f"{prefix}fixed_effects.csv")
    bio.write_hyper_csv(rep, out / f"{prefix}hyperparameters.csv")
    bio.write_z_csv(rep, res.model.data.outcome_names, out / f"{prefix}z_means.csv")
    bio.write_yhat_csv(res, out / f"{prefix}yhat.csv")
    table = bio.criteria_table([rep], sort=False)
    (out / f"{prefix}criteria.csv").write_text(table.to_csv())
    (out / f"{prefix}criteria.txt").write_text(table.to_text())


def _write_deltas(rep: dict, orep: dict, path: Path) -> None:
    rows = []
    for a, b in zip(rep["fixed_effects"], orep["fixed_effects"]):
        sd = b["sd"] or float("nan")
        rows.append([a["effect"], a["outcome"], "mean", a["mean"] - b["mean"], (a["mean"] - b["mean"]) / sd])
        rows.append([a["effect"], a["outcome"], "sd", a["sd"] - b["sd"], (a["sd"] - b["sd"]) / sd])
    for nm in sorted(rep["hyperparameters"]):
        if nm not in orep["hyperparameters"]:
            continue
        a, b = rep["hyperparameters"][nm], orep["hyperparameters"][nm]
        sd = b["sd"] or float("nan")
        rows.append([nm, "", "median", a["median"] - b["median"], (a["median"] - b["median"]) / sd])
    bio._write_csv(path, ["quantity", "outcome", "summary", "engine_minus_oracle", "in_oracle_sds"], rows)


def cmd_deconfound(cfg: dict) -> int:
    _require(cfg, "obs", "adj", "out")
    try:
        data, _ = bio.load_dataset(cfg["obs"], cfg["adj"], cfg.get("outcomes"))
        cov = aggregate(data.X, data.lmap, data.covariate_names)
    except bio.DataError as exc:
        return _fail(EXIT_VALIDATION, [f.to_dict() for f in exc.findings])
    except LevelMapError as exc:
        return _fail(EXIT_VALIDATION, [{"code": "empty_area", "message": str(exc)}])
    g = data.graph
    eig = eigendecompose(g)
    caps = cfg["caps"]
    if caps is not None and len(caps) != g.G:
        return _fail(EXIT_VALIDATION, [{"code": "caps", "message": f"need {g.G} caps, got {len(caps)}"}])
    if cfg["method"] == "moran":
        pat = search_moran_minimal(cov, g, eig, cfg["threshold"], caps)
    else:
        from .inference.model import ModelSpec

        spec = ModelSpec(likelihoods=tuple(cfg["likelihoods"]), family=cfg["model"])
        caps = caps or tuple(min(3, c) for c in default_caps(g))
        score = waic_scorer(spec, data, seed=cfg["seed"])
        res = search_waic_optimal(score, cov.names, caps, budget=cfg["budget"], workers=cfg["threads"])
        pat = RemovalPattern(counts=res.pattern.counts, flags=("budget exhausted",) if res.exhausted else ())
        print(f"WAIC {res.waic:.3f} after {res.evaluations} fits")
    bio.write_pattern(pat, cfg["out"])
    if cfg.get("design"):
        Xd = deconfounded_design(cov, data.lmap, eig, pat)
        areas = [data.lmap.area_labels[i] for i in data.lmap.area_index]
        bio.write_observations(
            cfg["design"],
            obs_ids=list(data.obs_ids or range(data.N)),
            areas=areas,
            X=Xd,
            covariate_names=data.covariate_names,
            Y=data.Y,
            outcome_names=data.outcome_names,
        )
    for nm in cov.names:
        print(f"{nm}: K = {list(pat.counts[nm])}")
    return EXIT_OK


def cmd_moran(cfg: dict) -> int:
    _require(cfg, "obs", "adj")
    try:
        data, _ = bio.load_dataset(cfg["obs"], cfg["adj"], cfg.get("outcomes"))
        cov = aggregate(data.X, data.lmap, data.covariate_names)
    except bio.DataError as exc:
        return _fail(EXIT_VALIDATION, [f.to_dict() for f in exc.findings])
    except LevelMapError as exc:
        return _fail(EXIT_VALIDATION, [{"code": "empty_area", "message": str(exc)}])
    g = data.graph
    series = {nm: cov.Xbar[:, m] for m, nm in enumerate(cov.names)}
    if cfg.get("pattern"):
        from .deconfound import decompose_covariate

        pat = bio.read_pattern(cfg["pattern"])
        eig = eigendecompose(g)
        series = {
            nm: decompose_covariate(cov.Xbar[:, m], eig, pat.row(nm, g.G))[0] for m, nm in enumerate(cov.names)
        }
    rows = []
    for nm, x in series.items():
        try:
            r = moran_i(x, g)
            rows.append([nm, r.I, r.E0, r.V0, r.I_std])
        except ValueError:
            rows.append([nm, float("nan")] * 1 + [float("nan")] * 3)
    width = max(len(r[0]) for r in rows)
    print(f"{'covariate'.ljust(width)}  {'I':>9}  {'E0':>9}  {'V0':>9}  {'I_std':>9}")
    for r in rows:
        print(f"{r[0].ljust(width)}  " + "  ".join(f"{v:9.4f}" for v in r[1:]))
    if cfg.get("out"):
        bio._write_csv(cfg["out"], ["covariate", "I", "E0", "V0", "I_std"], rows)
    return EXIT_OK


def cmd_simulate(cfg: dict) -> int:
    from .simulate import ScenarioError, generate, read_scenario, replicate_seeds, with_seed

    _require(cfg, "scenario", "out")
    try:
        sc = read_scenario(cfg["scenario"])
    except ScenarioError as exc:
        return _fail(EXIT_VALIDATION, [{"code": "scenario", "message": str(exc)}])
    base = Path(cfg["scenario"]).parent
    out = Path(cfg["out"])
    n = cfg["replicates"]
    seeds = [sc.seed] if n == 1 else replicate_seeds(sc.seed, n)
    for r, s in enumerate(seeds):
        dest = out if n == 1 else out / f"rep{r:03d}"
        paths = generate(with_seed(sc, s), base).write(dest)
        print(f"wrote {paths['observations']}")
    return EXIT_OK


def cmd_compare(cfg: dict) -> int:
    reports = cfg["reports"]
    if len(reports) < 2:
        return _fail(EXIT_VALIDATION, [{"code": "usage", "message": "compare needs at least two reports"}])
    try:
        reps = [bio.read_report(p) for p in reports]
    except (OSError, ValueError) as exc:
        return _fail(EXIT_VALIDATION, [{"code": "report", "message": str(exc)}])
    digests = {r["dataset"] for r in reps}
    if len(digests) > 1:
        return _fail(
            EXIT_VALIDATION,
            [{"code": "dataset_mismatch", "message": f"reports come from different datasets: {sorted(digests)}"}],
        )
    table = bio.criteria_table(reps)
    sys.stdout.write(table.to_text())
    if cfg.get("out"):
        Path(cfg["out"]).write_text(table.to_csv())
    return EXIT_OK


def cmd_validate(cfg: dict) -> int:
    _require(cfg, "obs", "adj")
    rep = bio.validate_dataset(cfg["obs"], cfg["adj"], cfg.get("outcomes"))
    print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK if rep.ok else EXIT_VALIDATION


COMMANDS = {
    "fit": cmd_fit,
    "deconfound": cmd_deconfound,
    "moran": cmd_moran,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "validate": cmd_validate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        return _fail(EXIT_VALIDATION, [{"code": "usage", "message": str(exc)}])
    except FileNotFoundError as exc:
        return _fail(EXIT_VALIDATION, [{"code": "io", "message": str(exc)}])


if __name__ == "__main__":
    sys.exit(main())
