"""Dataset ingestion and validation, fit reports, and table writers.

Observation files are CSV with columns ``obs_id``, ``area``, the covariates
and the outcomes. Optional leading comment lines declare covariate kinds
and outcome columns::

    # kinds: x1=dummy,x2=proportion
    # outcomes: y_math,y_ital

Without an ``outcomes`` line, columns whose name starts with ``y_`` are
outcomes. Empty outcome cells (or ``NA``) are missing values; such rows get
predictions but do not enter the likelihood. Area labels are node indices of
the adjacency file.
"""
from __future__ import annotations

import configparser
import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .deconfound import RemovalPattern
from .graph import AreaGraph, GraphError, read_adjacency
from .multilevel import levelmap_from_graph

REPORT_SCHEMA = "bivarcar.fit/1"
MISSING = ("", "NA", "NaN", "nan")


class DataError(ValueError):
    def __init__(self, findings: list):
        self.findings = findings
        first = findings[0].message if findings else "invalid data"
        super().__init__(f"{len(findings)} validation finding(s); first: {first}")


def _fmt(v: float) -> str:
    """Shortest round-tripping text for a float."""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return ""
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


# -- observations ----------------------------------------------------------------


def write_observations(
    path,
    obs_ids: Sequence,
    areas: Sequence,
    X: np.ndarray,
    covariate_names: Sequence[str],
    Y: np.ndarray,
    outcome_names: Sequence[str],
    kinds: dict | None = None,
) -> None:
    buf = io.StringIO()
    if kinds:
        buf.write("# kinds: " + ",".join(f"{k}={v}" for k, v in kinds.items()) + "\n")
    buf.write("# outcomes: " + ",".join(outcome_names) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["obs_id", "area", *covariate_names, *outcome_names])
    X = np.asarray(X, dtype=float).reshape(len(obs_ids), -1)
    Y = np.asarray(Y, dtype=float).reshape(len(obs_ids), -1)
    for i, (oid, a) in enumerate(zip(obs_ids, areas)):
        w.writerow([oid, a, *(_fmt(v) for v in X[i]), *(_fmt(v) for v in Y[i])])
    Path(path).write_text(buf.getvalue())


@dataclass
class ObservationTable:
    obs_ids: list
    areas: list
    X: np.ndarray
    covariate_names: tuple
    Y: np.ndarray
    outcome_names: tuple
    kinds: dict


@dataclass(frozen=True)
class Finding:
    code: str
    message: str
    row: int | None = None
    column: str | None = None

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "row": self.row, "column": self.column}


def _parse_header(lines: list[str]) -> tuple[dict, list | None, int]:
    kinds, outcomes = {}, None
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        body = lines[i][1:].strip()
        key, _, val = body.partition(":")
        key = key.strip().lower()
        if key == "kinds":
            for item in val.split(","):
                if "=" in item:
                    k, v = item.split("=", 1)
                    kinds[k.strip()] = v.strip()
        elif key == "outcomes":
            outcomes = [v.strip() for v in val.split(",") if v.strip()]
        i += 1
    return kinds, outcomes, i


def read_observations(path, outcomes: Sequence[str] | None = None) -> tuple[ObservationTable, list]:
    """Parse an observation file; return the table and a list of findings."""
    findings: list[Finding] = []
    text = Path(path).read_text()
    lines = text.splitlines()
    kinds, declared, skip = _parse_header(lines)
    rows = list(csv.reader(lines[skip:]))
    if not rows:
        raise DataError([Finding("empty", f"{path}: no header row")])
    header = [h.strip() for h in rows[0]]
    for need in ("obs_id", "area"):
        if need not in header:
            findings.append(Finding("schema", f"missing required column {need!r}", column=need))
    if findings:
        raise DataError(findings)
    if outcomes is None:
        outcomes = declared or [h for h in header if h.startswith("y_")]
    missing_out = [o for o in outcomes if o not in header]
    if missing_out or not outcomes:
        raise DataError([Finding("schema", f"outcome columns not found: {missing_out or 'none declared'}")])
    covs = [h for h in header if h not in ("obs_id", "area") and h not in outcomes]
    col = {h: j for j, h in enumerate(header)}
    obs_ids, areas, X, Y = [], [], [], []
    seen = set()
    for r, row in enumerate(rows[1:], start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            findings.append(Finding("schema", f"expected {len(header)} fields, got {len(row)}", row=r))
            continue
        oid = row[col["obs_id"]].strip()
        if oid in seen:
            findings.append(Finding("duplicate_id", f"duplicate obs_id {oid!r}", row=r, column="obs_id"))
        seen.add(oid)
        xr = []
        for c in covs:
            v = row[col[c]].strip()
            try:
                x = float(v)
                if not math.isfinite(x):
                    raise ValueError
            except ValueError:
                findings.append(Finding("not_numeric", f"covariate {c} = {v!r} is not a finite number", row=r, column=c))
                x = math.nan
            xr.append(x)
        yr = []
        for o in outcomes:
            v = row[col[o]].strip()
            if v in MISSING:
                yr.append(math.nan)
                continue
            try:
                y = float(v)
                if not math.isfinite(y):
                    raise ValueError
            except ValueError:
                findings.append(Finding("not_numeric", f"outcome {o} = {v!r} is not a number", row=r, column=o))
                y = math.nan
            yr.append(y)
        obs_ids.append(oid)
        areas.append(row[col["area"]].strip())
        X.append(xr)
        Y.append(yr)
    table = ObservationTable(
        obs_ids=obs_ids,
        areas=areas,
        X=np.array(X, dtype=float).reshape(len(obs_ids), len(covs)),
        covariate_names=tuple(covs),
        Y=np.array(Y, dtype=float).reshape(len(obs_ids), len(outcomes)),
        outcome_names=tuple(outcomes),
        kinds=kinds,
    )
    return table, findings


def _range_findings(table: ObservationTable) -> list:
    out = []
    for m, name in enumerate(table.covariate_names):
        kind = table.kinds.get(name)
        col = table.X[:, m]
        for r, v in enumerate(col, start=1):
            if not math.isfinite(v):
                continue
            if kind == "dummy" and v not in (0.0, 1.0):
                out.append(Finding("range", f"dummy {name} = {_fmt(v)} is not 0 or 1", row=r, column=name))
            elif kind == "proportion" and not 0.0 <= v <= 1.0:
                out.append(Finding("range", f"proportion {name} = {_fmt(v)} outside [0, 1]", row=r, column=name))
        if kind not in (None, "dummy", "proportion", "normal", "continuous"):
            out.append(Finding("schema", f"unknown covariate kind {kind!r}", column=name))
    return out


def _area_findings(table: ObservationTable, g: AreaGraph) -> tuple[list, np.ndarray | None]:
    out = []
    idx = []
    for r, a in enumerate(table.areas, start=1):
        try:
            i = int(a)
        except ValueError:
            out.append(Finding("unknown_area", f"area {a!r} is not a node of the adjacency", row=r, column="area"))
            continue
        if not 0 <= i < g.n:
            out.append(Finding("unknown_area", f"area {a!r} is not a node of the adjacency (n={g.n})", row=r, column="area"))
            continue
        idx.append(i)
    return out, (np.array(idx, dtype=int) if not out else None)


@dataclass
class ValidationReport:
    findings: list
    n_obs: int = 0
    n_areas: int = 0
    area_counts: list = field(default_factory=list)
    component_sizes: list = field(default_factory=list)
    empty_areas: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "findings": [f.to_dict() for f in self.findings],
            "n_obs": self.n_obs,
            "n_areas": self.n_areas,
            "area_counts": self.area_counts,
            "component_sizes": self.component_sizes,
            "empty_areas": self.empty_areas,
        }


def validate_dataset(obs_path, adj_path, outcomes: Sequence[str] | None = None) -> ValidationReport:
    """Collect every problem with an observation/adjacency pair; never raises."""
    findings: list = []
    g = None
    try:
        g = read_adjacency(adj_path)
    except (OSError, GraphError, ValueError) as exc:
        findings.append(Finding("adjacency", f"cannot read adjacency: {exc}"))
    try:
        table, f = read_observations(obs_path, outcomes)
        findings.extend(f)
    except DataError as exc:
        return ValidationReport(findings=findings + exc.findings)
    except OSError as exc:
        return ValidationReport(findings=findings + [Finding("io", f"cannot read observations: {exc}")])
    findings.extend(_range_findings(table))
    rep = ValidationReport(findings=findings, n_obs=len(table.obs_ids))
    if g is not None:
        af, idx = _area_findings(table, g)
        findings.extend(af)
        rep.n_areas = g.n
        rep.component_sizes = [int(s) for s in g.component_sizes]
        if idx is not None:
            counts = np.bincount(idx, minlength=g.n)
            rep.area_counts = [int(c) for c in counts]
            rep.empty_areas = [int(i) for i in np.flatnonzero(counts == 0)]
    return rep


def load_dataset(obs_path, adj_path, outcomes: Sequence[str] | None = None):
    """Read and validate; raise :class:`DataError` listing all findings."""
    from .inference.model import Dataset

    rep = validate_dataset(obs_path, adj_path, outcomes)
    if not rep.ok:
        raise DataError(rep.findings)
    g = read_adjacency(adj_path)
    table, _ = read_observations(obs_path, outcomes)
    idx = [int(a) for a in table.areas]
    ds = Dataset(
        graph=g,
        lmap=levelmap_from_graph(idx, g),
        X=table.X,
        Y=table.Y,
        covariate_names=table.covariate_names,
        outcome_names=table.outcome_names,
        obs_ids=tuple(table.obs_ids),
    )
    return ds, table


# -- removal patterns --------------------------------------------------------------


def pattern_to_dict(p: RemovalPattern) -> dict:
    out = {"counts": {k: list(map(int, v)) for k, v in sorted(p.counts.items())}}
    if p.explicit:
        out["explicit"] = {f"{k[0]}@{k[1]}": list(map(int, v)) for k, v in sorted(p.explicit.items())}
    if p.achieved:
        out["achieved_I_std"] = {k: float(v) for k, v in sorted(p.achieved.items())}
    if p.flags:
        out["flags"] = list(p.flags)
    return out


def pattern_from_dict(d: dict) -> RemovalPattern:
    counts = {k: tuple(int(x) for x in v) for k, v in d["counts"].items()}
    explicit = {}
    for key, v in d.get("explicit", {}).items():
        name, _, c = key.rpartition("@")
        explicit[(name, int(c))] = tuple(int(x) for x in v)
    return RemovalPattern(counts=counts, explicit=explicit)


def write_pattern(p: RemovalPattern, path) -> None:
    Path(path).write_text(json.dumps(pattern_to_dict(p), indent=2, sort_keys=True) + "\n")


def read_pattern(path) -> RemovalPattern:
    return pattern_from_dict(json.loads(Path(path).read_text()))


# -- fit reports ---------------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def fit_report(fit, digest: str, include_timings: bool = True) -> dict:
    model = fit.model
    labels = fit.latent_labels
    fixed = []
    for i in range(model.off_z):
        block, lab, outcome = labels[i]
        s = fit.latent_summary(i)
        fixed.append({"block": block, "effect": lab, "outcome": outcome, **s.to_dict()})
    hyper = {}
    for nm, s in fit.hyper.items():
        hyper[nm] = {"lb": s.q05, "median": s.q50, "ub": s.q95, "mean": s.mean, "sd": s.sd}
    z = fit.z_mean()
    areas = model.data.lmap.area_labels
    comps = model.data.graph.components
    z_rows = [
        {"area": a, "component": int(comps[i]), **{o: z[i, j] for j, o in enumerate(model.data.outcome_names)}}
        for i, a in enumerate(areas)
    ]
    rep = {
        "schema": REPORT_SCHEMA,
        "dataset": digest,
        "method": fit.method,
        "spec": fit.spec.to_dict(),
        "label": fit.spec.describe(),
        "n_obs": int(model.n_obs),
        "fixed_effects": fixed,
        "hyperparameters": hyper,
        "criteria": fit.criteria.to_dict(),
        "convergence": fit.convergence.to_dict(),
        "constraint_residual": fit.constraint_residual(),
        "z_means": z_rows,
        "grid": [
            {"z": p.z.tolist(), "internal": p.free.tolist(), "log_post": p.log_post, "weight": p.weight}
            for p in fit.grid
        ],
    }
    if fit.method == "mcmc":
        rep["mcmc"] = {
            "max_rhat": fit.extra["max_rhat"],
            "rhat": fit.extra["rhat"],
            "ess": fit.extra["ess"],
            "chains": fit.extra["chains"],
            "iters": fit.extra["iters"],
            "warmup": fit.extra["warmup"],
        }
    if include_timings:
        rep["timings"] = fit.timings
    return _clean(rep)


def dumps_report(rep: dict) -> str:
    return json.dumps(rep, indent=2, sort_keys=True) + "\n"


def write_report(rep: dict, path) -> None:
    Path(path).write_text(dumps_report(rep))


def read_report(path) -> dict:
    rep = json.loads(Path(path).read_text())
    if rep.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"{path}: not a fit report")
    return rep


def _write_csv(path, header: list, rows: list) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    Path(path).write_text(buf.getvalue())


def write_fixed_effects_csv(rep: dict, path) -> None:
    rows = [
        [f["block"], f["effect"], f["outcome"], f["mean"], f["sd"], f["q05"], f["q95"]]
        for f in rep["fixed_effects"]
    ]
    _write_csv(path, ["block", "effect", "outcome", "mean", "sd", "q05", "q95"], rows)


def write_hyper_csv(rep: dict, path) -> None:
    rows = [[nm, h["lb"], h["median"], h["ub"], h["sd"]] for nm, h in sorted(rep["hyperparameters"].items())]
    _write_csv(path, ["parameter", "lb", "median", "ub", "sd"], rows)


def write_z_csv(rep: dict, outcome_names: Sequence[str], path) -> None:
    rows = [[r["area"], r["component"], *(r[o] for o in outcome_names)] for r in rep["z_means"]]
    _write_csv(path, ["area", "component", *(f"z_{o}" for o in outcome_names)], rows)


def write_yhat_csv(fit, path) -> None:
    data = fit.model.data
    ids = data.obs_ids or tuple(range(data.N))
    areas = [data.lmap.area_labels[i] for i in data.lmap.area_index]
    rows = [[oid, a, *map(float, fit.yhat[r])] for r, (oid, a) in enumerate(zip(ids, areas))]
    _write_csv(path, ["obs_id", "area", *(f"yhat_{o}" for o in data.outcome_names)], rows)


# -- criteria tables -------------------------------------------------------------------

CRITERIA_COLUMNS = ("neg_lpml", "waic", "dic", "mse", "expected_deviance", "p_d")
CRITERIA_HEADERS = ("-LPML", "WAIC", "DIC", "MSE", "Exp.Dev.", "P_D")
_BEST_BY_MIN = ("neg_lpml", "waic", "dic", "mse", "expected_deviance")


@dataclass
class CriteriaTable:
    rows: list  # dicts with "model", criteria columns, optional "time"
    best: dict  # column -> set of row indices
    ties: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["model", *CRITERIA_COLUMNS, "time"]
        w.writerow(cols + ["best"])
        for i, r in enumerate(self.rows):
            best = ";".join(c for c in CRITERIA_COLUMNS if i in self.best.get(c, ()))
            w.writerow([r["model"], *(_fmt(r[c]) if r.get(c) is not None else "" for c in cols[1:]), best])
        return buf.getvalue()

    def to_text(self) -> str:
        head = ["Model", *CRITERIA_HEADERS, "Time(s)"]
        body = []
        for i, r in enumerate(self.rows):
            cells = [str(r["model"])]
            for c in CRITERIA_COLUMNS:
                v = r.get(c)
                mark = "*" if i in self.best.get(c, ()) else " "
                cells.append("" if v is None else f"{v:.3f}{mark}")
            t = r.get("time")
            cells.append("" if t is None else f"{t:.1f}")
            body.append(cells)
        widths = [max(len(x[j]) for x in [head] + body) for j in range(len(head))]
        lines = ["  ".join(h.ljust(w) if j == 0 else h.rjust(w) for j, (h, w) in enumerate(zip(head, widths)))]
        for cells in body:
            lines.append("  ".join(c.ljust(w) if j == 0 else c.rjust(w) for j, (c, w) in enumerate(zip(cells, widths))))
        if self.ties:
            lines.append("ties: " + "; ".join(self.ties))
        lines.append("* best value in column")
        return "\n".join(lines) + "\n"


def criteria_table(reports: Sequence[dict], sort: bool = True) -> CriteriaTable:
    rows = []
    for rep in reports:
        c = rep["criteria"]
        row = {"model": rep.get("label", rep["spec"].get("label", "?"))}
        for col in CRITERIA_COLUMNS:
            row[col] = c.get(col)
        row["time"] = rep.get("timings", {}).get("total")
        rows.append(row)
    if sort:
        rows.sort(key=lambda r: (r["waic"] is None, r["waic"] if r["waic"] is not None else 0.0))
    best = {}
    ties = []
    for col in _BEST_BY_MIN:
        vals = [(r[col], i) for i, r in enumerate(rows) if r[col] is not None]
        if not vals:
            continue
        m = min(v for v, _ in vals)
        winners = {i for v, i in vals if v == m}
        best[col] = winners
        if len(winners) > 1:
            ties.append(f"{col}: " + ", ".join(rows[i]["model"] for i in sorted(winners)))
    return CriteriaTable(rows=rows, best=best, ties=ties)


# -- configuration -----------------------------------------------------------------------


def read_config(path, section: str) -> dict:
    """Key/value settings from an INI file section (keys use underscores)."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(f"cannot read config file {path}")
    if section not in cp:
        return {}
    return {k.replace("-", "_"): v for k, v in cp[section].items()}
