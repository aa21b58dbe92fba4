"""Configuration ingestion, pipeline orchestration and the command-line
interface: analyze / solve / verify / examples.

Config files are flat `key = value` text with `[section]` headers; expression
values are quoted strings in the input grammar. Expressions may reference
aliases declared in [aliases]; every alias also gets derived symbols for its
first and second partials (alias p over variable v yields p_v, p_vv, ...).

Exit codes: 0 success, 1 configuration or parse error, 2 unclassified case,
3 non-constant rank, 4 trivial case with nonconstant data, 5 integration
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, fields

import numpy as np

from . import fixtures as fixture_registry
from .expr import Expr, ParseError, EvalDomainError, differentiate, evaluate_array, parse_expr, simplify, substitute, to_text
from .geometry import (
    ChartError,
    GeometryError,
    RiemannChart,
    Tolerances,
    build_chart,
    build_connection,
    check_flat_symmetric,
    env_from_points,
    make_frame,
)
from .analysis import (
    CaseReport,
    ClassificationError,
    LambdaSystem,
    ReducedSystem,
    ReductionError,
    TrivialReduction,
    build_lambda_system,
    check_darboux_compat,
    check_frobenius_compat,
    classify_case,
    reduce_IIa,
    reduce_IIb,
    reduce_rich,
)
from .solver import (
    Grid,
    InitialData,
    IntegrationError,
    SolutionField,
    integrate_IIb,
    integrate_darboux,
    integrate_frobenius,
    make_grid,
    reconstruct_flux,
    verify,
    write_csv,
)


class ConfigError(Exception):
    pass


class TrivialDataError(Exception):
    """Nonconstant initial data requested for a case with only trivial solutions."""


EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_UNCLASSIFIED = 2
EXIT_NONCONSTANT_RANK = 3
EXIT_TRIVIAL_DATA = 4
EXIT_INTEGRATION = 5


# ---------------------------------------------------------------------------
# config format

def _parse_value(raw, path, lineno):
    raw = raw.strip()
    if raw.startswith('"'):
        if not raw.endswith('"') or len(raw) < 2:
            raise ConfigError(f"{path}:{lineno}: unterminated string")
        return raw[1:-1]
    parts = [p.strip() for p in raw.split(",")]
    vals = []
    for p in parts:
        if not p:
            raise ConfigError(f"{path}:{lineno}: empty list entry")
        try:
            vals.append(int(p))
        except ValueError:
            try:
                vals.append(float(p))
            except ValueError:
                vals.append(p)
    return vals[0] if len(vals) == 1 else vals


def read_config_text(text, path="<config>"):
    """Sectioned key = value dictionary with line diagnostics."""
    sections: dict[str, dict] = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"{path}:{lineno}: malformed section header")
            current = stripped[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        if current is None:
            raise ConfigError(f"{path}:{lineno}: key outside any [section]")
        key, raw = stripped.split("=", 1)
        sections[current][key.strip()] = (_parse_value(raw, path, lineno), lineno)
    return sections


@dataclass
class JobConfig:
    name: str
    vars: tuple
    frame_text: tuple                 # n x n strings, entry [m][j]
    domain: tuple
    base: tuple
    aliases: dict = field(default_factory=dict)       # name -> expression string
    chart: dict | None = None         # w_vars, rho, rho_inv, w_domain, w_base
    resolution: tuple | None = None
    grid_box: dict = field(default_factory=dict)      # per-var solve-box override
    initial: dict = field(default_factory=dict)       # raw strings/numbers + kind
    tol_overrides: dict = field(default_factory=dict)
    seed: int = 0
    out_dir: str = "."

    @property
    def n(self):
        return len(self.vars)

    def tolerances(self):
        t = Tolerances(seed=self.seed)
        return t.override(self.tol_overrides) if self.tol_overrides else t

    def effective_text(self):
        """Canonical config text; reparses to an equivalent JobConfig."""
        out = ["[problem]", f"name = {self.name}",
               "vars = " + ", ".join(self.vars)]
        if self.aliases:
            out.append("[aliases]")
            for k, v in self.aliases.items():
                out.append(f'{k} = "{v}"')
        out.append("[frame]")
        for j in range(self.n):
            for m in range(self.n):
                out.append(f'R_{m + 1}_{j + 1} = "{self.frame_text[m][j]}"')
        out.append("[domain]")
        for nm, (lo, hi) in zip(self.vars, self.domain):
            out.append(f"{nm} = {lo!r}, {hi!r}")
        out.append("[base]")
        for nm, b in zip(self.vars, self.base):
            out.append(f"{nm} = {b!r}")
        if self.chart:
            ch = self.chart
            out.append("[chart]")
            out.append("w_vars = " + ", ".join(ch["w_vars"]))
            for i, e in enumerate(ch["rho"], start=1):
                out.append(f'rho_{i} = "{e}"')
            for i, e in enumerate(ch["rho_inv"], start=1):
                out.append(f'rho_inv_{i} = "{e}"')
            out.append("[w_domain]")
            for nm, (lo, hi) in zip(ch["w_vars"], ch["w_domain"]):
                out.append(f"{nm} = {lo!r}, {hi!r}")
            out.append("[w_base]")
            for nm, b in zip(ch["w_vars"], ch["w_base"]):
                out.append(f"{nm} = {b!r}")
        if self.resolution or self.grid_box:
            out.append("[grid]")
            if self.resolution:
                out.append("resolution = " + ", ".join(str(r) for r in self.resolution))
            for nm, (lo, hi) in self.grid_box.items():
                out.append(f"{nm} = {lo!r}, {hi!r}")
        if self.initial:
            out.append("[initial_data]")
            for k, v in self.initial.items():
                out.append(f'{k} = "{v}"' if isinstance(v, str) else f"{k} = {v!r}")
        if self.tol_overrides:
            out.append("[tolerances]")
            for k, v in self.tol_overrides.items():
                out.append(f"{k} = {v!r}")
        out.append("[rng]")
        out.append(f"seed = {self.seed}")
        return "\n".join(out) + "\n"


def _get(sections, sec, key, path, default=KeyError):
    try:
        return sections[sec][key][0]
    except KeyError:
        if default is KeyError:
            raise ConfigError(f"{path}: missing {key!r} in section [{sec}]") from None
        return default


def _aslist(v):
    return v if isinstance(v, list) else [v]


def load_config(path) -> JobConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text, path)


def parse_config(text, path="<config>") -> JobConfig:
    sec = read_config_text(text, path)
    if "problem" not in sec:
        raise ConfigError(f"{path}: missing [problem] section")
    names = tuple(str(v) for v in _aslist(_get(sec, "problem", "vars", path)))
    n = int(_get(sec, "problem", "n", path, len(names)))
    if n != len(names):
        raise ConfigError(f"{path}: n = {n} does not match {len(names)} variable names")
    name = str(_get(sec, "problem", "name", path, "job"))

    aliases = {}
    for key, (val, lineno) in sec.get("aliases", {}).items():
        if not isinstance(val, str):
            raise ConfigError(f"{path}:{lineno}: alias {key!r} must be a quoted expression")
        aliases[key] = val

    if "frame" not in sec:
        raise ConfigError(f"{path}: missing [frame] section")
    frame_text = []
    for m in range(n):
        row = []
        for j in range(n):
            key = f"R_{m + 1}_{j + 1}"
            val = _get(sec, "frame", key, path)
            if not isinstance(val, str):
                raise ConfigError(f"{path}: frame entry {key} must be a quoted expression")
            row.append(val)
        frame_text.append(tuple(row))

    def read_box(section_name, var_names):
        box = []
        for nm in var_names:
            v = _get(sec, section_name, nm, path)
            v = _aslist(v)
            if len(v) != 2:
                raise ConfigError(f"{path}: [{section_name}] {nm} needs two numbers")
            box.append((float(v[0]), float(v[1])))
        return tuple(box)

    def read_point(section_name, var_names):
        return tuple(float(_get(sec, section_name, nm, path)) for nm in var_names)

    domain = read_box("domain", names)
    base = read_point("base", names)

    chart = None
    if "chart" in sec:
        w_vars = tuple(str(v) for v in _aslist(_get(sec, "chart", "w_vars", path)))
        rho = tuple(str(_get(sec, "chart", f"rho_{i + 1}", path)) for i in range(n))
        rho_inv = tuple(str(_get(sec, "chart", f"rho_inv_{i + 1}", path)) for i in range(n))
        chart = {
            "w_vars": w_vars,
            "rho": rho,
            "rho_inv": rho_inv,
            "w_domain": read_box("w_domain", w_vars),
            "w_base": read_point("w_base", w_vars),
        }

    resolution = None
    grid_box = {}
    if "grid" in sec:
        res = _get(sec, "grid", "resolution", path, None)
        if res is not None:
            resolution = tuple(int(r) for r in _aslist(res))
        axis_names = chart["w_vars"] if chart else names
        for key, (val, lineno) in sec["grid"].items():
            if key == "resolution":
                continue
            if key not in axis_names:
                raise ConfigError(f"{path}:{lineno}: [grid] key {key!r} is not an axis name")
            v = _aslist(val)
            grid_box[key] = (float(v[0]), float(v[1]))

    initial = {}
    for key, (val, _) in sec.get("initial_data", {}).items():
        initial[key] = val

    tol_overrides = {}
    valid_tols = {f.name for f in fields(Tolerances)}
    for key, (val, lineno) in sec.get("tolerances", {}).items():
        if key not in valid_tols:
            raise ConfigError(f"{path}:{lineno}: unknown tolerance {key!r}")
        tol_overrides[key] = int(val) if key in ("seed", "samples") else float(val)

    seed = int(_get(sec, "rng", "seed", path, 0))
    out_dir = str(_get(sec, "output", "dir", path, "."))

    job = JobConfig(name, names, tuple(frame_text), domain, base, aliases,
                    chart, resolution, grid_box, initial, tol_overrides, seed, out_dir)
    build_alias_table(job)   # validate alias expressions eagerly
    return job


# ---------------------------------------------------------------------------
# alias materialization

def build_alias_table(job: JobConfig) -> dict:
    """Parse aliases in declaration order and derive first and second partial
    symbols for each (p over v yields p_v, p_vv, p_vS, ...)."""
    table: dict[str, Expr] = {}
    for nm, text in job.aliases.items():
        known = list(job.vars) + list(table)
        try:
            e = substitute(parse_expr(text, known), table)
        except ParseError as err:
            raise ConfigError(f"alias {nm!r}: {err}") from None
        table[nm] = simplify(e)
        firsts = {}
        for v in job.vars:
            d = simplify(differentiate(table[nm], v))
            firsts[v] = d
            table[f"{nm}_{v}"] = d
        for v1 in job.vars:
            for v2 in job.vars:
                table[f"{nm}_{v1}{v2}"] = simplify(differentiate(firsts[v1], v2))
    return table


def parse_in_context(text, job, table, extra_vars=()):
    names = list(job.vars) + list(table) + list(extra_vars)
    return simplify(substitute(parse_expr(text, names), table))


# ---------------------------------------------------------------------------
# pipeline

@dataclass
class AnalysisBundle:
    job: JobConfig
    tols: Tolerances
    frame: object
    conn: object
    flat_report: object
    chart: RiemannChart | None
    system: LambdaSystem
    chart_system: LambdaSystem | None
    case: CaseReport
    reduced: ReducedSystem | TrivialReduction | None
    compat: object | None
    family: str


def analyze_pipeline(job: JobConfig, tols: Tolerances | None = None) -> AnalysisBundle:
    tols = tols or job.tolerances()
    table = build_alias_table(job)
    entries = [[parse_in_context(job.frame_text[m][j], job, table)
                for j in range(job.n)] for m in range(job.n)]
    frame = make_frame(job.vars, entries, job.domain, job.base, name=job.name, tols=tols)
    conn = build_connection(frame, tols)
    flat = check_flat_symmetric(conn, frame.samples(tols))
    if not flat.ok(tols.identity_tol):
        raise GeometryError(
            f"symmetry/flatness identities violated (torsion {flat.max_torsion:.3e}, "
            f"curvature {flat.max_curvature:.3e}); pipeline bug or degenerate frame"
        )

    chart = None
    if job.chart:
        ch = job.chart
        rho = [parse_in_context(t, job, table) for t in ch["rho"]]
        rho_inv = [parse_expr(t, ch["w_vars"]) for t in ch["rho_inv"]]
        chart = build_chart(frame, rho, rho_inv, ch["w_vars"],
                            ch["w_domain"], ch["w_base"], tols)

    system = build_lambda_system(conn)
    case = classify_case(system, tols)
    chart_system = build_lambda_system(conn, chart) if chart else None

    reduced = None
    compat = None
    family = case.solution_family
    if case.case_label == "N3-IIa":
        reduced = reduce_IIa(system, case, tols)
        compat = check_frobenius_compat(reduced, case.relabeled_frame.samples(tols), tols)
        verdict = "holds" if compat.holds else "fails"
        case.compat_verdict = verdict
        case.compat_residual = compat.max_residual
        family = ("2 constants" if compat.holds
                  else "trivial only: compatibility conditions fail")
    elif case.case_label == "N3-IIb":
        reduced = reduce_IIb(system, case, tols)
        if isinstance(reduced, TrivialReduction):
            family = f"trivial only: {reduced.reason}"
        else:
            family = reduced.meta["family"]
    elif case.case_label in ("Rich-Rank0", "Rich-Constrained", "MaxRank-Trivial") and chart_system is not None:
        if case.rich:
            reduced = reduce_rich(chart_system, tols)
            if isinstance(reduced, TrivialReduction):
                family = f"trivial only: {reduced.reason}"
                case.index_sets = _sets_of(reduced)
            else:
                case.index_sets = reduced.meta["sets"]
                compat = check_darboux_compat(reduced, chart.w_samples(tols), tols)
                case.compat_verdict = "holds" if compat.holds else "fails"
                case.compat_residual = compat.max_residual
                if case.case_label != "MaxRank-Trivial":
                    family = reduced.meta["family"]
    case.solution_family = family
    return AnalysisBundle(job, tols, frame, conn, flat, chart, system,
                          chart_system, case, reduced, compat, family)


def _sets_of(trivial: TrivialReduction):
    # detail strings carry "merged set (i, j, ...)" for the all-merged case
    import re

    m = re.search(r"merged set \(([^)]*)\)", trivial.detail)
    if not m:
        return ()
    return (tuple(int(x) - 1 for x in m.group(1).split(",")),)


def _solve_grid(bundle: AnalysisBundle):
    job = bundle.job
    if bundle.chart and bundle.case.rich:
        names = bundle.chart.w_vars
        box = list(bundle.chart.w_domain)
        base = bundle.chart.w_base
    else:
        names = job.vars
        box = list(job.domain)
        base = job.base
    for i, nm in enumerate(names):
        if nm in job.grid_box:
            box[i] = job.grid_box[nm]
    res = job.resolution or tuple(21 for _ in names)
    if len(res) != len(names):
        raise ConfigError("grid resolution arity does not match axis count")
    return make_grid(names, box, res, base)


def _initial_data(bundle: AnalysisBundle, kind: str) -> InitialData:
    job = bundle.job
    table = build_alias_table(job)
    raw = dict(job.initial)
    declared = raw.pop("kind", kind)
    if declared != kind:
        raise ConfigError(
            f"initial data kind {declared!r} does not match required {kind!r}")

    def const_at_base(val):
        if isinstance(val, (int, float)):
            return float(val)
        e = parse_in_context(val, job, table)
        env = {nm: np.array([b]) for nm, b in zip(job.vars, job.base)}
        return float(evaluate_array(e, env)[0])

    data = InitialData(kind)
    if kind == "frobenius":
        for key in ("lambda2", "lambda3"):
            if key not in raw:
                raise ConfigError(f"frobenius initial data needs {key}")
            data.constants[key] = const_at_base(raw[key])
    elif kind == "iib":
        if "lambda2" not in raw or "phi" not in raw:
            raise ConfigError("iib initial data needs lambda2 and phi")
        data.constants["lambda2"] = const_at_base(raw["lambda2"])
        pvar = str(raw.get("phi_var", "t"))
        data.functions["lambda1_line"] = (parse_expr(str(raw["phi"]), (pvar,)), pvar)
    elif kind == "darboux":
        red = bundle.reduced
        for j in red.meta["free"]:
            key = f"kappa{j + 1}"
            if key not in raw:
                raise ConfigError(f"darboux initial data needs function {key}")
            wname = bundle.chart.w_vars[j]
            data.functions[key] = (parse_expr(str(raw[key]), (wname,)), wname)
        for a in range(len(red.meta["sets"])):
            key = f"h{a + 1}"
            if key not in raw:
                raise ConfigError(f"darboux initial data needs constant {key}")
            data.constants[key] = const_at_base(raw[key])
    elif kind == "trivial":
        data.constants["value"] = const_at_base(raw.get("value", 0.0))
        for key, val in raw.items():
            if key != "value" and isinstance(val, str):
                raise TrivialDataError(
                    f"case admits only trivial solutions but data declares function {key!r}")
    return data


def solve_pipeline(bundle: AnalysisBundle) -> SolutionField:
    case = bundle.case
    tols = bundle.tols
    grid = _solve_grid(bundle)
    label = case.case_label
    trivial_only = isinstance(bundle.reduced, TrivialReduction) or label == "MaxRank-Trivial" \
        or (label == "N3-IIa" and case.compat_verdict == "fails")

    if label == "Unclassified-n>=4":
        raise ClassificationError("no solver for unclassified frames of dimension >= 4")

    if trivial_only:
        data = _initial_data(bundle, "trivial")
        lam = np.full((case.n,) + grid.shape, data.constants["value"])
        sol = SolutionField(grid, lam, case, chart=None, data_desc=data.describe())
    elif label == "N3-IIa":
        data = _initial_data(bundle, "frobenius")
        relab, pdev = integrate_frobenius(bundle.reduced, data, grid, tols)
        lam = _unscramble(relab, case.relabeling)
        sol = SolutionField(grid, lam, case, data_desc=data.describe())
        sol.residuals["path_independence"] = pdev
    elif label == "N3-IIb":
        data = _initial_data(bundle, "iib")
        relab = integrate_IIb(bundle.reduced, data, grid, tols)
        lam = _unscramble(relab, case.relabeling)
        sol = SolutionField(grid, lam, case, data_desc=data.describe())
    elif case.rich:
        if bundle.chart is None:
            raise ConfigError("rich case needs a [chart] section to integrate")
        data = _initial_data(bundle, "darboux")
        lam = integrate_darboux(bundle.reduced, data, grid, tols)
        sol = SolutionField(grid, lam, case, chart=bundle.chart, data_desc=data.describe())
    else:
        raise ClassificationError(f"no solver available for case {label}")

    reconstruct_flux(sol, bundle.conn, tols)
    groups = _forced_groups(bundle)
    sol.residuals["hyperbolicity"] = verify(sol, bundle.conn, tols, forced_groups=groups)
    _check_enforced_relations(sol, bundle)
    return sol


def _unscramble(relab_stack, perm):
    out = np.empty_like(relab_stack)
    for new_p, old_p in enumerate(perm):
        out[old_p] = relab_stack[new_p]
    return out


def _forced_groups(bundle: AnalysisBundle):
    case = bundle.case
    if case.case_label == "N3-IIb" and not isinstance(bundle.reduced, TrivialReduction):
        # relabeled lambda2 = lambda3 back in original indices
        return ((case.relabeling[1], case.relabeling[2]),)
    if case.index_sets:
        return tuple(tuple(s) for s in case.index_sets)
    if case.case_label == "MaxRank-Trivial" or isinstance(bundle.reduced, TrivialReduction):
        return (tuple(range(case.n)),)
    return ()


def _check_enforced_relations(sol: SolutionField, bundle: AnalysisBundle):
    """The algebraic relations of the case must hold on every node; they are
    enforced by construction, so violations flag integration bugs."""
    case = bundle.case
    tols = bundle.tols
    worst = 0.0
    if case.case_label == "N3-IIa" and case.alphas is not None:
        env = sol.grid.mesh_env()
        acc = np.zeros(sol.grid.shape)
        for e, lamfield in zip(case.alpha_exprs, sol.lambdas):
            acc += evaluate_array(e, env) * lamfield
        worst = float(np.max(np.abs(acc)))
    for g in _forced_groups(bundle):
        g = sorted(g)
        for other in g[1:]:
            worst = max(worst, float(np.max(np.abs(sol.lambdas[g[0]] - sol.lambdas[other]))))
    scale = 1.0 + float(np.max(np.abs(sol.lambdas)))
    if worst > tols.integ_tol * scale:
        raise IntegrationError(
            f"enforced algebraic relation violated on the grid ({worst:.3e}); "
            "integration bug")
    sol.residuals["algebraic_relation"] = worst


# ---------------------------------------------------------------------------
# reports

def case_report_text(bundle: AnalysisBundle) -> str:
    case = bundle.case
    flat = bundle.flat_report
    lines = [
        f"frame: {bundle.job.name} (n={case.n}, vars {', '.join(bundle.job.vars)})",
        f"identities: torsion {flat.max_torsion:.3e}, curvature {flat.max_curvature:.3e}"
        f" (tol {bundle.tols.identity_tol:.1e})",
        f"rich: {'yes' if case.rich else 'no'}",
        f"rank(N): {case.rank} ({'constant' if case.rank_constant else 'NOT constant'})",
        f"case: {case.case_label}",
    ]
    if case.alphas is not None:
        lines.append(f"relation: {case.describe_relation()}")
        lines.append(f"relabeling: {tuple(p + 1 for p in case.relabeling)}")
    if case.index_sets:
        pretty = ", ".join("{" + ", ".join(str(i + 1) for i in s) + "}" for s in case.index_sets)
        lines.append(f"multiplicity sets: {pretty}")
    if case.compat_verdict != "n/a":
        lines.append(f"compatibility: {case.compat_verdict}"
                     f" (max residual {case.compat_residual:.3e})")
    lines.append(f"family: {bundle.family}")
    return "\n".join(lines)


def json_report(bundle: AnalysisBundle, sol: SolutionField | None) -> str:
    residuals = {"curl": None, "eigen": None}
    hyper = None
    if sol is not None:
        residuals = {"curl": sol.residuals.get("curl"), "eigen": sol.residuals.get("eigen")}
        full = sol.residuals.get("hyperbolicity")
        if full:
            hyper = {k: full[k] for k in
                     ("min_gap", "strict_outside_forced", "forced_multiplicities")}
    doc = {
        "case": bundle.case.case_label,
        "rank": bundle.case.rank,
        "residuals": residuals,
        "hyperbolicity": hyper,
        "family": bundle.family,
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def residual_text(sol: SolutionField) -> str:
    lines = []
    for key in ("curl", "eigen", "flux_path_dependence", "path_independence",
                "algebraic_relation"):
        if key in sol.residuals:
            lines.append(f"{key}: {sol.residuals[key]:.6e}")
    hyper = sol.residuals.get("hyperbolicity")
    if hyper:
        gap = hyper.get("min_gap")
        lines.append(f"min_gap: {'n/a' if gap is None else f'{gap:.6e}'}")
        lines.append(f"strict_outside_forced: {hyper['strict_outside_forced']}")
        lines.append(f"forced_multiplicities: {hyper['forced_multiplicities']}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands

def _apply_flags(job: JobConfig, args):
    if args.seed is not None:
        job.seed = args.seed
    for spec in args.tol or []:
        if "=" not in spec:
            raise ConfigError(f"--tol expects key=value, got {spec!r}")
        key, val = spec.split("=", 1)
        valid = {f.name for f in fields(Tolerances)}
        if key not in valid:
            raise ConfigError(f"unknown tolerance {key!r}")
        job.tol_overrides[key] = int(val) if key in ("seed", "samples") else float(val)
    if args.grid:
        job.resolution = tuple(int(x) for x in args.grid.split(","))
    if args.out:
        job.out_dir = args.out


def cmd_analyze(args) -> int:
    job = load_config(args.config)
    _apply_flags(job, args)
    try:
        bundle = analyze_pipeline(job)
    except ClassificationError as err:
        if "not constant" in str(err):
            print(f"error: {err}", file=sys.stderr)
            return EXIT_NONCONSTANT_RANK
        raise
    print(case_report_text(bundle))
    if args.json:
        print(json_report(bundle, None), end="")
    if bundle.case.case_label == "Unclassified-n>=4":
        return EXIT_UNCLASSIFIED
    return EXIT_OK


def cmd_solve(args) -> int:
    job = load_config(args.config)
    _apply_flags(job, args)
    try:
        bundle = analyze_pipeline(job)
    except ClassificationError as err:
        if "not constant" in str(err):
            print(f"error: {err}", file=sys.stderr)
            return EXIT_NONCONSTANT_RANK
        raise
    if bundle.case.case_label == "Unclassified-n>=4":
        print("error: case is unclassified for n >= 4; nothing to solve", file=sys.stderr)
        return EXIT_UNCLASSIFIED
    try:
        sol = solve_pipeline(bundle)
    except TrivialDataError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_TRIVIAL_DATA
    except IntegrationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INTEGRATION

    os.makedirs(job.out_dir, exist_ok=True)
    csv_path = os.path.join(job.out_dir, f"{job.name}.csv")
    json_path = os.path.join(job.out_dir, f"{job.name}.json")
    write_csv(sol, csv_path)
    with open(json_path, "w") as fh:
        fh.write(json_report(bundle, sol))
    print(case_report_text(bundle))
    print(residual_text(sol))
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    if args.json:
        print(json_report(bundle, sol), end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    job = load_config(args.config)
    _apply_flags(job, args)
    bundle = analyze_pipeline(job)
    grid = _solve_grid(bundle)
    n = bundle.case.n
    with open(args.csv) as fh:
        header = fh.readline().strip().split(",")
        rows = np.loadtxt(fh, delimiter=",")
    cols = {nm: rows[:, i] for i, nm in enumerate(header)}
    expected_rows = int(np.prod(grid.shape))
    if len(rows) != expected_rows:
        raise ConfigError(
            f"csv has {len(rows)} rows but the configured grid has {expected_rows}")
    lam = np.stack([cols[f"lambda{i + 1}"].reshape(grid.shape) for i in range(n)])
    sol = SolutionField(grid, lam, bundle.case,
                        chart=bundle.chart if (bundle.chart and bundle.case.rich) else None)
    if f"f1" in cols:
        sol.flux = np.stack([cols[f"f{i + 1}"].reshape(grid.shape) for i in range(n)])
    report = verify(sol, bundle.conn, bundle.tols, forced_groups=_forced_groups(bundle))
    sol.residuals["hyperbolicity"] = report
    print(residual_text(sol))
    if args.json:
        print(json_report(bundle, sol), end="")
    return EXIT_OK


def cmd_examples(args) -> int:
    names = fixture_registry.fixture_names()
    if not args.all:
        if args.name not in names:
            print(f"error: unknown fixture {args.name!r}; known: {', '.join(names)}",
                  file=sys.stderr)
            return EXIT_CONFIG
        names = [args.name]
    failures = 0
    results = []
    for nm in names:
        try:
            checks = fixture_registry.run_fixture(nm, self_module=sys.modules[__name__])
        except Exception as err:  # surface as a failing fixture, keep going
            checks = [("run", False, f"{type(err).__name__}: {err}")]
        ok = all(c[1] for c in checks)
        failures += 0 if ok else 1
        results.append((nm, ok, checks))
        status = "PASS" if ok else "FAIL"
        print(f"{nm:28s} {status}")
        for label, good, detail in checks:
            if not good or args.verbose:
                print(f"    {'ok ' if good else 'BAD'} {label}: {detail}")
    total = len(results)
    print(f"{total - failures}/{total} PASS")
    return EXIT_OK if failures == 0 else EXIT_CONFIG


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="eigenframe",
        description="classify and solve eigenvalue systems for prescribed eigenvector frames",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("config", help="job configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--tol", action="append", metavar="KEY=VAL")
        p.add_argument("--out", default=None, metavar="DIR")
        p.add_argument("--grid", default=None, metavar="N1,N2,...")
        p.add_argument("--json", action="store_true")

    p_an = sub.add_parser("analyze", help="classify the eigenvalue system of a frame")
    common(p_an)
    p_an.set_defaults(func=cmd_analyze)

    p_so = sub.add_parser("solve", help="integrate the reduced system and reconstruct the flux")
    common(p_so)
    p_so.set_defaults(func=cmd_solve)

    p_ve = sub.add_parser("verify", help="re-verify residuals of a solved grid")
    p_ve.add_argument("csv", help="grid CSV produced by solve")
    common(p_ve)
    p_ve.set_defaults(func=cmd_verify)

    p_ex = sub.add_parser("examples", help="run the bundled example corpus")
    p_ex.add_argument("name", nargs="?", default=None)
    p_ex.add_argument("--all", action="store_true")
    p_ex.add_argument("--verbose", action="store_true")
    p_ex.add_argument("--seed", type=int, default=None)
    p_ex.add_argument("--tol", action="append", metavar="KEY=VAL")
    p_ex.add_argument("--out", default=None)
    p_ex.add_argument("--grid", default=None)
    p_ex.add_argument("--json", action="store_true")
    p_ex.set_defaults(func=cmd_examples)

    args = parser.parse_args(argv)
    if args.command == "examples" and not args.all and args.name is None:
        parser.error("examples needs a fixture name or --all")
    try:
        return args.func(args)
    except (ConfigError, ParseError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (GeometryError, ChartError, ClassificationError, ReductionError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INTEGRATION


if __name__ == "__main__":
    sys.exit(main())
