"""Assemble the eigenvalue system for a frame, classify its algebraic
constraints by rank, and reduce the solvable cases to explicit first-order
systems (Frobenius for the three-field n=3 case, a five-equation reduced
system when only two eigenvalues are coupled, and a constraint-free Darboux
system for rich frames in Riemann invariants).

Index conventions follow geometry: Gamma[k][i][j] has upper index k, the
derivative direction i first, the differentiated field j second. The PDE part
of the system reads r_i(lam^j) = Gamma[j][j][i] (lam^i - lam^j).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .expr import Expr, ZERO, add, const, div, mul, neg, simplify, sub, evaluate_array
from .geometry import (
    Connection,
    Frame,
    RiemannChart,
    Tolerances,
    build_connection,
    directional_derivative,
    differentiate,
    env_from_points,
    is_rich,
    is_zero_sampled,
    sample_box,
    tensor_scale,
)


class ClassificationError(Exception):
    pass


class ReductionError(Exception):
    pass


# ---------------------------------------------------------------------------
# the differential-algebraic system

@dataclass
class LambdaSystem:
    """PDE coefficient table plus the algebraic constraint matrix N in the
    difference variables x^k = lam^k - lam^1 (so N has n-1 columns)."""

    n: int
    vars: tuple
    pde_coeffs: dict                 # (i, j) -> Expr, eq r_i(lam^j) = coeff*(lam^i - lam^j)
    N_rows: tuple                    # ((k, i, j), row) with row a length n-1 Expr tuple
    frame: Frame
    conn: Connection
    chart: RiemannChart | None = None

    @property
    def in_chart(self):
        return self.chart is not None

    @property
    def tensor(self):
        return self.chart.Z if self.in_chart else self.conn.Gamma

    def sample_vars(self):
        return self.chart.w_vars if self.in_chart else self.frame.vars

    def samples(self, tols):
        box = self.chart.w_domain if self.in_chart else self.frame.domain
        return sample_box(box, tols.samples, tols.seed)

    def N_matrix(self, env):
        """Numeric N stacked over sample points: shape (npts, rows, n-1)."""
        npts = len(next(iter(env.values())))
        M = np.zeros((npts, len(self.N_rows), self.n - 1))
        for r, (_, row) in enumerate(self.N_rows):
            for c, e in enumerate(row):
                M[:, r, c] = evaluate_array(e, env)
        return M


def build_lambda_system(conn: Connection, chart: RiemannChart | None = None) -> LambdaSystem:
    """PDE coefficients Gamma[j][j][i]; one N row per (k; i<j) triple with
    k not in {i,j}. Rows are ordered by k then (i,j), and signed to match the
    standard n=3 layout of the constraint matrix."""
    if chart is not None:
        n = chart.n
        G = chart.Z
        names = chart.w_vars
        frame = chart.frame
    else:
        n = conn.n
        G = conn.Gamma
        names = conn.frame.vars
        frame = conn.frame

    pde = {}
    for i in range(n):
        for j in range(n):
            if i != j:
                pde[(i, j)] = G[j][j][i]

    rows = []
    for k in range(n):
        for i in range(n):
            for j in range(i + 1, n):
                if k in (i, j):
                    continue
                coeff = [ZERO] * n
                coeff[i] = G[k][j][i]
                coeff[j] = neg(G[k][i][j])
                coeff[k] = sub(G[k][i][j], G[k][j][i])
                if k > i:
                    coeff = [simplify(neg(e)) for e in coeff]
                # lam^1 never appears once rewritten in the differences x^m
                rows.append(((k, i, j), tuple(simplify(e) for e in coeff[1:])))
    return LambdaSystem(n, tuple(names), pde, tuple(rows), frame, conn, chart)


def lambda_system_residual(sys: LambdaSystem, lam_exprs, points) -> float:
    """Max residual of the full differential-algebraic system for candidate
    eigenvalue expressions (used by the trivial-solution sanity check)."""
    env = env_from_points(sys.sample_vars(), np.asarray(points, dtype=float))
    worst = 0.0
    lam = list(lam_exprs)
    for (i, j), coeff in sys.pde_coeffs.items():
        if sys.in_chart:
            dlam = differentiate(lam[j], sys.sample_vars()[i])
        else:
            dlam = directional_derivative(sys.frame, i, lam[j])
        res = sub(dlam, mul(coeff, sub(lam[i], lam[j])))
        worst = max(worst, float(np.max(np.abs(evaluate_array(res, env)))))
    for (_, row) in sys.N_rows:
        acc = ZERO
        for m, e in enumerate(row, start=1):
            acc = add(acc, mul(e, sub(lam[m], lam[0])))
        worst = max(worst, float(np.max(np.abs(evaluate_array(acc, env)))))
    return worst


# ---------------------------------------------------------------------------
# rank classification

@dataclass
class RankInfo:
    rank: int
    constant: bool
    per_sample: np.ndarray


def classify_rank(sys: LambdaSystem, points, tols: Tolerances | None = None) -> RankInfo:
    """Numeric ranks via singular values with threshold rank_tol * sigma_max.
    The threshold is floored at rank_tol times the magnitude of the connection
    coefficients, so an N that is zero up to roundoff has rank zero."""
    tols = tols or Tolerances()
    env = env_from_points(sys.sample_vars(), np.asarray(points, dtype=float))
    M = sys.N_matrix(env)
    floor = tols.rank_tol * tensor_scale(sys.tensor, env)
    ranks = np.zeros(len(M), dtype=int)
    for p, mat in enumerate(M):
        s = np.linalg.svd(mat, compute_uv=False)
        if s.size and s[0] > 0:
            ranks[p] = int(np.sum(s > max(tols.rank_tol * s[0], floor)))
    return RankInfo(int(ranks.max(initial=0)), bool(np.all(ranks == ranks.max(initial=0))), ranks)


# ---------------------------------------------------------------------------
# case classification

CASE_LABELS = (
    "Rich-Rank0",
    "Rich-Constrained",
    "N3-I",
    "N3-IIa",
    "N3-IIb",
    "N3-III",
    "MaxRank-Trivial",
    "Unclassified-n>=4",
)


@dataclass
class CaseReport:
    n: int
    rank: int
    rank_constant: bool
    case_label: str
    rich: bool
    relabeling: tuple                     # new index p -> old index relabeling[p]
    alphas: tuple | None = None           # normalized relation coefficients at base
    alpha_exprs: tuple | None = None
    compat_verdict: str = "n/a"           # 'holds' | 'fails' | 'n/a'
    compat_residual: float = 0.0
    solution_family: str = ""
    index_sets: tuple = ()                # rich constrained merge result
    relabeled_frame: Frame | None = None
    relabeled_conn: Connection | None = None
    relabeled_sys: "LambdaSystem | None" = None

    def describe_relation(self):
        if self.alphas is None:
            return "none"
        terms = []
        for i, a in enumerate(self.alphas, start=1):
            if abs(a) > 1e-14:
                terms.append(f"{a:+.6g}*lambda{i}")
        return " ".join(terms) + " = 0"


def _relation_alphas(sys: LambdaSystem, env, tols):
    """Direction of the single algebraic relation, as expressions
    alpha = (-(a2+a3+...), a2, a3, ...) from the strongest row of N."""
    M = sys.N_matrix(env)
    strength = np.min(np.linalg.norm(M, axis=2), axis=0)  # worst-case row norms
    r = int(np.argmax(strength))
    row = sys.N_rows[r][1]
    total = ZERO
    for e in row:
        total = add(total, e)
    alphas = (simplify(neg(total)),) + tuple(row)
    return alphas, r


def _alpha_zero_pattern(alpha_exprs, env, zero_tol):
    vals = [evaluate_array(e, env) for e in alpha_exprs]
    scale = max(float(np.max(np.abs(v))) for v in vals)
    return [is_zero_sampled(v, zero_tol, scale) for v in vals], vals


def classify_case(sys: LambdaSystem, tols: Tolerances | None = None) -> CaseReport:
    tols = tols or Tolerances()
    pts = sys.samples(tols)
    env = env_from_points(sys.sample_vars(), pts)
    info = classify_rank(sys, pts, tols)
    if not info.constant:
        bad = np.flatnonzero(info.per_sample != info.rank)
        raise ClassificationError(
            f"rank of N is not constant over the domain (rank {info.rank} generally, "
            f"differs at sample indices {bad.tolist()[:8]}); shrink the domain box"
        )
    n, rank = sys.n, info.rank
    rich = is_rich(sys.conn, tols)
    ident = tuple(range(n))

    if rank == 0:
        if not rich:
            raise ClassificationError("rank(N)=0 must imply a rich frame; pipeline bug")
        return CaseReport(n, 0, True, "Rich-Rank0", True, ident,
                          solution_family=f"{n} functions of 1 variable")
    if rank == n - 1:
        return CaseReport(n, rank, True, "MaxRank-Trivial", rich, ident,
                          solution_family="trivial only: all eigenvalues equal one constant")
    if rich:
        return CaseReport(n, rank, True, "Rich-Constrained", True, ident,
                          solution_family="pending rich reduction")
    if n != 3:
        return CaseReport(n, rank, True, "Unclassified-n>=4", False, ident,
                          solution_family="unknown (no general method)")

    # n = 3, rank 1, non-rich: extract the relation and split IIa / IIb
    alpha_exprs, _ = _relation_alphas(sys, env, tols)
    zero_pat, vals = _alpha_zero_pattern(alpha_exprs, env, tols.zero_tol)
    n_zero = sum(zero_pat)
    base_env = {nm: np.array([v]) for nm, v in zip(sys.sample_vars(), _base_of(sys))}
    alpha_base = np.array([float(evaluate_array(e, base_env)[0]) for e in alpha_exprs])
    alpha_base = _normalize_alphas(alpha_base)

    if n_zero == 0:
        perm = _find_IIa_relabeling(sys, tols)
        label = "N3-IIa"
    elif n_zero == 1:
        q = zero_pat.index(True)
        perm = (q,) + tuple(p for p in range(3) if p != q)
        label = "N3-IIb"
    else:
        raise ClassificationError(f"degenerate relation with {n_zero} zero coefficients")

    frame_r = sys.frame.relabeled(perm)
    conn_r = build_connection(frame_r, tols)
    sys_r = build_lambda_system(conn_r)
    return CaseReport(
        3, 1, True, label, False, perm,
        alphas=tuple(alpha_base), alpha_exprs=alpha_exprs,
        solution_family="pending reduction",
        relabeled_frame=frame_r, relabeled_conn=conn_r, relabeled_sys=sys_r,
    )


def _base_of(sys):
    if sys.in_chart:
        return sys.chart.w_base
    return sys.frame.base


def _normalize_alphas(a):
    big = np.argmax(np.abs(a))
    if a[big] == 0:
        return a
    a = a / np.abs(a[big])
    for v in a:
        if abs(v) > 1e-14:
            if v < 0:
                a = -a
            break
    return a


def _find_IIa_relabeling(sys, tols):
    """First permutation (lexicographic) for which the relation matches the
    first reduced algebraic form with its three governing symbols nonvanishing
    on all samples."""
    for perm in permutations(range(3)):
        frame_r = sys.frame.relabeled(perm)
        conn_r = build_connection(frame_r, tols)
        G = conn_r.Gamma
        pts = frame_r.samples(tols)
        env = env_from_points(frame_r.vars, pts)
        c132 = sub(G[0][2][1], G[0][1][2])
        needed = (c132, G[0][2][1], G[0][1][2])
        scale = tensor_scale(G, env)
        ok = True
        for e in needed:
            vals = evaluate_array(e, env)
            if np.min(np.abs(vals)) <= tols.zero_tol * (1.0 + scale):
                ok = False
                break
        if ok:
            return perm
    raise ReductionError("no index relabeling renders the relation solvable for lambda1")


# ---------------------------------------------------------------------------
# reduced systems

@dataclass
class ReducedSystem:
    kind: str                      # 'Frobenius-IIa' | 'Reduced-IIb' | 'Darboux-Rich'
    unknown_names: tuple
    rhs_coeffs: dict               # (direction index, unknown name) -> Expr
    eliminated: dict               # reconstruction formulas for removed unknowns
    meta: dict = field(default_factory=dict)


@dataclass
class TrivialReduction:
    reason: str
    detail: str = ""


@dataclass
class CompatVerdict:
    holds: bool
    max_residual: float
    residuals: dict


def reduce_IIa(sys: LambdaSystem, report: CaseReport, tols: Tolerances | None = None) -> ReducedSystem:
    """Eliminate lambda1 through the algebraic relation and solve the six PDEs
    for the prescribed derivatives of (lambda2, lambda3). The right-hand sides
    all carry the common factor (lambda2 - lambda3)."""
    tols = tols or Tolerances()
    if report.case_label != "N3-IIa":
        raise ReductionError(f"reduce_IIa called on case {report.case_label}")
    frame, conn = report.relabeled_frame, report.relabeled_conn
    G = conn.Gamma
    c132 = simplify(sub(G[0][2][1], G[0][1][2]))
    g132, g123 = G[0][2][1], G[0][1][2]

    pts = frame.samples(tols)
    env = env_from_points(frame.vars, pts)
    scale = tensor_scale(G, env)
    for label, e in (("c^1_32", c132), ("Gamma^1_32", g132), ("Gamma^1_23", g123)):
        vals = evaluate_array(e, env)
        if np.min(np.abs(vals)) <= tols.zero_tol * (1.0 + scale):
            raise ReductionError(f"required symbol {label} vanishes at a sample point")

    r2 = lambda e: directional_derivative(frame, 1, e)
    r3 = lambda e: directional_derivative(frame, 2, e)

    phi = {
        (0, "lambda2"): simplify(div(mul(G[1][1][0], g123), c132)),
        (0, "lambda3"): simplify(div(mul(G[2][2][0], g132), c132)),
        (1, "lambda2"): simplify(
            sub(
                mul(div(g123, g132), sub(G[2][2][1], G[0][0][1])),
                mul(div(c132, g132), r2(div(g132, c132))),
            )
        ),
        (1, "lambda3"): G[2][2][1],
        (2, "lambda2"): simplify(neg(G[1][1][2])),
        (2, "lambda3"): simplify(
            add(
                mul(div(g132, g123), sub(G[0][0][2], G[1][1][2])),
                mul(div(c132, g123), r3(div(g123, c132))),
            )
        ),
    }
    eliminated = {
        "lambda1": {
            "lambda2": simplify(div(g132, c132)),
            "lambda3": simplify(neg(div(g123, c132))),
        }
    }
    return ReducedSystem("Frobenius-IIa", ("lambda2", "lambda3"), phi, eliminated,
                         meta={"frame": frame, "conn": conn})


def check_frobenius_compat(red: ReducedSystem, points, tols: Tolerances | None = None) -> CompatVerdict:
    """The six integrability identities of the solved system: for i<j and each
    unknown s, r_i(phi_j^s) - r_j(phi_i^s) must equal the quadratic mixed term
    phi_j^2 phi_i^3 - phi_i^2 phi_j^3 plus the commutator contribution."""
    tols = tols or Tolerances()
    if red.kind != "Frobenius-IIa":
        raise ReductionError(f"compatibility check needs a Frobenius system, got {red.kind}")
    frame: Frame = red.meta["frame"]
    conn: Connection = red.meta["conn"]
    env = env_from_points(frame.vars, np.asarray(points, dtype=float))
    phi = red.rhs_coeffs
    residuals = {}
    worst = 0.0
    for i in range(3):
        for j in range(i + 1, 3):
            mixed = sub(
                mul(phi[(j, "lambda2")], phi[(i, "lambda3")]),
                mul(phi[(i, "lambda2")], phi[(j, "lambda3")]),
            )
            for s in ("lambda2", "lambda3"):
                lhs = sub(
                    directional_derivative(frame, i, phi[(j, s)]),
                    directional_derivative(frame, j, phi[(i, s)]),
                )
                rhs = mixed
                for k in range(3):
                    rhs = add(rhs, mul(conn.c[k][i][j], phi[(k, s)]))
                res = float(np.max(np.abs(evaluate_array(sub(lhs, rhs), env))))
                residuals[(i + 1, j + 1, s)] = res
                worst = max(worst, res)
    return CompatVerdict(worst < tols.compat_tol, worst, residuals)


def reduce_IIb(sys: LambdaSystem, report: CaseReport, tols: Tolerances | None = None):
    """After relabeling, the relation forces lambda2 = lambda3. The remaining
    PDEs admit nontrivial solutions only when the two coefficients governing
    the first direction coincide."""
    tols = tols or Tolerances()
    if report.case_label != "N3-IIb":
        raise ReductionError(f"reduce_IIb called on case {report.case_label}")
    frame, conn = report.relabeled_frame, report.relabeled_conn
    G = conn.Gamma
    pts = frame.samples(tols)
    env = env_from_points(frame.vars, pts)
    scale = tensor_scale(G, env)

    # consequences of the relation not involving lambda1; violations mean the
    # classification itself went wrong
    c132 = sub(G[0][2][1], G[0][1][2])
    for label, e in (("c^1_32", c132), ("Gamma^2_31", G[1][2][0]), ("Gamma^3_21", G[2][1][0])):
        if not is_zero_sampled(evaluate_array(e, env), tols.zero_tol, scale):
            raise ClassificationError(f"IIb precondition {label} = 0 violated; classification bug")

    gap = sub(G[2][2][0], G[1][1][0])
    gap_vals = evaluate_array(gap, env)
    if not is_zero_sampled(gap_vals, tols.zero_tol, scale):
        return TrivialReduction(
            "coefficient mismatch in the first flow direction forces all eigenvalues equal",
            detail=f"max |Gamma^3_31 - Gamma^2_21| = {float(np.max(np.abs(gap_vals))):.3e}",
        )
    rhs = {
        (0, "lambda2"): G[2][2][0],          # r_1(lam2) = Gamma^3_31 (lam1 - lam2)
        (1, "lambda1"): G[0][0][1],          # r_2(lam1) = Gamma^1_12 (lam2 - lam1)
        (1, "lambda2"): ZERO,
        (2, "lambda1"): G[0][0][2],          # r_3(lam1) = Gamma^1_13 (lam2 - lam1)
        (2, "lambda2"): ZERO,
    }
    return ReducedSystem(
        "Reduced-IIb", ("lambda1", "lambda2"), rhs,
        eliminated={"lambda3": "lambda2"},
        meta={"frame": frame, "conn": conn,
              "family": "1 function of 1 variable + 1 constant"},
    )


# ---------------------------------------------------------------------------
# rich reduction

def _merge_sets(Z, n, env, zero_tol, scale):
    """Group indices forced equal, then iterate the coefficient-agreement test
    (enlarging or merging sets on disagreement) to a fixed point."""
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    zvals = [[[evaluate_array(Z[k][i][j], env) for j in range(n)] for i in range(n)]
             for k in range(n)]

    for i in range(n):
        for j in range(i + 1, n):
            for k in range(n):
                if k in (i, j):
                    continue
                if not is_zero_sampled(zvals[k][i][j], zero_tol, scale):
                    union(i, j)

    def groups():
        by_root = {}
        for x in range(n):
            by_root.setdefault(find(x), []).append(x)
        sets = [tuple(v) for v in by_root.values() if len(v) > 1]
        return sorted(sets)

    changed = True
    iterations = 0
    while changed:
        iterations += 1
        if iterations > n + 1:
            raise ReductionError("rich merge did not terminate; pipeline bug")
        changed = False
        for A in groups():
            for i in range(n):
                if find(i) == find(A[0]):
                    continue
                ref = zvals[A[0]][A[0]][i]
                agree = all(
                    is_zero_sampled(zvals[k][k][i] - ref, zero_tol, scale) for k in A[1:]
                )
                if not agree:
                    union(i, A[0])
                    changed = True
            if changed:
                break
    sets = groups()
    in_set = {x for A in sets for x in A}
    free = tuple(x for x in range(n) if x not in in_set)
    return sets, free


def reduce_rich(sys: LambdaSystem, tols: Tolerances | None = None):
    """Rewrite the chart-based system as a first-order PDE system without
    algebraic constraints, merging eigenvalues that the constraints and the
    coefficient structure force to coincide."""
    tols = tols or Tolerances()
    if not sys.in_chart:
        raise ReductionError("rich reduction requires a Riemann-invariant chart")
    chart = sys.chart
    n = sys.n
    Z = chart.Z
    pts = sys.samples(tols)
    env = env_from_points(chart.w_vars, pts)
    scale = tensor_scale(Z, env)

    sets, free = _merge_sets(Z, n, env, tols.zero_tol, scale)

    if not sets:
        # no constraints at all; each eigenvalue keeps its own unknown
        names = tuple(f"kappa{j + 1}" for j in range(n))
        rhs = {}
        driver = {}
        for j in range(n):
            for i in range(n):
                if i == j:
                    continue
                rhs[(i, f"kappa{j + 1}")] = Z[j][j][i]
                driver[(i, f"kappa{j + 1}")] = f"kappa{i + 1}"
        return ReducedSystem(
            "Darboux-Rich", names, rhs, eliminated={},
            meta={"chart": chart, "sets": (), "free": tuple(range(n)),
                  "driver": driver, "family": f"{n} functions of 1 variable"},
        )

    set_of = {}
    for a, A in enumerate(sets):
        for x in A:
            set_of[x] = a

    # verify the structural assumptions the rewrite relies on
    def _zcheck(label, vals):
        m = float(np.max(np.abs(vals)))
        if m > tols.identity_tol * (1.0 + scale):
            raise ReductionError(
                f"rich reduction assumption {label} violated (residual {m:.3e}); "
                "sampling tolerance too loose for this frame"
            )

    for a, A in enumerate(sets):
        for i in range(n):
            if i in A:
                continue
            ref = evaluate_array(Z[A[0]][A[0]][i], env)
            for k in A[1:]:
                _zcheck("coefficient agreement within a merged set",
                        evaluate_array(Z[k][k][i], env) - ref)
    for i in range(n):
        for j in range(n):
            if i == j or (i in set_of and j in set_of and set_of[i] == set_of[j]):
                continue
            for k in range(n):
                if k in (i, j):
                    continue
                _zcheck("off-set connection coefficients vanish",
                        evaluate_array(Z[k][i][j], env))

    if len(sets) == 1 and len(sets[0]) == n:
        return TrivialReduction(
            "all eigenvalues merge into one multiplicity class",
            detail=f"merged set {tuple(x + 1 for x in sets[0])}",
        )

    def axis_unknown(i):
        return f"h{set_of[i] + 1}" if i in set_of else f"kappa{i + 1}"

    names = tuple(f"kappa{j + 1}" for j in free) + tuple(f"h{a + 1}" for a in range(len(sets)))
    rhs = {}
    driver = {}
    for j in free:
        nm = f"kappa{j + 1}"
        for i in range(n):
            if i == j:
                continue
            rhs[(i, nm)] = Z[j][j][i]
            driver[(i, nm)] = axis_unknown(i)
    W = {}
    for a, A in enumerate(sets):
        nm = f"h{a + 1}"
        rep = A[0]
        for i in range(n):
            if i in A:
                rhs[(i, nm)] = ZERO
                driver[(i, nm)] = nm
            else:
                rhs[(i, nm)] = Z[rep][rep][i]
                driver[(i, nm)] = axis_unknown(i)
                W[(a, i)] = Z[rep][rep][i]

    eliminated = {f"kappa{j + 1}": f"h{a + 1}" for a, A in enumerate(sets) for j in A}
    family = (f"{len(free)} functions of 1 variable + {len(sets)} constants"
              if free else f"{len(sets)} constants")
    return ReducedSystem(
        "Darboux-Rich", names, rhs, eliminated,
        meta={"chart": chart, "sets": tuple(sets), "free": free,
              "driver": driver, "W": W, "family": family},
    )


def check_darboux_compat(red: ReducedSystem, points, tols: Tolerances | None = None) -> CompatVerdict:
    """Equality of prescribed mixed second derivatives: substitute the system
    into d_k d_m u - d_m d_k u, collect the coefficient of each unknown, and
    evaluate. These vanish identically by flatness; nonzero residuals flag a
    pipeline bug or a bad chart."""
    tols = tols or Tolerances()
    if red.kind != "Darboux-Rich":
        raise ReductionError(f"Darboux check needs a Darboux system, got {red.kind}")
    chart: RiemannChart = red.meta["chart"]
    names = chart.w_vars
    env = env_from_points(names, np.asarray(points, dtype=float))
    rhs, driver = red.rhs_coeffs, red.meta["driver"]

    def prescribed(u):
        return [i for i in range(chart.n) if (i, u) in rhs]

    def add_term(acc, u, coeff):
        acc[u] = add(acc.get(u, ZERO), coeff)

    residuals = {}
    worst = 0.0
    for u in red.unknown_names:
        axes = prescribed(u)
        for m in axes:
            for k in axes:
                if k <= m:
                    continue
                acc = {}
                for flip, (a, b) in ((False, (m, k)), (True, (k, m))):
                    def term(e, _flip=flip):
                        return neg(e) if _flip else e

                    # contribution of d_b applied to d_a u = G_a (driver_a - u)
                    G_a = rhs[(a, u)]
                    d_a = driver[(a, u)]
                    dG = differentiate(G_a, names[b])
                    add_term(acc, d_a, term(dG))
                    add_term(acc, u, term(neg(dG)))
                    if d_a != u:
                        G_d = rhs[(b, d_a)]
                        dd = driver[(b, d_a)]
                        add_term(acc, dd, term(mul(G_a, G_d)))
                        add_term(acc, d_a, term(neg(mul(G_a, G_d))))
                    G_b = rhs[(b, u)]
                    d_b = driver[(b, u)]
                    add_term(acc, d_b, term(neg(mul(G_a, G_b))))
                    add_term(acc, u, term(mul(G_a, G_b)))
                for unk, e in acc.items():
                    res = float(np.max(np.abs(evaluate_array(simplify(e), env))))
                    residuals[(u, m + 1, k + 1, unk)] = res
                    worst = max(worst, res)
    return CompatVerdict(worst < tols.compat_tol, worst, residuals)
