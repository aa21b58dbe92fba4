"""Frame geometry: coframe inversion, structure coefficients, connection
coefficients of the flat coordinate connection, and the identity checks
(symmetry and flatness) that everything downstream relies on.

All "identically zero / identically equal" decisions are made numerically by
evaluating at a fixed set of quasi-random sample points inside the domain box.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import permutations

import numpy as np

from .expr import (
    Expr,
    EvalDomainError,
    ExprError,
    ZERO,
    add,
    const,
    differentiate,
    div,
    evaluate,
    evaluate_array,
    mul,
    neg,
    parse_expr,
    simplify,
    sub,
    substitute,
    var,
)


class GeometryError(Exception):
    pass


class ChartError(GeometryError):
    pass


@dataclass
class Tolerances:
    """Numeric thresholds used across the pipeline. All config-overridable."""

    rank_tol: float = 1e-8      # singular-value cutoff relative to sigma_max
    zero_tol: float = 1e-9      # sampled identically-zero decisions
    compat_tol: float = 1e-6    # Frobenius / Darboux compatibility residuals
    identity_tol: float = 1e-7  # symmetry (T0) and flatness (R0) residuals
    inverse_tol: float = 1e-9   # max |R L - I| at samples
    chart_tol: float = 1e-8     # chart normalization and round-trip checks
    path_tol: float = 1e-5      # path-independence of sweep integration
    integ_tol: float = 1e-8     # enforced algebraic relations on solved grids
    curl_tol: float = 1e-3      # FD curl of quadrature-reconstructed flux
    seed: int = 0
    samples: int = 50

    def override(self, updates: dict) -> "Tolerances":
        return replace(self, **updates)


# ---------------------------------------------------------------------------
# sampling

_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29)


def sample_box(domain, count, seed=0):
    """Kronecker (additive-recurrence) low-discrepancy points in the box,
    inset 2% from the walls. Deterministic for a given seed."""
    dim = len(domain)
    alphas = np.array([np.sqrt(p) % 1.0 for p in _PRIMES[:dim]])
    k = np.arange(1, count + 1)[:, None] + 1000 * seed
    unit = (0.5 + k * alphas[None, :]) % 1.0
    lo = np.array([a for a, _ in domain])
    hi = np.array([b for _, b in domain])
    return lo + (hi - lo) * (0.02 + 0.96 * unit)


def env_from_points(names, pts):
    return {name: pts[:, i] for i, name in enumerate(names)}


def is_zero_sampled(values, zero_tol, scale=1.0):
    """Sampled identically-zero decision: nonzero at any point counts as nonzero."""
    return float(np.max(np.abs(values))) <= zero_tol * (1.0 + scale)


# ---------------------------------------------------------------------------
# symbolic linear algebra (small n only)

def sym_det(M):
    n = len(M)
    if n == 1:
        return M[0][0]
    total = ZERO
    for j in range(n):
        minor = [row[:j] + row[j + 1:] for row in M[1:]]
        term = mul(M[0][j], sym_det(minor))
        total = add(total, term) if j % 2 == 0 else sub(total, term)
    return simplify(total)


def sym_adjugate(M):
    n = len(M)
    if n == 1:
        return [[const(1.0)]]
    adj = [[ZERO] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            minor = [row[:j] + row[j + 1:] for k, row in enumerate(M) if k != i]
            cof = sym_det(minor)
            adj[j][i] = cof if (i + j) % 2 == 0 else neg(cof)
    return adj


def sym_inverse(M):
    det = sym_det(M)
    adj = sym_adjugate(M)
    return [[simplify(div(adj[i][j], det)) for j in range(len(M))] for i in range(len(M))]


def sym_matmul(A, B):
    n, m, p = len(A), len(B), len(B[0])
    return [
        [simplify(sum((mul(A[i][k], B[k][j]) for k in range(m)), ZERO)) for j in range(p)]
        for i in range(n)
    ]


def grad(e, names):
    return [differentiate(e, nm) for nm in names]


# ---------------------------------------------------------------------------
# frames

@dataclass
class Frame:
    """n symbolic vector fields on a coordinate box.

    R[m][j] is component m of the j-th field, i.e. the fields are the columns
    of the matrix R. `base` is aligned with `vars`.
    """

    vars: tuple
    R: tuple
    domain: tuple
    base: tuple
    name: str = ""

    @property
    def n(self):
        return len(self.vars)

    def base_point(self):
        return dict(zip(self.vars, self.base))

    def column(self, j):
        return [self.R[m][j] for m in range(self.n)]

    def samples(self, tols: Tolerances):
        return sample_box(self.domain, tols.samples, tols.seed)

    def relabeled(self, perm):
        """New frame whose j-th field is the perm[j]-th field of this one."""
        n = self.n
        R = tuple(tuple(self.R[m][perm[j]] for j in range(n)) for m in range(n))
        return Frame(self.vars, R, self.domain, self.base,
                     name=f"{self.name}[relabel{tuple(p + 1 for p in perm)}]")

    def scaled(self, factors):
        """Rescale field j by the expression factors[j]."""
        n = self.n
        R = tuple(
            tuple(simplify(mul(self.R[m][j], factors[j])) for j in range(n))
            for m in range(n)
        )
        return Frame(self.vars, R, self.domain, self.base, name=self.name)


def make_frame(names, entries, domain, base, name="", tols=None):
    """Build and validate a frame. `entries` is an n x n grid of expression
    strings or Exprs with entries[m][j] = component m of field j."""
    tols = tols or Tolerances()
    names = tuple(names)
    n = len(names)
    if len(entries) != n or any(len(row) != n for row in entries):
        raise GeometryError(f"frame matrix must be {n}x{n}")
    R = tuple(
        tuple(
            simplify(e) if isinstance(e, Expr) else parse_expr(e, names)
            for e in row
        )
        for row in entries
    )
    frame = Frame(names, R, tuple(tuple(map(float, b)) for b in domain),
                  tuple(float(b) for b in base), name=name)
    for v, (lo, hi) in zip(frame.base, frame.domain):
        if not lo <= v <= hi:
            raise GeometryError(f"base point {frame.base} outside domain box")
    _check_nondegenerate(frame, tols)
    return frame


def _check_nondegenerate(frame, tols):
    det = sym_det([list(row) for row in frame.R])
    pts = np.vstack([frame.samples(tols), np.array(frame.base)[None, :]])
    env = env_from_points(frame.vars, pts)
    dvals = evaluate_array(det, env)
    norm = np.zeros(len(pts))
    for row in frame.R:
        for e in row:
            norm += evaluate_array(e, env) ** 2
    scale = np.sqrt(norm / frame.n) ** frame.n
    bad = np.abs(dvals) <= tols.rank_tol * np.maximum(scale, 1e-300)
    if np.any(bad):
        raise GeometryError(
            f"frame degenerate: |det R| below tolerance at {int(bad.sum())} sample point(s)"
        )


# ---------------------------------------------------------------------------
# connection

@dataclass
class Connection:
    """Coframe, structure coefficients and connection coefficients of a frame.

    Index convention: L[i][j] is row i / column j of the inverse matrix,
    c[k][i][j] and Gamma[k][i][j] carry the upper index first.
    """

    frame: Frame
    L: tuple
    c: tuple
    Gamma: tuple

    @property
    def n(self):
        return self.frame.n


def directional_derivative(frame, i, e):
    """Derivative of expression e along frame field i."""
    total = ZERO
    for m, nm in enumerate(frame.vars):
        total = add(total, mul(frame.R[m][i], differentiate(e, nm)))
    return simplify(total)


def invert_frame(frame, tols=None):
    """Symbolic coframe L = R^{-1} via the adjugate; n <= 4 only."""
    tols = tols or Tolerances()
    if frame.n > 4:
        raise GeometryError("symbolic inversion restricted to n <= 4")
    L = sym_inverse([list(row) for row in frame.R])
    pts = frame.samples(tols)
    env = env_from_points(frame.vars, pts)
    worst = 0.0
    for i in range(frame.n):
        for j in range(frame.n):
            acc = np.zeros(len(pts))
            for k in range(frame.n):
                acc += evaluate_array(frame.R[i][k], env) * evaluate_array(L[k][j], env)
            acc -= 1.0 if i == j else 0.0
            worst = max(worst, float(np.max(np.abs(acc))))
    if worst > tols.inverse_tol:
        raise GeometryError(f"R*L - I residual {worst:.3e} exceeds {tols.inverse_tol:.1e}")
    return tuple(tuple(row) for row in L)


def structure_coefficients(frame, L):
    """c[k][i][j] from the commutators, antisymmetric by construction."""
    n = frame.n
    c = [[[ZERO] * n for _ in range(n)] for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            bracket = [
                sub(
                    directional_derivative(frame, i, frame.R[m][j]),
                    directional_derivative(frame, j, frame.R[m][i]),
                )
                for m in range(n)
            ]
            for k in range(n):
                e = simplify(sum((mul(L[k][m], bracket[m]) for m in range(n)), ZERO))
                c[k][i][j] = e
                c[k][j][i] = simplify(neg(e))
    return tuple(tuple(tuple(row) for row in plane) for plane in c)


def christoffel(frame, L):
    """Connection coefficients Gamma[k][i][j] = L^k (D R_j) R_i of the flat
    coordinate connection expressed in the frame."""
    n = frame.n
    DR = [
        [[differentiate(frame.R[m][j], nm) for nm in frame.vars] for m in range(n)]
        for j in range(n)
    ]
    G = [[[ZERO] * n for _ in range(n)] for _ in range(n)]
    for j in range(n):
        for i in range(n):
            vec = [
                sum((mul(DR[j][m][q], frame.R[q][i]) for q in range(n)), ZERO)
                for m in range(n)
            ]
            for k in range(n):
                G[k][i][j] = simplify(sum((mul(L[k][m], vec[m]) for m in range(n)), ZERO))
    return tuple(tuple(tuple(row) for row in plane) for plane in G)


def build_connection(frame, tols=None):
    tols = tols or Tolerances()
    L = invert_frame(frame, tols)
    c = structure_coefficients(frame, L)
    G = christoffel(frame, L)
    return Connection(frame, L, c, G)


@dataclass
class FlatnessReport:
    max_torsion: float
    max_curvature: float

    def ok(self, tol):
        return self.max_torsion < tol and self.max_curvature < tol


def check_flat_symmetric(conn, points):
    """Residuals of the symmetry and flatness identities at the given points.
    These hold identically for the flat coordinate connection; a violation
    indicates a pipeline bug."""
    frame, c, G = conn.frame, conn.c, conn.Gamma
    n = conn.n
    env = env_from_points(frame.vars, np.asarray(points, dtype=float))
    max_t = 0.0
    for i in range(n):
        for k in range(n):
            for m in range(k + 1, n):
                res = sub(c[i][k][m], sub(G[i][k][m], G[i][m][k]))
                max_t = max(max_t, float(np.max(np.abs(evaluate_array(res, env)))))
    max_r = 0.0
    for j in range(n):
        for i in range(n):
            for k in range(n):
                for m in range(k + 1, n):
                    lhs = sub(
                        directional_derivative(frame, m, G[j][k][i]),
                        directional_derivative(frame, k, G[j][m][i]),
                    )
                    rhs = ZERO
                    for s in range(n):
                        rhs = add(rhs, mul(G[j][k][s], G[s][m][i]))
                        rhs = sub(rhs, mul(G[j][m][s], G[s][k][i]))
                        rhs = sub(rhs, mul(c[s][k][m], G[j][s][i]))
                    res = sub(lhs, rhs)
                    max_r = max(max_r, float(np.max(np.abs(evaluate_array(res, env)))))
    return FlatnessReport(max_t, max_r)


def tensor_scale(tensor, env):
    """Largest sampled magnitude over all entries (used to scale zero tests)."""
    worst = 0.0
    for plane in tensor:
        for row in plane:
            for e in row:
                worst = max(worst, float(np.max(np.abs(evaluate_array(e, env)))))
    return worst


def is_rich(conn, tols=None):
    """Every pair of fields in involution: c^k_ij = 0 for k not in {i,j}."""
    tols = tols or Tolerances()
    pts = conn.frame.samples(tols)
    env = env_from_points(conn.frame.vars, pts)
    scale = tensor_scale(conn.c, env)
    n = conn.n
    for i in range(n):
        for j in range(n):
            for k in range(n):
                if k in (i, j) or i == j:
                    continue
                vals = evaluate_array(conn.c[k][i][j], env)
                if not is_zero_sampled(vals, tols.zero_tol, scale):
                    return False
    return True


def is_orthogonal(frame, tols=None):
    tols = tols or Tolerances()
    pts = frame.samples(tols)
    env = env_from_points(frame.vars, pts)
    cols = [
        [evaluate_array(frame.R[m][j], env) for m in range(frame.n)]
        for j in range(frame.n)
    ]
    scale = max(float(np.max(np.abs(v))) for col in cols for v in col) ** 2
    for i in range(frame.n):
        for j in range(i + 1, frame.n):
            dot = sum(cols[i][m] * cols[j][m] for m in range(frame.n))
            if not is_zero_sampled(dot, tols.zero_tol, scale):
                return False
    return True


# ---------------------------------------------------------------------------
# Riemann-invariant charts

@dataclass
class RiemannChart:
    """User-supplied coordinates w = rho(u) whose coordinate curves are the
    eigencurves, with the frame rescaled so grad(w^i) . R_j = delta^i_j.

    S[i][j] are the pulled-back frame components in w, and Z[k][i][j] the
    pulled-back connection coefficients.
    """

    frame: Frame          # rescaled to satisfy the normalization
    w_vars: tuple
    rho: tuple            # exprs in u
    rho_inv: tuple        # exprs in w
    w_domain: tuple
    w_base: tuple
    S: tuple
    Z: tuple
    scaling: tuple | None = None   # per-field factors applied, if any

    @property
    def n(self):
        return len(self.w_vars)

    def w_samples(self, tols):
        return sample_box(self.w_domain, tols.samples, tols.seed)

    def u_of_w(self, w_env):
        return {nm: evaluate_array(self.rho_inv[m], w_env)
                for m, nm in enumerate(self.frame.vars)}


def pullback_Z(chart_S, w_vars):
    """Z[k][i][j] = (S^{-1} dS/dw^i)[k][j], computed directly from S."""
    n = len(w_vars)
    Sinv = sym_inverse([list(row) for row in chart_S])
    Z = [[[ZERO] * n for _ in range(n)] for _ in range(n)]
    for i, nm in enumerate(w_vars):
        dS = [[differentiate(chart_S[a][b], nm) for b in range(n)] for a in range(n)]
        M = sym_matmul(Sinv, dS)
        for k in range(n):
            for j in range(n):
                Z[k][i][j] = M[k][j]
    return tuple(tuple(tuple(row) for row in plane) for plane in Z)


def build_chart(frame, rho, rho_inv, w_vars, w_domain, w_base, tols=None):
    """Verify a user-supplied chart against the frame and pull back the
    connection. The frame is rescaled field-by-field when the chart is valid
    but the normalization constant differs from one."""
    tols = tols or Tolerances()
    n = frame.n
    w_vars = tuple(w_vars)
    rho = tuple(simplify(e) if isinstance(e, Expr) else parse_expr(e, frame.vars) for e in rho)
    rho_inv = tuple(simplify(e) if isinstance(e, Expr) else parse_expr(e, w_vars) for e in rho_inv)

    w_pts = sample_box(w_domain, tols.samples, tols.seed)
    w_env = env_from_points(w_vars, w_pts)
    u_env = {nm: evaluate_array(rho_inv[m], w_env) for m, nm in enumerate(frame.vars)}

    # round trip rho(rho_inv(w)) = w
    for i, nm in enumerate(w_vars):
        back = evaluate_array(rho[i], u_env)
        err = float(np.max(np.abs(back - w_env[nm])))
        if err > tols.chart_tol:
            raise ChartError(f"rho o rho_inv differs from identity by {err:.3e} in {nm}")

    # normalization grad(w^i) . R_j
    diag_exprs = []
    for i in range(n):
        gi = grad(rho[i], frame.vars)
        for j in range(n):
            dot = simplify(sum((mul(gi[m], frame.R[m][j]) for m in range(n)), ZERO))
            vals = evaluate_array(dot, u_env)
            if i == j:
                diag_exprs.append(dot)
                if np.any(np.abs(vals) < 1e-12):
                    raise ChartError(f"normalization factor grad(w^{i+1}).R_{i+1} vanishes")
            elif float(np.max(np.abs(vals))) > tols.chart_tol:
                raise ChartError(
                    f"chart not adapted to frame: grad(w^{i+1}).R_{j+1} != 0"
                )

    scaling = None
    diag_vals = [evaluate_array(e, u_env) for e in diag_exprs]
    if any(float(np.max(np.abs(v - 1.0))) > tols.chart_tol for v in diag_vals):
        scaling = tuple(simplify(div(const(1.0), d)) for d in diag_exprs)
        frame = frame.scaled(scaling)

    u_to_w = {nm: rho_inv[m] for m, nm in enumerate(frame.vars)}
    S = tuple(
        tuple(simplify(substitute(frame.R[a][b], u_to_w)) for b in range(n))
        for a in range(n)
    )
    Z = pullback_Z(S, w_vars)

    chart = RiemannChart(frame, w_vars, rho, rho_inv,
                         tuple(tuple(map(float, b)) for b in w_domain),
                         tuple(float(b) for b in w_base), S, Z, scaling)
    _crosscheck_Z(chart, tols, w_env, u_env)
    return chart


def _crosscheck_Z(chart, tols, w_env, u_env):
    """Z computed from S must agree with Gamma of the scaled frame composed
    with rho_inv, and must be symmetric in the lower indices."""
    conn = build_connection(chart.frame, tols)
    n = chart.n
    worst = 0.0
    for k in range(n):
        for i in range(n):
            for j in range(n):
                zv = evaluate_array(chart.Z[k][i][j], w_env)
                gv = evaluate_array(conn.Gamma[k][i][j], u_env)
                worst = max(worst, float(np.max(np.abs(zv - gv))))
                sym = evaluate_array(chart.Z[k][j][i], w_env)
                worst = max(worst, float(np.max(np.abs(zv - sym))))
    if worst > 100 * tols.chart_tol:
        raise ChartError(f"pulled-back connection inconsistent (residual {worst:.3e})")
