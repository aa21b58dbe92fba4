"""Numerical integration of the reduced systems and flux reconstruction.

Three integration geometries:
  * Frobenius systems sweep the coordinate axes of the grid, converting
    frame-directional derivatives to coordinate derivatives through the
    coframe at every stage point.
  * The two-eigenvalue n=3 case integrates along flows of the frame fields
    themselves (the reduced equations are exact along those flows) and
    resamples the resulting trajectory cloud onto the grid.
  * Rich systems sweep the axes of the Riemann-invariant grid unknown by
    unknown, seeding each from its own data line; coupled unknowns are
    relaxed to a joint fixed point (one ordered pass suffices when the
    driver dependencies are acyclic, which covers every bundled example).

The flux is recovered by composite-trapezoid integration along axis-ordered
staircase paths from the base node, checked against the reversed path order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .expr import Expr, EvalDomainError, evaluate_array, evaluate_many
from .geometry import RiemannChart, Tolerances, env_from_points, sample_box
from .analysis import CaseReport, ReducedSystem


class IntegrationError(Exception):
    pass


# ---------------------------------------------------------------------------
# grids

@dataclass
class Grid:
    vars: tuple
    axes: tuple            # one strictly increasing uniform array per axis
    base_index: tuple

    @property
    def shape(self):
        return tuple(len(a) for a in self.axes)

    @property
    def dim(self):
        return len(self.axes)

    @property
    def base_values(self):
        return tuple(float(a[i]) for a, i in zip(self.axes, self.base_index))

    def spacing(self, ax):
        return float(self.axes[ax][1] - self.axes[ax][0])

    def mesh_env(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return {nm: m for nm, m in zip(self.vars, mesh)}

    def nodes(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)


def make_grid(names, domain, resolution, base) -> Grid:
    axes = []
    for (lo, hi), r in zip(domain, resolution):
        r = int(r)
        if r < 2:
            raise IntegrationError("grid needs at least 2 nodes per axis")
        axes.append(np.linspace(float(lo), float(hi), r))
    base_index = tuple(int(np.argmin(np.abs(a - b))) for a, b in zip(axes, base))
    return Grid(tuple(names), tuple(axes), base_index)


@dataclass
class InitialData:
    kind: str                                  # 'frobenius' | 'iib' | 'darboux' | 'trivial'
    constants: dict = field(default_factory=dict)
    functions: dict = field(default_factory=dict)   # name -> (Expr, parameter var)

    def describe(self):
        parts = [f"{k}={v:g}" for k, v in sorted(self.constants.items())]
        parts += [f"{k}({v[1]})={v[0]}" for k, v in sorted(self.functions.items())]
        return f"{self.kind}: " + ", ".join(parts)


@dataclass
class SolutionField:
    grid: Grid
    lambdas: np.ndarray                        # (n, *shape), original index order
    case: CaseReport | None
    chart: RiemannChart | None = None
    flux: np.ndarray | None = None
    residuals: dict = field(default_factory=dict)
    data_desc: str = ""

    @property
    def n(self):
        return self.lambdas.shape[0]

    def u_arrays(self):
        """State coordinates per grid node (pulled back through the chart
        when the grid lives in Riemann invariants)."""
        env = self.grid.mesh_env()
        if self.chart is None:
            return [env[nm] for nm in self.grid.vars]
        return [evaluate_array(e, env) for e in self.chart.rho_inv]


# ---------------------------------------------------------------------------
# axis-sweep machinery

def _rk4(rhs, t0, y, h, nsub):
    for s in range(nsub):
        t = t0 + s * h
        k1 = rhs(t, y)
        k2 = rhs(t + h / 2, y + (h / 2) * k1)
        k3 = rhs(t + h / 2, y + (h / 2) * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def _axis_march(fields, grid, axis, done_axes, make_rhs, substeps):
    """Extend `fields` (m, *shape) along `axis` from the base slab. The slab
    spans the axes in done_axes; all remaining axes sit at their base index.
    make_rhs(coords) -> rhs(t, y) with y of shape (m, K)."""
    dim = grid.dim
    m = fields.shape[0]
    rest = [ax for ax in range(dim) if ax != axis and ax not in done_axes]
    order = [axis] + list(done_axes) + rest
    view = np.moveaxis(fields, [1 + ax for ax in order], range(1, dim + 1))
    base_rest = tuple(grid.base_index[ax] for ax in rest)
    done_shape = tuple(grid.shape[ax] for ax in done_axes)
    K = int(np.prod(done_shape)) if done_shape else 1

    coords = {}
    if done_axes:
        mesh = np.meshgrid(*[grid.axes[ax] for ax in done_axes], indexing="ij")
        for pos, ax in enumerate(done_axes):
            coords[grid.vars[ax]] = mesh[pos].reshape(K)
    for ax in rest:
        coords[grid.vars[ax]] = np.full(K, grid.axes[ax][grid.base_index[ax]])
    rhs = make_rhs(coords, grid.vars[axis])

    def slab(i):
        sl = (slice(None), i) + tuple(slice(None) for _ in done_axes) + base_rest
        return view[sl].reshape(m, K)

    def set_slab(i, vals):
        sl = (slice(None), i) + tuple(slice(None) for _ in done_axes) + base_rest
        view[sl] = vals.reshape((m,) + done_shape)

    x = grid.axes[axis]
    i0 = grid.base_index[axis]
    for direction in (1, -1):
        i = i0
        while 0 <= i + direction < len(x):
            y = slab(i)
            h = (x[i + direction] - x[i]) / substeps
            y = _rk4(rhs, x[i], y, h, substeps)
            set_slab(i + direction, y)
            i += direction


# ---------------------------------------------------------------------------
# Frobenius integration (all first derivatives of all unknowns prescribed)

def integrate_frobenius(red: ReducedSystem, data: InitialData, grid: Grid,
                        tols: Tolerances | None = None, substeps: int = 4,
                        axis_order: tuple | None = None) -> np.ndarray:
    """Integrate the two coupled unknowns over the grid, sweeping axes in the
    given order, and verify path-independence against the reversed order.
    Returns the relabeled eigenvalue stack (3, *shape) including the
    reconstructed eliminated eigenvalue in slot 0."""
    tols = tols or Tolerances()
    if red.kind != "Frobenius-IIa":
        raise IntegrationError(f"integrate_frobenius needs a Frobenius system, got {red.kind}")
    frame = red.meta["frame"]
    conn = red.meta["conn"]
    phi = red.rhs_coeffs
    names = ("lambda2", "lambda3")
    y0 = np.array([[float(data.constants[nm])] for nm in names])

    def run(order):
        fields = np.full((2,) + grid.shape, np.nan)
        fields[(slice(None),) + grid.base_index] = y0[:, 0]

        axis_of = {nm: ax for ax, nm in enumerate(grid.vars)}

        def make_rhs(coords, tvar):
            a = axis_of[tvar]
            exprs = [conn.L[i][a] for i in range(3)]
            exprs += [phi[(i, nm)] for i in range(3) for nm in names]

            def rhs(t, y):
                env = dict(coords)
                env[tvar] = np.full(y.shape[1], t)
                vals = evaluate_many(exprs, env)
                diff = y[0] - y[1]
                out = np.zeros_like(y)
                for i in range(3):
                    for s in range(2):
                        out[s] += vals[i] * vals[3 + 2 * i + s] * diff
                return out

            return rhs

        done = []
        for ax in order:
            _axis_march(fields, grid, ax, done, make_rhs, substeps)
            done.append(ax)
        return fields

    order = tuple(axis_order) if axis_order else tuple(range(grid.dim))
    primary = run(order)
    alt = run(tuple(reversed(order)))
    scale = 1.0 + float(np.nanmax(np.abs(primary)))
    path_dev = float(np.nanmax(np.abs(primary - alt))) / scale
    if path_dev > tols.path_tol:
        raise IntegrationError(
            f"axis-order dependence {path_dev:.3e} exceeds path tolerance "
            f"{tols.path_tol:.1e}; compatibility presumably violated"
        )

    env = grid.mesh_env()
    a2 = evaluate_array(red.eliminated["lambda1"]["lambda2"], env)
    a3 = evaluate_array(red.eliminated["lambda1"]["lambda3"], env)
    lam1 = a2 * primary[0] + a3 * primary[1]
    out = np.stack([lam1, primary[0], primary[1]])
    return out, path_dev


# ---------------------------------------------------------------------------
# flow-trajectory integration for the two-eigenvalue n=3 case

def _flow_ensemble(frame, axis, seeds, aux, coeff_expr, march_box, record_box,
                   step, max_steps):
    """March seeds (K,3) along frame field `axis` in both directions with RK4,
    evolving aux['lambda1'] by coeff*(lambda2 - lambda1) and freezing
    aux['lambda2']. Trajectories die when they leave the marching box; states
    inside the recording box are returned as sample blocks."""
    lo = np.array([b[0] for b in march_box])
    hi = np.array([b[1] for b in march_box])
    rlo = np.array([b[0] for b in record_box])
    rhi = np.array([b[1] for b in record_box])

    def rhs(state):
        u = state[:3]
        env = {nm: u[m] for m, nm in enumerate(frame.vars)}
        du = np.stack([evaluate_array(e, env) for e in frame.column(axis)])
        dl1 = evaluate_array(coeff_expr, env) * (state[4] - state[3])
        return np.vstack([du, dl1[None, :], np.zeros((1, state.shape[1]))])

    blocks = []
    for direction in (1.0, -1.0):
        state = np.vstack([seeds.T, aux["lambda1"][None, :], aux["lambda2"][None, :]])
        alive = np.ones(state.shape[1], dtype=bool)
        for _ in range(max_steps):
            if not alive.any():
                break
            s = state[:, alive]
            k1 = rhs(s)
            k2 = rhs(s + direction * step / 2 * k1)
            k3 = rhs(s + direction * step / 2 * k2)
            k4 = rhs(s + direction * step * k3)
            s = s + direction * step / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            full = state.copy()
            full[:, alive] = s
            state = full
            inside = np.all((state[:3] >= lo[:, None]) & (state[:3] <= hi[:, None]), axis=0)
            alive = alive & inside
            record = alive & np.all(
                (state[:3] >= rlo[:, None]) & (state[:3] <= rhi[:, None]), axis=0)
            if record.any():
                blocks.append(state[:, record].copy())
    return blocks


def integrate_IIb(red: ReducedSystem, data: InitialData, grid: Grid,
                  tols: Tolerances | None = None, substeps: int = 1,
                  neighbors: int = 32, interp: str = "mls2",
                  stage_margin: float = 1.0) -> np.ndarray:
    """Integrate the reduced two-unknown system along flows of the frame
    fields: the data function fixes lambda1 on the first flow line, lambda2
    obeys an ODE there; both propagate along the second and third flows
    (lambda2 is constant along them). The trajectory cloud is then fitted
    back onto the grid. Returns the relabeled stack (3, *shape) with
    lambda3 = lambda2.

    The first two stages march `stage_margin` box-widths beyond the domain
    so that later flows re-entering the box are seeded; the frame and the
    data function must remain evaluable on that enlarged region.
    """
    tols = tols or Tolerances()
    if red.kind != "Reduced-IIb":
        raise IntegrationError(f"integrate_IIb needs a reduced two-unknown system, got {red.kind}")
    frame = red.meta["frame"]
    g331 = red.rhs_coeffs[(0, "lambda2")]
    g112 = red.rhs_coeffs[(1, "lambda1")]
    g113 = red.rhs_coeffs[(2, "lambda1")]
    phi_expr, phi_var = data.functions["lambda1_line"]
    lam2_bar = float(data.constants["lambda2"])

    box = list(zip([a[0] for a in grid.axes], [a[-1] for a in grid.axes]))
    widths = [b[1] - b[0] for b in box]
    min_dx = min(grid.spacing(ax) for ax in range(grid.dim))
    step = min_dx / (2.0 * substeps)
    wide = [(b[0] - stage_margin * w, b[1] + stage_margin * w)
            for b, w in zip(box, widths)]
    tight = [(b[0] - step, b[1] + step) for b in box]
    diam = float(np.linalg.norm([b[1] - b[0] for b in wide]))
    max_steps = int(4 * diam / step) + 8

    # stage 1: the first flow line through the (snapped) base point, with
    # lambda1 given by the data function of the flow parameter
    base = np.array(grid.base_values)

    def rhs1(t, state):
        u = state[:3]
        env = {nm: u[m] for m, nm in enumerate(frame.vars)}
        du = np.stack([evaluate_array(e, env) for e in frame.column(0)])
        lam1 = evaluate_array(phi_expr, {phi_var: np.full(u.shape[1], t)})
        dl2 = evaluate_array(g331, env) * (lam1 - state[3])
        return np.vstack([du, dl2[None, :]])

    line = []
    lo_w = np.array([b[0] for b in wide])
    hi_w = np.array([b[1] for b in wide])
    for direction in (1.0, -1.0):
        state = np.concatenate([base, [lam2_bar]])[:, None]
        t = 0.0
        lam1_0 = float(evaluate_array(phi_expr, {phi_var: np.array([0.0])})[0])
        line.append((state[:3, 0].copy(), lam1_0, state[3, 0]))
        for _ in range(max_steps):
            state = _rk4(rhs1, t, state, direction * step, 1)
            t += direction * step
            u = state[:3, 0]
            if np.any(u < lo_w) or np.any(u > hi_w):
                break
            lam1_t = float(evaluate_array(phi_expr, {phi_var: np.array([t])})[0])
            line.append((u.copy(), lam1_t, state[3, 0]))

    pts1 = np.array([p for p, _, _ in line])
    lam1_1 = np.array([v for _, v, _ in line])
    lam2_1 = np.array([v for _, _, v in line])

    # stage 2 marches and records over the enlarged region so that stage 3
    # finds seeds for every flow through the box; stage 3 marches the same
    # region but only its in-box samples feed the fit
    def sweep(seeds, l1, l2, axis, coeff, record_box):
        blocks = _flow_ensemble(frame, axis, seeds, {"lambda1": l1, "lambda2": l2},
                                coeff, wide, record_box, step, max_steps)
        if not blocks:
            return seeds, l1, l2
        extra = np.concatenate(blocks, axis=1)
        P = np.vstack([seeds, extra[:3].T])
        return P, np.concatenate([l1, extra[3]]), np.concatenate([l2, extra[4]])

    P, l1, l2 = sweep(pts1, lam1_1, lam2_1, 1, g112, wide)
    P, l1, l2 = sweep(P, l1, l2, 2, g113, tight)

    # fit on samples near the grid only
    lo_t = np.array([b[0] for b in tight])
    hi_t = np.array([b[1] for b in tight])
    keep = np.all((P >= lo_t) & (P <= hi_t), axis=1)
    P, l1, l2 = P[keep], l1[keep], l2[keep]

    if len(P) < neighbors:
        raise IntegrationError("flow trajectories produced too few samples to resample")
    nodes = grid.nodes()
    tree = cKDTree(P)
    k = min(neighbors, len(P))
    dist, idx = tree.query(nodes, k=k)
    cover = dist[:, 0]
    worst = int(np.argmax(cover))
    if cover[worst] > 2.0 * min_dx:
        raise IntegrationError(
            f"flow trajectories do not cover grid node {tuple(nodes[worst])}"
        )

    lam1_g = _scattered_fit(nodes, P, l1, dist, idx, min_dx, interp)
    lam2_g = _scattered_fit(nodes, P, l2, dist, idx, min_dx, interp)
    shape = grid.shape
    return np.stack([lam1_g.reshape(shape), lam2_g.reshape(shape), lam2_g.reshape(shape)])


def _scattered_fit(nodes, P, vals, dist, idx, scale, interp):
    """Per-node fit over the nearest trajectory samples with inverse-distance
    weights; 'mls2' fits a quadratic model (exact for quadratic fields),
    'idw' is plain Shepard averaging over the closest 8."""
    out = np.empty(len(nodes))
    eps = 1e-3 * scale
    if interp == "idw":
        d = dist[:, :8]
        w = 1.0 / (d + eps) ** 2
        v = vals[idx[:, :8]]
        return np.sum(w * v, axis=1) / np.sum(w, axis=1)
    if interp != "mls2":
        raise IntegrationError(f"unknown interpolation mode {interp!r}")
    dim = P.shape[1]
    pairs = [(a, b) for a in range(dim) for b in range(a, dim)]
    ncol = 1 + dim + len(pairs)
    for r, node in enumerate(nodes):
        nb = idx[r]
        d = (P[nb] - node) / scale
        w = 1.0 / (dist[r] + eps)
        A = np.empty((len(nb), ncol))
        A[:, 0] = 1.0
        A[:, 1:1 + dim] = d
        for c, (a, b) in enumerate(pairs):
            A[:, 1 + dim + c] = d[:, a] * d[:, b]
        Aw = A * w[:, None]
        bw = vals[nb] * w
        coef, *_ = np.linalg.lstsq(Aw, bw, rcond=None)
        out[r] = coef[0]
    return out


# ---------------------------------------------------------------------------
# Darboux integration on the Riemann-invariant grid

def _eval_coeff_limit(coeff, env, grid):
    """Evaluate a coefficient, falling back to a one-sided limit when an
    unsimplified expression has a removable singularity on the box boundary:
    nudge every coordinate toward the box interior by eps and eps/2 and
    Richardson-extrapolate, requiring the two values to agree."""
    try:
        return evaluate_array(coeff, env)
    except EvalDomainError as err:
        mids = {nm: 0.5 * (ax[0] + ax[-1]) for nm, ax in zip(grid.vars, grid.axes)}
        widths = {nm: (ax[-1] - ax[0]) for nm, ax in zip(grid.vars, grid.axes)}

        def nudged(eps_frac):
            out = {}
            for nm, vals in env.items():
                d = np.where(mids[nm] >= vals, 1.0, -1.0)
                out[nm] = vals + d * eps_frac * widths[nm]
            return out

        try:
            v1 = evaluate_array(coeff, nudged(1e-6))
            v2 = evaluate_array(coeff, nudged(5e-7))
        except EvalDomainError:
            raise err from None
        if np.max(np.abs(v2 - v1)) > 1e-6 * (1.0 + np.max(np.abs(v2))):
            raise err from None
        return 2.0 * v2 - v1


def integrate_darboux(red: ReducedSystem, data: InitialData, grid: Grid,
                      tols: Tolerances | None = None, substeps: int = 4,
                      max_passes: int = 16) -> np.ndarray:
    """Cascade integration of the constraint-free rich system. Every unknown
    is seeded on its own data line (or at the base node for the merged
    multiplicity classes) and filled over the grid by sweeping its prescribed
    axes in ascending order; the unknowns are iterated in driver-dependency
    order to a joint fixed point. Returns (n, *shape) eigenvalue grids in
    the original index order."""
    tols = tols or Tolerances()
    if red.kind != "Darboux-Rich":
        raise IntegrationError(f"integrate_darboux needs a rich system, got {red.kind}")
    chart: RiemannChart = red.meta["chart"]
    n = chart.n
    free = red.meta["free"]
    sets = red.meta["sets"]
    rhs = red.rhs_coeffs
    driver = red.meta["driver"]

    fields = {}
    for j in free:
        nm = f"kappa{j + 1}"
        e, pv = data.functions[nm]
        axis_vals = evaluate_array(e, {pv: grid.axes[j]})
        shape = [1] * n
        shape[j] = len(grid.axes[j])
        fields[nm] = np.broadcast_to(axis_vals.reshape(shape), grid.shape).copy()
    for a in range(len(sets)):
        nm = f"h{a + 1}"
        fields[nm] = np.full(grid.shape, float(data.constants[nm]))

    order = _dependency_order(red, grid, tols)

    def fill(nm, current):
        vals = np.full((1,) + grid.shape, np.nan)
        if nm.startswith("kappa"):
            j = int(nm[5:]) - 1
            e, pv = data.functions[nm]
            line = evaluate_array(e, {pv: grid.axes[j]})
            sl = [grid.base_index[ax] for ax in range(n)]
            sl[j] = slice(None)
            vals[(0,) + tuple(sl)] = line
            done = [j]
        else:
            vals[(0,) + grid.base_index] = float(data.constants[nm])
            done = []
        for ax in range(n):
            if (ax, nm) not in rhs:
                continue
            drv_name = driver[(ax, nm)]
            coeff = rhs[(ax, nm)]
            in_own_set = drv_name == nm
            drv_field = current[drv_name]

            def make_rhs(coords, tvar, _coeff=coeff, _drv=drv_field, _ax=ax,
                         _self=in_own_set):
                lines = _driver_lines(_drv, grid, _ax, coords, done)

                def f(t, y):
                    env = dict(coords)
                    env[tvar] = np.full(y.shape[1], t)
                    c = _eval_coeff_limit(_coeff, env, grid)
                    d = y[0] if _self else _interp_lines(grid.axes[_ax], lines, t)
                    return (c * (d - y[0]))[None, :]

                return f

            _axis_march(vals, grid, ax, done, make_rhs, substeps)
            if in_own_set:
                # the multiplicity representative must stay exactly constant
                # along axes inside its own index set
                ref = np.take(vals, [grid.base_index[ax]], axis=1 + ax)
                drift = np.nanmax(np.abs(vals - ref))
                if drift > 1e-10:
                    raise IntegrationError(
                        f"{nm} drifted {drift:.3e} along an axis inside its own "
                        "multiplicity class; must be exactly preserved"
                    )
            done.append(ax)
        return vals[0]

    converged = False
    for _ in range(max_passes):
        delta = 0.0
        for nm in order:
            new = fill(nm, fields)
            scale = 1.0 + float(np.nanmax(np.abs(new)))
            delta = max(delta, float(np.nanmax(np.abs(new - fields[nm]))) / scale)
            fields[nm] = new
        if delta <= 1e-12:
            converged = True
            break
    if not converged:
        raise IntegrationError(
            f"coupled unknowns did not reach a fixed point in {max_passes} passes "
            f"(last change {delta:.3e})"
        )

    lambdas = np.empty((n,) + grid.shape)
    for j in free:
        lambdas[j] = fields[f"kappa{j + 1}"]
    for a, A in enumerate(sets):
        for j in A:
            lambdas[j] = fields[f"h{a + 1}"]
    return lambdas


def _driver_lines(drv_field, grid, axis, coords, done_axes):
    """Driver values along the marching axis for every transverse position,
    shaped (K, n_axis)."""
    dim = grid.dim
    rest = [ax for ax in range(dim) if ax != axis and ax not in done_axes]
    order = [axis] + list(done_axes) + rest
    view = np.moveaxis(drv_field, order, range(dim))
    sl = (slice(None),) + tuple(slice(None) for _ in done_axes) + tuple(
        grid.base_index[ax] for ax in rest
    )
    lines = view[sl]
    K = int(np.prod(lines.shape[1:])) if lines.ndim > 1 else 1
    return lines.reshape(len(grid.axes[axis]), K).T


def _interp_lines(x, lines, t):
    """Cubic Lagrange interpolation of per-line nodal values at scalar t."""
    N = len(x)
    if N < 4:
        j = min(max(int(np.searchsorted(x, t)) - 1, 0), N - 2)
        th = (t - x[j]) / (x[j + 1] - x[j])
        return (1 - th) * lines[:, j] + th * lines[:, j + 1]
    j = min(max(int(np.searchsorted(x, t)) - 1, 0), N - 2)
    j0 = min(max(j - 1, 0), N - 4)
    xs = x[j0:j0 + 4]
    out = np.zeros(lines.shape[0])
    for a in range(4):
        w = 1.0
        for b in range(4):
            if a != b:
                w *= (t - xs[b]) / (xs[a] - xs[b])
        out += w * lines[:, j0 + a]
    return out


def _dependency_order(red, grid, tols):
    """Topological order of unknowns by driver dependence (Kahn); cycles fall
    back to declaration order and rely on the fixed-point passes."""
    names = list(red.unknown_names)
    pts = sample_points_for(red, tols)
    deps = {nm: set() for nm in names}
    for (ax, nm), coeff in red.rhs_coeffs.items():
        drv = red.meta["driver"][(ax, nm)]
        if drv == nm:
            continue
        vals = evaluate_array(coeff, pts)
        if float(np.max(np.abs(vals))) > tols.zero_tol:
            deps[nm].add(drv)
    order = []
    ready = [nm for nm in names if not deps[nm]]
    pending = {nm: set(d) for nm, d in deps.items() if d}
    while ready:
        nm = ready.pop(0)
        order.append(nm)
        for other, d in list(pending.items()):
            d.discard(nm)
            if not d:
                ready.append(other)
                del pending[other]
    for nm in names:
        if nm not in order:
            order.append(nm)
    return order


def sample_points_for(red, tols):
    chart = red.meta["chart"]
    pts = sample_box(chart.w_domain, tols.samples, tols.seed)
    return env_from_points(chart.w_vars, pts)


# ---------------------------------------------------------------------------
# flux reconstruction and verification

def _coefficient_matrix(sol: SolutionField, conn):
    """A[i][j] on the grid: R diag(lambda) L in state coordinates, or the
    pulled-back frame columns times their eigenvalues on a chart grid."""
    n = sol.n
    env = sol.grid.mesh_env()
    A = np.empty((n, n) + sol.grid.shape)
    if sol.chart is None:
        R = [[evaluate_array(conn.frame.R[i][m], env) for m in range(n)] for i in range(n)]
        L = [[evaluate_array(conn.L[m][j], env) for j in range(n)] for m in range(n)]
        for i in range(n):
            for j in range(n):
                acc = np.zeros(sol.grid.shape)
                for m in range(n):
                    acc += R[i][m] * sol.lambdas[m] * L[m][j]
                A[i, j] = acc
    else:
        S = [[evaluate_array(sol.chart.S[i][j], env) for j in range(n)] for i in range(n)]
        for i in range(n):
            for j in range(n):
                A[i, j] = S[i][j] * sol.lambdas[j]
    return A


def _signed_cumtrapz(arr, x, axis, i0):
    """Trapezoid antiderivative along `axis`, vanishing at index i0, with the
    Euler-Maclaurin endpoint correction -h^2/12 (g'(x) - g'(x_0)) when enough
    nodes exist. Exact for constants; fourth-order accurate otherwise."""
    a = np.moveaxis(arr, axis, -1)
    dx = np.diff(x)
    mids = 0.5 * (a[..., :-1] + a[..., 1:]) * dx
    c = np.concatenate([np.zeros(a.shape[:-1] + (1,)), np.cumsum(mids, axis=-1)], axis=-1)
    if len(x) >= 5:
        h = x[1] - x[0]
        g1 = np.moveaxis(_partial(arr, x, axis), axis, -1)
        c = c - (h * h / 12.0) * g1
    c = c - c[..., i0:i0 + 1]
    return np.moveaxis(c, -1, axis)


def _staircase_potential(A, grid, order):
    """Potential of the 1-form sum_j A[:,j] du^j along the staircase path
    that varies the axes in `order`, earlier axes first."""
    n = A.shape[0]
    F = np.zeros((n,) + grid.shape)
    done = []
    for a in order:
        T = _signed_cumtrapz(A[:, a], grid.axes[a], 1 + a, grid.base_index[a])
        for ax in range(grid.dim):
            if ax != a and ax not in done:
                T = np.take(T, [grid.base_index[ax]], axis=1 + ax)
        F = F + T
        done.append(a)
    return F


def reconstruct_flux(sol: SolutionField, conn, tols: Tolerances | None = None) -> np.ndarray:
    """Path-integrate the coefficient matrix from the base node, normalizing
    the flux to zero there, and cross-check with the reversed path order."""
    tols = tols or Tolerances()
    grid = sol.grid
    A = _coefficient_matrix(sol, conn)
    if np.any(np.isnan(A)):
        raise IntegrationError("eigenvalue field has missing nodes; cannot integrate flux")
    asc = _staircase_potential(A, grid, list(range(grid.dim)))
    desc = _staircase_potential(A, grid, list(range(grid.dim))[::-1])
    diam = float(np.linalg.norm([a[-1] - a[0] for a in grid.axes]))
    dev = float(np.max(np.abs(asc - desc)))
    if dev > tols.curl_tol * max(diam, 1.0):
        raise IntegrationError(
            f"flux path-dependence {dev:.3e} exceeds curl tolerance; "
            "the eigenvalue field does not satisfy the closedness condition"
        )
    sol.residuals["flux_path_dependence"] = dev
    sol.flux = asc
    return asc


def _interior(arr, width=1):
    sl = tuple(slice(width, -width) for _ in range(arr.ndim))
    return arr[sl]


def _partial(arr, x, axis):
    """Central-difference partial derivative, fourth order where at least
    five nodes are available, second order otherwise. Edge values are filled
    by np.gradient's one-sided stencils; callers restrict to the interior."""
    g2 = np.gradient(arr, x, axis=axis)
    if len(x) < 5:
        return g2
    h = x[1] - x[0]
    a = np.moveaxis(arr, axis, -1)
    out = np.moveaxis(g2, axis, -1).copy()
    out[..., 2:-2] = (
        -a[..., 4:] + 8 * a[..., 3:-1] - 8 * a[..., 1:-3] + a[..., :-4]
    ) / (12 * h)
    return np.moveaxis(out, -1, axis)


def verify(sol: SolutionField, conn, tols: Tolerances | None = None,
           forced_groups: tuple = ()) -> dict:
    """Residual report: finite-difference curl of A, eigenvector defect of the
    finite-differenced flux Jacobian, and strict-hyperbolicity classification
    with the case's forced multiplicities excluded from the gap."""
    tols = tols or Tolerances()
    grid = sol.grid
    n = sol.n
    A = _coefficient_matrix(sol, conn)

    pad = 2 if all(s >= 7 for s in grid.shape) else 1
    curl = 0.0
    for i in range(n):
        for j in range(n):
            for k in range(j + 1, n):
                dAk = _partial(A[i, j], grid.axes[k], k)
                dAj = _partial(A[i, k], grid.axes[j], j)
                curl = max(curl, float(np.max(np.abs(_interior(dAk - dAj, pad)))))

    eigen = 0.0
    if sol.flux is not None:
        Df = np.empty((n, n) + grid.shape)
        for i in range(n):
            for j in range(n):
                Df[i, j] = _partial(sol.flux[i], grid.axes[j], j)
        env = grid.mesh_env()
        if sol.chart is None:
            for m in range(n):
                Rm = np.stack([evaluate_array(conn.frame.R[i][m], env) for i in range(n)])
                norm = np.sqrt(np.sum(Rm ** 2, axis=0))
                defect = np.einsum("ij...,j...->i...", Df, Rm) - sol.lambdas[m] * Rm
                eigen = max(eigen, float(np.max(_interior(
                    np.sqrt(np.sum(defect ** 2, axis=0)) / norm, pad))))
        else:
            # on the chart grid the columns of Dw f must equal kappa^j S_j
            S = np.empty((n, n) + grid.shape)
            for i in range(n):
                for j in range(n):
                    S[i, j] = evaluate_array(sol.chart.S[i][j], env)
            for j in range(n):
                defect = Df[:, j] - sol.lambdas[j] * S[:, j]
                norm = np.sqrt(np.sum(S[:, j] ** 2, axis=0))
                eigen = max(eigen, float(np.max(_interior(
                    np.sqrt(np.sum(defect ** 2, axis=0)) / norm, pad))))

    grouped = set()
    for g in forced_groups:
        grouped |= set(g)
    min_gap = np.inf
    lam_flat = sol.lambdas.reshape(n, -1)
    for i in range(n):
        for j in range(i + 1, n):
            if any(i in g and j in g for g in forced_groups):
                continue
            gap = float(np.min(np.abs(lam_flat[i] - lam_flat[j])))
            min_gap = min(min_gap, gap)
    strict = bool(min_gap > tols.zero_tol) if min_gap is not np.inf else False

    report = {
        "curl": curl,
        "eigen": eigen,
        "min_gap": None if min_gap is np.inf else min_gap,
        "strict_outside_forced": strict,
        "forced_multiplicities": [sorted(int(x) + 1 for x in g) for g in forced_groups],
    }
    sol.residuals.update({"curl": curl, "eigen": eigen})
    return report


# ---------------------------------------------------------------------------
# output

def write_csv(sol: SolutionField, path):
    n = sol.n
    cols = []
    header = []
    for i, u in enumerate(sol.u_arrays(), start=1):
        header.append(f"u{i}")
        cols.append(np.asarray(u).reshape(-1))
    for i in range(n):
        header.append(f"lambda{i + 1}")
        cols.append(sol.lambdas[i].reshape(-1))
    if sol.flux is not None:
        for i in range(n):
            header.append(f"f{i + 1}")
            cols.append(sol.flux[i].reshape(-1))
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*cols):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
