import numpy as np
import pytest

from eigenframe.expr import evaluate_array, parse_expr
from eigenframe.geometry import (
    ChartError,
    GeometryError,
    Tolerances,
    build_chart,
    build_connection,
    check_flat_symmetric,
    env_from_points,
    is_orthogonal,
    is_rich,
    make_frame,
    sample_box,
)

TOL = Tolerances()


def identity_frame(n=3):
    names = tuple(f"u{i+1}" for i in range(n))
    entries = [["1" if i == j else "0" for j in range(n)] for i in range(n)]
    return make_frame(names, entries, [(-1, 1)] * n, (0.0,) * n, name="identity")


def test_identity_frame_inverts_to_identity():
    fr = identity_frame()
    conn = build_connection(fr, TOL)
    for i in range(3):
        for j in range(3):
            e = conn.L[i][j]
            assert e.kind == "const" and e.value == (1.0 if i == j else 0.0)


def test_sample_box_deterministic_and_interior():
    a = sample_box([(0.0, 1.0), (2.0, 4.0)], 50, seed=0)
    b = sample_box([(0.0, 1.0), (2.0, 4.0)], 50, seed=0)
    c = sample_box([(0.0, 1.0), (2.0, 4.0)], 50, seed=1)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.all(a[:, 0] > 0) and np.all(a[:, 0] < 1)
    assert np.all(a[:, 1] > 2) and np.all(a[:, 1] < 4)


def test_degenerate_frame_rejected():
    with pytest.raises(GeometryError, match="degenerate"):
        make_frame(("u1", "u2"), [["u1", "u1"], ["1", "1"]], [(0.5, 1)] * 2, (0.7, 0.7))


def test_dimension_limit():
    n = 5
    names = tuple(f"u{i+1}" for i in range(n))
    entries = [["1" if i == j else "0" for j in range(n)] for i in range(n)]
    fr = make_frame(names, entries, [(-1, 1)] * n, (0.0,) * n)
    with pytest.raises(GeometryError, match="n <= 4"):
        build_connection(fr, TOL)


def test_base_point_must_lie_in_box():
    with pytest.raises(GeometryError, match="outside"):
        make_frame(("u1",), [["1"]], [(0.0, 1.0)], (2.0,))


# ---------------------------------------------------------------------------
# reference frames from the corpus

def test_euler_coframe_row_two(corpus):
    # L^2 = [0, 0, 1/p_v]
    bundle = corpus.bundle("gas_dyn")
    conn = bundle.conn
    pts = bundle.frame.samples(TOL)
    env = env_from_points(bundle.frame.vars, pts)
    pv = -1.4 * np.exp(env["S"]) * env["v"] ** -2.4
    assert np.max(np.abs(evaluate_array(conn.L[1][0], env))) < 1e-12
    assert np.max(np.abs(evaluate_array(conn.L[1][1], env))) < 1e-12
    assert np.max(np.abs(evaluate_array(conn.L[1][2], env) - 1.0 / pv)) < 1e-10


def test_n2_coframe_matches_invariant_gradients(corpus):
    bundle = corpus.bundle("n2")
    conn = bundle.conn
    pts = bundle.frame.samples(TOL)
    env = env_from_points(bundle.frame.vars, pts)
    u1, u2 = env["u1"], env["u2"]
    expect = [[u2, u1], [-u2 / u1 ** 2, 1.0 / u1]]
    for i in range(2):
        for j in range(2):
            got = evaluate_array(conn.L[i][j], env)
            assert np.max(np.abs(got - expect[i][j])) < 1e-10


def test_inverse_residual_small_everywhere(corpus):
    for name in corpus.names:
        bundle = corpus.bundle(name)
        pts = bundle.frame.samples(TOL)
        env = env_from_points(bundle.frame.vars, pts)
        n = bundle.frame.n
        for i in range(n):
            for j in range(n):
                acc = np.zeros(len(pts))
                for k in range(n):
                    acc += evaluate_array(bundle.frame.R[i][k], env) * \
                        evaluate_array(bundle.conn.L[k][j], env)
                acc -= 1.0 if i == j else 0.0
                assert np.max(np.abs(acc)) < TOL.inverse_tol, name


# ---------------------------------------------------------------------------
# structure coefficients

def test_constant_frame_commutes(corpus):
    bundle = corpus.bundle("constant_eigenfields")
    pts = bundle.frame.samples(TOL)
    env = env_from_points(bundle.frame.vars, pts)
    for plane in bundle.conn.c:
        for row in plane:
            for e in row:
                assert np.max(np.abs(evaluate_array(e, env))) < 1e-14


def test_IIb_frame_bracket_is_second_field(corpus):
    # [r_1, r_3] = r_2, i.e. c^2_13 = 1 and the other coefficients vanish
    bundle = corpus.bundle("nonrich_IIb_nontrivial")
    pts = bundle.frame.samples(TOL)
    env = env_from_points(bundle.frame.vars, pts)
    c = bundle.conn.c
    assert np.max(np.abs(evaluate_array(c[1][0][2], env) - 1.0)) < 1e-12
    assert np.max(np.abs(evaluate_array(c[0][0][2], env))) < 1e-12
    assert np.max(np.abs(evaluate_array(c[2][0][2], env))) < 1e-12


def test_rich_rank1_frame_commutes(corpus):
    bundle = corpus.bundle("rich_rank1")
    pts = bundle.frame.samples(TOL)
    env = env_from_points(bundle.frame.vars, pts)
    for plane in bundle.conn.c:
        for row in plane:
            for e in row:
                assert np.max(np.abs(evaluate_array(e, env))) < 1e-12


def test_structural_antisymmetry(corpus):
    from eigenframe.expr import neg, simplify

    bundle = corpus.bundle("nonrich_IIa_trivial")
    c = bundle.conn.c
    n = bundle.frame.n
    for k in range(n):
        for i in range(n):
            for j in range(i + 1, n):
                assert c[k][j][i] == simplify(neg(c[k][i][j]))
        assert c[k][1][1].kind == "const" and c[k][1][1].value == 0.0


# ---------------------------------------------------------------------------
# connection coefficients

def test_euler_connection_values(corpus):
    bundle = corpus.bundle("gas_dyn")
    G = bundle.conn.Gamma
    pts = bundle.frame.samples(TOL)
    env = env_from_points(bundle.frame.vars, pts)
    v, S = env["v"], env["S"]
    pv = -1.4 * np.exp(S) * v ** -2.4
    pvv = 1.4 * 2.4 * np.exp(S) * v ** -3.4
    # direction 2 leaves the acoustic fields unscaled
    assert np.max(np.abs(evaluate_array(G[1][1][0], env))) < 1e-12   # Gamma^2_21
    assert np.max(np.abs(evaluate_array(G[1][1][2], env))) < 1e-12   # Gamma^2_23
    got = evaluate_array(G[2][2][0], env)                            # Gamma^3_31
    assert np.max(np.abs(got - (-pvv / (4 * pv)))) < 1e-9


def test_rich_rank1_connection_single_component(corpus):
    bundle = corpus.bundle("rich_rank1")
    G = bundle.conn.Gamma
    pts = bundle.frame.samples(TOL)
    env = env_from_points(bundle.frame.vars, pts)
    for k in range(3):
        for i in range(3):
            for j in range(3):
                vals = evaluate_array(G[k][i][j], env)
                if (k, i, j) in ((2, 0, 1), (2, 1, 0)):
                    assert np.max(np.abs(vals + 1.0)) < 1e-12
                else:
                    assert np.max(np.abs(vals)) < 1e-12


def test_constant_frame_connection_vanishes(corpus):
    bundle = corpus.bundle("constant_eigenfields")
    pts = bundle.frame.samples(TOL)
    env = env_from_points(bundle.frame.vars, pts)
    for plane in bundle.conn.Gamma:
        for row in plane:
            for e in row:
                assert e.kind == "const" and e.value == 0.0


def test_flat_symmetric_identities_whole_corpus(corpus):
    for name in corpus.names:
        bundle = corpus.bundle(name)
        assert bundle.flat_report.max_torsion < TOL.identity_tol, name
        assert bundle.flat_report.max_curvature < TOL.identity_tol, name


def test_constant_frame_identities_exact(corpus):
    bundle = corpus.bundle("constant_eigenfields")
    rep = check_flat_symmetric(bundle.conn, bundle.frame.samples(TOL))
    assert rep.max_torsion == 0.0
    assert rep.max_curvature == 0.0


# ---------------------------------------------------------------------------
# richness and orthogonality

def test_richness_flags(corpus):
    expected = {
        "gas_dyn": False,
        "gas_dyn_rich": True,
        "nonrich_IIa_trivial": False,
        "nonrich_IIb_nontrivial": False,
        "nonrich_IIb_trivial": False,
        "nonrich_n4_maximalrank": False,
        "n2": True,
        "rich_orth": True,
        "constant_eigenfields": True,
        "rich_rank1": True,
        "rich_rank2": True,
    }
    for name, want in expected.items():
        assert is_rich(corpus.bundle(name).conn, TOL) == want, name


def test_rank_zero_frames_are_rich(corpus):
    for name in corpus.names:
        bundle = corpus.bundle(name)
        if bundle.case.rank == 0:
            assert bundle.case.rich, name


def test_orthogonal_rich_frame_has_no_distinct_index_Z(corpus):
    bundle = corpus.bundle("rich_orth")
    assert is_orthogonal(bundle.frame, TOL)
    chart = bundle.chart
    env = env_from_points(chart.w_vars, chart.w_samples(TOL))
    for k in range(3):
        for i in range(3):
            for j in range(3):
                if len({k, i, j}) == 3:
                    assert np.max(np.abs(evaluate_array(chart.Z[k][i][j], env))) < 1e-9


# ---------------------------------------------------------------------------
# charts

def test_n2_pullback_values(corpus):
    bundle = corpus.bundle("n2")
    chart = bundle.chart
    env = env_from_points(chart.w_vars, chart.w_samples(TOL))
    z221 = evaluate_array(chart.Z[1][1][0], env)
    assert np.max(np.abs(z221 - 1.0 / (2.0 * env["w1"]))) < 1e-10
    assert np.max(np.abs(evaluate_array(chart.Z[0][0][1], env))) < 1e-12


def test_spherical_pullback_values(corpus):
    bundle = corpus.bundle("rich_orth")
    chart = bundle.chart
    env = env_from_points(chart.w_vars, chart.w_samples(TOL))
    for k, i, j in ((1, 1, 0), (2, 2, 0)):   # Z^2_21 and Z^3_31
        vals = evaluate_array(chart.Z[k][i][j], env)
        assert np.max(np.abs(vals - 1.0 / env["w1"])) < 1e-10


def test_identity_chart_constant_frame_Z_vanishes():
    fr = identity_frame()
    chart = build_chart(fr, ["u1", "u2", "u3"], ["w1", "w2", "w3"],
                        ("w1", "w2", "w3"), [(-1, 1)] * 3, (0.0, 0.0, 0.0), TOL)
    for plane in chart.Z:
        for row in plane:
            for e in row:
                assert e.kind == "const" and e.value == 0.0


def test_chart_rejects_wrong_inverse():
    fr = identity_frame()
    with pytest.raises(ChartError, match="identity"):
        build_chart(fr, ["u1", "u2", "u3"], ["2*w1", "w2", "w3"],
                    ("w1", "w2", "w3"), [(0.5, 1)] * 3, (0.7, 0.7, 0.7), TOL)


def test_chart_rejects_unadapted_frame():
    fr = identity_frame()
    # w1 = u1 + u2 has gradient with a component along the second field
    with pytest.raises(ChartError, match="not adapted"):
        build_chart(fr, ["u1 + u2", "u2", "u3"], ["w1 - w2", "w2", "w3"],
                    ("w1", "w2", "w3"), [(0.5, 1)] * 3, (0.7, 0.7, 0.7), TOL)


def test_chart_rescales_to_normalization(corpus):
    # the helical frame carries a first field of length r; the chart builder
    # must rescale it so the invariant gradients are dual to the fields
    bundle = corpus.bundle("rich_rank2")
    chart = bundle.chart
    assert chart.scaling is not None
    env = env_from_points(chart.w_vars, chart.w_samples(TOL))
    assert np.max(np.abs(evaluate_array(chart.Z[0][1][2], env) + env["w1"])) < 1e-9
    assert np.max(np.abs(evaluate_array(chart.Z[1][0][2], env) - 1.0 / env["w1"])) < 1e-9


def test_chart_cross_checks_gamma_composition(corpus):
    # Z from the pulled-back frame agrees with the connection coefficients
    # composed with the inverse chart at sample points
    bundle = corpus.bundle("rich_rank1")
    chart = bundle.chart
    conn = build_connection(chart.frame, TOL)
    wenv = env_from_points(chart.w_vars, chart.w_samples(TOL))
    uenv = chart.u_of_w(wenv)
    for k in range(3):
        for i in range(3):
            for j in range(3):
                zv = evaluate_array(chart.Z[k][i][j], wenv)
                gv = evaluate_array(conn.Gamma[k][i][j], uenv)
                assert np.max(np.abs(zv - gv)) < 1e-8
