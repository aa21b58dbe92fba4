import numpy as np
import pytest

from eigenframe.expr import const, evaluate_array, parse_expr, var
from eigenframe.geometry import Tolerances, build_connection, env_from_points, make_frame
from eigenframe.analysis import (
    ClassificationError,
    ReductionError,
    TrivialReduction,
    build_lambda_system,
    check_darboux_compat,
    check_frobenius_compat,
    classify_case,
    classify_rank,
    lambda_system_residual,
    reduce_IIa,
    reduce_IIb,
    reduce_rich,
)

TOL = Tolerances()


# ---------------------------------------------------------------------------
# system assembly

def test_euler_constraint_matrix_matches_reference(corpus):
    """The assembled N agrees entry-for-entry with the standard 3x3 layout
    built directly from the connection coefficients."""
    bundle = corpus.bundle("gas_dyn")
    sys_ = bundle.system
    G = bundle.conn.Gamma
    pts = bundle.frame.samples(TOL)
    env = env_from_points(bundle.frame.vars, pts)
    ref_rows = [
        (G[0][2][1], -1.0, G[0][1][2]),     # [Gamma^1_32, -Gamma^1_23]
        (G[1][2][0], +1.0, G[1][0][2]),     # [Gamma^2_31 - Gamma^2_13, Gamma^2_13]
        (G[2][0][1], None, None),
    ]
    N = sys_.N_matrix(env)
    g132 = evaluate_array(G[0][2][1], env)
    g123 = evaluate_array(G[0][1][2], env)
    g231 = evaluate_array(G[1][2][0], env)
    g213 = evaluate_array(G[1][0][2], env)
    g312 = evaluate_array(G[2][0][1], env)
    g321 = evaluate_array(G[2][1][0], env)
    expect = np.stack([
        np.stack([g132, -g123], axis=1),
        np.stack([g231 - g213, g213], axis=1),
        np.stack([g312, g321 - g312], axis=1),
    ], axis=1)
    assert np.max(np.abs(N - expect)) < 1e-12

    # and N carries the common scalar profile (p_v/4)(p_S/p_v)_v [[-2,1],[0,0],[-2,1]]
    v, S = env["v"], env["S"]
    pv = -1.4 * np.exp(S) * v ** -2.4
    q = 1.4 / 1.4 * (1.0 / 1.4) * 0 + (-(1.0 / 1.4))   # (p_S/p_v)_v = -1/gamma
    scalar = pv / 4.0 * q
    pattern = np.array([[-2.0, 1.0], [0.0, 0.0], [-2.0, 1.0]])
    assert np.max(np.abs(N - scalar[:, None, None] * pattern[None])) < 1e-10


def test_pde_coefficient_table_size(corpus):
    for name in corpus.names:
        sys_ = corpus.bundle(name).system
        n = sys_.n
        assert len(sys_.pde_coeffs) == n * (n - 1)
        assert len(sys_.N_rows) == n * (n - 1) * (n - 2) // 2


def test_constant_frame_system_vanishes(corpus):
    sys_ = corpus.bundle("constant_eigenfields").system
    for e in sys_.pde_coeffs.values():
        assert e.kind == "const" and e.value == 0.0
    for _, row in sys_.N_rows:
        for e in row:
            assert e.kind == "const" and e.value == 0.0


def test_rich_rank1_single_relation(corpus):
    bundle = corpus.bundle("rich_rank1")
    pts = bundle.frame.samples(TOL)
    env = env_from_points(bundle.frame.vars, pts)
    N = bundle.system.N_matrix(env)
    # single relation lambda1 = lambda2, i.e. rows proportional to (1, 0)
    for p in range(N.shape[0]):
        for r in range(N.shape[1]):
            row = N[p, r]
            assert abs(row[1]) < 1e-12
    assert bundle.case.rank == 1


# ---------------------------------------------------------------------------
# rank classification

def test_rank_values(corpus):
    expected = {
        "gas_dyn": 1,
        "gas_dyn_rich": 0,
        "nonrich_IIa_trivial": 1,
        "nonrich_IIb_nontrivial": 1,
        "nonrich_IIb_trivial": 1,
        "nonrich_n4_maximalrank": 3,
        "n2": 0,
        "rich_orth": 0,
        "constant_eigenfields": 0,
        "rich_rank1": 1,
        "rich_rank2": 2,
    }
    for name, want in expected.items():
        bundle = corpus.bundle(name)
        assert bundle.case.rank == want, name
        assert bundle.case.rank_constant, name


def test_rank_constancy_error_path(corpus, monkeypatch):
    from eigenframe import analysis

    bundle = corpus.bundle("gas_dyn")

    def fake_rank(sys_, pts, tols=None):
        per = np.ones(len(pts), dtype=int)
        per[:2] = 0
        return analysis.RankInfo(1, False, per)

    monkeypatch.setattr(analysis, "classify_rank", fake_rank)
    with pytest.raises(ClassificationError, match="not constant"):
        analysis.classify_case(bundle.system, TOL)


# ---------------------------------------------------------------------------
# case classification

def test_case_labels(corpus):
    expected = {
        "gas_dyn": "N3-IIa",
        "gas_dyn_rich": "Rich-Rank0",
        "nonrich_IIa_trivial": "N3-IIa",
        "nonrich_IIb_nontrivial": "N3-IIb",
        "nonrich_IIb_trivial": "N3-IIb",
        "nonrich_n4_maximalrank": "MaxRank-Trivial",
        "n2": "Rich-Rank0",
        "rich_orth": "Rich-Rank0",
        "constant_eigenfields": "Rich-Rank0",
        "rich_rank1": "Rich-Constrained",
        "rich_rank2": "MaxRank-Trivial",
    }
    for name, want in expected.items():
        assert corpus.bundle(name).case.case_label == want, name


def test_euler_relation_direction(corpus):
    case = corpus.bundle("gas_dyn").case
    a = np.array(case.alphas)
    a = a / np.max(np.abs(a))
    ref = np.array([1.0, -2.0, 1.0]) / 2.0
    assert min(np.max(np.abs(a - ref)), np.max(np.abs(a + ref))) < 1e-9


def test_alpha_sum_invariant(corpus):
    for name in ("gas_dyn", "nonrich_IIa_trivial", "nonrich_IIb_nontrivial",
                 "nonrich_IIb_trivial"):
        case = corpus.bundle(name).case
        assert abs(sum(case.alphas)) < 1e-9, name


def test_IIa_all_alphas_nonzero_IIb_exactly_one_zero(corpus):
    for name in ("gas_dyn", "nonrich_IIa_trivial"):
        case = corpus.bundle(name).case
        assert all(abs(a) > 1e-9 for a in case.alphas), name
    for name in ("nonrich_IIb_nontrivial", "nonrich_IIb_trivial"):
        case = corpus.bundle(name).case
        zeros = sum(1 for a in case.alphas if abs(a) < 1e-12)
        assert zeros == 1, name
        assert abs(case.alphas[case.relabeling.index(0)]) >= 0  # relabeled slot exists


def test_IIb_relabeling_puts_zero_first(corpus):
    for name in ("nonrich_IIb_nontrivial", "nonrich_IIb_trivial"):
        case = corpus.bundle(name).case
        q = case.relabeling[0]
        assert abs(case.alphas[q]) < 1e-12, name


def test_scaling_invariance_of_classification():
    # rescaling the fields changes the connection but not rank or case
    vars3 = ("u1", "u2", "u3")
    base_entries = [["0", "1", "u2"], ["1", "0", "u3"], ["0", "0", "1"]]
    fr = make_frame(vars3, base_entries, [(0.5, 1.5)] * 3, (1.0, 1.0, 1.0))
    conn = build_connection(fr, TOL)
    case = classify_case(build_lambda_system(conn), TOL)
    scaled = fr.scaled([parse_expr("1 + u1^2", vars3),
                        parse_expr("exp(u2)", vars3),
                        parse_expr("2", vars3)])
    conn2 = build_connection(scaled, TOL)
    case2 = classify_case(build_lambda_system(conn2), TOL)
    assert case.rank == case2.rank
    assert case.case_label == case2.case_label


# ---------------------------------------------------------------------------
# Frobenius reduction

def test_reduce_IIa_coefficient_spot_values(corpus):
    bundle = corpus.bundle("gas_dyn")
    red = bundle.reduced
    G = bundle.case.relabeled_conn.Gamma
    pts = bundle.case.relabeled_frame.samples(TOL)
    env = env_from_points(bundle.frame.vars, pts)
    # the second-direction coefficient of the third eigenvalue is Gamma^3_32
    got = evaluate_array(red.rhs_coeffs[(1, "lambda3")], env)
    want = evaluate_array(G[2][2][1], env)
    assert np.max(np.abs(got - want)) < 1e-12
    # eliminated eigenvalue reconstruction is lambda1 = 2 lambda2 - lambda3
    a2 = evaluate_array(red.eliminated["lambda1"]["lambda2"], env)
    a3 = evaluate_array(red.eliminated["lambda1"]["lambda3"], env)
    assert np.max(np.abs(a2 - 2.0)) < 1e-10
    assert np.max(np.abs(a3 + 1.0)) < 1e-10


def test_frobenius_compat_verdicts(corpus):
    holds = corpus.bundle("gas_dyn")
    fails = corpus.bundle("nonrich_IIa_trivial")
    assert holds.compat.holds and holds.compat.max_residual < 1e-6
    assert not fails.compat.holds and fails.compat.max_residual > 1e-3


def test_frobenius_compat_zero_system_exact():
    # phi identically zero satisfies the compatibility identities exactly
    from eigenframe.analysis import ReducedSystem
    from eigenframe.expr import ZERO

    vars3 = ("u1", "u2", "u3")
    entries = [["1", "0", "0"], ["0", "1", "0"], ["0", "0", "1"]]
    fr = make_frame(vars3, entries, [(-1, 1)] * 3, (0.0, 0.0, 0.0))
    conn = build_connection(fr, TOL)
    phi = {(i, nm): ZERO for i in range(3) for nm in ("lambda2", "lambda3")}
    red = ReducedSystem("Frobenius-IIa", ("lambda2", "lambda3"), phi, {},
                        meta={"frame": fr, "conn": conn})
    verdict = check_frobenius_compat(red, fr.samples(TOL), TOL)
    assert verdict.holds and verdict.max_residual == 0.0


def test_reduce_IIa_rejects_degenerate_symbols(corpus):
    bundle = corpus.bundle("nonrich_IIb_nontrivial")
    with pytest.raises(ReductionError):
        reduce_IIa(bundle.system, bundle.case, TOL)


# ---------------------------------------------------------------------------
# IIb reduction

def test_reduce_IIb_nontrivial_system(corpus):
    bundle = corpus.bundle("nonrich_IIb_nontrivial")
    red = bundle.reduced
    assert red.kind == "Reduced-IIb"
    assert red.eliminated == {"lambda3": "lambda2"}
    # for this frame every governing coefficient vanishes identically
    pts = bundle.case.relabeled_frame.samples(TOL)
    env = env_from_points(bundle.frame.vars, pts)
    for key in ((0, "lambda2"), (1, "lambda1"), (2, "lambda1")):
        assert np.max(np.abs(evaluate_array(red.rhs_coeffs[key], env))) < 1e-12


def test_reduce_IIb_trivial_detection(corpus):
    bundle = corpus.bundle("nonrich_IIb_trivial")
    assert isinstance(bundle.reduced, TrivialReduction)
    assert "1.000e+00" in bundle.reduced.detail


def test_IIb_preconditions_hold_at_samples(corpus):
    bundle = corpus.bundle("nonrich_IIb_nontrivial")
    G = bundle.case.relabeled_conn.Gamma
    pts = bundle.case.relabeled_frame.samples(TOL)
    env = env_from_points(bundle.frame.vars, pts)
    c132 = evaluate_array(G[0][2][1], env) - evaluate_array(G[0][1][2], env)
    assert np.max(np.abs(c132)) < 1e-9
    assert np.max(np.abs(evaluate_array(G[1][2][0], env))) < 1e-9
    assert np.max(np.abs(evaluate_array(G[2][1][0], env))) < 1e-9


# ---------------------------------------------------------------------------
# rich reduction

def test_reduce_rich_rank1_sets(corpus):
    bundle = corpus.bundle("rich_rank1")
    red = bundle.reduced
    assert red.kind == "Darboux-Rich"
    assert red.meta["sets"] == ((0, 1),)
    assert red.meta["free"] == (2,)
    assert "1 functions of 1 variable + 1 constants" == red.meta["family"]


def test_reduce_rich_rank2_all_merge(corpus):
    bundle = corpus.bundle("rich_rank2")
    assert isinstance(bundle.reduced, TrivialReduction)
    assert bundle.case.index_sets == ((0, 1, 2),)


def test_reduce_rich_unconstrained_keeps_all_unknowns(corpus):
    bundle = corpus.bundle("rich_orth")
    red = bundle.reduced
    assert red.meta["sets"] == ()
    assert red.unknown_names == ("kappa1", "kappa2", "kappa3")


def test_reduce_rich_requires_chart(corpus):
    bundle = corpus.bundle("gas_dyn_rich")
    with pytest.raises(ReductionError, match="chart"):
        reduce_rich(bundle.system, TOL)


def test_darboux_compat_corpus(corpus):
    for name in ("n2", "rich_orth", "constant_eigenfields", "rich_rank1"):
        bundle = corpus.bundle(name)
        verdict = check_darboux_compat(bundle.reduced,
                                       bundle.chart.w_samples(TOL), TOL)
        assert verdict.holds, (name, verdict.max_residual)
        assert verdict.max_residual < 1e-6


def test_darboux_compat_constant_frame_exact(corpus):
    bundle = corpus.bundle("constant_eigenfields")
    verdict = check_darboux_compat(bundle.reduced, bundle.chart.w_samples(TOL), TOL)
    assert verdict.max_residual == 0.0


# ---------------------------------------------------------------------------
# invariants

def test_trivial_solution_residual_zero(corpus):
    for name in corpus.names:
        bundle = corpus.bundle(name)
        lam = [const(0.7)] * bundle.system.n
        pts = bundle.system.samples(TOL)
        assert lambda_system_residual(bundle.system, lam, pts) == 0.0, name


def test_case_report_invariants(corpus):
    for name in corpus.names:
        case = corpus.bundle(name).case
        if case.n == 3 and case.rank == 1 and case.alphas is not None:
            assert abs(case.alphas[2] + case.alphas[0] + case.alphas[1]) < 1e-9
        if case.rank == case.n - 1:
            assert case.case_label == "MaxRank-Trivial", name
        if case.case_label == "N3-IIa":
            assert all(abs(a) > 1e-9 for a in case.alphas)
        if case.case_label == "N3-IIb":
            assert sum(1 for a in case.alphas if abs(a) < 1e-12) == 1
