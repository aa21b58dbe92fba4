import numpy as np
import pytest

from eigenframe import cli
from eigenframe.fixtures import fixture_names, load_fixture_job


@pytest.fixture(scope="session")
def corpus():
    """Session-cached analysis bundles and solutions for the bundled
    example configurations (they are expensive to rebuild per test)."""
    bundles = {}
    solutions = {}

    def analyze(name):
        if name not in bundles:
            bundles[name] = cli.analyze_pipeline(load_fixture_job(name, cli))
        return bundles[name]

    def solve(name):
        if name not in solutions:
            solutions[name] = cli.solve_pipeline(analyze(name))
        return solutions[name]

    class Corpus:
        names = fixture_names()

        def bundle(self, name):
            return analyze(name)

        def solution(self, name):
            return solve(name)

    return Corpus()


def rng_exprs(count, seed=7, names=("u1", "u2", "u3"), max_depth=4):
    """Deterministic stream of random well-behaved expression trees with
    sample points where they and their derivatives stay moderate."""
    from eigenframe.expr import add, const, div, mul, neg, pw, sub, unary, var

    rng = np.random.default_rng(seed)

    def build(depth):
        roll = rng.random()
        if depth <= 0 or roll < 0.25:
            if rng.random() < 0.5:
                return const(round(float(rng.uniform(0.3, 2.5)), 3))
            return var(str(rng.choice(names)))
        if roll < 0.70:
            op = rng.choice(["add", "sub", "mul", "div"])
            a, b = build(depth - 1), build(depth - 1)
            if op == "add":
                return add(a, b)
            if op == "sub":
                return sub(a, b)
            if op == "mul":
                return mul(a, b)
            return div(a, add(mul(b, b), const(0.5)))      # keep denominators positive
        if roll < 0.82:
            return pw(add(mul(build(depth - 1), build(depth - 1)), const(0.5)),
                      const(float(rng.integers(1, 4))))
        fn = rng.choice(["sin", "cos", "arctan", "exp", "sqrt", "ln", "tan"])
        inner = build(depth - 1)
        if fn in ("sqrt", "ln"):
            inner = add(mul(inner, inner), const(0.5))     # positive argument
        if fn in ("exp", "tan"):
            inner = mul(const(0.3), unary("arctan", inner))  # bounded argument
        return unary(fn, inner)

    out = []
    while len(out) < count:
        out.append(build(max_depth))
    return out


def random_points(count, seed=11, names=("u1", "u2", "u3"), lo=0.4, hi=1.6):
    rng = np.random.default_rng(seed)
    return [{nm: float(rng.uniform(lo, hi)) for nm in names} for _ in range(count)]
