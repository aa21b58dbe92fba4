"""Immutable symbolic expression trees in named real variables.

This is the exact-calculus substrate for the rest of the package: frames,
coframes and connection coefficients are all matrices of these trees, built
once and then evaluated numerically at many sample or grid points.

Simplification is deliberately local (constant folding plus neutral-element
rewrites); all zero-tests downstream are numeric, so no attempt is made at
polynomial or trigonometric canonicalization.
"""

from __future__ import annotations

import math
import re
from typing import Mapping

import numpy as np

UNARY_FUNCS = ("neg", "sqrt", "exp", "ln", "sin", "cos", "tan", "arctan")
BINARY_OPS = ("add", "sub", "mul", "div", "pow")

_CALLABLE = {name: getattr(np, name if name != "ln" else "log") for name in UNARY_FUNCS[1:]}


class ExprError(Exception):
    pass


class ParseError(ExprError):
    """Syntax or identifier error. `offset` is the byte offset into the input."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class EvalDomainError(ExprError):
    """Domain failure during evaluation; carries the offending subtree."""

    def __init__(self, message, subtree):
        super().__init__(f"{message} in subexpression {subtree}")
        self.subtree = subtree


class Expr:
    """One node of an expression tree. Instances are immutable, interned
    through the constructor helpers (structurally equal trees share nodes),
    and therefore cheap to evaluate repeatedly: the evaluators memoize on
    node identity, so shared subtrees are computed once."""

    __slots__ = ("kind", "value", "name", "args", "_hash")

    def __init__(self, kind, value=0.0, name="", args=()):
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "value", value)
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "args", args)
        object.__setattr__(self, "_hash", None)

    def __setattr__(self, *_):
        raise AttributeError("Expr is immutable")

    def __hash__(self):
        h = self._hash
        if h is None:
            h = hash((self.kind, self.value, self.name, self.args))
            object.__setattr__(self, "_hash", h)
        return h

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, Expr):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.value == other.value
            and self.name == other.name
            and self.args == other.args
        )

    def __repr__(self):
        return f"Expr({to_text(self)!r})"

    def __str__(self):
        return to_text(self)

    # Operator sugar so numeric code can combine trees naturally.
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __pow__(self, other):
        return pw(self, _coerce(other))

    def __neg__(self):
        return neg(self)


def _coerce(x):
    if isinstance(x, Expr):
        return x
    return const(x)


_INTERN: dict = {}


def _node(kind, value=0.0, name="", args=()) -> Expr:
    # children are themselves interned, so identity keys suffice
    key = (kind, value, name) + tuple(id(a) for a in args)
    e = _INTERN.get(key)
    if e is None:
        e = Expr(kind, value, name, args)
        _INTERN[key] = e
    return e


def const(v) -> Expr:
    v = float(v)
    if not math.isfinite(v):
        raise ExprError(f"non-finite constant {v!r}")
    return _node("const", value=v)


def var(name: str) -> Expr:
    return _node("var", name=name)


ZERO = const(0.0)
ONE = const(1.0)


def _is_const(e, v=None):
    return e.kind == "const" and (v is None or e.value == v)


# Smart constructors: every rewrite the canonical form guarantees happens
# here, so trees built through them are canonical from the start.

def add(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return _node("add", args=(a, b))


def sub(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    if a == b:
        return ZERO
    return _node("sub", args=(a, b))


def mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a, -1.0):
        return neg(b)
    if _is_const(b, -1.0):
        return neg(a)
    return _node("mul", args=(a, b))


def div(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b) and b.value != 0.0:
        return const(a.value / b.value)
    if _is_const(b, 1.0):
        return a
    if _is_const(b, -1.0):
        return neg(a)
    return _node("div", args=(a, b))


def pw(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 1.0):
        return a
    if _is_const(b, 0.0):
        return ONE
    if _is_const(a) and _is_const(b):
        try:
            v = math.pow(a.value, b.value)
        except (ValueError, OverflowError):
            return _node("pow", args=(a, b))
        if math.isfinite(v):
            return const(v)
    return _node("pow", args=(a, b))


def neg(a: Expr) -> Expr:
    if _is_const(a):
        return const(-a.value)
    if a.kind == "neg":
        return a.args[0]
    return _node("neg", args=(a,))


def unary(fn: str, a: Expr) -> Expr:
    if fn == "neg":
        return neg(a)
    if _is_const(a):
        try:
            v = _fold_unary(fn, a.value)
        except (ValueError, OverflowError):
            v = None
        if v is not None and math.isfinite(v):
            return const(v)
    return _node(fn, args=(a,))


def _fold_unary(fn, x):
    table = {
        "sqrt": math.sqrt,
        "exp": math.exp,
        "ln": math.log,
        "sin": math.sin,
        "cos": math.cos,
        "tan": math.tan,
        "arctan": math.atan,
    }
    return table[fn](x)


_BINARY_CTOR = {"add": add, "sub": sub, "mul": mul, "div": div, "pow": pw}


_SIMPLIFIED: dict = {}


def simplify(e: Expr) -> Expr:
    """Rebuild bottom-up through the smart constructors; idempotent. Results
    are cached by node identity; the cache pins the key object so its id
    cannot be recycled."""
    hit = _SIMPLIFIED.get(id(e))
    if hit is not None and hit[0] is e:
        return hit[1]
    if e.kind in ("const", "var"):
        out = e
    else:
        kids = tuple(simplify(a) for a in e.args)
        if e.kind in _BINARY_CTOR:
            out = _BINARY_CTOR[e.kind](*kids)
        else:
            out = unary(e.kind, kids[0])
    _SIMPLIFIED[id(e)] = (e, out)
    _SIMPLIFIED[id(out)] = (out, out)
    return out


def free_vars(e: Expr) -> set[str]:
    if e.kind == "var":
        return {e.name}
    out: set[str] = set()
    for a in e.args:
        out |= free_vars(a)
    return out


def substitute(e: Expr, mapping: Mapping[str, Expr]) -> Expr:
    """Replace variables by expressions, re-canonicalizing on the way up."""
    if e.kind == "var":
        return mapping.get(e.name, e)
    if e.kind == "const":
        return e
    kids = tuple(substitute(a, mapping) for a in e.args)
    if e.kind in _BINARY_CTOR:
        return _BINARY_CTOR[e.kind](*kids)
    return unary(e.kind, kids[0])


def differentiate(e: Expr, name: str) -> Expr:
    """Exact partial derivative with respect to `name`, already simplified."""
    k = e.kind
    if k == "const":
        return ZERO
    if k == "var":
        return ONE if e.name == name else ZERO
    if k == "add":
        return add(differentiate(e.args[0], name), differentiate(e.args[1], name))
    if k == "sub":
        return sub(differentiate(e.args[0], name), differentiate(e.args[1], name))
    if k == "mul":
        a, b = e.args
        return add(mul(differentiate(a, name), b), mul(a, differentiate(b, name)))
    if k == "div":
        a, b = e.args
        num = sub(mul(differentiate(a, name), b), mul(a, differentiate(b, name)))
        return div(num, pw(b, const(2.0)))
    if k == "pow":
        a, b = e.args
        da = differentiate(a, name)
        if b.kind == "const":
            return mul(mul(b, pw(a, const(b.value - 1.0))), da)
        db = differentiate(b, name)
        if a.kind == "const":
            return mul(e, mul(unary("ln", a), db))
        # general a^b: a^b * (db*ln a + b*da/a)
        return mul(e, add(mul(db, unary("ln", a)), mul(b, div(da, a))))
    if k == "neg":
        return neg(differentiate(e.args[0], name))
    a = e.args[0]
    da = differentiate(a, name)
    if k == "sqrt":
        return div(da, mul(const(2.0), unary("sqrt", a)))
    if k == "exp":
        return mul(e, da)
    if k == "ln":
        return div(da, a)
    if k == "sin":
        return mul(unary("cos", a), da)
    if k == "cos":
        return neg(mul(unary("sin", a), da))
    if k == "tan":
        return mul(add(ONE, pw(unary("tan", a), const(2.0))), da)
    if k == "arctan":
        return div(da, add(ONE, pw(a, const(2.0))))
    raise ExprError(f"cannot differentiate node kind {k!r}")


def evaluate(e: Expr, point: Mapping[str, float]) -> float:
    """IEEE-double value of the tree at a fully bound point."""
    memo: dict[int, float] = {}

    def go(node):
        key = id(node)
        if key in memo:
            return memo[key]
        k = node.kind
        if k == "const":
            v = node.value
        elif k == "var":
            try:
                v = float(point[node.name])
            except KeyError:
                raise EvalDomainError(f"unbound variable {node.name!r}", node) from None
        elif k == "add":
            v = go(node.args[0]) + go(node.args[1])
        elif k == "sub":
            v = go(node.args[0]) - go(node.args[1])
        elif k == "mul":
            v = go(node.args[0]) * go(node.args[1])
        elif k == "div":
            den = go(node.args[1])
            if den == 0.0:
                raise EvalDomainError("division by zero", node)
            v = go(node.args[0]) / den
        elif k == "pow":
            base, expo = go(node.args[0]), go(node.args[1])
            if base == 0.0 and expo < 0.0:
                raise EvalDomainError("zero raised to negative power", node)
            if base < 0.0 and expo != round(expo):
                raise EvalDomainError("negative base with non-integer exponent", node)
            v = math.pow(base, expo)
        elif k == "neg":
            v = -go(node.args[0])
        elif k == "sqrt":
            x = go(node.args[0])
            if x < 0.0:
                raise EvalDomainError(f"sqrt of negative value {x}", node)
            v = math.sqrt(x)
        elif k == "ln":
            x = go(node.args[0])
            if x <= 0.0:
                raise EvalDomainError(f"ln of non-positive value {x}", node)
            v = math.log(x)
        else:
            v = _fold_unary(k, go(node.args[0]))
        if not math.isfinite(v):
            raise EvalDomainError(f"non-finite intermediate value {v}", node)
        memo[key] = v
        return v

    return go(e)


def evaluate_many(exprs, env: Mapping[str, np.ndarray], memo=None) -> list:
    """Vectorized evaluation of several trees with one shared memo, so
    subtrees shared between them are computed once."""
    memo = {} if memo is None else memo
    return [evaluate_array(e, env, memo) for e in exprs]


def evaluate_array(e: Expr, env: Mapping[str, np.ndarray], memo=None) -> np.ndarray:
    """Vectorized evaluation; all variables map to same-shape float arrays."""
    memo = {} if memo is None else memo
    shape = None
    for a in env.values():
        shape = np.shape(a)
        break

    def go(node):
        key = id(node)
        if key in memo:
            return memo[key]
        k = node.kind
        if k == "const":
            v = np.full(shape, node.value)
        elif k == "var":
            try:
                v = np.asarray(env[node.name], dtype=float)
            except KeyError:
                raise EvalDomainError(f"unbound variable {node.name!r}", node) from None
        elif k == "add":
            v = go(node.args[0]) + go(node.args[1])
        elif k == "sub":
            v = go(node.args[0]) - go(node.args[1])
        elif k == "mul":
            v = go(node.args[0]) * go(node.args[1])
        elif k == "div":
            den = go(node.args[1])
            if np.any(den == 0.0):
                raise EvalDomainError("division by zero", node)
            v = go(node.args[0]) / den
        elif k == "pow":
            base, expo = go(node.args[0]), go(node.args[1])
            if np.any((base == 0.0) & (expo < 0.0)):
                raise EvalDomainError("zero raised to negative power", node)
            if np.any((base < 0.0) & (expo != np.round(expo))):
                raise EvalDomainError("negative base with non-integer exponent", node)
            with np.errstate(all="ignore"):
                v = np.power(base, expo)
        elif k == "neg":
            v = -go(node.args[0])
        elif k == "sqrt":
            x = go(node.args[0])
            if np.any(x < 0.0):
                raise EvalDomainError("sqrt of negative value", node)
            v = np.sqrt(x)
        elif k == "ln":
            x = go(node.args[0])
            if np.any(x <= 0.0):
                raise EvalDomainError("ln of non-positive value", node)
            v = np.log(x)
        else:
            v = _CALLABLE[k](go(node.args[0]))
        if not np.all(np.isfinite(v)):
            raise EvalDomainError("non-finite intermediate value", node)
        memo[key] = v
        return v

    return go(e)


# ---------------------------------------------------------------------------
# printing

def _fmt_const(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return f"{v:.17g}"


_OP_SYMBOL = {"add": " + ", "sub": " - ", "mul": "*", "div": "/", "pow": "^"}


def _atomish(e: Expr) -> bool:
    return e.kind == "var" or (e.kind == "const" and e.value >= 0.0) or e.kind in UNARY_FUNCS[1:]


def to_text(e: Expr) -> str:
    """Render in the input grammar. Conservative with parentheses so that
    parse(to_text(e)) is always semantically identical to e."""
    k = e.kind
    if k == "const":
        return _fmt_const(e.value)
    if k == "var":
        return e.name
    if k == "neg":
        inner = e.args[0]
        body = to_text(inner) if _atomish(inner) else f"({to_text(inner)})"
        return f"-{body}"
    if k in _OP_SYMBOL:
        a, b = e.args
        sa = to_text(a) if _atomish(a) else f"({to_text(a)})"
        sb = to_text(b) if _atomish(b) else f"({to_text(b)})"
        return f"{sa}{_OP_SYMBOL[k]}{sb}"
    return f"{k}({to_text(e.args[0])})"


# ---------------------------------------------------------------------------
# recursive-descent parser
#
# expr   := term (('+'|'-') term)*
# term   := factor (('*'|'/') factor)*
# factor := base ('^' exponent)?          exponent := factor
# base   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')' | '-' base

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?)"
    r"|(?P<ident>[a-zA-Z_][a-zA-Z0-9_]*)"
    r"|(?P<op>[-+*/^(),]))"
)


class _Parser:
    def __init__(self, text, names):
        self.text = text
        self.names = set(names)
        self.tokens = []
        pos = 0
        while pos < len(text):
            m = _TOKEN_RE.match(text, pos)
            if not m or m.end() == pos:
                stripped = text[pos:].lstrip()
                if not stripped:
                    break
                raise ParseError(f"unexpected character {stripped[0]!r}", len(text) - len(stripped))
            kind = m.lastgroup
            self.tokens.append((kind, m.group(kind), m.start(kind)))
            pos = m.end()
        self.tokens.append(("eof", "", len(text)))
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, symbol):
        kind, text, off = self.peek()
        if kind != "op" or text != symbol:
            raise ParseError(f"expected {symbol!r}, found {text or 'end of input'!r}", off)
        return self.next()

    def parse(self):
        e = self.expr()
        kind, text, off = self.peek()
        if kind != "eof":
            raise ParseError(f"trailing input {text!r}", off)
        return e

    def expr(self):
        e = self.term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.next()
                rhs = self.term()
                e = add(e, rhs) if text == "+" else sub(e, rhs)
            else:
                return e

    def term(self):
        e = self.factor()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.next()
                rhs = self.factor()
                e = mul(e, rhs) if text == "*" else div(e, rhs)
            else:
                return e

    def factor(self):
        e = self.base()
        kind, text, _ = self.peek()
        if kind == "op" and text == "^":
            self.next()
            return pw(e, self.factor())
        return e

    def base(self):
        kind, text, off = self.next()
        if kind == "num":
            return const(float(text))
        if kind == "op" and text == "-":
            return neg(self.base())
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect_op(")")
            return e
        if kind == "ident":
            nxt_kind, nxt_text, _ = self.peek()
            if nxt_kind == "op" and nxt_text == "(":
                if text not in UNARY_FUNCS[1:]:
                    raise ParseError(f"unknown function {text!r}", off)
                self.next()
                args = [self.expr()]
                while self.peek()[:2] == ("op", ","):
                    self.next()
                    args.append(self.expr())
                self.expect_op(")")
                if len(args) != 1:
                    raise ParseError(f"{text} takes 1 argument, got {len(args)}", off)
                return unary(text, args[0])
            if text in self.names:
                return var(text)
            raise ParseError(f"unknown identifier {text!r}", off)
        raise ParseError(f"unexpected token {text or 'end of input'!r}", off)


def parse_expr(text: str, names) -> Expr:
    """Parse `text` over the given variable names into a canonical Expr."""
    return _Parser(text, names).parse()
