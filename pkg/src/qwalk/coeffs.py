"""Coefficient expression language for drift b(t, x) and volatility sigma(t, x).

Grammar (``^`` is right-associative, unary minus binds tighter than ``^``)::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := unary ('^' factor)?
    unary  := '-' unary | atom
    atom   := number | ident | ident '(' expr ')' | '(' expr ')'
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np

from .errors import (
    DivisionByZero,
    EvalError,
    ExprSyntaxError,
    NegativeSqrt,
    NonFiniteResult,
    SpecError,
    SpecNotFound,
    UnboundParameter,
    UnknownFunctionError,
)

FUNCTIONS = ("exp", "sqrt", "abs", "sin", "cos")
VARIABLES = ("t", "x")


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str  # "t" or "x"


@dataclass(frozen=True)
class Param:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"


Expr = Union[Num, Var, Param, Neg, BinOp, Call]


# -- parsing -----------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None:
            bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExprSyntaxError(f"unexpected character {text[bad]!r}", bad)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, off = self.take()
        if val != value or kind != "op":
            what = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {value!r}, found {what}", off)

    def parse(self) -> Expr:
        node = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {val!r}", off)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.factor()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> Expr:
        base = self.unary()
        if self.peek()[:2] == ("op", "^"):
            self.take()
            return BinOp("^", base, self.factor())
        return base

    def unary(self) -> Expr:
        if self.peek()[:2] == ("op", "-"):
            self.take()
            return Neg(self.unary())
        return self.atom()

    def atom(self) -> Expr:
        kind, val, off = self.take()
        if kind == "num":
            value = float(val)
            if not math.isfinite(value):
                raise ExprSyntaxError(f"literal {val!r} is not finite", off)
            return Num(value)
        if kind == "ident":
            if self.peek()[:2] == ("op", "("):
                if val not in FUNCTIONS:
                    raise UnknownFunctionError(f"unknown function {val!r}", off)
                self.take()
                arg = self.expr()
                self.expect(")")
                return Call(val, arg)
            if val in FUNCTIONS:
                raise ExprSyntaxError(f"function {val!r} needs an argument", self.peek()[2])
            if val in VARIABLES:
                return Var(val)
            return Param(val)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        what = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"unexpected {what}", off)


def parse_expr(text: str) -> Expr:
    if not isinstance(text, str) or text.strip() == "":
        raise ExprSyntaxError("empty expression", 0)
    return _Parser(text).parse()


# -- printing ----------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 3}


def to_text(node: Expr) -> str:
    """Render ``node`` so that ``parse_expr(to_text(node)) == node``."""
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, (Var, Param)):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({to_text(node.arg)})"
    if isinstance(node, Neg):
        inner = to_text(node.operand)
        if isinstance(node.operand, BinOp):
            inner = f"({inner})"
        return f"-{inner}"
    op = node.op
    left, right = to_text(node.left), to_text(node.right)
    if op == "^":
        if isinstance(node.left, BinOp):
            left = f"({left})"
        if isinstance(node.right, BinOp) and node.right.op != "^":
            right = f"({right})"
        return f"{left}^{right}"
    # left-associative levels: left child may share precedence, right may not
    if isinstance(node.left, BinOp) and _PREC[node.left.op] < _PREC[op]:
        left = f"({left})"
    if isinstance(node.right, BinOp) and _PREC[node.right.op] <= _PREC[op]:
        right = f"({right})"
    return f"{left} {op} {right}"


def free_params(node: Expr) -> set[str]:
    if isinstance(node, Param):
        return {node.name}
    if isinstance(node, Neg):
        return free_params(node.operand)
    if isinstance(node, Call):
        return free_params(node.arg)
    if isinstance(node, BinOp):
        return free_params(node.left) | free_params(node.right)
    return set()


def depends_on(node: Expr, var: str) -> bool:
    if isinstance(node, Var):
        return node.name == var
    if isinstance(node, Neg):
        return depends_on(node.operand, var)
    if isinstance(node, Call):
        return depends_on(node.arg, var)
    if isinstance(node, BinOp):
        return depends_on(node.left, var) or depends_on(node.right, var)
    return False


# -- scalar evaluation (reference) -------------------------------------------

_SCALAR_FUNCS = {
    "exp": math.exp,
    "abs": abs,
    "sin": math.sin,
    "cos": math.cos,
}


def eval_expr(node: Expr, t: float, x: float, params: dict | None = None) -> float:
    params = params or {}
    value = _eval(node, float(t), float(x), params)
    if not math.isfinite(value):
        raise NonFiniteResult(f"expression evaluated to {value!r}")
    return value


def _eval(node: Expr, t: float, x: float, params: dict) -> float:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return t if node.name == "t" else x
    if isinstance(node, Param):
        try:
            return float(params[node.name])
        except KeyError:
            raise UnboundParameter(f"parameter {node.name!r} is not bound") from None
    if isinstance(node, Neg):
        return -_eval(node.operand, t, x, params)
    if isinstance(node, Call):
        a = _eval(node.arg, t, x, params)
        if node.func == "sqrt":
            if a < 0:
                raise NegativeSqrt(f"sqrt of negative value {a!r}")
            return math.sqrt(a)
        try:
            return _SCALAR_FUNCS[node.func](a)
        except OverflowError:
            raise NonFiniteResult(f"{node.func}({a!r}) overflows") from None
    a = _eval(node.left, t, x, params)
    b = _eval(node.right, t, x, params)
    op = node.op
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if b == 0:
            raise DivisionByZero("division by zero")
        return a / b
    try:
        r = a ** b
    except ZeroDivisionError:
        raise DivisionByZero(f"{a!r}^{b!r}: zero to a negative power") from None
    except OverflowError:
        raise NonFiniteResult(f"{a!r}^{b!r} overflows") from None
    if isinstance(r, complex):
        raise NonFiniteResult(f"{a!r}^{b!r} is not real")
    return r


# -- vectorized evaluation ---------------------------------------------------

VectorFn = Callable[[object, object], tuple[np.ndarray, np.ndarray]]


def compile_expr(node: Expr, params: dict | None = None) -> VectorFn:
    """Compile to ``f(t, x) -> (values, bad)`` over broadcastable arrays.

    ``bad`` flags elements where the scalar evaluator would raise; callers use
    :func:`eval_expr` at a flagged point to obtain the precise error.
    """
    params = params or {}
    missing = free_params(node) - set(params)
    if missing:
        raise UnboundParameter(f"parameter {sorted(missing)[0]!r} is not bound")
    fn = _compile(node, {k: float(v) for k, v in params.items()})

    def run(t, x):
        with np.errstate(all="ignore"):
            val, bad = fn(np.asarray(t, dtype=np.float64), np.asarray(x, dtype=np.float64))
            shape = np.broadcast_shapes(np.shape(t), np.shape(x))
            val = np.broadcast_to(val, shape)
            bad = np.broadcast_to(bad, shape) | ~np.isfinite(val)
        return val, bad

    return run


def _compile(node: Expr, params: dict):
    if isinstance(node, Num):
        v = np.float64(node.value)
        return lambda t, x: (v, False)
    if isinstance(node, Var):
        if node.name == "t":
            return lambda t, x: (t, False)
        return lambda t, x: (x, False)
    if isinstance(node, Param):
        v = np.float64(params[node.name])
        return lambda t, x: (v, False)
    if isinstance(node, Neg):
        f = _compile(node.operand, params)

        def neg(t, x):
            a, bad = f(t, x)
            return -a, bad
        return neg
    if isinstance(node, Call):
        f = _compile(node.arg, params)
        if node.func == "sqrt":
            def sqrt(t, x):
                a, bad = f(t, x)
                return np.sqrt(a), bad | (a < 0)
            return sqrt
        ufunc = {"exp": np.exp, "abs": np.abs, "sin": np.sin, "cos": np.cos}[node.func]

        def call(t, x):
            a, bad = f(t, x)
            r = ufunc(a)
            return r, bad | ~np.isfinite(r)
        return call
    fl, fr = _compile(node.left, params), _compile(node.right, params)
    op = node.op
    if op == "/":
        def div(t, x):
            a, ba = fl(t, x)
            b, bb = fr(t, x)
            return a / b, ba | bb | (b == 0)
        return div
    if op == "^":
        def pw(t, x):
            a, ba = fl(t, x)
            b, bb = fr(t, x)
            r = np.power(a, b)
            return r, ba | bb | ~np.isfinite(r)
        return pw
    ufunc = {"+": np.add, "-": np.subtract, "*": np.multiply}[op]

    def arith(t, x):
        a, ba = fl(t, x)
        b, bb = fr(t, x)
        return ufunc(a, b), ba | bb
    return arith


def raise_at(node: Expr, t: float, x: float, params: dict) -> None:
    """Re-run the scalar evaluator at a flagged point so it raises precisely."""
    eval_expr(node, t, x, params)
    raise NonFiniteResult("vectorized evaluation flagged a non-finite value")


# -- regularity probe --------------------------------------------------------

@dataclass(frozen=True)
class Regularity:
    sup_abs: float
    lipschitz_est: float
    d2_est: float

    def to_dict(self) -> dict:
        return {"sup_abs": self.sup_abs, "lipschitz_est": self.lipschitz_est, "d2_est": self.d2_est}


def grid_values(node: Expr, t_range, x_range, grid_n: int, params: dict | None = None):
    """Evaluate on a ``grid_n x grid_n`` lattice; returns ``(ts, xs, values)``.

    ``values[i, j]`` is the expression at ``(ts[i], xs[j])``.  Evaluation
    failure anywhere raises the scalar error annotated with the grid point.
    """
    params = params or {}
    ts = np.linspace(float(t_range[0]), float(t_range[1]), grid_n)
    xs = np.linspace(float(x_range[0]), float(x_range[1]), grid_n)
    vals, bad = compile_expr(node, params)(ts[:, None], xs[None, :])
    if bad.any():
        i, j = np.argwhere(bad)[0]
        try:
            raise_at(node, ts[i], xs[j], params)
        except EvalError as exc:
            exc.at = f"t={float(ts[i])!r}, x={float(xs[j])!r}"
            raise
    return ts, xs, np.array(vals, dtype=np.float64)


def regularity_probe(node: Expr, t_range, x_range, grid_n: int, params: dict | None = None) -> Regularity:
    """Bounded-value and divided-difference evidence for smoothness on a compact."""
    if grid_n < 8:
        raise ValueError(f"grid_n must be >= 8, got {grid_n}")
    for lo, hi in (t_range, x_range):
        if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
            raise ValueError(f"range must be bounded and ordered, got {(lo, hi)}")
    ts, xs, v = grid_values(node, t_range, x_range, grid_n, params)
    sup_abs = float(np.max(np.abs(v)))
    lip = 0.0
    d2 = 0.0
    for axis, pts in ((1, xs), (0, ts)):
        h = pts[1] - pts[0]
        if h <= 0:
            continue
        d1 = np.diff(v, axis=axis) / h
        lip = max(lip, float(np.max(np.abs(d1))))
        d2 = max(d2, float(np.max(np.abs(np.diff(d1, axis=axis) / h))))
    return Regularity(sup_abs, lip, d2)


# -- walk specification ------------------------------------------------------

@dataclass(frozen=True)
class PointMass:
    value: float

    def to_dict(self) -> dict:
        return {"point": self.value}


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def to_dict(self) -> dict:
        return {"uniform": [self.lo, self.hi]}


InitialCondition = Union[PointMass, Uniform]


@dataclass(frozen=True)
class RunningMaxVolatility:
    """History-dependent volatility: ``sigma + boost`` once the running max exceeds ``threshold``.

    Not expressible in the coefficient language (which only sees ``(t, x)``);
    used as the positive control for the Markov tester.
    """

    threshold: float = 0.5
    boost: float = 1.0

    def to_dict(self) -> dict:
        return {"running_max_vol": {"threshold": self.threshold, "boost": self.boost}}


def _number(value, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SpecError(f"{what} must be a number, got {value!r}")
    if not math.isfinite(value):
        raise SpecError(f"{what} must be finite, got {value!r}")
    return value


@dataclass(frozen=True, eq=False)
class WalkSpec:
    drift: str
    volatility: str
    params: dict
    x0: InitialCondition
    variant: RunningMaxVolatility | None = None

    def __post_init__(self):
        try:
            drift_ast = parse_expr(self.drift)
            vol_ast = parse_expr(self.volatility)
        except ExprSyntaxError as exc:
            raise SpecError(f"bad coefficient expression: {exc.detail}", at=exc.at) from exc
        for name, ast in (("drift", drift_ast), ("volatility", vol_ast)):
            missing = free_params(ast) - set(self.params)
            if missing:
                raise SpecError(f"{name} references undeclared parameter {sorted(missing)[0]!r}")
        for k, v in self.params.items():
            if k in VARIABLES or k in FUNCTIONS:
                raise SpecError(f"parameter name {k!r} is reserved")
            _number(v, f"parameter {k!r}")
        if isinstance(self.x0, Uniform) and not self.x0.lo <= self.x0.hi:
            raise SpecError(f"uniform x0 needs lo <= hi, got {self.x0.to_dict()}")
        object.__setattr__(self, "drift_ast", drift_ast)
        object.__setattr__(self, "vol_ast", vol_ast)

    def __eq__(self, other):
        return isinstance(other, WalkSpec) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(canonical_json(self.to_dict()))

    @property
    def state_dependent(self) -> bool:
        """True when increments depend on the current state (or its history)."""
        return (
            self.variant is not None
            or depends_on(self.drift_ast, "x")
            or depends_on(self.vol_ast, "x")
        )

    def drift_fn(self) -> VectorFn:
        return compile_expr(self.drift_ast, self.params)

    def vol_fn(self) -> VectorFn:
        return compile_expr(self.vol_ast, self.params)

    def drift_at(self, t: float, x: float) -> float:
        return eval_expr(self.drift_ast, t, x, self.params)

    def vol_at(self, t: float, x: float) -> float:
        return eval_expr(self.vol_ast, t, x, self.params)

    def replace(self, **changes) -> "WalkSpec":
        fields = {"drift": self.drift, "volatility": self.volatility, "params": dict(self.params),
                  "x0": self.x0, "variant": self.variant}
        fields.update(changes)
        return WalkSpec(**fields)

    def to_dict(self) -> dict:
        out = {
            "drift": self.drift,
            "volatility": self.volatility,
            "params": dict(self.params),
            "x0": self.x0.to_dict(),
        }
        if self.variant is not None:
            out["variant"] = self.variant.to_dict()
        return out

    @classmethod
    def from_dict(cls, d) -> "WalkSpec":
        if not isinstance(d, dict):
            raise SpecError("spec must be a JSON object")
        unknown = set(d) - {"drift", "volatility", "params", "x0", "variant", "tolerance_policy"}
        if unknown:
            raise SpecError(f"unknown spec key {sorted(unknown)[0]!r}")
        for key in ("drift", "volatility", "x0"):
            if key not in d:
                raise SpecError(f"spec missing key {key!r}")
        for key in ("drift", "volatility"):
            if not isinstance(d[key], str):
                raise SpecError(f"{key} must be a string")
        params = d.get("params", {})
        if not isinstance(params, dict):
            raise SpecError("params must be an object")
        return cls(d["drift"], d["volatility"], dict(params), _x0_from(d["x0"]), _variant_from(d.get("variant")))


def _x0_from(d) -> InitialCondition:
    if isinstance(d, dict) and set(d) == {"point"}:
        return PointMass(_number(d["point"], "x0.point"))
    if isinstance(d, dict) and set(d) == {"uniform"}:
        pair = d["uniform"]
        if not isinstance(pair, list) or len(pair) != 2:
            raise SpecError("x0.uniform must be [lo, hi]")
        return Uniform(_number(pair[0], "x0.uniform[0]"), _number(pair[1], "x0.uniform[1]"))
    raise SpecError(f'x0 must be {{"point": v}} or {{"uniform": [lo, hi]}}, got {d!r}')


def _variant_from(d) -> RunningMaxVolatility | None:
    if d is None:
        return None
    if isinstance(d, dict) and set(d) == {"running_max_vol"} and isinstance(d["running_max_vol"], dict):
        inner = d["running_max_vol"]
        return RunningMaxVolatility(
            _number(inner.get("threshold", 0.5), "variant.threshold"),
            _number(inner.get("boost", 1.0), "variant.boost"),
        )
    raise SpecError(f"unknown variant {d!r}")


def canonical_json(obj) -> str:
    """Sorted keys, no whitespace, shortest round-trip floats."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def spec_hash(spec: WalkSpec) -> str:
    return hashlib.blake2b(canonical_json(spec.to_dict()).encode(), digest_size=8).hexdigest()


def load_spec(path) -> tuple[WalkSpec, dict | None]:
    """Read a JSON spec file; returns the spec and its optional ``tolerance_policy`` block."""
    path = Path(path)
    if not path.is_file():
        raise SpecNotFound(f"spec file not found: {path}", at=str(path))
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"spec is not valid JSON: {exc.msg}", at=f"line {exc.lineno} col {exc.colno}") from None
    return WalkSpec.from_dict(data), data.get("tolerance_policy")


def dump_spec(spec: WalkSpec) -> str:
    return json.dumps(spec.to_dict())
