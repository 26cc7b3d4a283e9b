"""A small arithmetic language for coefficient and payoff expressions.

Grammar, loosest binding first::

    expr   := expr ('+' | '-') expr
            | expr ('*' | '/') expr
            | '-' expr
            | expr '^' expr            (right associative)
            | NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Names are variables (``x``, ``x1`` .. ``xn``, ``t``, ``y``), constants
(``pi`` plus anything bound by the caller) or the functions ``exp``, ``log``,
``sin``, ``cos``, ``sqrt``, ``abs``, ``min`` and ``max``. Whitespace is
ignored. Errors carry the byte offset where parsing failed.
"""

import logging
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from bspde_mc.errors import BspdeError, ConfigError, EvaluationError, ExpressionSyntaxError, UnknownIdentifier


logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple["Expr", ...]


Expr = Union[Num, Var, Neg, BinOp, Call]

FUNCTIONS: dict[str, tuple[Callable, int, Optional[int]]] = {
    "exp": (np.exp, 1, 1),
    "log": (np.log, 1, 1),
    "sin": (np.sin, 1, 1),
    "cos": (np.cos, 1, 1),
    "sqrt": (np.sqrt, 1, 1),
    "abs": (np.abs, 1, 1),
    "min": (np.minimum, 2, None),
    "max": (np.maximum, 2, None),
}
BUILTIN_CONSTANTS = {"pi": float(np.pi)}
_INDEXED = re.compile(r"x[1-9][0-9]*$")


def to_source(expr: Expr) -> str:
    """Fully parenthesised text that parses back to ``expr``."""
    if isinstance(expr, Num):
        return repr(float(expr.value))
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Neg):
        return f"(-{to_source(expr.operand)})"
    if isinstance(expr, BinOp):
        return f"({to_source(expr.left)} {expr.op} {to_source(expr.right)})"
    return f"{expr.name}(" + ", ".join(to_source(a) for a in expr.args) + ")"


def identifiers(expr: Expr) -> set[str]:
    """Variable and constant names an expression reads."""
    if isinstance(expr, Var):
        return {expr.name}
    if isinstance(expr, Neg):
        return identifiers(expr.operand)
    if isinstance(expr, BinOp):
        return identifiers(expr.left) | identifiers(expr.right)
    if isinstance(expr, Call):
        return set().union(*(identifiers(a) for a in expr.args))
    return set()


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Token:
    kind: str  # number, name, op, lparen, rparen, comma, end
    text: str
    offset: int


_TOKEN = re.compile(
    r"(?P<ws>\s+)"
    r"|(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^])"
    r"|(?P<lparen>\()"
    r"|(?P<rparen>\))"
    r"|(?P<comma>,)"
)


def tokenize(source: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(source):
        match = _TOKEN.match(source, pos)
        if match is None:
            raise ExpressionSyntaxError(_byte_offset(source, pos), f"unexpected character {source[pos]!r}")
        if match.lastgroup != "ws":
            tokens.append(Token(match.lastgroup, match.group(), _byte_offset(source, pos)))
        pos = match.end()
    tokens.append(Token("end", "", _byte_offset(source, len(source))))
    return tokens


def _byte_offset(source: str, index: int) -> int:
    return len(source[:index].encode("utf-8"))


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_INFIX = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 40}
_PREFIX_BP = 30


class Parser:
    """Pratt parser over a token list."""

    def __init__(self, tokens: Sequence[Token], known: Optional[Iterable[str]] = None):
        self._tokens = list(tokens)
        self._index = 0
        self._known = None if known is None else set(known)

    @property
    def token(self) -> Token:
        return self._tokens[self._index]

    def advance(self) -> Token:
        token = self.token
        if token.kind != "end":
            self._index += 1
        return token

    def expect(self, kind: str, what: str) -> Token:
        if self.token.kind != kind:
            raise ExpressionSyntaxError(self.token.offset, f"expected {what}")
        return self.advance()

    def parse(self) -> Expr:
        expr = self.expr(0)
        if self.token.kind != "end":
            raise ExpressionSyntaxError(self.token.offset, f"unexpected {self.token.text!r}")
        return expr

    def expr(self, left_bp: int) -> Expr:
        left = self.prefix()
        while self.token.kind == "op" and _INFIX[self.token.text] > left_bp:
            op = self.advance().text
            bp = _INFIX[op]
            right = self.expr(bp - 1 if op == "^" else bp)
            left = BinOp(op, left, right)
        return left

    def prefix(self) -> Expr:
        token = self.token
        if token.kind == "number":
            self.advance()
            return Num(float(token.text))
        if token.kind == "op" and token.text == "-":
            self.advance()
            return Neg(self.expr(_PREFIX_BP))
        if token.kind == "lparen":
            self.advance()
            inner = self.expr(0)
            self.expect("rparen", "')'")
            return inner
        if token.kind == "name":
            self.advance()
            if self.token.kind == "lparen":
                return self.call(token)
            if token.text in FUNCTIONS:
                raise ExpressionSyntaxError(self.token.offset, f"function {token.text!r} needs arguments")
            self._check_known(token)
            return Var(token.text)
        if token.kind == "end":
            raise ExpressionSyntaxError(token.offset, "unexpected end of expression")
        raise ExpressionSyntaxError(token.offset, f"unexpected {token.text!r}")

    def call(self, name: Token) -> Expr:
        if name.text not in FUNCTIONS:
            raise UnknownIdentifier(name.offset, f"unknown function {name.text!r}")
        self.advance()
        args = [self.expr(0)]
        while self.token.kind == "comma":
            self.advance()
            args.append(self.expr(0))
        self.expect("rparen", "')'")
        _, lo, hi = FUNCTIONS[name.text]
        if len(args) < lo or (hi is not None and len(args) > hi):
            raise ExpressionSyntaxError(name.offset, f"{name.text} takes {lo if hi == lo else f'at least {lo}'} argument(s)")
        return Call(name.text, tuple(args))

    def _check_known(self, token: Token) -> None:
        if self._known is None:
            allowed = token.text in DEFAULT_NAMES or _INDEXED.match(token.text)
        else:
            allowed = token.text in self._known
        if not allowed:
            raise UnknownIdentifier(token.offset, f"unknown identifier {token.text!r}")


DEFAULT_NAMES = frozenset({"x", "t", "y", "pi"})


def known_names(n: int = 1, constants: Optional[Mapping[str, float]] = None, extra: Iterable[str] = ()) -> set[str]:
    names = set(DEFAULT_NAMES) | {f"x{i}" for i in range(1, n + 1)} | set(extra)
    return names | set(constants or {})


def parse_expr(source: str, known: Optional[Iterable[str]] = None) -> Expr:
    """Parse ``source``; names outside ``known`` raise UnknownIdentifier.

    With ``known=None`` any name of the form ``x``, ``xN``, ``t``, ``y`` or
    ``pi`` is accepted.
    """
    tokens = tokenize(source)
    expr = Parser(tokens, known).parse()
    logger.debug("Parsed %r (%d tokens)", source, len(tokens))
    return expr


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

_BINARY = {"+": np.add, "-": np.subtract, "*": np.multiply, "/": np.divide, "^": np.power}


def _eval(expr: Expr, env: Mapping[str, np.ndarray]):
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Var):
        try:
            return env[expr.name]
        except KeyError:
            raise EvaluationError(f"{expr.name!r} is not bound") from None
    if isinstance(expr, Neg):
        return np.negative(_eval(expr.operand, env))
    if isinstance(expr, BinOp):
        left = np.asarray(_eval(expr.left, env), dtype=float)
        right = np.asarray(_eval(expr.right, env), dtype=float)
        return _BINARY[expr.op](left, right)
    fn, _, _ = FUNCTIONS[expr.name]
    args = [np.asarray(_eval(a, env), dtype=float) for a in expr.args]
    if len(args) == 1:
        return fn(args[0])
    out = args[0]
    for arg in args[1:]:
        out = fn(out, arg)
    return out


def evaluate(expr: Expr, env: Mapping[str, object]) -> np.ndarray:
    """Evaluate with numpy broadcasting; domain errors raise EvaluationError."""
    scope = dict(BUILTIN_CONSTANTS)
    scope.update(env)
    try:
        with np.errstate(divide="raise", invalid="raise", over="raise"):
            value = np.asarray(_eval(expr, scope), dtype=float)
    except BspdeError:
        raise
    except (FloatingPointError, ValueError, ZeroDivisionError) as e:
        raise EvaluationError(f"{to_source(expr)}: {e}") from e
    if not np.all(np.isfinite(value)):
        raise EvaluationError(f"{to_source(expr)} is not finite")
    return value


# ---------------------------------------------------------------------------
# Compiled callables
# ---------------------------------------------------------------------------

def _fill(value: np.ndarray, shape: tuple) -> np.ndarray:
    return np.array(np.broadcast_to(value, shape), dtype=float)


def _state_env(x: np.ndarray, n: int) -> dict[str, np.ndarray]:
    env = {f"x{i + 1}": x[:, i] for i in range(n)}
    env["x"] = x[:, 0]
    return env


def compile_state_function(source: str, n: int = 1, constants: Optional[Mapping[str, float]] = None, time: bool = True):
    """``(x, t) -> array`` over points ``(P, n)``; ``time=False`` gives ``x -> array``."""
    constants = dict(constants or {})
    expr = parse_expr(source, known_names(n, constants))

    if time:
        def fn(x, t):
            x = np.asarray(x, dtype=float).reshape(-1, n)
            env = _state_env(x, n) | constants
            env["t"] = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
            return _fill(evaluate(expr, env), (x.shape[0],))
    else:
        def fn(x):
            x = np.asarray(x, dtype=float).reshape(-1, n)
            env = _state_env(x, n) | constants
            env["t"] = 0.0
            return _fill(evaluate(expr, env), (x.shape[0],))

    fn.source = source
    return fn


def compile_vector_field(sources, n: int, constants: Optional[Mapping[str, float]] = None):
    """Stack component expressions into ``(x, t) -> (P, n)``; a single string is a scalar field."""
    if isinstance(sources, str):
        return compile_state_function(sources, n, constants)
    parts = [compile_state_function(s, n, constants) for s in sources]

    def fn(x, t):
        return np.stack([p(x, t) for p in parts], axis=-1)

    fn.source = list(sources)
    return fn


def compile_matrix_field(sources, n: int, constants: Optional[Mapping[str, float]] = None):
    """``(x, t) -> (P, n, n)`` from ``n*n`` row-major strings, or a scalar multiple of I from one string."""
    if isinstance(sources, str):
        return compile_state_function(sources, n, constants)
    flat = [s for row in sources for s in (row if isinstance(row, (list, tuple)) else [row])]
    if len(flat) != n * n:
        raise ConfigError(f"diffusion needs {n * n} entries, got {len(flat)}")
    parts = [compile_state_function(s, n, constants) for s in flat]

    def fn(x, t):
        return np.stack([p(x, t) for p in parts], axis=-1).reshape(-1, n, n)

    fn.source = flat
    return fn


def compile_time_function(source: str, constants: Optional[Mapping[str, float]] = None):
    """``t -> array``."""
    constants = dict(constants or {})
    expr = parse_expr(source, known_names(0, constants) - {"x", "y"})

    def fn(t):
        t = np.asarray(t, dtype=float)
        return _fill(evaluate(expr, {"t": t} | constants), t.shape)

    fn.source = source
    return fn


def compile_price_function(source: str, constants: Optional[Mapping[str, float]] = None):
    """``x -> array`` over a 1-D array of prices."""
    constants = dict(constants or {})
    expr = parse_expr(source, known_names(1, constants) - {"t", "y"})

    def fn(x):
        x = np.asarray(x, dtype=float)
        return _fill(evaluate(expr, {"x": x, "x1": x} | constants), x.shape)

    fn.source = source
    return fn


def compile_space_time_kernel(source: str, constants: Optional[Mapping[str, float]] = None):
    """``(t, y, x) -> array`` for space-time kernels: ``y`` is integrated, ``x`` is the output point."""
    constants = dict(constants or {})
    expr = parse_expr(source, known_names(1, constants))

    def fn(t, y, x):
        return evaluate(expr, {"t": t, "y": y, "x": x, "x1": x} | constants)

    fn.source = source
    return fn
