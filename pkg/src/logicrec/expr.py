"""Symbolic tokens, expression trees and their evaluation over time series.

Expressions are stored as pre-order token sequences. Constant placeholders
(``const``) are bound to a separate vector of values so the same structure
can be re-fitted without rebuilding the tree.

Infix grammar (output of :func:`to_infix`, accepted by :func:`parse_infix`)::

    expr    := binary | call | leaf
    binary  := "(" expr OP expr ")"          OP in + - * /
    call    := NAME "(" expr ")"             NAME in sin cos log exp step
    leaf    := NUMBER | "s" | "x" INT [ "[t-" INT "]" ]

Every binary node is parenthesised, so no precedence rules are needed.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Token", "TokenLibrary", "Expression", "Dataset",
    "ExpressionError", "IncompleteTree", "TrailingTokens",
    "UnboundConstant", "DelayOutOfRange",
    "parse_preorder", "parse_infix", "to_infix", "evaluate", "evaluate_series",
    "compile_expression", "complexity", "variables_of", "affine_form",
    "expression_to_json", "expression_from_json",
    "ADD", "SUB", "MUL", "DIV", "SIN", "COS", "LOG", "EXP", "STEP", "CONST", "S",
    "var", "literal",
]

DIV_EPS = 1e-12


class ExpressionError(ValueError):
    pass


class IncompleteTree(ExpressionError):
    pass


class TrailingTokens(ExpressionError):
    pass


class UnboundConstant(ExpressionError):
    pass


class DelayOutOfRange(ExpressionError):
    pass


@dataclass(frozen=True)
class Token:
    """A library symbol.

    ``kind`` is one of ``binary``, ``unary``, ``var``, ``const``, ``literal``
    or ``s``. Variables carry a zero-based input channel and a delay in
    samples; literals carry their value.
    """

    name: str
    kind: str
    index: int = -1
    delay: int = 0
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("binary", "unary", "var", "const", "literal", "s"):
            raise ValueError(f"unknown token kind {self.kind!r}")
        if self.kind == "var" and (self.index < 0 or self.delay < 0):
            raise ValueError("variable needs index >= 0 and delay >= 0")

    @property
    def arity(self) -> int:
        return {"binary": 2, "unary": 1}.get(self.kind, 0)

    @property
    def is_leaf(self) -> bool:
        return self.arity == 0

    @property
    def is_constant(self) -> bool:
        return self.kind in ("const", "literal")

    def __repr__(self):
        return self.name


ADD = Token("+", "binary")
SUB = Token("-", "binary")
MUL = Token("*", "binary")
DIV = Token("/", "binary")
SIN = Token("sin", "unary")
COS = Token("cos", "unary")
LOG = Token("log", "unary")
EXP = Token("exp", "unary")
STEP = Token("step", "unary")
CONST = Token("const", "const")
S = Token("s", "s")

_BY_NAME = {t.name: t for t in (ADD, SUB, MUL, DIV, SIN, COS, LOG, EXP, STEP, CONST, S)}

# symbol weights; step and s are not weighted by the source table and are
# treated like a variable
_WEIGHTS = {"+": 1, "-": 1, "*": 1, "/": 2, "sin": 3, "cos": 3, "log": 4, "exp": 4,
            "step": 1}


def var(index: int, delay: int = 0) -> Token:
    """Input channel ``index`` (zero-based) delayed by ``delay`` samples."""
    name = f"x{index + 1}" if delay == 0 else f"x{index + 1}[t-{delay}]"
    return Token(name, "var", index=index, delay=delay)


def literal(value: float) -> Token:
    return Token(repr(float(value)), "literal", value=float(value))


def token_weight(tok: Token) -> int:
    if tok.kind in ("var", "const", "literal", "s"):
        return 1
    return _WEIGHTS[tok.name]


def token_from_name(name: str) -> Token:
    if name in _BY_NAME:
        return _BY_NAME[name]
    m = re.fullmatch(r"x(\d+)(?:\[t-(\d+)\])?", name)
    if m:
        return var(int(m.group(1)) - 1, int(m.group(2) or 0))
    try:
        return literal(float(name))
    except ValueError:
        raise ExpressionError(f"unknown token {name!r}") from None


@dataclass(frozen=True)
class TokenLibrary:
    """Tokens available to the sampler plus structural limits."""

    tokens: tuple
    mode: str = "time"
    max_length: int = 30
    max_constants: int = 5

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.mode not in ("time", "s"):
            raise ValueError("mode must be 'time' or 's'")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in library")
        has_s = any(t.kind == "s" for t in self.tokens)
        has_var = any(t.kind == "var" for t in self.tokens)
        if self.mode == "s" and (has_var or not has_s):
            raise ValueError("s-domain library needs 's' and no input variables")
        if self.mode == "time" and has_s:
            raise ValueError("'s' is only legal in an s-domain library")
        if not any(t.is_leaf for t in self.tokens):
            raise ValueError("library has no terminal tokens")
        if self.max_length < 1:
            raise ValueError("max_length must be positive")

    @classmethod
    def time_domain(cls, n_inputs: int = 1, max_delay: int = 0,
                    binary: Sequence[str] = ("+", "-", "*", "/"),
                    unary: Sequence[str] = (), step: bool = False,
                    const: bool = True, max_length: int = 30,
                    max_constants: int = 5) -> "TokenLibrary":
        toks = [_BY_NAME[b] for b in binary] + [_BY_NAME[u] for u in unary]
        if step:
            toks.append(STEP)
        for d in range(max_delay + 1):
            toks.extend(var(i, d) for i in range(n_inputs))
        if const:
            toks.append(CONST)
        return cls(tuple(toks), "time", max_length, max_constants)

    @classmethod
    def s_domain(cls, max_length: int = 64, max_constants: int = 5) -> "TokenLibrary":
        return cls((ADD, SUB, MUL, DIV, CONST, S), "s", max_length, max_constants)

    def __len__(self):
        return len(self.tokens)

    def index(self, tok: Token) -> int:
        return self.tokens.index(tok)

    @property
    def max_delay(self) -> int:
        return max((t.delay for t in self.tokens if t.kind == "var"), default=0)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "max_length": self.max_length,
                "max_constants": self.max_constants,
                "tokens": [t.name for t in self.tokens]}

    @classmethod
    def from_dict(cls, d: dict) -> "TokenLibrary":
        toks = tuple(token_from_name(n) for n in d["tokens"])
        return cls(toks, d.get("mode", "time"), d.get("max_length", 30),
                   d.get("max_constants", 5))


@dataclass(frozen=True)
class Expression:
    tokens: tuple
    constants: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "constants", tuple(float(c) for c in self.constants))
        _check_tree(self.tokens)
        n = self.n_constants
        if self.constants and len(self.constants) != n:
            raise ValueError(f"expected {n} constants, got {len(self.constants)}")

    @property
    def n_constants(self) -> int:
        return sum(1 for t in self.tokens if t.kind == "const")

    @property
    def bound(self) -> bool:
        return len(self.constants) == self.n_constants

    @property
    def complexity(self) -> int:
        return complexity(self)

    @property
    def max_delay(self) -> int:
        return max((t.delay for t in self.tokens if t.kind == "var"), default=0)

    def __len__(self):
        return len(self.tokens)

    def with_constants(self, values: Iterable[float]) -> "Expression":
        return Expression(self.tokens, tuple(values))

    def __str__(self):
        return to_infix(self)


def _check_tree(tokens: Sequence[Token]) -> None:
    if not tokens:
        raise IncompleteTree("empty token sequence")
    open_slots = 1
    for i, tok in enumerate(tokens):
        if open_slots == 0:
            raise TrailingTokens(f"tree closes before token {i} ({tok.name})")
        open_slots += tok.arity - 1
    if open_slots > 0:
        raise IncompleteTree(f"{open_slots} argument slot(s) left unfilled")


def parse_preorder(tokens: Sequence, constants: Sequence[float] = ()) -> Expression:
    """Build an Expression from a pre-order sequence of tokens or token names."""
    toks = tuple(t if isinstance(t, Token) else token_from_name(t) for t in tokens)
    return Expression(toks, tuple(constants))


def complexity(expr: Expression) -> int:
    return sum(token_weight(t) for t in expr.tokens)


def variables_of(expr: Expression) -> list[str]:
    """Names of the input variables referenced (without delay suffixes)."""
    seen = []
    for t in expr.tokens:
        if t.kind == "var":
            name = f"x{t.index + 1}"
            if name not in seen:
                seen.append(name)
        elif t.kind == "s" and "s" not in seen:
            seen.append("s")
    return seen


@dataclass(frozen=True)
class Dataset:
    """Aligned input matrix (T x n) and output vector (T)."""

    inputs: np.ndarray
    outputs: np.ndarray
    dt: float = 1.0
    max_delay: int = 0
    names: tuple = field(default=())

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.outputs, dtype=float).ravel()
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"inputs have {x.shape[0]} rows but outputs {y.shape[0]}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.max_delay < 0:
            raise ValueError("max_delay must be non-negative")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "outputs", y)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{i + 1}" for i in range(x.shape[1])))

    def __len__(self):
        return self.outputs.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        """Rows ``idx``; only meaningful for delay-free use."""
        return Dataset(self.inputs[idx], self.outputs[idx], self.dt, self.max_delay, self.names)


# --- evaluation -------------------------------------------------------------

def _pdiv(a, b):
    out = a / b
    small = np.less(np.abs(b), DIV_EPS)
    if small.any():
        out = np.where(small, np.nan, out)
    return out


def _plog(a):
    bad = np.less_equal(a, 0)
    if bad.any():
        return np.where(bad, np.nan, np.log(np.where(bad, 1.0, a)))
    return np.log(a)


def _step(a):
    return np.where(np.isnan(a), np.nan, np.greater_equal(a, 0).astype(float))


def _soft_step(width):
    """Logistic surrogate of step with width relative to the argument's spread."""
    def f(a):
        a = np.asarray(a, dtype=float)
        scale = width * (np.nanstd(a) + 1e-12) if a.ndim else width
        return 0.5 * (1.0 + np.tanh(0.5 * a / scale))
    return f


_BINARY = {"+": "+", "-": "-", "*": "*", "/": None}
_UNARY = {"sin": "_sin", "cos": "_cos", "log": "_plog", "exp": "_exp", "step": "_step"}
_ENV = {"_pdiv": _pdiv, "_plog": _plog, "_step": _step, "_sin": np.sin, "_cos": np.cos,
        "_exp": np.exp, "_errstate": np.errstate, "_asarray": np.asarray,
        "_broadcast": np.broadcast_to, "_Unbound": UnboundConstant}


def _source(tokens: Sequence[Token]) -> str:
    pos = 0
    ci = 0

    def walk() -> str:
        nonlocal pos, ci
        tok = tokens[pos]
        pos += 1
        if tok.kind == "binary":
            a = walk()
            b = walk()
            if tok.name == "/":
                return f"_pdiv({a}, {b})"
            return f"({a} {tok.name} {b})"
        if tok.kind == "unary":
            return f"{_UNARY[tok.name]}({walk()})"
        if tok.kind == "const":
            ci += 1
            return f"c[{ci - 1}]"
        if tok.kind == "literal":
            return repr(tok.value)
        if tok.kind == "var":
            return f"v{tok.index}_{tok.delay}"
        raise ExpressionError("'s' has no time-domain value")

    return walk()


def compile_expression(expr: Expression, inputs: np.ndarray, start: int = 0,
                       stop: int | None = None,
                       soft_step: float | None = None,
                       index=None) -> Callable[[Sequence[float]], np.ndarray]:
    """Return ``f(constants) -> predictions`` for timesteps ``start:stop``.

    The tree is turned into a single Python function with variable slices
    bound once, so repeated calls during constant fitting only pay for the
    array arithmetic. Non-finite values mark protected evaluation failures.
    ``soft_step`` swaps step for a logistic of that relative width, which
    gives constant fitting a usable gradient. ``index`` evaluates at the
    given absolute timesteps instead of the ``start:stop`` range.
    """
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    T = x.shape[0]
    stop = T if stop is None else stop
    if index is not None:
        index = np.asarray(index, dtype=int)
        if index.size and index.min() < expr.max_delay:
            raise DelayOutOfRange(f"timestep {index.min()} < delay {expr.max_delay}")
        n = index.size
    else:
        if start < expr.max_delay:
            raise DelayOutOfRange(f"start {start} < delay {expr.max_delay}")
        n = stop - start
    env = dict(_ENV)
    if soft_step is not None:
        env["_step"] = _soft_step(soft_step)
    for tok in expr.tokens:
        if tok.kind == "var":
            key = f"v{tok.index}_{tok.delay}"
            if index is not None:
                env[key] = x[index - tok.delay, tok.index]
            else:
                env[key] = x[start - tok.delay: stop - tok.delay, tok.index]
    body = _source(expr.tokens)
    k = expr.n_constants
    src = (f"def run(c):\n"
           f"    if len(c) != {k}:\n"
           f"        raise _Unbound('expected {k} constants, got %d' % len(c))\n"
           f"    with _errstate(all='ignore'):\n"
           f"        return _broadcast(_asarray({body}, dtype=float), ({n},))\n")
    exec(src, env)
    return env["run"]


def evaluate_series(expr: Expression, data: Dataset | np.ndarray, start: int | None = None,
                    stop: int | None = None) -> np.ndarray:
    """Evaluate at every timestep in ``start:stop`` (default: from the dataset's max delay)."""
    if not expr.bound:
        raise UnboundConstant("expression has unbound constant placeholders")
    x = data.inputs if isinstance(data, Dataset) else data
    if start is None:
        start = data.max_delay if isinstance(data, Dataset) else expr.max_delay
    return np.array(compile_expression(expr, x, start, stop)(expr.constants))


def evaluate(expr: Expression, data: Dataset, t: int) -> float:
    """Value of ``expr`` at timestep ``t``."""
    if not expr.bound:
        raise UnboundConstant("expression has unbound constant placeholders")
    if t < expr.max_delay or t < 0 or t >= len(data):
        raise DelayOutOfRange(f"timestep {t} cannot serve delay {expr.max_delay}")
    return float(compile_expression(expr, data.inputs, t, t + 1)(expr.constants)[0])


def affine_form(expr: Expression, n_inputs: int, max_delay: int = 0, tol: float = 1e-8,
                seed=0) -> dict | None:
    """Coefficients of ``expr`` if it is affine in the lagged inputs, else None.

    Keys are variable names (``x1``, ``x1[t-1]``, ...) plus ``"1"`` for the
    intercept. Affinity is checked numerically on random inputs: the
    least-squares affine fit must reproduce the expression to ``tol``
    relative to its spread.
    """
    if not expr.bound:
        raise UnboundConstant("expression has unbound constant placeholders")
    if any(t.kind == "s" for t in expr.tokens):
        return None
    D = max(max_delay, expr.max_delay)
    T = 8 * n_inputs * (D + 1) + 32
    x = np.random.default_rng(seed).normal(size=(T, n_inputs))
    y = evaluate_series(expr, x, D)
    if not np.all(np.isfinite(y)):
        return None
    names, cols = [], []
    for i in range(n_inputs):
        for d in range(D + 1):
            names.append(f"x{i + 1}" if d == 0 else f"x{i + 1}[t-{d}]")
            cols.append(x[D - d: T - d, i])
    A = np.column_stack(cols + [np.ones(T - D)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    if np.max(np.abs(A @ coef - y)) > tol * max(float(np.std(y)), 1.0):
        return None
    return dict(zip(names + ["1"], (float(c) for c in coef)))


# --- infix text -------------------------------------------------------------

def _fmt(value: float, digits: int | None) -> str:
    if digits is None:
        return repr(float(value))
    return f"{value:.{digits}g}"


def to_infix(expr: Expression, digits: int | None = 6) -> str:
    """Fully parenthesised infix text.

    Constants are written with ``digits`` significant digits (6 by default,
    stable for golden files). ``digits=None`` writes the shortest repr that
    round-trips exactly.
    """
    consts = list(expr.constants) if expr.bound else None
    pos = 0
    ci = 0

    def walk() -> str:
        nonlocal pos, ci
        tok = expr.tokens[pos]
        pos += 1
        if tok.kind == "binary":
            a = walk()
            b = walk()
            return f"({a} {tok.name} {b})"
        if tok.kind == "unary":
            return f"{tok.name}({walk()})"
        if tok.kind == "const":
            ci += 1
            if consts is None:
                return "const"
            return _fmt(consts[ci - 1], digits)
        if tok.kind == "literal":
            return _fmt(tok.value, digits)
        return tok.name

    return walk()


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?inf|nan)"
    r"|(?P<var>x\d+(?:\[t-\d+\])?)|(?P<name>sin|cos|log|exp|step|const|s)"
    r"|(?P<op>[-+*/()^]))")


def _lex(text: str) -> list[tuple[str, str]]:
    out = []
    pos = 0
    text = text.strip()
    prev = None
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            raise ExpressionError(f"cannot parse {text[pos:]!r}")
        kind = m.lastgroup
        val = m.group(kind)
        # a sign directly after an operand is an operator, not part of a number
        if kind == "num" and val[0] in "+-" and prev is not None and prev[0] in ("num", "var", "name", "close"):
            out.append(("op", val[0]))
            val = val[1:]
        tag = "close" if (kind == "op" and val == ")") else kind
        out.append((kind, val))
        prev = (tag, val)
        pos = m.end()
    return out


def parse_infix(text: str) -> Expression:
    """Parse infix text; numbers become bound constants.

    Accepts the fully parenthesised output of :func:`to_infix` (which it
    reproduces token for token) as well as ordinary precedence, unary minus
    and small integer powers ``a^n``, expanded into products.
    """
    toks = _lex(text)
    pos = 0

    def peek():
        return toks[pos] if pos < len(toks) else (None, None)

    def take(expected=None):
        nonlocal pos
        if pos >= len(toks):
            raise ExpressionError("unexpected end of expression")
        tok = toks[pos]
        if expected is not None and tok[1] != expected:
            raise ExpressionError(f"expected {expected!r}, got {tok[1]!r}")
        pos += 1
        return tok

    # nodes: ("leaf", Token, value-or-None) or (Token, child, ...)
    def expr():
        node = term()
        while peek()[1] in ("+", "-") and peek()[0] == "op":
            op = take()[1]
            node = (_BY_NAME[op], node, term())
        return node

    def term():
        node = power()
        while peek()[1] in ("*", "/") and peek()[0] == "op":
            op = take()[1]
            node = (_BY_NAME[op], node, power())
        return node

    def power():
        node = unary()
        if peek()[1] == "^":
            take()
            kind, val = take()
            n = float(val) if kind == "num" else -1
            if n != int(n) or not 1 <= n <= 8:
                raise ExpressionError("only integer powers 1..8 are supported")
            base = node
            for _ in range(int(n) - 1):
                node = (MUL, node, base)
        return node

    def unary():
        kind, val = peek()
        if kind == "op" and val == "-":
            take()
            return (MUL, ("leaf", CONST, -1.0), unary())
        if kind == "op" and val == "+":
            take()
            return unary()
        return atom()

    def atom():
        kind, val = peek()
        if val == "(" and kind == "op":
            take("(")
            node = expr()
            take(")")
            return node
        if kind == "name" and val in _UNARY:
            take()
            take("(")
            node = expr()
            take(")")
            return (_BY_NAME[val], node)
        if kind == "name" and val == "s":
            take()
            return ("leaf", S, None)
        if kind == "name" and val == "const":
            raise ExpressionError("unbound 'const' cannot be parsed from text")
        if kind == "var":
            take()
            return ("leaf", token_from_name(val), None)
        if kind == "num":
            take()
            return ("leaf", CONST, float(val))
        raise ExpressionError(f"unexpected token {val!r}")

    tree = expr()
    if pos != len(toks):
        raise ExpressionError(f"trailing text after position {pos}")
    out: list[Token] = []
    consts: list[float] = []

    def flatten(node):
        if node[0] == "leaf":
            out.append(node[1])
            if node[2] is not None:
                consts.append(node[2])
            return
        out.append(node[0])
        for child in node[1:]:
            flatten(child)

    flatten(tree)
    return Expression(tuple(out), tuple(consts))


# --- JSON -------------------------------------------------------------------

def expression_to_json(expr: Expression) -> dict:
    return {
        "tokens": [t.name for t in expr.tokens],
        "constants": [float(c) for c in expr.constants],
        "complexity": complexity(expr),
        "infix": to_infix(expr),
    }


def expression_from_json(d: dict | str) -> Expression:
    if isinstance(d, str):
        d = json.loads(d)
    return parse_preorder(d["tokens"], d.get("constants", ()))


def is_finite(values) -> bool:
    return bool(np.all(np.isfinite(values)))


def nan_guard(x: float) -> float:
    return x if math.isfinite(x) else float("nan")
