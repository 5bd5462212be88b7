"""Transfer functions in s, companion-form realisations and their simulation.

Coefficient vectors are stored in ascending powers of s: ``num = [b0 .. bQ]``
and ``den = [a0 .. aP]`` with ``aP = 1``.

Simulation uses explicit Euler on the controllable canonical realisation::

    x[t+1] = x[t] + dt (A x[t] + B u[t]),   y[t] = C x[t] + D u[t],   x[0] = 0

For an LTI system this recursion has the discrete transfer function
``H((z - 1) / dt)``, so candidates are simulated with one ``lfilter`` call.
:func:`simulate_reference` steps the state explicitly and serves as the
check for the fast path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .engine import (MIN_REWARD, RewardConfig, ScoredExpression, TrainResult, _BIG_RESIDUAL,
                     fit_constants, outlier_filter, reward_from_residuals, train)
from .expr import ADD, CONST, DIV, MUL, S, Dataset, Expression, TokenLibrary, complexity

__all__ = [
    "TransferFunction", "StateSpace", "ImproperTransferFunction", "DegenerateDenominator",
    "OrderTooHigh", "UnstableStep", "NoProperCandidate",
    "tf_to_statespace", "simulate", "simulate_tf", "simulate_reference", "expr_to_rational",
    "SDomainTask", "recover_tf", "rational_to_expr", "OVERFLOW",
]

OVERFLOW = 1e12
_REL_TOL = 1e-12


class ImproperTransferFunction(ValueError):
    pass


class OrderTooHigh(ImproperTransferFunction):
    pass


class DegenerateDenominator(ValueError):
    pass


class UnstableStep(FloatingPointError):
    pass


class NoProperCandidate(RuntimeError):
    pass


def _trim(p: np.ndarray) -> np.ndarray:
    """Drop high-order coefficients that are negligible next to the largest one."""
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        return np.zeros(1)
    scale = np.max(np.abs(p))
    if scale == 0 or not np.isfinite(scale):
        return p[:1] * 0 if scale == 0 else p
    nz = np.flatnonzero(np.abs(p) > _REL_TOL * scale)
    return p[: nz[-1] + 1]


@dataclass(frozen=True)
class TransferFunction:
    num: tuple
    den: tuple

    def __post_init__(self):
        num = _trim(np.atleast_1d(np.asarray(self.num, dtype=float)))
        den = _trim(np.atleast_1d(np.asarray(self.den, dtype=float)))
        if not np.any(den):
            raise DegenerateDenominator("denominator is identically zero")
        if not (np.all(np.isfinite(num)) and np.all(np.isfinite(den))):
            raise DegenerateDenominator("non-finite coefficients")
        if not np.any(num):
            num = np.zeros(1)
        if num.size > den.size:
            raise ImproperTransferFunction(f"numerator order {num.size - 1} > denominator order {den.size - 1}")
        lead = den[-1]
        object.__setattr__(self, "num", tuple(float(v) for v in num / lead))
        object.__setattr__(self, "den", tuple(float(v) for v in den / lead))

    @property
    def order(self) -> tuple:
        """(P, Q): denominator and numerator degrees."""
        return len(self.den) - 1, (len(self.num) - 1 if any(self.num) else 0)

    def __call__(self, s):
        s = np.asarray(s, dtype=complex)
        return np.polynomial.polynomial.polyval(s, self.num) / np.polynomial.polynomial.polyval(s, self.den)

    @property
    def dc_gain(self) -> float:
        return self.num[0] / self.den[0] if self.den[0] != 0 else math.inf

    def minimal(self, tol: float = 1e-6) -> "TransferFunction":
        """Cancel pole/zero pairs that coincide within ``tol`` (relative)."""
        if len(self.num) < 2 or len(self.den) < 2:
            return self
        zeros = list(np.roots(self.num[::-1]))
        poles = list(np.roots(self.den[::-1]))
        gain = self.num[-1]
        changed = True
        while changed:
            changed = False
            for z in zeros:
                for p in poles:
                    if abs(z - p) <= tol * (1 + abs(p)):
                        zeros.remove(z)
                        poles.remove(p)
                        changed = True
                        break
                if changed:
                    break
        num = np.real(np.poly(zeros)[::-1]) * gain if zeros else np.array([gain])
        den = np.real(np.poly(poles)[::-1]) if poles else np.array([1.0])
        return TransferFunction(tuple(num), tuple(den))

    def to_json(self) -> dict:
        return {"num": list(self.num), "den": list(self.den)}

    @classmethod
    def from_json(cls, d: dict) -> "TransferFunction":
        return cls(tuple(d["num"]), tuple(d["den"]))

    def latex(self, digits: int = 4) -> str:
        def poly(c):
            terms = []
            for i in range(len(c) - 1, -1, -1):
                v = c[i]
                if v == 0:
                    continue
                mag = f"{abs(v):.{digits}g}"
                if i > 0 and mag == "1":
                    mag = ""
                pw = "" if i == 0 else ("s" if i == 1 else f"s^{i}")
                sign = "-" if v < 0 else "+"
                terms.append((sign, mag + pw if (mag + pw) else "1"))
            if not terms:
                return "0"
            out = ("-" if terms[0][0] == "-" else "") + terms[0][1]
            for sign, t in terms[1:]:
                out += f"{sign}{t}"
            return out
        if len(self.den) == 1:
            return poly(self.num)
        return rf"\frac{{{poly(self.num)}}}{{{poly(self.den)}}}"


@dataclass(frozen=True)
class StateSpace:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float

    @property
    def order(self) -> int:
        return self.A.shape[0]

    def transfer(self, s: complex) -> complex:
        P = self.order
        if P == 0:
            return complex(self.D)
        x = np.linalg.solve(s * np.eye(P) - self.A, self.B)
        return complex((self.C @ x).item() + self.D)


def tf_to_statespace(tf: TransferFunction) -> StateSpace:
    """Controllable canonical (companion) realisation."""
    a = np.asarray(tf.den)
    P = a.size - 1
    b = np.zeros(P + 1)
    b[: len(tf.num)] = tf.num
    D = float(b[P])
    A = np.zeros((P, P))
    if P:
        A[:-1, 1:] = np.eye(P - 1)
        A[-1, :] = -a[:P]
    B = np.zeros((P, 1))
    if P:
        B[-1, 0] = 1.0
    C = (b[:P] - a[:P] * D).reshape(1, P)
    return StateSpace(A, B, C, D)


# --- simulation ---------------------------------------------------------------

_BASIS: dict = {}


def _euler_basis(P: int) -> np.ndarray:
    """Rows i = q^(P-i) (1-q)^i in ascending powers of q = 1/z."""
    if P not in _BASIS:
        M = np.zeros((P + 1, P + 1))
        for i in range(P + 1):
            poly = np.zeros(P - i + 1)
            poly[-1] = 1.0
            for _ in range(i):
                poly = np.convolve(poly, [1.0, -1.0])
            M[i, : poly.size] = poly
        _BASIS[P] = M
    return _BASIS[P]


def _euler_filter(num, den, dt):
    """lfilter coefficients of the Euler-discretised transfer function."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    P = den.size - 1
    b = np.zeros(P + 1)
    b[: num.size] = num
    M = _euler_basis(P)
    scale = dt ** (P - np.arange(P + 1))
    return (b * scale) @ M, (den * scale) @ M


def _rk4_filter(tf: TransferFunction, dt):
    ss = tf_to_statespace(tf)
    P = ss.order
    if P == 0:
        return np.array([ss.D]), np.array([1.0])
    hA = dt * ss.A
    I = np.eye(P)
    hA2 = hA @ hA
    hA3 = hA2 @ hA
    Phi = I + hA + hA2 / 2 + hA3 / 6 + hA3 @ hA / 24
    Gam = dt * (I + hA / 2 + hA2 / 6 + hA3 / 24) @ ss.B
    b, a = signal.ss2tf(Phi, Gam, ss.C, np.array([[ss.D]]))
    return np.atleast_1d(b[0]), a


def _check(y):
    if not np.all(np.isfinite(y)) or np.max(np.abs(y), initial=0.0) > OVERFLOW:
        raise UnstableStep("simulated output left the overflow guard")
    return y


def simulate_tf(tf: TransferFunction, u, dt: float, method: str = "euler") -> np.ndarray:
    """Response of ``tf`` to the input samples ``u`` from a zero initial state."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = np.asarray(u, dtype=float)
    if len(tf.den) == 1:
        return _check(tf.num[0] / tf.den[0] * u)
    if method == "euler":
        b, a = _euler_filter(tf.num, tf.den, dt)
    elif method == "rk4":
        b, a = _rk4_filter(tf, dt)
    else:
        raise ValueError("method must be 'euler' or 'rk4'")
    with np.errstate(all="ignore"):
        y = signal.lfilter(b, a, u)
    return _check(y)


def simulate(ss: StateSpace, u, dt: float, method: str = "euler") -> np.ndarray:
    """Simulate a state-space model; same recursion as :func:`simulate_reference`."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = np.asarray(u, dtype=float)
    P = ss.order
    if P == 0:
        return _check(ss.D * u)
    if method == "euler":
        Ad = np.eye(P) + dt * ss.A
        Bd = dt * ss.B
    elif method == "rk4":
        hA = dt * ss.A
        hA2 = hA @ hA
        hA3 = hA2 @ hA
        Ad = np.eye(P) + hA + hA2 / 2 + hA3 / 6 + hA3 @ hA / 24
        Bd = dt * (np.eye(P) + hA / 2 + hA2 / 6 + hA3 / 24) @ ss.B
    else:
        raise ValueError("method must be 'euler' or 'rk4'")
    b, a = signal.ss2tf(Ad, Bd, ss.C, np.array([[ss.D]]))
    with np.errstate(all="ignore"):
        y = signal.lfilter(np.atleast_1d(b[0]), a, u)
    return _check(y)


def simulate_reference(ss: StateSpace, u, dt: float) -> np.ndarray:
    """Explicit Euler stepping of the state, one sample at a time."""
    u = np.asarray(u, dtype=float)
    x = np.zeros(ss.order)
    B = ss.B.ravel()
    C = ss.C.ravel()
    y = np.empty_like(u)
    for t, ut in enumerate(u):
        y[t] = C @ x + ss.D * ut
        if abs(y[t]) > OVERFLOW or not math.isfinite(y[t]):
            raise UnstableStep("simulated output left the overflow guard")
        x = x + dt * (ss.A @ x + B * ut)
    return y


# --- expressions as rational functions -----------------------------------------

def _padd(a, b, sign=1.0):
    if a.size < b.size:
        a = np.concatenate([a, np.zeros(b.size - a.size)])
    elif b.size < a.size:
        b = np.concatenate([b, np.zeros(a.size - b.size)])
    return a + sign * b


_DEG_LIMIT = 16


def _rational_pair(expr: Expression, constants=None):
    consts = expr.constants if constants is None else constants
    pos = 0
    ci = 0
    one = np.ones(1)

    def walk():
        nonlocal pos, ci
        tok = expr.tokens[pos]
        pos += 1
        k = tok.kind
        if k == "const":
            ci += 1
            return np.array([float(consts[ci - 1])]), one
        if k == "literal":
            return np.array([tok.value]), one
        if k == "s":
            return np.array([0.0, 1.0]), one
        if k != "binary":
            raise ValueError(f"token {tok.name} is not allowed in an s-domain expression")
        na, da = walk()
        nb, db = walk()
        op = tok.name
        if op == "*":
            n, d = np.convolve(na, nb), np.convolve(da, db)
        elif op == "/":
            n, d = np.convolve(na, db), np.convolve(da, nb)
        elif da.size == 1 and db.size == 1 and da[0] == db[0]:
            n, d = _padd(na, nb, 1.0 if op == "+" else -1.0), da
        else:
            n = _padd(np.convolve(na, db), np.convolve(nb, da), 1.0 if op == "+" else -1.0)
            d = np.convolve(da, db)
        if n.size > _DEG_LIMIT or d.size > _DEG_LIMIT:
            n, d = _trim(n), _trim(d)
            if n.size > _DEG_LIMIT or d.size > _DEG_LIMIT:
                raise OrderTooHigh("intermediate polynomial degree too large")
        return n, d

    return walk()


def expr_to_rational(expr: Expression, constants=None, max_order: int | None = None) -> TransferFunction:
    """Expand an expression over {+, -, *, /, constants, s} into one ratio of polynomials."""
    n, d = _rational_pair(expr, constants)
    n, d = _trim(n), _trim(d)
    if not np.any(d):
        raise DegenerateDenominator("denominator is identically zero")
    if not np.any(n):
        n = np.zeros(1)
    else:
        # cancel common powers of s
        k = min(np.flatnonzero(np.abs(n) > 0)[0], np.flatnonzero(np.abs(d) > 0)[0])
        n, d = n[k:], d[k:]
    tf = TransferFunction(tuple(n), tuple(d))
    if max_order is not None and tf.order[0] > max_order:
        raise OrderTooHigh(f"order {tf.order[0]} exceeds {max_order}")
    return tf


def rational_to_expr(tf: TransferFunction) -> Expression:
    """Expression ``num(s) / den(s)`` with one constant per coefficient."""
    toks: list = []
    consts: list = []

    def power(i):
        return [MUL, S] * (i - 1) + [S]

    def poly(c):
        terms = [i for i, v in enumerate(c) if v != 0] or [0]
        toks.extend([ADD] * (len(terms) - 1))
        for i in terms:
            if i == 0:
                toks.append(CONST)
            else:
                toks.extend([MUL, CONST] + power(i))
            consts.append(float(c[i]))

    toks.append(DIV)
    poly(tf.num)
    poly(tf.den)
    return Expression(tuple(toks), tuple(consts))


# --- recovery task ------------------------------------------------------------

class SDomainTask:
    """Score s-expressions by simulating them on a recorded input/output pair."""

    def __init__(self, u, y, dt: float, method: str = "euler", max_order: int = 4,
                 sigma: float | None = None, active=None):
        self.u = np.asarray(u, dtype=float).ravel()
        self.y = np.asarray(y, dtype=float).ravel()
        if self.u.size != self.y.size:
            raise ValueError("input and output lengths differ")
        self.dt = float(dt)
        self.method = method
        self.max_order = max_order
        if active is None:
            self.idx = np.arange(self.y.size)
        else:
            a = np.asarray(active)
            self.idx = np.flatnonzero(a) if a.dtype == bool else a.astype(int)
        if self.idx.size == 0:
            raise ValueError("no active points")
        self.sigma = float(np.std(self.y[self.idx])) if sigma is None else float(sigma)

    def predict(self, expr: Expression, constants=None) -> np.ndarray:
        tf = expr_to_rational(expr, constants, self.max_order)
        return simulate_tf(tf, self.u, self.dt, self.method)

    def _residual(self, expr, idx):
        y = self.y[idx]
        bad = np.full(idx.size, _BIG_RESIDUAL)

        def res(c):
            try:
                r = self.predict(expr, c)[idx] - y
            except (ValueError, FloatingPointError, np.linalg.LinAlgError, ZeroDivisionError):
                return bad
            return r
        return res

    def score(self, expr: Expression, cfg: RewardConfig, init=None) -> ScoredExpression:
        k = expr.n_constants
        idx = self.idx
        res = self._residual(expr, idx)
        c, sse, flag = fit_constants(res, k, idx.size, init, cfg.optimizer, cfg.max_iter, cfg.lm_iter)
        kept = idx
        if cfg.alpha > 0 and sse < _BIG_RESIDUAL:
            losses = np.abs(res(c))
            kept = idx[outlier_filter(losses, cfg.alpha)]
            if k:
                c, _, f2 = fit_constants(self._residual(expr, kept), k, kept.size, c,
                                         cfg.optimizer, cfg.max_iter, cfg.lm_iter)
                flag = flag or f2
        try:
            tf = expr_to_rational(expr, c, self.max_order)
            pred = simulate_tf(tf, self.u, self.dt, self.method)
        except (ValueError, FloatingPointError, np.linalg.LinAlgError, ZeroDivisionError):
            return ScoredExpression.invalid(expr.with_constants(c))
        resid = pred[kept] - self.y[kept]
        total, r, e, a = reward_from_residuals(resid, self.sigma, complexity(expr), cfg.phi)
        return ScoredExpression(expr.with_constants(c), total, r, e, a, np.abs(pred - self.y), kept,
                                valid=total > MIN_REWARD, flagged=flag, extra={"tf": tf})


def recover_tf(data: Dataset, cfg: RewardConfig = RewardConfig(budget=20000), seed=0,
               lib: TokenLibrary | None = None, method: str = "euler", max_order: int = 4):
    """Search for the transfer function mapping ``data.inputs[:, 0]`` to ``data.outputs``.

    Returns ``(TransferFunction, Expression, TrainResult)``.
    """
    lib = lib or TokenLibrary.s_domain()
    task = SDomainTask(data.inputs[:, 0], data.outputs, data.dt, method, max_order)
    result: TrainResult = train(data, lib, cfg, seed, task=task)
    if not result.best.valid:
        raise NoProperCandidate("no proper transfer function found within the budget")
    tf = result.best.extra.get("tf") or expr_to_rational(result.best.expr, max_order=max_order)
    return tf, result.best.expr, result
