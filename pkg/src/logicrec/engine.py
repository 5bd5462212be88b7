"""Reward, constant fitting, outlier-aware filtering and risk-seeking training.

The training loop is task-agnostic: a task turns a sampled structure into a
:class:`ScoredExpression` (fitting constants on the way). Time-domain
regression is provided here; the s-domain and implicit-boundary tasks live in
their own modules.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .expr import Dataset, Expression, TokenLibrary, compile_expression, complexity
from .policy import Adam, Policy

__all__ = [
    "RewardConfig", "ScoredExpression", "TrainResult", "DegenerateTarget",
    "OptimizerDiverged", "BudgetExhausted", "R_MAX", "MIN_REWARD",
    "nrmse", "aic", "reward_from_residuals", "reward", "optimize_constants",
    "outlier_filter", "RegressionTask", "train", "risk_weights", "TrainState",
    "levenberg_marquardt", "snap_constants",
]

R_MAX = 1e6
MIN_REWARD = -1e6  # assigned to candidates that cannot be evaluated
_BIG_RESIDUAL = 1e10


class DegenerateTarget(ValueError):
    pass


class OptimizerDiverged(RuntimeError):
    pass


class BudgetExhausted(RuntimeError):
    """Raised only on request; carries the best expression found."""

    def __init__(self, best):
        super().__init__("expression budget exhausted")
        self.best = best


@dataclass(frozen=True)
class RewardConfig:
    epsilon: float = 0.05
    alpha: float = 0.0
    phi: float = 0.1
    batch_size: int = 1000
    budget: int = 200_000
    hidden_size: int = 32
    learning_rate: float = 5e-4
    entropy_weight: float = 5e-3
    optimizer: str = "lm"          # "lm" or "nelder-mead"
    max_iter: int = 200            # Nelder-Mead iterations
    lm_iter: int = 25              # Levenberg-Marquardt Jacobian evaluations
    stop_nrmse: float = 0.0        # stop once the best NRMSE is at or below this
    patience: int = 0              # stop after this many batches without improvement (0 = off)
    threads: int = 1
    trim_iter: int = 1             # outlier filter / refit rounds per expression

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")
        if self.phi < 0:
            raise ValueError("phi must be non-negative")
        if self.batch_size < 1 or self.budget < 1:
            raise ValueError("batch_size and budget must be positive")
        if self.optimizer not in ("lm", "nelder-mead"):
            raise ValueError("optimizer must be 'lm' or 'nelder-mead'")
        if self.trim_iter < 1:
            raise ValueError("trim_iter must be at least 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "RewardConfig":
        keys = cls.__dataclass_fields__.keys()
        return cls(**{k: v for k, v in d.items() if k in keys})


@dataclass(frozen=True)
class ScoredExpression:
    expr: Expression
    reward: float                  # combined training reward
    fit_reward: float = 0.0        # 1 / NRMSE (clamped)
    nrmse: float = math.inf
    aic: float = math.inf
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    kept: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int), repr=False)
    valid: bool = True
    flagged: bool = False
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def complexity(self) -> int:
        return complexity(self.expr)

    @classmethod
    def invalid(cls, expr: Expression) -> "ScoredExpression":
        return cls(expr, MIN_REWARD, 0.0, math.inf, math.inf, valid=False)


# --- reward -----------------------------------------------------------------

def nrmse(y, yhat, sigma: float | None = None) -> float:
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    s = float(np.std(y)) if sigma is None else float(sigma)
    if s == 0:
        raise DegenerateTarget("target has zero variance")
    return float(np.sqrt(np.mean((y - yhat) ** 2)) / s)


def aic(sse: float, n: int, m: int, sse_floor: float = 1e-300) -> float:
    """Complexity-penalised AIC normalised by sample count."""
    sse = max(float(sse), sse_floor)
    ln_l = -0.5 * n * math.log(2 * math.pi) - 0.5 * n * math.log(sse / n) - 0.5 * n
    return (2 * m - ln_l) / n + m


def reward_from_residuals(resid: np.ndarray, sigma: float, m: int, phi: float):
    """Return (combined reward, 1/NRMSE, NRMSE, AIC) for a residual vector."""
    if sigma == 0:
        raise DegenerateTarget("target has zero variance")
    resid = np.asarray(resid, dtype=float)
    if resid.size == 0 or not np.all(np.isfinite(resid)):
        return MIN_REWARD, 0.0, math.inf, math.inf
    sse = float(resid @ resid)
    e = math.sqrt(sse / resid.size) / sigma
    r = R_MAX if e < 1e-6 else 1.0 / e
    # the likelihood saturates where the fit reward does, so exact fits are
    # ranked by complexity rather than by round-off in sse
    a = aic(sse, resid.size, m, sse_floor=resid.size * (1e-6 * sigma) ** 2)
    total = r - phi * a if phi else r
    return total, r, e, a


def reward(expr: Expression, data: Dataset, phi: float = 0.1) -> ScoredExpression:
    """Score a bound expression on every evaluable timestep of ``data``."""
    task = RegressionTask(data)
    return task.score_bound(expr, phi)


# --- constants ----------------------------------------------------------------

def _safe_residual(f, y):
    def res(c):
        with np.errstate(all="ignore"):
            r = f(c) - y
        bad = ~np.isfinite(r)
        if bad.any():
            r = np.where(bad, _BIG_RESIDUAL, r)
        return r
    return res


def fit_constants(residual, n_const: int, n_points: int, init=None,
                  method: str = "lm", max_iter: int = 200, lm_iter: int = 25):
    """Minimise ``sum(residual(c)**2)`` from ``init`` (ones by default).

    Returns ``(constants, sse, flagged)``; never returns constants worse than
    the starting point.
    """
    with np.errstate(all="ignore"):
        return _fit_constants(residual, n_const, n_points, init, method, max_iter, lm_iter)


def _fit_constants(residual, n_const, n_points, init, method, max_iter, lm_iter):
    c0 = np.ones(n_const) if init is None else np.asarray(init, dtype=float)
    r0 = residual(c0)
    sse0 = float(r0 @ r0)
    if n_const == 0:
        return c0, sse0, False
    flagged = False
    try:
        if method == "lm":
            c = levenberg_marquardt(residual, c0, lm_iter, r0)
        else:
            sol = minimize(lambda c: float(np.sum(residual(c) ** 2)), c0, method="Nelder-Mead",
                           options={"maxiter": max_iter, "xatol": 1e-10, "fatol": 1e-14})
            c = sol.x
        r = residual(c)
        sse = float(r @ r)
        if not np.all(np.isfinite(c)) or not math.isfinite(sse):
            raise OptimizerDiverged("non-finite constants")
    except (OptimizerDiverged, ValueError, np.linalg.LinAlgError):
        return c0, sse0, True
    if sse > sse0:
        return c0, sse0, flagged
    return c, sse, flagged


def snap_constants(sse, c, digits=(1, 2, 3, 4)):
    """Round each constant to zero or the fewest significant digits that keep ``sse(c)`` from rising.

    A step output is flat in its constants over an interval, and the fitted
    point can land anywhere in it; the shortest decimal in the interval is
    the one that generalises when the true boundary is a round number.
    """
    c = np.array(c, dtype=float)
    base = sse(c)
    if not np.isfinite(base):
        return c
    for j in range(c.size):
        if c[j] == 0:
            continue
        for d in (0,) + tuple(digits):
            trial = c.copy()
            trial[j] = float(f"{c[j]:.{d}g}") if d else 0.0
            if trial[j] == c[j]:
                break
            if sse(trial) <= base:
                c = trial
                break
    return c


def levenberg_marquardt(residual, c0, max_jac: int = 25, r0=None, tol: float = 1e-12):
    """Damped Gauss-Newton with forward-difference Jacobians.

    At most ``max_jac`` Jacobians are formed. Written out rather than taken
    from MINPACK so that repeated fits are bit-identical.
    """
    c = np.array(c0, dtype=float)
    r = residual(c) if r0 is None else np.asarray(r0, dtype=float)
    sse = float(np.dot(r, r))
    k = c.size
    mu = 1e-3
    eps = math.sqrt(np.finfo(float).eps)
    for _ in range(max_jac):
        if sse == 0.0:
            break
        J = np.empty((r.size, k))
        for j in range(k):
            h = eps * max(abs(c[j]), 1.0)
            cj = c.copy()
            cj[j] += h
            J[:, j] = (residual(cj) - r) / h
        A = J.T @ J
        g = J.T @ r
        d = np.maximum(np.diag(A), 1e-12)
        improved = False
        while mu < 1e12:
            try:
                step = np.linalg.solve(A + mu * np.diag(d), -g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            cn = c + step
            rn = residual(cn)
            sn = float(np.dot(rn, rn))
            if np.isfinite(sn) and sn < sse:
                improved = True
                break
            mu *= 10
        if not improved:
            break
        gain = sse - sn
        c, r, sse = cn, rn, sn
        mu = max(mu / 10, 1e-12)
        if gain <= tol * sse or np.max(np.abs(step)) <= tol * (1 + np.max(np.abs(c))):
            break
    return c


def optimize_constants(expr: Expression, data: Dataset, active=None,
                       method: str = "lm", max_iter: int = 200) -> Expression:
    """Fit the constant placeholders on the ``active`` timesteps (absolute indices)."""
    task = RegressionTask(data)
    f = compile_expression(expr, data.inputs, task.start)
    idx = task.window_index(active)
    y = task.y[idx]
    res = _safe_residual(lambda c: f(c)[idx], y)
    init = expr.constants if expr.bound and expr.n_constants else None
    c, _, _ = fit_constants(res, expr.n_constants, idx.size, init, method, max_iter)
    return expr.with_constants(c)


def outlier_filter(losses, alpha: float) -> np.ndarray:
    """Indices whose loss is at most the ``ceil((1-alpha) T)``-th smallest loss."""
    losses = np.asarray(losses, dtype=float)
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    T = losses.size
    if alpha == 0 or T == 0:
        return np.arange(T)
    k = max(int(math.ceil((1 - alpha) * T - 1e-9)), 1)
    finite = np.where(np.isfinite(losses), losses, np.inf)
    th = np.partition(finite, k - 1)[k - 1]
    return np.flatnonzero(finite <= th)


# --- tasks --------------------------------------------------------------------

class RegressionTask:
    """Predict ``outputs[t]`` from inputs at ``t`` and earlier.

    Timesteps before ``data.max_delay`` are skipped for every candidate so
    rewards are comparable. ``active`` restricts scoring to a subset of
    absolute timesteps; ``sigma`` overrides the normaliser (defaults to the
    standard deviation of all scored targets).
    """

    def __init__(self, data: Dataset, active=None, sigma: float | None = None):
        self.data = data
        self.start = data.max_delay
        if len(data) <= self.start:
            raise ValueError("dataset is not longer than its max delay")
        self.y = np.asarray(data.outputs[self.start:])
        self.idx = self.window_index(active)
        if self.idx.size == 0:
            raise ValueError("no active points")
        self.sigma = float(np.std(self.y[self.idx])) if sigma is None else float(sigma)
        if self.sigma == 0:
            raise DegenerateTarget("target has zero variance")

    def window_index(self, active) -> np.ndarray:
        if active is None:
            return np.arange(self.y.size)
        a = np.asarray(active)
        if a.dtype == bool:
            a = np.flatnonzero(a)
        a = a - self.start
        return a[(a >= 0) & (a < self.y.size)]

    def predictor(self, expr: Expression, soft_step: float | None = None):
        """``f(constants)`` evaluated at the active timesteps only."""
        return compile_expression(expr, self.data.inputs, soft_step=soft_step,
                                  index=self.idx + self.start)

    def score_bound(self, expr: Expression, phi: float) -> ScoredExpression:
        f = self.predictor(expr)
        with np.errstate(all="ignore"):
            resid = f(expr.constants) - self.y[self.idx]
        total, r, e, a = reward_from_residuals(resid, self.sigma, complexity(expr), phi)
        return ScoredExpression(expr, total, r, e, a, np.abs(resid), self.idx + self.start,
                                valid=total > MIN_REWARD)

    def score(self, expr: Expression, cfg: RewardConfig, init=None) -> ScoredExpression:
        """Fit constants (with outlier-aware refit) and score.

        ``init`` replaces the all-ones starting point of the fit.
        """
        f = self.predictor(expr)
        y = self.y[self.idx]
        n = y.size
        k = expr.n_constants
        if k and init is None and any(t.name == "step" for t in expr.tokens):
            # constants inside step get no gradient; anneal a logistic surrogate first
            for width in (0.1, 0.01, 0.001):
                fs = self.predictor(expr, soft_step=width)
                init, _, _ = fit_constants(_safe_residual(fs, y), k, n, init, cfg.optimizer,
                                           cfg.max_iter, cfg.lm_iter)
        c, _, flag = fit_constants(_safe_residual(f, y), k, n, init, cfg.optimizer, cfg.max_iter,
                                   cfg.lm_iter)
        sel = slice(None)
        if cfg.alpha > 0:
            prev = None
            # trim and refit until the kept set settles (at most trim_iter rounds)
            for _ in range(cfg.trim_iter if k else 1):
                with np.errstate(all="ignore"):
                    losses = np.abs(f(c) - y)
                sel = outlier_filter(losses, cfg.alpha)
                if not k or (prev is not None and np.array_equal(sel, prev)):
                    break
                prev = sel
                ys = y[sel]
                sub = _safe_residual(lambda cc, sel=sel: f(cc)[sel], ys)
                c, _, flag2 = fit_constants(sub, k, ys.size, c, cfg.optimizer, cfg.max_iter,
                                             cfg.lm_iter)
                flag = flag or flag2
        if k and any(t.name == "step" for t in expr.tokens):
            sse = lambda cc: float(np.sum(np.square(_safe_residual(f, y)(cc)[sel])))
            c = snap_constants(sse, c)
        with np.errstate(all="ignore"):
            pred = f(c)
        resid = pred[sel] - y[sel]
        total, r, e, a = reward_from_residuals(resid, self.sigma, complexity(expr), cfg.phi)
        kept = (self.idx + self.start)[sel]
        return ScoredExpression(expr.with_constants(c), total, r, e, a, np.abs(pred - y), kept,
                                valid=total > MIN_REWARD, flagged=flag)


# --- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    best: ScoredExpression
    n_sampled: int
    n_batches: int
    budget_exhausted: bool
    history: list = field(default_factory=list)
    top: list = field(default_factory=list)
    state: "TrainState | None" = None

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "best_reward", "mean_reward", "best_complexity"])
            for row in self.history:
                w.writerow(row)


@dataclass
class TrainState:
    """Policy, optimiser and sampler state carried between warm-started runs."""

    policy: Policy
    opt: Adam
    rng: np.random.Generator


def risk_weights(rewards: np.ndarray, epsilon: float):
    """Indices in the top-epsilon fraction and their advantages over the quantile."""
    rewards = np.asarray(rewards, dtype=float)
    ok = np.flatnonzero(rewards > MIN_REWARD)
    if ok.size == 0:
        return ok, np.zeros(0)
    q = np.quantile(rewards[ok], 1 - epsilon, method="higher")
    keep = ok[rewards[ok] >= q]
    return keep, rewards[keep] - q


def train(data, lib: TokenLibrary, cfg: RewardConfig = RewardConfig(), seed=0,
          task=None, top_k: int = 0, raise_on_budget: bool = False,
          state: TrainState | None = None) -> TrainResult:
    """Risk-seeking policy-gradient search for the best-rewarded expression.

    ``task`` must expose ``score(expr, cfg) -> ScoredExpression``; by default a
    :class:`RegressionTask` over ``data`` is used. Deterministic for a fixed
    seed. ``top_k`` > 0 keeps the best distinct expressions seen. Passing
    the ``state`` of an earlier result continues from its policy instead of
    a fresh one; the score cache is not carried over since the task may differ.
    """
    if task is None:
        task = RegressionTask(data)
    if state is None:
        rng = np.random.default_rng(seed)
        policy = Policy(lib, cfg.hidden_size, seed=rng.integers(2**32))
        opt = Adam(policy.params, cfg.learning_rate)
    else:
        rng, policy, opt = state.rng, state.policy, state.opt
    cache: dict = {}
    best: ScoredExpression | None = None
    history = []
    n_sampled = 0
    it = 0
    since_improve = 0
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        while n_sampled < cfg.budget:
            n = min(cfg.batch_size, cfg.budget - n_sampled)
            batch = policy.sample(n, rng)
            n_sampled += n
            exprs = policy.to_expressions(batch)
            keys = [batch.token_ids(i) for i in range(n)]
            todo = {}
            for k, e in zip(keys, exprs):
                if k not in cache and k not in todo:
                    todo[k] = e
            items = list(todo.items())
            if pool is not None:
                results = list(pool.map(lambda kv: _safe_score(task, kv[1], cfg), items))
            else:
                results = [_safe_score(task, e, cfg) for _, e in items]
            for (k, _), s in zip(items, results):
                cache[k] = s
            scored = [cache[k] for k in keys]
            rewards = np.array([s.reward for s in scored])
            improved = False
            for s in scored:
                if s.valid and (best is None or s.reward > best.reward):
                    best = s
                    improved = True
            since_improve = 0 if improved else since_improve + 1
            fin = rewards[rewards > MIN_REWARD]
            history.append([it, best.reward if best else MIN_REWARD,
                            float(fin.mean()) if fin.size else MIN_REWARD,
                            best.complexity if best else 0])
            it += 1
            if best is not None and best.nrmse <= cfg.stop_nrmse:
                break
            if cfg.patience and since_improve >= cfg.patience:
                break
            if n_sampled >= cfg.budget:
                break
            keep, adv = risk_weights(rewards, cfg.epsilon)
            if keep.size == 0 or not np.any(adv > 0):
                continue
            sub = batch.subset(keep)
            g = policy.gradient(sub, adv / keep.size, cfg.entropy_weight / keep.size)
            opt.ascend(policy.params, g)
    finally:
        if pool is not None:
            pool.shutdown()
    if best is None:
        best = ScoredExpression.invalid(exprs[0])
    exhausted = n_sampled >= cfg.budget
    top = []
    if top_k:
        uniq = sorted((s for s in cache.values() if s.valid), key=lambda s: -s.reward)
        top = uniq[:top_k]
    result = TrainResult(best, n_sampled, it, exhausted, history, top,
                         TrainState(policy, opt, rng))
    if exhausted and raise_on_budget:
        raise BudgetExhausted(result)
    return result


def _safe_score(task, expr, cfg) -> ScoredExpression:
    try:
        s = task.score(expr, cfg)
    except (FloatingPointError, OverflowError, ZeroDivisionError, np.linalg.LinAlgError):
        return ScoredExpression.invalid(expr)
    if not math.isfinite(s.reward):
        return replace(s, reward=MIN_REWARD, valid=False)
    return s


def with_config(cfg: RewardConfig, **kw) -> RewardConfig:
    return replace(cfg, **kw)
