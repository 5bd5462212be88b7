"""Multi-mode logic recovery and mode-switch detection.

Each mode is grown from a short seed window by alternating between fitting
an expression on the currently selected points and reselecting the points
that expression explains. Points are then smoothed in fixed windows, the
mode is recorded, and the search restarts on what is left.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import brentq, linear_sum_assignment
from sklearn.covariance import MinCovDet

from .engine import (MIN_REWARD, RegressionTask, RewardConfig, ScoredExpression, TrainResult,
                     fit_constants, _safe_residual, train)
from .expr import (Dataset, Expression, TokenLibrary, compile_expression, complexity,
                   expression_from_json, expression_to_json, to_infix, variables_of)
from .sdomain import SDomainTask, TransferFunction, expr_to_rational, simulate_tf

__all__ = [
    "ContinuityConfig", "Mode", "ModeModel", "SwitchLogic", "NonConvergent",
    "InsufficientBoundaryPoints", "update_membership", "adjust_indices", "first_window",
    "recover_multimode", "detect_switch_logic", "sharpen_labels", "index_accuracy", "boundary_points",
    "ImplicitTask", "rle_encode", "rle_decode",
]


class NonConvergent(RuntimeError):
    """A mode captured fewer than ``w`` points; ``partial`` holds the model so far."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class InsufficientBoundaryPoints(ValueError):
    pass


@dataclass(frozen=True)
class ContinuityConfig:
    """Membership thresholds and window smoothing.

    ``loss`` is ``squared`` (default) or ``absolute``; either is computed on
    outputs divided by the standard deviation of the whole target.
    """

    w: int = 50
    lambda1: float = 1.0
    lambda2: float = 1e-3
    window: int = 50
    occupancy: float = 0.8
    max_iter: int = 10
    loss: str = "squared"
    max_modes: int = 8
    absorb: float = 0.5

    def __post_init__(self):
        if not self.lambda1 > self.lambda2 > 0:
            raise ValueError("need lambda1 > lambda2 > 0")
        if self.w < 1 or self.window < 1 or self.max_iter < 1:
            raise ValueError("w, window and max_iter must be positive")
        if not 0 < self.occupancy <= 1 or not 0 < self.absorb <= 1:
            raise ValueError("occupancy and absorb must lie in (0, 1]")
        if self.loss not in ("squared", "absolute"):
            raise ValueError("loss must be 'squared' or 'absolute'")

    def to_dict(self):
        return asdict(self)


# --- membership ------------------------------------------------------------------

def update_membership(losses, cfg: ContinuityConfig, initial=False) -> np.ndarray:
    """``gamma_t = 1`` iff ``l_t <= lambda``, with the relaxed ``lambda1`` where ``initial``.

    ``initial`` is a boolean (whole vector in one phase) or a boolean mask
    marking the seed window. Non-finite losses are never assigned.
    """
    l = np.asarray(losses, dtype=float)
    lam = np.where(np.broadcast_to(np.asarray(initial, dtype=bool), l.shape), cfg.lambda1, cfg.lambda2)
    return np.isfinite(l) & (l <= lam)


def adjust_indices(gamma, window: int = 50, occupancy: float = 0.8, candidates=None) -> np.ndarray:
    """All-or-nothing assignment in non-overlapping windows.

    A window whose assigned share of candidate points exceeds ``occupancy``
    becomes fully assigned, otherwise fully unassigned. ``candidates``
    (default: every point) restricts both the share and the assignment.
    """
    g = np.asarray(gamma, dtype=bool)
    cand = np.ones_like(g) if candidates is None else np.asarray(candidates, dtype=bool)
    out = np.zeros_like(g)
    for a in range(0, g.size, window):
        c = cand[a:a + window]
        n = c.sum()
        if n == 0:
            continue
        if (g[a:a + window] & c).sum() / n > occupancy:
            out[a:a + window] = c
    return out


def first_window(free, w: int):
    """Indices of the first ``w`` points of the first run of ``>= w`` free points."""
    free = np.asarray(free, dtype=bool)
    run = 0
    for t, f in enumerate(free):
        run = run + 1 if f else 0
        if run == w:
            return np.arange(t - w + 1, t + 1)
    return None


def rle_encode(idx, T: int) -> list:
    """Sorted index set as ``[[start, stop), ...]`` runs."""
    m = np.zeros(T, dtype=bool)
    m[np.asarray(idx, dtype=int)] = True
    d = np.diff(np.concatenate([[0], m.astype(int), [0]]))
    return [[int(a), int(b)] for a, b in zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1))]


def rle_decode(runs) -> np.ndarray:
    if not runs:
        return np.zeros(0, dtype=int)
    return np.concatenate([np.arange(a, b) for a, b in runs])


# --- model -----------------------------------------------------------------------

@dataclass
class SwitchLogic:
    """``f = expr - offset``; ``f >= 0`` selects ``pos_mode``, otherwise ``neg_mode``."""

    expr: Expression
    offset: float
    pos_mode: int
    neg_mode: int
    accuracy: float = float("nan")
    threshold: float | None = None   # positive root along the first variable, if any

    @property
    def infix(self) -> str:
        return f"({to_infix(self.expr)} - {self.offset:.6g})"

    def evaluate(self, inputs) -> np.ndarray:
        f = compile_expression(self.expr, inputs, 0)
        return f(self.expr.constants) - self.offset

    def predict(self, inputs) -> np.ndarray:
        return np.where(self.evaluate(inputs) >= 0, self.pos_mode, self.neg_mode)

    def to_json(self) -> dict:
        return {"expr": expression_to_json(self.expr), "offset": self.offset,
                "pos_mode": self.pos_mode, "neg_mode": self.neg_mode,
                "accuracy": self.accuracy, "threshold": self.threshold, "infix": self.infix}

    @classmethod
    def from_json(cls, d) -> "SwitchLogic":
        return cls(expression_from_json(d["expr"]), d["offset"], d["pos_mode"], d["neg_mode"],
                   d.get("accuracy", float("nan")), d.get("threshold"))


@dataclass
class Mode:
    expr: Expression
    indices: np.ndarray
    tf: TransferFunction | None = None
    reward: float = float("nan")

    @property
    def infix(self) -> str:
        return self.tf.latex() if self.tf is not None else to_infix(self.expr)


@dataclass
class ModeModel:
    """Per-mode expressions, their index sets and an optional switch predicate."""

    modes: list
    T: int
    domain: str = "time"
    dt: float = 1.0
    max_delay: int = 0
    switch: SwitchLogic | None = None
    converged: bool = True
    history: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.modes)

    @property
    def labels(self) -> np.ndarray:
        lab = np.full(self.T, -1, dtype=int)
        for k, m in enumerate(self.modes):
            lab[m.indices] = k
        return lab

    def mode_outputs(self, data: Dataset) -> np.ndarray:
        """K x T predictions, one row per mode, NaN where undefined."""
        T = len(data)
        out = np.full((self.K, T), np.nan)
        for k, m in enumerate(self.modes):
            if self.domain == "s":
                tf = m.tf if m.tf is not None else expr_to_rational(m.expr)
                out[k] = simulate_tf(tf, data.inputs[:, 0], data.dt)
            else:
                start = max(data.max_delay, m.expr.max_delay)
                f = compile_expression(m.expr, data.inputs, start)
                out[k, start:] = f(m.expr.constants)
        return out

    def predict(self, data: Dataset, labels=None) -> np.ndarray:
        """Output under ``labels`` (default: the switch predicate)."""
        if labels is None:
            if self.switch is None:
                raise ValueError("model has no switch logic; pass labels")
            labels = self.switch.predict(data.inputs)
        out = self.mode_outputs(data)
        return out[np.asarray(labels), np.arange(len(data))]

    def to_json(self) -> dict:
        modes = []
        for m in self.modes:
            d = {"infix": m.infix, "expr": expression_to_json(m.expr),
                 "indices": rle_encode(m.indices, self.T), "reward": m.reward}
            if m.tf is not None:
                d["tf"] = m.tf.to_json()
            modes.append(d)
        return {"domain": self.domain, "T": self.T, "dt": self.dt, "max_delay": self.max_delay,
                "converged": self.converged, "modes": modes,
                "switch_logic_infix": self.switch.infix if self.switch else None,
                "switch_logic": self.switch.to_json() if self.switch else None}

    @classmethod
    def from_json(cls, d) -> "ModeModel":
        modes = [Mode(expression_from_json(m["expr"]), rle_decode(m["indices"]),
                      TransferFunction.from_json(m["tf"]) if "tf" in m else None,
                      m.get("reward", float("nan"))) for m in d["modes"]]
        sw = SwitchLogic.from_json(d["switch_logic"]) if d.get("switch_logic") else None
        return cls(modes, d["T"], d.get("domain", "time"), d.get("dt", 1.0),
                   d.get("max_delay", 0), sw, d.get("converged", True))


def index_accuracy(true_labels, pred_labels) -> float:
    """Share of timesteps whose mode matches after the best one-to-one relabelling."""
    a = np.asarray(true_labels)
    b = np.asarray(pred_labels)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("label vectors must be non-empty and aligned")
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    conf = np.zeros((ua.size, ub.size))
    np.add.at(conf, (ia, ib), 1)
    r, c = linear_sum_assignment(-conf)
    return float(conf[r, c].sum() / a.size)


# --- recovery --------------------------------------------------------------------

class _TimeBackend:
    def __init__(self, data: Dataset, sigma):
        self.data = data
        self.sigma = sigma
        self.start = data.max_delay

    def task(self, active):
        return RegressionTask(self.data, active, sigma=_active_sigma(self.data.outputs, active,
                                                                     self.sigma))

    def predict(self, expr: Expression) -> np.ndarray:
        out = np.full(len(self.data), np.nan)
        out[self.start:] = compile_expression(expr, self.data.inputs, self.start)(expr.constants)
        return out

    def refit(self, expr: Expression, idx) -> Expression:
        if not expr.n_constants:
            return expr
        i = idx[idx >= self.start]
        f = compile_expression(expr, self.data.inputs, index=i)
        c, _, _ = fit_constants(_safe_residual(f, self.data.outputs[i]), expr.n_constants, i.size,
                                expr.constants)
        return expr.with_constants(c)

    def tf(self, expr):
        return None


class _SBackend:
    def __init__(self, data: Dataset, sigma, max_order, method):
        self.data = data
        self.sigma = sigma
        self.max_order = max_order
        self.method = method
        self.u = data.inputs[:, 0]
        self.start = 0

    def task(self, active):
        return SDomainTask(self.u, self.data.outputs, self.data.dt, self.method, self.max_order,
                           sigma=_active_sigma(self.data.outputs, active, self.sigma),
                           active=active)

    def predict(self, expr):
        try:
            return simulate_tf(expr_to_rational(expr, None, self.max_order), self.u, self.data.dt,
                               self.method)
        except (ValueError, FloatingPointError, np.linalg.LinAlgError, ZeroDivisionError):
            return np.full(len(self.data), np.nan)

    def refit(self, expr, idx):
        if not expr.n_constants:
            return expr
        s = self.task(idx).score(expr, RewardConfig())
        return s.expr if s.valid else expr

    def tf(self, expr):
        return expr_to_rational(expr, None, self.max_order)


def _active_sigma(y, active, fallback):
    """Reward normaliser of the selected points; constant targets use the global spread."""
    sd = float(np.std(np.asarray(y)[active]))
    return sd if sd > 1e-9 * fallback else fallback


def _losses(pred, y, sigma, kind):
    r = (pred - y) / sigma
    with np.errstate(invalid="ignore"):
        l = r * r if kind == "squared" else np.abs(r)
    return np.where(np.isfinite(l), l, np.inf)


def recover_multimode(data: Dataset, lib: TokenLibrary, cfg: RewardConfig = RewardConfig(),
                      ccfg: ContinuityConfig = ContinuityConfig(), seed=0, domain: str = "time",
                      max_order: int = 4, method: str = "euler", strict: bool = False,
                      log=None) -> ModeModel:
    """Alternating recovery of modes until every timestep is assigned.

    ``cfg.budget`` is the expression budget of each alternation; the policy
    is warm-started across the alternations of one mode. Points that no mode
    claims once the search stops (fewer than ``w`` contiguous free points
    remain, or a mode fails to reach ``w`` points) go to the mode with the
    smallest loss, so the result always partitions the timesteps. With
    ``strict`` a failing mode raises :class:`NonConvergent` instead.
    """
    T = len(data)
    y = np.asarray(data.outputs)
    if T < ccfg.w:
        raise ValueError("dataset shorter than w")
    sigma = float(np.std(y))
    if sigma == 0:
        sigma = 1.0
    if domain == "time":
        be = _TimeBackend(data, sigma)
    elif domain == "s":
        be = _SBackend(data, sigma, max_order, method)
    else:
        raise ValueError("domain must be 'time' or 's'")
    free = np.ones(T, dtype=bool)
    free[:be.start] = False
    modes: list = []
    losses_by_mode: list = []
    history = []
    rng = np.random.default_rng(seed)
    converged = True
    while free.any() and len(modes) < ccfg.max_modes:
        W = first_window(free, ccfg.w)
        if W is None:
            break
        seed_mask = np.zeros(T, dtype=bool)
        seed_mask[W] = True
        gamma = seed_mask.copy()
        state = None
        best: ScoredExpression | None = None
        loss = None
        mode_seed = int(rng.integers(2**31))
        for it in range(ccfg.max_iter):
            active = gamma & free
            if not active.any():
                break
            task = be.task(active)
            res: TrainResult = train(data, lib, cfg, mode_seed, task=task, state=state)
            state = res.state
            prev = best
            best = res.best
            if prev is not None and prev.valid:
                # the previous alternation's winner competes on the new membership
                again = _rescore(task, prev.expr, cfg)
                if again is not None and again.reward > best.reward:
                    best = again
            if not best.valid:
                break
            loss = _losses(be.predict(best.expr), y, sigma, ccfg.loss)
            new = update_membership(loss, ccfg, seed_mask) & free
            history.append({"mode": len(modes), "iter": it, "assigned": int(new.sum()),
                            "infix": to_infix(best.expr), "reward": best.reward})
            if log:
                log(history[-1])
            if np.array_equal(new, gamma):
                break
            gamma = new
        if best is None or not best.valid or loss is None:
            converged = False
            break
        gamma = adjust_indices(gamma & free, ccfg.window, ccfg.occupancy, free)
        if gamma.sum() < ccfg.w:
            converged = False
            if strict:
                raise NonConvergent(f"mode {len(modes)} captured {int(gamma.sum())} < w points",
                                    _finish(modes, losses_by_mode, free, be, data, domain, False,
                                            history))
            break
        idx = np.flatnonzero(gamma)
        expr = be.refit(best.expr, idx)
        loss = _losses(be.predict(expr), y, sigma, ccfg.loss)
        modes.append(Mode(expr, idx, be.tf(expr), best.reward))
        losses_by_mode.append(loss)
        free &= ~gamma
        _absorb(modes, losses_by_mode, free, ccfg)
    if not modes:
        raise NonConvergent("no mode could be recovered")
    return _finish(modes, losses_by_mode, free, be, data, domain, converged, history)


def _rescore(task, expr, cfg):
    try:
        s = task.score(expr, cfg, init=expr.constants if expr.n_constants else None)
    except (FloatingPointError, OverflowError, ZeroDivisionError, ValueError,
            np.linalg.LinAlgError):
        return None
    return s if s.valid else None


def _absorb(modes, losses, free, ccfg):
    """Hand free windows to a known mode that explains more than ``absorb`` of them.

    Noise leaves a few windows of an already recovered mode just under the
    occupancy bar; without this they would seed duplicate modes.
    """
    T = free.size
    for a in range(0, T, ccfg.window):
        f = free[a:a + ccfg.window]
        n = f.sum()
        if n == 0:
            continue
        shares = [(update_membership(l[a:a + ccfg.window], ccfg) & f).sum() / n for l in losses]
        k = int(np.argmax(shares))
        if shares[k] > ccfg.absorb:
            idx = a + np.flatnonzero(f)
            modes[k].indices = np.union1d(modes[k].indices, idx)
            free[idx] = False


def _finish(modes, losses, free, be, data, domain, converged, history):
    T = len(data)
    if modes:
        lab = np.full(T, -1)
        for k, m in enumerate(modes):
            lab[m.indices] = k
        rest = np.flatnonzero(lab < 0)
        if rest.size:
            L = np.vstack(losses)[:, rest]
            pick = np.argmin(L, axis=0)
            # warm-up points before the first evaluable timestep follow their successor
            head = rest < be.start
            if head.any() and (lab >= 0).any():
                first = np.flatnonzero(lab >= 0)[0]
                pick[head] = lab[first] if lab[first] >= 0 else pick[head]
            lab[rest] = pick
        for k, m in enumerate(modes):
            m.indices = np.flatnonzero(lab == k)
    return ModeModel(modes, T, domain, data.dt, data.max_delay, None, converged, history)


# --- switch logic ------------------------------------------------------------------

def boundary_points(labels) -> np.ndarray:
    """Timesteps whose mode differs from the previous timestep's."""
    lab = np.asarray(labels)
    return np.flatnonzero(lab[1:] != lab[:-1]) + 1


class ImplicitTask:
    """Score ``tau`` by how well its level set through the boundary separates two groups.

    ``f = tau - c0`` with ``c0`` the median of ``tau`` over the kept
    boundary points. Reward is the balanced sign accuracy of ``f`` against
    the labels, minus a penalty on the spread of ``tau`` at the boundary
    relative to its overall spread, minus a small complexity term.
    """

    def __init__(self, inputs, labels, boundary_idx, spread_weight=0.05, complexity_weight=1e-4):
        self.x = np.asarray(inputs, dtype=float)
        self.lab = np.asarray(labels, dtype=bool)
        self.b = np.asarray(boundary_idx)
        self.spread_weight = spread_weight
        self.complexity_weight = complexity_weight
        if self.lab.all() or not self.lab.any():
            raise ValueError("labels must contain both groups")

    def fit(self, expr: Expression):
        tau = compile_expression(expr, self.x, 0)(expr.constants)
        if not np.all(np.isfinite(tau)):
            return None
        sd = np.std(tau)
        if sd < 1e-12:
            return None
        c0 = float(np.median(tau[self.b]))
        pos = tau - c0 >= 0
        tpr = np.mean(pos[self.lab])
        tnr = np.mean(~pos[~self.lab])
        acc = 0.5 * (tpr + tnr)
        if acc < 0.5:
            acc = 1.0 - acc
            pos_is_group = False
        else:
            pos_is_group = True
        spread = float(np.std(tau[self.b]) / sd)
        return c0, acc, spread, pos_is_group

    def score(self, expr: Expression, cfg: RewardConfig) -> ScoredExpression:
        r = self.fit(expr)
        if r is None:
            return ScoredExpression.invalid(expr)
        c0, acc, spread, _ = r
        total = acc - self.spread_weight * spread - self.complexity_weight * complexity(expr)
        return ScoredExpression(expr, total, acc, spread, 0.0, np.zeros(0), self.b,
                                extra={"offset": c0})


def sharpen_labels(model: ModeModel, data: Dataset, ccfg: ContinuityConfig = ContinuityConfig()):
    """Model labels with window-adjustment slack removed.

    A timestep moves to another mode only when its own mode rejects it and
    that mode accepts it (loss against ``lambda2``), taking the best such
    mode. Continuity windows shift mode edges by a few steps; the switch
    search needs the edges where the modes actually change.
    """
    lab = model.labels
    y = np.asarray(data.outputs)
    sigma = float(np.std(y)) or 1.0
    L = np.vstack([_losses(p, y, sigma, ccfg.loss) for p in model.mode_outputs(data)])
    ok = np.vstack([update_membership(l, ccfg) for l in L])
    cols = np.arange(lab.size)
    own = np.where(lab >= 0, lab, 0)
    move = (lab >= 0) & ~ok[own, cols] & ok.any(axis=0)
    best = np.argmin(np.where(ok, L, np.inf), axis=0)
    return np.where(move, best, lab)


def detect_switch_logic(data: Dataset, model: ModeModel, keep: float = 0.4, seed=0,
                        lib: TokenLibrary | None = None,
                        cfg: RewardConfig = RewardConfig(batch_size=200, budget=4000),
                        support_fraction: float = 0.5, labels=None) -> SwitchLogic:
    """Find a predicate whose sign separates mode 0 from the other modes.

    Boundary points are filtered to the ``keep`` fraction nearest the robust
    (minimum covariance determinant) centre before the predicate search.
    ``labels`` defaults to :func:`sharpen_labels` of the model.
    """
    if model.K < 2 and labels is None:
        raise InsufficientBoundaryPoints("a single-mode model has no boundary")
    lab = sharpen_labels(model, data) if labels is None else np.asarray(labels)
    X = np.asarray(data.inputs, dtype=float)
    b = boundary_points(lab)
    n_keep = int(np.floor(keep * b.size))
    if n_keep < 10:
        raise InsufficientBoundaryPoints(f"only {n_keep} boundary points kept")
    mcd = MinCovDet(support_fraction=support_fraction, random_state=seed).fit(X[b])
    d = mcd.mahalanobis(X[b])
    kept = b[np.argsort(d, kind="stable")[:n_keep]]
    if lib is None:
        lib = TokenLibrary.time_domain(X.shape[1], 0, binary=("+", "-", "*"), unary=(), const=False,
                                       max_length=9)
    group = lab == 0
    task = ImplicitTask(X, group, kept)
    res = train(Dataset(X, np.zeros(len(X))), lib, cfg, seed, task=task)
    if not res.best.valid:
        raise InsufficientBoundaryPoints("no separating predicate found")
    c0, acc, _, pos_is_group = task.fit(res.best.expr)
    tau = compile_expression(res.best.expr, X, 0)(res.best.expr.constants)
    c0, acc = _best_cut(tau, group if pos_is_group else ~group, c0)
    other = 1 if model.K >= 2 else 0
    sw = SwitchLogic(res.best.expr, c0, 0 if pos_is_group else other, other if pos_is_group else 0,
                     acc)
    sw.threshold = _positive_root(sw, X)
    return sw


def _best_cut(tau, upper, c0):
    """Offset maximising balanced accuracy of ``tau >= c`` against ``upper``.

    The boundary median ``c0`` only seeds the scan; ties keep the cut nearest it.
    """
    order = np.argsort(tau, kind="stable")
    t = tau[order]
    u = upper[order]
    n_up, n_lo = u.sum(), (~u).sum()
    if n_up == 0 or n_lo == 0:
        return c0, 0.5
    # cutting below position i puts t[i:] on the upper side
    lo_below = np.concatenate([[0], np.cumsum(~u)])
    up_above = n_up - np.concatenate([[0], np.cumsum(u)])
    acc = 0.5 * (up_above / n_up + lo_below / n_lo)
    edges = np.concatenate([[t[0] - 1.0], 0.5 * (t[:-1] + t[1:]), [t[-1] + 1.0]])
    valid = np.concatenate([[True], t[1:] > t[:-1], [True]])
    acc = np.where(valid, acc, -np.inf)
    best = np.flatnonzero(acc >= acc.max() - 1e-12)
    i = best[np.argmin(np.abs(edges[best] - c0))]
    return float(edges[i]), float(acc[i])


def _positive_root(sw: SwitchLogic, X) -> float | None:
    """Root of ``f`` along the first used variable (others at their median), if one exists."""
    used = sorted(int(v[1:]) - 1 for v in variables_of(sw.expr) if v != "s")
    if not used:
        return None
    i = used[0]
    base = np.median(X, axis=0)
    lo, hi = 0.0, float(np.max(np.abs(X[:, i]))) * 2 + 1e-9

    def g(v):
        x = base.copy()[None, :]
        x[0, i] = v
        return float(sw.evaluate(x)[0])

    grid = np.linspace(lo, hi, 2001)
    vals = np.array([g(v) for v in grid])
    s = np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)
    if s.size == 0:
        return None
    return float(brentq(g, grid[s[0]], grid[s[0] + 1]))
