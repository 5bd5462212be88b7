"""Rule-based anomaly scoring, smoothing, thresholding, attribution and metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .expr import (Dataset, Expression, compile_expression, expression_from_json,
                   expression_to_json, to_infix, variables_of)
from .multimode import ModeModel
from .sdomain import TransferFunction, simulate_tf

__all__ = [
    "Rule", "ChannelMismatch", "AnomalyReport", "Metrics", "score", "ewma",
    "nonparametric_threshold", "smooth_and_threshold", "segments", "detect", "explain",
    "precision_recall_f1", "point_adjust", "best_f1", "best_f1_point_adjusted", "bfr",
    "false_positive_rate", "evaluate", "rules_from_model", "range_rule", "save_rules",
    "load_rules", "Z_GRID",
]

Z_GRID = tuple(np.arange(2.0, 10.01, 0.5))


class ChannelMismatch(ValueError):
    pass


@dataclass
class Rule:
    """One checkable relation.

    ``kind`` is ``equation`` or ``step-equation`` (``expr`` predicts the
    output), ``tf`` (``tf`` driven by input channel 0), ``multimode``
    (``model`` with its switch logic, or the best mode without one),
    ``mode`` (``expr`` checked only where ``model``'s switch selects mode
    ``mode``), ``switch`` (the output matches
    another mode better than the selected one) or ``range`` (``channel``
    must stay within ``[lower, upper]``; channel -1 is the output).
    """

    id: str
    kind: str
    expr: Expression | None = None
    tf: TransferFunction | None = None
    model: ModeModel | None = None
    mode: int | None = None
    channel: int = -1
    lower: float = -np.inf
    upper: float = np.inf
    tol: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("equation", "step-equation", "tf", "multimode", "mode", "switch",
                             "range"):
            raise ValueError(f"unknown rule kind {self.kind!r}")
        if self.kind == "range" and not self.lower < self.upper:
            raise ValueError("range rules need lower < upper")

    @property
    def infix(self) -> str:
        if self.kind == "range":
            return f"{self.lower:.6g} <= {_name(self.channel)} <= {self.upper:.6g}"
        if self.kind == "tf":
            return f"y = ({self.tf.latex()}) u"
        if self.kind in ("multimode", "switch"):
            sw = self.model.switch
            if self.kind == "switch":
                return f"mode = {sw.pos_mode} if {sw.infix} >= 0 else {sw.neg_mode}"
            parts = [f"mode {k}: y = {m.infix}" for k, m in enumerate(self.model.modes)]
            return "; ".join(parts)
        if self.kind == "mode":
            return f"in mode {self.mode}: y = {to_infix(self.expr)}"
        if self.kind == "step-equation":
            return f"y = {to_infix(self.expr)}"
        return f"y = {to_infix(self.expr)}"

    def variables(self, names=None) -> list:
        """Signals the rule ties together (candidate compromised variables)."""
        def nm(v):
            if names is None:
                return v
            i = int(v[1:]) - 1
            return names[i] if i < len(names) else v
        if self.kind == "range":
            return [_name(self.channel, names)]
        if self.kind == "tf":
            return ["y", nm("x1")]
        if self.kind == "switch":
            return [nm(v) for v in variables_of(self.model.switch.expr)]
        out = ["y"]
        exprs = [self.expr] if self.expr is not None else []
        if self.kind == "multimode":
            exprs = [m.expr for m in self.model.modes] + ([self.model.switch.expr]
                                                         if self.model.switch else [])
        if self.model is not None and self.model.domain == "s":
            return ["y", nm("x1")]
        for e in exprs:
            for v in variables_of(e):
                if nm(v) not in out:
                    out.append(nm(v))
        return out

    def to_json(self) -> dict:
        d = {"id": self.id, "kind": self.kind, "infix": self.infix,
             "bounds": [self.lower, self.upper] if self.kind == "range" else None,
             "channel": self.channel, "tol": self.tol}
        if self.expr is not None:
            d["expr"] = expression_to_json(self.expr)
        if self.tf is not None:
            d["tf"] = self.tf.to_json()
        if self.model is not None:
            d["model"] = self.model.to_json()
        if self.mode is not None:
            d["mode"] = self.mode
        return d

    @classmethod
    def from_json(cls, d) -> "Rule":
        b = d.get("bounds") or [-np.inf, np.inf]
        return cls(d["id"], d["kind"],
                   expression_from_json(d["expr"]) if "expr" in d else None,
                   TransferFunction.from_json(d["tf"]) if "tf" in d else None,
                   ModeModel.from_json(d["model"]) if "model" in d else None,
                   d.get("mode"), d.get("channel", -1), b[0], b[1], d.get("tol", 1e-6))


def _name(channel, names=None):
    if channel < 0:
        return "y"
    if names is not None and channel < len(names):
        return names[channel]
    return f"x{channel + 1}"


def range_rule(id: str, data: Dataset, channel: int, margin: float = 0.0) -> Rule:
    """Range rule from the observed span of a channel on (clean) training data."""
    v = data.outputs if channel < 0 else data.inputs[:, channel]
    lo, hi = float(np.min(v)), float(np.max(v))
    pad = margin * (hi - lo)
    return Rule(id, "range", channel=channel, lower=lo - pad, upper=hi + pad)


def rules_from_model(model: ModeModel, prefix: str = "rule") -> list:
    """Per-mode rules plus the switch rule, numbered from 1."""
    rules = [Rule(f"{prefix}{k + 1}", "mode", expr=m.expr, model=model, mode=k)
             for k, m in enumerate(model.modes)]
    if model.switch is not None:
        rules.append(Rule(f"{prefix}{model.K + 1}", "switch", model=model))
    return rules


def save_rules(rules, path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_json() for r in rules], fh, indent=2)


def load_rules(path) -> list:
    with open(path) as fh:
        return [Rule.from_json(d) for d in json.load(fh)]


# --- scoring ------------------------------------------------------------------

def _check_channels(rule: Rule, data: Dataset):
    need = 0
    if rule.kind == "range":
        need = rule.channel + 1
    exprs = [rule.expr] if rule.expr is not None else []
    if rule.model is not None and rule.model.domain == "time":
        exprs += [m.expr for m in rule.model.modes]
        if rule.model.switch is not None:
            exprs.append(rule.model.switch.expr)
    for e in exprs:
        for t in e.tokens:
            if t.kind == "var":
                need = max(need, t.index + 1)
    if rule.kind == "tf" or (rule.model is not None and rule.model.domain == "s"):
        need = max(need, 1)
    if need > data.n_inputs:
        raise ChannelMismatch(f"rule {rule.id} needs {need} input channels, data has "
                              f"{data.n_inputs}")


def _predict_expr(expr: Expression, data: Dataset) -> np.ndarray:
    start = expr.max_delay
    out = np.full(len(data), np.nan)
    out[start:] = compile_expression(expr, data.inputs, start)(expr.constants)
    return out


def _finite_scores(e, valid):
    e = np.where(valid, e, 0.0)
    bad = ~np.isfinite(e)
    if bad.any():
        fin = e[~bad]
        e = np.where(bad, fin.max() if fin.size else 1.0, e)
    return e


def score(rule: Rule, data: Dataset) -> np.ndarray:
    """Raw per-timestep anomaly score of one rule."""
    _check_channels(rule, data)
    y = np.asarray(data.outputs)
    T = len(data)
    valid = np.ones(T, dtype=bool)
    if rule.kind == "range":
        v = y if rule.channel < 0 else data.inputs[:, rule.channel]
        return ((v < rule.lower) | (v > rule.upper)).astype(float)
    if rule.kind in ("equation", "step-equation"):
        valid[:rule.expr.max_delay] = False
        return _finite_scores(np.abs(y - _predict_expr(rule.expr, data)), valid)
    if rule.kind == "tf":
        return _finite_scores(np.abs(y - simulate_tf(rule.tf, data.inputs[:, 0], data.dt)), valid)
    m = rule.model
    outs = m.mode_outputs(data)
    valid[:m.max_delay] = False
    if m.switch is None:
        if rule.kind != "multimode":
            raise ValueError(f"rule {rule.id}: model has no switch logic")
        # without a switch predicate the best-fitting mode is taken at each step
        with np.errstate(invalid="ignore"):
            err = np.abs(outs - y[None, :])
        err = np.where(np.isfinite(err), err, np.inf)
        return _finite_scores(err.min(axis=0), valid)
    sel = m.switch.predict(data.inputs)
    pred = outs[sel, np.arange(T)]
    if rule.kind == "multimode":
        return _finite_scores(np.abs(y - pred), valid)
    if rule.kind == "mode":
        e = np.abs(y - outs[rule.mode])
        return _finite_scores(np.where(sel == rule.mode, e, 0.0), valid)
    # switch: output fits another mode while the selected mode misses
    with np.errstate(invalid="ignore"):
        err = np.abs(outs - y[None, :])
    err = np.where(np.isfinite(err), err, np.inf)
    best = np.argmin(err, axis=0)
    hit = (best != sel) & (err[best, np.arange(T)] <= rule.tol) & \
          (err[sel, np.arange(T)] > rule.tol)
    return np.where(valid, hit.astype(float), 0.0)


def ewma(scores, a: float = 0.1) -> np.ndarray:
    """``s_t = a e_t + (1 - a) s_{t-1}`` started at ``s_{-1} = e_0``."""
    e = np.asarray(scores, dtype=float)
    if not 0 < a <= 1:
        raise ValueError("smoothing factor must lie in (0, 1]")
    if e.size == 0:
        return e.copy()
    s, _ = lfilter([a], [1.0, -(1.0 - a)], e, zi=[(1.0 - a) * e[0]])
    return s


def segments(mask) -> list:
    """Maximal runs of True as ``(start, end)`` with ``end`` exclusive."""
    m = np.asarray(mask, dtype=bool).astype(int)
    d = np.diff(np.concatenate([[0], m, [0]]))
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


def nonparametric_threshold(s, z_grid=Z_GRID) -> float:
    """Label-free threshold ``mean + z std`` with ``z`` chosen on a grid.

    For each candidate, the points above it are removed and the relative
    drops in mean and standard deviation are divided by (number of points
    above + squared number of runs above); the best-scoring ``z`` wins. If no
    candidate flags anything the largest ``z`` is used.
    """
    s = np.asarray(s, dtype=float)
    mu, sd = float(np.mean(s)), float(np.std(s))
    if sd == 0:
        return mu
    best, best_z = -np.inf, z_grid[-1]
    for z in z_grid:
        eps = mu + z * sd
        above = s > eps
        n = int(above.sum())
        if n == 0 or n == s.size:
            continue
        rest = s[~above]
        d_mu = (mu - rest.mean()) / mu if mu != 0 else 0.0
        d_sd = (sd - rest.std()) / sd
        val = (d_mu + d_sd) / (n + len(segments(above)) ** 2)
        if val > best:
            best, best_z = val, z
    return mu + best_z * sd


def smooth_and_threshold(scores, a: float = 0.1, z_grid=Z_GRID):
    s = ewma(scores, a)
    return s, nonparametric_threshold(s, z_grid)


@dataclass
class AnomalyReport:
    raw: dict                 # rule id -> raw scores
    smoothed: dict            # rule id -> smoothed scores
    thresholds: dict          # rule id -> threshold
    alarms: np.ndarray        # any rule above its threshold
    segments: list            # (start, end, rule id), per rule
    counts: dict              # rule id -> alarmed timesteps
    names: tuple = ()
    extra: dict = field(default_factory=dict)

    @property
    def threshold(self) -> float:
        return next(iter(self.thresholds.values())) if len(self.thresholds) == 1 else float("nan")

    def to_json(self) -> dict:
        return {"thresholds": self.thresholds,
                "segments": [[a, b, r] for a, b, r in self.segments],
                "counts": self.counts, "n_alarms": int(self.alarms.sum()),
                "n_timesteps": int(self.alarms.size), "extra": self.extra}


def detect(rules, data: Dataset, a: float = 0.1, thresholds=None, min_segment: int = 0,
           z_grid=Z_GRID) -> AnomalyReport:
    """Score every rule, smooth, threshold and collect alarm runs.

    ``thresholds`` (rule id -> value) overrides the label-free choice, e.g.
    with thresholds fixed on clean training data. Smoothed scores at or
    below a rule's ``tol`` never alarm. Runs shorter than ``min_segment`` are
    dropped when it is positive.
    """
    raw, sm, th, segs, counts = {}, {}, {}, [], {}
    alarms = np.zeros(len(data), dtype=bool)
    for r in rules:
        e = score(r, data)
        s = ewma(e, a)
        t = thresholds[r.id] if thresholds and r.id in thresholds else nonparametric_threshold(s, z_grid)
        # scores within the rule tolerance are numerical noise, never alarms
        above = s > max(t, r.tol)
        runs = [(i, j) for i, j in segments(above) if j - i >= min_segment]
        if min_segment > 0:
            above = np.zeros_like(above)
            for i, j in runs:
                above[i:j] = True
        raw[r.id], sm[r.id], th[r.id] = e, s, float(t)
        segs.extend((i, j, r.id) for i, j in runs)
        counts[r.id] = int(above.sum())
        alarms |= above
    segs.sort()
    return AnomalyReport(raw, sm, th, alarms, segs, counts, tuple(data.names))


def explain(report: AnomalyReport, rules) -> list:
    """One record per alarm run: the violated rule, its formula and its variables."""
    by_id = {r.id: r for r in rules}
    out = []
    for a, b, rid in report.segments:
        r = by_id.get(rid)
        if r is None:
            continue
        out.append({"start": a, "end": b, "rule": rid, "infix": r.infix,
                    "variables": r.variables(report.names or None)})
    return out


# --- metrics --------------------------------------------------------------------

@dataclass
class Metrics:
    f1: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")
    f1_pa: float = float("nan")
    precision_pa: float = float("nan")
    recall_pa: float = float("nan")
    bfr: float = float("nan")
    index_accuracy: float = float("nan")
    fpr: float = float("nan")
    threshold: float = float("nan")
    threshold_pa: float = float("nan")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return float(p), float(r), float(f)


def precision_recall_f1(pred, labels):
    pred = np.asarray(pred, dtype=bool)
    lab = np.asarray(labels, dtype=bool)
    tp = int(np.sum(pred & lab))
    return _prf(tp, int(np.sum(pred & ~lab)), int(np.sum(~pred & lab)))


def point_adjust(pred, labels) -> np.ndarray:
    """Credit a whole true segment once any alarm falls inside it."""
    pred = np.asarray(pred, dtype=bool).copy()
    lab = np.asarray(labels, dtype=bool)
    for a, b in segments(lab):
        if pred[a:b].any():
            pred[a:b] = True
    return pred


def false_positive_rate(pred, labels) -> float:
    pred = np.asarray(pred, dtype=bool)
    lab = np.asarray(labels, dtype=bool)
    n = int(np.sum(~lab))
    return float(np.sum(pred & ~lab) / n) if n else 0.0


def best_f1(scores, labels):
    """Highest F1 over every threshold, alarms being ``scores >= threshold``.

    Returns ``(f1, precision, recall, threshold)``.
    """
    s = np.asarray(scores, dtype=float)
    lab = np.asarray(labels, dtype=bool)
    P = int(lab.sum())
    if s.size == 0 or P == 0:
        return 0.0, 0.0, 0.0, float("inf")
    order = np.argsort(-s, kind="stable")
    ss, ll = s[order], lab[order]
    tp = np.cumsum(ll)
    fp = np.cumsum(~ll)
    last = np.flatnonzero(np.r_[ss[1:] != ss[:-1], True])  # last index of each tie group
    tp, fp, th = tp[last], fp[last], ss[last]
    prec = tp / (tp + fp)
    rec = tp / P
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    i = int(np.argmax(f1))
    return float(f1[i]), float(prec[i]), float(rec[i]), float(th[i])


def best_f1_point_adjusted(scores, labels):
    """Highest point-adjusted F1 over every threshold; same return layout as :func:`best_f1`."""
    s = np.asarray(scores, dtype=float)
    lab = np.asarray(labels, dtype=bool)
    P = int(lab.sum())
    if s.size == 0 or P == 0:
        return 0.0, 0.0, 0.0, float("inf")
    segs = segments(lab)
    seg_max = np.array([s[a:b].max() for a, b in segs])
    seg_len = np.array([b - a for a, b in segs])
    neg = np.sort(s[~lab])[::-1]
    cands = np.unique(np.concatenate([seg_max, neg[: min(neg.size, 200000)]]))[::-1]
    # true positives: whole segments whose max reaches the threshold
    o = np.argsort(-seg_max)
    sm_sorted, len_cum = seg_max[o], np.cumsum(seg_len[o])
    k = np.searchsorted(-sm_sorted, -cands, side="right")
    tp = np.where(k > 0, len_cum[np.maximum(k - 1, 0)], 0)
    fp = np.searchsorted(-neg, -cands, side="right")
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        rec = tp / P
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    i = int(np.argmax(f1))
    return float(f1[i]), float(prec[i]), float(rec[i]), float(cands[i])


def bfr(y, yhat) -> float:
    """``max(0, 1 - ||y - yhat|| / ||y - mean(y)||)``."""
    y = np.asarray(y, dtype=float)
    yh = np.asarray(yhat, dtype=float)
    num = np.linalg.norm(y - yh)
    den = np.linalg.norm(y - y.mean())
    if den == 0:
        return 1.0 if num == 0 else 0.0
    if not np.isfinite(num):
        return 0.0
    return float(max(0.0, 1.0 - num / den))


def evaluate(scores, labels, pred=None) -> Metrics:
    """Best-threshold and point-adjusted metrics of a score series.

    ``pred`` (alarms from a label-free threshold) adds its false-positive
    rate; the best-threshold numbers always come from the full scan.
    """
    f1, p, r, th = best_f1(scores, labels)
    f1a, pa, ra, tha = best_f1_point_adjusted(scores, labels)
    m = Metrics(f1, p, r, f1a, pa, ra, threshold=th, threshold_pa=tha)
    if pred is not None:
        m.fpr = false_positive_rate(pred, labels)
    return m
