"""Command-line front end: simulate | recover | detect | eval | gradcheck.

Each invocation writes one run directory (``--out``) holding a config
snapshot, its outputs and a plain-text log. JSON floats are rendered with 9
significant digits so that equal configs and seeds give identical files.
Errors are reported as JSON on stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .detect import (Rule, best_f1, best_f1_point_adjusted, bfr, detect, evaluate, explain,
                     false_positive_rate, load_rules, range_rule, rules_from_model, save_rules)
from .engine import RewardConfig, train
from .expr import Dataset, TokenLibrary, affine_form, evaluate_series, expression_to_json, to_infix
from .multimode import ContinuityConfig, detect_switch_logic, index_accuracy, recover_multimode
from .plants import (AVR_BLOCKS, AVR_PID, HYBRID_KINDS, LFC_BLOCKS, LFC_PID, PD_TF, PID_TF,
                     AttackSpec, block_dataset, gen_actuator, gen_ewma, gen_hybrid,
                     gen_switched_linear, simulate_lfc)
from .policy import Policy, policy_gradient_check
from .sdomain import SDomainTask, TransferFunction, recover_tf, simulate_tf

__all__ = ["main", "SpecInvalid", "SchemaMismatch", "dumps", "read_csv", "write_csv"]


class SpecInvalid(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class SchemaMismatch(ValueError):
    pass


class OutputExists(FileExistsError):
    pass


# --- serialisation -------------------------------------------------------------

def _round(x):
    if isinstance(x, dict):
        return {str(k): _round(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v) for v in x]
    if isinstance(x, np.ndarray):
        return _round(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return float(f"{x:.9g}") if math.isfinite(x) else x
    return x


def dumps(obj) -> str:
    return json.dumps(_round(obj), indent=2, sort_keys=True) + "\n"


def _fmt(v) -> str:
    return f"{float(v):.9g}"


def write_csv(path, t, inputs, y, names, label=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *names, "y"] + (["label"] if label is not None else []))
        X = np.asarray(inputs)
        for i in range(len(y)):
            row = [_fmt(t[i]), *(_fmt(v) for v in X[i]), _fmt(y[i])]
            if label is not None:
                row.append(str(int(label[i])))
            w.writerow(row)


def read_csv(path, max_delay: int = 0, inputs=None):
    """Load ``t, <inputs...>, y[, label]``; returns ``(Dataset, labels or None)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [list(map(float, row)) for row in r if row]
    if not rows:
        raise SchemaMismatch(f"{path}: no data rows")
    arr = np.array(rows)
    cols = {h: i for i, h in enumerate(header)}
    for need in ("t", "y"):
        if need not in cols:
            raise SchemaMismatch(f"{path}: missing column {need!r}")
    names = [h for h in header if h not in ("t", "y", "label")]
    if inputs is not None:
        missing = [n for n in inputs if n not in cols]
        if missing:
            raise SchemaMismatch(f"{path}: missing input columns {missing}")
        names = list(inputs)
    if not names:
        raise SchemaMismatch(f"{path}: no input columns")
    t = arr[:, cols["t"]]
    dt = float(t[1] - t[0]) if len(t) > 1 and t[1] > t[0] else 1.0
    X = arr[:, [cols[n] for n in names]]
    data = Dataset(X, arr[:, cols["y"]], dt=dt, max_delay=max_delay, names=tuple(names))
    lab = arr[:, cols["label"]].astype(bool) if "label" in cols else None
    return data, lab


# --- run directory ----------------------------------------------------------------

class Run:
    def __init__(self, out, force: bool, config: dict, command: str):
        self.dir = Path(out)
        if self.dir.exists() and any(self.dir.iterdir()) and not force:
            raise OutputExists(f"{self.dir} exists and is not empty (use --force)")
        self.dir.mkdir(parents=True, exist_ok=True)
        self.write_json("config.json", {"command": command, "version": __version__, **config})
        self._log = open(self.dir / "log.txt", "w")
        self.t0 = time.time()

    def path(self, name) -> Path:
        return self.dir / name

    def write_json(self, name, obj) -> None:
        self.path(name).write_text(dumps(obj))

    def log(self, msg) -> None:
        self._log.write(f"[{time.time() - self.t0:9.2f}s] {msg}\n")
        self._log.flush()

    def close(self):
        self.log("done")
        self._log.close()


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such config: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise SpecInvalid("<config>", f"not valid JSON ({e})") from None


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("SRLR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise SpecInvalid("SRLR_THREADS", f"not an integer: {env!r}") from None
    return 1


def _get(cfg, key, default, kind, path):
    v = cfg.get(key, default)
    try:
        return kind(v) if v is not None else None
    except (TypeError, ValueError):
        raise SpecInvalid(f"{path}{key}", f"expected {kind.__name__}, got {v!r}") from None


def _reward_config(cfg: dict, threads: int, path: str = "reward.") -> RewardConfig:
    known = set(RewardConfig.__dataclass_fields__)
    bad = set(cfg) - known
    if bad:
        raise SpecInvalid(f"{path}{sorted(bad)[0]}", "unknown field")
    try:
        return RewardConfig.from_dict({**cfg, "threads": threads})
    except (TypeError, ValueError) as e:
        raise SpecInvalid(path.rstrip("."), str(e)) from None


def _continuity(cfg: dict) -> ContinuityConfig:
    bad = set(cfg) - set(ContinuityConfig.__dataclass_fields__)
    if bad:
        raise SpecInvalid(f"continuity.{sorted(bad)[0]}", "unknown field")
    try:
        return ContinuityConfig(**cfg)
    except (TypeError, ValueError) as e:
        raise SpecInvalid("continuity", str(e)) from None


def _library(cfg: dict, n_inputs: int, mode: str) -> TokenLibrary:
    if mode == "sdomain":
        return TokenLibrary.s_domain(_get(cfg, "max_length", 64, int, "library."),
                                     _get(cfg, "max_constants", 5, int, "library."))
    try:
        return TokenLibrary.time_domain(
            n_inputs, _get(cfg, "max_delay", 0, int, "library."),
            binary=tuple(cfg.get("binary", ("+", "-", "*", "/"))),
            unary=tuple(cfg.get("unary", ())), step=bool(cfg.get("step", False)),
            const=bool(cfg.get("const", True)),
            max_length=_get(cfg, "max_length", 30, int, "library."),
            max_constants=_get(cfg, "max_constants", 5, int, "library."))
    except (KeyError, ValueError) as e:
        raise SpecInvalid("library", str(e)) from None


# --- simulate ------------------------------------------------------------------------

def _attack(cfg) -> AttackSpec | None:
    if not cfg:
        return None
    bad = set(cfg) - set(AttackSpec.__dataclass_fields__)
    if bad:
        raise SpecInvalid(f"attack.{sorted(bad)[0]}", "unknown field")
    if "kind" not in cfg:
        raise SpecInvalid("attack.kind", "missing")
    try:
        return AttackSpec(**cfg)
    except (TypeError, ValueError) as e:
        raise SpecInvalid("attack", str(e)) from None


def simulate_spec(spec: dict, seed: int):
    """Build ``(t, inputs, y, names, labels, truth)`` from a plant spec."""
    if "kind" not in spec:
        raise SpecInvalid("kind", "missing")
    kind = spec["kind"]
    p = spec.get("params", {})
    if kind == "ewma":
        data, mask, _ = gen_ewma(_get(p, "T", 500, int, "params."), _get(p, "alpha", 0.8, float, "params."),
                                 _get(p, "contamination", 0.0, float, "params."), seed)
        truth = {"coefficients": [0.8, 0.16, 0.032], "outliers": np.flatnonzero(mask).tolist()}
        return np.arange(len(data)), data.inputs, data.outputs, ["x1"], None, truth
    if kind in HYBRID_KINDS:
        h = gen_hybrid(kind, _get(p, "noise", 0.0, float, "params."), seed)
        truth = {"modes": list(h.truth), "labels": h.labels.tolist(),
                 "clean_y": h.test.outputs.tolist()}
        return (np.arange(len(h.train)), h.train.inputs, h.train.outputs,
                list(h.train.names), None, truth)
    if kind == "switched-linear":
        data, lab, _ = gen_switched_linear(_get(p, "snr_db", 40.0, float, "params."), seed)
        return (np.arange(len(data)), data.inputs, data.outputs, ["x1", "x2"], None,
                {"labels": lab.tolist(), "note": "x2 is y(t-1)"})
    if kind in ("lfc", "avr"):
        block = p.get("block")
        blocks = dict(LFC_BLOCKS, pid=LFC_PID) if kind == "lfc" else dict(AVR_BLOCKS, pid=AVR_PID)
        if block is not None:
            if block not in blocks:
                raise SpecInvalid("params.block", f"unknown block {block!r}")
            dt = _get(p, "dt", 1e-3, float, "params.")
            d = block_dataset(blocks[block], _get(p, "duration", 10.0, float, "params."), dt, seed)
            return (np.arange(len(d)) * dt, d.inputs, d.outputs, ["x1"], None,
                    {"tf": blocks[block].to_json()})
        if kind == "avr":
            raise SpecInvalid("params.block", "avr simulation needs a block")
        dt = _get(p, "dt", 0.01, float, "params.")
        run = simulate_lfc(_get(p, "duration", 180.0, float, "params."), dt,
                           _attack(spec.get("attack")), seed,
                           error_gain=_get(p, "error_gain", 15.0, float, "params."),
                           threshold=_get(p, "threshold", 0.1, float, "params."))
        truth = {"pd": PD_TF.to_json(), "pid": PID_TF.to_json(), "switch_threshold": 0.1,
                 "mode": run.mode.tolist()}
        lab = run.labels if spec.get("attack") else None
        return np.arange(len(run.data)) * dt, run.data.inputs, run.data.outputs, ["x1"], lab, truth
    if kind == "actuator":
        data, lab = gen_actuator(_get(p, "T", 3000, int, "params."), seed, p.get("attack"))
        return (np.arange(len(data)), data.inputs, data.outputs, ["x1", "x2", "x3"],
                lab if p.get("attack") else None, {"rule": "step(x1 - 2*x2)"})
    raise SpecInvalid("kind", f"unknown plant kind {kind!r}")


def cmd_simulate(args) -> dict:
    spec = _load_config(args.config)
    run = Run(args.out, args.force, {"spec": spec, "seed": args.seed}, "simulate")
    t, X, y, names, lab, truth = simulate_spec(spec, args.seed)
    write_csv(run.path("data.csv"), t, X, y, names, lab)
    run.write_json("truth.json", {"spec": spec, "seed": args.seed, "truth": truth})
    summary = {"rows": int(len(y)), "channels": len(names) + 1,
               "attack_fraction": float(np.mean(lab)) if lab is not None else 0.0}
    run.write_json("summary.json", summary)
    run.log(f"simulated {spec.get('kind')} rows={len(y)}")
    run.close()
    return summary


# --- recover ----------------------------------------------------------------------------

def _split(T: int, holdout: float):
    n = int(round(T * (1 - holdout)))
    return max(n, 1)


def cmd_recover(args) -> dict:
    cfg = _load_config(args.config)
    mode = cfg.get("mode", "time")
    if mode not in ("time", "sdomain", "multimode"):
        raise SpecInvalid("mode", f"expected time, sdomain or multimode, got {mode!r}")
    lcfg = cfg.get("library", {})
    max_delay = _get(lcfg, "max_delay", 0, int, "library.")
    data, _ = read_csv(args.data, max_delay, cfg.get("inputs"))
    threads = _threads(args)
    rc = _reward_config(cfg.get("reward", {}), threads)
    run = Run(args.out, args.force, {"recover": cfg, "seed": args.seed, "data": str(args.data)},
              "recover")
    holdout = _get(cfg, "holdout", 0.2, float, "")
    t0 = time.time()
    rules = []
    report = {"mode": mode}
    if mode == "time":
        lib = _library(lcfg, data.n_inputs, mode)
        n = _split(len(data), holdout)
        train_data = Dataset(data.inputs[:n], data.outputs[:n], data.dt, max_delay, data.names)
        res = train(train_data, lib, rc, args.seed)
        res.write_log(run.path("train_log.csv"))
        e = res.best.expr
        pred = evaluate_series(e, data)
        kind = "step-equation" if any(t.name == "step" for t in e.tokens) else "equation"
        rules.append(Rule("rule1", kind, expr=e))
        held = slice(max(n, max_delay) - max_delay, None)
        report.update(expression=expression_to_json(e), reward=res.best.reward,
                      nrmse=res.best.nrmse, n_sampled=res.n_sampled,
                      budget_exhausted=res.budget_exhausted,
                      bfr_holdout=bfr(data.outputs[max(n, max_delay):], pred[held]) if n < len(data)
                      else None,
                      bfr_train=bfr(data.outputs[max_delay:n], pred[:n - max_delay]))
    elif mode == "sdomain":
        lib = _library(lcfg, 1, mode)
        n = _split(len(data), holdout)
        max_order = _get(cfg, "max_order", 4, int, "")
        tr = Dataset(data.inputs[:n, :1], data.outputs[:n], data.dt)
        tf, e, res = recover_tf(tr, rc, args.seed, lib, cfg.get("method", "euler"), max_order)
        res.write_log(run.path("train_log.csv"))
        pred = simulate_tf(tf, data.inputs[:, 0], data.dt)
        rules.append(Rule("rule1", "tf", tf=tf))
        report.update(tf=tf.to_json(), order=list(tf.order), latex=tf.latex(),
                      expression=expression_to_json(e), reward=res.best.reward,
                      n_sampled=res.n_sampled, budget_exhausted=res.budget_exhausted,
                      bfr_holdout=bfr(data.outputs[n:], pred[n:]) if n < len(data) else None,
                      bfr_train=bfr(data.outputs[:n], pred[:n]))
    else:
        domain = cfg.get("domain", "time")
        lib = _library(lcfg, data.n_inputs, "sdomain" if domain == "s" else "time")
        cc = _continuity(cfg.get("continuity", {}))
        model = recover_multimode(data, lib, rc, cc, args.seed, domain,
                                  _get(cfg, "max_order", 4, int, ""), log=run.log)
        if cfg.get("switch_logic", False) and model.K >= 2:
            sw_cfg = _reward_config(cfg.get("switch_reward", {"batch_size": 200, "budget": 4000}),
                                    threads, "switch_reward.")
            model.switch = detect_switch_logic(data, model, cfg.get("keep", 0.4), args.seed,
                                               cfg=sw_cfg)
        outs = model.mode_outputs(data)
        lab = model.labels
        per_mode = []
        for k, m in enumerate(model.modes):
            i = m.indices[m.indices >= data.max_delay]
            per_mode.append({"infix": m.infix, "n_points": int(m.indices.size),
                             "bfr": bfr(data.outputs[i], outs[k, i])})
        report.update(K=model.K, modes=per_mode, converged=model.converged,
                      switch_logic=model.switch.to_json() if model.switch else None)
        if cfg.get("labels_from"):
            truth = json.loads(Path(cfg["labels_from"]).read_text())["truth"]["labels"]
            report["index_accuracy"] = index_accuracy(truth, lab)
        rules.append(Rule("model", "multimode", model=model))
        if model.switch is not None:
            rules.extend(rules_from_model(model))
        run.write_json("model.json", model.to_json())
    for i, ch in enumerate(cfg.get("range_channels", [])):
        rules.append(range_rule(f"range{i + 1}", data, int(ch), cfg.get("range_margin", 0.0)))
    run.log(f"recovered in {time.time() - t0:.1f}s")
    save_rules(rules, run.path("rules.json"))
    run.path("rules.json").write_text(dumps(json.loads(run.path("rules.json").read_text())))
    run.write_json("report.json", report)
    run.close()
    return report


# --- detect ------------------------------------------------------------------------------

def cmd_detect(args) -> dict:
    cfg = _load_config(args.config)
    if args.rules is None:
        raise SpecInvalid("--rules", "missing")
    if not Path(args.rules).exists():
        raise FileNotFoundError(f"no such rules file: {args.rules}")
    rules = load_rules(args.rules)
    only = cfg.get("rules")
    if only:
        rules = [r for r in rules if r.id in only]
    max_delay = max([r.model.max_delay for r in rules if r.model is not None] +
                    [r.expr.max_delay for r in rules if r.expr is not None] + [0])
    data, labels = read_csv(args.data, max_delay, cfg.get("inputs"))
    run = Run(args.out, args.force, {"detect": cfg, "seed": args.seed, "data": str(args.data),
                                     "rules": str(args.rules)}, "detect")
    a = _get(cfg, "smoothing", 0.1, float, "")
    rep = detect(rules, data, a, cfg.get("thresholds"), _get(cfg, "min_segment", 0, int, ""))
    out = rep.to_json()
    out["explanations"] = explain(rep, rules)
    run.write_json("report.json", out)
    rows = []
    for r in rules:
        s = rep.smoothed[r.id]
        with open(run.path(f"scores_{r.id}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "raw", "smoothed", "threshold", "label"])
            lab = labels if labels is not None else np.zeros(len(s), dtype=bool)
            for i in range(len(s)):
                w.writerow([i, _fmt(rep.raw[r.id][i]), _fmt(s[i]), _fmt(rep.thresholds[r.id]),
                            int(lab[i])])
        if labels is not None:
            m = evaluate(s, labels, s > rep.thresholds[r.id])
            rows.append({"rule": r.id, **m.to_dict()})
    if labels is not None:
        with open(run.path("metrics.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            keys = ["rule", "f1", "precision", "recall", "f1_pa", "precision_pa", "recall_pa",
                    "fpr", "threshold", "threshold_pa"]
            w.writerow(keys)
            for row in rows:
                w.writerow([row["rule"]] + [_fmt(row[k]) for k in keys[1:]])
    run.close()
    return {"segments": len(rep.segments), "alarms": int(rep.alarms.sum()),
            "metrics": rows}


# --- eval ------------------------------------------------------------------------------

def cmd_eval(args) -> dict:
    """End-to-end scenario: simulate, recover, detect and score in one run."""
    cfg = _load_config(args.config)
    scen = cfg.get("scenario")
    threads = _threads(args)
    run = Run(args.out, args.force, {"eval": cfg, "seed": args.seed}, "eval")
    rc = _reward_config(cfg.get("reward", {}), threads)
    result: dict = {"scenario": scen}
    if scen == "lfc-attack":
        dur = _get(cfg, "duration", 180.0, float, "")
        atk = _attack(cfg.get("attack")) or AttackSpec("disabling")
        train_run = simulate_lfc(dur, seed=args.seed)
        test_run = simulate_lfc(dur, attack=atk, seed=args.seed + 1)
        model = recover_multimode(train_run.data, TokenLibrary.s_domain(), rc,
                                  _continuity(cfg.get("continuity", {"w": 100, "window": 5})),
                                  args.seed, "s", log=run.log)
        model.switch = detect_switch_logic(train_run.data, model, seed=args.seed)
        rule = Rule("model", "multimode", model=model)
        rep = detect([rule], test_run.data, _get(cfg, "smoothing", 0.1, float, ""))
        m = evaluate(rep.smoothed["model"], test_run.labels)
        pred = model.predict(train_run.data)
        result.update(K=model.K, modes=[md.infix for md in model.modes],
                      switch_threshold=model.switch.threshold, bfr_train=bfr(train_run.data.outputs, pred),
                      attack_fraction=float(test_run.labels.mean()), metrics=m.to_dict())
    elif scen == "ewma":
        data, _, _ = gen_ewma(_get(cfg, "T", 500, int, ""), 0.8,
                              _get(cfg, "contamination", 0.0, float, ""), args.seed)
        lib = TokenLibrary.time_domain(1, 2, binary=("+", "-", "*"))
        res = train(data, lib, rc, args.seed)
        _, _, clean = gen_ewma(len(data), 0.8, 0.0, args.seed)
        pred = evaluate_series(res.best.expr, clean)
        form = affine_form(res.best.expr, 1, 2)
        result.update(expression=to_infix(res.best.expr), bfr=bfr(clean.outputs[2:], pred),
                      coefficients=None if form is None else
                      [form.get(k, 0.0) for k in ("x1", "x1[t-1]", "x1[t-2]", "1")])
    elif scen == "hybrid":
        kind = cfg.get("kind", "hysteresis-relay")
        h = gen_hybrid(kind, _get(cfg, "noise", 0.02, float, ""), args.seed)
        lib = TokenLibrary.time_domain(h.train.n_inputs, 0, max_length=20)
        model = recover_multimode(h.train, lib, rc, _continuity(cfg.get("continuity", {})),
                                  args.seed, log=run.log)
        result.update(K=model.K, modes=[md.infix for md in model.modes],
                      index_accuracy=index_accuracy(h.labels, model.labels))
    else:
        raise SpecInvalid("scenario", f"expected lfc-attack, ewma or hybrid, got {scen!r}")
    run.write_json("result.json", result)
    flat = {k: v for k, v in result.items() if isinstance(v, (int, float))}
    flat.update(result.get("metrics", {}))
    with open(run.path("metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(sorted(flat))
        w.writerow([_fmt(flat[k]) if isinstance(flat[k], float) else flat[k] for k in sorted(flat)])
    run.close()
    return result


# --- gradcheck -----------------------------------------------------------------------------

def cmd_gradcheck(args) -> dict:
    cfg = _load_config(args.config)
    hidden = _get(cfg, "hidden_size", 8, int, "")
    n = _get(cfg, "n", 4, int, "")
    lib = TokenLibrary.time_domain(_get(cfg, "n_inputs", 2, int, ""), 0,
                                   unary=tuple(cfg.get("unary", ("sin",))),
                                   max_length=_get(cfg, "max_length", 12, int, ""))
    rng = np.random.default_rng(args.seed)
    pol = Policy(lib, hidden, seed=args.seed)
    batch = pol.sample(n, rng)
    w = rng.normal(size=n)
    err = policy_gradient_check(pol, batch, w, _get(cfg, "entropy_weight", 0.01, float, ""))
    result = {"max_relative_error": err, "n_params": int(pol.get_flat().size),
              "passed": bool(err < 1e-4)}
    if args.out:
        run = Run(args.out, args.force, {"gradcheck": cfg, "seed": args.seed}, "gradcheck")
        run.write_json("result.json", result)
        run.close()
    return result


# --- entry point ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="logicrec", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=out_required, help="run directory")
        sp.add_argument("--force", action="store_true", help="reuse a non-empty run directory")
        sp.add_argument("--threads", type=int, default=None,
                        help="scoring threads (falls back to SRLR_THREADS)")
        return sp

    common(sub.add_parser("simulate", help="generate a benchmark dataset"))
    sp = common(sub.add_parser("recover", help="recover logic from a CSV dataset"))
    sp.add_argument("--data", required=True)
    sp = common(sub.add_parser("detect", help="score a CSV dataset against rules"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--rules")
    common(sub.add_parser("eval", help="end-to-end scenario"))
    common(sub.add_parser("gradcheck", help="policy gradient vs finite differences"), False)
    return p


COMMANDS = {"simulate": cmd_simulate, "recover": cmd_recover, "detect": cmd_detect,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = COMMANDS[args.command](args)
    except Exception as e:  # reported as machine-readable JSON
        err = {"error": type(e).__name__, "message": str(e)}
        if isinstance(e, SpecInvalid):
            err["path"] = e.path
        sys.stderr.write(json.dumps(err) + "\n")
        return 2 if isinstance(e, (SpecInvalid, SchemaMismatch, FileNotFoundError,
                                   OutputExists)) else 1
    sys.stdout.write(dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
