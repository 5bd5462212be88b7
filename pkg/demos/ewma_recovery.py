"""Recover a three-tap moving average from clean and contaminated input traces.

The plant is y_t = 0.8 x_t + 0.16 x_{t-1} + 0.032 x_{t-2}. A few percent of
input samples are pushed down to mimic a stuck sensor; the outlier-aware fit
drops the worst-fitting rows and refits until the kept set settles.

    python demos/ewma_recovery.py [budget]
"""
import sys

from logicrec import plants
from logicrec.detect import bfr
from logicrec.engine import RewardConfig, train
from logicrec.expr import TokenLibrary, affine_form, evaluate_series, to_infix

budget = int(sys.argv[1]) if len(sys.argv) > 1 else 20000
lib = TokenLibrary.time_domain(1, 2, binary=("+", "-", "*"))

for frac, alpha in [(0.0, 0.0), (0.03, 0.0), (0.03, 0.2)]:
    data, mask, clean = plants.gen_ewma(500, 0.8, frac, seed=0)
    cfg = RewardConfig(batch_size=1000, budget=budget, alpha=alpha, trim_iter=10, stop_nrmse=1e-6)
    res = train(data, lib, cfg, seed=0)
    form = affine_form(res.best.expr, 1, 2)
    fit = bfr(clean.outputs[2:], evaluate_series(res.best.expr, clean))
    print(f"contamination {frac:.2f}  alpha {alpha:.1f}  ({mask.sum()} bad inputs)")
    print(f"  expression  {to_infix(res.best.expr, 4)}")
    if form is None:
        print("  not a linear form")
    else:
        print("  taps        " + "  ".join(f"{k} {v:+.4f}" for k, v in form.items()))
    print(f"  BFR on clean data {fit:.5f}\n")
