"""Recover a binary actuator rule and explain three kinds of tampering.

The actuator opens when x1 - 2 x2 >= 0; x3 is an unrelated level sensor.
A step rule is learnt from clean data and paired with a range rule on x3.
Each attack then trips the rule whose variables it touched.

    python demos/actuator_rules.py [budget]
"""
import sys

import numpy as np

from logicrec import plants
from logicrec.detect import Rule, detect, explain, range_rule
from logicrec.engine import RewardConfig, train
from logicrec.expr import TokenLibrary, evaluate_series, to_infix

budget = int(sys.argv[1]) if len(sys.argv) > 1 else 10000

data, _ = plants.gen_actuator(seed=0)
held, _ = plants.gen_actuator(seed=1)
lib = TokenLibrary.time_domain(3, 0, binary=("+", "-", "*"), step=True, max_length=12)
res = train(data, lib, RewardConfig(batch_size=500, budget=budget, stop_nrmse=1e-9), seed=0)
agree = np.mean(np.asarray(evaluate_series(res.best.expr, held)) == held.outputs)
print(f"rule {to_infix(res.best.expr, 4)}  held-out agreement {agree:.5f}\n")

rules = [Rule("actuator", "step-equation", expr=res.best.expr), range_rule("x3-range", data, 2)]
for kind in ("actuator", "dependent-sensor", "independent-sensor"):
    attacked, lab = plants.gen_actuator(seed=1, attack=kind)
    a, b = np.flatnonzero(lab)[[0, -1]]
    print(f"{kind}: attack on [{a}, {b}]")
    for rec in explain(detect(rules, attacked), rules):
        print(f"  alarm [{rec['start']}, {rec['end']}) rule {rec['rule']} on {rec['variables']}")
