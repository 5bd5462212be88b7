import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from logicrec import plants
from logicrec.detect import bfr
from logicrec.engine import MIN_REWARD, RewardConfig
from logicrec.expr import Dataset, parse_infix, parse_preorder, to_infix
from logicrec.sdomain import (DegenerateDenominator, ImproperTransferFunction, NoProperCandidate, SDomainTask,
                              TransferFunction, UnstableStep, expr_to_rational, rational_to_expr, recover_tf,
                              simulate, simulate_reference, simulate_tf, tf_to_statespace)


def _s(text):
    return parse_infix(text)


# --- realisation -------------------------------------------------------------

def test_first_order_realisation():
    ss = tf_to_statespace(TransferFunction((5.0,), (5.0, 1.0)))
    assert ss.A.tolist() == [[-5.0]]
    assert ss.B.tolist() == [[1.0]]
    assert ss.C.tolist() == [[5.0]]
    assert ss.D == 0
    assert abs(ss.transfer(0) - 1) < 1e-12


def test_pure_gain_has_no_state():
    ss = tf_to_statespace(TransferFunction((1.0,), (1.0,)))
    assert ss.order == 0 and ss.D == 1.0
    u = np.random.default_rng(0).normal(size=50)
    assert np.array_equal(simulate(ss, u, 1e-3), u)
    assert np.array_equal(simulate_tf(TransferFunction((-3.5,), (1.0,)), u, 1e-3), -3.5 * u)


def test_biproper_pid_realisation():
    tf = plants.LFC_PID
    ss = tf_to_statespace(tf)
    assert ss.D == 1050
    assert np.allclose(ss.A, [[0, 1], [0, -100]])
    # remainder of the polynomial division gives C
    q, r = np.polydiv([1050, 5030, 3000], [1, 100, 0])
    assert np.allclose(q, [1050])
    assert np.allclose(ss.C.ravel(), r[::-1])
    for s in (0.3 + 1j, 2.0, -7 + 3j):
        assert abs(ss.transfer(s) - tf(s)) < 1e-9 * abs(tf(s))


def test_improper_and_degenerate():
    with pytest.raises(ImproperTransferFunction):
        TransferFunction((1.0, 1.0), (1.0,))
    with pytest.raises(DegenerateDenominator):
        TransferFunction((1.0,), (0.0, 0.0))


@settings(max_examples=50)
@given(st.integers(0, 3), st.integers(0, 2 ** 31 - 1))
def test_realisation_matches_transfer(P, seed):
    rng = np.random.default_rng(seed)
    poles = -rng.uniform(0.1, 10, size=P)
    den = np.poly(poles)[::-1] if P else np.ones(1)
    num = rng.normal(size=rng.integers(0, P + 1) + 1)
    tf = TransferFunction(tuple(num), tuple(den))
    ss = tf_to_statespace(tf)
    for s in rng.normal(size=10) + 1j * rng.normal(size=10):
        assert abs(ss.transfer(s) - tf(s)) < 1e-9 * max(1.0, abs(tf(s)))


# --- simulation --------------------------------------------------------------

def test_first_order_step():
    dt = 1e-3
    y = simulate_tf(TransferFunction((1.0,), (1.0, 1.0)), np.ones(2001), dt)
    assert abs(y[1000] - (1 - np.exp(-1))) < 5e-3


def test_zero_input_zero_output():
    ss = tf_to_statespace(plants.LFC_PID)
    assert np.all(simulate(ss, np.zeros(300), 1e-3) == 0)


def test_fast_path_matches_reference(rng):
    u = rng.normal(size=500)
    for tf in (plants.LFC_PID, plants.AVR_PID, plants.LFC_BLOCKS["inertia"],
               TransferFunction((1.0, 0.5), (2.0, 3.0, 1.0))):
        ss = tf_to_statespace(tf)
        ref = simulate_reference(ss, u, 1e-3)
        scale = np.max(np.abs(ref))
        assert np.max(np.abs(simulate_tf(tf, u, 1e-3) - ref)) < 1e-9 * scale
        assert np.max(np.abs(simulate(ss, u, 1e-3) - ref)) < 1e-9 * scale


def test_euler_error_halves_with_dt():
    tf = TransferFunction((1.0,), (1.0, 1.0))
    errs = []
    for dt in (0.02, 0.01, 0.005):
        n = int(round(1 / dt))
        y = simulate_tf(tf, np.ones(n + 1), dt)
        errs.append(abs(y[n] - (1 - np.exp(-1))))
    assert errs[1] <= errs[0] / 2 + 1e-12
    assert errs[2] <= errs[1] / 2 + 1e-12


def test_rk4_more_accurate():
    tf = TransferFunction((1.0,), (1.0, 1.0))
    ye = simulate_tf(tf, np.ones(1001), 1e-2)
    yr = simulate_tf(tf, np.ones(1001), 1e-2, method="rk4")
    # zero-order hold on the input: compare with the held-input exact response
    exact = 1 - np.exp(-1e-2 * np.arange(1001))
    assert np.max(np.abs(yr - exact)) < np.max(np.abs(ye - exact))


@settings(max_examples=30)
@given(st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
def test_dc_gain_conservation(P, seed):
    rng = np.random.default_rng(seed)
    poles = -rng.uniform(0.5, 5, size=P)
    den = np.poly(poles)[::-1]
    num = rng.normal(size=P)
    tf = TransferFunction(tuple(num), tuple(den))
    y = simulate_tf(tf, np.ones(30000), 1e-3)
    assert abs(y[-1] - tf.dc_gain) < 1e-3 * max(1.0, abs(tf.dc_gain))


def test_unstable_candidate_guarded():
    tf = TransferFunction((1.0,), (-50.0, 1.0))
    with pytest.raises(UnstableStep):
        simulate_tf(tf, np.ones(5000), 1e-2)
    with pytest.raises(UnstableStep):
        simulate_reference(tf_to_statespace(tf), np.ones(5000), 1e-2)


def test_bad_dt():
    with pytest.raises(ValueError):
        simulate_tf(TransferFunction((1.0,), (1.0, 1.0)), np.ones(3), 0.0)


# --- expressions as rational functions ----------------------------------------

def test_expr_to_rational_examples(rng):
    tf = expr_to_rational(_s("5 / (s + 5)"))
    assert np.allclose(tf.num, [5]) and np.allclose(tf.den, [5, 1])
    with pytest.raises(ImproperTransferFunction):
        expr_to_rational(_s("(s + 1) * (s + 2) / (s + 3)"))
    tf = expr_to_rational(_s("1 / (0.2 * s + 1)"))
    assert np.allclose(tf.num, [5]) and np.allclose(tf.den, [5, 1])
    for s in rng.normal(size=10) + 1j * rng.normal(size=10):
        assert abs(tf(s) - 1 / (0.2 * s + 1)) < 1e-12


def test_expr_to_rational_degenerate():
    with pytest.raises((DegenerateDenominator, ZeroDivisionError, ValueError)):
        expr_to_rational(_s("1 / (s - s)"))


def test_expr_rejects_time_tokens():
    with pytest.raises(ValueError):
        expr_to_rational(parse_preorder(["sin", "s"]))


@settings(max_examples=40)
@given(st.integers(0, 3), st.integers(0, 2 ** 31 - 1))
def test_render_reparse_idempotent(P, seed):
    rng = np.random.default_rng(seed)
    den = np.concatenate([rng.uniform(0.5, 3, size=P), [1.0]])
    num = rng.normal(size=rng.integers(0, P + 1) + 1)
    tf = TransferFunction(tuple(num), tuple(den))
    text = to_infix(rational_to_expr(tf), digits=None)
    back = expr_to_rational(_s(text))
    assert len(back.num) == len(tf.num) and len(back.den) == len(tf.den)
    assert np.allclose(back.num, tf.num, atol=1e-9) and np.allclose(back.den, tf.den, atol=1e-9)


def test_json_round_trip():
    tf = plants.AVR_PID
    assert TransferFunction.from_json(tf.to_json()) == tf


def test_minimal_cancels_common_factor():
    tf = TransferFunction((2.0, 1.0), (2.0, 3.0, 1.0))   # (s+2)/((s+1)(s+2))
    m = tf.minimal()
    assert np.allclose(m.num, [1]) and np.allclose(m.den, [1, 1])


# --- recovery ----------------------------------------------------------------

def test_task_scores_truth_highest():
    d = plants.block_dataset(plants.AVR_BLOCKS["generator"], duration=2.0, seed=1)
    task = SDomainTask(d.inputs[:, 0], d.outputs, d.dt)
    cfg = RewardConfig()
    good = task.score(_s("1 / (s + 1)"), cfg)
    bad = task.score(_s("s / (s + 3)"), cfg)   # high-pass cannot fit a low-pass block
    assert good.reward > bad.reward
    assert isinstance(good.extra["tf"], TransferFunction)


def test_task_improper_candidate_gets_minimum():
    d = plants.block_dataset(plants.AVR_BLOCKS["generator"], duration=1.0, seed=1)
    task = SDomainTask(d.inputs[:, 0], d.outputs, d.dt)
    sc = task.score(_s("s * s + 1"), RewardConfig())
    assert not sc.valid and sc.reward <= MIN_REWARD


@pytest.mark.slow
@pytest.mark.parametrize("block,truth", [
    ("governor", plants.LFC_BLOCKS["governor"]),
    ("generator", plants.AVR_BLOCKS["generator"]),
    ("gain", TransferFunction((-20.0,), (1.0,))),
])
def test_recover_block(block, truth):
    d = plants.block_dataset(truth, seed=0)
    cfg = RewardConfig(batch_size=500, budget=5000, stop_nrmse=1e-6, patience=10)
    tf, expr, res = recover_tf(d, cfg, seed=0)
    assert len(tf.den) == len(truth.den)
    assert np.allclose(tf.den, truth.den, rtol=1e-3) and np.allclose(tf.num, truth.num, rtol=1e-3)
    assert bfr(d.outputs, simulate_tf(tf, d.inputs[:, 0], d.dt)) >= 0.999


def test_no_proper_candidate():
    from logicrec.expr import TokenLibrary
    d = Dataset(np.ones((50, 1)), np.ones(50), dt=1e-3)
    lib = TokenLibrary.s_domain(max_length=2)    # no complete tree fits, every sample is rejected
    with pytest.raises((NoProperCandidate, ValueError)):
        recover_tf(d, RewardConfig(batch_size=10, budget=20), lib=lib)
