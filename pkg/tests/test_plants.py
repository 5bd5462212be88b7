import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from logicrec import plants
from logicrec.plants import AttackSpec, apply_injection, simulate_lfc, tamper_gains
from logicrec.sdomain import TransferFunction, simulate_tf


# --- EWMA --------------------------------------------------------------------

def test_ewma_constant_input():
    d, mask, _ = plants.gen_ewma(x=np.ones(20))
    assert np.allclose(d.outputs[2:], 0.992)
    assert not mask.any()


def test_ewma_coefficients():
    a = 0.8
    assert np.allclose(plants.EWMA_COEFFS, (a, a * (1 - a), a * (1 - a) ** 2))


@settings(max_examples=20)
@given(st.integers(0, 2 ** 31 - 1))
def test_ewma_truncated_recurrence(seed):
    d, mask, clean = plants.gen_ewma(300, seed=seed)
    x, y = d.inputs[:, 0], d.outputs
    c = plants.EWMA_COEFFS
    assert np.allclose(y[2:], c[0] * x[2:] + c[1] * x[1:-1] + c[2] * x[:-2], rtol=0, atol=1e-12)
    assert np.array_equal(d.inputs, clean.inputs)


def test_ewma_contamination_mask():
    d, mask, clean = plants.gen_ewma(1000, contamination=0.03, seed=2)
    assert mask.sum() == 30
    changed = d.inputs[:, 0] != clean.inputs[:, 0]
    assert np.array_equal(changed, mask)
    assert np.array_equal(d.outputs, clean.outputs)


def test_ewma_short_series():
    with pytest.raises(ValueError):
        plants.gen_ewma(2)


# --- hybrid systems ----------------------------------------------------------

@pytest.mark.parametrize("kind", plants.HYBRID_KINDS)
def test_hybrid_counts_and_noise(kind):
    h = plants.gen_hybrid(kind, 0.02, seed=3)
    counts = np.bincount(h.labels)
    assert tuple(counts) == plants.HYBRID_COUNTS[kind]
    noise = h.train.outputs - h.test.outputs
    assert abs(np.std(noise) / np.std(h.test.outputs) - 0.02) <= 0.002
    assert np.array_equal(h.train.inputs, h.test.inputs)


def test_relay_outputs_exact():
    h = plants.gen_hybrid("hysteresis-relay", 0.0)
    assert set(np.unique(h.train.outputs)) == {-1.0, 1.0}


def test_hybrid_truth_formulas():
    for kind in plants.HYBRID_KINDS:
        h = plants.gen_hybrid(kind, 0.0, seed=1)
        x = h.test.inputs
        env = {f"x{i + 1}": x[:, i] for i in range(x.shape[1])}
        for k, text in enumerate(h.truth):
            sel = h.labels == k
            val = eval(text.replace("^", "**"), {}, {n: v[sel] for n, v in env.items()})
            assert np.allclose(h.test.outputs[sel], val), (kind, k)


def test_nonlinear_mode3_value():
    text = plants.HYBRID_TRUTH["nonlinear-system"][2]
    assert eval(text, {}, {"x1": 2.0, "x2": 1.0}) == 3.0


@pytest.mark.parametrize("kind", plants.HYBRID_KINDS)
def test_hybrid_dwell_at_least_w(kind):
    lab = plants.gen_hybrid(kind, 0.0).labels
    cuts = np.flatnonzero(np.diff(lab)) + 1
    runs = np.diff(np.concatenate([[0], cuts, [lab.size]]))
    assert runs.min() >= 50


# --- switched linear ----------------------------------------------------------

def test_switched_theta():
    assert plants.SWITCHED_THETA[1] == (-0.747, -1.816, 0.707)


def test_switched_snr():
    d, lab, e = plants.gen_switched_linear(40.0, seed=4)
    clean, _, _ = plants.gen_switched_linear(np.inf, seed=4)
    snr = 10 * np.log10(np.mean(clean.outputs ** 2) / np.mean(e ** 2))
    assert abs(snr - 40) <= 0.5
    assert np.bincount(lab).tolist() == [1200, 1200, 1200]


def test_switched_noise_free_recurrence():
    d, lab, e = plants.gen_switched_linear(np.inf, seed=5)
    assert not e.any()
    x, y = d.inputs[:, 0], d.outputs
    th = np.asarray(plants.SWITCHED_THETA)
    for t in range(2, len(y)):
        assert y[t] == th[lab[t]] @ (y[t - 1], x[t - 1], x[t - 2])
    assert np.array_equal(d.inputs[1:, 1], y[:-1])


# --- LFC ---------------------------------------------------------------------

def test_lfc_modes_match_transfer_functions():
    run = simulate_lfc(60.0, seed=1)
    e, u = run.data.inputs[:, 0], run.data.outputs
    pd = simulate_tf(plants.PD_TF, e, run.data.dt)
    pid = simulate_tf(plants.PID_TF, e, run.data.dt)
    # the PD output equals the filter state form everywhere; PID only while no integral was dropped
    m = run.mode == 0
    assert np.allclose(u[m], pd[m], atol=1e-9)
    assert m.any() and (~m).any()
    if run.mode.all():
        assert np.allclose(u, pid, atol=1e-9)


def test_lfc_steady_state_with_pid():
    T = 12000
    run = simulate_lfc(T * 0.01, load=np.full(T, 0.2))
    assert abs(run.traces["dw"][-1]) < 1e-3


def test_lfc_droop_only_steady_error():
    T = 12000
    run = simulate_lfc(T * 0.01, load=np.full(T, 0.2), controller="none")
    assert abs(run.traces["dw"][-1]) > 1e-3
    assert abs(run.traces["dw"][-1] - run.traces["dw"][-500]) < 1e-4


def test_lfc_disabling_labels():
    spec = AttackSpec("disabling", period=1000, t_off=600)
    run = simulate_lfc(60.0, attack=spec, seed=2)
    t = np.arange(len(run.labels)) % 1000
    window = t >= 600
    differs = run.data.outputs != run.legit
    assert np.array_equal(run.labels, differs)
    assert not run.labels[~window].any()
    # labelled wherever the legitimate command was non-zero
    assert np.array_equal(run.labels[window], run.legit[window] != 0)


def test_lfc_disabling_full_period_unattacked():
    spec = AttackSpec("disabling", period=1000, t_off=1000)
    run = simulate_lfc(30.0, attack=spec, seed=2)
    clean = simulate_lfc(30.0, seed=2)
    assert not run.labels.any()
    assert np.array_equal(run.data.outputs, clean.data.outputs)


def test_lfc_injection_beta_zero_identical():
    spec = AttackSpec("output-injection", beta=0.0)
    run = simulate_lfc(30.0, attack=spec, seed=3)
    clean = simulate_lfc(30.0, seed=3)
    assert np.array_equal(run.data.outputs, clean.data.outputs)
    assert not run.labels.any()


@pytest.mark.parametrize("kind", ["output-injection", "config-tampering", "disabling"])
def test_lfc_labels_are_differences(kind):
    run = simulate_lfc(60.0, attack=AttackSpec(kind, seed=4), seed=4)
    assert np.array_equal(run.labels, run.data.outputs != run.legit)
    assert run.labels.any()


def test_lfc_deterministic():
    a = simulate_lfc(20.0, attack=AttackSpec("config-tampering", seed=1), seed=9)
    b = simulate_lfc(20.0, attack=AttackSpec("config-tampering", seed=1), seed=9)
    assert np.array_equal(a.data.outputs, b.data.outputs)
    assert np.array_equal(a.labels, b.labels)


def test_lfc_divergence_guard():
    with pytest.raises(plants.UnstableLoop):
        simulate_lfc(60.0, load=np.full(6000, 0.2), gains=(500.0, 0.0, 0.0))


# --- attacks -----------------------------------------------------------------

@settings(max_examples=50)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.floats(1.0, 10.0))
def test_injection_bound(y, G):
    y = np.asarray(y)
    g = -np.tanh(G * y)
    assert np.all(g ** 2 <= (G * y) ** 2 + 1e-12)
    assert np.allclose(apply_injection(y, 1.0, G), g)
    assert np.array_equal(apply_injection(y, 0.0, G), y)


def test_tamper_clips_at_zero():
    class Fixed:
        def normal(self, size):
            return np.array([0.5, -5.0, 0.1])
    kp, ki, kd = tamper_gains((2.1, 0.6, 1.2), Fixed())
    assert ki == 0.0 and kp == pytest.approx(2.6) and kd == pytest.approx(1.3)


def test_attack_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec("output-injection", beta=0.5)
    with pytest.raises(ValueError):
        AttackSpec("jamming")
    with pytest.raises(ValueError):
        AttackSpec("disabling", period=100, t_off=200)


# --- AVR ---------------------------------------------------------------------

def test_amplifier_dc_gain():
    assert plants.AVR_BLOCKS["amplifier"].dc_gain == 10


def test_sensor_time_constant():
    dt = 1e-4
    y = simulate_tf(plants.AVR_BLOCKS["sensor"], np.ones(5000), dt)
    t63 = np.argmax(y >= 1 - np.exp(-1)) * dt
    assert abs(t63 - 0.05) <= 0.05 * 0.05


def test_avr_voltage_settles():
    trace, blocks = plants.simulate_avr(duration=20.0)
    assert abs(trace["vt"][-1] - 1.0) < 1e-2
    assert set(blocks) == {"amplifier", "exciter", "generator", "sensor", "pid"}
    d = blocks["generator"]
    assert np.allclose(d.outputs, simulate_tf(plants.AVR_BLOCKS["generator"], d.inputs[:, 0], d.dt))


# --- actuator plant ----------------------------------------------------------

def test_actuator_rule_and_attacks():
    d, lab = plants.gen_actuator(seed=1)
    x = d.inputs
    assert np.array_equal(d.outputs, (x[:, 0] - 2 * x[:, 1] >= 0).astype(float))
    assert not lab.any()
    assert x[:, 2].min() >= 780 and x[:, 2].max() <= 1020
    for kind in ("actuator", "dependent-sensor", "independent-sensor"):
        da, la = plants.gen_actuator(seed=1, attack=kind)
        assert la.sum() == 300
    with pytest.raises(ValueError):
        plants.gen_actuator(attack="bogus")


def test_block_dataset_deterministic():
    tf = TransferFunction((1.0,), (1.0, 0.5))
    a = plants.block_dataset(tf, 1.0, seed=3)
    b = plants.block_dataset(tf, 1.0, seed=3)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.outputs, b.outputs)
