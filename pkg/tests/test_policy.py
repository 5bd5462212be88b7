import numpy as np
import pytest
from hypothesis import given, strategies as st

from logicrec.engine import risk_weights
from logicrec.expr import S, TokenLibrary, parse_preorder
from logicrec.policy import Adam, Policy, policy_gradient_check

LIB = TokenLibrary.time_domain(2, 1, unary=("sin", "exp"), max_length=16)


def test_sampled_sequences_parse():
    pol = Policy(LIB, 16, seed=7)
    b = pol.sample(3, np.random.default_rng(7))
    for i in range(3):
        toks = [LIB.tokens[a] for a in b.actions[i, :b.lengths[i]]]
        parse_preorder(toks, [1.0] * sum(t.kind == "const" for t in toks))


def test_time_library_never_samples_s():
    pol = Policy(LIB, 8, seed=1)
    for e in pol.sample_batch(200, np.random.default_rng(1)):
        assert S not in e.tokens


def test_zero_samples():
    pol = Policy(LIB, 8, seed=0)
    assert pol.sample_batch(0, np.random.default_rng(0)) == []


@given(st.integers(0, 10_000))
def test_lengths_and_constraints(seed):
    lib = TokenLibrary.time_domain(1, 0, unary=("sin", "cos"), max_length=12, max_constants=2)
    pol = Policy(lib, 8, seed=seed)
    for e in pol.sample_batch(50, np.random.default_rng(seed)):
        assert len(e.tokens) <= 12
        assert e.n_constants <= 2
        toks = e.tokens
        for i, t in enumerate(toks[:-1]):
            if t.kind == "unary":
                child = toks[i + 1]
                assert child != t
                assert child.kind != "const"


def test_same_leaf_never_repeated_under_minus_or_divide():
    lib = TokenLibrary.s_domain(max_length=20)
    pol = Policy(lib, 8, seed=3)
    for e in pol.sample_batch(500, np.random.default_rng(3)):
        t = e.tokens
        for i in range(len(t) - 2):
            if t[i].name in ("-", "/") and t[i + 1].kind == "s":
                assert t[i + 2].kind != "s"


@given(st.integers(0, 10_000))
def test_probabilities_normalised_and_logp_consistent(seed):
    pol = Policy(LIB, 8, seed=seed)
    b = pol.sample(20, np.random.default_rng(seed))
    for t, (_, _, p, m) in enumerate(pol._replay(b)):
        live = b.actions[:, t] >= 0
        np.testing.assert_allclose(p.sum(axis=1)[live], 1.0, atol=1e-9)
        assert np.all(p[~m] == 0)
    np.testing.assert_allclose(pol.log_prob(b), b.logp, atol=1e-9)


def test_gradient_check_tiny_policy():
    pol = Policy(LIB, 8, seed=11)
    rng = np.random.default_rng(11)
    b = pol.sample(4, rng)
    err = policy_gradient_check(pol, b, rng.normal(size=4), entropy_weight=0.01)
    assert err < 1e-4


def test_gradient_check_zero_weights_is_zero():
    pol = Policy(LIB, 4, seed=2)
    b = pol.sample(3, np.random.default_rng(2))
    assert policy_gradient_check(pol, b, np.zeros(3), 0.0) == 0.0


def test_constant_rewards_give_zero_risk_gradient():
    rewards = np.full(100, 3.0)
    keep, adv = risk_weights(rewards, 0.05)
    assert np.all(adv == 0)
    pol = Policy(LIB, 8, seed=0)
    b = pol.sample(100, np.random.default_rng(0))
    g = Policy.flatten(pol.gradient(b.subset(keep), adv / keep.size, 0.0))
    assert np.all(g == 0)


def test_risk_filter_keeps_top_quantile():
    r = np.arange(100.0)
    keep, adv = risk_weights(r, 0.05)
    assert set(keep) == set(range(95, 100)) or set(keep) == set(range(96, 100))
    assert np.all(adv >= 0)


def test_adam_ascends():
    p = {"a": np.array([0.0])}
    opt = Adam(p, lr=0.1)
    for _ in range(50):
        opt.ascend(p, {"a": -(p["a"] - 2.0)})
    assert abs(p["a"][0] - 2.0) < 0.5
