"""Acceptance criteria, one group per criterion, each at its stated tolerance.

The conftest hook prints one PASS/FAIL line per criterion at the end of the run.
"""

import math
import time
from collections import Counter

import mpmath
import numpy as np
import pytest
from scipy import stats

from dpopt import accountant as A
from dpopt.backends import NgramBackend
from dpopt.data import balanced_demos, partition, poisson_sample, split_validation
from dpopt.engine import DP_OPT, OPT, BudgetExhaustedError, EngineConfig, tune
from dpopt.leakscan import scan
from dpopt.mechanisms import (MechanismParams, SensitivitySpec, TokenHistogram, exp_mech_argmax,
                              limited_domain, limited_domain_threshold)
from dpopt.data import Example
from dpopt.templates import (BUILTIN_TASKS, MSGS, PredictedExample, render_backward,
                             render_forward)
from dpopt.tokens import BOTTOM
from toy import TOY_TASK, seed_corpus, toy_splits

pytestmark = pytest.mark.acceptance


def criterion(n):
    return pytest.mark.criterion(n)


# 1 ----------------------------------------------------------------------------

@criterion(1)
def test_c1_gumbel_max_matches_softmax():
    scores = {"a": 10, "b": 7, "c": 3}
    n = 200_000
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    c = Counter(exp_mech_argmax(scores, 1.0, 1.0, rng)[0] for _ in range(n))
    elapsed = time.perf_counter() - t0
    z = sum(math.exp(v / 2) for v in scores.values())
    for k, v in scores.items():
        assert abs(c[k] / n - math.exp(v / 2) / z) <= 0.005
    assert elapsed < 30


# 2 ----------------------------------------------------------------------------

@criterion(2)
def test_c2_limited_domain_chi_square():
    counts = {"a": 5, "b": 4, "c": 2, "d": 1}
    d, k_bar, eps0, delta0 = 5, 3, 1.0, 0.05
    params = MechanismParams(eps0, delta0, k_bar)
    sens = SensitivitySpec(2, 1)
    # oracle: softmax over the top-3 counts and the threshold, temperature 2/eps0
    thr = 1 + 1 + 2 * math.log(min(2, k_bar, d - k_bar) / delta0) / eps0
    vals = {"a": 5.0, "b": 4.0, "c": 2.0, BOTTOM: thr}
    z = sum(math.exp(v * eps0 / 2) for v in vals.values())
    law = {k: math.exp(v * eps0 / 2) / z for k, v in vals.items()}
    n = 100_000
    rng = np.random.default_rng(7)
    h = TokenHistogram(Counter(counts), d)
    c = Counter(limited_domain(h, params, sens, rng)[0] for _ in range(n))
    assert set(c) <= set(law)
    keys = list(law)
    _, p = stats.chisquare([c[k] for k in keys], [n * law[k] for k in keys])
    assert p > 1e-3


@criterion(2)
def test_c2_threshold_value():
    got = limited_domain_threshold(4, MechanismParams(1.8, 5e-7, 10), SensitivitySpec(2, 1), 32000)
    with mpmath.workdps(30):
        want = float(4 + 1 + 2 * mpmath.log(mpmath.mpf(2) / mpmath.mpf("5e-7")) / mpmath.mpf("1.8"))
    assert abs(got - want) < 1e-6
    assert abs(got - 21.89) < 0.005


# 3 ----------------------------------------------------------------------------

@criterion(3)
def test_c3_sst2_configuration_within_budget():
    q = 1025 / 66674
    ledger = A.Ledger([A.PrivacyEvent(A.LIMITED_DOMAIN, 1.8, 5e-7, q)] * 50)
    eps, _ = A.scope_epsilon(ledger, A.TRAIN, A.Budget(8.0, 1 / 66674))
    assert 0.1 < eps <= 8


@criterion(3)
def test_c3_q1_is_identity():
    for ev in (A.PrivacyEvent(A.LIMITED_DOMAIN, 1.8, 5e-7), A.PrivacyEvent(A.EM, 0.3),
               A.PrivacyEvent(A.MONOTONIC_EM, 2.0)):
        base = A.base_curve(ev)
        assert np.array_equal(A.subsample_amplify(base, 1.0).eps, base.eps)
        assert np.array_equal(A.event_curve(ev).eps, base.eps)


@criterion(3)
@pytest.mark.parametrize("m", [25, 100])
@pytest.mark.parametrize("eps0", [0.5, 1.8])
def test_c3_never_worse_than_advanced_composition(m, eps0):
    dp = 1e-5
    ledger = A.Ledger([A.PrivacyEvent(A.LIMITED_DOMAIN, eps0, 1e-9)] * m, delta_conversion_slack=dp)
    comp = A.compose(ledger)
    eps = A.to_eps_delta(comp.train_curve, comp.delta0_total, comp.delta0_total + dp)
    assert eps <= A.advanced_composition_epsilon(m, eps0, dp)


# 4 ----------------------------------------------------------------------------

@criterion(4)
def test_c4_sqrt_m_growth():
    # sqrt growth holds while the optimal order stays above 2, i.e. m*eps0^2 << log(1/delta')
    eps0, delta0, dp = 0.1, 1e-9, 1e-5
    t0 = time.perf_counter()

    def eps_at(m):
        ledger = A.Ledger([A.PrivacyEvent(A.LIMITED_DOMAIN, eps0, delta0)] * m,
                          delta_conversion_slack=dp)
        comp = A.compose(ledger)
        return A.to_eps_delta(comp.train_curve, comp.delta0_total, comp.delta0_total + dp)

    for m in (25, 100, 400):
        assert eps_at(4 * m) <= 2.5 * eps_at(m)
    assert time.perf_counter() - t0 < 5


# 5 ----------------------------------------------------------------------------

TOY_DP = dict(mode=DP_OPT, n_candidates=5, max_tokens=20, subsample_rate=0.12,
              demos_per_subset=1, temperature=0.3, epsilon0=0.9, delta0=2e-3,
              selection_epsilon=1.0, budget_epsilon=2.0, budget_delta=1 / 200, seed=0)


@pytest.fixture(scope="module")
def toy():
    train, val = toy_splits()
    return train, val, NgramBackend.train(seed_corpus(), 3)


@criterion(5)
def test_c5_toy_dp_opt_end_to_end(toy):
    train, val, be = toy
    assert len(train) == 200 and len(val) == 50 and be.order == 3
    cfg = EngineConfig(**TOY_DP)
    assert cfg.subsample_rate * len(train) / cfg.demos_per_subset >= 20
    t0 = time.perf_counter()
    ledger = A.Ledger()
    rounds = []
    report = tune(cfg, TOY_TASK, train, val, be, ledger=ledger,
                  on_round=lambda r: rounds.append(r.histogram.total))
    assert time.perf_counter() - t0 < 300
    assert report.chosen_prompt
    assert np.mean(rounds) >= 20
    budget = A.Budget(2.0, 1 / 200)
    assert A.scope_epsilon(ledger, A.TRAIN, budget)[0] <= 2.0
    assert A.scope_epsilon(ledger, A.VALIDATION, budget)[0] <= 2.0
    assert report.privacy["train"]["epsilon"] <= 2.0
    assert ledger.count(A.VALIDATION) == 1
    assert ledger.count(A.TRAIN) == sum(c.limited_domain_calls for c in report.candidates)


@criterion(5)
def test_c5_toy_opt_byte_deterministic(toy):
    train, val, be = toy
    cfg = {**TOY_DP, "mode": OPT, "temperature": 1.1}
    a = tune(EngineConfig(**cfg), TOY_TASK, train, val, be).to_json()
    b = tune(EngineConfig(**cfg), TOY_TASK, train, val, be).to_json()
    assert a == b
    assert '"chosen_prompt"' in a


# 6 ----------------------------------------------------------------------------

@criterion(6)
def test_c6_tiny_budget_enforced(toy):
    train, val, be = toy
    budget = A.Budget(0.001, 1 / 200)
    cfg = EngineConfig(**{**TOY_DP, "budget_epsilon": 0.001})
    ledger = A.Ledger()
    with pytest.raises(BudgetExhaustedError) as exc:
        tune(cfg, TOY_TASK, train, val, be, ledger=ledger)
    assert exc.value.reason == "budget"
    assert all(c.terminated_by == "budget" for c in exc.value.report.candidates)
    # replay: every prefix of the ledger stays within budget
    replay = A.Ledger()
    for ev in ledger.events:
        assert A.budget_check(replay, ev, budget)
        replay.append(ev)


@criterion(6)
def test_c6_budget_stops_generation_midway(toy):
    # a budget that affords a few tokens: generation stops with the budget reason
    train, val, be = toy
    cfg = EngineConfig(**{**TOY_DP, "budget_epsilon": 1.5, "selection_epsilon": 0.5})
    ledger = A.Ledger()
    report = tune(cfg, TOY_TASK, train, val, be, ledger=ledger)
    assert any(c.terminated_by == "budget" for c in report.candidates)
    budget = A.Budget(1.5, 1 / 200)
    replay = A.Ledger()
    for ev in ledger.events:
        assert A.budget_check(replay, ev, budget)
        replay.append(ev)


# 7 ----------------------------------------------------------------------------

@criterion(7)
def test_c7_leaked_fragment_overlap_10():
    train = [Example("an utterly forgettable sequel .", "negative"),
             Example("buy the movie milk when the tv cow is free", "negative"),
             Example("a warm , funny film", "positive")]
    prompt = ('Classify the input text as positive or negative. Input: "Buy the movie milk '
              'when the TV cow is free" - Correct Output: negative')
    matches = scan(prompt, train)
    assert [(m.train_example_index, m.overlap_tokens) for m in matches] == [(1, 10)]


@criterion(7)
def test_c7_no_false_positives_random_corpora():
    vocab = np.array([f"w{i:04d}" for i in range(2000)])
    rng = np.random.default_rng(77)
    for _ in range(100):
        train = [" ".join(rng.choice(vocab, rng.integers(8, 20))) for _ in range(1000)]
        prompt = " ".join(rng.choice(vocab, 60))
        assert scan(prompt, train, 6) == []


# 8 ----------------------------------------------------------------------------

@criterion(8)
def test_c8_partition_disjoint_and_covering():
    rng = np.random.default_rng(8)
    for case in range(1000):
        n, s = int(rng.integers(0, 60)), int(rng.integers(1, 8))
        batch = list(range(n))
        a = partition(batch, s, np.random.default_rng(case))
        b = partition(batch, s, np.random.default_rng(case))
        assert a.partitions == b.partitions
        flat = [x for p in a.partitions for x in p]
        assert len(flat) == len(set(flat))
        assert all(len(p) == s for p in a.partitions)
        assert a.num_partitions == n // s and a.dropped == n - len(flat) == n % s


@criterion(8)
def test_c8_split_disjoint_and_deterministic():
    rng = np.random.default_rng(9)
    for case in range(1000):
        n = int(rng.integers(4, 80))
        frac = float(rng.uniform(0.05, 0.95))
        data = list(range(n))
        n_val = math.floor(frac * n + 0.5)
        if n_val in (0, n):
            with pytest.raises(ValueError):
                split_validation(data, frac, np.random.default_rng(case))
            continue
        tr, va = split_validation(data, frac, np.random.default_rng(case))
        assert (tr, va) == split_validation(data, frac, np.random.default_rng(case))
        assert set(tr).isdisjoint(va) and sorted(tr + va) == data and len(va) == n_val


@criterion(8)
def test_c8_poisson_and_demos_deterministic():
    rng = np.random.default_rng(10)
    classes = BUILTIN_TASKS["trec"].classes
    for case in range(1000):
        n, q = int(rng.integers(0, 50)), float(rng.uniform(0, 1))
        data = list(range(n))
        s1 = poisson_sample(data, q, np.random.default_rng(case))
        assert s1 == poisson_sample(data, q, np.random.default_rng(case))
        assert len(set(s1)) == len(s1) and set(s1) <= set(data) and s1 == sorted(s1)
        k = int(rng.integers(0, 13))
        train = [Example(f"{c}{i}", c) for c in classes for i in range(3)]
        d1 = balanced_demos(train, k, classes, np.random.default_rng(case))
        assert d1 == balanced_demos(train, k, classes, np.random.default_rng(case))
        per = [sum(d.label == c for d in d1) for c in classes]
        assert len(d1) == k and max(per) - min(per) <= 1 and len(set(d1)) == k


# 9 ----------------------------------------------------------------------------

@criterion(9)
def test_c9_forward_golden(golden):
    want = (golden / "forward_sst2.txt").read_bytes()
    got = render_forward(BUILTIN_TASKS["sst2"].initial_instruction, "great movie").encode()
    assert got == want


@criterion(9)
def test_c9_backward_golden_mixed(golden):
    examples = [
        PredictedExample("a gorgeous , witty , seductive movie .", "positive", "positive"),
        PredictedExample("it 's a charming and often affecting journey .", "positive", "negative"),
        PredictedExample("the plot is nothing but boilerplate clichés .", "negative", "negative"),
    ]
    got = render_backward(examples, BUILTIN_TASKS["sst2"].initial_instruction, "", MSGS[0])
    assert got.encode() == (golden / "backward_mixed.txt").read_bytes()
    assert got.endswith("Improved Instruction: ")


@criterion(9)
def test_c9_backward_golden_all_correct_partial(golden):
    examples = [PredictedExample("What is the capital of France ?", "location", "location")]
    got = render_backward(examples, BUILTIN_TASKS["trec"].initial_instruction, "Read the", MSGS[2])
    assert got.encode() == (golden / "backward_all_correct_partial.txt").read_bytes()
