import math
import threading

import numpy as np
import pytest

from dpopt import accountant as A

Q_SST2 = 1025 / 66674


def ld(eps0=1.8, delta0=5e-7, q=1.0, scope=A.TRAIN):
    return A.PrivacyEvent(A.LIMITED_DOMAIN, eps0, delta0, q, scope)


def test_base_curves():
    assert A.base_curve(A.PrivacyEvent(A.EM, 1.8)).at(2) == pytest.approx(3.24)
    assert A.base_curve(A.PrivacyEvent(A.MONOTONIC_EM, 1.0)).at(4) == pytest.approx(0.5)
    assert A.base_curve(ld(0.8, 1e-6)).at(10) == pytest.approx(3.2)


def test_event_validation():
    with pytest.raises(ValueError):
        A.PrivacyEvent(A.EM, 1.0, 1e-5)  # delta only for LimitedDomain
    with pytest.raises(ValueError):
        A.PrivacyEvent(A.EM, 1.0, 0.0, 0.5, A.VALIDATION)
    with pytest.raises(ValueError):
        A.PrivacyEvent("laplace", 1.0)
    with pytest.raises(ValueError):
        A.PrivacyEvent(A.EM, 1.0, 0.0, 1.5)


def test_amplification_identity_and_zero():
    base = A.base_curve(ld())
    assert np.array_equal(A.subsample_amplify(base, 1.0).eps, base.eps)
    assert A.subsample_amplify(base, 0.0).is_zero()
    with pytest.raises(ValueError):
        A.subsample_amplify(base, 1.2)


def test_amplification_order2_closed_form():
    base = A.base_curve(A.PrivacyEvent(A.EM, 1.8))
    got = A.subsample_amplify(base, 0.01).at(2)
    assert got == pytest.approx(math.log(1 - 0.01 ** 2 + 0.01 ** 2 * math.exp(3.24)), rel=1e-12)
    assert round(got, 6) == 0.002450


def test_amplification_monotone_in_q_and_clamped():
    base = A.base_curve(ld())
    prev = np.zeros(len(A.ORDERS))
    for q in (0.001, 0.01, 0.05, 0.2, 0.5, 0.9, 1.0):
        cur = A.subsample_amplify(base, q).eps
        assert np.all(cur >= prev - 1e-12)
        assert np.all(cur <= base.eps + 1e-12)
        prev = cur


def test_compose_additivity_and_empty():
    comp = A.compose(A.Ledger([A.PrivacyEvent(A.EM, 1.0)] * 2))
    np.testing.assert_allclose(comp.train_curve.eps, A.ORDERS.astype(float))
    comp = A.compose(A.Ledger())
    assert comp.train_curve.is_zero() and comp.val_curve.is_zero() and comp.delta0_total == 0


def test_compose_sst2_delta_mass():
    events = [ld(q=Q_SST2)] * 50
    single = A.subsample_amplify(A.base_curve(ld()), Q_SST2)
    conservative = A.compose(A.Ledger(events, amplify_delta=False))
    assert conservative.delta0_total == pytest.approx(2.5e-5)
    np.testing.assert_allclose(conservative.train_curve.eps, 50 * single.eps, rtol=1e-12)
    amplified = A.compose(A.Ledger(events))
    assert amplified.delta0_total == pytest.approx(2.5e-5 * Q_SST2)
    assert A.Ledger(events).raw_delta0_mass == pytest.approx(2.5e-5)


def test_compose_scopes_are_separate():
    ledger = A.Ledger([ld(), A.PrivacyEvent(A.MONOTONIC_EM, 1.0, scope=A.VALIDATION)])
    train, val, d0 = A.compose(ledger)
    np.testing.assert_allclose(train.eps, A.ORDERS * 1.8 ** 2 / 2)
    np.testing.assert_allclose(val.eps, A.ORDERS / 8)
    assert d0 == pytest.approx(5e-7)


def test_conversion_single_em():
    eps, order = A.to_eps_delta_with_order(A.base_curve(A.PrivacyEvent(A.EM, 1.0)), 0.0, 1e-5)
    grid = [a / 2 + math.log(1e5) / (a - 1) for a in range(2, 65)]
    assert eps == pytest.approx(min(grid)) and order == 6
    assert round(eps, 2) == 5.30


def test_conversion_zero_curve():
    eps, order = A.to_eps_delta_with_order(A.RdpCurve.zero(), 0.0, 1e-5)
    assert order == 64 and eps == pytest.approx(math.log(1e5) / 63)
    assert round(eps, 4) == 0.1827


def test_conversion_no_slack():
    with pytest.raises(A.BudgetError):
        A.to_eps_delta(A.RdpCurve.zero(), 1e-5, 1e-5)


def test_budget_check_cases():
    b = A.Budget(1.0, 1e-5)
    assert A.budget_check(A.Ledger(), A.PrivacyEvent(A.EM, 0.1), b)
    ledger = A.Ledger()
    while A.budget_check(ledger, A.PrivacyEvent(A.EM, 0.1), b):
        ledger.append(A.PrivacyEvent(A.EM, 0.1))
    assert A.scope_epsilon(ledger, A.TRAIN, b)[0] <= 1.0
    assert not A.budget_check(ledger, A.PrivacyEvent(A.EM, 0.1), b)
    # validation scope is untouched by train spending
    assert A.budget_check(ledger, A.PrivacyEvent(A.MONOTONIC_EM, 0.1, scope=A.VALIDATION), b)


def test_budget_check_sst2_allows():
    ledger = A.Ledger([ld(q=Q_SST2)] * 49)
    assert A.budget_check(ledger, ld(q=Q_SST2), A.Budget(8.0, 1 / 66674))


def test_monotonicity_over_random_events():
    rng = np.random.default_rng(0)
    ledger = A.Ledger()
    b = A.Budget(1e9, 1e-3)
    prev = 0.0
    for _ in range(40):
        kind = [A.EM, A.MONOTONIC_EM, A.LIMITED_DOMAIN][rng.integers(3)]
        ev = A.PrivacyEvent(kind, float(rng.uniform(0.05, 2)),
                            1e-7 if kind == A.LIMITED_DOMAIN else 0.0, float(rng.uniform(0, 1)))
        ledger.append(ev)
        cur = A.scope_epsilon(ledger, A.TRAIN, b)[0]
        assert cur >= prev - 1e-12
        prev = cur


def test_parallel_composition():
    b = A.Budget(10, 1e-5)
    ledger = A.Ledger([ld(1.0, 1e-8)] * 5)
    before = A.scope_epsilon(ledger, A.TRAIN, b)
    ledger.append(A.PrivacyEvent(A.MONOTONIC_EM, 3.0, scope=A.VALIDATION))
    assert A.scope_epsilon(ledger, A.TRAIN, b) == before


def test_fixed_slack_mode():
    ledger = A.Ledger([ld(1.0, 1e-8)] * 4, delta_conversion_slack=1e-6)
    eps, _ = A.scope_epsilon(ledger, A.TRAIN, A.Budget(100, 1e-5))
    comp = A.compose(ledger)
    assert eps == pytest.approx(A.to_eps_delta(comp.train_curve, comp.delta0_total,
                                               comp.delta0_total + 1e-6))


def test_summarize_zero_scope():
    s = A.summarize(A.Ledger([A.PrivacyEvent(A.MONOTONIC_EM, 1.0, scope=A.VALIDATION)]), 1e-5)
    assert s[A.TRAIN].epsilon == 0.0 and s[A.TRAIN].order is None
    assert s[A.VALIDATION].epsilon > 0 and s[A.VALIDATION].events == 1


def test_advanced_composition_formula():
    m, e, d = 10, 0.5, 1e-5
    want = e * math.sqrt(2 * m * math.log(1 / d)) + m * e * (math.exp(e) - 1)
    assert A.advanced_composition_epsilon(m, e, d) == pytest.approx(want)


def test_ledger_concurrent_appends():
    ledger = A.Ledger()

    def work():
        for _ in range(500):
            ledger.append(ld())

    threads = [threading.Thread(target=work) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(ledger) == 4000


def test_curve_immutable():
    c = A.base_curve(ld())
    with pytest.raises(ValueError):
        c.eps[0] = 1.0
