import math

import numpy as np
import pytest

from constrainedgen.data import Column, TableSchema
from constrainedgen.logic import compile_constraint
from constrainedgen.oracle import RejectionJob, rejection_sample

X_SCHEMA = TableSchema([Column("x", "real")])


def gaussian_base(count, rng):
    return rng.standard_normal((count, 1))


def test_always_accept_when_weight_near_one():
    cc = compile_constraint("x >= -1000", X_SCHEMA, k=50.0)
    job = RejectionJob(gaussian_base, cc, target_count=5000, max_proposals=6000, seed=0)
    res = rejection_sample(job)
    assert res.complete
    assert res.acceptance_rate >= 0.999


def test_constant_half_weight_acceptance():
    # a boundary tautology has c = -ln 2 exactly: Bernoulli(1/2) acceptance
    cc = compile_constraint("x >= x", X_SCHEMA, k=50.0)
    job = RejectionJob(gaussian_base, cc, target_count=10**4, max_proposals=10**4, seed=1)
    res = rejection_sample(job)
    assert res.acceptance_rate == pytest.approx(0.5, abs=0.02)


def test_budget_exhaustion_flags_partial_result():
    cc = compile_constraint("x >= 3.5", X_SCHEMA, k=30.0)  # rare region
    job = RejectionJob(gaussian_base, cc, target_count=500, max_proposals=2000, seed=2)
    res = rejection_sample(job)
    assert not res.complete
    assert res.accepted < 500
    assert res.proposed == 2000


def test_deterministic_per_seed():
    cc = compile_constraint("x >= 0", X_SCHEMA, k=5.0)
    job = RejectionJob(gaussian_base, cc, target_count=200, max_proposals=10**4, seed=3)
    a, b = rejection_sample(job), rejection_sample(job)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert a.acceptance_rate == b.acceptance_rate


def three_state_base(p):
    values = np.array([0.0, 1.0, 2.0])

    def draw(count, rng):
        return values[rng.choice(3, size=count, p=p)][:, None]

    return draw


def three_state_expected(p, cc):
    values = np.array([0.0, 1.0, 2.0])
    weights = np.exp(cc.log_weight_batch(values[:, None]))
    target = p * weights
    return target / target.sum(), weights


def test_discrete_exactness_against_brute_force_normalizer():
    p = np.array([0.5, 0.3, 0.2])
    cc = compile_constraint("x >= 1", X_SCHEMA, k=2.0)
    expected, _ = three_state_expected(p, cc)
    job = RejectionJob(three_state_base(p), cc, target_count=10**5, max_proposals=10**5, seed=4)
    res = rejection_sample(job)
    counts = np.array([(res.samples[:, 0] == v).sum() for v in (0.0, 1.0, 2.0)])
    n = counts.sum()
    for i in range(3):
        sd = math.sqrt(n * expected[i] * (1 - expected[i]))
        assert abs(counts[i] - n * expected[i]) <= 3 * sd, f"state {i}"


def test_envelope_same_distribution_higher_acceptance():
    p = np.array([0.5, 0.3, 0.2])
    cc = compile_constraint("x = 1", X_SCHEMA, k=2.0)  # equality: bound -2 ln 2
    expected, _ = three_state_expected(p, cc)

    plain = rejection_sample(
        RejectionJob(three_state_base(p), cc, target_count=4 * 10**4, max_proposals=4 * 10**4, seed=5)
    )
    shifted = rejection_sample(
        RejectionJob(
            three_state_base(p), cc, target_count=4 * 10**4, max_proposals=4 * 10**4, seed=5, use_envelope=True
        )
    )
    assert shifted.envelope_log_bound == pytest.approx(-2 * math.log(2.0))
    assert shifted.acceptance_rate > 3.5 * plain.acceptance_rate
    # accepted frequencies still follow p e^c / Z
    counts = np.array([(shifted.samples[:, 0] == v).sum() for v in (0.0, 1.0, 2.0)])
    n = counts.sum()
    for i in range(3):
        sd = math.sqrt(n * expected[i] * (1 - expected[i]))
        assert abs(counts[i] - n * expected[i]) <= 3.5 * sd


def test_acceptance_rate_estimator_unbiased():
    cc = compile_constraint("x >= 0.5", X_SCHEMA, k=1.5)
    rng = np.random.default_rng(6)
    mc = np.exp(cc.log_weight_batch(rng.standard_normal(10**5)[:, None]))
    true_rate = mc.mean()

    rates = []
    for seed in range(100):
        job = RejectionJob(gaussian_base, cc, target_count=400, max_proposals=400, seed=seed)
        rates.append(rejection_sample(job).acceptance_rate)
    rates = np.array(rates)
    sem = rates.std(ddof=1) / math.sqrt(len(rates))
    assert abs(rates.mean() - true_rate) <= 2 * sem + 2 * mc.std() / math.sqrt(len(mc))


def test_budget_below_target_rejected():
    cc = compile_constraint("x >= 0", X_SCHEMA, k=5.0)
    with pytest.raises(ValueError):
        RejectionJob(gaussian_base, cc, target_count=100, max_proposals=50)


def test_staged_rejection_matches_unstaged_distribution():
    # conjunction split into Bernoulli stages must leave the law unchanged
    p = np.array([0.5, 0.3, 0.2])
    cc = compile_constraint("x >= 1 and x <= 1", X_SCHEMA, k=1.5)
    expected, _ = three_state_expected(p, cc)
    res_plain = rejection_sample(
        RejectionJob(three_state_base(p), cc, target_count=10**5, max_proposals=10**5, seed=7)
    )
    res_staged = rejection_sample(
        RejectionJob(three_state_base(p), cc, target_count=10**5, max_proposals=10**5, seed=7, staged=True)
    )
    assert res_staged.acceptance_rate == pytest.approx(res_plain.acceptance_rate, rel=0.05)
    for res in (res_plain, res_staged):
        counts = np.array([(res.samples[:, 0] == v).sum() for v in (0.0, 1.0, 2.0)])
        n = counts.sum()
        for i in range(3):
            sd = math.sqrt(n * expected[i] * (1 - expected[i]))
            assert abs(counts[i] - n * expected[i]) <= 3.5 * sd


def test_staged_rejection_reports_full_log_weight():
    cc = compile_constraint("x >= 0 and x <= 2", X_SCHEMA, k=3.0)
    job = RejectionJob(gaussian_base, cc, target_count=500, max_proposals=10**4, seed=8, staged=True)
    res = rejection_sample(job)
    recomputed = cc.log_weight_batch(res.samples)
    np.testing.assert_allclose(res.log_weights, recomputed, atol=1e-12)
