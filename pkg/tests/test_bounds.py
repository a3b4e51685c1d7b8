import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from basinlab.bounds import (
    BoundInputs,
    check_constant_lr_bound,
    check_decreasing_lr_bound,
    compute_bn,
    compute_CN,
    concentration_rhs,
    concentration_terms,
    constant_rate_lhs,
    decreasing_rate_lhs,
    log_b_sequence,
    predicted_rate,
)
from basinlab.errors import ParameterError, PremiseError
from basinlab.sgd import Constant, Decreasing


def oracle_CN(dist1, r, L, sigma, I, rates, N, dps=40):
    """C_N by direct extended-precision products and sums."""
    with mp.workdps(dps):
        L2 = mp.mpf(L) ** 2
        b = mp.mpf(1)
        acc = mp.mpf(0)
        for n in range(1, N):
            a = mp.mpf(rates[n - 1])
            b *= 1 + L2 * a * a          # b_{n+1}
            acc += a * a / b
        return float(b / mp.mpf(r) ** 2 * (mp.mpf(dist1) ** 2 + mp.mpf(sigma) / I * acc))


def oracle_concentration(dist1, r, L, sigma, I, rates, N, eps, dps=40):
    with mp.workdps(dps):
        L2 = mp.mpf(L) ** 2
        b = mp.mpf(1)
        num, den = mp.mpf(0), mp.mpf(0)
        for n in range(1, N + 1):
            a = mp.mpf(rates[n - 1])
            b *= 1 + L2 * a * a
            num += a * a / b
            den += a / b
        first = (mp.mpf(dist1) ** 2 + mp.mpf(sigma) / I * num) / (2 * mp.mpf(eps) * den)
    return float(first) + oracle_CN(dist1, r, L, sigma, I, rates, N + 1, dps)


def inputs(**kw):
    base = dict(dist1=0.1, r=0.5, L_r=2.0, sigma_r=0.01, batch_size=1,
                schedule=Decreasing(0.05, 0.8), N=10_000)
    base.update(kw)
    return BoundInputs(**base)


# ---------------------------------------------------------------- b_n


def test_bn_examples():
    assert compute_bn(3.0, Decreasing(0.1, 0.7), 1) == 1.0
    assert compute_bn(1.0, Constant(0.1), 3) == pytest.approx(1.0201, rel=1e-14)
    assert compute_bn(5.0, Constant(0.0), 500) == 1.0
    with pytest.raises(ParameterError):
        compute_bn(1.0, Constant(0.1), 0)


def test_log_space_matches_direct_product():
    sched = Decreasing(0.3, 0.6)
    rates = sched.rates(1000)
    log_b = log_b_sequence(2.5, rates)
    direct = np.cumprod(np.r_[1.0, 1.0 + 6.25 * rates**2])
    np.testing.assert_allclose(np.exp(log_b), direct, rtol=1e-12)
    assert np.all(np.diff(log_b) >= 0)
    assert compute_bn(2.5, sched, 1000) == pytest.approx(direct[999], rel=1e-12)


# ---------------------------------------------------------------- C_N


def test_cn_zero_rate():
    rep = compute_CN(inputs(dist1=0.3, schedule=Constant(0.0), N=50))
    assert rep.C_N == pytest.approx(0.36)
    assert rep.stability_lower_bound == pytest.approx(0.64)
    assert not rep.vacuous


def test_cn_start_on_set_without_noise():
    rep = compute_CN(inputs(dist1=0.0, sigma_r=0.0))
    assert rep.C_N == 0.0 and rep.stability_lower_bound == 1.0


def test_cn_matches_extended_precision_oracle():
    inp = inputs()
    expected = oracle_CN(0.1, 0.5, 2.0, 0.01, 1, inp.schedule.rates(10_000), 10_000)
    assert compute_CN(inp).C_N == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("sched,N,I", [(Decreasing(0.4, 0.55), 300, 3), (Constant(0.07), 500, 2),
                                       (Decreasing(1.0, 1.0), 50, 1)])
def test_cn_oracle_more_cases(sched, N, I):
    inp = inputs(schedule=sched, N=N, batch_size=I, sigma_r=0.2, L_r=1.7)
    expected = oracle_CN(0.1, 0.5, 1.7, 0.2, I, sched.rates(N), N)
    assert compute_CN(inp).C_N == pytest.approx(expected, rel=1e-12)


def test_cn_report_fields():
    rep = compute_CN(inputs(N=20))
    assert rep.b_values[0] == 1.0
    assert len(rep.b_values) == 20
    assert np.all(np.diff(rep.b_values) >= 0)
    d = rep.to_dict()
    assert d["N"] == 20 and d["vacuous"] is False


def test_vacuous_is_reported_not_clamped():
    rep = compute_CN(inputs(dist1=0.45, sigma_r=5.0, schedule=Decreasing(1.0, 0.6), N=100))
    assert rep.vacuous and rep.C_N > 1.0
    assert rep.stability_lower_bound < 0.0


def test_premise_refusal():
    with pytest.raises(PremiseError):
        compute_CN(inputs(dist1=0.6))
    with pytest.raises(PremiseError):
        check_decreasing_lr_bound(inputs(dist1=0.6))
    with pytest.raises(PremiseError):
        concentration_rhs(inputs(dist1=0.6), 0.1, 10)


def test_inputs_validation():
    with pytest.raises(ParameterError):
        inputs(r=0.0)
    with pytest.raises(ParameterError):
        inputs(N=0)
    with pytest.raises(ParameterError):
        inputs(N=2.5)
    with pytest.raises(ParameterError):
        inputs(batch_size=0)


grid = st.fixed_dictionaries({
    "dist1": st.floats(0.0, 0.4),
    "L_r": st.floats(0.0, 4.0),
    "sigma_r": st.floats(0.0, 1.0),
    "a": st.floats(0.01, 0.5),
    "beta": st.floats(0.55, 1.0),
    "N": st.integers(1, 400),
})


@settings(max_examples=60, deadline=None)
@given(grid, st.floats(1.01, 3.0))
def test_cn_monotone_in_each_argument(p, factor):
    base = inputs(dist1=p["dist1"], L_r=p["L_r"], sigma_r=p["sigma_r"],
                  schedule=Decreasing(p["a"], p["beta"]), N=p["N"])
    c0 = compute_CN(base).C_N
    tol = 1e-13 * max(1.0, c0)
    assert compute_CN(base.replace(N=p["N"] + 7)).C_N >= c0 - tol
    assert compute_CN(base.replace(sigma_r=p["sigma_r"] * factor + 0.01)).C_N >= c0 - tol
    assert compute_CN(base.replace(L_r=p["L_r"] * factor + 0.01)).C_N >= c0 - tol
    assert compute_CN(base.replace(dist1=min(0.5, p["dist1"] * factor + 0.01))).C_N >= c0 - tol


# ---------------------------------------------------------------- infinite horizon


@pytest.mark.parametrize("a,beta", [(0.1, 0.8), (0.3, 0.6), (0.05, 0.55), (0.2, 1.0)])
def test_infinite_horizon_without_curvature_matches_zeta(a, beta):
    # with L = 0 every b_n is 1 and the series is a^2 * zeta(2 beta)
    inp = inputs(L_r=0.0, sigma_r=0.18, schedule=Decreasing(a, beta), N=math.inf)
    with mp.workdps(30):
        exact = (0.01 + 0.18 * a * a * mp.zeta(2 * beta)) / 0.25
    assert compute_CN(inp).C_N == pytest.approx(float(exact), rel=1e-10)


@pytest.mark.parametrize("a,beta,L", [(0.1, 0.8, 2.0), (0.3, 0.6, 2.2), (0.05, 0.55, 3.0)])
def test_infinite_horizon_bracketed(a, beta, L):
    inp = inputs(L_r=L, sigma_r=0.18, schedule=Decreasing(a, beta), N=math.inf)
    rep = compute_CN(inp)
    finite = compute_CN(inp.replace(N=2_000_000)).C_N
    assert finite <= rep.C_N <= rep.C_N_upper
    assert rep.C_N_upper - rep.C_N <= 1e-12 * rep.C_N
    # log b_inf = sum_k (-1)^(k+1) c^k zeta(2 beta k) / k with c = L^2 a^2 < 1
    c = (L * a) ** 2
    with mp.workdps(30):
        log_b = mp.nsum(lambda k: (-1) ** (k + 1) * mp.mpf(c) ** k * mp.zeta(2 * beta * k) / k, [1, mp.inf])
    assert rep.log_b_N == pytest.approx(float(log_b), rel=1e-12)


def test_infinite_horizon_constant_schedule_is_vacuous():
    rep = compute_CN(inputs(schedule=Constant(0.1), N=math.inf))
    assert rep.vacuous and math.isinf(rep.C_N)
    rep = compute_CN(inputs(schedule=Constant(0.0), N=math.inf, dist1=0.3))
    assert rep.C_N == pytest.approx(0.36)


# ---------------------------------------------------------------- learning-rate checks


def test_decreasing_check_small_scale_holds():
    chk = check_decreasing_lr_bound(inputs(dist1=0.0, schedule=Decreasing(1e-6, 0.8)))
    assert chk.holds and chk.lhs < 1e-10


def test_decreasing_check_boundary_start():
    chk = check_decreasing_lr_bound(inputs(dist1=0.5, schedule=Decreasing(0.01, 0.8)))
    assert not chk.holds and chk.max_a == 0.0


def test_decreasing_check_max_a_straddles():
    inp = inputs(schedule=Decreasing(0.05, 0.8))
    chk = check_decreasing_lr_bound(inp)
    assert chk.holds
    assert decreasing_rate_lhs(chk.max_a - 1e-8, 0.8, inp) < 0.25
    assert decreasing_rate_lhs(chk.max_a + 1e-8, 0.8, inp) > 0.25
    assert chk.margin == pytest.approx(0.25 - chk.lhs)


def test_decreasing_check_rejects_bad_schedule():
    with pytest.raises(ParameterError):
        check_decreasing_lr_bound(inputs(schedule=Constant(0.1)))


@settings(max_examples=80, deadline=None)
@given(st.floats(0.0, 0.45), st.floats(0.1, 4.0), st.floats(0.0, 1.0), st.integers(1, 16),
       st.floats(0.51, 1.0), st.floats(0.0, 1.0))
def test_accepted_scales_give_infinite_horizon_guarantee(dist1, L, sigma, I, beta, frac):
    base = inputs(dist1=dist1, L_r=L, sigma_r=sigma, batch_size=I, schedule=Decreasing(0.1, beta))
    max_a = check_decreasing_lr_bound(base).max_a
    assume(1e-6 < max_a < math.inf)
    a = max(1e-6, frac * max_a * (1 - 1e-9))
    inp = base.replace(schedule=Decreasing(a, beta), N=math.inf)
    assert check_decreasing_lr_bound(inp).holds
    assert compute_CN(inp).C_N < 1.0


def test_max_a_finite_for_start_with_underflowing_square():
    # dist1^2 underflows to 0 here, yet the LHS still grows with a
    inp = inputs(dist1=1e-301, sigma_r=0.0, schedule=Decreasing(0.1, 0.6))
    chk = check_decreasing_lr_bound(inp)
    k = 1.2 / 0.2
    expected = math.sqrt((2 * math.log(0.5) - 2 * math.log(1e-301)) / k) / inp.L_r
    assert chk.max_a == pytest.approx(expected, rel=1e-8)


def test_max_a_unbounded_without_noise_from_the_set():
    chk = check_decreasing_lr_bound(inputs(dist1=0.0, sigma_r=0.0, schedule=Decreasing(5.0, 0.8)))
    assert chk.holds and math.isinf(chk.max_a)
    assert compute_CN(inputs(dist1=0.0, sigma_r=0.0, schedule=Decreasing(5.0, 0.8), N=math.inf)).C_N == 0.0


def test_max_a_monotone_in_radius():
    prev = -1.0
    for r in [0.2, 0.3, 0.5, 0.8, 1.2]:
        cur = check_decreasing_lr_bound(inputs(r=r)).max_a
        assert cur >= prev
        prev = cur


def test_constant_check_trivial_cases():
    inp = inputs(schedule=Constant(0.2), N=1)
    chk = check_constant_lr_bound(inp)
    assert chk.lhs == pytest.approx(0.01) and chk.holds
    assert constant_rate_lhs(1e-12, 1000, inputs()) == pytest.approx(0.01, rel=1e-9)
    assert not check_constant_lr_bound(inputs(dist1=0.5, schedule=Constant(0.0), N=5)).holds


def test_constant_check_example_cross_formula():
    inp = inputs(dist1=0.1, sigma_r=0.01, batch_size=10, schedule=Constant(0.01), N=1000)
    chk = check_constant_lr_bound(inp)
    assert chk.lhs / 0.25 == pytest.approx(compute_CN(inp).C_N, rel=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 0.5), st.floats(0.0, 5.0), st.floats(0.0, 2.0), st.integers(1, 20),
       st.floats(0.0, 0.3), st.integers(1, 10_000))
def test_constant_cross_formula_property(dist1, L, sigma, I, a, N):
    inp = inputs(dist1=dist1, L_r=L, sigma_r=sigma, batch_size=I, schedule=Constant(a), N=N)
    c = compute_CN(inp).C_N
    lhs = check_constant_lr_bound(inp).lhs
    assert lhs / 0.25 == pytest.approx(c, rel=1e-10, abs=1e-300)


def test_constant_check_needs_finite_horizon():
    with pytest.raises(ParameterError):
        check_constant_lr_bound(inputs(schedule=Constant(0.1), N=math.inf))
    with pytest.raises(ParameterError):
        check_constant_lr_bound(inputs(schedule=Decreasing(0.1, 0.8)))


# ---------------------------------------------------------------- concentration


def test_concentration_matches_oracle():
    inp = inputs(sigma_r=0.18, schedule=Decreasing(0.2, 0.6))
    N = 2000
    got = concentration_rhs(inp, 1e-2, N)
    want = oracle_concentration(0.1, 0.5, 2.0, 0.18, 1, inp.schedule.rates(N + 1), N, 1e-2)
    assert got == pytest.approx(want, rel=1e-11)


def test_concentration_degenerate_start():
    assert concentration_rhs(inputs(dist1=0.0, sigma_r=0.0), 0.1, 100) == 0.0


def test_concentration_epsilon_scaling():
    inp = inputs()
    f1, c1 = concentration_terms(inp, 0.01, 500)
    f2, c2 = concentration_terms(inp, 0.02, 500)
    assert f2 == pytest.approx(f1 / 2, rel=1e-14)
    assert c1 == c2
    with pytest.raises(ParameterError):
        concentration_rhs(inp, 0.0, 10)


def test_concentration_first_term_decay_exponent():
    inp = inputs(L_r=2.0, sigma_r=0.18, schedule=Decreasing(0.05, 0.8))
    N = 100_000
    f1, _ = concentration_terms(inp, 0.01, N)
    f16, _ = concentration_terms(inp, 0.01, 16 * N)
    assert f16 / f1 == pytest.approx(16**-0.2, rel=0.05)


def test_predicted_rates():
    assert predicted_rate("WQC", 0.6) == pytest.approx(0.4)
    assert predicted_rate("HCPRC_or_LRSI", 0.6) == 0.6
    assert predicted_rate("HCPRC_or_LRSI", 0.999) == 0.999
    for beta in (0.5, 1.0):
        with pytest.raises(ParameterError):
            predicted_rate("WQC", beta)
    with pytest.raises(ParameterError):
        predicted_rate("PL*", 0.7)
