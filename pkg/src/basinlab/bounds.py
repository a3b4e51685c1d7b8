"""Closed-form stability and concentration bounds for SGD near a minima set.

Notation follows the iteration in :mod:`basinlab.sgd`: ``a_n`` is the
learning rate, ``L`` the gradient Lipschitz constant on ``N_r(X)``,
``sigma_r`` the single-sample noise second moment and ``I`` the batch size.

* ``b_n = prod_{j<n} (1 + L^2 a_j^2)``, ``b_1 = 1`` (kept in log space).
* ``C_N = b_N / r^2 * (dist1^2 + sigma_r/I * sum_{n<N} a_n^2 / b_{n+1})``;
  the probability that ``x_1 .. x_N`` all stay in ``N_r`` is at least
  ``1 - C_N``.
* ``P{min_{n<=N} h(x_n) > eps}`` is at most
  ``(dist1^2 + sigma_r/I * sum_{n<=N} a_n^2/b_{n+1}) / (2 eps sum_{n<=N} a_n/b_{n+1}) + C_{N+1}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.integrate import quad
from scipy.special import zeta

from .errors import ParameterError, PremiseError
from .sgd import Constant, Decreasing, Schedule

INFINITE_CHUNK = 1 << 20


@dataclass(frozen=True)
class BoundInputs:
    dist1: float
    r: float
    L_r: float
    sigma_r: float
    batch_size: int
    schedule: Schedule
    N: Union[int, float] = math.inf

    def __post_init__(self):
        if not self.dist1 >= 0:
            raise ParameterError("dist1 must be non-negative")
        if not self.r > 0:
            raise ParameterError("r must be positive")
        if not self.L_r >= 0:
            raise ParameterError("L_r must be non-negative")
        if not self.sigma_r >= 0:
            raise ParameterError("sigma_r must be non-negative")
        if self.batch_size < 1:
            raise ParameterError("batch size must be at least 1")
        if not (math.isinf(self.N) or (self.N >= 1 and int(self.N) == self.N)):
            raise ParameterError(f"N must be a positive integer or infinity, got {self.N}")

    @property
    def noise_level(self) -> float:
        return self.sigma_r / self.batch_size

    def replace(self, **changes) -> "BoundInputs":
        from dataclasses import replace

        return replace(self, **changes)

    def to_dict(self):
        return {
            "dist1": self.dist1,
            "r": self.r,
            "L_r": self.L_r,
            "sigma_r": self.sigma_r,
            "batch_size": self.batch_size,
            "schedule": self.schedule.to_dict(),
            "N": "inf" if math.isinf(self.N) else int(self.N),
        }


def _require_premise(inputs: BoundInputs):
    if inputs.dist1 > inputs.r:
        raise PremiseError(
            f"start point lies outside N_r: dist1 = {inputs.dist1:.6g} > r = {inputs.r:.6g}"
        )


def _cumsum(x):
    # accumulate in extended precision where the platform has it
    return np.cumsum(x, dtype=np.longdouble).astype(float)


def log_b_sequence(L_r: float, rates) -> np.ndarray:
    """``log b_n`` for ``n = 1 .. len(rates) + 1``."""
    inc = np.log1p((L_r * np.asarray(rates, dtype=float)) ** 2)
    return np.concatenate([[0.0], _cumsum(inc)])


def compute_bn(L_r: float, schedule: Schedule, n: int) -> float:
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    if n == 1:
        return 1.0
    inc = np.log1p((L_r * schedule.rates(n - 1)) ** 2)
    return math.exp(math.fsum(inc))


@dataclass
class BoundReport:
    N: Union[int, float]
    C_N: float
    stability_lower_bound: float
    vacuous: bool
    log_b_N: float
    noise_sum: float
    C_N_upper: float = field(default=float("nan"))
    log_b: Optional[np.ndarray] = None

    @property
    def b_values(self):
        return None if self.log_b is None else np.exp(self.log_b)

    def to_dict(self):
        return {
            "N": "inf" if math.isinf(self.N) else int(self.N),
            "C_N": self.C_N,
            "C_N_upper": self.C_N_upper,
            "stability_lower_bound": self.stability_lower_bound,
            "vacuous": self.vacuous,
            "b_N": math.exp(self.log_b_N) if self.log_b_N < 700 else "overflow",
            "log_b_N": self.log_b_N,
            "noise_sum": self.noise_sum,
        }


def _finite_report(inputs: BoundInputs, N: int) -> BoundReport:
    rates = inputs.schedule.rates(max(N - 1, 0))
    log_b = log_b_sequence(inputs.L_r, rates)             # b_1 .. b_N
    noise_sum = math.fsum(rates**2 * np.exp(-log_b[1:])) if N > 1 else 0.0
    inner = inputs.dist1**2 + inputs.noise_level * noise_sum
    C = _scaled(log_b[-1], inner) / inputs.r**2
    return BoundReport(N, C, 1.0 - C, C >= 1.0, float(log_b[-1]), noise_sum, C, log_b)


def _scaled(log_b, inner):
    """``exp(log_b) * inner`` without overflowing for large ``log_b``."""
    if inner == 0.0:
        return 0.0
    expo = log_b + math.log(inner)
    return math.exp(expo) if expo < 709.0 else math.inf


def _log_tail(x: float, c: float, s: float) -> float:
    """``sum_{j > x} log1p(c j^-s)`` for ``c (x+1)^-s < 1``, via Hurwitz zeta values."""
    total, k = 0.0, 1
    while k <= 200:
        term = c**k * float(zeta(s * k, x + 1.0)) / k
        total += term if k % 2 else -term
        if term <= 1e-18 * abs(total):
            break
        k += 1
    return total


def _tail_integral(lo: float, c: float, s: float) -> float:
    """``int_lo^inf x^-s exp(T(x)) dx`` with ``T = _log_tail``.

    With ``w = x^(1-s)`` the integral is ``(w0 + int_0^w0 expm1(T) dw) / (s-1)``,
    a finite interval whose integrand is small and smooth.
    """
    w0 = lo ** (1.0 - s)

    def integrand(w):
        if w <= 0.0:
            return 0.0
        x = w ** (1.0 / (1.0 - s))
        return math.expm1(_log_tail(x, c, s)) if math.isfinite(x) else 0.0

    extra, _ = quad(integrand, 0.0, w0, epsabs=0.0, epsrel=1e-12, limit=200)
    return (w0 + extra) / (s - 1.0)


def _infinite_report(inputs: BoundInputs) -> BoundReport:
    sched = inputs.schedule
    if isinstance(sched, Constant):
        if sched.a == 0 or (inputs.L_r == 0 and inputs.sigma_r == 0):
            inner = inputs.dist1**2
            C = inner / inputs.r**2
            return BoundReport(math.inf, C, 1.0 - C, C >= 1.0, 0.0, 0.0, C)
        return BoundReport(math.inf, math.inf, -math.inf, True, math.inf, math.inf, math.inf)

    a, beta = sched.a, sched.beta
    s, c = 2.0 * beta, (inputs.L_r * a) ** 2
    # sum directly until the remaining factors admit the zeta expansion comfortably
    M = INFINITE_CHUNK
    while c * (M + 1.0) ** -s > 0.25:
        M *= 2
    rates = sched.rates(M)
    log_b = _cumsum(np.log1p(c * np.arange(1, M + 1, dtype=float) ** -s))  # log b_{n+1}
    direct = math.fsum(rates**2 * np.exp(-log_b))
    log_b_M1 = float(log_b[-1])
    log_b_inf = log_b_M1 + _log_tail(M, c, s)
    # n > M: a_n^2 / b_{n+1} = a^2 n^-s exp(T(n)) / b_inf with a convex decreasing summand,
    # so the tail lies between the trapezoid and midpoint integrals
    scale = a * a * math.exp(-log_b_inf)
    g_first = (M + 1.0) ** -s * math.exp(_log_tail(M + 1.0, c, s))
    tail_hi = scale * _tail_integral(M + 0.5, c, s)
    tail_lo = scale * (_tail_integral(M + 1.0, c, s) + 0.5 * g_first)
    noise = inputs.noise_level
    r2 = inputs.r**2
    C_hi = _scaled(log_b_inf, inputs.dist1**2 + noise * (direct + tail_hi)) / r2
    C_lo = _scaled(log_b_inf, inputs.dist1**2 + noise * (direct + tail_lo)) / r2
    noise_sum = direct + 0.5 * (tail_lo + tail_hi)
    C = _scaled(log_b_inf, inputs.dist1**2 + noise * noise_sum) / r2
    C = min(max(C, C_lo), C_hi)
    return BoundReport(math.inf, C, 1.0 - C, C >= 1.0, log_b_inf, noise_sum, C_hi)


def compute_CN(inputs: BoundInputs) -> BoundReport:
    """Stability constant ``C_N`` and the lower bound ``1 - C_N``.

    For ``N = inf`` with a decreasing schedule the first ``2**20`` terms are
    summed directly.  The remaining factors of ``b_inf`` are an alternating
    series of Hurwitz zeta values, and the remaining noise terms are
    bracketed by integrals of their smooth extension.  ``C_N_upper`` is the
    upper end of that bracket.
    Vacuous bounds (``C_N >= 1``) are reported, not clamped.
    """
    _require_premise(inputs)
    if math.isinf(inputs.N):
        return _infinite_report(inputs)
    return _finite_report(inputs, int(inputs.N))


def stability_constant(inputs: BoundInputs, N) -> float:
    return compute_CN(inputs.replace(N=N)).C_N


# --------------------------------------------------------------------------
# Learning-rate conditions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DecreasingRateCheck:
    holds: bool
    lhs: float
    margin: float
    max_a: float


def _log_decreasing_lhs(a: float, beta: float, inputs: BoundInputs) -> float:
    # log of the LHS, assembled from logs so tiny dist1 or sigma cannot underflow to 0
    k = 2.0 * beta / (2.0 * beta - 1.0)
    terms = []
    if inputs.dist1 > 0.0:
        terms.append(2.0 * math.log(inputs.dist1))
    if inputs.noise_level > 0.0 and a > 0.0:
        terms.append(math.log(k) + math.log(inputs.noise_level) + 2.0 * math.log(a))
    if not terms:
        return -math.inf
    log_base = float(np.logaddexp.reduce(terms))
    return k * inputs.L_r**2 * a * a + log_base


def decreasing_rate_lhs(a: float, beta: float, inputs: BoundInputs) -> float:
    """Sufficient-condition LHS for ``a_n = a / n**beta``; compare with ``r^2``.

    Uses ``exp(2 beta L^2 a^2 / (2 beta - 1))``, which dominates ``b_inf``
    because ``sum n^(-2 beta) <= 2 beta / (2 beta - 1)``.
    """
    expo = _log_decreasing_lhs(a, beta, inputs)
    return math.exp(expo) if expo < 709.0 else math.inf


def check_decreasing_lr_bound(inputs: BoundInputs, *, a_tol: float = 1e-10) -> DecreasingRateCheck:
    """Whether the scale ``a`` of a decreasing schedule guarantees ``C_inf < 1``.

    ``max_a`` is the supremum of accepted scales, found by bisection (the
    LHS is strictly increasing in ``a``).  It is 0 when ``dist1 >= r`` and
    infinite when the LHS does not grow with ``a`` (no noise and either a
    start on ``X`` or ``L = 0``).
    """
    sched = inputs.schedule
    if not isinstance(sched, Decreasing):
        raise ParameterError("check_decreasing_lr_bound needs a Decreasing schedule")
    if not 0.5 < sched.beta <= 1.0:
        raise ParameterError(f"beta must lie in (1/2, 1], got {sched.beta}")
    _require_premise(inputs)
    r2 = inputs.r**2
    log_r2 = 2.0 * math.log(inputs.r)
    lhs = decreasing_rate_lhs(sched.a, sched.beta, inputs)
    max_a = 0.0
    flat = inputs.noise_level == 0.0 and (inputs.dist1 == 0.0 or inputs.L_r == 0.0)
    if flat and inputs.dist1 < inputs.r:
        max_a = math.inf
    elif _log_decreasing_lhs(0.0, sched.beta, inputs) < log_r2:
        lo, hi = 0.0, 1.0
        while _log_decreasing_lhs(hi, sched.beta, inputs) < log_r2:
            lo, hi = hi, 2.0 * hi
        while hi - lo > a_tol:
            mid = 0.5 * (lo + hi)
            if _log_decreasing_lhs(mid, sched.beta, inputs) < log_r2:
                lo = mid
            else:
                hi = mid
        max_a = lo
    holds = _log_decreasing_lhs(sched.a, sched.beta, inputs) < log_r2
    return DecreasingRateCheck(holds, lhs, r2 - lhs, max_a)


@dataclass(frozen=True)
class ConstantRateCheck:
    holds: bool
    lhs: float
    margin: float


def constant_rate_lhs(a: float, N: int, inputs: BoundInputs) -> float:
    """Closed (geometric-series) form of ``r^2 C_N`` for a constant rate."""
    if N <= 1 or a == 0.0:
        return inputs.dist1**2
    m = N - 1
    u = (inputs.L_r * a) ** 2
    if u < 1e-200:
        # q^m == 1 to double precision; also avoids dividing by a subnormal u
        return inputs.dist1**2 + inputs.noise_level * (a * a * m)
    log_q = math.log1p(u)
    geo = -math.expm1(-m * log_q) / u     # sum_{j=1}^{m} q^{-j}
    return _scaled(m * log_q, inputs.dist1**2 + inputs.noise_level * (a * a * geo))


def check_constant_lr_bound(inputs: BoundInputs, N: Optional[int] = None) -> ConstantRateCheck:
    """Whether a constant rate ``a`` over ``N`` iterates guarantees ``C_N < 1``."""
    sched = inputs.schedule
    if not isinstance(sched, Constant):
        raise ParameterError("check_constant_lr_bound needs a Constant schedule")
    N = inputs.N if N is None else N
    if math.isinf(N) or N < 1:
        raise ParameterError("constant-rate check needs a finite N >= 1")
    _require_premise(inputs)
    lhs = constant_rate_lhs(sched.a, int(N), inputs)
    r2 = inputs.r**2
    return ConstantRateCheck(lhs < r2, lhs, r2 - lhs)


# --------------------------------------------------------------------------
# Concentration
# --------------------------------------------------------------------------


def concentration_terms(inputs: BoundInputs, epsilon: float, N: int):
    """``(markov_term, C_{N+1})`` of the min-h concentration bound."""
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    if N < 1 or math.isinf(N):
        raise ParameterError("N must be a finite positive integer")
    _require_premise(inputs)
    N = int(N)
    rates = inputs.schedule.rates(N)
    log_b = log_b_sequence(inputs.L_r, rates)             # b_1 .. b_{N+1}
    inv_b = np.exp(-log_b[1:])                             # 1 / b_{n+1}, n = 1..N
    num = inputs.dist1**2 + inputs.noise_level * math.fsum(rates**2 * inv_b)
    den = 2.0 * math.fsum(rates * inv_b)
    if num == 0.0:
        first = 0.0
    elif den == 0.0:
        first = math.inf
    else:
        first = num / (epsilon * den)
    return first, stability_constant(inputs, N + 1)


def concentration_rhs(inputs: BoundInputs, epsilon: float, N: int) -> float:
    """Upper bound on ``P{min_{n<=N} h(x_n) > epsilon}``."""
    first, c_next = concentration_terms(inputs, epsilon, N)
    return first + c_next


def predicted_rate(kind: str, beta: float) -> float:
    """Decay exponent of the concentration bounds in ``N``.

    ``"WQC"`` (min-gap event): ``1 - beta``.  ``"HCPRC_or_LRSI"`` (last-iterate
    gap): ``beta``.
    """
    if not 0.5 < beta < 1.0:
        raise ParameterError(f"beta must lie in (1/2, 1), got {beta}")
    key = kind.upper()
    if key == "WQC":
        return 1.0 - beta
    if key in {"HCPRC_OR_LRSI", "HCPRC", "LRSI"}:
        return beta
    raise ParameterError(f"unknown rate kind {kind!r}")
