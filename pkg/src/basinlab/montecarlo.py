"""Monte Carlo estimates of exit and concentration probabilities, compared with the bounds."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Optional, Sequence, Union

import numpy as np

from .bounds import BoundInputs, compute_CN, concentration_rhs, predicted_rate
from .errors import ParameterError, RefusedError
from .sgd import BatchRun, Decreasing, SgdConfig, simulate_many

CONFIDENCE = 0.99
MIN_STAYED_FRACTION = 0.5


def wilson_interval(k: int, n: int, confidence: float = CONFIDENCE):
    """Wilson score interval for ``k`` successes out of ``n``."""
    if n < 1 or not 0 <= k <= n:
        raise ParameterError(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    z = NormalDist().inv_cdf(0.5 + confidence / 2.0)
    p = k / n
    z2 = z * z
    denom = 1.0 + z2 / n
    centre = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    return max(0.0, min(centre - half, p)), min(1.0, max(centre + half, p))


def bound_inputs_for(config: SgdConfig, L_r: float, sigma_r: Optional[float] = None) -> BoundInputs:
    """BoundInputs matching ``config`` (same r, schedule, batch size and start)."""
    return BoundInputs(
        dist1=config.dist1,
        r=config.spec.radius,
        L_r=float(L_r),
        sigma_r=float(config.sigma_r() if sigma_r is None else sigma_r),
        batch_size=config.batch_size,
        schedule=config.schedule,
        N=config.horizon,
    )


def config_hash(payload) -> str:
    """SHA-256 of the canonical JSON encoding."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class ExperimentConfig:
    sgd: SgdConfig
    trials: int
    epsilon_grid: Sequence[float]
    bound_inputs: BoundInputs
    workers: int = 1
    label: str = ""

    def __post_init__(self):
        if self.trials < 100:
            raise ParameterError(f"need at least 100 trials, got {self.trials}")
        if any(not e > 0 for e in self.epsilon_grid):
            raise ParameterError("epsilon values must be positive")
        b, s = self.bound_inputs, self.sgd
        if not math.isclose(b.r, s.spec.radius, rel_tol=1e-12):
            raise ParameterError("bound inputs and SGD config disagree on r")
        if b.batch_size != s.batch_size:
            raise ParameterError("bound inputs and SGD config disagree on batch size")
        if b.schedule != s.schedule:
            raise ParameterError("bound inputs and SGD config disagree on the schedule")
        if not math.isclose(b.dist1, s.dist1, rel_tol=1e-9, abs_tol=1e-12):
            raise ParameterError("bound inputs and SGD config disagree on dist(x1, X)")

    @property
    def seed(self) -> int:
        return self.sgd.seed

    def describe(self) -> dict:
        s = self.sgd
        try:
            land = s.landscape.to_dict()
        except ParameterError:
            land = {"family": type(s.landscape.family).__name__,
                    "minima_set": s.spec.minima_set.to_dict()}
        return {
            "label": self.label,
            "landscape": land,
            "radius": s.spec.radius,
            "schedule": s.schedule.to_dict(),
            "noise": s.noise.to_dict(),
            "batch_size": s.batch_size,
            "horizon": s.horizon,
            "x1": [float(v) for v in s.x1],
            "seed": s.seed,
            "trials": self.trials,
            "epsilon_grid": [float(e) for e in self.epsilon_grid],
            "bound_inputs": self.bound_inputs.to_dict(),
        }

    @property
    def hash(self) -> str:
        return config_hash(self.describe())

    def run(self, horizons: Sequence[int] = ()) -> BatchRun:
        return simulate_many(self.sgd, self.trials, horizons=horizons, workers=self.workers)


Dominance = Union[bool, str, None]


@dataclass
class MCResult:
    event_name: str
    empirical_p: float
    ci_low: float
    ci_high: float
    theoretical_bound: Optional[float]
    dominated: Dominance
    parameter: Optional[float] = None
    seed: int = 0
    config_hash: str = ""
    trials: int = 0
    note: str = ""

    @property
    def allowance(self) -> float:
        return 0.5 * (self.ci_high - self.ci_low)

    def to_dict(self):
        return {
            "event": self.event_name,
            "parameter": self.parameter,
            "empirical_p": self.empirical_p,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "bound": self.theoretical_bound,
            "dominated": self.dominated,
            "trials": self.trials,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "note": self.note,
        }


def _frequency(mask: np.ndarray):
    k, n = int(np.count_nonzero(mask)), int(mask.size)
    lo, hi = wilson_interval(k, n)
    return k / n, lo, hi


def estimate_stability(config: ExperimentConfig, run: Optional[BatchRun] = None) -> MCResult:
    """Fraction of paths that never leave ``N_r`` against ``1 - C_N``."""
    run = config.run() if run is None else run
    p, lo, hi = _frequency(run.stayed)
    rep = compute_CN(config.bound_inputs.replace(N=config.sgd.horizon))
    bound = rep.stability_lower_bound
    if rep.vacuous:
        dominated: Dominance = "vacuous"
    else:
        dominated = bool(p >= bound - 0.5 * (hi - lo))
    return MCResult("stability", p, lo, hi, bound, dominated, float(config.sgd.horizon),
                    config.seed, config.hash, int(run.stayed.size))


def estimate_concentration(config: ExperimentConfig, run: Optional[BatchRun] = None):
    """Per epsilon: ``P{min h > eps}`` against its explicit bound, plus the last-gap event.

    The last-gap event has no absolute bound; its record carries the
    predicted decay exponent in ``note`` and ``dominated = None``.
    """
    if len(config.epsilon_grid) == 0:
        raise ParameterError("epsilon grid is empty")
    run = config.run() if run is None else run
    N = config.sgd.horizon
    final_gap = config.sgd.landscape.evaluate(run.final_x)[0] - config.sgd.landscape.f_star
    sched = config.sgd.schedule
    note = ""
    if isinstance(sched, Decreasing) and 0.5 < sched.beta < 1.0:
        note = f"predicted exponent {predicted_rate('HCPRC_or_LRSI', sched.beta):.6g}"
    out = []
    for eps in config.epsilon_grid:
        p, lo, hi = _frequency(run.min_h > eps)
        bound = concentration_rhs(config.bound_inputs, eps, N)
        if bound >= 1.0:
            dominated: Dominance = "vacuous"
        else:
            dominated = bool(p <= bound + 0.5 * (hi - lo))
        out.append(MCResult("min_h", p, lo, hi, bound, dominated, float(eps),
                            config.seed, config.hash, int(run.min_h.size)))
        p, lo, hi = _frequency(final_gap > eps)
        out.append(MCResult("last_gap", p, lo, hi, None, None, float(eps),
                            config.seed, config.hash, int(final_gap.size), note))
    return out


@dataclass
class RateFit:
    horizons: list
    means: list
    slope: float
    stderr: float
    intercept: float = 0.0
    stayed_fractions: list = field(default_factory=list)

    def to_dict(self):
        return {
            "horizons": [int(h) for h in self.horizons],
            "means": [float(m) for m in self.means],
            "slope": self.slope,
            "stderr": self.stderr,
            "intercept": self.intercept,
            "stayed_fractions": [float(s) for s in self.stayed_fractions],
        }


def loglog_fit(horizons, means):
    """Least-squares slope, its standard error and the intercept of log(mean) on log(N)."""
    x = np.log(np.asarray(horizons, dtype=float))
    y = np.log(np.asarray(means, dtype=float))
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    dof = len(x) - 2
    if dof > 0:
        s2 = float(resid @ resid) / dof
        stderr = math.sqrt(s2 / float(np.sum((x - x.mean()) ** 2)))
    else:
        stderr = float("nan")
    return float(coef[0]), stderr, float(coef[1])


def fit_rate_slope(config: ExperimentConfig, horizons: Sequence[int],
                   run: Optional[BatchRun] = None) -> RateFit:
    """Log-log slope of the mean optimality gap among paths that stayed.

    One batch of paths is run to the largest horizon and read at each
    horizon; a path counts at ``N_k`` when it stayed through ``N_k``.
    """
    horizons = sorted(int(h) for h in horizons)
    if len(horizons) < 4 or len(set(horizons)) != len(horizons):
        raise ParameterError("need at least 4 distinct horizons")
    if horizons[0] < 1 or math.log10(horizons[-1] / horizons[0]) < 1.5 - 1e-9:
        raise ParameterError("horizons must span at least 1.5 decades")
    if run is None:
        cfg = config.sgd.with_horizon(horizons[-1])
        run = simulate_many(cfg, config.trials, horizons=horizons, workers=config.workers)
    means, fractions = [], []
    for k, h in enumerate(horizons):
        col = run.horizons.index(h)
        keep = run.stayed_through(h)
        frac = float(np.mean(keep))
        fractions.append(frac)
        if frac < MIN_STAYED_FRACTION:
            raise RefusedError(
                f"only {frac:.3f} of paths stayed through N = {h}; conditioning too lossy"
            )
        means.append(float(np.mean(run.gap_at[keep, col])))
    if min(means) <= 0:
        raise RefusedError("mean gap reached zero; the log-log fit is undefined")
    slope, stderr, intercept = loglog_fit(horizons, means)
    return RateFit(horizons, means, slope, stderr, intercept, fractions)


@dataclass
class Summary:
    passed: int
    failed: int
    vacuous: int
    informational: int
    failures: list

    @property
    def ok(self) -> bool:
        return self.failed == 0

    def to_dict(self):
        return {
            "passed": self.passed,
            "failed": self.failed,
            "vacuous": self.vacuous,
            "informational": self.informational,
            "failures": self.failures,
        }


def compare_to_bounds(results: Sequence[MCResult], configs: Optional[dict] = None) -> Summary:
    """Count dominance outcomes; failures carry seed, config hash and, if known, the config.

    ``configs`` maps config hashes to their full descriptions.
    """
    passed = failed = vacuous = info = 0
    failures = []
    for r in results:
        if r.dominated == "vacuous":
            vacuous += 1
        elif r.dominated is None:
            info += 1
        elif r.dominated:
            passed += 1
        else:
            failed += 1
            entry = r.to_dict()
            if configs and r.config_hash in configs:
                entry["config"] = configs[r.config_hash]
            failures.append(entry)
    return Summary(passed, failed, vacuous, info, failures)
