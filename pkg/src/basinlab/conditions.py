"""Sampled certification of local convexity conditions near a minima set.

Each check evaluates a condition's defining inequality at points of the
closed neighborhood ``N_r(X)`` and reports the best constant the samples
allow, together with a witness when the condition fails.  Checks are
falsifiers: ``holds=True`` means no sampled point contradicts the condition.

Besides the uniformly drawn points, ratio-type checks also probe radial
shells at ``dist = 10**-k`` above a few sampled projections; that is where a
flat basin (degree > 2) breaks the PL* and QG* inequalities.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import KindError, ParameterError
from .landscapes import (
    Landscape,
    NeighborhoodSpec,
    Point,
    hessian_fd,
    sample_shell,
)

# Points this close to X are skipped when forming ratio constants (0/0).
EXCLUSION_BAND = 1e-8
# Default positivity tolerance for mu-type constants (LRSI, PL*, QG*).
MU_TOL = 1e-6
# Smallest quasar constant for which QC / WQC are declared to hold.
ZETA_MIN = 1e-3
# Relative singular-value threshold for the Hessian rank test.
RANK_RTOL = 1e-6
# Absolute singular-value floor: finite-difference curvature of a flat basin
# on X is O(step**2), far below this.
RANK_ATOL = 1e-6
# Slack for pointwise inequalities (NNS, *C).
POINTWISE_ATOL = 1e-12

N_SHELL_BASES = 8
SHELL_EXPONENTS = range(1, 8)


class ConditionKind(str, enum.Enum):
    LRSI = "LRSI"
    PL_STAR = "PL*"
    QG_STAR = "QG*"
    STAR_C = "*C"
    QC = "QC"
    WQC = "WQC"
    NNS = "NNS"
    HCPRC = "HCPRC"


RATIO_KINDS = {ConditionKind.LRSI, ConditionKind.PL_STAR, ConditionKind.QG_STAR}
QUASAR_KINDS = {ConditionKind.QC, ConditionKind.WQC}
SINGLE_MINIMIZER_KINDS = {ConditionKind.STAR_C, ConditionKind.QC}


@dataclass
class ConditionReport:
    kind: ConditionKind
    holds: bool
    best_constant: Optional[float]
    violation_witness: Optional[np.ndarray]
    n_samples: int
    region: NeighborhoodSpec
    threshold: float

    def to_dict(self):
        return {
            "kind": self.kind.value,
            "holds": self.holds,
            "best_constant": _json_float(self.best_constant),
            "violation_witness": None
            if self.violation_witness is None
            else self.violation_witness.tolist(),
            "n_samples": self.n_samples,
            "radius": self.region.radius,
            "threshold": self.threshold,
        }


def _json_float(v):
    if v is None:
        return None
    if np.isinf(v):
        return "inf"
    return float(v)


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------


def sample_neighborhood(spec: NeighborhoodSpec, n: int, seed: int):
    """Draw ``n`` points of ``N_r(X)``, deterministically from ``seed``.

    A point is ``z + t*u`` with ``z`` uniform on ``X``, ``t ~ U[0, r]`` and
    ``u`` a uniform unit direction; candidates farther than ``r`` from ``X``
    are rejected and redrawn.
    """
    if n < 1:
        raise ParameterError(f"need at least one sample, got {n}")
    rng = np.random.default_rng(seed)
    X, r = spec.minima_set, spec.radius
    out = []
    have = 0
    while have < n:
        cand = sample_shell(X, rng, n - have, 0.0, r)
        dist = X.project_batch(cand)[0]
        keep = cand[dist <= r]
        out.append(keep)
        have += len(keep)
    return np.concatenate(out)[:n]


def _radial_probes(landscape: Landscape, base, r):
    dist, proj, _ = landscape.minima_set.project_batch(base)
    ok = dist >= EXCLUSION_BAND
    base, dist, proj = base[ok][:N_SHELL_BASES], dist[ok][:N_SHELL_BASES], proj[ok][:N_SHELL_BASES]
    if len(base) == 0:
        return np.empty((0, landscape.dimension))
    v = (base - proj) / dist[:, None]
    ts = [10.0**-k for k in SHELL_EXPONENTS if 10.0**-k <= r]
    return np.concatenate([proj + t * v for t in ts]) if ts else np.empty((0, landscape.dimension))


# --------------------------------------------------------------------------
# Inequalities
# --------------------------------------------------------------------------


@dataclass
class _Quantities:
    points: np.ndarray
    gap: np.ndarray
    grad: np.ndarray
    dist: np.ndarray
    inner: np.ndarray
    support: Optional[np.ndarray]


def _quantities(landscape: Landscape, P) -> _Quantities:
    value, grad, dist, proj, _ = landscape.evaluate(P)
    inner = np.sum(grad * (P - proj), axis=1)
    h = landscape.support_values(P, value=value)
    return _Quantities(P, value - landscape.f_star, grad, dist, inner, h)


def _ratio(kind, q: _Quantities):
    """Attainable constant at each point; NaN where the point is skipped."""
    far = q.dist >= EXCLUSION_BAND
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind is ConditionKind.LRSI:
            num, den = q.inner, q.dist**2
        elif kind is ConditionKind.QG_STAR:
            num, den = q.gap, q.dist**2
        elif kind is ConditionKind.PL_STAR:
            num, den = np.sum(q.grad**2, axis=1), q.gap
        else:  # QC, WQC
            num, den = q.inner, q.gap
        ratio = np.where(den > 0, num / den, np.where(num >= 0, np.inf, -np.inf))
    return np.where(far, ratio, np.nan)


def inequality_margin(kind, landscape: Landscape, x, constant=None) -> float:
    """``lhs - constant * rhs`` of the kind's inequality at a single point.

    Negative means the inequality fails.  For NNS the margin is
    ``min((grad f, x - x_p) - h(x), h(x))``; for *C the constant is 1.
    """
    kind = ConditionKind(kind)
    q = _quantities(landscape, np.atleast_2d(np.asarray(x, dtype=float)))
    if kind is ConditionKind.LRSI:
        return float(q.inner[0] - constant * q.dist[0] ** 2)
    if kind is ConditionKind.PL_STAR:
        return float(np.sum(q.grad[0] ** 2) - constant * q.gap[0])
    if kind is ConditionKind.QG_STAR:
        return float(q.gap[0] - constant * q.dist[0] ** 2)
    if kind in QUASAR_KINDS:
        return float(q.inner[0] - constant * q.gap[0])
    if kind is ConditionKind.STAR_C:
        return float(q.inner[0] - q.gap[0])
    if kind is ConditionKind.NNS:
        if q.support is None:
            raise KindError("NNS needs a registered support function")
        return float(min(q.inner[0] - q.support[0], q.support[0]))
    raise KindError(f"no pointwise inequality for {kind.value}")


def witness_fails(report: ConditionReport, landscape: Landscape) -> bool:
    """Re-evaluate a failing report's witness in isolation."""
    if report.violation_witness is None:
        return False
    m = inequality_margin(report.kind, landscape, report.violation_witness, report.threshold)
    if report.kind in RATIO_KINDS:
        return m <= 0.0
    if report.kind in QUASAR_KINDS:
        return m < 0.0
    return m < -POINTWISE_ATOL


def check_condition(
    landscape: Landscape,
    spec: NeighborhoodSpec,
    kind,
    samples: int = 10_000,
    seed: int = 0,
    *,
    tol: float = MU_TOL,
    zeta_min: float = ZETA_MIN,
) -> ConditionReport:
    """Certify or falsify one local condition over sampled points of ``N_r(X)``."""
    kind = ConditionKind(kind)
    if kind is ConditionKind.HCPRC:
        raise KindError("HCPRC is checked by check_hcprc_rank")
    if kind in SINGLE_MINIMIZER_KINDS and not isinstance(spec.minima_set, Point):
        raise KindError(f"{kind.value} refers to a single minimizer; X must be a Point")
    if kind is ConditionKind.NNS and not landscape.has_support:
        raise KindError("NNS needs a registered support function h")

    P = sample_neighborhood(spec, samples, seed)
    if kind in RATIO_KINDS or kind in QUASAR_KINDS:
        P = np.concatenate([P, _radial_probes(landscape, P, spec.radius)])
    q = _quantities(landscape, P)

    if kind in RATIO_KINDS or kind in QUASAR_KINDS:
        ratio = _ratio(kind, q)
        if np.all(np.isnan(ratio)):
            best, idx = np.inf, None
        else:
            idx = int(np.nanargmin(ratio))
            best = float(ratio[idx])
        if kind in RATIO_KINDS:
            holds = best > tol
            threshold = tol
        else:
            best = min(1.0, best)
            holds = best >= zeta_min
            threshold = zeta_min
        witness = None if holds or idx is None else P[idx].copy()
        return ConditionReport(kind, bool(holds), best, witness, len(P), spec, threshold)

    if kind is ConditionKind.STAR_C:
        margin = q.inner - q.gap
    else:  # NNS
        margin = np.minimum(q.inner - q.support, q.support)
    idx = int(np.argmin(margin))
    holds = bool(margin[idx] >= -POINTWISE_ATOL)
    witness = None if holds else P[idx].copy()
    return ConditionReport(kind, holds, None, witness, len(P), spec, 1.0)


# --------------------------------------------------------------------------
# Hessian rank
# --------------------------------------------------------------------------


@dataclass
class RankReport:
    holds: bool
    expected_codim: int
    ranks: list
    singular_values: list
    points: np.ndarray

    def to_dict(self):
        return {
            "kind": "HCPRC",
            "holds": self.holds,
            "expected_codim": self.expected_codim,
            "ranks": self.ranks,
            "max_singular_value": max(float(s[0]) for s in self.singular_values),
        }


def numerical_rank(sv, rtol=RANK_RTOL, atol=RANK_ATOL) -> int:
    sv = np.asarray(sv)
    if sv.size == 0:
        return 0
    cut = max(rtol * float(sv.max()), atol)
    return int(np.sum(sv > cut))


def check_hcprc_rank(
    landscape: Landscape,
    spec: NeighborhoodSpec,
    expected_codim: Optional[int] = None,
    n_points: int = 100,
    seed: int = 0,
    *,
    step=None,
    rtol: float = RANK_RTOL,
    atol: float = RANK_ATOL,
) -> RankReport:
    """Check that the Hessian has rank ``d - manifold_dim`` at points on ``X``.

    A singular value counts toward the rank when it exceeds both
    ``rtol * sigma_max`` and ``atol``; a flat basin has an essentially zero
    Hessian on ``X`` and therefore rank 0.
    """
    if expected_codim is None:
        expected_codim = landscape.dimension - spec.minima_set.manifold_dim
    rng = np.random.default_rng(seed)
    pts = spec.minima_set.sample(rng, n_points)
    ranks, svs = [], []
    for z in pts:
        sv = np.linalg.svd(hessian_fd(landscape, z, step), compute_uv=False)
        svs.append(sv)
        ranks.append(numerical_rank(sv, rtol, atol))
    holds = all(k == expected_codim for k in ranks)
    return RankReport(holds, int(expected_codim), ranks, svs, pts)


# --------------------------------------------------------------------------
# Local constants
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LocalConstants:
    """Sampled local constants.

    ``L_r`` is a pairwise lower estimate of the gradient Lipschitz constant
    over ``N_{r+delta}``; :attr:`L_bound` inflates it by ``safety_factor``
    for use in the stability bounds.
    """

    L_r: float
    grad_sup: float
    C_patel: float
    delta: float
    safety_factor: float = 1.1

    @property
    def L_bound(self) -> float:
        return self.safety_factor * self.L_r

    def to_dict(self):
        return {
            "L_r": self.L_r,
            "L_bound": self.L_bound,
            "grad_sup": self.grad_sup,
            "C_patel": self.C_patel,
            "delta": self.delta,
        }


def capture_constant(L_r_delta: float, grad_sup: float, delta: float) -> float:
    """``L_{r+delta}/2 + sup|grad f| / delta``."""
    if not delta > 0:
        raise ParameterError(f"delta must be positive, got {delta}")
    return L_r_delta / 2.0 + grad_sup / delta


def pairwise_lipschitz(landscape: Landscape, A, B) -> float:
    grads_a = landscape.evaluate(A)[1]
    grads_b = landscape.evaluate(B)[1]
    num = np.linalg.norm(grads_a - grads_b, axis=1)
    den = np.linalg.norm(A - B, axis=1)
    ok = den > 0
    return float(np.max(num[ok] / den[ok])) if np.any(ok) else 0.0


def estimate_local_constants(
    landscape: Landscape,
    spec: NeighborhoodSpec,
    delta: float,
    samples: int = 10_000,
    seed: int = 0,
    *,
    safety_factor: float = 1.1,
) -> LocalConstants:
    """Estimate ``L``, ``sup |grad f|`` and the descent constant ``C``.

    Pairs are formed two ways from points of ``N_{r+delta}``: consecutive
    sample pairs (global secants) and each sample with a nearby perturbation
    of size ``1e-3 * (r + delta)`` (local secants, which approach the
    Hessian norm).
    """
    if not delta > 0:
        raise ParameterError(f"delta must be positive, got {delta}")
    if samples < 2:
        raise ParameterError("need at least two samples for pairwise estimates")
    wide = spec.widened(delta)
    P = sample_neighborhood(wide, samples, seed)
    rng = np.random.default_rng([seed, 1])
    u = rng.standard_normal(P.shape)
    u /= np.linalg.norm(u, axis=1)[:, None]
    Q = P + 1e-3 * wide.radius * u
    inside = spec.minima_set.project_batch(Q)[0] <= wide.radius
    L = max(
        pairwise_lipschitz(landscape, P[:-1], P[1:]),
        pairwise_lipschitz(landscape, P[inside], Q[inside]) if np.any(inside) else 0.0,
    )
    inner_pts = sample_neighborhood(spec, samples, seed)
    grad_sup = float(np.max(np.linalg.norm(landscape.evaluate(inner_pts)[1], axis=1)))
    return LocalConstants(L, grad_sup, capture_constant(L, grad_sup, delta), float(delta), safety_factor)


# --------------------------------------------------------------------------
# Implication diagram
# --------------------------------------------------------------------------

K = ConditionKind
IMPLICATIONS = [
    (K.LRSI, K.NNS),
    (K.WQC, K.NNS),
    (K.LRSI, K.PL_STAR),
    (K.QC, K.WQC),
    (K.STAR_C, K.QC),
]
OPEN_PAIRS = [(K.QG_STAR, K.LRSI), (K.LRSI, K.WQC)]


@dataclass
class ImplicationRow:
    premise: ConditionKind
    conclusion: ConditionKind
    status: str  # consistent | inconsistent | premise_false | not_applicable | unconstrained

    def to_dict(self):
        return {"premise": self.premise.value, "conclusion": self.conclusion.value, "status": self.status}


@dataclass
class ImplicationMatrix:
    reports: dict
    rows: list = field(default_factory=list)

    @property
    def consistent(self) -> bool:
        return not any(row.status == "inconsistent" for row in self.rows)

    def to_dict(self):
        return {
            "consistent": self.consistent,
            "reports": {k.value: r.to_dict() for k, r in self.reports.items()},
            "implications": [row.to_dict() for row in self.rows],
        }


def applicable_kinds(landscape: Landscape, spec: NeighborhoodSpec):
    kinds = [K.LRSI, K.PL_STAR, K.QG_STAR, K.WQC]
    if landscape.has_support:
        kinds.append(K.NNS)
    if isinstance(spec.minima_set, Point):
        kinds += [K.QC, K.STAR_C]
    return kinds


def implication_matrix(
    landscape: Landscape, spec: NeighborhoodSpec, samples: int = 10_000, seed: int = 0
) -> ImplicationMatrix:
    """Run every applicable check and test the diagram's arrows on the evidence.

    An arrow whose premise holds but whose conclusion fails is flagged
    ``inconsistent``; that indicates a checker defect rather than a
    mathematical counterexample.  The two relations the diagram leaves open
    are listed as ``unconstrained``.
    """
    reports = {
        kind: check_condition(landscape, spec, kind, samples, seed)
        for kind in applicable_kinds(landscape, spec)
    }
    rows = []
    for a, b in IMPLICATIONS:
        if a not in reports or b not in reports:
            status = "not_applicable"
        elif not reports[a].holds:
            status = "premise_false"
        else:
            status = "consistent" if reports[b].holds else "inconsistent"
        rows.append(ImplicationRow(a, b, status))
    rows += [ImplicationRow(a, b, "unconstrained") for a, b in OPEN_PAIRS]
    return ImplicationMatrix(reports, rows)
