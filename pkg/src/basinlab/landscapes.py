"""Loss landscapes with an exactly known set of global minima.

A landscape couples a loss ``f`` with its compact minima set ``X``.  The
minima sets know how to compute the Euclidean distance and the metric
projection of a point, so everything downstream (convexity checks, SGD
bookkeeping, bound inputs) can work with ``dist(x, X)`` and ``x_p`` exactly
rather than through an inner optimization.

All array-valued helpers come in a batched form operating on ``(m, d)``
arrays; the scalar entry points (:func:`dist_and_project`,
:func:`oracle_eval`) wrap them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import DomainError, ParameterError, RegionError

# Relative tolerance for declaring two candidate projections equidistant.
TIE_RTOL = 1e-12


def _as_vector(x, name="x"):
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        raise DomainError(f"{name} must be a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DomainError(f"{name} has non-finite entries")
    return v


def _frozen(v):
    v = np.array(v, dtype=float)
    v.setflags(write=False)
    return v


def _row_norms(P):
    # rescale by the largest entry so tiny or huge rows do not under/overflow
    scale = np.max(np.abs(P), axis=-1)
    safe = np.where(scale > 0.0, scale, 1.0)
    Q = P / np.expand_dims(safe, -1)
    return scale * np.sqrt(np.sum(Q * Q, axis=-1))


def _lexmin_rows(rows):
    """Index of the lexicographically smallest row of a 2-D array."""
    order = np.lexsort(rows.T[::-1])
    return int(order[0])


# --------------------------------------------------------------------------
# Minima sets
# --------------------------------------------------------------------------


class MinimaSet:
    """Compact set of global minimizers with an exact metric projection."""

    dim: int

    @property
    def manifold_dim(self) -> int:
        raise NotImplementedError

    def project_batch(self, P):
        """Return ``(dist, proj, unique)`` for each row of ``P``."""
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int):
        """Draw ``n`` points on the set."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Point(MinimaSet):
    center: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(_as_vector(self.center, "center")))

    @property
    def dim(self):
        return self.center.shape[0]

    @property
    def manifold_dim(self):
        return 0

    def project_batch(self, P):
        P = np.atleast_2d(P)
        proj = np.broadcast_to(self.center, P.shape).copy()
        return _row_norms(P - self.center), proj, np.ones(len(P), dtype=bool)

    def sample(self, rng, n):
        return np.broadcast_to(self.center, (n, self.dim)).copy()

    def to_dict(self):
        return {"type": "point", "center": self.center.tolist()}


@dataclass(frozen=True)
class Sphere(MinimaSet):
    """Sphere of codimension one, ``{z : |z - center| = radius}``."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(_as_vector(self.center, "center")))
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ParameterError(f"sphere radius must be positive, got {self.radius}")
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self):
        return self.center.shape[0]

    @property
    def manifold_dim(self):
        return self.dim - 1

    def project_batch(self, P):
        P = np.atleast_2d(P)
        diff = P - self.center
        rho = _row_norms(diff)
        at_center = rho == 0.0
        safe = np.where(at_center, 1.0, rho)
        proj = self.center + self.radius * diff / safe[:, None]
        if np.any(at_center):
            # every point of the sphere is a minimizer; canonical pick is +e_1
            canon = self.center.copy()
            canon[0] += self.radius
            proj[at_center] = canon
        return np.abs(rho - self.radius), proj, ~at_center

    def sample(self, rng, n):
        g = rng.standard_normal((n, self.dim))
        norms = _row_norms(g)
        # a zero Gaussian draw has probability zero but would divide by zero
        norms[norms == 0.0] = 1.0
        return self.center + self.radius * g / norms[:, None]

    def to_dict(self):
        return {"type": "sphere", "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True)
class Segment(MinimaSet):
    start: np.ndarray
    end: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "start", _frozen(_as_vector(self.start, "start")))
        object.__setattr__(self, "end", _frozen(_as_vector(self.end, "end")))
        if self.start.shape != self.end.shape:
            raise ParameterError("segment endpoints differ in dimension")
        if np.array_equal(self.start, self.end):
            raise ParameterError("segment endpoints coincide; use Point")

    @property
    def dim(self):
        return self.start.shape[0]

    @property
    def manifold_dim(self):
        return 1

    def project_batch(self, P):
        # a segment is convex, so the projection is always unique
        P = np.atleast_2d(P)
        direction = self.end - self.start
        t = (P - self.start) @ direction / float(direction @ direction)
        t = np.clip(t, 0.0, 1.0)
        proj = self.start + t[:, None] * direction
        return _row_norms(P - proj), proj, np.ones(len(P), dtype=bool)

    def sample(self, rng, n):
        t = rng.random(n)
        return self.start + t[:, None] * (self.end - self.start)

    def to_dict(self):
        return {"type": "segment", "start": self.start.tolist(), "end": self.end.tolist()}


@dataclass(frozen=True)
class FiniteUnion(MinimaSet):
    parts: tuple

    def __post_init__(self):
        parts = tuple(self.parts)
        if not parts:
            raise ParameterError("FiniteUnion needs at least one component")
        dims = {p.dim for p in parts}
        if len(dims) != 1:
            raise ParameterError(f"FiniteUnion components disagree on dimension: {dims}")
        object.__setattr__(self, "parts", parts)

    @property
    def dim(self):
        return self.parts[0].dim

    @property
    def manifold_dim(self):
        return max(p.manifold_dim for p in self.parts)

    def project_batch(self, P):
        P = np.atleast_2d(P)
        results = [p.project_batch(P) for p in self.parts]
        dists = np.stack([r[0] for r in results])          # (k, m)
        projs = np.stack([r[1] for r in results])          # (k, m, d)
        uniq = np.stack([r[2] for r in results])           # (k, m)
        best = np.argmin(dists, axis=0)
        cols = np.arange(P.shape[0])
        dmin = dists[best, cols]
        tied = dists <= dmin + TIE_RTOL * (1.0 + dmin)
        n_tied = tied.sum(axis=0)
        proj = projs[best, cols].copy()
        unique = uniq[best, cols] & (n_tied == 1)
        for i in np.flatnonzero(n_tied > 1):
            cands = projs[tied[:, i], i]
            if np.allclose(cands, cands[0], rtol=0, atol=TIE_RTOL * (1 + dmin[i])):
                # components touching at the same point still give one minimizer
                unique[i] = bool(np.all(uniq[tied[:, i], i]))
            proj[i] = cands[_lexmin_rows(cands)]
        return dmin, proj, unique

    def sample(self, rng, n):
        which = rng.integers(0, len(self.parts), size=n)
        out = np.empty((n, self.dim))
        for k, part in enumerate(self.parts):
            sel = which == k
            if np.any(sel):
                out[sel] = part.sample(rng, int(sel.sum()))
        return out

    def to_dict(self):
        return {"type": "union", "parts": [p.to_dict() for p in self.parts]}


def minima_set_from_dict(spec: dict) -> MinimaSet:
    """Build a minima set from its JSON record."""
    kind = spec["type"]
    if kind == "point":
        return Point(spec["center"])
    if kind == "sphere":
        return Sphere(spec["center"], spec["radius"])
    if kind == "segment":
        return Segment(spec["start"], spec["end"])
    if kind == "union":
        return FiniteUnion(tuple(minima_set_from_dict(p) for p in spec["parts"]))
    raise ParameterError(f"unknown minima set type {kind!r}")


@dataclass(frozen=True)
class ProjectionResult:
    distance: float
    projection: np.ndarray
    unique: bool


def dist_and_project(x, X: MinimaSet) -> ProjectionResult:
    """Distance from ``x`` to ``X`` and a metric projection onto it.

    When the projection is not unique (the center of a sphere, a point
    equidistant from two components of a union) ``unique`` is False and a
    canonical minimizer is returned: ``center + radius * e_1`` for a sphere,
    the lexicographically smallest tied candidate for a union.
    """
    v = _as_vector(x)
    if v.shape[0] != X.dim:
        raise DomainError(f"x has dimension {v.shape[0]}, minima set has {X.dim}")
    d, p, u = X.project_batch(v[None, :])
    return ProjectionResult(float(d[0]), p[0], bool(u[0]))


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Closed neighborhood ``N_r(X) = {x : dist(x, X) <= r}``."""

    radius: float
    minima_set: MinimaSet

    def __post_init__(self):
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ParameterError(f"neighborhood radius must be positive, got {self.radius}")
        object.__setattr__(self, "radius", float(self.radius))

    def contains(self, x) -> bool:
        return dist_and_project(x, self.minima_set).distance <= self.radius

    def widened(self, delta: float) -> "NeighborhoodSpec":
        return NeighborhoodSpec(self.radius + delta, self.minima_set)


# --------------------------------------------------------------------------
# Landscape families
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PowerBasin:
    """``f(x) = scale * dist(x, X)**degree`` (flat for degree > 2)."""

    degree: float
    scale: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.degree) or self.degree < 2:
            raise ParameterError(f"PowerBasin degree must be >= 2, got {self.degree}")
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ParameterError(f"PowerBasin scale must be positive, got {self.scale}")

    @property
    def support_zeta(self) -> float:
        # (grad f, x - x_p) = degree * (f - f*), so the quasar constant clips to 1
        return min(1.0, float(self.degree))


@dataclass(frozen=True)
class Custom:
    """User-supplied loss.

    ``value`` and ``gradient`` take a single vector unless ``batched`` is
    True, in which case they take an ``(m, d)`` array.  ``support`` is the
    optional non-negative support function used for the NNS check and for
    recording ``h`` along trajectories.
    """

    value: Callable
    gradient: Callable
    support: Optional[Callable] = None
    batched: bool = False


Family = Union[PowerBasin, Custom]


@dataclass(frozen=True)
class Landscape:
    """A loss with an explicitly represented compact minima set.

    Immutable; safe to share between threads.
    """

    dimension: int
    minima_set: MinimaSet
    family: Family
    f_star: float = 0.0
    validity_radius: float = float("inf")

    def __post_init__(self):
        if self.dimension < 1:
            raise ParameterError("dimension must be a positive integer")
        if self.minima_set.dim != self.dimension:
            raise ParameterError(
                f"minima set lives in R^{self.minima_set.dim}, landscape in R^{self.dimension}"
            )
        if not self.validity_radius > 0:
            raise ParameterError("validity radius must be positive")

    @property
    def has_support(self) -> bool:
        return isinstance(self.family, PowerBasin) or self.family.support is not None

    def evaluate(self, P):
        """Values, gradients, distances and projections for rows of ``P``.

        No region check; callers wanting one use :func:`oracle_eval`.
        """
        P = np.atleast_2d(np.asarray(P, dtype=float))
        dist, proj, unique = self.minima_set.project_batch(P)
        fam = self.family
        if isinstance(fam, PowerBasin):
            q, c = fam.degree, fam.scale
            value = self.f_star + c * dist**q
            # c*q*dist^(q-1) * (x - x_p)/dist, written without the division
            grad = (c * q * np.power(dist, q - 2.0))[:, None] * (P - proj)
        elif fam.batched:
            value = np.asarray(fam.value(P), dtype=float).reshape(len(P))
            grad = np.asarray(fam.gradient(P), dtype=float).reshape(P.shape)
        else:
            value = np.array([float(fam.value(p)) for p in P])
            grad = np.array([np.asarray(fam.gradient(p), dtype=float) for p in P])
        return value, grad, dist, proj, unique

    def support_values(self, P, value=None, grad=None, dist=None, proj=None):
        """Support function ``h`` at rows of ``P``, or None if none is registered."""
        fam = self.family
        if isinstance(fam, PowerBasin):
            if value is None:
                value = self.evaluate(P)[0]
            return fam.support_zeta * (value - self.f_star)
        if fam.support is None:
            return None
        P = np.atleast_2d(P)
        if fam.batched:
            return np.asarray(fam.support(P), dtype=float).reshape(len(P))
        return np.array([float(fam.support(p)) for p in P])

    def value(self, x) -> float:
        return float(self.evaluate(np.asarray(x, dtype=float)[None, :])[0][0])

    def to_dict(self) -> dict:
        if not isinstance(self.family, PowerBasin):
            raise ParameterError("only PowerBasin landscapes serialize to JSON")
        return {
            "family": "PowerBasin",
            "degree": self.family.degree,
            "scale": self.family.scale,
            "minima_set": self.minima_set.to_dict(),
            "validity_radius": self.validity_radius,
        }


def oracle_eval(landscape: Landscape, x, *, strict: bool = True):
    """Return ``(f(x), grad f(x))``.

    With ``strict`` (the default) a point farther than the landscape's
    validity radius from ``X`` raises :class:`RegionError`.
    """
    v = _as_vector(x)
    if v.shape[0] != landscape.dimension:
        raise DomainError(f"x has dimension {v.shape[0]}, landscape has {landscape.dimension}")
    value, grad, dist, _, _ = landscape.evaluate(v[None, :])
    if strict and dist[0] > landscape.validity_radius:
        raise RegionError(
            f"dist(x, X) = {dist[0]:.6g} exceeds validity radius {landscape.validity_radius:.6g}"
        )
    return float(value[0]), grad[0]


def gradient_fd(landscape: Landscape, x, step=None):
    """Central-difference gradient with step ``1e-6 * (1 + |x|)`` by default."""
    v = _as_vector(x)
    h = 1e-6 * (1.0 + np.linalg.norm(v)) if step is None else float(step)
    if h <= 0:
        raise ParameterError("finite-difference step must be positive")
    d = v.shape[0]
    E = np.eye(d) * h
    stencil = np.concatenate([v + E, v - E])
    f = landscape.evaluate(stencil)[0]
    return (f[:d] - f[d:]) / (2.0 * h)


def hessian_fd(landscape: Landscape, x, step=None):
    """Symmetrized second-order central-difference Hessian from function values.

    Default step is ``1e-4 * (1 + |x|)``.
    """
    v = _as_vector(x)
    h = 1e-4 * (1.0 + np.linalg.norm(v)) if step is None else step
    if not h > 0:
        raise ParameterError(f"Hessian step must be positive, got {step}")
    h = float(h)
    d = v.shape[0]
    E = np.eye(d) * h
    # stencil: f(x + s_i e_i + s_j e_j) for s in {+,-}
    pp = v[None, None, :] + E[:, None, :] + E[None, :, :]
    pm = v[None, None, :] + E[:, None, :] - E[None, :, :]
    mp = v[None, None, :] - E[:, None, :] + E[None, :, :]
    mm = v[None, None, :] - E[:, None, :] - E[None, :, :]
    pts = np.concatenate([a.reshape(d * d, d) for a in (pp, pm, mp, mm)])
    f = landscape.evaluate(pts)[0].reshape(4, d, d)
    H = (f[0] - f[1] - f[2] + f[3]) / (4.0 * h * h)
    return 0.5 * (H + H.T)


# --------------------------------------------------------------------------
# Construction
# --------------------------------------------------------------------------


def sample_shell(X: MinimaSet, rng, n, r_min, r_max):
    """Points ``z + t*u`` with ``z`` on ``X``, ``t ~ U[r_min, r_max]``, ``u`` uniform direction."""
    z = X.sample(rng, n)
    t = rng.uniform(r_min, r_max, size=n)
    u = rng.standard_normal((n, X.dim))
    u /= _row_norms(u)[:, None]
    return z + t[:, None] * u


def gradient_self_check(landscape: Landscape, n_points=100, seed=0, rtol=1e-5):
    """Compare the declared gradient with central differences.

    Points sit at distance between 5% and 100% of ``min(validity_radius, 1)``
    from ``X``.  Points whose finite-difference stencil straddles a jump of the
    projection (a non-smooth point of ``dist``) are skipped.  Returns the
    largest relative error observed.
    """
    rng = np.random.default_rng(seed)
    reach = min(landscape.validity_radius, 1.0)
    pts = sample_shell(landscape.minima_set, rng, n_points, 0.05 * reach, reach)
    worst = 0.0
    for x in pts:
        h = 1e-6 * (1.0 + np.linalg.norm(x))
        d = len(x)
        stencil = np.concatenate([x + np.eye(d) * h, x - np.eye(d) * h])
        _, proj_c, uniq_c = landscape.minima_set.project_batch(x[None, :])
        _, proj_s, uniq_s = landscape.minima_set.project_batch(stencil)
        if not (uniq_c[0] and uniq_s.all()):
            continue
        if np.max(_row_norms(proj_s - proj_c[0])) > 1e-3 * (1.0 + np.linalg.norm(x)):
            continue
        _, g = oracle_eval(landscape, x, strict=False)
        g_fd = gradient_fd(landscape, x, step=h)
        denom = max(np.linalg.norm(g), np.linalg.norm(g_fd), 1e-10)
        worst = max(worst, float(np.linalg.norm(g - g_fd) / denom))
    if worst >= rtol:
        raise ParameterError(
            f"declared gradient disagrees with finite differences (rel. error {worst:.3g})"
        )
    return worst


def make_landscape(spec: dict, neighborhood_radius: Optional[float] = None) -> Landscape:
    """Build a landscape from a configuration record and self-check its gradient.

    Recognized keys: ``family`` (``"PowerBasin"``), ``degree`` (alias ``q``),
    ``scale`` (alias ``C``), ``minima_set`` (alias ``X``; a dict or a
    :class:`MinimaSet`), optional ``dimension`` (alias ``d``), ``f_star`` and
    ``validity_radius``.  Without an explicit validity radius it defaults to
    ten times ``neighborhood_radius`` when that is given.
    """
    family = spec.get("family", "PowerBasin")
    if family != "PowerBasin":
        raise ParameterError(f"unknown landscape family {family!r}; build Custom directly")
    X = spec.get("minima_set", spec.get("X"))
    if X is None:
        raise ParameterError("landscape spec needs a minima_set")
    if isinstance(X, dict):
        X = minima_set_from_dict(X)
    dim = spec.get("dimension", spec.get("d", X.dim))
    degree = spec.get("degree", spec.get("q"))
    if degree is None:
        raise ParameterError("PowerBasin needs a degree")
    basin = PowerBasin(float(degree), float(spec.get("scale", spec.get("C", 1.0))))
    validity = spec.get("validity_radius")
    if validity is None:
        validity = 10.0 * neighborhood_radius if neighborhood_radius else float("inf")
    land = Landscape(int(dim), X, basin, float(spec.get("f_star", 0.0)), float(validity))
    gradient_self_check(land, seed=int(spec.get("check_seed", 0)))
    return land


def circle_basin(degree=2.0, scale=1.0, radius=1.0, validity_radius=float("inf")) -> Landscape:
    """PowerBasin around the circle of the given radius centred at the origin in R^2."""
    return Landscape(
        2, Sphere(np.zeros(2), radius), PowerBasin(degree, scale), 0.0, validity_radius
    )
