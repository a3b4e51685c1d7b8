"""SGD iterations with batch noise, learning-rate schedules and stopped-process bookkeeping.

Trajectories start at ``x_1`` and run ``x_{n+1} = x_n - a_n (grad f(x_n) + xi_n)``
for ``n = 1 .. N-1``, producing the states ``x_1 .. x_N``.  The exit time
``tau`` is the first ``n >= 2`` with ``dist(x_n, X) > r``; from then on the
recorded state is frozen at ``x_tau`` so that every trajectory has length N.

Randomness: each trajectory owns a PCG64 stream derived from
``SeedSequence(master_seed, spawn_key=(index,))``.  Per step, a Gaussian
model consumes ``I * d`` standard normals (batch member major), a finite-sum
model consumes ``I`` uniforms that select components.  Draws are taken in
blocks of steps, which yields the same numbers as drawing step by step, so
the batched simulator and :func:`run_trajectory` agree bit for bit and the
result does not depend on how trajectories are split across workers.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DomainError, ParameterError, TrajectoryAbort
from .landscapes import Landscape, NeighborhoodSpec, dist_and_project

NOISE_BLOCK = 256


# --------------------------------------------------------------------------
# Schedules
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Decreasing:
    """``a_n = a / n**beta`` with ``beta`` in (1/2, 1]."""

    a: float
    beta: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and self.a > 0):
            raise ParameterError(f"learning-rate scale must be positive, got {self.a}")
        if not (0.5 < self.beta <= 1.0):
            raise ParameterError(f"beta must lie in (1/2, 1], got {self.beta}")

    def rates(self, n_max: int):
        return self.a / np.arange(1, n_max + 1, dtype=float) ** self.beta

    def __call__(self, n: int) -> float:
        return float(self.rates(n)[-1])

    def to_dict(self):
        return {"type": "decreasing", "a": self.a, "beta": self.beta}


@dataclass(frozen=True)
class Constant:
    """``a_n = a``.  Violates square-summability, so finite horizons only.

    ``a = 0`` is accepted as a degenerate schedule (no movement).
    """

    a: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and self.a >= 0):
            raise ParameterError(f"constant learning rate must be non-negative, got {self.a}")

    def rates(self, n_max: int):
        return np.full(n_max, float(self.a))

    def __call__(self, n: int) -> float:
        return float(self.a)

    def to_dict(self):
        return {"type": "constant", "a": self.a}


Schedule = Union[Decreasing, Constant]


def schedule_from_dict(spec: dict) -> Schedule:
    kind = spec["type"]
    if kind == "decreasing":
        return Decreasing(float(spec["a"]), float(spec["beta"]))
    if kind == "constant":
        return Constant(float(spec["a"]))
    raise ParameterError(f"unknown schedule type {kind!r}")


# --------------------------------------------------------------------------
# Noise models
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianNoise:
    """Isotropic Gaussian gradient noise, ``E|xi|^2 = sigma^2 d`` per sample.

    With ``multiplicative=True`` the per-sample standard deviation is
    ``sigma * (1 + dist(x, X))``: bounded on every compact set but not
    globally.
    """

    sigma: float
    multiplicative: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise ParameterError(f"noise sigma must be non-negative, got {self.sigma}")

    def draw(self, rng, n_steps, batch_size, dim):
        return rng.standard_normal((n_steps, batch_size, dim))

    def realize(self, raw, X, grad, dist, landscape=None):
        scale = self.sigma
        if self.multiplicative:
            scale = self.sigma * (1.0 + dist)[:, None]
        return scale * raw.mean(axis=1)

    def second_moment_bound(self, radius: float, dim: int) -> float:
        """Declared ``sigma_r``: sup over ``N_r`` of the single-sample ``E|xi|^2``."""
        s2 = self.sigma**2 * dim
        return s2 * (1.0 + radius) ** 2 if self.multiplicative else s2

    def to_dict(self):
        return {"type": "gaussian", "sigma": self.sigma, "multiplicative": self.multiplicative}


@dataclass(frozen=True)
class FiniteSumNoise:
    """Noise from sampling one of ``K`` component gradients uniformly.

    Each component is a batched callable ``(m, d) -> (m, d)``; their mean
    must equal the landscape gradient.
    """

    components: tuple

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if not self.components:
            raise ParameterError("finite-sum noise needs at least one component")

    def draw(self, rng, n_steps, batch_size, dim):
        return rng.random((n_steps, batch_size))

    def realize(self, raw, X, grad, dist, landscape=None):
        k = len(self.components)
        idx = np.minimum((raw * k).astype(int), k - 1)      # (m, I)
        total = np.zeros_like(X)
        for j, comp in enumerate(self.components):
            counts = np.sum(idx == j, axis=1)
            rows = np.flatnonzero(counts)
            if rows.size:
                total[rows] += counts[rows, None] * np.asarray(comp(X[rows]), dtype=float)
        return total / raw.shape[1] - grad

    def second_moment_at(self, landscape: Landscape, P):
        grad = landscape.evaluate(P)[1]
        sq = [np.sum((np.asarray(c(P), dtype=float) - grad) ** 2, axis=1) for c in self.components]
        return np.mean(sq, axis=0)

    def estimate_second_moment(self, landscape, spec: NeighborhoodSpec, samples=2000, seed=0):
        from .conditions import sample_neighborhood

        return float(np.max(self.second_moment_at(landscape, sample_neighborhood(spec, samples, seed))))

    def to_dict(self):
        return {"type": "finite_sum", "components": len(self.components)}


NoiseModel = Union[GaussianNoise, FiniteSumNoise]


def noise_from_dict(spec: dict) -> NoiseModel:
    if spec["type"] == "gaussian":
        return GaussianNoise(float(spec["sigma"]), bool(spec.get("multiplicative", False)))
    raise ParameterError(f"noise type {spec['type']!r} cannot be built from JSON")


# --------------------------------------------------------------------------
# Configuration and trajectories
# --------------------------------------------------------------------------


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=(index,))))


@dataclass(frozen=True)
class SgdConfig:
    landscape: Landscape
    spec: NeighborhoodSpec
    schedule: Schedule
    noise: NoiseModel
    batch_size: int
    horizon: int
    x1: np.ndarray
    seed: int = 0

    def __post_init__(self):
        x1 = np.array(self.x1, dtype=float)
        if x1.shape != (self.landscape.dimension,):
            raise DomainError(f"x1 must have shape ({self.landscape.dimension},)")
        x1.setflags(write=False)
        object.__setattr__(self, "x1", x1)
        if self.batch_size < 1:
            raise ParameterError("batch size must be at least 1")
        if self.horizon < 1:
            raise ParameterError("horizon must be at least 1")
        if self.dist1 > self.spec.radius:
            raise ParameterError(
                f"x1 lies outside N_r: dist = {self.dist1:.6g} > r = {self.spec.radius:.6g}"
            )

    @property
    def dist1(self) -> float:
        return dist_and_project(self.x1, self.spec.minima_set).distance

    def sigma_r(self) -> float:
        """Single-sample second-moment bound of the noise over ``N_r``."""
        if isinstance(self.noise, GaussianNoise):
            return self.noise.second_moment_bound(self.spec.radius, self.landscape.dimension)
        return self.noise.estimate_second_moment(self.landscape, self.spec, seed=self.seed)

    def with_horizon(self, horizon: int) -> "SgdConfig":
        return _replace(self, horizon=int(horizon))

    def with_seed(self, seed: int) -> "SgdConfig":
        return _replace(self, seed=int(seed))


def _replace(cfg, **changes):
    from dataclasses import replace

    return replace(cfg, **changes)


@dataclass
class Trajectory:
    """Per-step records of one run; ``exit_time`` is None when the path stayed."""

    n: np.ndarray
    dist: np.ndarray
    gap: np.ndarray
    h: np.ndarray
    a: np.ndarray
    exit_time: Optional[int]
    stayed: bool
    final_x: np.ndarray
    left_validity: bool = False

    @property
    def stopped(self):
        if self.exit_time is None:
            return np.zeros(len(self.n), dtype=bool)
        return self.n > self.exit_time

    def write_csv(self, fh, header_comment: Optional[str] = None):
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "dist", "gap", "h", "a_n", "stopped_flag"])
        for row in zip(self.n, self.dist, self.gap, self.h, self.a, self.stopped):
            w.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2])),
                        repr(float(row[3])), repr(float(row[4])), int(row[5])])


@dataclass
class BatchRun:
    """Summary of many trajectories; ``exit_time == horizon + 1`` means never."""

    indices: np.ndarray
    horizon: int
    exit_time: np.ndarray
    min_h: np.ndarray
    horizons: tuple
    gap_at: np.ndarray
    final_x: np.ndarray
    left_validity: np.ndarray
    records: Optional[dict] = None

    @property
    def stayed(self):
        return self.exit_time > self.horizon

    def stayed_through(self, n: int):
        return self.exit_time > n

    @staticmethod
    def concat(parts: Sequence["BatchRun"]) -> "BatchRun":
        first = parts[0]
        recs = None
        if first.records is not None:
            recs = {k: np.concatenate([p.records[k] for p in parts]) for k in first.records}
        return BatchRun(
            np.concatenate([p.indices for p in parts]),
            first.horizon,
            np.concatenate([p.exit_time for p in parts]),
            np.concatenate([p.min_h for p in parts]),
            first.horizons,
            np.concatenate([p.gap_at for p in parts]),
            np.concatenate([p.final_x for p in parts]),
            np.concatenate([p.left_validity for p in parts]),
            recs,
        )


def _support_or_proxy(landscape, P, value, grad, proj):
    h = landscape.support_values(P, value=value)
    if h is None:
        h = np.sum(grad * (P - proj), axis=1)
    return h


def simulate(
    config: SgdConfig,
    indices: Sequence[int],
    *,
    horizons: Sequence[int] = (),
    record: bool = False,
) -> BatchRun:
    """Run the trajectories with the given stream indices side by side."""
    indices = np.asarray(indices, dtype=np.int64)
    land, X_set, r = config.landscape, config.spec.minima_set, config.spec.radius
    N, I, d = config.horizon, config.batch_size, land.dimension
    horizons = tuple(int(h) for h in horizons)
    if any(h < 1 or h > N for h in horizons):
        raise ParameterError(f"horizons must lie in [1, {N}]")
    M = len(indices)
    rates = config.schedule.rates(N)
    gens = [trajectory_rng(config.seed, int(i)) for i in indices]

    X = np.tile(config.x1, (M, 1))
    active = np.ones(M, dtype=bool)
    exit_time = np.full(M, N + 1, dtype=np.int64)
    min_h = np.full(M, np.inf)
    gap_at = np.zeros((M, len(horizons)))
    left = np.zeros(M, dtype=bool)
    recs = {k: np.empty((M, N)) for k in ("dist", "gap", "h")} if record else None
    horizon_slot = {h: k for k, h in enumerate(horizons)}
    raw_block, block_pos = None, 0

    for n in range(1, N + 1):
        value, grad, dist, proj, _ = land.evaluate(X)
        bad = active & ~np.all(np.isfinite(grad), axis=1)
        if np.any(bad):
            j = int(np.flatnonzero(bad)[0])
            raise TrajectoryAbort(
                f"non-finite gradient in trajectory {indices[j]} at step {n} (x = {X[j]})",
                index=int(indices[j]), step=n,
            )
        gap = value - land.f_star
        h = _support_or_proxy(land, X, value, grad, proj)
        if n >= 2:
            newly = active & (dist > r)
            exit_time[newly] = n
            active &= ~newly
        left |= dist > land.validity_radius
        np.minimum(min_h, h, out=min_h)
        if record:
            recs["dist"][:, n - 1] = dist
            recs["gap"][:, n - 1] = gap
            recs["h"][:, n - 1] = h
        if n in horizon_slot:
            gap_at[:, horizon_slot[n]] = gap
        if n == N:
            break
        if raw_block is None or block_pos == len(raw_block):
            size = min(NOISE_BLOCK, N - n)
            raw_block = [config.noise.draw(g, size, I, d) for g in gens]
            raw_block = np.stack(raw_block, axis=1)        # (steps, M, ...)
            block_pos = 0
        raw = raw_block[block_pos]
        block_pos += 1
        xi = config.noise.realize(raw, X, grad, dist, land)
        with np.errstate(over="ignore", invalid="ignore"):
            moved = X - rates[n - 1] * (grad + xi)
        X = np.where(active[:, None], moved, X)

    return BatchRun(indices, N, exit_time, min_h, horizons, gap_at, X, left, recs)


def simulate_many(
    config: SgdConfig,
    n_trajectories: int,
    *,
    horizons: Sequence[int] = (),
    workers: int = 1,
    chunk: int = 2048,
) -> BatchRun:
    """Run trajectories ``0 .. n-1``, optionally across a thread pool.

    Results are identical for any ``workers``/``chunk`` because every
    trajectory draws from its own stream.
    """
    idx = np.arange(n_trajectories)
    pieces = [idx[i:i + chunk] for i in range(0, n_trajectories, chunk)]
    if workers <= 1 or len(pieces) == 1:
        parts = [simulate(config, p, horizons=horizons) for p in pieces]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda p: simulate(config, p, horizons=horizons), pieces))
    return BatchRun.concat(parts)


def run_trajectory(config: SgdConfig, index: int = 0) -> Trajectory:
    """Run one trajectory and keep every per-step record."""
    run = simulate(config, [index], record=True)
    N = config.horizon
    tau = int(run.exit_time[0])
    return Trajectory(
        n=np.arange(1, N + 1),
        dist=run.records["dist"][0],
        gap=run.records["gap"][0],
        h=run.records["h"][0],
        a=config.schedule.rates(N),
        exit_time=None if tau > N else tau,
        stayed=tau > N,
        final_x=run.final_x[0],
        left_validity=bool(run.left_validity[0]),
    )


def sgd_step(x, landscape: Landscape, noise: NoiseModel, a_n: float, batch_size: int, rng):
    """One SGD update with the batch-averaged noise of ``batch_size`` draws."""
    if not a_n >= 0:
        raise ParameterError(f"learning rate must be non-negative, got {a_n}")
    if batch_size < 1:
        raise ParameterError("batch size must be at least 1")
    X = np.atleast_2d(np.asarray(x, dtype=float))
    value, grad, dist, _, _ = landscape.evaluate(X)
    if not np.all(np.isfinite(grad)):
        raise TrajectoryAbort(f"non-finite gradient at x = {X[0]}")
    raw = noise.draw(rng, 1, batch_size, landscape.dimension)
    xi = noise.realize(raw, X, grad, dist, landscape)
    return (X - a_n * (grad + xi))[0]


# --------------------------------------------------------------------------
# One-step supermartingale probe
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeResult:
    lhs_estimate: float
    rhs: float
    margin: float
    stderr: float


def supermartingale_probe(
    landscape: Landscape,
    spec: NeighborhoodSpec,
    x,
    noise: NoiseModel,
    batch_size: int,
    a_n: float,
    L_r: float,
    sigma_r: float,
    m: int = 100_000,
    seed: int = 0,
) -> ProbeResult:
    """Monte Carlo check of the one-step distance recursion at ``x``.

    Compares ``E[dist(x', X)^2]`` with
    ``(1 + L^2 a^2) dist^2 - 2 a (grad f, x - x_p) + (sigma_r / I) a^2``.
    """
    if m < 100:
        raise ParameterError(f"need m >= 100 one-step samples, got {m}")
    x = np.asarray(x, dtype=float)
    res = dist_and_project(x, spec.minima_set)
    if res.distance > spec.radius:
        raise ParameterError("probe state must lie in N_r(X)")
    rng = np.random.default_rng(seed)
    X = np.tile(x, (m, 1))
    value, grad, dist, proj, _ = landscape.evaluate(X)
    raw = noise.draw(rng, m, batch_size, landscape.dimension)
    xi = noise.realize(raw, X, grad, dist, landscape)
    X_next = X - a_n * (grad + xi)
    d2 = spec.minima_set.project_batch(X_next)[0] ** 2
    lhs = float(np.mean(d2))
    stderr = float(np.std(d2, ddof=1) / math.sqrt(m))
    inner = float(grad[0] @ (x - res.projection))
    rhs = (1.0 + L_r**2 * a_n**2) * res.distance**2 - 2.0 * a_n * inner + sigma_r / batch_size * a_n**2
    return ProbeResult(lhs, float(rhs), float(rhs - lhs), stderr)
