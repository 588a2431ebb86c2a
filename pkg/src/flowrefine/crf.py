"""Flow-field smoothing as a continuous random field over per-point
displacement vectors, solved by mean-field iteration.

The energy combines three terms for a flow Y given an initial estimate Z:

  unary       sum_i ||y_i - z_i||^2
  pairwise    sum_{i, j in N(i)} sum_c alpha_c K_c(i, j) ||y_i - y_j||^2
              with Gaussian kernels K_c(i, j) = exp(-||k_i - k_j||^2 / (2 theta_c^2))
              over per-point observations (positions, normals)
  region      sum_i beta ||y_i - g_i||^2, where g_i is the displacement at
              p_i under the best rigid fit to the current flow of point i's
              region, excluding point i itself

Each mean-field update combines the three pulls in closed form; the
per-point Gaussian variance depends only on kernel sums, so it is constant
across iterations. The default region path fits one rigid transform per
region on all members and evaluates it at each member, which matches the
exact leave-one-out fit to O(1/|V|); set exact_leave_one_out for the
validation-grade per-point refits.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .geometry import _as_points, as_flow, knn_search, NormalField
from .rigidfit import kabsch_fit, rigid_flow_at
from .supervoxel import SupervoxelPartition

REGION_TERM_RIGID = "rigid"
REGION_TERM_MEAN = "mean"

_OBSERVATIONS = ("position", "normal")


@dataclass(frozen=True)
class KernelSpec:
    """One Gaussian smoothness kernel: weight alpha, bandwidth theta, and the
    per-point observation it compares ("position" or "normal")."""

    alpha: float
    theta: float
    observation: str

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("kernel alpha must be >= 0")
        if self.theta <= 0:
            raise ValueError("kernel theta must be > 0")
        if self.observation not in _OBSERVATIONS:
            raise ValueError(f"unknown observation '{self.observation}'")


@dataclass(frozen=True)
class CrfConfig:
    """Solver configuration.

    region_term selects the high-order pull: "rigid" fits a rigid transform
    per region, "mean" uses the plain region-average flow (ablation).
    """

    kernels: tuple[KernelSpec, ...] = (
        KernelSpec(alpha=0.1, theta=0.5, observation="position"),
        KernelSpec(alpha=0.1, theta=0.5, observation="normal"),
    )
    beta: float = 1.0
    knn_k: int = 8
    max_iterations: int = 10
    tolerance: float = 1e-5
    exact_leave_one_out: bool = False
    region_term: str = REGION_TERM_RIGID

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.region_term not in (REGION_TERM_RIGID, REGION_TERM_MEAN):
            raise ValueError(f"unknown region_term '{self.region_term}'")
        object.__setattr__(self, "kernels", tuple(self.kernels))


def pairwise_kernel(ki, kj, theta: float) -> np.ndarray:
    """Gaussian affinity exp(-||ki - kj||^2 / (2 theta^2)), broadcasting over
    leading axes; the last axis is the observation dimension."""
    if theta <= 0:
        raise ValueError("theta must be > 0")
    diff = np.asarray(ki, dtype=np.float64) - np.asarray(kj, dtype=np.float64)
    sq = np.einsum("...i,...i->...", diff, diff)
    return np.exp(-sq / (2.0 * theta * theta))


def unary_energy(y, z) -> float:
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if y.shape != z.shape:
        raise ValueError("unary terms need matching shapes")
    d = y - z
    return float(np.sum(d * d))


def pairwise_energy(yi, yj, weights) -> float:
    """Weighted squared difference sum for one ordered pair: each entry of
    `weights` is (alpha, kernel_value)."""
    yi = np.asarray(yi, dtype=np.float64)
    yj = np.asarray(yj, dtype=np.float64)
    d = yi - yj
    sq = float(d @ d)
    total = 0.0
    for alpha, k in weights:
        if alpha < 0 or k < 0 or k > 1:
            raise ValueError("weights must satisfy alpha >= 0 and 0 <= K <= 1")
        total += alpha * k * sq
    return total


def naive_region_flow(region_flows) -> np.ndarray:
    """Plain average flow of a region (the non-rigid ablation target)."""
    flows = np.asarray(region_flows, dtype=np.float64)
    if flows.ndim != 2 or flows.shape[1] != 3 or flows.shape[0] < 1:
        raise ValueError("region flows must be a non-empty (m, 3) array")
    return flows.mean(axis=0)


def highorder_energy(yi, pi, region_positions, region_flows, beta: float) -> float:
    """beta * ||y_i - g_i||^2 with g_i from the rigid fit to the rest of the
    region (positions/flows exclude point i)."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    pos = np.asarray(region_positions, dtype=np.float64)
    flo = np.asarray(region_flows, dtype=np.float64)
    if pos.shape != flo.shape or pos.ndim != 2 or pos.shape[0] < 1:
        raise ValueError("region positions/flows must be matching non-empty (m, 3) arrays")
    tf = kabsch_fit(pos, pos + flo)
    g = rigid_flow_at(tf, np.asarray(pi, dtype=np.float64))
    d = np.asarray(yi, dtype=np.float64) - g
    return float(beta * (d @ d))


def build_observations(cloud, normals: NormalField | None, config: CrfConfig) -> tuple[np.ndarray, ...]:
    """Per-kernel observation arrays, in kernel order."""
    pts = _as_points(cloud)
    obs = []
    for spec in config.kernels:
        if spec.observation == "position":
            obs.append(pts)
        else:
            if normals is None:
                raise ValueError("a normal kernel needs estimated normals")
            nrm = normals.normals if isinstance(normals, NormalField) else np.asarray(normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError("normals must align with points")
            obs.append(nrm)
    return tuple(obs)


def pairwise_neighbors(points, k: int) -> np.ndarray:
    """k nearest neighbors of each point among the other points of the same
    cloud (self excluded). Rows have min(k, n-1) columns."""
    pts = _as_points(points)
    n = pts.shape[0]
    keep = min(k, n - 1)
    if keep <= 0:
        return np.empty((n, 0), dtype=np.int64)
    nb = knn_search(pts, pts, min(k + 1, n))
    # stable argsort pushes the self index (if present) to the end of the row
    order = np.argsort(nb == np.arange(n)[:, None], axis=1, kind="stable")
    return np.take_along_axis(nb, order, axis=1)[:, :keep]


@dataclass(frozen=True)
class CrfProblem:
    """Preprocessed inputs: neighbor graph and kernel weights are fixed for
    the whole solve; only the flow means move."""

    positions: np.ndarray
    initial_flow: np.ndarray
    config: CrfConfig
    partition: SupervoxelPartition | None
    neighbors: np.ndarray | None
    kernel_weights: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class MeanFieldState:
    """Per-point Gaussian beliefs: means (n, 3) and isotropic variances (n,)."""

    mu: np.ndarray
    sigma: np.ndarray
    iteration: int = 0


def prepare_problem(cloud, initial_flow, partition: SupervoxelPartition | None,
                    observations, config: CrfConfig) -> CrfProblem:
    """Validate shapes, build the neighbor graph, and bake kernel weights."""
    pts = _as_points(cloud)
    n = pts.shape[0]
    z = as_flow(initial_flow, n=n)
    if partition is not None and len(partition) != n:
        raise ValueError("partition does not cover the cloud")
    if config.beta > 0 and partition is None:
        raise ValueError("beta > 0 needs a region partition")
    observations = tuple(np.asarray(o, dtype=np.float64) for o in observations)
    if len(observations) != len(config.kernels):
        raise ValueError(f"need {len(config.kernels)} observation arrays, got {len(observations)}")
    for o in observations:
        if o.ndim != 2 or o.shape[0] != n:
            raise ValueError("each observation array must be (n, d)")

    neighbors = None
    weights: tuple[np.ndarray, ...] = ()
    if any(spec.alpha > 0 for spec in config.kernels) and n > 1:
        neighbors = pairwise_neighbors(pts, config.knn_k)
        weights = tuple(
            pairwise_kernel(obs[:, None, :], obs[neighbors], spec.theta)
            for spec, obs in zip(config.kernels, observations)
        )
    return CrfProblem(positions=pts, initial_flow=z, config=config,
                      partition=partition, neighbors=neighbors, kernel_weights=weights)


def init_state(problem: CrfProblem) -> MeanFieldState:
    """Means start at the initial flow; variances at the unary-only value."""
    n = len(problem)
    return MeanFieldState(mu=problem.initial_flow.copy(), sigma=np.full(n, 0.5), iteration=0)


def _region_rigid_pull(positions, destinations, partition, exact: bool):
    """Rigid-consistent displacement per point.

    Approximate path: one fit per region evaluated at every member. Exact
    path: refit per point with that point left out (single-point regions get
    a zero pull). Returns (g, fit_count).
    """
    g = np.zeros_like(positions)
    fits = 0
    for idx in partition.regions:
        p = positions[idx]
        d = destinations[idx]
        if exact:
            if idx.size == 1:
                continue
            for local, i in enumerate(idx):
                rest = np.delete(np.arange(idx.size), local)
                tf = kabsch_fit(p[rest], d[rest])
                g[i] = rigid_flow_at(tf, positions[i])
                fits += 1
        else:
            tf = kabsch_fit(p, d)
            g[idx] = rigid_flow_at(tf, p)
            fits += 1
    return g, fits


def _region_mean_pull(mu, partition):
    """Region-average displacement per point (ablation)."""
    g = np.empty_like(mu)
    for idx in partition.regions:
        g[idx] = naive_region_flow(mu[idx])
    return g


def mean_field_step(state: MeanFieldState, problem: CrfProblem,
                    timings: dict | None = None) -> MeanFieldState:
    """One synchronous update of all beliefs.

    New mean: (z + 2 sum_c alpha_c Ktilde_c + beta g) / (1 + 2 sum_c alpha_c
    Ksum_c + beta), where Ktilde_c is the kernel-weighted neighbor mean sum
    and g the region pull. New variance: 1 / (2 * that denominator).
    """
    cfg = problem.config
    z = problem.initial_flow
    mu = state.mu
    n = len(problem)

    # extreme weights may overflow; the finiteness check below turns that
    # into a typed error, so the transient floating-point warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        t0 = time.perf_counter()
        pair_lin = np.zeros_like(mu)
        pair_sum = np.zeros(n)
        for spec, kw in zip(cfg.kernels, problem.kernel_weights):
            if spec.alpha == 0 or problem.neighbors is None:
                continue
            pair_lin += spec.alpha * np.einsum("nk,nkj->nj", kw, mu[problem.neighbors])
            pair_sum += spec.alpha * kw.sum(axis=1)
        t1 = time.perf_counter()

        if cfg.beta > 0 and problem.partition is not None:
            if cfg.region_term == REGION_TERM_MEAN:
                g = _region_mean_pull(mu, problem.partition)
            else:
                g, _ = _region_rigid_pull(problem.positions, problem.positions + mu,
                                          problem.partition, cfg.exact_leave_one_out)
            region = cfg.beta * g
            denom_beta = cfg.beta
        else:
            region = 0.0
            denom_beta = 0.0
        t2 = time.perf_counter()

        denom = 1.0 + 2.0 * pair_sum + denom_beta
        mu_new = (z + 2.0 * pair_lin + region) / denom[:, None]
        sigma = 1.0 / (2.0 * denom)
    if timings is not None:
        timings["pairwise_s"] = timings.get("pairwise_s", 0.0) + (t1 - t0)
        timings["highorder_s"] = timings.get("highorder_s", 0.0) + (t2 - t1)
    if not np.isfinite(mu_new).all():
        raise NumericalError(f"non-finite mean-field state at iteration {state.iteration + 1}")
    return MeanFieldState(mu=mu_new, sigma=sigma, iteration=state.iteration + 1)


@dataclass(frozen=True)
class RefineResult:
    """Refined flow plus convergence and timing facts."""

    flow: np.ndarray
    iterations: int
    final_delta: float
    converged: bool
    pairwise_ms: float
    highorder_ms: float


def refine(cloud, initial_flow, partition: SupervoxelPartition | None,
           observations, config: CrfConfig) -> RefineResult:
    """Run mean-field updates from the initial flow until the largest
    per-point mean change drops below config.tolerance or max_iterations is
    reached."""
    problem = prepare_problem(cloud, initial_flow, partition, observations, config)
    state = init_state(problem)
    timings: dict = {}
    delta = np.inf
    converged = False
    for _ in range(config.max_iterations):
        new = mean_field_step(state, problem, timings)
        delta = float(np.max(np.linalg.norm(new.mu - state.mu, axis=1)))
        state = new
        if delta < config.tolerance:
            converged = True
            break
    return RefineResult(flow=state.mu, iterations=state.iteration, final_delta=delta,
                        converged=converged,
                        pairwise_ms=timings.get("pairwise_s", 0.0) * 1e3,
                        highorder_ms=timings.get("highorder_s", 0.0) * 1e3)


def total_energy(flow, problem: CrfProblem) -> float:
    """Full objective at a candidate flow. The region term always uses the
    validation-grade exact leave-one-out fits; single-point regions have no
    leave-one-out fit and contribute zero."""
    y = as_flow(flow, n=len(problem))
    cfg = problem.config
    total = unary_energy(y, problem.initial_flow)

    if problem.neighbors is not None:
        for spec, kw in zip(cfg.kernels, problem.kernel_weights):
            if spec.alpha == 0:
                continue
            diff = y[:, None, :] - y[problem.neighbors]
            total += spec.alpha * float(np.sum(kw * np.einsum("nkj,nkj->nk", diff, diff)))

    if cfg.beta > 0 and problem.partition is not None:
        if cfg.region_term == REGION_TERM_MEAN:
            for idx in problem.partition.regions:
                if idx.size == 1:
                    continue
                for local, i in enumerate(idx):
                    rest = np.delete(idx, local)
                    d = y[i] - naive_region_flow(y[rest])
                    total += cfg.beta * float(d @ d)
        else:
            g, _ = _region_rigid_pull(problem.positions, problem.positions + y,
                                      problem.partition, exact=True)
            for idx in problem.partition.regions:
                if idx.size == 1:
                    continue
                d = y[idx] - g[idx]
                total += cfg.beta * float(np.sum(d * d))
    return total
