"""Data generators, contamination mechanisms and Monte Carlo study runner.

The generator produces a two-way crossed classification with interaction:
each group carries ``p = F*G*H`` responses built from three random factors
(two mains and their interaction) plus noise, arranged in lexicographic
order (the third index fastest).  The implied group covariance is

    Sigma0 = sigma_e^2 * I + sigma_a^2 * (I_F x J_G x J_H)
           + sigma_b^2 * (J_F x I_G x J_H) + sigma_c^2 * (I_F x I_G x J_H),

where ``x`` is the Kronecker product and ``J`` a matrix of ones.

Two contamination mechanisms are provided: casewise replacement of whole
group vectors (with their covariate rows) by draws from a shifted normal,
and cellwise replacement of individual response entries along the least-
variance eigendirection of a covariance estimate.

Replications are independent and each owns a generator seeded by
``base_seed + replication_index``, so reports are bit-identical across runs
and across worker counts.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .errors import DimensionMismatch, SingularEstimate, SingularSigma0
from .estimator import SolverConfig, fit_alpha_path
from .model import GroupBlock, GroupedDesign

DEFAULT_OMEGA0_GRID = tuple(np.linspace(0.0, 10.0, 21))

_LEVERAGE_SHIFT = {"lev1": 1.0, "lev20": 20.0}


def default_alpha_menu(p: int = 12) -> tuple[float, ...]:
    """Standard tuning grid: 0, 0.01, the two optimal constants for group
    size ``p``, then 0.1 steps up to 1."""
    vals = {0.0, 0.01, 1.0 / (p + 1), 2.0 / p}
    vals.update(round(0.1 * j, 10) for j in range(1, 11))
    return tuple(sorted(vals))


@dataclass(frozen=True)
class CrossedDesignSpec:
    """True model for the crossed-classification generator."""

    F: int = 2
    G: int = 2
    H: int = 3
    k: int = 6
    beta0: tuple[float, ...] = (0.0, 2.0, 2.0, 2.0, 2.0, 2.0)
    sigma_a2: float = 1.0 / 16.0
    sigma_b2: float = 1.0 / 16.0
    sigma_c2: float = 1.0 / 8.0
    sigma_e2: float = 0.25
    n: int = 100

    def __post_init__(self):
        if len(self.beta0) != self.k:
            raise DimensionMismatch(
                f"beta0 has length {len(self.beta0)}, expected k={self.k}"
            )
        if min(self.F, self.G, self.H, self.n, self.k) < 1:
            raise DimensionMismatch("level counts, k and n must be positive")

    @property
    def p(self) -> int:
        return self.F * self.G * self.H

    def z_matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Random-effect designs for the two mains and the interaction."""
        z_a = np.kron(np.eye(self.F), np.ones((self.G * self.H, 1)))
        z_b = np.kron(np.ones((self.F, 1)), np.kron(np.eye(self.G), np.ones((self.H, 1))))
        z_c = np.kron(np.eye(self.F * self.G), np.ones((self.H, 1)))
        return z_a, z_b, z_c

    def sigma0_matrix(self) -> np.ndarray:
        """Exact group covariance from the Kronecker blocks."""
        i_f, i_g = np.eye(self.F), np.eye(self.G)
        j_f, j_g, j_h = (np.ones((m, m)) for m in (self.F, self.G, self.H))
        v1 = np.kron(i_f, np.kron(j_g, j_h))
        v2 = np.kron(j_f, np.kron(i_g, j_h))
        v3 = np.kron(i_f, np.kron(i_g, j_h))
        return (
            self.sigma_e2 * np.eye(self.p)
            + self.sigma_a2 * v1
            + self.sigma_b2 * v2
            + self.sigma_c2 * v3
        )

    def covariance_from(self, eta: float, gamma: np.ndarray) -> np.ndarray:
        """Group covariance implied by an error variance and variance ratios."""
        z_mats = self.z_matrices()
        out = eta * np.eye(self.p)
        for g, z in zip(np.asarray(gamma, dtype=float), z_mats):
            out += eta * g * (z @ z.T)
        return out


@dataclass(frozen=True)
class ContaminationSpec:
    """Casewise contamination: fraction, response shift and leverage level."""

    epsilon: float = 0.0
    omega0: float = 0.0
    leverage: str = "lev1"
    covariate_sd: float = 0.005

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 0.5:
            raise DimensionMismatch(f"epsilon must be in [0, 0.5), got {self.epsilon}")
        if self.leverage not in _LEVERAGE_SHIFT:
            raise DimensionMismatch(f"leverage must be one of {set(_LEVERAGE_SHIFT)}")

    @property
    def phi0(self) -> float:
        return _LEVERAGE_SHIFT[self.leverage]


@dataclass(frozen=True)
class McScenario:
    """A Monte Carlo study: one generating design, many contamination cells."""

    design: CrossedDesignSpec = field(default_factory=CrossedDesignSpec)
    contaminations: tuple[ContaminationSpec, ...] = (ContaminationSpec(),)

    def __post_init__(self):
        object.__setattr__(self, "contaminations", tuple(self.contaminations))
        if not self.contaminations:
            raise DimensionMismatch("a scenario needs at least one contamination cell")


def generate_crossed(
    spec: CrossedDesignSpec, rng: np.random.Generator
) -> tuple[GroupedDesign, np.ndarray]:
    """Simulate a crossed-classification dataset and return it with the exact
    group covariance matrix."""
    z_mats = spec.z_matrices()
    p = spec.p
    beta0 = np.asarray(spec.beta0, dtype=float)
    groups = []
    for _ in range(spec.n):
        x = np.column_stack([np.ones(p), rng.standard_normal((p, spec.k - 1))])
        a = rng.normal(0.0, np.sqrt(spec.sigma_a2), size=spec.F)
        b = rng.normal(0.0, np.sqrt(spec.sigma_b2), size=spec.G)
        c = rng.normal(0.0, np.sqrt(spec.sigma_c2), size=spec.F * spec.G)
        e = rng.normal(0.0, np.sqrt(spec.sigma_e2), size=p)
        y = x @ beta0 + z_mats[0] @ a + z_mats[1] @ b + z_mats[2] @ c + e
        groups.append(GroupBlock(y=y, X=x, Z=z_mats))
    return GroupedDesign(groups=tuple(groups)), spec.sigma0_matrix()


def contaminate_casewise(
    design: GroupedDesign,
    spec: ContaminationSpec,
    sigma0: np.ndarray,
    beta0: np.ndarray,
    rng: np.random.Generator,
) -> GroupedDesign:
    """Replace a fraction of whole groups by outlying draws.

    The replaced groups are the first ``round(n * epsilon)`` after a seeded
    shuffle.  Each gets fresh covariates (intercept column kept, remaining
    entries drawn around the leverage shift) and a response drawn from the
    model at those covariates plus a constant shift of ``omega0``.
    """
    n = design.n_groups
    m = int(round(n * spec.epsilon))
    if m == 0:
        return design
    beta0 = np.asarray(beta0, dtype=float)
    chol0 = np.linalg.cholesky(sigma0)
    chosen = rng.permutation(n)[:m]
    groups = list(design.groups)
    for i in chosen:
        g = groups[i]
        p = g.n_obs
        x0 = np.column_stack(
            [
                np.ones(p),
                rng.normal(spec.phi0, spec.covariate_sd, size=(p, g.k - 1)),
            ]
        )
        y0 = x0 @ beta0 + spec.omega0 + chol0 @ rng.standard_normal(p)
        groups[i] = GroupBlock(y=y0, X=x0, Z=g.Z)
    return GroupedDesign(groups=tuple(groups))


def contaminate_cellwise(
    design: GroupedDesign,
    m: int,
    mle_cov: np.ndarray,
    rng: np.random.Generator,
    k_mult: float = 10.0,
) -> GroupedDesign:
    """Replace ``m`` random response cells along the least-variance direction.

    ``v`` is the unit eigenvector of the smallest eigenvalue of ``mle_cov``
    (sign fixed so its first nonzero component is positive); cell ``(i, j)``
    is replaced by a draw from ``N(k_mult * v_j, 0.1^2)``.
    """
    p = design.groups[0].n_obs
    if any(g.n_obs != p for g in design.groups):
        raise DimensionMismatch("cellwise contamination needs equal group sizes")
    n = design.n_groups
    if m > n * p:
        raise DimensionMismatch(f"cannot replace {m} cells, only {n * p} exist")
    if m == 0:
        return design
    mle_cov = np.asarray(mle_cov, dtype=float)
    if mle_cov.shape != (p, p):
        raise DimensionMismatch(f"mle_cov must be {p}x{p}, got {mle_cov.shape}")
    _, vecs = np.linalg.eigh(mle_cov)
    v = vecs[:, 0]
    nz = np.flatnonzero(v != 0.0)
    if nz.size and v[nz[0]] < 0:
        v = -v

    ys = [g.y.copy() for g in design.groups]
    cells = rng.choice(n * p, size=m, replace=False)
    for c in cells:
        i, j = divmod(int(c), p)
        ys[i][j] = rng.normal(k_mult * v[j], 0.1)
    groups = tuple(
        GroupBlock(y=y, X=g.X, Z=g.Z) for y, g in zip(ys, design.groups)
    )
    return GroupedDesign(groups=groups)


# ---------------------------------------------------------------------------
# performance measures
# ---------------------------------------------------------------------------


def _chol_or_raise(mat: np.ndarray, exc_type) -> np.ndarray:
    try:
        return np.linalg.cholesky(np.asarray(mat, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise exc_type("matrix is not positive definite") from exc


def msmd(beta_hats, beta0: np.ndarray, sigma0: np.ndarray) -> float:
    """Mean squared Mahalanobis distance of the fixed-effect estimates.

    Uses the standard-normal-covariate reduction of the prediction metric:
    the weighting matrix is ``trace(Sigma0^{-1}) * I``.
    """
    beta_hats = [np.asarray(b, dtype=float) for b in beta_hats]
    if not beta_hats:
        raise DimensionMismatch("need at least one estimate")
    beta0 = np.asarray(beta0, dtype=float)
    low = _chol_or_raise(sigma0, SingularSigma0)
    inv = np.linalg.inv(low)
    trace_inv = float(np.sum(inv * inv))  # trace of Sigma0^{-1}
    sq = [float(np.sum((b - beta0) ** 2)) for b in beta_hats]
    return trace_inv * float(np.mean(sq))


def kld(sigma1: np.ndarray, sigma0: np.ndarray) -> float:
    """Kullback-Leibler divergence between two centered normals:
    ``trace(S1 S0^{-1}) - log det(S1 S0^{-1}) - p``, via Cholesky factors."""
    low0 = _chol_or_raise(sigma0, SingularSigma0)
    low1 = _chol_or_raise(sigma1, SingularEstimate)
    p = sigma0.shape[0]
    inv0 = np.linalg.inv(low0)
    trace = float(np.sum((inv0 @ np.asarray(sigma1, dtype=float)) * inv0))
    logdet0 = 2.0 * float(np.sum(np.log(np.diag(low0))))
    logdet1 = 2.0 * float(np.sum(np.log(np.diag(low1))))
    return trace - (logdet1 - logdet0) - p


def mkld(sigma_hats, sigma0: np.ndarray, spec: CrossedDesignSpec) -> float:
    """Mean divergence of fitted ``(eta, gamma)`` covariances from the truth."""
    sigma_hats = list(sigma_hats)
    if not sigma_hats:
        raise DimensionMismatch("need at least one estimate")
    vals = [
        kld(spec.covariance_from(eta, gamma), sigma0) for eta, gamma in sigma_hats
    ]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# study runner
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McCell:
    """Summary of one (alpha, contamination) cell of the study."""

    alpha: float
    epsilon: float
    omega0: float
    leverage: str
    msmd: float
    mkld: float
    msmd_efficiency: float
    mkld_efficiency: float
    fit_failures: int


@dataclass(frozen=True)
class McReport:
    """All cell summaries plus the reproducibility handles."""

    cells: tuple[McCell, ...]
    replications: int
    base_seed: int

    def cell(
        self, alpha: float, epsilon: float, omega0: float, leverage: str
    ) -> McCell:
        for c in self.cells:
            if (
                np.isclose(c.alpha, alpha)
                and np.isclose(c.epsilon, epsilon)
                and np.isclose(c.omega0, omega0)
                and c.leverage == leverage
            ):
                return c
        raise KeyError(f"no cell for alpha={alpha}, eps={epsilon}, omega0={omega0}")

    def max_over_omega0(
        self, alpha: float, epsilon: float, leverage: str, metric: str = "msmd"
    ) -> float:
        vals = [
            getattr(c, metric)
            for c in self.cells
            if np.isclose(c.alpha, alpha)
            and np.isclose(c.epsilon, epsilon)
            and c.leverage == leverage
        ]
        if not vals:
            raise KeyError("no matching cells")
        return max(vals)

    def to_rows(self) -> list[tuple]:
        """Long-format rows: (estimator, alpha, epsilon, omega0, leverage, metric, value)."""
        rows = []
        for c in self.cells:
            for metric in (
                "msmd",
                "mkld",
                "msmd_efficiency",
                "mkld_efficiency",
                "fit_failures",
            ):
                rows.append(
                    (
                        "mdpde",
                        c.alpha,
                        c.epsilon,
                        c.omega0,
                        c.leverage,
                        metric,
                        getattr(c, metric),
                    )
                )
        return rows

    def to_dict(self) -> dict:
        return {
            "replications": self.replications,
            "base_seed": self.base_seed,
            "cells": [
                {
                    "alpha": c.alpha,
                    "epsilon": c.epsilon,
                    "omega0": c.omega0,
                    "leverage": c.leverage,
                    "msmd": c.msmd,
                    "mkld": c.mkld,
                    "msmd_efficiency": c.msmd_efficiency,
                    "mkld_efficiency": c.mkld_efficiency,
                    "fit_failures": c.fit_failures,
                }
                for c in self.cells
            ],
        }


def _run_replication(
    scenario: McScenario,
    alphas: tuple[float, ...],
    solver: SolverConfig,
    base_seed: int,
    rep: int,
):
    """One replication: generate, contaminate each cell, fit the whole grid."""
    rng = np.random.default_rng(base_seed + rep)
    design, sigma0 = generate_crossed(scenario.design, rng)
    beta0 = np.asarray(scenario.design.beta0, dtype=float)
    out = []
    for cspec in scenario.contaminations:
        contaminated = contaminate_casewise(design, cspec, sigma0, beta0, rng)
        fits = fit_alpha_path(contaminated, alphas, solver)
        out.append(
            [
                (
                    res.theta_hat.beta,
                    float(res.theta_hat.sigma2[0]),
                    res.theta_hat.gamma,
                    bool(res.converged),
                )
                for res in fits
            ]
        )
    return out


def run_study(
    scenario: McScenario,
    alphas,
    reps: int,
    base_seed: int,
    threads: int | None = None,
    solver: SolverConfig | None = None,
) -> McReport:
    """Run the Monte Carlo study and summarize every cell.

    ``alphas`` is augmented with the ``alpha = 0`` baseline if missing; the
    efficiency columns are the baseline metric divided by the cell metric.
    Non-converged fits are still summarized (their estimates exist) and
    counted in ``fit_failures``.  Results are merged by replication index,
    so the worker count never changes the output.
    """
    if reps < 1:
        raise DimensionMismatch("need at least one replication")
    alphas = tuple(sorted({0.0} | {float(a) for a in alphas}))
    # warm starts along the grid stand in for extra restarts here
    solver = solver or SolverConfig(restarts=1)
    threads = threads if threads is not None else (os.cpu_count() or 1)

    task = partial(_run_replication, scenario, alphas, solver, base_seed)
    if threads <= 1 or reps == 1:
        per_rep = [task(rep) for rep in range(reps)]
    else:
        with ProcessPoolExecutor(max_workers=min(threads, reps)) as pool:
            per_rep = list(pool.map(task, range(reps), chunksize=1))

    sigma0 = scenario.design.sigma0_matrix()
    beta0 = np.asarray(scenario.design.beta0, dtype=float)
    cells = []
    base_metrics: dict[int, tuple[float, float]] = {}
    for ci, cspec in enumerate(scenario.contaminations):
        for ai, alpha in enumerate(alphas):
            betas = [per_rep[rep][ci][ai][0] for rep in range(reps)]
            etas_gammas = [
                (per_rep[rep][ci][ai][1], per_rep[rep][ci][ai][2])
                for rep in range(reps)
            ]
            failures = sum(1 for rep in range(reps) if not per_rep[rep][ci][ai][3])
            cell_msmd = msmd(betas, beta0, sigma0)
            cell_mkld = mkld(etas_gammas, sigma0, scenario.design)
            if ai == 0:
                base_metrics[ci] = (cell_msmd, cell_mkld)
            base_msmd, base_mkld = base_metrics[ci]
            cells.append(
                McCell(
                    alpha=alpha,
                    epsilon=cspec.epsilon,
                    omega0=cspec.omega0,
                    leverage=cspec.leverage,
                    msmd=cell_msmd,
                    mkld=cell_mkld,
                    msmd_efficiency=base_msmd / cell_msmd if cell_msmd > 0 else 1.0,
                    mkld_efficiency=base_mkld / cell_mkld if cell_mkld > 0 else 1.0,
                    fit_failures=failures,
                )
            )
    return McReport(cells=tuple(cells), replications=reps, base_seed=base_seed)
