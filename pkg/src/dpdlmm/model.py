"""Domain types for grouped mixed-model data and covariance assembly.

A dataset is a collection of independent groups.  Group ``i`` carries a
response vector ``y_i`` of length ``n_i``, a fixed-effect design matrix
``X_i`` (``n_i x k``) and one design matrix ``Z_ij`` (``n_i x q_j``) per
random factor ``j``.  The model covariance of ``y_i`` is

    V_i = sigma0^2 * I + sum_j sigma_j^2 * Z_ij Z_ij'
        = sigma0^2 * (I + sum_j gamma_j * U_ij),   gamma_j = sigma_j^2 / sigma0^2,

where ``U_i0 = I`` and ``U_ij = Z_ij Z_ij'`` are the partial derivatives of
``V_i`` with respect to the variance components.  The ``U_ij`` depend only on
the design, so they are precomputed once and shared by every solver pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .errors import DimensionMismatch, NotPositiveDefinite

SIGMA0_FLOOR = 1e-10  # smallest admissible error variance in a fit


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be a 2-d array, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class GroupBlock:
    """Data for one group: response ``y``, fixed design ``X``, random designs ``Z``."""

    y: np.ndarray
    X: np.ndarray
    Z: tuple[np.ndarray, ...]

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        X = _as_matrix(self.X, "X")
        Z = tuple(_as_matrix(z, "Z") for z in self.Z)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        if self.n_obs < 1:
            raise DimensionMismatch("a group must contain at least one observation")
        if X.shape[0] != self.n_obs:
            raise DimensionMismatch(
                f"X has {X.shape[0]} rows but y has {self.n_obs} entries"
            )
        for j, z in enumerate(Z):
            if z.shape[0] != self.n_obs:
                raise DimensionMismatch(
                    f"Z[{j}] has {z.shape[0]} rows but y has {self.n_obs} entries"
                )

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class GroupedDesign:
    """An immutable collection of groups sharing ``k`` fixed-effect columns
    and ``r`` random factors."""

    groups: tuple[GroupBlock, ...]

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if len(self.groups) < 1:
            raise DimensionMismatch("a design needs at least one group")
        k = self.groups[0].k
        r = len(self.groups[0].Z)
        for i, g in enumerate(self.groups):
            if g.k != k:
                raise DimensionMismatch(f"group {i} has k={g.k}, expected {k}")
            if len(g.Z) != r:
                raise DimensionMismatch(
                    f"group {i} has {len(g.Z)} random factors, expected {r}"
                )

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_obs_total(self) -> int:
        return sum(g.n_obs for g in self.groups)

    @property
    def k(self) -> int:
        return self.groups[0].k

    @property
    def r(self) -> int:
        return len(self.groups[0].Z)

    @cached_property
    def u_matrices(self) -> tuple[tuple[np.ndarray, ...], ...]:
        """Per group, the derivative matrices ``(I, Z_1 Z_1', ..., Z_r Z_r')``.

        For a balanced design only one tuple is materialized and shared.
        """
        if self.is_balanced:
            g = self.groups[0]
            shared = _u_tuple(g)
            return tuple(shared for _ in self.groups)
        return tuple(_u_tuple(g) for g in self.groups)

    @cached_property
    def is_balanced(self) -> bool:
        """True when all groups have equal size and exactly identical Z matrices."""
        first = self.groups[0]
        for g in self.groups[1:]:
            if g.n_obs != first.n_obs:
                return False
            if any(
                z.shape != z0.shape or not np.array_equal(z, z0)
                for z, z0 in zip(g.Z, first.Z)
            ):
                return False
        return True

    @cached_property
    def y_stack(self) -> np.ndarray:
        """Responses stacked as an ``(n_groups, n_i)`` matrix (balanced only)."""
        if not self.is_balanced:
            raise NotImplementedError("y_stack is defined for balanced designs only")
        return np.array([g.y for g in self.groups])

    @cached_property
    def x_stack(self) -> np.ndarray:
        """Fixed designs stacked as an ``(n_groups, n_i, k)`` tensor (balanced only)."""
        if not self.is_balanced:
            raise NotImplementedError("x_stack is defined for balanced designs only")
        return np.array([g.X for g in self.groups])


def _u_tuple(g: GroupBlock) -> tuple[np.ndarray, ...]:
    return (np.eye(g.n_obs),) + tuple(z @ z.T for z in g.Z)


@dataclass(frozen=True)
class ThetaParams:
    """Parameter vector: fixed effects ``beta`` and variance components
    ``sigma2 = (sigma0^2, sigma1^2, ..., sigmar^2)``."""

    beta: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(-1))
        object.__setattr__(
            self, "sigma2", np.asarray(self.sigma2, dtype=float).reshape(-1)
        )
        if self.sigma2.size < 1:
            raise DimensionMismatch("sigma2 must at least contain the error variance")
        if self.sigma2[0] <= 0:
            raise NotPositiveDefinite(
                -1, f"error variance must be positive, got {self.sigma2[0]}"
            )
        if np.any(self.sigma2[1:] < 0):
            raise DimensionMismatch("random-factor variances must be nonnegative")

    @property
    def k(self) -> int:
        return self.beta.shape[0]

    @property
    def r(self) -> int:
        return self.sigma2.shape[0] - 1

    @property
    def gamma(self) -> np.ndarray:
        """Variance ratios sigma_j^2 / sigma0^2 for j = 1..r."""
        return self.sigma2[1:] / self.sigma2[0]

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.beta, self.sigma2])

    @staticmethod
    def from_vector(vec: np.ndarray, k: int) -> "ThetaParams":
        vec = np.asarray(vec, dtype=float)
        return ThetaParams(beta=vec[:k], sigma2=vec[k:])


@dataclass(frozen=True)
class CovarianceSet:
    """Assembled per-group covariances with their Cholesky factors.

    ``V[i]`` is ``sigma0^2 * (I + sum_j gamma_j U_ij)`` by construction,
    ``chol[i]`` its lower Cholesky factor and ``logdet[i] = log|V_i|``.
    ``U[i]`` references the design's precomputed derivative matrices.
    For balanced designs all groups share the same ``V`` object.
    """

    V: tuple[np.ndarray, ...]
    chol: tuple[np.ndarray, ...]
    logdet: np.ndarray
    U: tuple[tuple[np.ndarray, ...], ...]
    gamma: np.ndarray
    shared: bool = field(default=False)

    @property
    def n_groups(self) -> int:
        return len(self.V)

    def solve(self, i: int, b: np.ndarray) -> np.ndarray:
        """Return ``V_i^{-1} b`` via the stored Cholesky factor."""
        return cho_solve((self.chol[i], True), b)


def _check_theta(design: GroupedDesign, theta: ThetaParams) -> None:
    if theta.k != design.k:
        raise DimensionMismatch(f"beta has length {theta.k}, design has k={design.k}")
    if theta.r != design.r:
        raise DimensionMismatch(
            f"sigma2 has {theta.r} factor variances, design has r={design.r}"
        )


def assemble_covariances(design: GroupedDesign, theta: ThetaParams) -> CovarianceSet:
    """Build ``V_i``, its Cholesky factor and ``log|V_i|`` for every group.

    Raises ``NotPositiveDefinite`` (with the group index) when a factorization
    fails, which signals a vanishing error variance or a degenerate design.
    """
    _check_theta(design, theta)
    sigma2 = theta.sigma2
    gamma = theta.gamma
    u_all = design.u_matrices

    def build(i: int) -> tuple[np.ndarray, np.ndarray, float]:
        u = u_all[i]
        v = sigma2[0] * u[0].copy()
        for s, uj in zip(sigma2[1:], u[1:]):
            v += s * uj
        try:
            low = cholesky(v, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(i) from exc
        logdet = 2.0 * float(np.sum(np.log(np.diag(low))))
        return v, low, logdet

    if design.is_balanced:
        v, low, ld = build(0)
        n = design.n_groups
        return CovarianceSet(
            V=(v,) * n,
            chol=(low,) * n,
            logdet=np.full(n, ld),
            U=u_all,
            gamma=gamma,
            shared=True,
        )

    vs, lows, lds = [], [], []
    for i in range(design.n_groups):
        v, low, ld = build(i)
        vs.append(v)
        lows.append(low)
        lds.append(ld)
    return CovarianceSet(
        V=tuple(vs),
        chol=tuple(lows),
        logdet=np.array(lds),
        U=u_all,
        gamma=gamma,
        shared=False,
    )


def mahalanobis_residual(block: GroupBlock, beta: np.ndarray, chol: np.ndarray) -> float:
    """Quadratic form ``(y - X beta)' V^{-1} (y - X beta)`` via a triangular solve."""
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.shape[0] != block.k:
        raise DimensionMismatch(
            f"beta has length {beta.shape[0]}, block has k={block.k}"
        )
    resid = block.y - block.X @ beta
    half = solve_triangular(chol, resid, lower=True, check_finite=False)
    return float(half @ half)
