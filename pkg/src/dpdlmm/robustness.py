"""Influence functions, sensitivity measures and optimal tuning constants.

The influence function of a fit functional measures the first-order effect
of placing contamination mass at a point ``t`` in one group's sample space.
For tuning parameter ``alpha > 0`` the contamination enters through the
factor ``f(t)^alpha``, which decays in the Mahalanobis distance of ``t``, so
every influence function here is bounded; at ``alpha = 0`` (the likelihood
fit) it grows without bound.

Summaries of the influence function over the worst-case point give the
gross-error sensitivity (largest possible norm) and the self-standardized
sensitivity (largest norm after standardizing by the score-variance gram).
For balanced designs both have closed forms whose alpha-profiles are
minimized at ``1/(p+1)`` and ``2/p`` respectively, where ``p`` is the common
group size; those two values are the strongest-downweighting choices that
do not yet cost robustness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .divergence import LOG_2PI, DpdConfig, gaussian_log_density
from .errors import DimensionMismatch, DpdlmmError, SingularPsi
from .model import CovarianceSet, GroupedDesign, ThetaParams, assemble_covariances

_BALANCED_MATCH_TOL = 1e-10


@dataclass(frozen=True)
class SensitivityReport:
    """Worst-case influence summaries for contamination in one direction.

    ``ges`` and ``sss`` are infinite at ``alpha = 0``; renderers should print
    the infinity symbol rather than a float.  ``alpha_star`` and
    ``alpha_bar`` are the balanced-design minimizers of the two measures and
    are ``None`` for unbalanced designs.
    """

    alpha: float
    ges: float
    sss: float
    direction: int
    alpha_star: float | None = None
    alpha_bar: float | None = None


@dataclass(frozen=True)
class _IfContext:
    cov: CovarianceSet
    eta: np.ndarray
    beta_gram: np.ndarray  # normalizer of the fixed-effect influence
    sigma_gram: np.ndarray  # normalizer of the variance influence
    b_blocks: tuple[np.ndarray, ...]
    tr: tuple[np.ndarray, ...]


def _context(design: GroupedDesign, theta: ThetaParams, alpha: float) -> _IfContext:
    cov = assemble_covariances(design, theta)
    n = design.n_groups
    k = design.k
    r1 = design.r + 1
    eta = np.exp(
        -0.5 * np.array([g.n_obs for g in design.groups]) * alpha * LOG_2PI
        - 0.5 * alpha * cov.logdet
    )
    beta_gram = np.zeros((k, k))
    sigma_gram = np.zeros((r1, r1))
    bs: list[np.ndarray] = []
    trs: list[np.ndarray] = []
    shared = None
    for i, g in enumerate(design.groups):
        vix = cov.solve(i, g.X) if k else np.zeros_like(g.X)
        b = g.X.T @ vix
        bs.append(b)
        if cov.shared and shared is not None:
            tr, tp = shared
        else:
            v_inv = np.linalg.inv(cov.V[i])
            a_mats = [v_inv @ uj for uj in cov.U[i]]
            tr = np.array([float(np.trace(a)) for a in a_mats])
            tp = np.array(
                [[float(np.sum(aj * ak.T)) for ak in a_mats] for aj in a_mats]
            )
            if cov.shared:
                shared = (tr, tp)
        trs.append(tr)
        scale1 = (1.0 + alpha) ** (g.n_obs / 2.0 + 1.0)
        scale2 = (1.0 + alpha) ** (g.n_obs / 2.0 + 2.0)
        beta_gram += eta[i] * b / scale1
        sigma_gram += (
            eta[i] * (alpha**2 * np.outer(tr, tr) + 2.0 * tp) / (4.0 * scale2)
        )
    return _IfContext(cov, eta, beta_gram, sigma_gram, tuple(bs), tuple(trs))


def _density_power(ctx: _IfContext, design, theta, alpha, i0, t) -> tuple[np.ndarray, float]:
    g = design.groups[i0]
    t = np.asarray(t, dtype=float).reshape(-1)
    if t.shape[0] != g.n_obs:
        raise DimensionMismatch(
            f"contamination point has length {t.shape[0]}, group {i0} has {g.n_obs}"
        )
    resid = t - g.X @ theta.beta
    if alpha == 0.0:
        return resid, 1.0
    log_f = gaussian_log_density(resid, ctx.cov.chol[i0], float(ctx.cov.logdet[i0]))
    return resid, math.exp(alpha * log_f)


def _beta_numerator(ctx, design, theta, alpha, i0, t) -> np.ndarray:
    resid, fpow = _density_power(ctx, design, theta, alpha, i0, t)
    g = design.groups[i0]
    return (g.X.T @ ctx.cov.solve(i0, resid)) * fpow


def _sigma_numerator(ctx, design, theta, alpha, i0, t) -> np.ndarray:
    resid, fpow = _density_power(ctx, design, theta, alpha, i0, t)
    g = design.groups[i0]
    a = ctx.cov.solve(i0, resid)
    tr = ctx.tr[i0]
    s = np.array([float(a @ (uj @ a)) for uj in ctx.cov.U[i0]])
    xi = ctx.eta[i0] * alpha * tr / (2.0 * (1.0 + alpha) ** (g.n_obs / 2.0 + 1.0))
    return 0.5 * fpow * (tr - s) - xi


def _solve_spd(mat: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.solve(mat, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularPsi(f"{what} is singular") from exc


def influence_beta(
    design: GroupedDesign,
    theta: ThetaParams,
    cfg: DpdConfig,
    i0: int,
    t: np.ndarray,
) -> np.ndarray:
    """Influence of contamination at ``t`` in group ``i0`` on the fixed effects."""
    ctx = _context(design, theta, cfg.alpha)
    num = _beta_numerator(ctx, design, theta, cfg.alpha, i0, t)
    return _solve_spd(ctx.beta_gram, num, "fixed-effect gram")


def influence_sigma(
    design: GroupedDesign,
    theta: ThetaParams,
    cfg: DpdConfig,
    i0: int,
    t: np.ndarray,
) -> np.ndarray:
    """Influence of contamination at ``t`` in group ``i0`` on the variances."""
    ctx = _context(design, theta, cfg.alpha)
    num = _sigma_numerator(ctx, design, theta, cfg.alpha, i0, t)
    return _solve_spd(ctx.sigma_gram, num, "variance-component gram")


def influence_all(
    design: GroupedDesign,
    theta: ThetaParams,
    cfg: DpdConfig,
    t_list,
) -> tuple[np.ndarray, np.ndarray]:
    """Joint influence of simultaneous contamination, one point per group."""
    t_list = list(t_list)
    if len(t_list) != design.n_groups:
        raise DimensionMismatch(
            f"need one contamination point per group ({design.n_groups}), "
            f"got {len(t_list)}"
        )
    ctx = _context(design, theta, cfg.alpha)
    beta_num = np.zeros(design.k)
    sigma_num = np.zeros(design.r + 1)
    for i0, t in enumerate(t_list):
        beta_num += _beta_numerator(ctx, design, theta, cfg.alpha, i0, t)
        sigma_num += _sigma_numerator(ctx, design, theta, cfg.alpha, i0, t)
    return (
        _solve_spd(ctx.beta_gram, beta_num, "fixed-effect gram"),
        _solve_spd(ctx.sigma_gram, sigma_num, "variance-component gram"),
    )


def _lambda_max_pair(gram: np.ndarray, b: np.ndarray) -> float:
    """Largest eigenvalue of ``gram^{-1} b`` via a symmetric reduction."""
    low = np.linalg.cholesky(gram)
    inner = np.linalg.solve(low, np.linalg.solve(low, b.T).T)
    return float(np.linalg.eigvalsh(0.5 * (inner + inner.T)).max())


def _lambda_max_double(gram: np.ndarray, b: np.ndarray) -> float:
    """Largest eigenvalue of ``gram^{-1} b gram^{-1}``."""
    half = np.linalg.solve(gram, b)
    full = np.linalg.solve(gram, half.T).T
    return float(np.linalg.eigvalsh(0.5 * (full + full.T)).max())


def ges_alpha_factor(alpha: np.ndarray, p: int) -> np.ndarray:
    """Alpha-dependent factor of the balanced gross-error sensitivity."""
    alpha = np.asarray(alpha, dtype=float)
    return (1.0 + alpha) ** (p / 2.0 + 1.0) / np.sqrt(alpha)


def sss_alpha_factor(alpha: np.ndarray, p: int) -> np.ndarray:
    """Alpha-dependent factor of the balanced self-standardized sensitivity."""
    alpha = np.asarray(alpha, dtype=float)
    return (1.0 + alpha) ** ((p + 2.0) / 4.0) / np.sqrt(alpha)


def sensitivities(
    design: GroupedDesign,
    theta: ThetaParams,
    cfg: DpdConfig,
    i0: int,
) -> SensitivityReport:
    """Gross-error and self-standardized sensitivities for direction ``i0``.

    Both measures are the exact suprema of the corresponding influence-
    function norms; they are infinite at ``alpha = 0``.  On balanced designs
    the closed forms are also evaluated and must agree with the general
    expressions to 1e-10, and the report carries the optimal tuning values
    ``1/(p+1)`` and ``2/p``.
    """
    if not 0 <= i0 < design.n_groups:
        raise DimensionMismatch(f"direction {i0} out of range")
    alpha = cfg.alpha
    balanced = design.is_balanced
    p = design.groups[0].n_obs
    alpha_star = 1.0 / (p + 1.0) if balanced else None
    alpha_bar = 2.0 / p if balanced else None

    if alpha == 0.0:
        return SensitivityReport(
            alpha=0.0,
            ges=math.inf,
            sss=math.inf,
            direction=i0,
            alpha_star=alpha_star,
            alpha_bar=alpha_bar,
        )

    ctx = _context(design, theta, alpha)
    n = design.n_groups
    b0 = ctx.b_blocks[i0]
    eta0 = float(ctx.eta[i0])

    ges = eta0 * math.sqrt(_lambda_max_double(ctx.beta_gram, b0)) / (
        math.sqrt(alpha) * math.exp(0.5)
    )
    # score-variance gram of the self-standardization, built from the same
    # per-group scaling as the fixed-effect gram but with squared weights
    star = np.zeros((design.k, design.k))
    for i, g in enumerate(design.groups):
        star += (
            ctx.eta[i] ** 2
            * ctx.b_blocks[i]
            / (1.0 + alpha) ** (g.n_obs / 2.0 + 1.0)
        )
    sss = eta0 * math.sqrt(_lambda_max_pair(star, b0)) / (
        n * math.sqrt(2.0 * alpha) * math.exp(0.5)
    )

    if balanced:
        s_gram = sum(ctx.b_blocks[i] for i in range(n))
        ges_cf = (
            float(ges_alpha_factor(np.array(alpha), p))
            * math.sqrt(_lambda_max_double(s_gram, b0))
            * math.exp(-0.5)
        )
        sss_cf = (
            float(sss_alpha_factor(np.array(alpha), p))
            / n
            * math.sqrt(_lambda_max_pair(s_gram, b0))
            / math.sqrt(2.0 * math.e)
        )
        if abs(ges_cf - ges) > _BALANCED_MATCH_TOL * max(1.0, abs(ges)):
            raise DpdlmmError(
                f"balanced closed form disagrees with general GES: {ges_cf} vs {ges}"
            )
        if abs(sss_cf - sss) > _BALANCED_MATCH_TOL * max(1.0, abs(sss)):
            raise DpdlmmError(
                f"balanced closed form disagrees with general SSS: {sss_cf} vs {sss}"
            )

    return SensitivityReport(
        alpha=alpha,
        ges=ges,
        sss=sss,
        direction=i0,
        alpha_star=alpha_star,
        alpha_bar=alpha_bar,
    )
