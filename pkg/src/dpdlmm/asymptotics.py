"""Asymptotic covariance of the estimator and Wald-type inference.

The estimator's asymptotic covariance has sandwich form: with per-group
curvature blocks collected in ``psi_n`` and per-group score-variance blocks
in ``omega_n``, the covariance of the estimate vector is

    avar = (1/n) * psi_n^{-1} omega_n psi_n^{-1}.

Both matrices are block diagonal: the fixed-effect block and the
variance-component block never mix, so the two sets of estimates are
asymptotically independent.  At ``alpha = 0`` the two matrices coincide with
the Fisher information of the Gaussian mixed model and the sandwich
collapses to the inverse information.

Fits that end on the boundary (some factor variance exactly zero) violate
the interior-point assumption behind the sandwich; those components are
dropped from the covariance computation and flagged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .divergence import LOG_2PI, DpdConfig
from .errors import SingularPsi
from .estimator import FitResult
from .model import GroupedDesign, ThetaParams, assemble_covariances

EIGENVALUE_FLOOR = 1e-12


@dataclass(frozen=True)
class AsymptoticInfo:
    """Sandwich matrices, asymptotic covariance and standard errors.

    ``avar`` and ``se`` are indexed like the packed parameter vector
    ``(beta_1..beta_k, sigma2_0..sigma2_r)``; entries for boundary-dropped
    components are NaN and their indices are listed in ``boundary``.
    """

    psi_n: np.ndarray
    omega_n: np.ndarray
    avar: np.ndarray
    se: np.ndarray
    x_prime_gram: np.ndarray
    x_star_gram: np.ndarray
    boundary: tuple[int, ...] = ()

    @property
    def has_boundary(self) -> bool:
        return len(self.boundary) > 0


@dataclass(frozen=True)
class _GroupTerms:
    """Per-group ingredients shared by the sandwich and the influence math."""

    eta: np.ndarray  # (n,)
    n_obs: np.ndarray  # (n,)
    b: tuple[np.ndarray, ...]  # X_i' V_i^{-1} X_i
    tr: tuple[np.ndarray, ...]  # traces of V^{-1} U_j
    tr_prod: tuple[np.ndarray, ...]  # traces of V^{-1} U_j V^{-1} U_k


def _group_terms(design: GroupedDesign, theta: ThetaParams, alpha: float) -> _GroupTerms:
    cov = assemble_covariances(design, theta)
    n = design.n_groups
    etas = np.empty(n)
    n_obs = np.array([g.n_obs for g in design.groups])
    bs: list[np.ndarray] = []
    trs: list[np.ndarray] = []
    tr_prods: list[np.ndarray] = []
    shared: tuple[np.ndarray, np.ndarray] | None = None
    for i, g in enumerate(design.groups):
        etas[i] = math.exp(
            -0.5 * g.n_obs * alpha * LOG_2PI - 0.5 * alpha * float(cov.logdet[i])
        )
        if cov.shared and shared is not None:
            tr, tr_prod = shared
        else:
            v_inv = np.linalg.inv(cov.V[i])
            a_mats = [v_inv @ uj for uj in cov.U[i]]
            tr = np.array([float(np.trace(a)) for a in a_mats])
            tr_prod = np.array(
                [[float(np.sum(aj * ak.T)) for ak in a_mats] for aj in a_mats]
            )
            if cov.shared:
                shared = (tr, tr_prod)
        trs.append(tr)
        tr_prods.append(tr_prod)
        vix = cov.solve(i, g.X) if g.X.shape[1] else np.zeros_like(g.X)
        bs.append(g.X.T @ vix)
    return _GroupTerms(etas, n_obs, tuple(bs), tuple(trs), tuple(tr_prods))


def _sandwich_blocks(design, terms: _GroupTerms, alpha: float):
    """Aggregate the fixed-effect and variance-component blocks."""
    k = design.k
    r1 = design.r + 1
    n = design.n_groups
    psi_bb = np.zeros((k, k))
    psi_ss = np.zeros((r1, r1))
    om_bb = np.zeros((k, k))
    om_ss = np.zeros((r1, r1))
    xp = np.zeros((k, k))
    xs = np.zeros((k, k))
    for i in range(n):
        eta = terms.eta[i]
        ni = terms.n_obs[i]
        b = terms.b[i]
        tr = terms.tr[i]
        tp = terms.tr_prod[i]
        a1 = (1.0 + alpha) ** (ni / 2.0 + 1.0)
        a2 = (1.0 + alpha) ** (ni / 2.0 + 2.0)
        b1 = (1.0 + 2.0 * alpha) ** (ni / 2.0 + 1.0)
        b2 = (1.0 + 2.0 * alpha) ** (ni / 2.0 + 2.0)
        outer_tr = np.outer(tr, tr)
        psi_bb += (eta / 4.0) * 4.0 * b / a1
        psi_ss += (eta / 4.0) * (alpha**2 * outer_tr + 2.0 * tp) / a2
        om_bb += (eta**2 / 4.0) * 4.0 * b / b1
        om_ss += (eta**2 / 4.0) * (
            (4.0 * alpha**2 * outer_tr + 2.0 * tp) / b2
            - alpha**2 * outer_tr / (1.0 + alpha) ** (ni + 2.0)
        )
        xp += eta * b / a1
        xs += eta**2 * b / b1
    return psi_bb / n, psi_ss / n, om_bb / n, om_ss / n, xp, xs


def _block_diag(bb: np.ndarray, ss: np.ndarray) -> np.ndarray:
    k = bb.shape[0]
    out = np.zeros((k + ss.shape[0],) * 2)
    out[:k, :k] = bb
    out[k:, k:] = ss
    return out


def asymptotic_info(
    design: GroupedDesign, theta: ThetaParams, cfg: DpdConfig
) -> AsymptoticInfo:
    """Sandwich covariance of the estimator evaluated at ``theta``.

    Factor variances sitting exactly at zero are excluded from the inverted
    blocks (the interior assumption fails there); their rows and columns of
    ``avar`` and entries of ``se`` are NaN and their packed-vector indices
    are reported in ``boundary``.
    """
    alpha = cfg.alpha
    k = design.k
    r1 = design.r + 1
    m = k + r1
    terms = _group_terms(design, theta, alpha)
    psi_bb, psi_ss, om_bb, om_ss, xp, xs = _sandwich_blocks(design, terms, alpha)
    psi_n = _block_diag(psi_bb, psi_ss)
    omega_n = _block_diag(om_bb, om_ss)

    boundary = tuple(k + 1 + j for j in range(design.r) if theta.sigma2[1 + j] == 0.0)
    keep_sigma = np.array(
        [True] + [theta.sigma2[1 + j] > 0.0 for j in range(design.r)]
    )
    psi_ss_act = psi_ss[np.ix_(keep_sigma, keep_sigma)]
    om_ss_act = om_ss[np.ix_(keep_sigma, keep_sigma)]

    n = design.n_groups
    avar = np.full((m, m), np.nan)
    try:
        avar_bb = _sandwich(psi_bb, om_bb) / n if k else np.zeros((0, 0))
        avar_ss = _sandwich(psi_ss_act, om_ss_act) / n
    except np.linalg.LinAlgError as exc:
        raise SingularPsi("curvature matrix is singular at this point") from exc
    if k:
        avar[:k, :k] = avar_bb
    act_idx = k + np.flatnonzero(keep_sigma)
    avar[np.ix_(act_idx, act_idx)] = avar_ss
    # independence of the two blocks: the cross block is exactly zero
    if k:
        avar[:k, k:][:, keep_sigma] = 0.0
        avar[k:, :k][keep_sigma, :] = 0.0

    diag = np.diag(avar).copy()
    se = np.sqrt(np.where(diag >= 0, diag, np.nan))
    return AsymptoticInfo(
        psi_n=psi_n,
        omega_n=omega_n,
        avar=avar,
        se=se,
        x_prime_gram=xp,
        x_star_gram=xs,
        boundary=boundary,
    )


def _sandwich(psi: np.ndarray, omega: np.ndarray) -> np.ndarray:
    if psi.size == 0:
        return psi
    psi_inv = np.linalg.inv(psi)
    out = psi_inv @ omega @ psi_inv
    return 0.5 * (out + out.T)


def omega_inv_sqrt(omega: np.ndarray) -> np.ndarray:
    """Inverse symmetric square root with an eigenvalue floor."""
    vals, vecs = np.linalg.eigh(omega)
    vals = np.maximum(vals, EIGENVALUE_FLOOR)
    return vecs @ np.diag(vals**-0.5) @ vecs.T


def are_curve(
    design: GroupedDesign,
    theta: ThetaParams,
    alphas,
    param_index: int,
) -> np.ndarray:
    """Efficiency of one parameter relative to the likelihood fit, in percent.

    Computes ``100 * avar(alpha=0)[i, i] / avar(alpha)[i, i]`` along the
    grid; the value at ``alpha = 0`` is exactly 100.
    """
    base = asymptotic_info(design, theta, DpdConfig(alpha=0.0)).avar[
        param_index, param_index
    ]
    out = np.empty(len(tuple(alphas)))
    for idx, alpha in enumerate(alphas):
        if alpha == 0.0:
            out[idx] = 100.0
            continue
        cur = asymptotic_info(design, theta, DpdConfig(alpha=float(alpha))).avar[
            param_index, param_index
        ]
        out[idx] = 100.0 * base / cur
    return out


@dataclass(frozen=True)
class WaldRow:
    """One coefficient's estimate, standard error, z statistic and p-value."""

    name: str
    estimate: float
    se: float
    z: float
    p_value: float
    boundary_invalid: bool = False


def wald_tests(fit: FitResult, info: AsymptoticInfo) -> list[WaldRow]:
    """Two-sided normal tests of each coefficient against zero.

    Variance-component rows whose estimate sits at the zero bound are marked
    ``boundary_invalid``: the normal approximation does not apply there.
    """
    theta = fit.theta_hat
    k = theta.k
    rows: list[WaldRow] = []
    values = theta.as_vector()
    names = [f"beta_{j}" for j in range(k)] + [
        f"sigma2_{j}" for j in range(theta.r + 1)
    ]
    for idx, (name, est) in enumerate(zip(names, values)):
        se = float(info.se[idx])
        is_sigma = idx >= k
        at_bound = is_sigma and est == 0.0
        if at_bound or not np.isfinite(se) or se == 0.0:
            z = math.nan if at_bound or not np.isfinite(se) else math.inf
            p = math.nan
            rows.append(WaldRow(name, float(est), se, z, p, boundary_invalid=at_bound))
            continue
        z = float(est) / se
        p = math.erfc(abs(z) / math.sqrt(2.0))
        rows.append(WaldRow(name, float(est), se, z, p))
    return rows
