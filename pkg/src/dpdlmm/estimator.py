"""Minimization of the divergence objective.

Two routes are provided: a projected dense quasi-Newton method for arbitrary
grouped designs, and a fixed-point scheme for balanced designs that exploits
the closed-form update for the fixed effects.  Variance components live on
the closed half-line, so bounds are handled by projection (clipping at zero,
with a small positive floor on the error variance); a log parametrization is
deliberately avoided because fits may legitimately end exactly at zero.

Multiple stationary points can exist for contaminated data, so ``fit`` runs
a configurable number of perturbed restarts and reports the converged point
with the lowest objective value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .divergence import LOG_2PI, DpdConfig, ObjectiveEval, eval_objective, eval_weights
from .errors import (
    DidNotConverge,
    DimensionMismatch,
    NotBalanced,
    NotPositiveDefinite,
)
from .model import (
    SIGMA0_FLOOR,
    GroupedDesign,
    ThetaParams,
    assemble_covariances,
)

_ARMIJO_C1 = 1e-4
_ARMIJO_SHRINK = 0.5
_GRAD_TOL = 1e-6  # stationarity bound a converged fit must satisfy
_GRAD_TOL_POLISH = 1e-9  # keep polishing until here or until steps stall
_SIGMA_INIT_FLOOR = 1e-4


@dataclass(frozen=True)
class SolverConfig:
    """Iteration caps, tolerances and restart policy for the minimizers."""

    max_iter: int = 500
    tol_theta: float = 1e-8
    tol_obj: float = 1e-10
    alpha_path: tuple[float, ...] | None = None
    restarts: int = 3

    def __post_init__(self):
        if self.tol_theta <= 0 or self.tol_obj <= 0:
            raise DimensionMismatch("solver tolerances must be positive")
        if self.alpha_path is not None:
            path = tuple(float(a) for a in self.alpha_path)
            if path[0] != 0.0 or any(b <= a for a, b in zip(path, path[1:])):
                raise DimensionMismatch(
                    "alpha_path must be strictly increasing and start at 0"
                )
            object.__setattr__(self, "alpha_path", path)


@dataclass(frozen=True)
class FitResult:
    """Converged estimate with diagnostics of the solve that produced it."""

    theta_hat: ThetaParams
    objective: float
    converged: bool
    iterations: int
    grad_norm: float
    weights: np.ndarray
    trace: tuple[tuple[float, float], ...] | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def initial_theta(design: GroupedDesign) -> ThetaParams:
    """Cheap feasible starting point: pooled OLS for the fixed effects and
    method-of-moments for the variance components."""
    x_all = np.vstack([g.X for g in design.groups])
    y_all = np.concatenate([g.y for g in design.groups])
    if design.k > 0:
        beta, *_ = np.linalg.lstsq(x_all, y_all, rcond=None)
    else:
        beta = np.zeros(0)
    resid = [g.y - g.X @ beta for g in design.groups]

    # within-group residual variance for the error component
    ss_within = 0.0
    df_within = 0
    for e in resid:
        if e.size > 1:
            ss_within += float(np.sum((e - e.mean()) ** 2))
            df_within += e.size - 1
    if design.r == 0:
        all_e = np.concatenate(resid)
        sigma0 = float(all_e @ all_e) / max(all_e.size, 1)
    elif df_within > 0:
        sigma0 = ss_within / df_within
    else:
        all_e = np.concatenate(resid)
        sigma0 = float(np.var(all_e)) / (design.r + 1)
    sigma0 = max(sigma0, _SIGMA_INIT_FLOOR)

    sigma2 = [sigma0]
    n_total = design.n_obs_total
    for j in range(design.r):
        num = 0.0
        den = 0.0
        diag_sum = 0.0
        for g, e in zip(design.groups, resid):
            z = g.Z[j]
            counts = np.sum(z * z, axis=0)
            mask = counts > 0
            means = (z.T @ e)[mask] / counts[mask]
            num += float(counts[mask] @ (means * means))
            den += float(np.sum(counts[mask]))
            diag_sum += float(np.sum(z * z))
        msb = num / den if den > 0 else 0.0
        dbar = diag_sum / n_total if n_total > 0 else 1.0
        est = (msb - sigma0) / dbar if dbar > 0 else 0.0
        sigma2.append(max(est, _SIGMA_INIT_FLOOR))
    return ThetaParams(beta=beta, sigma2=np.array(sigma2))


def _perturbed(theta: ThetaParams, rng: np.random.Generator) -> ThetaParams:
    beta = theta.beta + rng.normal(0.0, 0.1 * np.abs(theta.beta))
    sigma2 = theta.sigma2 * rng.uniform(0.5, 2.0, size=theta.sigma2.shape)
    sigma2[0] = max(sigma2[0], SIGMA0_FLOOR)
    return ThetaParams(beta=beta, sigma2=np.maximum(sigma2, 0.0))


def _check_rank(design: GroupedDesign) -> None:
    if design.k == 0:
        return
    x_all = np.vstack([g.X for g in design.groups])
    if np.linalg.matrix_rank(x_all) < design.k:
        raise DimensionMismatch("stacked fixed-effect matrix is rank deficient")


# ---------------------------------------------------------------------------
# projected quasi-Newton core
# ---------------------------------------------------------------------------


@dataclass
class _MinState:
    x: np.ndarray
    f: float
    grad: np.ndarray
    pgrad_norm: float
    iterations: int
    converged: bool
    trace: list


def _projected_gradient(x, grad, lower):
    pg = grad.copy()
    at_bound = x <= lower + 1e-14
    pg[at_bound & (grad > 0)] = 0.0
    return pg


def _minimize_projected(fval, fgrad, x0, lower, cfg: SolverConfig) -> _MinState:
    """Quasi-Newton descent with Armijo backtracking and bound projection.

    Convergence requires a small relative parameter step, a small objective
    decrease, and a small projected gradient, so a reported optimum is a
    genuine stationary point of the bound-constrained problem.
    """
    x = np.maximum(np.asarray(x0, dtype=float), lower)
    f, g = fgrad(x)
    m = x.size
    h = np.eye(m)
    scaled = False
    active_prev = x <= lower + 1e-14
    trace: list = []
    it = 0
    converged = False

    for it in range(1, cfg.max_iter + 1):
        pg = _projected_gradient(x, g, lower)
        pg_norm = float(np.linalg.norm(pg))
        if pg_norm <= _GRAD_TOL_POLISH * max(1.0, abs(f)):
            converged = True
            break

        d = -(h @ pg)
        d[active_prev & (g > 0)] = 0.0
        if float(pg @ d) >= 0.0:  # stale curvature, fall back to steepest descent
            d = -pg

        # backtracking Armijo search on the projected path
        t = 1.0
        accepted = False
        for _ in range(60):
            x_try = np.maximum(x + t * d, lower)
            s = x_try - x
            gs = float(g @ s)
            if gs >= 0.0 and not np.allclose(s, 0.0):
                t *= _ARMIJO_SHRINK
                continue
            f_try = fval(x_try)
            if np.isfinite(f_try) and f_try <= f + _ARMIJO_C1 * gs:
                accepted = True
                break
            t *= _ARMIJO_SHRINK
        if not accepted:
            # no further progress possible; stationary to working precision
            converged = pg_norm <= _GRAD_TOL * max(1.0, abs(f))
            break

        f_new, g_new = fgrad(x_try)
        s = x_try - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            if not scaled:
                h = np.eye(m) * (sy / float(y @ y))
                scaled = True
            rho = 1.0 / sy
            v = np.eye(m) - rho * np.outer(s, y)
            h = v @ h @ v.T + rho * np.outer(s, s)

        active = x_try <= lower + 1e-14
        if not np.array_equal(active, active_prev):
            h = np.eye(m) * (sy / float(y @ y)) if sy > 0 else np.eye(m)
            scaled = True
        active_prev = active

        rel_step = float(np.linalg.norm(s)) / max(1.0, float(np.linalg.norm(x)))
        decrease = f - f_new
        x, f, g = x_try, f_new, g_new
        trace.append((f, t))

        if rel_step < cfg.tol_theta and decrease < cfg.tol_obj:
            pg = _projected_gradient(x, g, lower)
            if float(np.linalg.norm(pg)) <= _GRAD_TOL * max(1.0, abs(f)):
                converged = True
                break

    pg = _projected_gradient(x, g, lower)
    return _MinState(
        x=x,
        f=f,
        grad=g,
        pgrad_norm=float(np.linalg.norm(pg)),
        iterations=it,
        converged=converged,
        trace=trace,
    )


def _objective_closures(design: GroupedDesign, cfg: DpdConfig):
    """Value-only and value+gradient callables over the packed theta vector."""
    k = design.k

    def fgrad(vec: np.ndarray) -> tuple[float, np.ndarray]:
        theta = ThetaParams.from_vector(vec, k)
        try:
            ev = eval_objective(design, theta, cfg)
        except NotPositiveDefinite:
            return np.inf, np.zeros(vec.size)
        return ev.value, ev.grad_vector()

    def fval(vec: np.ndarray) -> float:
        theta = ThetaParams.from_vector(vec, k)
        try:
            cov = assemble_covariances(design, theta)
        except NotPositiveDefinite:
            return np.inf
        return _value_only(design, theta, cfg, cov)

    return fval, fgrad


def _value_only(design, theta, cfg, cov) -> float:
    alpha = cfg.alpha
    total = 0.0
    if design.is_balanced:
        resid = design.y_stack - design.x_stack @ theta.beta
        half = solve_triangular(cov.chol[0], resid.T, lower=True, check_finite=False)
        q = np.einsum("pi,pi->i", half, half)
        p = design.groups[0].n_obs
        logdet = float(cov.logdet[0])
        if alpha == 0.0:
            return 0.5 * (p * LOG_2PI + logdet) + 0.5 * float(np.mean(q))
        log_eta = -0.5 * p * alpha * LOG_2PI - 0.5 * alpha * logdet
        c1 = np.exp(log_eta - 0.5 * p * np.log1p(alpha))
        e = np.exp(log_eta - 0.5 * alpha * q)
        return c1 - (1.0 + 1.0 / alpha) * float(np.mean(e))
    for i, g in enumerate(design.groups):
        resid = g.y - g.X @ theta.beta
        half = solve_triangular(cov.chol[i], resid, lower=True, check_finite=False)
        q = float(half @ half)
        logdet = float(cov.logdet[i])
        if alpha == 0.0:
            total += 0.5 * (g.n_obs * LOG_2PI + logdet + q)
        else:
            log_eta = -0.5 * g.n_obs * alpha * LOG_2PI - 0.5 * alpha * logdet
            c1 = np.exp(log_eta - 0.5 * g.n_obs * np.log1p(alpha))
            total += c1 - (1.0 + 1.0 / alpha) * np.exp(log_eta - 0.5 * alpha * q)
    return total / design.n_groups


def _lower_bounds(design: GroupedDesign) -> np.ndarray:
    lower = np.full(design.k + design.r + 1, -np.inf)
    lower[design.k] = SIGMA0_FLOOR
    lower[design.k + 1 :] = 0.0
    return lower


def _result_from_state(design, cfg, state: _MinState) -> FitResult:
    theta = ThetaParams.from_vector(state.x, design.k)
    return FitResult(
        theta_hat=theta,
        objective=state.f,
        converged=state.converged,
        iterations=state.iterations,
        grad_norm=state.pgrad_norm,
        weights=eval_weights(design, theta, cfg),
        trace=tuple(state.trace),
    )


# ---------------------------------------------------------------------------
# public fitting interface
# ---------------------------------------------------------------------------


def fit(
    design: GroupedDesign,
    cfg: DpdConfig,
    solver: SolverConfig | None = None,
    init: ThetaParams | None = None,
) -> FitResult:
    """Minimize the objective over the full parameter vector.

    Runs the projected quasi-Newton solver from the default (or supplied)
    initializer plus ``solver.restarts`` perturbed copies of it, and returns
    the converged run with the lowest objective.  Raises ``DidNotConverge``
    (carrying the best point seen) if no run converges.
    """
    solver = solver or SolverConfig()
    _check_rank(design)
    start = init if init is not None else initial_theta(design)
    fval, fgrad = _objective_closures(design, cfg)
    lower = _lower_bounds(design)

    rng = np.random.default_rng(0)  # fixed stream: fits are deterministic
    states = []
    for attempt in range(solver.restarts + 1):
        theta0 = start if attempt == 0 else _perturbed(start, rng)
        states.append(_minimize_projected(fval, fgrad, theta0.as_vector(), lower, solver))

    converged = [s for s in states if s.converged]
    if not converged:
        best = min(states, key=lambda s: s.f)
        raise DidNotConverge(_result_from_state(design, cfg, best))
    best = min(converged, key=lambda s: s.f)
    return _result_from_state(design, cfg, best)


def fixed_point_beta_update(
    design: GroupedDesign,
    theta: ThetaParams,
    cfg: DpdConfig,
) -> np.ndarray:
    """One weighted generalized-least-squares update of the fixed effects.

    Solves ``(sum_i w_i X_i'V^{-1}X_i) beta = sum_i w_i X_i'V^{-1}y_i`` with
    the weights evaluated at the current parameters.  Requires a balanced
    design so that ``V`` is common to all groups.
    """
    if not design.is_balanced:
        raise NotBalanced("the fixed-point update requires a balanced design")
    cov = assemble_covariances(design, theta)
    w = eval_weights(design, theta, cfg, cov)
    low = cov.chol[0]
    xs = design.x_stack  # (n, p, k)
    ys = design.y_stack  # (n, p)
    n, p, k = xs.shape
    flat = xs.transpose(1, 0, 2).reshape(p, n * k)
    vix = cho_solve((low, True), flat).reshape(p, n, k).transpose(1, 0, 2)
    viy = cho_solve((low, True), ys.T).T
    lhs = np.einsum("i,ipk,ipl->kl", w, xs, vix)
    rhs = np.einsum("i,ipk,ip->k", w, xs, viy)
    return np.linalg.solve(lhs, rhs)


def fit_balanced_fixed_point(
    design: GroupedDesign,
    cfg: DpdConfig,
    solver: SolverConfig | None = None,
    init: ThetaParams | None = None,
) -> FitResult:
    """Alternate the closed-form fixed-effect update with a variance-component
    sub-minimization until the joint step tolerance is met."""
    if not design.is_balanced:
        raise NotBalanced("all groups must share a common size and Z matrices")
    solver = solver or SolverConfig()
    _check_rank(design)
    theta = init if init is not None else initial_theta(design)
    k = design.k

    sub_solver = SolverConfig(
        max_iter=200, tol_theta=solver.tol_theta, tol_obj=solver.tol_obj, restarts=0
    )
    lower_sigma = np.concatenate([[SIGMA0_FLOOR], np.zeros(design.r)])
    fval_full, fgrad_full = _objective_closures(design, cfg)

    f_prev = fval_full(theta.as_vector())
    trace: list = []
    converged = False
    it = 0
    for it in range(1, solver.max_iter + 1):
        beta_new = fixed_point_beta_update(design, theta, cfg)

        def sub_fgrad(sig, beta=beta_new):
            th = ThetaParams(beta=beta, sigma2=sig)
            try:
                ev = eval_objective(design, th, cfg)
            except NotPositiveDefinite:
                return np.inf, np.zeros(sig.size)
            return ev.value, ev.grad_sigma2

        def sub_fval(sig, beta=beta_new):
            th = ThetaParams(beta=beta, sigma2=sig)
            try:
                cov = assemble_covariances(design, th)
            except NotPositiveDefinite:
                return np.inf
            return _value_only(design, th, cfg, cov)

        sub = _minimize_projected(
            sub_fval, sub_fgrad, theta.sigma2, lower_sigma, sub_solver
        )
        theta_new = ThetaParams(beta=beta_new, sigma2=sub.x)
        step = theta_new.as_vector() - theta.as_vector()
        rel_step = float(np.linalg.norm(step)) / max(
            1.0, float(np.linalg.norm(theta.as_vector()))
        )
        f_new = sub.f
        trace.append((f_new, rel_step))
        decrease = f_prev - f_new
        theta, f_prev = theta_new, f_new
        if rel_step < solver.tol_theta and abs(decrease) < max(solver.tol_obj, 1e-14):
            _, grad = fgrad_full(theta.as_vector())
            pgrad = _projected_gradient(
                theta.as_vector(), grad, _lower_bounds(design)
            )
            if float(np.linalg.norm(pgrad)) <= _GRAD_TOL * max(1.0, abs(f_new)):
                converged = True
                break

    _, grad = fgrad_full(theta.as_vector())
    pgrad = _projected_gradient(theta.as_vector(), grad, _lower_bounds(design))
    result = FitResult(
        theta_hat=theta,
        objective=f_prev,
        converged=converged,
        iterations=it,
        grad_norm=float(np.linalg.norm(pgrad)),
        weights=eval_weights(design, theta, cfg),
        trace=tuple(trace),
    )
    if not converged:
        raise DidNotConverge(result)
    return result


def fit_alpha_path(
    design: GroupedDesign,
    alphas,
    solver: SolverConfig | None = None,
) -> list[FitResult]:
    """Fit along an increasing tuning-parameter grid with warm starts.

    The grid must start at zero; each subsequent fit is started from the
    previous solution.  A non-converged entry is recorded (``converged``
    False) and the path continues from its best point.
    """
    alphas = tuple(float(a) for a in alphas)
    if not alphas or alphas[0] != 0.0 or any(
        b <= a for a, b in zip(alphas, alphas[1:])
    ):
        raise DimensionMismatch("alpha grid must be increasing and start at 0")
    solver = solver or SolverConfig()

    results: list[FitResult] = []
    warm: ThetaParams | None = None
    for alpha in alphas:
        try:
            res = fit(design, DpdConfig(alpha=alpha), solver, init=warm)
        except DidNotConverge as exc:
            res = exc.result
        results.append(res)
        warm = res.theta_hat
    return results
