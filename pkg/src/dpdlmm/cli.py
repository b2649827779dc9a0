"""Command-line front end: fit from CSV, run studies, emit diagnostics.

Input data use a long CSV format: one row per observation with columns
``group_id``, ``y``, fixed-effect columns ``x1..xk`` and random-design
columns ``z{j}_{l}`` (factor ``j``, level column ``l``, both numbered from
1).  Rows of a group are taken in file order as the coordinates of that
group's response vector.

Exit codes: 0 on success, 2 on input errors (with row/column diagnostics),
3 on numerical failure (no convergence at any requested tuning value).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import re
import sys

import numpy as np

from .asymptotics import asymptotic_info, are_curve, wald_tests
from .divergence import DpdConfig
from .errors import DpdlmmError, SingularPsi
from .estimator import FitResult, SolverConfig, fit_alpha_path
from .model import GroupBlock, GroupedDesign, ThetaParams
from .robustness import influence_all, sensitivities
from .simulation import (
    ContaminationSpec,
    CrossedDesignSpec,
    McScenario,
    default_alpha_menu,
    run_study,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

IF_GRID = np.round(np.arange(-10.0, 10.0 + 1e-9, 0.1), 10)

_X_COL = re.compile(r"^x(\d+)$")
_Z_COL = re.compile(r"^z(\d+)_(\d+)$")


class CliInputError(Exception):
    """Raised for malformed CLI inputs; maps to exit code 2."""


def _fmt(value) -> str:
    """Format a number with 17 significant digits (binary round-trip safe)."""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        return format(value, ".17g")
    return str(value)


# ---------------------------------------------------------------------------
# long-format CSV ingestion
# ---------------------------------------------------------------------------


def read_long_csv(path: str) -> GroupedDesign:
    """Parse a long-format dataset into a grouped design.

    Raises ``CliInputError`` with a row/column diagnostic on any malformed
    header or cell.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CliInputError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if not rows:
        raise CliInputError(f"{path}: file is empty")
    header = [h.strip() for h in rows[0]]
    data_rows = rows[1:]
    if not data_rows:
        raise CliInputError(f"{path}: no data rows after the header")

    if "group_id" not in header or "y" not in header:
        raise CliInputError(f"{path}: header must contain 'group_id' and 'y' columns")
    gid_idx = header.index("group_id")
    y_idx = header.index("y")

    x_cols: dict[int, int] = {}
    z_cols: dict[int, dict[int, int]] = {}
    for pos, name in enumerate(header):
        if pos in (gid_idx, y_idx):
            continue
        m = _X_COL.match(name)
        if m:
            x_cols[int(m.group(1))] = pos
            continue
        m = _Z_COL.match(name)
        if m:
            z_cols.setdefault(int(m.group(1)), {})[int(m.group(2))] = pos
            continue
        raise CliInputError(
            f"{path}: column '{name}' matches neither x<i> nor z<j>_<l>"
        )
    k = len(x_cols)
    if sorted(x_cols) != list(range(1, k + 1)):
        raise CliInputError(f"{path}: x columns must be numbered x1..x{k} contiguously")
    r = len(z_cols)
    if sorted(z_cols) != list(range(1, r + 1)):
        raise CliInputError(f"{path}: z factors must be numbered z1_.., z{r}_.. contiguously")
    z_order = []
    for j in range(1, r + 1):
        levels = sorted(z_cols[j])
        if levels != list(range(1, len(levels) + 1)):
            raise CliInputError(
                f"{path}: levels of factor z{j} must be numbered 1..{len(levels)}"
            )
        z_order.append([z_cols[j][l] for l in levels])
    x_order = [x_cols[i] for i in range(1, k + 1)]

    def parse(row_num: int, row: list[str], pos: int) -> float:
        try:
            return float(row[pos])
        except (ValueError, IndexError) as exc:
            raise CliInputError(
                f"{path}: row {row_num}, column '{header[pos]}': "
                f"cannot parse {row[pos] if pos < len(row) else '<missing>'!r}"
            ) from exc

    by_group: dict[str, list[tuple[float, list[float], list[list[float]]]]] = {}
    order: list[str] = []
    for row_num, row in enumerate(data_rows, start=2):
        if len(row) != len(header):
            raise CliInputError(
                f"{path}: row {row_num} has {len(row)} fields, header has {len(header)}"
            )
        gid = row[gid_idx].strip()
        y = parse(row_num, row, y_idx)
        xs = [parse(row_num, row, pos) for pos in x_order]
        zs = [[parse(row_num, row, pos) for pos in cols] for cols in z_order]
        if gid not in by_group:
            by_group[gid] = []
            order.append(gid)
        by_group[gid].append((y, xs, zs))

    groups = []
    for gid in order:
        recs = by_group[gid]
        y = np.array([rec[0] for rec in recs])
        x = np.array([rec[1] for rec in recs]).reshape(len(recs), k)
        z = tuple(
            np.array([rec[2][j] for rec in recs]) for j in range(r)
        )
        groups.append(GroupBlock(y=y, X=x, Z=z))
    return GroupedDesign(groups=tuple(groups))


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _parse_alpha_list(text: str) -> list[float]:
    try:
        vals = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise CliInputError(f"cannot parse alpha list {text!r}") from exc
    if not vals:
        raise CliInputError("alpha list is empty")
    if any(a < 0 for a in vals):
        raise CliInputError("alpha values must be nonnegative")
    return sorted(set(vals))


def _solver_from_args(args) -> SolverConfig:
    return SolverConfig(
        max_iter=args.max_iter,
        tol_theta=args.tol_theta,
        tol_obj=args.tol_obj,
        restarts=args.restarts,
    )


def _fit_path(design: GroupedDesign, alphas: list[float], solver: SolverConfig):
    path = alphas if alphas[0] == 0.0 else [0.0] + alphas
    results = fit_alpha_path(design, path, solver)
    return [(a, res) for a, res in zip(path, results) if a in alphas]


def _fit_record(design: GroupedDesign, alpha: float, res: FitResult) -> dict:
    record = {
        "alpha": alpha,
        "beta": list(res.theta_hat.beta),
        "sigma2": list(res.theta_hat.sigma2),
        "objective": res.objective,
        "converged": res.converged,
        "iterations": res.iterations,
        "grad_norm": res.grad_norm,
        "weights": list(res.weights),
    }
    try:
        info = asymptotic_info(design, res.theta_hat, DpdConfig(alpha=alpha))
        rows = wald_tests(res, info)
        record["se"] = [r.se for r in rows]
        record["z"] = [r.z for r in rows]
        record["p_values"] = [r.p_value for r in rows]
        record["boundary_components"] = list(info.boundary)
    except SingularPsi:
        record["se"] = None
        record["z"] = None
        record["p_values"] = None
        record["boundary_components"] = None
    return record


def _write_json(path: str, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    design = read_long_csv(args.data)
    alphas = _parse_alpha_list(args.alpha)
    solver = _solver_from_args(args)
    fits = _fit_path(design, alphas, solver)
    payload = {
        "alphas": alphas,
        "n_groups": design.n_groups,
        "k": design.k,
        "r": design.r,
        "fits": [_fit_record(design, a, res) for a, res in fits],
    }
    _write_json(args.out, payload)
    if not any(res.converged for _, res in fits):
        print("no tuning value converged", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _scenario_from_json(path: str) -> tuple[McScenario, list[float] | None]:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise CliInputError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliInputError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise CliInputError(f"{path}: scenario must be a JSON object")
    try:
        design = CrossedDesignSpec(
            **{k: tuple(v) if k == "beta0" else v for k, v in raw.get("design", {}).items()}
        )
        cells: list[ContaminationSpec] = []
        for entry in raw.get("contaminations", [{}]):
            entry = dict(entry)
            grid = entry.pop("omega0_grid", None)
            if grid is not None:
                cells.extend(
                    ContaminationSpec(**{**entry, "omega0": float(w)}) for w in grid
                )
            else:
                cells.append(ContaminationSpec(**entry))
        scenario = McScenario(design=design, contaminations=tuple(cells))
    except (TypeError, DpdlmmError) as exc:
        raise CliInputError(f"{path}: bad scenario ({exc})") from exc
    alphas = raw.get("alphas")
    if alphas is not None:
        alphas = [float(a) for a in alphas]
    return scenario, alphas


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("MDPDE_THREADS")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise CliInputError(f"MDPDE_THREADS={env!r} is not an integer") from exc
    return os.cpu_count() or 1


def _print_summary(report) -> None:
    clean = [c for c in report.cells if c.epsilon == 0.0]
    if clean:
        print("relative efficiency on clean cells (baseline alpha = 0)")
        print(f"{'alpha':>8} {'MSMD eff.':>10} {'MKLD eff.':>10}")
        for c in clean:
            print(f"{c.alpha:>8.4f} {c.msmd_efficiency:>10.3f} {c.mkld_efficiency:>10.3f}")
    contaminated = sorted(
        {(c.epsilon, c.leverage) for c in report.cells if c.epsilon > 0.0}
    )
    for eps, lev in contaminated:
        print(f"max over omega0 at epsilon={eps:g}, {lev}")
        print(f"{'alpha':>8} {'MSMD':>12} {'MKLD':>14}")
        alphas = sorted({c.alpha for c in report.cells})
        for a in alphas:
            try:
                m = report.max_over_omega0(a, eps, lev, "msmd")
                kk = report.max_over_omega0(a, eps, lev, "mkld")
            except KeyError:
                continue
            print(f"{a:>8.4f} {m:>12.4g} {kk:>14.4g}")


def cmd_simulate(args) -> int:
    scenario, alphas = _scenario_from_json(args.scenario)
    if alphas is None:
        alphas = list(default_alpha_menu(scenario.design.p))
    report = run_study(
        scenario,
        alphas,
        reps=args.reps,
        base_seed=args.seed,
        threads=_threads(args),
    )
    _write_csv(
        args.out + ".csv",
        ["estimator", "alpha", "epsilon", "omega0", "leverage", "metric", "value"],
        report.to_rows(),
    )
    _write_json(args.out + ".json", report.to_dict())
    _print_summary(report)
    failures = sum(c.fit_failures for c in report.cells)
    if failures:
        print(f"warning: {failures} fit failures across all cells", file=sys.stderr)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    design = read_long_csv(args.data)
    if not 0 <= args.direction < design.n_groups:
        raise CliInputError(
            f"--direction {args.direction} out of range [0, {design.n_groups})"
        )
    alphas = _parse_alpha_list(args.alpha_grid)
    solver = _solver_from_args(args)
    fits = _fit_path(design, alphas, solver)
    if not all(res.converged for _, res in fits):
        bad = [a for a, res in fits if not res.converged]
        print(f"fit did not converge at alpha in {bad}", file=sys.stderr)
        return EXIT_NUMERIC

    sens_rows = []
    reports = []
    for alpha, res in fits:
        rep = sensitivities(design, res.theta_hat, DpdConfig(alpha=alpha), args.direction)
        reports.append(rep)
        sens_rows.append((alpha, rep.ges, rep.sss))

    theta0 = fits[0][1].theta_hat if fits[0][0] == 0.0 else None
    if theta0 is None:
        theta0 = fits[0][1].theta_hat
    n_params = design.k + design.r + 1
    alpha_vals = [a for a, _ in fits]
    are_cols = [
        are_curve(design, theta0, alpha_vals, idx) for idx in range(n_params)
    ]
    param_names = [f"beta_{j}" for j in range(design.k)] + [
        f"sigma2_{j}" for j in range(design.r + 1)
    ]
    are_rows = [
        (alpha_vals[i], *[col[i] for col in are_cols]) for i in range(len(alpha_vals))
    ]

    if_rows = []
    for alpha, res in fits:
        cfg = DpdConfig(alpha=alpha)
        for t in IF_GRID:
            t_list = [np.full(g.n_obs, t) for g in design.groups]
            if_beta, if_sigma = influence_all(design, res.theta_hat, cfg, t_list)
            if_rows.append(
                (
                    alpha,
                    float(t),
                    float(np.linalg.norm(if_beta)),
                    float(np.linalg.norm(if_sigma)),
                    *if_beta,
                    *if_sigma,
                )
            )

    base = args.out
    _write_csv(base + "_sensitivity.csv", ["alpha", "ges", "sss"], sens_rows)
    _write_csv(base + "_are.csv", ["alpha", *param_names], are_rows)
    _write_csv(
        base + "_influence.csv",
        ["alpha", "t", "if_beta_norm", "if_sigma_norm", *[f"if_{n}" for n in param_names]],
        if_rows,
    )
    payload = {
        "direction": args.direction,
        "balanced": design.is_balanced,
        "alpha_star": reports[0].alpha_star,
        "alpha_bar": reports[0].alpha_bar,
        "sensitivities": [
            {"alpha": a, "ges": "inf" if math.isinf(g) else g, "sss": "inf" if math.isinf(s) else s}
            for a, g, s in sens_rows
        ],
    }
    _write_json(base + ".json", payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_solver_args(sub) -> None:
    sub.add_argument("--max-iter", type=int, default=500)
    sub.add_argument("--tol-theta", type=float, default=1e-8)
    sub.add_argument("--tol-obj", type=float, default=1e-10)
    sub.add_argument("--restarts", type=int, default=3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpdlmm",
        description="Robust linear mixed models by minimum density power divergence.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p_fit = subs.add_parser("fit", help="fit a long-format CSV along a tuning grid")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--alpha", required=True, help="comma-separated tuning values")
    p_fit.add_argument("--out", required=True, help="output JSON path")
    _add_solver_args(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_sim = subs.add_parser("simulate", help="run a Monte Carlo contamination study")
    p_sim.add_argument("--scenario", required=True, help="scenario JSON path")
    p_sim.add_argument("--reps", type=int, required=True)
    p_sim.add_argument("--seed", type=int, required=True)
    p_sim.add_argument("--out", required=True, help="output path prefix")
    p_sim.add_argument("--threads", type=int, default=None)
    p_sim.set_defaults(func=cmd_simulate)

    p_diag = subs.add_parser("diagnose", help="robustness diagnostics for a dataset")
    p_diag.add_argument("--data", required=True)
    p_diag.add_argument("--alpha-grid", required=True)
    p_diag.add_argument("--direction", type=int, required=True)
    p_diag.add_argument("--out", required=True, help="output path prefix")
    _add_solver_args(p_diag)
    p_diag.set_defaults(func=cmd_diagnose)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DpdlmmError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
