"""``mosynth`` command line: fit, diagnose, infer, simulate.

Exit codes: 0 success, 2 invalid input or arguments, 3 solver did not reach
its tolerance (``fit`` and ``infer``, unless ``--allow-nonconverged``).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from mosynth import conformal, diagnostics, simlab, simplex
from mosynth.panel import PanelData, PanelError, TreatmentConfig, load_config, load_panel, _parse_period
from mosynth.weights import ObjectiveSpec, fit, gaps, heuristic_nu, write_weights

log = logging.getLogger("mosynth")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    if data:
        p.add_argument("--input", required=True, help="long-format CSV: unit,period,outcome,value")
        p.add_argument("--treated", help="treated unit label (overrides config)")
        p.add_argument("--t0", help="last pre-treatment period label (overrides config)")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="parallel workers; results do not depend on it")
    p.add_argument("--tol", type=float, default=simplex.DEFAULT_TOL)
    p.add_argument("--max-iter", type=int, default=simplex.DEFAULT_MAX_ITER)
    p.add_argument("-v", "--verbose", action="store_true")


def _objective_args(p: argparse.ArgumentParser, default: str) -> None:
    p.add_argument(
        "--objective",
        choices=["separate", "concatenated", "averaged", "combined"],
        default=default,
    )
    p.add_argument("--outcome", help="outcome label or 0-based index for --objective separate")
    p.add_argument("--nu", default="heuristic", help="combined weight on q_avg, or 'heuristic'")
    p.add_argument("--no-standardize", action="store_true", help="skip per-outcome standardization")
    p.add_argument("--allow-nonconverged", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mosynth", description="Synthetic control weights from multiple outcome series"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit weights and emit gaps")
    _common(p)
    _objective_args(p, "combined")

    p = sub.add_parser("diagnose", help="low-rank and sensitivity diagnostics")
    _common(p)
    p.add_argument(
        "--which",
        choices=["all", "spectrum", "holdout", "frontier", "condition"],
        default="all",
    )
    p.add_argument("--holdout-nu", type=float, default=0.5)
    p.add_argument("--raw", action="store_true", help="spectrum of untransformed values")

    p = sub.add_parser("infer", help="conformal tests of sharp nulls")
    _common(p)
    _objective_args(p, "combined")
    p.add_argument("--null", default="zero", help="'zero' or comma-separated tau0 per outcome")
    p.add_argument("--period", default="last", help="'last', 'all', or a post period label")
    p.add_argument("--joint", action="store_true", help="joint test over all post periods")
    p.add_argument("--q", default="1", help="norm order (>= 1) or 'inf'")
    p.add_argument("--scheme", choices=["iid", "moving-block"], help="joint-test permutations")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--avg-grid", help="lo:hi:n grid for the average-effect interval")

    p = sub.add_parser("simulate", help="Monte Carlo bias study")
    _common(p, data=False)
    p.add_argument("--preset", choices=sorted(simlab.PRESETS), default="appendix-c-rho1")
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--rho", type=float)
    p.add_argument("--t0-periods", dest="t0_periods", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--units", type=int)
    p.add_argument("--rescale", choices=["affine", "spread"])
    p.add_argument("--probe-reps", type=int, default=0, help="also run spectral/condition probes")
    p.add_argument("--size-reps", type=int, default=0, help="also run a conformal size study")
    p.add_argument("--alpha", type=float, default=0.1, help="nominal level for the size study")
    return parser


def _outdir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _load(args) -> PanelData:
    raw: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    if args.treated:
        raw["treated_unit"] = args.treated
    if args.t0:
        raw["t0"] = args.t0
    cfg: TreatmentConfig = load_config(raw)
    return load_panel(args.input, cfg)


def _outcome_index(panel: PanelData, text: str | None) -> int:
    if text is None:
        return 0
    if text in panel.outcomes:
        return panel.outcomes.index(text)
    try:
        k = int(text)
    except ValueError:
        raise UsageError(f"unknown outcome {text!r}") from None
    if not 0 <= k < panel.n_outcomes:
        raise UsageError(f"outcome index {k} out of range")
    return k


def _resolve_spec(args, panel: PanelData) -> tuple[ObjectiveSpec, float | None]:
    kind = args.objective
    if kind == "separate":
        return ObjectiveSpec.separate(_outcome_index(panel, args.outcome)), None
    if kind == "concatenated":
        return ObjectiveSpec.concatenated(), None
    if kind == "averaged":
        return ObjectiveSpec.averaged(), None
    if args.nu == "heuristic":
        nu = heuristic_nu(panel, tol=args.tol, max_iter=args.max_iter, standardize=not args.no_standardize)
    else:
        try:
            nu = float(args.nu)
        except ValueError:
            raise UsageError(f"--nu must be a number or 'heuristic', got {args.nu!r}") from None
    return ObjectiveSpec.combined(nu), nu


def _standardize_flag(args, spec: ObjectiveSpec) -> bool:
    return spec.multi_outcome and not args.no_standardize


def cmd_fit(args) -> int:
    panel = _load(args)
    out = _outdir(args)
    spec, nu = _resolve_spec(args, panel)
    res = fit(panel, spec, tol=args.tol, max_iter=args.max_iter, standardize=_standardize_flag(args, spec))
    _write(out / "weights.csv", write_weights(res.donors, res.gamma))
    _write(out / "gaps.csv", gaps(panel, res.solution, res.state).write())
    report = {
        "objective": spec.label(),
        "nu": nu,
        "imbalance": res.imbalance.as_dict(),
        "outcomes": list(panel.outcomes),
        "solver": {
            "objective": res.solution.objective,
            "gap": res.solution.gap,
            "iterations": res.solution.iterations,
            "converged": res.solution.converged,
        },
    }
    _write(out / "imbalance.json", _json(report))
    _write(out / "summary.json", _json({"command": "fit", "outputs": ["weights.csv", "gaps.csv", "imbalance.json"], **report}))
    if nu is not None:
        print(f"nu = {nu:.6g}")
    print(f"q_cat = {res.imbalance.q_cat:.6g}  q_avg = {res.imbalance.q_avg:.6g}")
    if not res.solution.converged and not args.allow_nonconverged:
        raise NumericError(f"solver stopped with gap {res.solution.gap:.3g} > tol {args.tol:g}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    panel = _load(args)
    out = _outdir(args)
    which = {"spectrum", "holdout", "frontier", "condition"} if args.which == "all" else {args.which}
    outputs, summary = [], {"command": "diagnose"}
    if "holdout" in which and panel.n_outcomes < 2:
        if args.which == "holdout":
            raise UsageError("holdout diagnostic requires K ≥ 2 outcomes")
        which.discard("holdout")
        summary["holdout"] = "skipped: requires K ≥ 2 outcomes"
    if "spectrum" in which:
        rep = diagnostics.spectrum(panel, raw=args.raw)
        _write(out / "spectrum.csv", rep.write())
        outputs.append("spectrum.csv")
        summary["spectrum"] = {"shape": list(rep.shape), "top_share": rep.top_share}
    if "holdout" in which:
        rep = diagnostics.holdout_fit(panel, args.holdout_nu, tol=args.tol, max_iter=args.max_iter)
        _write(out / "holdout.csv", rep.write())
        outputs.append("holdout.csv")
        summary["holdout"] = {o: float(r) for o, r in zip(rep.outcomes, rep.ratio)}
    if "frontier" in which:
        pts = diagnostics.frontier(panel, tol=args.tol, max_iter=args.max_iter)
        _write(out / "frontier.csv", diagnostics.write_frontier(pts))
        outputs.append("frontier.csv")
    if "condition" in which:
        ratio = diagnostics.condition_ratio(panel)
        cond = {"condition_increase_pct": ratio if math.isfinite(ratio) else None, "singular": not math.isfinite(ratio)}
        _write(out / "condition.json", _json(cond))
        outputs.append("condition.json")
        summary["condition"] = cond
    summary["outputs"] = outputs
    _write(out / "summary.json", _json(summary))
    return EXIT_OK


def _parse_q(text: str) -> float:
    if text.lower() in ("inf", "infinity"):
        return math.inf
    try:
        q = float(text)
    except ValueError:
        raise UsageError(f"--q must be a number >= 1 or 'inf', got {text!r}") from None
    if q < 1:
        raise UsageError("--q must be >= 1")
    return q


def _parse_null(text: str, k: int) -> tuple[float, ...]:
    if text == "zero":
        return (0.0,) * k
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"bad --null {text!r}") from None
    if len(vals) == 1:
        vals = vals * k
    if len(vals) != k:
        raise UsageError(f"--null needs 1 or {k} values")
    return vals


def _parse_grid(text: str) -> np.ndarray:
    try:
        lo, hi, n = text.split(":")
        return np.linspace(float(lo), float(hi), int(n))
    except ValueError:
        raise UsageError(f"--avg-grid must look like lo:hi:n, got {text!r}") from None


def cmd_infer(args) -> int:
    panel = _load(args)
    out = _outdir(args)
    spec, nu = _resolve_spec(args, panel)
    q = _parse_q(args.q)
    tau = _parse_null(args.null, panel.n_outcomes)
    std = _standardize_flag(args, spec)
    kw = dict(standardize=std, tol=args.tol, max_iter=args.max_iter)
    rows = []
    if args.joint:
        null = conformal.NullSpec(tau)
        res = conformal.test_null_joint(panel, spec, null, q, scheme=args.scheme or "moving-block", seed=args.seed, **kw)
        rows.append((null, res))
    else:
        post = panel.periods[panel.t0 :]
        if args.period == "all":
            targets = list(post)
        elif args.period == "last":
            targets = [post[-1]]
        else:
            targets = [_parse_period(args.period)]
        for period in targets:
            null = conformal.NullSpec(tau, period)
            rows.append((null, conformal.test_null(panel, spec, null, q, **kw)))
    _write(out / "tests.csv", conformal.write_results(rows))
    summary = {
        "command": "infer",
        "objective": spec.label(),
        "nu": nu,
        "q": args.q,
        "tests": [
            {"periods": [str(p) for p in r.post_periods], "scheme": r.scheme, "p_value": r.p_value}
            for _, r in rows
        ],
        "outputs": ["tests.csv"],
    }
    if args.avg_grid:
        iv = conformal.avg_effect_interval(panel, _parse_grid(args.avg_grid), args.alpha, q, tol=args.tol, max_iter=args.max_iter)
        summary["avg_effect_interval"] = {
            "alpha": args.alpha,
            "lower": None if iv.empty else iv.lower,
            "upper": None if iv.empty else iv.upper,
            "empty": iv.empty,
        }
    _write(out / "summary.json", _json(summary))
    for _, r in rows:
        print(f"{','.join(str(p) for p in r.post_periods)}: p = {r.p_value:.4g}")
    if not all(r.solution.converged for _, r in rows) and not args.allow_nonconverged:
        raise NumericError("solver did not converge for at least one refit")
    return EXIT_OK


def _sim_config(args) -> simlab.DgpConfig:
    cfg = simlab.PRESETS[args.preset]
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = simlab.DgpConfig.from_dict({**cfg.to_dict(), **json.load(fh)})
    return simlab.with_overrides(
        cfg,
        rho=args.rho,
        t0=args.t0_periods,
        k=args.k,
        noise_sigma=args.sigma,
        n_units=args.units,
        rescale=args.rescale,
        seed=args.seed,
    )


def cmd_simulate(args) -> int:
    cfg = _sim_config(args)
    out = _outdir(args)
    study = simlab.run_study(cfg, args.reps, jobs=args.jobs, tol=args.tol, max_iter=args.max_iter)
    _write(out / "replications.csv", study.write_replications())
    summary = study.summary()
    outputs = ["replications.csv", "summary.json"]
    if args.probe_reps:
        probes = simlab.probe_diagnostics(cfg, args.probe_reps, jobs=args.jobs)
        _write(out / "probes.json", _json(probes))
        summary["probes"] = probes
        outputs.append("probes.json")
    if args.size_reps:
        size_cfg = simlab.with_overrides(cfg, n_post=1, effect=0.0)
        size = simlab.size_study(size_cfg, args.size_reps, alpha=args.alpha, jobs=args.jobs, tol=args.tol, max_iter=args.max_iter)
        _write(out / "size.csv", size.write())
        summary["size"] = size.summary()
        outputs.append("size.csv")
    summary["command"] = "simulate"
    summary["outputs"] = outputs
    _write(out / "summary.json", _json(summary))
    for e, s in summary["estimators"].items():
        print(f"{e}: mean |bias| = {s['mean_abs_bias']:.4f}  mean imbalance = {s['mean_imbalance']:.4f}")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "diagnose": cmd_diagnose, "infer": cmd_infer, "simulate": cmd_simulate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, PanelError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
