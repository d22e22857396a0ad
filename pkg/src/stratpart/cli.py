"""Command-line front end.

::

    stratpart simulate  --preset paper2019 --seed 1 --out run/
    stratpart estimate  --input run/dataset.csv --signals run/signals.csv --out run/
    stratpart test      --input run/dataset.csv --signals run/signals.csv --out run/
    stratpart reproduce --input osf.csv --intents intents.csv --out repro/
    stratpart sweep     --preset paper2019 --seeds 50 --out sweep/

Result files are deterministic for fixed inputs and seed; wall-clock
information goes to ``metadata.json`` only.  Failures exit non-zero and
print a JSON error object on stderr (also written to ``error.json`` when an
output directory is known).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .belief import ate_by_group, fit_beta_regression, fit_fractional_probit, fit_ols_belief
from .domain import CLUSTER_KEYS, Dataset, ValidationError, load_dataset, write_dataset_csv, write_signals_csv
from .inference import (
    BootstrapSpec,
    beta_mle,
    bootstrap,
    exogeneity_test,
    kruskal_wallis,
    ks_test,
    late_validity_test,
    proportion_tests,
)
from .numerics import Estimate
from .participation import (
    DEFAULT_GRID,
    ESTIMATORS,
    ModelSpec,
    ape_functionals,
    delta_method,
    fit as fit_participation,
    margin_functionals,
)
from .presets import get_preset
from .simulator import generate_population, read_truth, write_truth

logger = logging.getLogger("stratpart")

# Published values targeted by ``reproduce`` and their default tolerances.
PUBLISHED = {
    "beta_hat": (-3.3062, 0.01),
    "ape_overall": (-0.6787, 0.01),
    "ate_below": (0.0425, 0.002),
    "ate_above": (-0.0554, 0.002),
    "margin_overall": (0.1099, 0.001),
    "exogeneity_chi2": (11.62, 0.5),
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _float_list(text: str) -> list:
    return [float(t) for t in text.replace(":", ",").split(",") if t.strip()]


def _key_list(text: str) -> tuple:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _clean(obj):
    """Make a result tree JSON-safe (numpy scalars, NaN -> None)."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _load(args) -> Dataset:
    if not args.input:
        raise UsageError("--input is required")
    path = Path(args.input)
    if not path.exists():
        raise UsageError(f"input file {path} does not exist")
    signals, intents = args.signals, args.intents
    if signals is None and intents is None:
        guess = path.with_name("signals.csv")
        if guess.exists():
            signals = guess
        else:
            raise UsageError("supply --signals or --intents")
    for p in (signals, intents):
        if p is not None and not Path(p).exists():
            raise UsageError(f"file {p} does not exist")
    return load_dataset(path, signals=signals, intents=intents, belief_scale=args.belief_scale)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_metadata(out: Path, args, started: float, extra=None) -> None:
    meta = {
        "command": args.command,
        "argv": sys.argv[1:],
        "started_unix": started,
        "elapsed_seconds": time.time() - started,
        "version": __version__,
        "backend": kernels.BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    if extra:
        meta.update(extra)
    _dump(meta, out / "metadata.json")


def _tolerances(args) -> dict:
    tol = {k: v[1] for k, v in PUBLISHED.items()}
    for item in args.tolerance or ():
        if "=" not in item:
            raise UsageError(f"--tolerance expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        if k not in tol:
            raise UsageError(f"unknown tolerance key {k!r}; known: {sorted(tol)}")
        tol[k] = float(v)
    return tol


# ---------------------------------------------------------------------------
# estimation pipeline


def belief_results(ds: Dataset) -> dict:
    out = {}
    ols = fit_ols_belief(ds)
    out["ols"] = {
        "theta": {n: Estimate.from_se(v, np.sqrt(ols.full_covariance[i, i])).as_dict()
                  for i, (n, v) in enumerate(zip(ols.param_names, ols.params))},
        "ate": ate_by_group(ols).as_dict(),
        "root_mse": ols.root_mse,
        "n": ols.n,
    }
    fp = fit_fractional_probit(ds)
    out["fractional_probit"] = {"ate": ate_by_group(fp).as_dict(), "converged": fp.converged}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        br = fit_beta_regression(ds)
    out["beta_regression"] = {"ate": ate_by_group(br).as_dict(), "log_precision": br.scale_hat,
                              "converged": br.converged}
    return out


def _pipeline(estimator: str, spec: ModelSpec, grid):
    """Dataset -> [coefficients..., margins..., APEs...] for the bootstrap."""

    def run(d: Dataset):
        f = fit_participation(d, estimator, spec)
        named = f.named_coef()
        vals = [named.get(n, np.nan) for n in run.coef_names]
        vals += [fn(f.params) for fn, _ in margin_functionals(f, d, grid).values()]
        vals += [fn(f.params) for fn, _ in ape_functionals(f, d).values()]
        return np.array(vals, dtype=float)

    run.coef_names = []
    return run


def participation_results(ds: Dataset, estimator: str, spec: ModelSpec, grid, boot: BootstrapSpec | None) -> dict:
    f = fit_participation(ds, estimator, spec)
    coefs = {}
    for i, name in enumerate(f.coef_names):
        coefs[name] = {f.se_label: f.estimate(name).as_dict()}
    margins = {k: delta_method(f, fn, g).as_dict() for k, (fn, g) in margin_functionals(f, ds, grid).items()}
    apes = {k: delta_method(f, fn, g).as_dict() for k, (fn, g) in ape_functionals(f, ds).items()}
    res = {
        "n": f.n,
        "coefficients": coefs,
        "margins": {k: {"delta": v} for k, v in margins.items()},
        "ape": {k: {"delta": v} for k, v in apes.items()},
        "fixed_effect_merges": f.design.fe.merges,
        "loglik": f.loglik,
    }
    if f.rho_hat is not None:
        res["rho"] = {"standard": Estimate.from_se(f.rho_hat, f.extra["rho_se"], "standard").as_dict()}
        res["sigma_e"] = {"standard": Estimate.from_se(f.sigma_e_hat, f.extra["sigma_e_se"], "standard").as_dict()}
        res["exogeneity_test"] = exogeneity_test(f).as_dict()
    if f.eta_hat is not None:
        res["eta_hat"] = f.eta_hat
        res["rho_implied"] = f.extra.get("rho_implied")
    for key in ("overid_chi2", "overid_df", "exogeneity_wald_chi2", "twostep_implied_loglik"):
        if key in f.extra:
            res[key] = f.extra[key]
    if boot is not None:
        pipe = _pipeline(estimator, spec, grid)
        pipe.coef_names = list(f.coef_names)
        br = bootstrap(ds, pipe, boot)
        labels = list(f.coef_names) + [("margin", k) for k in margins] + [("ape", k) for k in apes]
        for j, lab in enumerate(labels):
            est = Estimate.from_se(br.estimate[j], br.se[j], boot.label).as_dict()
            est["replications_used"] = int(br.completed_per_stat[j])
            if isinstance(lab, tuple):
                res["margins" if lab[0] == "margin" else "ape"][lab[1]][boot.label] = est
            else:
                coefs[lab][boot.label] = est
        res["bootstrap"] = {"completed": br.completed, "failed": br.failed, "clusters": br.n_clusters,
                            "replications": boot.replications, "method": boot.label}
    return res, f


def recovery_score(results: dict, truth) -> dict:
    score = {}
    for est, r in results.get("participation", {}).items():
        b = r["coefficients"]["delta_b"]
        first = next(iter(b.values()))
        lo = first["estimate"] - 1.959963984540054 * first["se"]
        hi = first["estimate"] + 1.959963984540054 * first["se"]
        score[est] = {"beta_error": first["estimate"] - truth.beta, "beta_covered": lo <= truth.beta <= hi}
        if "rho" in r:
            score[est]["rho_error"] = r["rho"]["standard"]["estimate"] - truth.rho
    ate = results["belief"]["ols"]["ate"]
    score["ate_below_error"] = ate["below"]["estimate"] - truth.theta[1]
    score["ate_above_error"] = ate["above"]["estimate"] - (truth.theta[1] + truth.theta[3])
    return score


def _write_margins_csv(path: Path, results: dict, grid) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["estimator", "delta_b", "estimate", "se", "ci_low", "ci_high", "se_method"])
        for est, r in results.get("participation", {}).items():
            for g in grid:
                for method, e in r["margins"][f"at_{g:g}"].items():
                    lo, hi = Estimate(e["estimate"], e["se"], e["p"], method).ci()
                    w.writerow([est, repr(float(g)), repr(e["estimate"]), repr(e["se"]), repr(lo), repr(hi), method])


def run_estimate(ds: Dataset, estimators, grid, boot, spec=ModelSpec()) -> dict:
    results = {"belief": belief_results(ds), "participation": {}, "errors": {}}
    for est in estimators:
        try:
            results["participation"][est], _ = participation_results(ds, est, spec, grid, boot)
        except Exception as exc:  # noqa: BLE001 - reported per estimator
            results["errors"][est] = {"type": type(exc).__name__, "message": str(exc)}
    results["sample"] = {"n": ds.n, "participation_share": float(ds.a.mean()), **ds.summary}
    return results


def _boot_spec(args) -> BootstrapSpec | None:
    if args.bootstrap_reps <= 0:
        return None
    keys = _key_list(args.cluster_keys) if args.cluster_keys else None
    return BootstrapSpec(args.bootstrap_reps, keys, args.seed)


def _estimators(args) -> list:
    ests = list(_key_list(args.estimators))
    bad = [e for e in ests if e not in ESTIMATORS]
    if bad:
        raise UsageError(f"unknown estimator(s) {bad}; choose from {list(ESTIMATORS)}")
    return ests


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    out = _out_dir(args)
    overrides = {}
    if args.n is not None:
        overrides["n"] = args.n
    if args.direct_effect is not None:
        overrides["direct_effect"] = args.direct_effect
    if args.rho is not None:
        overrides["rho"] = args.rho
    cfg = get_preset(args.preset, args.seed, **overrides)
    pop = generate_population(cfg)
    write_dataset_csv(pop.dataset, out / "dataset.csv")
    write_signals_csv(pop.dataset.signals, out / "signals.csv")
    write_truth(pop.truth, out / "truth.json", cfg, {"clip_counts": pop.clip_counts, "preset": args.preset})
    return 0


def cmd_estimate(args) -> int:
    out = _out_dir(args)
    ds = _load(args)
    grid = _float_list(args.grid)
    results = run_estimate(ds, _estimators(args), grid, _boot_spec(args))
    truth_path = Path(args.truth) if args.truth else Path(args.input).with_name("truth.json")
    if truth_path.exists():
        results["recovery"] = recovery_score(results, read_truth(truth_path))
    _dump(results, out / "results.json")
    _write_margins_csv(out / "margins.csv", results, grid)
    return 1 if results["errors"] else 0


def test_battery(ds: Dataset, seed: int = 0, late_reps: int = 500) -> dict:
    res = {}
    k = int(ds.z.sum())
    res["assignment_binomial"] = {"overall": proportion_tests(k, ds.n, 2.0 / 3.0).as_dict()}
    for loc in sorted(set(ds.location)):
        m = ds.location == loc
        res["assignment_binomial"][loc] = proportion_tests(int(ds.z[m].sum()), int(m.sum()), 2.0 / 3.0).as_dict()
    treated = ds.z == 1
    res["prior_ks_treated_vs_control"] = ks_test(ds.b_prior[treated], ds.b_prior[~treated]).as_dict()
    res["prior_kruskal_by_location"] = kruskal_wallis(
        [ds.b_prior[ds.location == loc] for loc in sorted(set(ds.location))]).as_dict()
    res["prior_beta_fit"] = beta_mle(ds.b_prior).as_dict()
    res["participation_by_treatment"] = proportion_tests(
        int(ds.a[treated].sum()), int(treated.sum()), (int(ds.a[~treated].sum()), int((~treated).sum()))).as_dict()
    for g in ("below", "above"):
        try:
            lt = late_validity_test(ds, g, replications=late_reps, seed=seed)
            res[f"late_validity_{g}"] = {**lt.as_dict(), "passes": lt.extra["passes"]}
        except ValueError as exc:
            res[f"late_validity_{g}"] = {"error": str(exc)}
    try:
        f = fit_participation(ds, "cf_joint_mle")
        res["exogeneity"] = exogeneity_test(f).as_dict()
    except Exception as exc:  # noqa: BLE001
        res["exogeneity"] = {"error": f"{type(exc).__name__}: {exc}"}
    return res


def cmd_test(args) -> int:
    out = _out_dir(args)
    ds = _load(args)
    _dump(test_battery(ds, args.seed), out / "tests.json")
    return 0


def compare_published(results: dict, tol: dict) -> dict:
    p = results["participation"].get("cf_joint_mle", {})
    got = {
        "beta_hat": p.get("coefficients", {}).get("delta_b", {}).get("standard", {}).get("estimate"),
        "ape_overall": p.get("ape", {}).get("overall", {}).get("delta", {}).get("estimate"),
        "ate_below": results["belief"]["ols"]["ate"]["below"]["estimate"],
        "ate_above": results["belief"]["ols"]["ate"]["above"]["estimate"],
        "margin_overall": p.get("margins", {}).get("overall", {}).get("delta", {}).get("estimate"),
        "exogeneity_chi2": p.get("exogeneity_test", {}).get("statistic"),
    }
    rows = {}
    for key, (target, _) in PUBLISHED.items():
        v = got[key]
        ok = v is not None and abs(v - target) <= tol[key]
        rows[key] = {"published": target, "reproduced": v, "tolerance": tol[key], "match": bool(ok)}
    return rows


def cmd_reproduce(args) -> int:
    if not args.input:
        raise UsageError("reproduce needs --input with the raw survey CSV")
    tol = _tolerances(args)
    out = _out_dir(args)
    ds = _load(args)
    grid = _float_list(args.grid)
    results = run_estimate(ds, ["probit", "cf_twostep", "cf_joint_mle", "newey_minchi2"], grid, _boot_spec(args))
    diff = compare_published(results, tol)
    _dump(results, out / "results.json")
    _dump(diff, out / "reproduction.json")
    _write_margins_csv(out / "margins.csv", results, grid)
    for k, row in diff.items():
        print(f"{k:16s} published {row['published']:>9.4f}  reproduced "
              f"{row['reproduced'] if row['reproduced'] is None else format(row['reproduced'], '9.4f')}  "
              f"{'ok' if row['match'] else 'MISMATCH'}")
    return 0 if all(r["match"] for r in diff.values()) else 3


def sweep(preset: str, seeds, estimators, overrides=None, grid=DEFAULT_GRID) -> dict:
    """Monte Carlo recovery summary across seeds."""
    overrides = overrides or {}
    per = {e: {"beta": [], "se": [], "covered": [], "failed": 0} for e in estimators}
    exo = []
    truth = None
    for s in seeds:
        cfg = get_preset(preset, s, **overrides)
        truth = cfg.truth
        ds = generate_population(cfg).dataset
        for e in estimators:
            try:
                f = fit_participation(ds, e)
            except Exception:  # noqa: BLE001 - counted
                per[e]["failed"] += 1
                continue
            b, se = f.beta_hat, f.se("delta_b")
            per[e]["beta"].append(b)
            per[e]["se"].append(se)
            per[e]["covered"].append(abs(b - truth.beta) <= 1.959963984540054 * se)
            if e == "cf_joint_mle":
                exo.append(exogeneity_test(f).p_value < 0.05)
    summary = {"seeds": len(list(seeds)), "truth_beta": truth.beta if truth else None, "estimators": {}}
    for e, d in per.items():
        b = np.asarray(d["beta"])
        summary["estimators"][e] = {
            "mean_beta": float(b.mean()) if b.size else None,
            "bias": float(b.mean() - truth.beta) if b.size else None,
            "sd_beta": float(b.std(ddof=1)) if b.size > 1 else None,
            "mean_se": float(np.mean(d["se"])) if b.size else None,
            "coverage_95": float(np.mean(d["covered"])) if b.size else None,
            "failed": d["failed"],
        }
    if exo:
        summary["exogeneity_rejection_rate"] = float(np.mean(exo))
    return summary


def cmd_sweep(args) -> int:
    out = _out_dir(args)
    overrides = {}
    if args.rho is not None:
        overrides["rho"] = args.rho
    if args.n is not None:
        overrides["n"] = args.n
    seeds = range(args.seed, args.seed + args.seeds)
    _dump(sweep(args.preset, seeds, _estimators(args), overrides), out / "sweep.json")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "test": cmd_test,
    "reproduce": cmd_reproduce,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stratpart", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--seed", type=int, default=0)
        if data:
            p.add_argument("--input", help="subject-level CSV")
            p.add_argument("--signals", help="CSV with location,s")
            p.add_argument("--intents", help="CSV with location,intent_code (signals computed from it)")
            p.add_argument("--belief-scale", choices=("unit", "percent"), default="unit")

    def est_flags(p, default_estimators="probit,cf_twostep,cf_joint_mle,newey_minchi2"):
        p.add_argument("--estimators", default=default_estimators, help="comma list")
        p.add_argument("--bootstrap-reps", type=int, default=1000, help="0 disables the bootstrap")
        p.add_argument("--cluster-keys", default=",".join(CLUSTER_KEYS),
                       help="comma list; empty string for i.i.d. resampling")
        p.add_argument("--grid", default=",".join(f"{g:g}" for g in DEFAULT_GRID), help="belief-change values")

    p = sub.add_parser("simulate", help="draw a synthetic dataset with planted truth")
    common(p, data=False)
    p.add_argument("--preset", default="paper2019")
    p.add_argument("--n", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--direct-effect", type=float)

    p = sub.add_parser("estimate", help="fit belief and participation models")
    common(p)
    est_flags(p)
    p.add_argument("--truth", help="planted-truth JSON (default: truth.json next to the input)")

    p = sub.add_parser("test", help="run the diagnostic test battery")
    common(p)

    p = sub.add_parser("reproduce", help="compare a raw survey dataset with the published estimates")
    common(p)
    est_flags(p)
    p.add_argument("--tolerance", action="append", metavar="KEY=VALUE",
                   help=f"override a tolerance; keys: {', '.join(PUBLISHED)}")

    p = sub.add_parser("sweep", help="Monte Carlo recovery over seeds")
    common(p, data=False)
    p.add_argument("--preset", default="paper2019")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--estimators", default="probit,cf_joint_mle")
    p.add_argument("--n", type=int)
    p.add_argument("--rho", type=float)
    return parser


def _error(args, kind: str, exc: Exception, code: int) -> int:
    report = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ValidationError):
        report["problems"] = list(exc.problems)
    text = json.dumps(report, sort_keys=True)
    print(text, file=sys.stderr)
    out = getattr(args, "out", None)
    if out:
        try:
            Path(out).mkdir(parents=True, exist_ok=True)
            (Path(out) / "error.json").write_text(text + "\n")
        except OSError:
            pass
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.time()
    try:
        code = COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _error(args, "usage", exc, 2)
    except (ValidationError, ValueError, OSError) as exc:
        return _error(args, "validation", exc, 1)
    except Exception as exc:  # noqa: BLE001 - machine-readable report for anything else
        return _error(args, "estimation", exc, 1)
    _write_metadata(Path(args.out), args, started)
    return code


if __name__ == "__main__":
    sys.exit(main())
