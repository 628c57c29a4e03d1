"""Command-line experiment runner.

    posdyn --config configs/ratio_instability_small_miner.json [--seed N] [--out-dir DIR] [--quiet]

Flag values override the file, which overrides built-in defaults.  Exit
status: 0 success, 1 invalid config or parameters, 2 numerical failure,
3 mean-field iteration did not converge (outputs are still written).
Every run that passes validation leaves ``manifest.json`` in the output
directory with the filled-in config, so the run can be repeated exactly.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .config import (
    ExperimentConfig,
    control_params,
    make_schedule,
    mfg_params,
    trading_env,
    validate,
)
from .errors import ConfigError, InvalidParameterError, PosDynError, PreconditionError
from .urn import Constant, fmt

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_NOT_CONVERGED = 0, 1, 2, 3


def _dump(path: Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _r(x: float) -> float:
    """Round-trip a float through the CSV format so summaries are stable too."""
    return float(fmt(x))


# -- runners: each writes into ``out`` and returns (exit status, summary) ---------------


def run_urn(cfg: ExperimentConfig, out: Path):
    from .metrics import histogram, ks_distance, summarize
    from .urn import ChainState, ensemble, simulate, write_samples_csv

    p = cfg.params
    schedule = make_schedule(p["schedule"])
    ens = ensemble(p["coins"], schedule, p["horizon"], p["runs"], cfg.seed, probe=p["probe"])
    ratios = ens.ratios()
    write_samples_csv(out / "ratios.csv", ratios)
    write_samples_csv(out / "final_shares.csv", ens.final_shares)
    histogram(ratios, p["bins"], p["range"]).write_csv(out / "histogram.csv")
    for i in range(p["trajectories"]):
        simulate(ChainState.initial(p["coins"]), schedule, p["horizon"], cfg.seed,
                 index=i).write_csv(out / f"trajectory_{i}.csv")
    s = summarize(ratios, p["thresholds"])
    summary = {"runs": s.count, "ratio_mean": _r(s.mean), "ratio_var": _r(s.variance),
               "tail_probs": {fmt(k): _r(v) for k, v in s.tail_probs.items()},
               "share_tail_probs": {fmt(th): _r(np.mean(ens.final_shares[:, p["probe"]] > th))
                                    for th in p["share_thresholds"]}}
    if isinstance(schedule, Constant):
        coins = np.asarray(p["coins"], dtype=np.float64)
        a = coins[p["probe"]] / schedule.R
        b = (coins.sum() - coins[p["probe"]]) / schedule.R
        pi0 = coins[p["probe"]] / coins.sum()
        summary["ks_beta_limit"] = _r(ks_distance(ratios, lambda r: stats.beta.cdf(r * pi0, a, b)))
        summary["ks_gamma_limit"] = _r(ks_distance(ratios, stats.gamma(a, scale=1 / a).cdf))
    return EXIT_OK, summary


def run_limits(cfg: ExperimentConfig, out: Path):
    from .metrics import histogram, ks_distance, summarize
    from .urn import sample_dirichlet_limit, sample_gamma_ratio, write_samples_csv

    p = cfg.params
    if p["law"] == "dirichlet":
        samples = sample_dirichlet_limit(p["coins"], p["R"], p["count"], cfg.seed)
        coins = np.asarray(p["coins"], dtype=np.float64) / p["R"]
        a, b = coins[p["probe"]], coins.sum() - coins[p["probe"]]
        marginal = samples[:, p["probe"]]
        ref = stats.beta(a, b).cdf
        rng_ = p["range"] or [0.0, 1.0]
    else:
        a = p["coins"][0] / p["R"]
        samples = marginal = sample_gamma_ratio(p["coins"][0], p["R"], p["count"], cfg.seed)
        ref = stats.gamma(a, scale=1 / a).cdf
        rng_ = p["range"] or [0.0, 5.0]
    write_samples_csv(out / "samples.csv", samples)
    histogram(marginal, p["bins"], rng_).write_csv(out / "histogram.csv")
    s = summarize(marginal)
    return EXIT_OK, {"count": s.count, "mean": _r(s.mean), "variance": _r(s.variance),
                     "ks_distance": _r(ks_distance(marginal, ref))}


def run_sweep(cfg: ExperimentConfig, out: Path):
    from .metrics import phase_sweep, write_sweep_csv

    p = cfg.params
    if p["n0"] is not None:
        grid = p["n0"]
    else:
        grid = [lambda N, f=f: f * N for f in p["n0_fraction"]]
    rows = phase_sweep(make_schedule(p["schedule"]), grid, p["N"], p["epsilon"],
                       p["horizon"], p["runs"], cfg.seed)
    write_sweep_csv(out / "sweep.csv", rows)
    return EXIT_OK, {"cells": len(rows)}


def run_trading(cfg: ExperimentConfig, out: Path):
    from .trading import dominance_experiment, write_summary_json, write_utilities_csv

    p = cfg.params
    env = trading_env(p)
    report, per_path = dominance_experiment(env, cfg.seed, p["paths"], p["n_random"],
                                            keep_paths=True)
    write_utilities_csv(out / "utilities.csv", per_path, report.regime)
    write_summary_json(out / "summary.json", report)
    return EXIT_OK, {"regime": report.regime.value, "designated": report.designated.name,
                     "dominates": report.dominates}


def run_hjb(cfg: ExperimentConfig, out: Path):
    from .hjb import compare_with_oracle

    p = cfg.params
    cmp, grid, control = compare_with_oracle(control_params(p), p["M"], p["J"])
    grid.write_csv(out / "value.csv", stride=p["stride"])
    control.write_csv(out / "control.csv")
    cmp.write_json(out / "summary.json")
    return EXIT_OK, {"shape": control.shape, "v0": _r(cmp.v0), "rel_err": _r(cmp.rel_err)}


def run_mfg(cfg: ExperimentConfig, out: Path):
    from .mfg import equilibrium_iterate, write_outputs

    p = cfg.params
    state = equilibrium_iterate(mfg_params(p), p["damping"], p["tol"], p["max_iter"],
                                p["M"], p["J"])
    summary = write_outputs(state, out, stride=p["stride"])
    status = EXIT_OK if state.converged else EXIT_NOT_CONVERGED
    return status, {"converged": state.converged, "iterations": state.iterations,
                    "residual": summary["residual"]}


RUNNERS = {"urn": run_urn, "limits": run_limits, "sweep": run_sweep,
           "trading": run_trading, "hjb": run_hjb, "mfg": run_mfg}


def run(cfg: ExperimentConfig, quiet: bool = True) -> int:
    """Run a validated config, write outputs and the manifest, return the exit status."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    message = ""
    summary: dict = {}
    try:
        status, summary = RUNNERS[cfg.subcommand](cfg, out)
    except (InvalidParameterError, PreconditionError) as e:
        status, message = EXIT_INVALID, str(e)
    except PosDynError as e:
        status, message = EXIT_NUMERICAL, f"{type(e).__name__}: {e}"
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "version": __version__,
        "started": started,
        "elapsed_s": round(time.perf_counter() - t0, 3),
        "exit_status": status,
    }
    if message:
        manifest["message"] = message
    if summary:
        manifest["summary"] = summary
    _dump(out / "manifest.json", manifest)
    if message:
        print(f"error: {message}", file=sys.stderr)
    elif not quiet:
        print(f"{cfg.subcommand}: " + ", ".join(f"{k}={v}" for k, v in summary.items()))
        if status == EXIT_NOT_CONVERGED:
            print("warning: fixed-point iteration did not converge", file=sys.stderr)
    return status


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="posdyn", description="Run a posdyn experiment config.")
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out-dir", help="override the config output directory")
    ap.add_argument("--quiet", action="store_true", help="print nothing on success")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = Path(args.config).read_text()
    except OSError as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = validate(text, {"seed": args.seed, "out_dir": args.out_dir})
    except ConfigError as e:
        for v in e.violations:
            print(f"invalid config: {v}", file=sys.stderr)
        return EXIT_INVALID
    return run(cfg, quiet=args.quiet)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
