"""Command-line front end.

Three subcommands:

* ``reconcile`` — turn a structure JSON plus a forecast-set JSON into
  reconciled bottom-level particles (CSV) with a metadata sidecar;
* ``synth`` — run a synthetic method-comparison grid from a config JSON
  and write result tables;
* ``score`` — score particle forecasts against actuals, optionally with
  skill scores against a baseline particle set.

Exit codes: 0 success, 2 validation/config error, 3 every particle got
zero weight (the offending node is named).  All stochastic commands are
deterministic under a fixed ``--seed``: rerunning produces byte-identical
primary outputs (particles.csv, results.csv, summary.txt, scores.csv).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .distributions import distribution_from_json
from .errors import AllZeroWeightsError, ProbReconcError
from .harness import ExperimentConfig, run_experiment, write_results, summarize
from .hierarchy import (
    GroupedStructure,
    Hierarchy,
    bottom_labels,
    load_structure,
    structure_digest,
)
from .metrics import ScoreReport, score_samples, skill_report
from .reconcile import (
    BaseForecasts,
    buis,
    buis_grouped,
    buis_sample_based,
    mh_reconcile,
    plain_is,
    reconcile_gaussian,
    resample,
)
from .rng import derive_seed

_METHODS = ("analytical", "is", "buis", "buis_samples", "mh")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="probreconc",
        description="Probabilistic reconciliation of hierarchical forecasts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    rec = sub.add_parser(
        "reconcile", formatter_class=fmt,
        help="reconcile a forecast set over a structure")
    rec.add_argument("structure", help="structure JSON file")
    rec.add_argument("forecasts", help="forecast-set JSON file")
    rec.add_argument("--method", choices=_METHODS, default="buis")
    rec.add_argument("--n-particles", type=int, default=100_000,
                     help="particles to return")
    rec.add_argument("--seed", type=int, default=0, help="run seed")
    rec.add_argument("--out-dir", default=".", help="output directory")
    rec.add_argument("--burn-in", type=int, default=None,
                     help="MH burn-in steps (default: n/4)")
    rec.add_argument("--tau", type=float, default=1.0,
                     help="MH proposal variance for real-valued bottoms")
    rec.add_argument("--mh-thin", type=int, default=1,
                     help="record every k-th MH state")
    rec.add_argument("--mh-chains", type=int, default=1,
                     help="parallel MH chains")
    rec.add_argument("--pmf-floor", type=float, default=0.0,
                     help="pmf floor at unseen counts for sample-based uppers")
    rec.add_argument("--resampling", choices=("multinomial", "systematic"),
                     default="multinomial", help="resampling scheme")
    rec.add_argument("--threads", type=int, default=None,
                     help="worker cap (default: env HIER_RECONC_THREADS or 1)")

    syn = sub.add_parser("synth", formatter_class=fmt,
                         help="run a synthetic experiment grid")
    syn.add_argument("config", help="experiment config JSON")
    syn.add_argument("--out-dir", default="synth_results",
                     help="results directory")
    syn.add_argument("--threads", type=int, default=None,
                     help="worker cap (default: env HIER_RECONC_THREADS or 1)")

    sco = sub.add_parser("score", formatter_class=fmt,
                         help="score particle forecasts against actuals")
    sco.add_argument("particles", help="particle CSV (one particle per row)")
    sco.add_argument("actuals", help="actuals CSV (header plus one row)")
    sco.add_argument("train", help="training-history CSV (one column per series)")
    sco.add_argument("--alpha", type=float, default=0.1,
                     help="central interval level for MIS")
    sco.add_argument("--structure", default=None,
                     help="structure JSON; lifts bottom particles to all levels")
    sco.add_argument("--baseline", default=None,
                     help="baseline particle CSV for skill scores")
    sco.add_argument("--out", default="scores.csv", help="report CSV path")
    return parser


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("HIER_RECONC_THREADS")
    return max(1, int(env)) if env else 1


def _read_particles_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: no particle rows")
    return header, np.asarray(rows)


def _write_particles_csv(path, particles, labels) -> None:
    discrete = np.issubdtype(particles.dtype, np.integer)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(labels)
        for row in particles:
            if discrete:
                writer.writerow([int(v) for v in row])
            else:
                writer.writerow([repr(float(v)) for v in row])


def _load_forecasts(path, structure) -> BaseForecasts:
    with open(path, "r", encoding="utf-8") as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise ValueError(f"{path}: expected a JSON array of forecast entries")
    n = structure.n_total
    if len(entries) != n:
        raise ValueError(
            f"{path}: {len(entries)} forecast entries for a structure with "
            f"{n} nodes ({structure.n_upper} upper + {structure.n_bottom} bottom)"
        )
    base_dir = Path(path).parent
    dists = []
    for i, entry in enumerate(entries):
        try:
            dists.append(distribution_from_json(entry, base_dir=base_dir))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}: entry {i}: {exc}") from exc
    n_upper = structure.n_upper
    return BaseForecasts(bottom=dists[n_upper:], upper=dists[:n_upper])


def _cmd_reconcile(args) -> int:
    structure = load_structure(args.structure)
    base = _load_forecasts(args.forecasts, structure)
    base.validate(structure)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = args.n_particles
    meta = {
        "algorithm": args.method,
        "seed": args.seed,
        "n_particles": n,
        "structure_digest": structure_digest(structure),
    }
    t0 = time.perf_counter()
    particles = None
    if args.method == "analytical":
        exact = reconcile_gaussian(structure, base)
        meta["mean"] = [float(v) for v in exact.mean]
        meta["covariance"] = [[float(v) for v in row]
                              for row in exact.covariance]
    elif args.method == "is":
        ws = plain_is(structure, base, n, args.seed)
        meta["ess"] = ws.ess
        particles = resample(ws.particles, ws.weights, n,
                             derive_seed(args.seed, 1),
                             scheme=args.resampling)
    elif args.method in ("buis", "buis_samples"):
        tree = isinstance(structure, Hierarchy) or structure.is_tree
        if tree:
            runner = buis_sample_based if args.method == "buis_samples" else buis
            rs = runner(structure, base, n, args.seed,
                        pmf_floor=args.pmf_floor, resampling=args.resampling)
            particles = rs.particles
        else:
            ws = buis_grouped(structure, base, n, args.seed,
                              pmf_floor=args.pmf_floor,
                              resampling=args.resampling)
            meta["ess"] = ws.ess
            particles = resample(ws.particles, ws.weights, n,
                                 derive_seed(args.seed, 1),
                                 scheme=args.resampling)
    elif args.method == "mh":
        rs = mh_reconcile(structure, base, n, burn_in=args.burn_in,
                          tau=args.tau, rng=args.seed, thin=args.mh_thin,
                          chains=args.mh_chains)
        meta["acceptance_rate"] = rs.acceptance_rate
        particles = rs.particles
    meta["wall_time_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)

    if particles is not None:
        _write_particles_csv(out_dir / "particles.csv", particles,
                             bottom_labels(structure))
        meta["particles_csv"] = "particles.csv"
    with open(out_dir / "metadata.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if "ess" in meta:
        print(f"ess: {meta['ess']:.1f}")
    if "acceptance_rate" in meta:
        print(f"acceptance_rate: {meta['acceptance_rate']:.4f}")
    print(f"wrote {out_dir / 'metadata.json'}")
    return 0


def _cmd_synth(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    result = run_experiment(config, threads=_threads(args))
    write_results(result, args.out_dir)
    print(summarize(result))
    print(f"wrote {Path(args.out_dir) / 'results.csv'}")
    return 0


def _level_labels(structure, header):
    if isinstance(structure, (Hierarchy, GroupedStructure)):
        uppers = [f"size_{len(c)}" for c in structure.constraints]
        return uppers + ["bottom"] * structure.n_bottom
    return [""] * len(header)


def _cmd_score(args) -> int:
    header, particles = _read_particles_csv(args.particles)
    with open(args.actuals, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        actual_header = next(reader)
        actual_rows = [row for row in reader if row]
    if len(actual_rows) != 1:
        raise ValueError(f"{args.actuals}: expected exactly one data row")
    actuals = np.asarray([float(v) for v in actual_rows[0]])
    with open(args.train, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        train_header = next(reader)
        train = np.asarray([[float(v) for v in row] for row in reader if row])

    structure = None
    if args.structure:
        structure = load_structure(args.structure)
        if particles.shape[1] != structure.n_bottom:
            raise ValueError(
                f"{args.particles}: {particles.shape[1]} columns but the "
                f"structure has {structure.n_bottom} bottom series")
        particles = particles @ structure.summing_matrix().T
        labels = [f"u{i}" for i in range(structure.n_upper)] + header
        levels = _level_labels(structure, labels)
    else:
        labels = header
        levels = None
    if actuals.shape[0] != particles.shape[1]:
        raise ValueError(
            f"{args.actuals}: {actuals.shape[0]} columns do not match "
            f"{particles.shape[1]} forecast series")
    if train.shape[1] != particles.shape[1]:
        raise ValueError(
            f"{args.train}: {train.shape[1]} columns do not match "
            f"{particles.shape[1]} forecast series")

    report = score_samples(particles, actuals, train, alpha=args.alpha,
                           series_labels=labels, level_labels=levels)
    report.to_csv(args.out)
    print(f"wrote {args.out}")
    if args.baseline:
        _, base_particles = _read_particles_csv(args.baseline)
        if structure is not None:
            base_particles = base_particles @ structure.summing_matrix().T
        if base_particles.shape[1] != particles.shape[1]:
            raise ValueError(
                f"{args.baseline}: column count does not match the particles")
        base_report = score_samples(base_particles, actuals, train,
                                    alpha=args.alpha, series_labels=labels,
                                    level_labels=levels)
        skills = skill_report(report, base_report)
        skill_path = Path(args.out).with_name(
            Path(args.out).stem + "_skill.csv")
        skills.to_csv(skill_path)
        print(f"wrote {skill_path}")
    for (metric, level), value in sorted(report.aggregate().items()):
        tag = f" [{level}]" if level else ""
        print(f"{metric}{tag}: {value:.4f}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "reconcile":
            return _cmd_reconcile(args)
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "score":
            return _cmd_score(args)
        parser.error(f"unknown command {args.command!r}")
    except AllZeroWeightsError as exc:
        node = f" (node: {exc.node})" if exc.node else ""
        print(f"error: all particle weights are zero{node}: {exc}",
              file=sys.stderr)
        return 3
    except (ProbReconcError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
