"""Synthetic experiment harness.

Generates base forecasts with a controlled incoherence level, runs a grid
of reconciliation methods over repetitions, measures accuracy against a
reference (the exact Gaussian solution, or a long Metropolis-Hastings run
for counts) and emits result tables.

Every repetition and method gets a seed derived from (run seed, epsilon
index, repetition, method), so a config with a fixed seed reproduces the
same numbers bit for bit; wall times are kept out of the primary outputs
for the same reason.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .distributions import (
    EmpiricalContinuous,
    EmpiricalDiscrete,
    Gaussian,
    Poisson,
)
from .errors import ProbReconcError
from .hierarchy import (
    GroupedStructure,
    Hierarchy,
    Structure,
    build_hierarchy,
    load_structure,
    temporal_structure,
)
from .metrics import mape, wasserstein2
from .reconcile import (
    BaseForecasts,
    bruteforce_discrete,
    buis,
    buis_grouped,
    buis_sample_based,
    mh_reconcile,
    plain_is,
    reconcile_gaussian,
    resample,
)
from .rng import derive_seed, substreams

KNOWN_METHODS = ("analytical", "is", "buis", "buis_samples", "mh")
STRUCTURE_KINDS = ("binary_8", "weekly", "monthly", "custom")


@dataclass
class ExperimentConfig:
    """Grid specification for one synthetic comparison run."""

    structure_kind: str = "binary_8"
    family: str = "gaussian"
    epsilon_levels: tuple = (0.1, 0.3, 0.5, 0.8)
    n_particles: int = 100_000
    repetitions: int = 30
    methods: tuple = ("is", "buis")
    seed: int = 0
    bottom_mean_range: tuple = (5.0, 10.0)
    sigma_b: float = 2.0
    sigma_u: float = 3.0
    custom_structure: str | None = None
    # Metropolis-Hastings settings when run as a grid method
    mh_chains: int = 4
    mh_thin: int = 1
    mh_tau: float = 1.0
    # reference sampler settings for count families
    reference_samples: int = 20_000
    reference_burn_in: int = 2_000
    reference_thin: int = 15
    reference_chains: int = 10

    def __post_init__(self):
        self.epsilon_levels = tuple(float(e) for e in self.epsilon_levels)
        self.methods = tuple(str(m) for m in self.methods)
        self.bottom_mean_range = tuple(float(v) for v in self.bottom_mean_range)

    def validate(self) -> None:
        if self.structure_kind not in STRUCTURE_KINDS:
            raise ValueError(f"unknown structure kind {self.structure_kind!r}")
        if self.structure_kind == "custom" and not self.custom_structure:
            raise ValueError("custom structure kind needs 'custom_structure' path")
        if self.family not in ("gaussian", "poisson"):
            raise ValueError(f"unknown family {self.family!r}")
        if not self.epsilon_levels or any(e < 0 for e in self.epsilon_levels):
            raise ValueError("epsilon levels must be nonnegative and nonempty")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        unknown = set(self.methods) - set(KNOWN_METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        if "analytical" in self.methods and self.family != "gaussian":
            raise ValueError("the analytical method requires the gaussian family")
        if len(self.bottom_mean_range) != 2 or \
                not self.bottom_mean_range[0] <= self.bottom_mean_range[1]:
            raise ValueError("bottom_mean_range must be a (lo, hi) pair")
        if self.sigma_b <= 0 or self.sigma_u <= 0:
            raise ValueError("sigma_b and sigma_u must be positive")

    def to_json(self) -> dict:
        data = asdict(self)
        data["epsilon_levels"] = list(self.epsilon_levels)
        data["methods"] = list(self.methods)
        data["bottom_mean_range"] = list(self.bottom_mean_range)
        return data

    @classmethod
    def from_json(cls, source) -> "ExperimentConfig":
        if isinstance(source, (str, Path)):
            with open(source, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        else:
            data = dict(source)
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class RepRecord:
    method: str
    epsilon: float
    repetition: int
    seed: int
    mape: float = float("nan")
    w2: float = float("nan")
    tv: float = float("nan")
    ess: float = float("nan")
    wall_time_s: float = float("nan")
    error: str = ""


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list = field(default_factory=list)

    def mean_over_reps(self, metric: str) -> dict:
        """{(method, epsilon): mean metric over repetitions without errors}."""
        cells: dict = {}
        for r in self.records:
            cells.setdefault((r.method, r.epsilon), []).append(r)
        out = {}
        for key, rows in cells.items():
            vals = [getattr(r, metric) for r in rows
                    if not r.error and np.isfinite(getattr(r, metric))]
            out[key] = float(np.mean(vals)) if vals else float("nan")
        return out


def make_structure(kind: str, custom_path=None) -> Structure:
    """The built-in experiment structures, or a user structure from JSON."""
    if kind == "binary_8":
        return build_hierarchy(
            [[(0, 1), (2, 3), (4, 5), (6, 7)],
             [(0, 1, 2, 3), (4, 5, 6, 7)],
             [tuple(range(8))]],
            n_bottom=8,
        )
    if kind == "weekly":
        return temporal_structure(52, [2, 4, 13, 26, 52])
    if kind == "monthly":
        return temporal_structure(12, [2, 3, 4, 6, 12])
    if kind == "custom":
        return load_structure(custom_path)
    raise ValueError(f"unknown structure kind {kind!r}")


def gen_synthetic_base(structure: Structure, family: str, epsilon: float,
                       rng, *, mean_range=(5.0, 10.0), sigma_b: float = 2.0,
                       sigma_u: float = 3.0) -> BaseForecasts:
    """Base forecasts with upper means inflated by the incoherence level.

    Bottom means are i.i.d. uniform on ``mean_range``; each upper mean is
    ``(1 + epsilon)`` times the sum of its bottom means.  The gaussian
    family attaches fixed standard deviations sigma_b / sigma_u; the
    poisson family uses the means as rates.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    gen = substreams(rng, 1)[0]
    m_b = gen.uniform(mean_range[0], mean_range[1], size=structure.n_bottom)
    m_u = (1.0 + epsilon) * (structure.aggregating_matrix() @ m_b)
    if family == "gaussian":
        bottom = [Gaussian(mu, sigma_b) for mu in m_b]
        upper = [Gaussian(mu, sigma_u) for mu in m_u]
    elif family == "poisson":
        bottom = [Poisson(rate) for rate in m_b]
        upper = [Poisson(rate) for rate in m_u]
    else:
        raise ValueError(f"unknown family {family!r}")
    return BaseForecasts(bottom=bottom, upper=upper)


def _empirical_uppers(base: BaseForecasts, n: int, rng) -> BaseForecasts:
    """Replace every upper marginal by n draws from it (sample-based runs)."""
    streams = substreams(rng, len(base.upper))
    uppers = []
    for d, gen in zip(base.upper, streams):
        samples = d.draw(n, gen)
        cls = EmpiricalDiscrete if d.is_discrete else EmpiricalContinuous
        uppers.append(cls(samples=samples))
    return BaseForecasts(bottom=base.bottom, upper=uppers)


def _reference_mean(structure, base, config, eps_index: int, rep: int):
    """Bottom reference mean and, for gaussians, the exact reconciled law."""
    if config.family == "gaussian":
        exact = reconcile_gaussian(structure, base)
        return exact.mean, exact
    seed = derive_seed(config.seed, 90_000 + eps_index, rep)
    ref = mh_reconcile(
        structure, base, config.reference_samples,
        burn_in=config.reference_burn_in, tau=config.mh_tau, rng=seed,
        thin=config.reference_thin, chains=config.reference_chains,
    )
    return ref.particles.mean(axis=0), None


def _oracle_marginals(structure, base):
    """Exact bottom marginals for small count instances, else None."""
    m = structure.n_bottom
    rates = [d.rate for d in base.bottom if isinstance(d, Poisson)]
    if len(rates) != m:
        return None
    cap_fit = int(np.floor((10 ** 7) ** (1.0 / m))) - 1
    peak = max(rates) * 2.5  # posterior can sit well above the base rate
    cap_need = int(np.ceil(peak + 8 * np.sqrt(peak)))
    if m > 4 or cap_need > cap_fit:
        return None
    post = bruteforce_discrete(structure, base, cap_need)
    return [post.marginal(j) for j in range(m)], post.support_cap


def _tv_to_oracle(particles: np.ndarray, oracle) -> float:
    marginals, cap = oracle
    tv = 0.0
    for j, ref in enumerate(marginals):
        counts = np.bincount(
            np.clip(particles[:, j].astype(np.int64), 0, cap), minlength=cap + 1)
        emp = counts / counts.sum()
        tv += 0.5 * np.abs(emp - ref).sum()
    return float(tv / len(marginals))


def _run_method(method: str, structure, base, config, seed: int):
    """One method run; returns (bottom mean, unweighted particles, ess)."""
    n = config.n_particles
    if method == "analytical":
        exact = reconcile_gaussian(structure, base)
        return exact.mean, None, float("nan")
    if method == "is":
        ws = plain_is(structure, base, n, seed)
        particles = resample(ws.particles, ws.weights, n,
                             derive_seed(seed, 1))
        return ws.mean(), particles, ws.ess
    if method in ("buis", "buis_samples"):
        if method == "buis_samples":
            base = _empirical_uppers(base, n, derive_seed(seed, 2))
        if isinstance(structure, Hierarchy) or (
                isinstance(structure, GroupedStructure) and structure.is_tree):
            runner = buis_sample_based if method == "buis_samples" else buis
            rs = runner(structure, base, n, seed)
            return rs.particles.mean(axis=0), rs.particles, float("nan")
        ws = buis_grouped(structure, base, n, seed)
        particles = resample(ws.particles, ws.weights, n,
                             derive_seed(seed, 1))
        return ws.mean(), particles, ws.ess
    if method == "mh":
        rs = mh_reconcile(structure, base, n, tau=config.mh_tau, rng=seed,
                          thin=config.mh_thin, chains=config.mh_chains)
        return rs.particles.mean(axis=0), rs.particles, float("nan")
    raise ValueError(f"unknown method {method!r}")


def run_experiment(config: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """Run the full (method x epsilon x repetition) grid.

    Method errors are recorded in their grid cell instead of aborting the
    run.  With ``threads > 1`` the (epsilon, repetition) cells run on a
    thread pool; records are merged in a fixed order either way.
    """
    config.validate()
    structure = make_structure(config.structure_kind, config.custom_structure)
    s_matrix = structure.summing_matrix()
    want_tv = config.family == "poisson" and structure.n_bottom <= 4

    def run_cell(eps_index: int, rep: int):
        eps = config.epsilon_levels[eps_index]
        base = gen_synthetic_base(
            structure, config.family, eps,
            derive_seed(config.seed, eps_index, rep),
            mean_range=config.bottom_mean_range,
            sigma_b=config.sigma_b, sigma_u=config.sigma_u,
        )
        ref_mean, exact = _reference_mean(structure, base, config,
                                          eps_index, rep)
        ref_full = s_matrix @ ref_mean
        oracle = _oracle_marginals(structure, base) if want_tv else None
        records = []
        for mi, method in enumerate(config.methods):
            seed = derive_seed(config.seed, eps_index, rep, mi)
            rec = RepRecord(method=method, epsilon=eps, repetition=rep,
                            seed=seed)
            t0 = time.perf_counter()
            try:
                mean_b, particles, ess = _run_method(
                    method, structure, base, config, seed)
                rec.wall_time_s = time.perf_counter() - t0
                rec.mape = mape(s_matrix @ mean_b, ref_full)
                rec.ess = ess
                if exact is not None and particles is not None:
                    rec.w2 = wasserstein2(particles, exact)
                if oracle is not None and particles is not None:
                    rec.tv = _tv_to_oracle(particles, oracle)
            except ProbReconcError as exc:
                rec.wall_time_s = time.perf_counter() - t0
                rec.error = f"{type(exc).__name__}: {exc}"
            records.append(rec)
        return records

    cells = [(ei, rep) for ei in range(len(config.epsilon_levels))
             for rep in range(config.repetitions)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_cell = list(pool.map(lambda c: run_cell(*c), cells))
    else:
        per_cell = [run_cell(*c) for c in cells]

    result = ExperimentResult(config=config)
    for records in per_cell:
        result.records.extend(records)
    result.records.sort(key=lambda r: (config.methods.index(r.method),
                                       r.epsilon, r.repetition))
    return result


# --------------------------------------------------------------------------
# reporting


def _format_cell(value: float, fmt: str) -> str:
    if not np.isfinite(value):
        return "-"
    return fmt % value


def _metric_table(result: ExperimentResult, metric: str, fmt: str) -> str:
    means = result.mean_over_reps(metric)
    methods = list(result.config.methods)
    lines = ["epsilon" + "".join(f"{m:>14}" for m in methods)]
    for eps in result.config.epsilon_levels:
        cells = "".join(
            f"{_format_cell(means.get((m, eps), float('nan')), fmt):>14}"
            for m in methods)
        lines.append(f"{eps:<7g}" + cells)
    return "\n".join(lines)


def summarize(result: ExperimentResult) -> str:
    """Deterministic text tables: MAPE, then W2 / TV when available."""
    cfg = result.config
    header = (f"structure={cfg.structure_kind} family={cfg.family} "
              f"N={cfg.n_particles} reps={cfg.repetitions} seed={cfg.seed}")
    parts = [header, "",
             "MAPE of the reconciled mean vs reference (%)",
             _metric_table(result, "mape", "%.2f")]
    if cfg.family == "gaussian" and any(
            np.isfinite(r.w2) for r in result.records):
        parts += ["", "Average W2 distance to the exact reconciled marginals",
                  _metric_table(result, "w2", "%.3f")]
    if any(np.isfinite(r.tv) for r in result.records):
        parts += ["", "Mean TV distance of bottom marginals vs enumeration",
                  _metric_table(result, "tv", "%.4f")]
    errors = [r for r in result.records if r.error]
    if errors:
        parts += ["", f"errors in {len(errors)} runs (see results.csv)"]
    return "\n".join(parts) + "\n"


def summarize_timing(result: ExperimentResult) -> str:
    """Mean wall time per method (not part of the deterministic outputs)."""
    sums: dict = {}
    for r in result.records:
        if np.isfinite(r.wall_time_s):
            sums.setdefault(r.method, []).append(r.wall_time_s)
    lines = ["Average wall time per run (s)"]
    for method in result.config.methods:
        if method in sums:
            lines.append(f"{method:<14}{np.mean(sums[method]):.3f}")
    return "\n".join(lines) + "\n"


def _fmt_float(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def write_results(result: ExperimentResult, out_dir) -> None:
    """Write results.csv + summary.txt (deterministic) and timing/meta files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["structure", "family", "method", "epsilon",
                         "repetition", "seed", "mape", "w2", "tv", "ess",
                         "error"])
        for r in result.records:
            writer.writerow([
                result.config.structure_kind, result.config.family,
                r.method, repr(float(r.epsilon)), r.repetition, r.seed,
                _fmt_float(r.mape), _fmt_float(r.w2), _fmt_float(r.tv),
                _fmt_float(r.ess), r.error,
            ])
    (out / "summary.txt").write_text(summarize(result), encoding="utf-8")
    with open(out / "timing.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "epsilon", "repetition", "wall_time_s"])
        for r in result.records:
            writer.writerow([r.method, repr(float(r.epsilon)), r.repetition,
                             _fmt_float(r.wall_time_s)])
    (out / "timing.txt").write_text(summarize_timing(result), encoding="utf-8")
    meta = {
        "config": result.config.to_json(),
        "versions": {"numpy": np.__version__},
        "primary_outputs": ["results.csv", "summary.txt"],
    }
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
