"""Simulation scenarios and the ROSF-versus-POT comparison protocol.

A comparison run draws a reference sample, fits the POT baseline once and
repeats ROSF plus a single-start iteration ``im_reps`` times. ``n_estimates`` of
those estimates, chosen at random, give the interval ``(min, max)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import streams
from .fusion import FusionConfig, resolve_workers, run_rosf
from .iterative import PGrid, single_start_estimate
from .pot import pot_tail

__all__ = [
    "PAPER_SCENARIOS",
    "PRESETS",
    "ComparisonReport",
    "DistSpec",
    "HarnessError",
    "MethodSummary",
    "RunRecord",
    "Scenario",
    "ScenarioError",
    "VarianceResult",
    "load_scenario",
    "quantile_threshold",
    "run_comparison",
    "sample_reference",
    "variance_study",
]

SCHEMA_VERSION = 1
MAX_REJECTIONS = 10_000

PRESETS = {
    "desk": {"runs": 50, "im_reps": 100, "n_fusions": 500, "n_estimates": 50},
    "paper": {"runs": 500, "im_reps": 500, "n_fusions": 1000, "n_estimates": 50},
}
PRESET_NOTES = {
    "paper": "paper-scale preset: expect a multi-hour runtime (about 250 million DRM fits)",
}

# Parameter names in the order the constructors take them.
_FAMILIES = {
    "gamma": ("shape", "rate"),
    "lognormal": ("mu", "sigma"),
    "weibull": ("shape", "scale"),
    "pareto": ("scale", "shape"),
    "fisher_f": ("d1", "d2"),
    "positive_t": ("df",),
    "inverse_gaussian": ("mean", "shape"),
    "uniform": ("low", "high"),
    "empirical_csv": ("path",),
}


class ScenarioError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


class HarnessError(RuntimeError):
    def __init__(self, message: str, run: int):
        super().__init__(f"run {run}: {message}")
        self.run = run


class _FoldedT:
    """``|t_df|`` with the few methods the harness needs."""

    def __init__(self, df: float):
        self.t = stats.t(df)

    def sf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x < 0, 1.0, 2.0 * self.t.sf(np.maximum(x, 0.0)))

    def cdf(self, x):
        return 1.0 - self.sf(x)

    def isf(self, p):
        return self.t.isf(0.5 * np.asarray(p, dtype=float))

    def rvs(self, size, random_state):
        return np.abs(self.t.rvs(size=size, random_state=random_state))


@dataclass(frozen=True)
class DistSpec:
    """Reference distribution by family name and named parameters.

    Gamma takes a rate (``Gamma(1, 0.05)`` has mean 20), lognormal the mean and
    sd of ``log X``, Weibull shape then scale, Pareto minimum then tail index,
    inverse Gaussian mean then shape, and ``positive_t`` is ``|t_df|``.
    """

    family: str
    params: dict

    def __post_init__(self):
        names = _FAMILIES.get(self.family)
        if names is None:
            raise ScenarioError([f"dist.family: unknown family {self.family!r}"])
        missing = [n for n in names if n not in self.params]
        if missing:
            raise ScenarioError([f"dist.params.{n}: required for {self.family}" for n in missing])

    @property
    def parametric(self) -> bool:
        return self.family != "empirical_csv"

    def frozen(self):
        """The scipy distribution object (or a folded-t stand-in)."""
        p = self.params
        f = self.family
        if f == "gamma":
            return stats.gamma(p["shape"], scale=1.0 / p["rate"])
        if f == "lognormal":
            return stats.lognorm(s=p["sigma"], scale=math.exp(p["mu"]))
        if f == "weibull":
            return stats.weibull_min(p["shape"], scale=p["scale"])
        if f == "pareto":
            return stats.pareto(p["shape"], scale=p["scale"])
        if f == "fisher_f":
            return stats.f(p["d1"], p["d2"])
        if f == "positive_t":
            return _FoldedT(p["df"])
        if f == "inverse_gaussian":
            return stats.invgauss(p["mean"] / p["shape"], scale=p["shape"])
        if f == "uniform":
            return stats.uniform(p["low"], p["high"] - p["low"])
        raise ScenarioError([f"dist.family: {f} has no parametric form"])

    def to_dict(self) -> dict:
        return {"family": self.family, "params": dict(self.params)}


def quantile_threshold(dist: DistSpec, p: float) -> float:
    """``T`` with ``P(X > T) = p``."""
    if not dist.parametric:
        raise ValueError("thresholds need a parametric distribution; empirical data has none")
    if not 0 < p < 1:
        raise ValueError(f"tail probability must lie in (0, 1), got {p}")
    return float(dist.frozen().isf(p))


def _empirical(dist: DistSpec) -> np.ndarray:
    from .io import load_reference_csv

    return load_reference_csv(dist.params["path"], dist.params.get("column", 0))


def sample_reference(
    dist: DistSpec,
    n_0: int,
    rng: np.random.Generator,
    max_below: float | None = None,
) -> tuple[np.ndarray, int]:
    """``n_0`` draws, resampled as a whole until ``max < max_below`` if given.

    Returns the sample and the number of attempts it took. Empirical
    distributions are sampled with replacement from the file's values.
    """
    if n_0 < 1:
        raise ValueError("reference sample size must be at least 1")
    pool = None if dist.parametric else _empirical(dist)
    frozen = dist.frozen() if dist.parametric else None
    for attempt in range(1, MAX_REJECTIONS + 2):
        if pool is None:
            x = np.asarray(frozen.rvs(size=n_0, random_state=rng), dtype=float)
        else:
            x = rng.choice(pool, size=n_0, replace=True)
        if max_below is None or x.max() < max_below:
            return x, attempt
    raise RuntimeError(
        f"no sample with max below {max_below} after {MAX_REJECTIONS} rejections; "
        "the constraint is implausible for this distribution"
    )


@dataclass(frozen=True)
class Scenario:
    dist: DistSpec
    p_true: float
    T: float
    n_0: int
    n_1: int
    support: tuple[float, float]
    increment: float
    runs: int = PRESETS["desk"]["runs"]
    im_reps: int = PRESETS["desk"]["im_reps"]
    n_fusions: int = PRESETS["desk"]["n_fusions"]
    n_estimates: int = PRESETS["desk"]["n_estimates"]
    seed: int = 0
    ci_level: float = 0.95
    condition_max: bool = False
    u_quantile: float = 0.8
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "support", (float(self.support[0]), float(self.support[1])))
        problems = []
        if not 0 < self.p_true < 1:
            problems.append("p_true: must lie in (0, 1)")
        for key in ("n_0", "n_1", "runs", "im_reps", "n_fusions", "n_estimates"):
            if getattr(self, key) < 1:
                problems.append(f"{key}: must be at least 1")
        if self.n_estimates > self.im_reps:
            problems.append("n_estimates: cannot exceed im_reps")
        if not self.support[0] < self.support[1]:
            problems.append("support: needs low < high")
        elif self.support[1] <= self.T:
            problems.append("support: upper limit must exceed T")
        if not self.increment > 0:
            problems.append("increment: must be positive")
        if problems:
            raise ScenarioError(problems)
        if self.dist.parametric:
            tail = float(self.dist.frozen().sf(self.T))
            # Published thresholds carry 7 significant digits.
            if abs(tail - self.p_true) > 1e-4 * self.p_true:
                raise ScenarioError(
                    [f"T: P(X > {self.T}) = {tail:.10g} does not match p_true = {self.p_true}"]
                )

    def fusion_config(self, seed: int) -> FusionConfig:
        return FusionConfig(
            n_fusions=self.n_fusions,
            n_1=self.n_1,
            support=self.support,
            ci_level=self.ci_level,
            seed=seed,
        )

    def with_preset(self, preset: str) -> "Scenario":
        if preset not in PRESETS:
            raise ScenarioError([f"preset: unknown preset {preset!r}"])
        return replace(self, **PRESETS[preset])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dist"] = self.dist.to_dict()
        d["support"] = list(self.support)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        problems = []
        known = set(cls.__dataclass_fields__)
        problems += [f"{k}: unknown field" for k in d if k not in known]
        dist = d.get("dist")
        if not isinstance(dist, dict) or "family" not in dist:
            problems.append("dist: expected an object with 'family' and 'params'")
        if problems:
            raise ScenarioError(problems)
        d["dist"] = DistSpec(dist["family"], dict(dist.get("params", {})))
        if "T" not in d:
            if not d["dist"].parametric:
                raise ScenarioError(["T: required for empirical distributions"])
            if "p_true" not in d:
                raise ScenarioError(["p_true: required"])
            d["T"] = quantile_threshold(d["dist"], d["p_true"])
        required = ("p_true", "n_0", "support", "increment")
        missing = [f"{k}: required" for k in required if k not in d]
        if missing:
            raise ScenarioError(missing)
        d.setdefault("n_1", d["n_0"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ScenarioError([str(exc)]) from exc


def load_scenario(path_or_name: str) -> Scenario:
    """A scenario from a JSON file, or one of :data:`PAPER_SCENARIOS` by name."""
    if path_or_name in PAPER_SCENARIOS:
        return Scenario.from_dict(PAPER_SCENARIOS[path_or_name])
    try:
        data = json.loads(Path(path_or_name).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"scenario file is not valid JSON: {exc}"]) from exc
    if not isinstance(data, dict):
        raise ScenarioError(["scenario file must hold a JSON object"])
    return Scenario.from_dict(data)


def _case(name, family, params, p, support, increment, **kw):
    return {
        "name": name,
        "dist": {"family": family, "params": params},
        "p_true": p,
        "n_0": kw.pop("n_0", 100),
        "support": list(support),
        "increment": increment,
        **kw,
    }


# The comparison and variance settings of the published tables.
PAPER_SCENARIOS = {
    c["name"]: c
    for c in [
        _case("weibull_1_2_p1e-3", "weibull", {"shape": 1.0, "scale": 2.0}, 0.001, (0, 16), 0.00005),
        _case("pareto_1_4_p1e-3", "pareto", {"scale": 1.0, "shape": 4.0}, 0.001, (1, 8), 0.0001),
        _case("gamma_3_1_p1e-3", "gamma", {"shape": 3.0, "rate": 1.0}, 0.001, (0, 20), 0.00005),
        _case("ig_2_40_p1e-3", "inverse_gaussian", {"mean": 2.0, "shape": 40.0}, 0.001, (0, 8), 0.00005),
        _case("ln_0_1_p1e-3", "lognormal", {"mu": 0.0, "sigma": 1.0}, 0.001, (1, 60), 0.00005),
        _case("ln_1_1_p1e-3", "lognormal", {"mu": 1.0, "sigma": 1.0}, 0.001, (1, 140), 0.0001),
        _case("f_2_12_p1e-4", "fisher_f", {"d1": 2.0, "d2": 12.0}, 0.0001, (0, 25), 0.00001),
        _case("ln_0_1_p1e-4", "lognormal", {"mu": 0.0, "sigma": 1.0}, 0.0001, (1, 60), 0.00001),
    ]
}


@dataclass
class RunRecord:
    run: int
    reference_attempts: int
    pot_point: float
    pot_lower: float
    pot_upper: float
    im_estimates_used: int
    im_lower: float
    im_upper: float
    im_pick: float
    im_nonconverged: int


@dataclass
class MethodSummary:
    coverage: float
    mean_length: float
    mae: float
    runs: int


@dataclass
class ComparisonReport:
    scenario: Scenario
    methods: dict[str, MethodSummary]
    records: list[RunRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self, include_runs: bool = True) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.scenario.to_dict(),
            "methods": {k: asdict(v) for k, v in self.methods.items()},
            **self.meta,
        }
        if include_runs:
            d["runs"] = [asdict(r) for r in self.records]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def table_csv(self) -> str:
        """One row per method, in the column layout of the published tables."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Method", "N", "Coverage", "CI Length", "MAE"])
        for name, m in self.methods.items():
            n = self.scenario.n_estimates if name == "ROSF" else ""
            w.writerow([name, n, format(m.coverage, ".17g"), format(m.mean_length, ".17g"), format(m.mae, ".17g")])
        return buf.getvalue()


def _im_estimates(x: np.ndarray, scn: Scenario, run: int, reps: int) -> tuple[np.ndarray, int]:
    grid = PGrid(scn.increment)
    out = np.empty(reps)
    nonconverged = 0
    for rep in range(reps):
        cfg = scn.fusion_config(streams.derive_seed(scn.seed, streams.HARNESS, run, rep))
        tr = single_start_estimate(run_rosf(x, scn.T, cfg, workers=1), grid)
        out[rep] = tr.converged_p
        nonconverged += not tr.converged
    return out, nonconverged


def _one_run(scn: Scenario, run: int) -> RunRecord:
    rng = streams.stream(scn.seed, streams.HARNESS, run, streams.REFERENCE)
    x, attempts = sample_reference(scn.dist, scn.n_0, rng, scn.T if scn.condition_max else None)
    try:
        pot, _ = pot_tail(x, scn.T, u_quantile=scn.u_quantile, level=scn.ci_level)
        ests, nonconv = _im_estimates(x, scn, run, scn.im_reps)
    except Exception as exc:
        raise HarnessError(f"{type(exc).__name__}: {exc}", run) from exc
    pick = streams.stream(scn.seed, streams.HARNESS, run, streams.PICK)
    chosen = pick.choice(ests, size=scn.n_estimates, replace=False)
    return RunRecord(
        run=run,
        reference_attempts=attempts,
        pot_point=pot.point,
        pot_lower=pot.lower,
        pot_upper=pot.upper,
        im_estimates_used=scn.n_estimates,
        im_lower=float(chosen.min()),
        im_upper=float(chosen.max()),
        im_pick=float(ests[pick.integers(ests.size)]),
        im_nonconverged=nonconv,
    )


def _summaries(scn: Scenario, records: list[RunRecord]) -> dict[str, MethodSummary]:
    p = scn.p_true
    pot_lo = np.array([r.pot_lower for r in records])
    pot_hi = np.array([r.pot_upper for r in records])
    im_lo = np.array([r.im_lower for r in records])
    im_hi = np.array([r.im_upper for r in records])
    return {
        "POT": MethodSummary(
            coverage=float(np.mean((pot_lo <= p) & (p <= pot_hi))),
            mean_length=float(np.mean(pot_hi - pot_lo)),
            mae=float(np.mean([abs(r.pot_point - p) for r in records])),
            runs=len(records),
        ),
        "ROSF": MethodSummary(
            coverage=float(np.mean((im_lo <= p) & (p <= im_hi))),
            mean_length=float(np.mean(im_hi - im_lo)),
            mae=float(np.mean([abs(r.im_pick - p) for r in records])),
            runs=len(records),
        ),
    }


def run_comparison(scn: Scenario, workers: int | None = 1) -> ComparisonReport:
    """Coverage, mean interval length and MAE for POT and ROSF over ``scn.runs`` runs.

    Every run draws from streams addressed by ``(scn.seed, run)``, so the report
    is identical at any worker count.
    """
    workers = min(resolve_workers(workers), scn.runs)
    if workers == 1:
        records = [_one_run(scn, r) for r in range(scn.runs)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_one_run, [scn] * scn.runs, range(scn.runs)))
    records.sort(key=lambda r: r.run)
    meta = {"p_source": "parametric" if scn.dist.parametric else "population proportion"}
    return ComparisonReport(scn, _summaries(scn, records), records, meta)


@dataclass
class VarianceResult:
    mean: float
    sd: float | None
    estimates: np.ndarray
    nonconverged: int


def variance_study(scn: Scenario, run: int = 0) -> VarianceResult:
    """Spread of single-start estimates over ``scn.im_reps`` fresh ROSF batches.

    One reference sample is drawn (stream ``(scn.seed, run)``) and kept fixed;
    each repetition fuses it with ``scn.n_fusions`` new uniform samples. ``sd``
    is ``None`` for a single repetition.
    """
    rng = streams.stream(scn.seed, streams.HARNESS, run, streams.REFERENCE)
    x, _ = sample_reference(scn.dist, scn.n_0, rng, scn.T if scn.condition_max else None)
    ests, nonconv = _im_estimates(x, scn, run, scn.im_reps)
    sd = float(np.std(ests, ddof=1)) if ests.size > 1 else None
    return VarianceResult(float(ests.mean()), sd, ests, nonconv)
