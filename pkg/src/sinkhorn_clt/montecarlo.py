"""Replication engine comparing simulated statistics with their predicted limits.

Each replicate draws multinomial counts on the atoms of the truth measures,
solves on the resulting empirical measures and records the statistic together
with its plug-in variance. Replicate ``r`` always uses the random stream
``SeedSequence(seed, spawn_key=(0, r))``, so serial and parallel runs produce
the same numbers in the same order.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import EmptySample, InvalidMeasure, NoConvergence
from .inference import (
    SECOND_ORDER,
    FunctionalSpec,
    cost_variance_one_sample,
    divergence_h1_variance,
    functional_variance,
    h0_limit_sample,
    h0_limit_spectrum,
    normal_quantile,
    potential_covariance,
    sampling_rate,
)
from .measures import DiscreteMeasure, restrict
from .operators import build_operators
from .sinkhorn import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    extend_f,
    extend_g,
    sinkhorn_divergence,
    solve,
)

TRUTH_TOL = 1e-12
DEGENERATE_VAR = 1e-14
STATISTICS = ("cost", "potential", "functional", "divergence", "scaled-divergence-H0")


def ks_distance(a, b="normal") -> float:
    """Two-sided Kolmogorov-Smirnov distance of ``a`` to ``b``.

    ``b`` is either the string ``"normal"`` (standard normal CDF) or a second
    sample, in which case the two empirical CDFs are compared.
    """
    a = np.asarray(a, dtype=float).ravel()
    if a.size == 0:
        raise EmptySample("KS distance of an empty sample")
    if isinstance(b, str):
        if b != "normal":
            raise ValueError(f"unknown reference distribution {b!r}")
        return float(stats.kstest(a, "norm").statistic)
    b = np.asarray(b, dtype=float).ravel()
    if b.size == 0:
        raise EmptySample("KS distance against an empty reference sample")
    return float(stats.ks_2samp(a, b).statistic)


# -- configuration -------------------------------------------------------------


def _measure_from_doc(doc, name: str) -> DiscreteMeasure:
    if not isinstance(doc, dict) or "points" not in doc or "weights" not in doc:
        raise InvalidMeasure(f"{name} needs 'points' and 'weights'")
    return DiscreteMeasure.from_arrays(doc["points"], doc["weights"])


@dataclass(frozen=True)
class SimulationConfig:
    """One Monte Carlo experiment.

    ``statistic`` is one of ``"cost"``, ``"potential"`` (``atom`` is an index
    into ``truth_P`` or ``"all"``), ``"functional"`` (``eta`` required),
    ``"divergence"`` or ``"scaled-divergence-H0"``. Leaving ``m`` unset
    samples only P. ``workers > 1`` runs replicates in a process pool.
    """

    truth_P: DiscreteMeasure
    truth_Q: DiscreteMeasure
    statistic: str
    epsilon: float
    n: int
    replications: int
    m: int | None = None
    seed: int = 0
    level: float = 0.95
    atom: int | str = "all"
    eta: FunctionalSpec | None = None
    workers: int = 1
    h0_draws: int = 100_000
    h0_form: str = SECOND_ORDER
    keep_replicates: bool = False
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        if self.statistic not in STATISTICS:
            raise ValueError(f"statistic must be one of {STATISTICS}, got {self.statistic!r}")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.n < 2 or (self.m is not None and self.m < 2):
            raise ValueError("sample sizes must be >= 2")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.workers < 1 or self.h0_draws < 1:
            raise ValueError("workers and h0_draws must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.statistic == "functional" and self.eta is None:
            raise ValueError("statistic 'functional' needs eta")
        if self.statistic == "cost" and self.m is not None:
            raise ValueError("the cost statistic is implemented for the one-sample case only")
        if self.statistic == "potential" and self.atom != "all":
            if not 0 <= int(self.atom) < self.truth_P.size:
                raise ValueError(f"atom index {self.atom} outside truth_P")
        if self.statistic == "scaled-divergence-H0" and not self.truth_P.equals(self.truth_Q):
            raise ValueError("scaled-divergence-H0 needs truth_Q equal to truth_P")
        if self.truth_P.dim != self.truth_Q.dim:
            raise ValueError("truth measures live in different dimensions")

    @property
    def lam(self) -> float | None:
        return None if self.m is None else self.m / (self.n + self.m)

    @property
    def rate(self) -> float:
        return sampling_rate(self.n, self.m)

    @classmethod
    def from_dict(cls, doc: dict) -> "SimulationConfig":
        doc = dict(doc)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in ("truth_P", "statistic", "epsilon", "n", "replications"):
            if key not in doc:
                raise ValueError(f"config is missing {key!r}")
        doc["truth_P"] = _measure_from_doc(doc["truth_P"], "truth_P")
        if "truth_Q" in doc:
            doc["truth_Q"] = _measure_from_doc(doc["truth_Q"], "truth_Q")
        elif doc["statistic"] == "scaled-divergence-H0":
            doc["truth_Q"] = doc["truth_P"]
        else:
            raise ValueError("config is missing 'truth_Q'")
        eta = doc.get("eta")
        if eta is not None and not isinstance(eta, FunctionalSpec):
            doc["eta"] = _eta_from_doc(eta)
        for key in ("n", "m", "replications", "seed", "workers", "h0_draws", "max_iter"):
            if doc.get(key) is not None:
                value = doc[key]
                if isinstance(value, bool) or int(value) != value:
                    raise ValueError(f"{key} must be an integer")
                doc[key] = int(value)
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "SimulationConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ValueError("config must be a JSON object")
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "SimulationConfig":
        return cls.from_json(Path(path).read_text())


def _eta_from_doc(doc) -> FunctionalSpec:
    """``{"kind": "half-squared-distance" | "threshold" | "constant" | "matrix", "value": ...}``."""
    if isinstance(doc, str):
        return FunctionalSpec(doc)
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ValueError("eta must be a kind name or an object with a 'kind' key")
    kind = doc["kind"]
    if kind == "matrix":
        return FunctionalSpec.matrix(doc["value"])
    if kind in ("threshold", "constant"):
        return FunctionalSpec(kind, float(doc["value"]))
    return FunctionalSpec(kind)


# -- one replicate -------------------------------------------------------------


def replicate_rng(seed: int, r: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, r)))


def mixture_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))


def _draw(cfg: SimulationConfig, rng: np.random.Generator):
    P_n, idx_p = restrict(cfg.truth_P, rng.multinomial(cfg.n, cfg.truth_P.weights))
    if cfg.m is None:
        return P_n, idx_p, cfg.truth_Q, np.arange(cfg.truth_Q.size)
    Q_m, idx_q = restrict(cfg.truth_Q, rng.multinomial(cfg.m, cfg.truth_Q.weights))
    return P_n, idx_p, Q_m, idx_q


def _potential_at_truth(cfg, sol, P_n, Q_hat):
    """Estimated f at every truth atom, in the gauge ``E_Q g = 0`` of the truth Q."""
    f = extend_f(sol, Q_hat, cfg.truth_P.points)
    shift = cfg.truth_Q.weights @ extend_g(sol, P_n, cfg.truth_Q.points)
    return f + shift


def _replicate(cfg: SimulationConfig, r: int):
    """Return ``(value, plugin_variance)`` for replicate ``r`` or ``None`` on NoConvergence."""
    rng = replicate_rng(cfg.seed, r)
    P_n, idx_p, Q_hat, idx_q = _draw(cfg, rng)
    try:
        if cfg.statistic == "cost":
            sol = solve(P_n, Q_hat, cfg.epsilon, cfg.tol, cfg.max_iter)
            return sol.cost, cost_variance_one_sample(sol, P_n)
        if cfg.statistic == "potential":
            sol = solve(P_n, Q_hat, cfg.epsilon, cfg.tol, cfg.max_iter)
            values = _potential_at_truth(cfg, sol, P_n, Q_hat)
            cov = potential_covariance(sol, build_operators(sol, P_n, Q_hat), cfg.lam)
            var = np.full(cfg.truth_P.size, np.nan)
            var[idx_p] = np.diag(cov.cov_f)
            return values, var
        if cfg.statistic == "functional":
            E = cfg.eta.evaluate(cfg.truth_P, cfg.truth_Q)[np.ix_(idx_p, idx_q)]
            sol = solve(P_n, Q_hat, cfg.epsilon, cfg.tol, cfg.max_iter)
            ops = build_operators(sol, P_n, Q_hat)
            value = float(np.sum(sol.plan(P_n, Q_hat) * E))
            return value, functional_variance(E, sol, ops, cfg.lam)
        if cfg.statistic == "divergence":
            res = sinkhorn_divergence(P_n, Q_hat, cfg.epsilon, cfg.tol, cfg.max_iter)
            var, _, _ = divergence_h1_variance(P_n, Q_hat, cfg.epsilon, cfg.lam, result=res)
            return res.value, var
        # scaled-divergence-H0: the statistic is already on its limit scale
        res = sinkhorn_divergence(P_n, Q_hat, cfg.epsilon, cfg.tol, cfg.max_iter)
        return cfg.rate * res.value, math.nan
    except NoConvergence:
        return None


def _replicate_batch(cfg: SimulationConfig, indices: list[int]):
    return [_replicate(cfg, r) for r in indices]


def _run_all(cfg: SimulationConfig) -> list:
    R = cfg.replications
    if cfg.workers == 1 or R == 1:
        return _replicate_batch(cfg, list(range(R)))
    chunks = [list(range(R))[k::cfg.workers] for k in range(cfg.workers)]
    out = [None] * R
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        for chunk, results in zip(chunks, pool.map(_replicate_batch, [cfg] * len(chunks), chunks)):
            for r, res in zip(chunk, results):
                out[r] = res
    return out


# -- truth ---------------------------------------------------------------------


def _truth(cfg: SimulationConfig):
    """Population value and predicted limit variance (vectors for potentials)."""
    P, Q, eps = cfg.truth_P, cfg.truth_Q, cfg.epsilon
    if cfg.statistic == "cost":
        sol = solve(P, Q, eps, TRUTH_TOL)
        return sol.cost, cost_variance_one_sample(sol, P)
    if cfg.statistic == "potential":
        sol = solve(P, Q, eps, TRUTH_TOL)
        cov = potential_covariance(sol, build_operators(sol, P, Q), cfg.lam)
        return sol.f.copy(), np.diag(cov.cov_f).copy()
    if cfg.statistic == "functional":
        sol = solve(P, Q, eps, TRUTH_TOL)
        E = cfg.eta.evaluate(P, Q)
        value = float(np.sum(sol.plan(P, Q) * E))
        return value, functional_variance(E, sol, build_operators(sol, P, Q), cfg.lam)
    if cfg.statistic == "divergence":
        res = sinkhorn_divergence(P, Q, eps, TRUTH_TOL)
        var, _, _ = divergence_h1_variance(P, Q, eps, cfg.lam, result=res)
        return res.value, var
    return 0.0, math.nan


# -- report --------------------------------------------------------------------


@dataclass
class ReplicationReport:
    statistic: str
    replications: int
    failures: int
    truth_value: float
    empirical_mean: float
    predicted_mean: float
    empirical_variance: float
    predicted_variance: float
    variance_ratio: float
    ks_statistic: float
    coverage: float
    level: float
    atom: int | None = None
    atoms: list[dict] | None = None
    spectrum: list[float] | None = None
    replicates: list[float] | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        doc = {
            "statistic": self.statistic,
            "replications": self.replications,
            "failures": self.failures,
            "truth_value": self.truth_value,
            "empirical_mean": self.empirical_mean,
            "predicted_mean": self.predicted_mean,
            "empirical_variance": self.empirical_variance,
            "predicted_variance": self.predicted_variance,
            "variance_ratio": self.variance_ratio,
            "ks_statistic": self.ks_statistic,
            "coverage": self.coverage,
            "level": self.level,
        }
        if self.atom is not None:
            doc["atom"] = self.atom
        if self.atoms is not None:
            doc["atoms"] = self.atoms
        if self.spectrum is not None:
            doc["spectrum"] = self.spectrum
        if self.replicates is not None:
            doc["replicates"] = self.replicates
        return doc

    def replicates_csv(self) -> str:
        if self.replicates is None:
            raise ValueError("report was built without keep_replicates")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["replicate", "value"])
        for r, v in enumerate(self.replicates):
            writer.writerow([r, format(v, ".17g")])
        return buf.getvalue()


def _sample_var(x: np.ndarray) -> float:
    return float(np.var(x, ddof=1)) if len(x) > 1 else 0.0


def _summarize(values, plugin_var, truth, predicted, cfg) -> dict:
    """Aggregate one scalar statistic; ``values`` are raw estimates in replicate order."""
    rate = cfg.rate
    scaled = math.sqrt(rate) * (values - truth)
    emp_var = _sample_var(scaled)
    if predicted > DEGENERATE_VAR:
        ks = ks_distance(scaled / math.sqrt(predicted))
        ratio = emp_var / predicted
    else:
        # point mass at 0; rounding noise of a degenerate statistic counts as 0
        ks = ks_distance(np.where(np.abs(scaled) <= 1e-9, 0.0, scaled), [0.0])
        ratio = math.nan
    z = normal_quantile(0.5 + cfg.level / 2)
    half = z * np.sqrt(np.maximum(plugin_var, 0.0) / rate)
    covered = np.abs(values - truth) <= half
    covered &= np.isfinite(plugin_var)
    return {
        "truth_value": float(truth),
        "empirical_mean": float(np.mean(scaled)),
        "predicted_mean": 0.0,
        "empirical_variance": emp_var,
        "predicted_variance": float(predicted),
        "variance_ratio": float(ratio),
        "ks_statistic": ks,
        "coverage": float(np.mean(covered)),
    }


def run_replications(cfg: SimulationConfig) -> ReplicationReport:
    """Simulate ``cfg.replications`` replicates and compare them with the limit law.

    Replicates whose solver fails to converge are skipped and counted in
    ``failures``. For the H0 statistic the reference is a sample of
    ``h0_draws`` values from the chi-square mixture, drawn from its own
    stream, and ``coverage`` is the fraction of replicates below the
    ``level``-quantile of that sample.
    """
    truth, predicted = _truth(cfg)
    results = _run_all(cfg)
    ok = [res for res in results if res is not None]
    failures = len(results) - len(ok)
    if not ok:
        raise NoConvergence(math.inf, cfg.max_iter, cfg.tol)
    base = dict(statistic=cfg.statistic, replications=cfg.replications,
                failures=failures, level=cfg.level)

    if cfg.statistic == "scaled-divergence-H0":
        values = np.array([v for v, _ in ok])
        spec = h0_limit_spectrum(cfg.truth_P, cfg.epsilon, cfg.h0_form)
        mixture = h0_limit_sample(spec, cfg.h0_draws, mixture_rng(cfg.seed))
        emp_var = _sample_var(values)
        pred_var = spec.variance
        report = ReplicationReport(
            **base, truth_value=0.0,
            empirical_mean=float(np.mean(values)), predicted_mean=spec.mean,
            empirical_variance=emp_var, predicted_variance=pred_var,
            variance_ratio=emp_var / pred_var if pred_var > 0 else math.nan,
            ks_statistic=ks_distance(values, mixture),
            coverage=float(np.mean(values <= np.quantile(mixture, cfg.level))),
            spectrum=spec.weights.tolist(),
        )
    elif cfg.statistic == "potential":
        values = np.array([v for v, _ in ok])
        plugin = np.array([w for _, w in ok])
        atoms = range(cfg.truth_P.size) if cfg.atom == "all" else [int(cfg.atom)]
        per_atom = []
        for i in atoms:
            summary = _summarize(values[:, i], plugin[:, i], truth[i], predicted[i], cfg)
            per_atom.append({"atom": i, **summary})
        worst = max(per_atom, key=lambda s: abs(s["variance_ratio"] - 1)
                    if math.isfinite(s["variance_ratio"]) else -1.0)
        fields = {k: v for k, v in worst.items() if k != "atom"}
        report = ReplicationReport(**base, **fields, atom=worst["atom"],
                                   atoms=per_atom if cfg.atom == "all" else None)
        values = values[:, worst["atom"]]
    else:
        values = np.array([v for v, _ in ok])
        plugin = np.array([w for _, w in ok])
        report = ReplicationReport(**base, **_summarize(values, plugin, truth, predicted, cfg))
    if cfg.keep_replicates:
        report.replicates = values.tolist()
    return report
