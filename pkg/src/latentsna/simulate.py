"""Synthetic cohorts and the power/specificity comparison study."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import baselines as bl
from .baselines import n_signal_regions
from .detect import covariance_intervals
from .model import ConnectomeDataset, ModelState, edge_indices, standardize_connectivity
from .predict import pearson, predict_attributes
from .sampler import SamplerConfig

log = logging.getLogger(__name__)

__all__ = [
    "SimulationConfig", "SyntheticCohort", "CohortGenerationError",
    "build_sigma", "draw_latents", "generate_cohort", "n_signal_regions",
    "ComparisonTable", "score_method", "split_indices", "run_comparison",
    "compare_multivariate_vs_sum", "METHODS",
]

METHODS = ("LatentSNA", "CPM", "Lasso", "CCA")

SIGNAL_BLOCK_COV = 0.85


class CohortGenerationError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    N: int = 1000
    V: int = 20
    P: int = 3
    signal_proportion: float = 0.1
    signal_magnitude: float = 0.9
    snr: float = 1.0
    attr_noise_var: float = 0.5
    # Optional per-attribute noise variances; overrides attr_noise_var.
    attr_noise_vars: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if min(self.N, self.V, self.P) < 1:
            raise ValueError("N, V and P must be >= 1")
        if not 0.0 <= self.signal_proportion <= 1.0:
            raise ValueError("signal_proportion must lie in [0, 1]")
        if not (self.snr > 0 and self.attr_noise_var > 0):
            raise ValueError("snr and attr_noise_var must be positive")
        if self.attr_noise_vars is not None:
            if len(self.attr_noise_vars) != self.P or min(self.attr_noise_vars) <= 0:
                raise ValueError("attr_noise_vars must hold P positive values")
            object.__setattr__(self, "attr_noise_vars", tuple(self.attr_noise_vars))

    def replace(self, **kw) -> "SimulationConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["attr_noise_vars"] is not None:
            d["attr_noise_vars"] = list(d["attr_noise_vars"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        d = dict(d)
        if d.get("attr_noise_vars") is not None:
            d["attr_noise_vars"] = tuple(d["attr_noise_vars"])
        return cls(**d)


@dataclass(frozen=True)
class SyntheticCohort:
    dataset: ConnectomeDataset
    truth: ModelState
    signal_regions: frozenset
    config: SimulationConfig
    noise_var: float = field(default=1.0)


def build_sigma(V: int, signal_regions, magnitude: float) -> np.ndarray:
    """Unit-variance joint covariance with the given coupled regions.

    Coupled regions get ``magnitude`` covariance with theta and 0.85 with
    each other; if that is not PD a ridge 1e-6, 1e-5, ... is added to the
    region block.
    """
    S = np.eye(V + 1)
    sig = np.asarray(sorted(signal_regions), dtype=int)
    if sig.size:
        S[sig, V] = S[V, sig] = magnitude
        if sig.size > 1:
            S[np.ix_(sig, sig)] = SIGNAL_BLOCK_COV
            S[sig, sig] = 1.0
    if np.linalg.eigvalsh(S)[0] > 0:
        return S
    for k in range(-6, 3):
        R = S.copy()
        R[:V, :V] += 10.0 ** k * np.eye(V)
        if np.linalg.eigvalsh(R)[0] > 0:
            return R
    raise CohortGenerationError(
        f"cannot make Sigma positive definite for V={V}, "
        f"{sig.size} signal regions, magnitude={magnitude}")


def draw_latents(Sigma: np.ndarray, N: int, rng) -> tuple:
    """``(Z, theta)`` with rows drawn i.i.d. from MVN(0, Sigma)."""
    L = np.linalg.cholesky(Sigma)
    lat = rng.standard_normal((N, Sigma.shape[0])) @ L.T
    return lat[:, :-1], lat[:, -1]


def generate_cohort(config: SimulationConfig, standardize: bool = True) -> SyntheticCohort:
    """Draw a cohort from the generative model with zero covariate effects.

    ``standardize=False`` keeps the raw connectivity (useful for checking
    the generator itself).
    """
    rng = np.random.default_rng(config.seed)
    N, V, P = config.N, config.V, config.P
    k = n_signal_regions(config.signal_proportion, V)
    signal = np.sort(rng.choice(V, size=k, replace=False)) if k else np.array([], int)
    Sigma = build_sigma(V, signal, config.signal_magnitude)
    Z, theta = draw_latents(Sigma, N, rng)

    iu, iv = edge_indices(V)
    bil = Z[:, iu] * Z[:, iv]
    signal_var = float(bil.var()) if bil.size > 1 else 1.0
    noise_var = signal_var / config.snr
    xe = bil + rng.normal(0.0, math.sqrt(noise_var), size=bil.shape)
    X = np.zeros((N, V, V))
    X[:, iu, iv] = xe
    X[:, iv, iu] = xe

    nv = np.asarray(config.attr_noise_vars or (config.attr_noise_var,) * P, dtype=float)
    Y = theta[:, None] + rng.standard_normal((N, P)) * np.sqrt(nv)[None, :]

    data = ConnectomeDataset(X, Y)
    if standardize and N >= 2 and V >= 2:
        data = standardize_connectivity(data)
    truth = ModelState(
        Z=Z, theta=theta, Sigma=Sigma, beta=np.zeros(1), gamma=np.zeros(1),
        a=np.zeros(N), b=np.zeros(P), sigma2=noise_var, tau2=float(nv.mean()))
    return SyntheticCohort(data, truth, frozenset(int(s) for s in signal), config, noise_var)


# --- scoring -----------------------------------------------------------------

def score_method(cohort: SyntheticCohort, flags, prediction_correlation=None) -> dict:
    """Power and specificity of per-region flags against the cohort truth.

    Power is NaN when the cohort has no signal regions and specificity is
    NaN when every region carries signal.
    """
    V = cohort.config.V
    flags = np.asarray(flags, dtype=bool)
    if flags.shape != (V,):
        raise ValueError(f"flags must have length {V}")
    truth = np.zeros(V, dtype=bool)
    truth[list(cohort.signal_regions)] = True
    n_true, n_null = int(truth.sum()), int((~truth).sum())
    power = float((flags & truth).sum() / n_true) if n_true else math.nan
    spec = float((~flags & ~truth).sum() / n_null) if n_null else math.nan
    row = {"power": power, "specificity": spec}
    if prediction_correlation is not None:
        row["prediction_correlation"] = float(prediction_correlation)
    return row


@dataclass
class ComparisonTable:
    """Cell-level summaries plus the per-replicate records they came from.

    ``rows`` holds one dict per (cell, method) with replicate means and
    Monte Carlo standard errors; ``records`` holds every replicate outcome,
    including failures (``error`` is not None).
    """

    rows: list
    records: list
    grid: list

    COLUMNS = ("cell", "method", "N", "V", "P", "signal_proportion", "snr",
               "signal_magnitude", "replicates", "failed", "power", "power_se",
               "specificity", "specificity_se", "prediction_correlation",
               "prediction_correlation_se")

    def __len__(self):
        return len(self.rows)

    def lookup(self, method: str, cell: int) -> dict:
        for r in self.rows:
            if r["method"] == method and r["cell"] == cell:
                return r
        raise KeyError((method, cell))

    def failures(self) -> list:
        return [r for r in self.records if r["error"] is not None]


def _mean_se(values):
    v = np.asarray([x for x in values if x is not None and not math.isnan(x)], float)
    if v.size == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
    return float(v.mean()), se


def split_indices(n: int, test_fraction: float, rng) -> tuple:
    """Random train/test split; at least one subject on each side."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    if n < 2:
        raise ValueError("need at least 2 subjects to split")
    m = min(max(int(round(test_fraction * n)), 1), n - 1)
    perm = rng.permutation(n)
    return np.sort(perm[m:]), np.sort(perm[:m])


def _replicate_seeds(master_seed: int, cell: int, rep: int):
    """Cohort seed and method seed for one replicate, independent of run order."""
    ss = np.random.SeedSequence([master_seed, cell, rep])
    a, b = ss.generate_state(2)
    return int(a), int(b)


def _run_method(method, cohort, train, test, sampler_config, method_seed):
    V = cohort.config.V
    target = train.attributes.sum(axis=1)
    observed = test.attributes.sum(axis=1)
    if method == "LatentSNA":
        cfg = replace(sampler_config, seed=method_seed)
        res = predict_attributes(train, test.connectivity, config=cfg,
                                 observed=test.attributes)["THETA"]
        flags = covariance_intervals(res.chain).significant
        return flags, res.correlations["summary"]
    if method == "CPM":
        m = bl.cpm_fit(train.edges(), target)
        return bl.cpm_flag_regions(m, V), pearson(bl.cpm_predict(m, test.edges()), observed)
    if method == "Lasso":
        m = bl.lasso_fit_cv(train.edges(), target, seed=method_seed)
        return bl.lasso_flag_regions(m, V), pearson(bl.lasso_predict(m, test.edges()), observed)
    if method == "CCA":
        m = bl.cca_fit(train.edges(), train.attributes)
        # predict the sum score by regressing it on the edge-side variate
        u = m.transform(train.edges())
        slope, icpt = np.polyfit(u, target, 1)
        pred = icpt + slope * m.transform(test.edges())
        return (bl.cca_flag_regions(m, cohort.config.signal_proportion, V),
                pearson(pred, observed))
    raise ValueError(f"unknown method {method!r}")


def _run_replicate(cell, rep, config, methods, master_seed, sampler_config, test_fraction):
    cohort_seed, method_seed = _replicate_seeds(master_seed, cell, rep)
    out = []
    try:
        cohort = generate_cohort(config.replace(seed=cohort_seed))
        tr, te = split_indices(config.N, test_fraction, np.random.default_rng(method_seed))
        train, test = cohort.dataset.subset(tr), cohort.dataset.subset(te)
    except Exception as exc:        # recorded, not dropped
        return [{"cell": cell, "replicate": rep, "method": m, "error": f"{type(exc).__name__}: {exc}",
                 "power": math.nan, "specificity": math.nan, "prediction_correlation": math.nan}
                for m in methods]
    for m in methods:
        rec = {"cell": cell, "replicate": rep, "method": m, "error": None}
        try:
            flags, corr = _run_method(m, cohort, train, test, sampler_config, method_seed)
            rec.update(score_method(cohort, flags, corr))
            rec["flags"] = np.flatnonzero(flags).tolist()
        except Exception as exc:
            log.warning("cell %d replicate %d method %s failed: %s", cell, rep, m, exc)
            rec.update(error=f"{type(exc).__name__}: {exc}", power=math.nan,
                       specificity=math.nan, prediction_correlation=math.nan)
        out.append(rec)
    return out


def _n_jobs(n_jobs):
    cap = os.environ.get("LATENTSNA_THREADS")
    if cap:
        try:
            n_jobs = min(n_jobs, max(int(cap), 1))
        except ValueError:
            raise ValueError("LATENTSNA_THREADS must be an integer") from None
    return max(int(n_jobs), 1)


def run_comparison(grid, methods=METHODS, replicates: int = 100, master_seed: int = 0,
                   sampler_config: SamplerConfig = SamplerConfig(),
                   test_fraction: float = 0.2, n_jobs: int = 1,
                   progress=None) -> ComparisonTable:
    """Replicated power/specificity/prediction study over a grid of configs.

    Each (cell, replicate) gets its own seeds derived from ``master_seed``,
    so results do not depend on ``n_jobs`` or on execution order.
    """
    grid = [g if isinstance(g, SimulationConfig) else SimulationConfig.from_dict(g) for g in grid]
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    tasks = [(c, r) for c in range(len(grid)) for r in range(replicates)]
    args = lambda c, r: (c, r, grid[c], methods, master_seed, sampler_config, test_fraction)
    jobs = _n_jobs(n_jobs)
    if jobs > 1:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=jobs)(delayed(_run_replicate)(*args(c, r)) for c, r in tasks)
    else:
        results = []
        for c, r in tasks:
            results.append(_run_replicate(*args(c, r)))
            if progress is not None:
                progress(c, r)
    records = sorted((rec for res in results for rec in res),
                     key=lambda d: (d["cell"], d["replicate"], methods.index(d["method"])))

    rows = []
    for c, cfg in enumerate(grid):
        for m in methods:
            recs = [r for r in records if r["cell"] == c and r["method"] == m]
            ok = [r for r in recs if r["error"] is None]
            row = {"cell": c, "method": m, "N": cfg.N, "V": cfg.V, "P": cfg.P,
                   "signal_proportion": cfg.signal_proportion, "snr": cfg.snr,
                   "signal_magnitude": cfg.signal_magnitude,
                   "replicates": len(ok), "failed": len(recs) - len(ok)}
            for key in ("power", "specificity", "prediction_correlation"):
                row[key], row[key + "_se"] = _mean_se(r[key] for r in ok)
            rows.append(row)
    return ComparisonTable(rows, records, grid)


# --- multivariate versus sum score -------------------------------------------

def compare_multivariate_vs_sum(cohort_or_dataset, config: SamplerConfig = SamplerConfig(),
                                n_splits: int = 10, test_fraction: float = 0.2,
                                seed: int = 0) -> dict:
    """Held-out THETA correlations of a P-column fit and a row-sum fit.

    Both are scored against the observed held-out sum score, so the two
    numbers are directly comparable.  Splits are shared between the fits.
    """
    data = getattr(cohort_or_dataset, "dataset", cohort_or_dataset)
    if data.n_attributes < 2:
        raise ValueError("multivariate comparison requires P ≥ 2")
    summed = data.replace(attributes=data.attributes.sum(axis=1, keepdims=True),
                          attribute_labels=("sum",))
    rng = np.random.default_rng(seed)
    multi, single = [], []
    for k in range(n_splits):
        tr, te = split_indices(data.n_subjects, test_fraction, rng)
        observed = data.attributes[te].sum(axis=1)
        cfg = replace(config, seed=int(np.random.SeedSequence([seed, k]).generate_state(1)[0]))
        rm = predict_attributes(data.subset(tr), data.connectivity[te], config=cfg)["THETA"]
        rs = predict_attributes(summed.subset(tr), data.connectivity[te], config=cfg)["THETA"]
        multi.append(pearson(rm.predicted.sum(axis=1), observed))
        single.append(pearson(rs.predicted[:, 0], observed))
    multi, single = np.array(multi), np.array(single)
    return {"multivariate": multi, "sum": single,
            "multivariate_mean": float(multi.mean()), "sum_mean": float(single.mean())}
