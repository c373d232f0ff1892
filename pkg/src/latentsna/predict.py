"""Held-out prediction in both directions.

Attribute prediction augments the training set with the new subjects, whose
attribute rows are treated as missing: their latents are drawn from the
usual full conditionals (which simply lose the attribute-likelihood term)
and the missing attributes are imputed at every retained iteration.
Connectivity prediction does the same with the connectivity block missing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ConnectomeDataset, edge_indices, DimensionError
from .sampler import SamplerConfig, PosteriorChain, run_chain

__all__ = [
    "PredictionResult", "pearson", "augment",
    "predict_attributes", "predict_attributes_theta", "predict_attributes_z",
    "predict_connectivity", "averaging_baseline", "connectivity_correlations",
    "RankDeficientError",
]

METHODS = ("THETA", "Z", "CONNECTIVITY", "AVERAGING")


class RankDeficientError(ValueError):
    pass


def pearson(a, b) -> float:
    """Pearson correlation; 0.0 when either side is constant.

    Spread below 1e-12 of the values' magnitude is treated as rounding
    noise around a constant.
    """
    a = np.asarray(a, float).ravel()
    b = np.asarray(b, float).ravel()
    if a.size < 2 or _is_constant(a) or _is_constant(b):
        return 0.0
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    return float(np.clip(a @ b / den, -1.0, 1.0))


def _is_constant(x) -> bool:
    return np.ptp(x) <= 1e-12 * max(1.0, float(np.max(np.abs(x))))


@dataclass
class PredictionResult:
    predicted: np.ndarray
    method: str
    correlations: dict = field(default_factory=dict)
    chain: PosteriorChain | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method tag {self.method!r}")

    @property
    def summary_correlation(self) -> float:
        return self.correlations.get("summary", float("nan"))


def _looks_standardized(data: ConnectomeDataset) -> bool:
    e = data.edge_matrix[data.conn_observed]
    if e.shape[0] < 2:
        return True
    m = e.mean(axis=0)
    s = e.std(axis=0, ddof=1)
    return bool(np.all(np.abs(m) < 0.5) and np.all((s > 0.5) & (s < 2.0)))


def _check_train(train: ConnectomeDataset):
    if train.n_subjects < 1:
        raise ValueError("training set is empty")
    if not _looks_standardized(train):
        raise ValueError("training connectivity does not look standardized; "
                         "standardize edges across subjects first")


def _covariates(c, M, Q, name):
    if c is None:
        c = np.ones((M, 1))
    c = np.asarray(c, float)
    if c.ndim == 1:
        c = c[:, None]
    if c.shape != (M, Q):
        raise DimensionError(f"{name} must have shape ({M}, {Q}), got {c.shape}")
    return c


def augment(train: ConnectomeDataset, new_connectivity=None, new_attributes=None,
            new_conn_covariates=None, new_attr_covariates=None) -> ConnectomeDataset:
    """Stack ``M`` new subjects under the training set with one block missing."""
    V, P = train.n_nodes, train.n_attributes
    if new_connectivity is not None:
        X = np.asarray(new_connectivity, float)
        if X.ndim != 3 or X.shape[1:] != (V, V):
            raise DimensionError(f"new connectivity must be M x {V} x {V}")
        M = X.shape[0]
    else:
        Y = np.asarray(new_attributes, float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.shape[1] != P:
            raise DimensionError(f"new attributes must have {P} columns")
        M = Y.shape[0]
    if new_connectivity is None:
        X = np.zeros((M, V, V))
    if new_attributes is None:
        Y = np.zeros((M, P))
    W = _covariates(new_conn_covariates, M, train.conn_covariates.shape[1], "conn covariates")
    H = _covariates(new_attr_covariates, M, train.attr_covariates.shape[1], "attr covariates")
    return ConnectomeDataset(
        np.concatenate([train.connectivity, X]),
        np.concatenate([train.attributes, Y]),
        np.concatenate([train.conn_covariates, W]),
        np.concatenate([train.attr_covariates, H]),
        train.node_labels, train.attribute_labels,
        np.concatenate([train.conn_observed, np.full(M, new_connectivity is not None)]),
        np.concatenate([train.attr_observed, np.full(M, new_attributes is not None)]),
    )


def _attribute_correlations(pred, observed):
    if observed is None:
        return {}
    observed = np.asarray(observed, float)
    if observed.ndim == 1:
        observed = observed[:, None]
    if observed.shape != pred.shape:
        raise DimensionError("observed attributes do not match the prediction shape")
    out = {f"col{p + 1}": pearson(pred[:, p], observed[:, p]) for p in range(pred.shape[1])}
    out["summary"] = pearson(pred.sum(axis=1), observed.sum(axis=1))
    return out


def predict_attributes(train: ConnectomeDataset, new_connectivity, new_conn_covariates=None,
                       new_attr_covariates=None, config: SamplerConfig = SamplerConfig(),
                       observed=None) -> dict:
    """THETA and Z predictions from a single augmented chain.

    Returns ``{"THETA": PredictionResult, "Z": PredictionResult}``.
    ``summary`` correlations are against the held-out attribute row sums.
    """
    _check_train(train)
    N = train.n_subjects
    data = augment(train, new_connectivity=new_connectivity,
                   new_conn_covariates=new_conn_covariates,
                   new_attr_covariates=new_attr_covariates)
    M = data.n_subjects - N
    H_new = data.attr_covariates[N:]
    imp_rng = np.random.default_rng([config.seed, 1])
    acc = np.zeros((M, train.n_attributes))
    count = 0

    def collect(_, state):
        nonlocal count
        mean = (H_new @ state.gamma)[:, None] + state.b[None, :] + state.theta[N:, None]
        acc[:] += mean + np.sqrt(state.tau2) * imp_rng.standard_normal(mean.shape)
        count += 1

    chain = run_chain(data, config, callback=collect)
    theta_pred = acc / max(count, 1)

    Zm = chain.Z_mean
    design = np.column_stack([np.ones(N), Zm[:N]])
    _check_rank(design)
    coef, *_ = np.linalg.lstsq(design, train.attributes, rcond=None)
    z_pred = np.column_stack([np.ones(M), Zm[N:]]) @ coef

    return {
        "THETA": PredictionResult(theta_pred, "THETA",
                                  _attribute_correlations(theta_pred, observed), chain),
        "Z": PredictionResult(z_pred, "Z", _attribute_correlations(z_pred, observed), chain),
    }


def _check_rank(design):
    rank = np.linalg.matrix_rank(design)
    if rank == design.shape[1]:
        return
    bad, kept = [], []
    for j in range(design.shape[1]):
        trial = kept + [j]
        if np.linalg.matrix_rank(design[:, trial]) < len(trial):
            bad.append(j)
        else:
            kept.append(j)
    names = ["intercept" if j == 0 else f"z{j}" for j in bad]
    raise RankDeficientError(f"rank-deficient design; collinear columns: {', '.join(names)}")


def predict_attributes_theta(train, new_connectivity, new_covariates=None,
                             config: SamplerConfig = SamplerConfig(), observed=None,
                             new_attr_covariates=None) -> PredictionResult:
    return predict_attributes(train, new_connectivity, new_covariates, new_attr_covariates,
                              config, observed)["THETA"]


def predict_attributes_z(train, new_connectivity, new_covariates=None,
                         config: SamplerConfig = SamplerConfig(), observed=None,
                         new_attr_covariates=None) -> PredictionResult:
    return predict_attributes(train, new_connectivity, new_covariates, new_attr_covariates,
                              config, observed)["Z"]


def connectivity_correlations(pred, observed, reference=None, node_subsets=None) -> dict:
    """Pooled Pearson correlations over held-out upper-triangle entries.

    ``whole`` uses every edge, each named node subset uses the edges among
    its nodes, and ``deviation`` correlates departures from ``reference``
    (typically the training-mean network).
    """
    pred = np.asarray(pred, float)
    obs = np.asarray(observed, float)
    if pred.shape != obs.shape:
        raise DimensionError("observed connectivity does not match the prediction shape")
    V = pred.shape[1]
    iu, iv = edge_indices(V)
    pe, oe = pred[:, iu, iv], obs[:, iu, iv]
    out = {"whole": pearson(pe, oe)}
    if reference is not None:
        ref = np.asarray(reference, float)[iu, iv]
        out["deviation"] = pearson(pe - ref, oe - ref)
    for name, nodes in (node_subsets or {}).items():
        keep = np.isin(iu, list(nodes)) & np.isin(iv, list(nodes))
        if keep.any():
            out[name] = pearson(pe[:, keep], oe[:, keep])
    return out


def predict_connectivity(train: ConnectomeDataset, new_attributes, new_covariates=None,
                         config: SamplerConfig = SamplerConfig(), observed=None,
                         node_subsets=None, new_attr_covariates=None) -> PredictionResult:
    """Posterior-mean networks for subjects with attributes only.

    New subjects' intercepts ``a_i`` are drawn from their prior inside the
    sampler, so the prediction averages over them.
    """
    _check_train(train)
    N = train.n_subjects
    data = augment(train, new_attributes=new_attributes,
                   new_conn_covariates=new_covariates, new_attr_covariates=new_attr_covariates)
    M = data.n_subjects - N
    V = data.n_nodes
    W_new = data.conn_covariates[N:]
    acc = np.zeros((M, V, V))
    count = 0

    def collect(_, state):
        nonlocal count
        z = state.Z[N:]
        off = W_new @ state.beta + state.a[N:]
        acc[:] += off[:, None, None] + z[:, :, None] * z[:, None, :]
        count += 1

    chain = run_chain(data, config, callback=collect)
    pred = acc / max(count, 1)
    idx = np.arange(V)
    pred[:, idx, idx] = 0.0
    corr = {}
    if observed is not None:
        corr = connectivity_correlations(pred, observed, _train_mean(train), node_subsets)
    return PredictionResult(pred, "CONNECTIVITY", corr, chain)


def _train_mean(train: ConnectomeDataset) -> np.ndarray:
    return train.connectivity[train.conn_observed].mean(axis=0)


def averaging_baseline(train: ConnectomeDataset, n_new: int, observed=None,
                       node_subsets=None) -> PredictionResult:
    """Predict every new network as the training-mean network."""
    if train.n_subjects < 1 or not train.conn_observed.any():
        raise ValueError("training set is empty")
    mean = _train_mean(train)
    pred = np.repeat(mean[None], n_new, axis=0)
    corr = {}
    if observed is not None:
        corr = connectivity_correlations(pred, observed, mean, node_subsets)
    return PredictionResult(pred, "AVERAGING", corr)
