"""Domain types and the joint log-density of the latent network model.

Connectivity for subject ``i`` between regions ``u < v`` is

    x[i, u, v] = w_i @ beta + a_i + z[i, u] * z[i, v] + e,   e ~ N(0, sigma2)

and attribute ``p`` is

    y[i, p] = h_i @ gamma + b_p + theta_i + eps,             eps ~ N(0, tau2)

with ``(z_i, theta_i) ~ MVN(0, Sigma)`` jointly across regions and the
attribute latent.  The last row/column of ``Sigma`` couples each region's
latent to ``theta``; those entries are the biomarker covariances.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import stats
from scipy.linalg import cho_factor, cho_solve, LinAlgError

__all__ = [
    "ConnectomeDataset",
    "ModelState",
    "Residuals",
    "DimensionError",
    "NotPositiveDefiniteError",
    "ZeroVarianceError",
    "standardize_connectivity",
    "edge_moments",
    "fisher_z",
    "joint_log_density",
    "compute_residuals",
    "edge_indices",
    "precision_from_cov",
]


class DimensionError(ValueError):
    """Array shapes disagree between a state and a dataset."""


class NotPositiveDefiniteError(ValueError):
    """A covariance matrix failed its Cholesky factorization."""


class ZeroVarianceError(ValueError):
    """An edge is constant across subjects and cannot be standardized."""

    def __init__(self, u: int, v: int):
        super().__init__(f"zero variance at edge ({u},{v})")
        self.edge = (u, v)


def edge_indices(V: int):
    """Upper-triangle ``(u, v)`` index arrays with ``u < v``."""
    return np.triu_indices(V, k=1)


def _symmetrize_slices(x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=float)
    iu, iv = edge_indices(x.shape[1])
    x[:, iv, iu] = x[:, iu, iv]
    idx = np.arange(x.shape[1])
    x[:, idx, idx] = 0.0
    return x


@dataclass(frozen=True)
class ConnectomeDataset:
    """N symmetric V x V networks plus an N x P attribute matrix.

    ``conn_observed`` and ``attr_observed`` mark, per subject, whether the
    connectivity block and attribute block are observed.  Unobserved
    blocks are carried as zeros and ignored by every likelihood term; the
    prediction routines use them to augment a fit with held-out subjects.
    """

    connectivity: np.ndarray
    attributes: np.ndarray
    conn_covariates: np.ndarray | None = None
    attr_covariates: np.ndarray | None = None
    node_labels: tuple = ()
    attribute_labels: tuple = ()
    conn_observed: np.ndarray | None = None
    attr_observed: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.connectivity, dtype=float)
        if x.ndim != 3 or x.shape[1] != x.shape[2]:
            raise DimensionError(f"connectivity must be N x V x V, got {x.shape}")
        N, V, _ = x.shape
        y = np.asarray(self.attributes, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.shape[0] != N:
            raise DimensionError(
                f"attributes have {y.shape[0]} rows but connectivity has {N} subjects")

        def covariates(c, name):
            if c is None:
                return np.ones((N, 1))
            c = np.asarray(c, dtype=float)
            if c.ndim == 1:
                c = c[:, None]
            if c.shape[0] != N or c.shape[1] < 1:
                raise DimensionError(f"{name} must be N x Q with Q >= 1, got {c.shape}")
            if N and not np.all(c[:, 0] == 1.0):
                raise ValueError(f"first column of {name} must be identically 1")
            return c

        def mask(m):
            if m is None:
                return np.ones(N, dtype=bool)
            m = np.asarray(m, dtype=bool)
            if m.shape != (N,):
                raise DimensionError(f"observation mask must have shape ({N},)")
            return m

        cm = mask(self.conn_observed)
        am = mask(self.attr_observed)
        x = _symmetrize_slices(x)
        x[~cm] = 0.0
        y = y.copy()
        y[~am] = 0.0
        node_labels = tuple(self.node_labels) or tuple(f"R{u + 1}" for u in range(V))
        attr_labels = tuple(self.attribute_labels) or tuple(
            f"Y{p + 1}" for p in range(y.shape[1]))
        if len(node_labels) != V or len(attr_labels) != y.shape[1]:
            raise DimensionError("label counts do not match V and P")
        for arr in (x, y):
            if not np.all(np.isfinite(arr)):
                raise ValueError("dataset contains non-finite values")
            arr.setflags(write=False)
        set_ = object.__setattr__
        set_(self, "connectivity", x)
        set_(self, "attributes", y)
        set_(self, "conn_covariates", covariates(self.conn_covariates, "conn_covariates"))
        set_(self, "attr_covariates", covariates(self.attr_covariates, "attr_covariates"))
        set_(self, "node_labels", node_labels)
        set_(self, "attribute_labels", attr_labels)
        set_(self, "conn_observed", cm)
        set_(self, "attr_observed", am)

    @property
    def n_subjects(self) -> int:
        return self.connectivity.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.connectivity.shape[1]

    @property
    def n_attributes(self) -> int:
        return self.attributes.shape[1]

    def edges(self) -> np.ndarray:
        """N x E matrix of upper-triangle edge weights."""
        return self.edge_matrix.copy()

    @cached_property
    def edge_matrix(self) -> np.ndarray:
        iu, iv = edge_indices(self.n_nodes)
        e = np.ascontiguousarray(self.connectivity[:, iu, iv])
        e.setflags(write=False)
        return e

    @cached_property
    def edge_sums(self) -> np.ndarray:
        """Per-subject sum of the upper-triangle edge weights."""
        return self.edge_matrix.sum(axis=1)

    def subset(self, idx) -> "ConnectomeDataset":
        idx = np.asarray(idx)
        return ConnectomeDataset(
            self.connectivity[idx], self.attributes[idx],
            self.conn_covariates[idx], self.attr_covariates[idx],
            self.node_labels, self.attribute_labels,
            self.conn_observed[idx], self.attr_observed[idx])

    def replace(self, **changes) -> "ConnectomeDataset":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ModelState:
    """One full assignment of latents and parameters.

    ``theta`` is stored as an N-vector because the attribute latent is
    one-dimensional.  ``Sigma`` is ``(V + 1) x (V + 1)`` with the attribute
    latent last.
    """

    Z: np.ndarray
    theta: np.ndarray
    Sigma: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    a: np.ndarray
    b: np.ndarray
    sigma2: float
    tau2: float

    @property
    def Lambda_z(self) -> np.ndarray:
        V = self.Z.shape[1]
        return self.Sigma[:V, :V]

    @property
    def Lambda_ztheta(self) -> np.ndarray:
        """Per-region covariance between z_u and theta."""
        V = self.Z.shape[1]
        return self.Sigma[:V, V]

    @property
    def Lambda_theta(self) -> float:
        return float(self.Sigma[-1, -1])

    def replace(self, **changes) -> "ModelState":
        return dataclasses.replace(self, **changes)

    def reflect(self) -> "ModelState":
        """Global reflection ``Z -> -Z`` with the matching flip of the coupling block."""
        V = self.Z.shape[1]
        S = self.Sigma.copy()
        S[:V, V] *= -1
        S[V, :V] *= -1
        return self.replace(Z=-self.Z, Sigma=S)

    @classmethod
    def initial(cls, N: int, V: int, Q: int, Qa: int, P: int,
                rng: np.random.Generator, init_scale: float = 1.0) -> "ModelState":
        return cls(
            Z=rng.normal(0.0, init_scale, size=(N, V)),
            theta=rng.normal(0.0, init_scale, size=N),
            Sigma=np.eye(V + 1),
            beta=np.zeros(Q), gamma=np.zeros(Qa),
            a=np.zeros(N), b=np.zeros(P),
            sigma2=1.0, tau2=1.0)


@dataclass(frozen=True)
class Residuals:
    """Connectivity and attribute residuals for a state.

    ``F[i]`` is ``X_i - a_i - w_i @ beta`` (diagonal zero), ``Ftilde`` is
    ``F / sqrt(sigma2)`` and ``T`` is ``Y - b - H @ gamma``.
    """

    F: np.ndarray
    Ftilde: np.ndarray
    T: np.ndarray
    c: float = field(default=1.0)


def compute_residuals(state: ModelState, data: ConnectomeDataset) -> Residuals:
    offset = data.conn_covariates @ state.beta + state.a
    F = data.connectivity - offset[:, None, None]
    idx = np.arange(data.n_nodes)
    F[:, idx, idx] = 0.0
    c = 1.0 / np.sqrt(state.sigma2)
    T = data.attributes - state.b[None, :] - (data.attr_covariates @ state.gamma)[:, None]
    return Residuals(F=F, Ftilde=c * F, T=T, c=c)


def precision_from_cov(Sigma: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric PD matrix via Cholesky; raises if not PD."""
    try:
        cf = cho_factor(Sigma, lower=True)
    except LinAlgError as exc:
        raise NotPositiveDefiniteError("Sigma is not positive definite") from exc
    Q = cho_solve(cf, np.eye(Sigma.shape[0]))
    return 0.5 * (Q + Q.T)


def edge_moments(dataset: ConnectomeDataset):
    """Per-edge mean and sample SD (N - 1 denominator) over observed subjects."""
    obs = dataset.conn_observed
    if int(obs.sum()) < 2:
        raise ValueError("standardization requires at least 2 subjects")
    e = dataset.edge_matrix[obs]
    return e.mean(axis=0), e.std(axis=0, ddof=1)


def standardize_connectivity(dataset: ConnectomeDataset, moments=None) -> ConnectomeDataset:
    """Z-score every edge across observed subjects.

    ``moments=(mean, sd)`` applies another sample's edge moments instead,
    e.g. training moments to held-out subjects.
    """
    mean, sd = edge_moments(dataset) if moments is None else moments
    iu, iv = edge_indices(dataset.n_nodes)
    bad = np.flatnonzero(~(sd > 0))
    if bad.size:
        k = bad[0]
        raise ZeroVarianceError(int(iu[k]) + 1, int(iv[k]) + 1)
    x = dataset.connectivity
    out = np.zeros_like(x)
    out[:, iu, iv] = (x[:, iu, iv] - mean) / sd
    out[~dataset.conn_observed] = 0.0
    return dataset.replace(connectivity=out)


def fisher_z(r):
    """Fisher z-transform ``atanh(r)``; rejects ``|r| >= 1``."""
    r = np.asarray(r, dtype=float)
    if np.any(~(np.abs(r) < 1)):
        raise ValueError("fisher_z requires |r| < 1")
    out = np.arctanh(r)
    return float(out) if out.ndim == 0 else out


# Prior hyperparameters.
PRIOR_PREC_SHAPE = 0.5
PRIOR_PREC_RATE = 0.5


def _gamma_logpdf(x, shape, rate):
    return stats.gamma.logpdf(x, shape, scale=1.0 / rate)


def check_dimensions(state: ModelState, data: ConnectomeDataset) -> None:
    N, V = data.n_subjects, data.n_nodes
    expected = {
        "Z": (N, V), "theta": (N,), "Sigma": (V + 1, V + 1),
        "beta": (data.conn_covariates.shape[1],),
        "gamma": (data.attr_covariates.shape[1],),
        "a": (N,), "b": (data.n_attributes,),
    }
    for name, shape in expected.items():
        got = np.shape(getattr(state, name))
        if got != shape:
            raise DimensionError(f"{name} has shape {got}, expected {shape}")


def joint_log_density(state: ModelState, data: ConnectomeDataset) -> float:
    """Log of likelihood times priors.

    The error variances enter through their precisions: the priors are
    gamma(1/2, 1/2) densities on ``1/sigma2`` and ``1/tau2`` (no Jacobian),
    matching the parametrization the sampler draws in.  ``Sigma`` has an
    inverse-Wishart(I, V + 3) prior.
    """
    check_dimensions(state, data)
    if not (state.sigma2 > 0 and state.tau2 > 0):
        raise ValueError("sigma2 and tau2 must be positive")
    N, V = data.n_subjects, data.n_nodes
    Q = precision_from_cov(state.Sigma)
    logdet = np.linalg.slogdet(state.Sigma)[1]
    res = compute_residuals(state, data)
    iu, iv = edge_indices(V)

    cm, am = data.conn_observed, data.attr_observed
    r = res.F[cm][:, iu, iv] - state.Z[cm][:, iu] * state.Z[cm][:, iv]
    n_x = r.size
    ll_x = -0.5 * n_x * np.log(2 * np.pi * state.sigma2) - 0.5 * np.sum(r ** 2) / state.sigma2
    t = res.T[am] - state.theta[am, None]
    n_y = t.size
    ll_y = -0.5 * n_y * np.log(2 * np.pi * state.tau2) - 0.5 * np.sum(t ** 2) / state.tau2

    F1 = np.column_stack([state.Z, state.theta])
    quad = np.einsum("ij,jk,ik->", F1, Q, F1)
    ll_latent = -0.5 * quad - 0.5 * N * (logdet + (V + 1) * np.log(2 * np.pi))

    lp = (stats.norm.logpdf(state.beta).sum() + stats.norm.logpdf(state.gamma).sum()
          + stats.norm.logpdf(state.a).sum() + stats.norm.logpdf(state.b).sum())
    lp += _gamma_logpdf(1.0 / state.sigma2, PRIOR_PREC_SHAPE, PRIOR_PREC_RATE)
    lp += _gamma_logpdf(1.0 / state.tau2, PRIOR_PREC_SHAPE, PRIOR_PREC_RATE)
    lp += stats.invwishart.logpdf(state.Sigma, df=V + 3, scale=np.eye(V + 1))
    return float(ll_x + ll_y + ll_latent + lp)
