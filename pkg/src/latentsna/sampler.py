"""Gibbs sampler for the joint network/attribute latent model.

Each iteration runs, in order: (beta, a) -> sigma2 -> (gamma, b) -> tau2 ->
(Z, theta) -> Sigma.  The ``*_conditional`` functions return the parameters
of each full conditional; the ``update_*`` functions draw from them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import stats
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.special import expit
from numba import njit

from .model import (
    ConnectomeDataset, ModelState, NotPositiveDefiniteError, check_dimensions,
    edge_indices, precision_from_cov, PRIOR_PREC_SHAPE, PRIOR_PREC_RATE,
)

log = logging.getLogger(__name__)

__all__ = [
    "SamplerConfig", "PosteriorChain", "SamplerError",
    "beta_conditional", "a_conditional", "sigma2_conditional",
    "gamma_conditional", "b_conditional", "tau2_conditional",
    "z_conditional", "theta_conditional", "sigma_conditional",
    "update_connectivity_effects", "update_sigma2", "update_attribute_effects",
    "update_tau2", "update_latents", "update_Sigma", "align_signs",
    "reference_signs_of", "run_chain",
]


class SamplerError(RuntimeError):
    """A Gibbs step failed; ``iteration`` is 1-based."""

    def __init__(self, iteration: int, step: str, cause: Exception):
        super().__init__(f"iteration {iteration}, step {step}: {cause}")
        self.iteration = iteration
        self.step = step


@dataclass(frozen=True)
class SamplerConfig:
    n_iterations: int = 5000
    burn_in: int = 2500
    thin: int = 1
    seed: int = 0
    init_scale: float = 1.0
    # "align": exact row-flip moves during burn-in, then alignment to the
    # reference signs.  "free": row-flip moves every iteration and no
    # alignment.  "none": neither.
    sign_handling: str = "align"
    keep_latents: bool = False

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be positive")
        if not 0 <= self.burn_in < self.n_iterations:
            raise ValueError("burn_in must satisfy 0 <= burn_in < n_iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be positive")
        if self.sign_handling not in ("align", "free", "none"):
            raise ValueError("sign_handling must be 'align', 'free' or 'none'")

    @property
    def n_retained(self) -> int:
        return (self.n_iterations - self.burn_in) // self.thin

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PosteriorChain:
    """Retained post-burn-in draws, reduced to the summaries used downstream.

    Per-iteration traces are kept for the coupling covariances, the
    attribute-latent variance, the error variances and the covariate
    effects.  Posterior means of ``Z``, ``theta`` and ``Sigma`` and the mean
    of the subject-averaged outer products ``z_i z_i^T`` are accumulated;
    full ``Z``/``theta`` draws are kept only when ``config.keep_latents``.
    """

    config: SamplerConfig
    reference_signs: np.ndarray
    lambda_ztheta: np.ndarray
    lambda_theta: np.ndarray
    sigma2: np.ndarray
    tau2: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    Z_mean: np.ndarray
    theta_mean: np.ndarray
    Sigma_mean: np.ndarray
    zz_mean: np.ndarray
    Z: np.ndarray | None = None
    theta: np.ndarray | None = None
    node_labels: tuple = ()
    counters: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.lambda_ztheta.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.lambda_ztheta.shape[1]

    def reflected(self) -> "PosteriorChain":
        """Apply the global reflection ``Z -> -Z`` to every retained draw."""
        V = self.n_nodes
        S = self.Sigma_mean.copy()
        S[:V, V] *= -1
        S[V, :V] *= -1
        return PosteriorChain(
            config=self.config, reference_signs=-self.reference_signs,
            lambda_ztheta=-self.lambda_ztheta, lambda_theta=self.lambda_theta,
            sigma2=self.sigma2, tau2=self.tau2, beta=self.beta, gamma=self.gamma,
            Z_mean=-self.Z_mean, theta_mean=self.theta_mean, Sigma_mean=S,
            zz_mean=self.zz_mean,
            Z=None if self.Z is None else -self.Z, theta=self.theta,
            node_labels=self.node_labels, counters=dict(self.counters))


# --- numerical helpers -------------------------------------------------------

def _mvn_from_precision(rng, prec, lin):
    """Draw from N(prec^{-1} lin, prec^{-1})."""
    try:
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("singular precision matrix") from exc
    mean = cho_solve((L, True), lin)
    eps = rng.standard_normal(len(lin))
    return mean + np.linalg.solve(L.T, eps)


def _moments_from_precision(prec, lin):
    try:
        cf = cho_factor(prec, lower=True)
    except LinAlgError as exc:
        raise NotPositiveDefiniteError("singular precision matrix") from exc
    cov = cho_solve(cf, np.eye(len(lin)))
    return cho_solve(cf, lin), 0.5 * (cov + cov.T)


def _edge_sums(data: ConnectomeDataset, Z: np.ndarray):
    """Per-subject sums over edges u<v of x and of z_u z_v."""
    sx = data.edge_sums
    s = Z.sum(axis=1)
    szz = 0.5 * (s ** 2 - (Z ** 2).sum(axis=1))
    return sx, szz


def _n_edges(V: int) -> int:
    return V * (V - 1) // 2


# --- step 1: beta, a ---------------------------------------------------------

def beta_conditional(state: ModelState, data: ConnectomeDataset):
    """Mean and covariance of beta | a, Z, sigma2, X under a N(0, I) prior."""
    E = _n_edges(data.n_nodes)
    obs = data.conn_observed
    W = data.conn_covariates[obs]
    sx, szz = _edge_sums(data, state.Z)
    r = (sx - szz - E * state.a)[obs]
    prec = np.eye(W.shape[1]) + (E / state.sigma2) * (W.T @ W)
    lin = W.T @ r / state.sigma2
    return _moments_from_precision(prec, lin)


def a_conditional(state: ModelState, data: ConnectomeDataset):
    """Per-subject mean and variance of a_i | beta, Z, sigma2, X (N(0,1) prior)."""
    E = _n_edges(data.n_nodes)
    obs = data.conn_observed.astype(float)
    sx, szz = _edge_sums(data, state.Z)
    prec = 1.0 + obs * E / state.sigma2
    lin = obs * (sx - szz - E * (data.conn_covariates @ state.beta)) / state.sigma2
    return lin / prec, 1.0 / prec


def update_connectivity_effects(state: ModelState, data: ConnectomeDataset,
                                rng: np.random.Generator):
    mean, cov = beta_conditional(state, data)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("singular precision matrix") from exc
    beta = mean + L @ rng.standard_normal(len(mean))
    m, v = a_conditional(state.replace(beta=beta), data)
    a = m + np.sqrt(v) * rng.standard_normal(len(m))
    return beta, a


# --- step 2: sigma2 ----------------------------------------------------------

@njit(cache=True)
def _ssr_kernel(X, obs, offset, Z):
    N, V = Z.shape
    total = 0.0
    for i in range(N):
        if not obs[i]:
            continue
        for u in range(V - 1):
            zu = Z[i, u]
            for v in range(u + 1, V):
                r = X[i, u, v] - offset[i] - zu * Z[i, v]
                total += r * r
    return total


def connectivity_ssr(state: ModelState, data: ConnectomeDataset):
    """Sum of squared connectivity residuals and the observation count."""
    obs = data.conn_observed
    offset = data.conn_covariates @ state.beta + state.a
    ssr = _ssr_kernel(data.connectivity, obs, offset, np.asarray(state.Z, dtype=float))
    return float(ssr), int(obs.sum()) * _n_edges(data.n_nodes)


def sigma2_conditional(state: ModelState, data: ConnectomeDataset):
    """Shape and rate of the gamma full conditional of 1/sigma2."""
    ssr, m = connectivity_ssr(state, data)
    return PRIOR_PREC_SHAPE + 0.5 * m, PRIOR_PREC_RATE + 0.5 * ssr


def update_sigma2(state, data, rng) -> float:
    shape, rate = sigma2_conditional(state, data)
    return 1.0 / rng.gamma(shape, 1.0 / rate)


# --- step 3: gamma, b --------------------------------------------------------

def gamma_conditional(state: ModelState, data: ConnectomeDataset):
    obs = data.attr_observed
    H = data.attr_covariates[obs]
    P = data.n_attributes
    r = (data.attributes[obs] - state.b[None, :] - state.theta[obs, None]).sum(axis=1)
    prec = np.eye(H.shape[1]) + (P / state.tau2) * (H.T @ H)
    lin = H.T @ r / state.tau2
    return _moments_from_precision(prec, lin)


def b_conditional(state: ModelState, data: ConnectomeDataset):
    obs = data.attr_observed
    n = int(obs.sum())
    hg = data.attr_covariates[obs] @ state.gamma
    r = (data.attributes[obs] - hg[:, None] - state.theta[obs, None]).sum(axis=0)
    prec = 1.0 + n / state.tau2
    return (r / state.tau2) / prec, np.full(data.n_attributes, 1.0 / prec)


def update_attribute_effects(state, data, rng):
    mean, cov = gamma_conditional(state, data)
    gamma = mean + np.linalg.cholesky(cov) @ rng.standard_normal(len(mean))
    m, v = b_conditional(state.replace(gamma=gamma), data)
    b = m + np.sqrt(v) * rng.standard_normal(len(m))
    return gamma, b


# --- step 4: tau2 ------------------------------------------------------------

def attribute_ssr(state: ModelState, data: ConnectomeDataset):
    obs = data.attr_observed
    hg = data.attr_covariates[obs] @ state.gamma
    r = data.attributes[obs] - hg[:, None] - state.b[None, :] - state.theta[obs, None]
    return float(np.sum(r ** 2)), r.size


def tau2_conditional(state, data):
    """Shape and rate of the gamma full conditional of 1/tau2."""
    ssr, m = attribute_ssr(state, data)
    return PRIOR_PREC_SHAPE + 0.5 * m, PRIOR_PREC_RATE + 0.5 * ssr


def update_tau2(state, data, rng) -> float:
    shape, rate = tau2_conditional(state, data)
    return 1.0 / rng.gamma(shape, 1.0 / rate)


# --- step 5: Z, theta --------------------------------------------------------

class _LatentKernel:
    """Precomputed quantities for the per-region latent sweep."""

    def __init__(self, data: ConnectomeDataset):
        # (V, N, V) layout makes each region's slice contiguous.
        self.Xt = np.ascontiguousarray(np.transpose(data.connectivity, (1, 0, 2)))
        self.cobs = data.conn_observed.astype(float)
        self.P_obs = data.attr_observed.astype(float) * data.n_attributes

    def region_moments(self, u, Z, theta, Q, offset, c2):
        """Conditional mean/variance of Z[:, u] given everything else."""
        zu = Z[:, u]
        s = Z.sum(axis=1) - zu
        ss = np.einsum("ij,ij->i", Z, Z) - zu * zu
        fz = np.einsum("ij,ij->i", self.Xt[u], Z) - offset * s
        prior_lin = Z @ Q[u, :-1] - Q[u, u] * zu + Q[u, -1] * theta
        prec = self.cobs * c2 * ss + Q[u, u]
        lin = self.cobs * c2 * fz - prior_lin
        return lin / prec, 1.0 / prec


@njit(cache=True)
def _sweep_regions(X, cobs, Z, theta, Q, offset, c2, noise):
    """In-place systematic sweep z[i, 0..V-1] for every subject.

    Subjects are conditionally independent given the global parameters, so
    the per-subject loop order does not change the draw.
    """
    N, V = Z.shape
    for i in range(N):
        s = 0.0
        ss = 0.0
        for v in range(V):
            s += Z[i, v]
            ss += Z[i, v] * Z[i, v]
        for u in range(V):
            zu = Z[i, u]
            fx = 0.0
            pl = Q[u, V] * theta[i]
            for v in range(V):
                fx += X[i, u, v] * Z[i, v]
                if v != u:
                    pl += Q[u, v] * Z[i, v]
            s_u = s - zu
            ss_u = ss - zu * zu
            w = cobs[i] * c2
            prec = w * ss_u + Q[u, u]
            lin = w * (fx - offset[i] * s_u) - pl
            new = lin / prec + noise[i, u] / np.sqrt(prec)
            Z[i, u] = new
            s = s_u + new
            ss = ss_u + new * new


def z_conditional(state: ModelState, data: ConnectomeDataset, u: int):
    """Mean and variance (per subject) of z[:, u] | everything else."""
    Q = precision_from_cov(state.Sigma)
    offset = data.conn_covariates @ state.beta + state.a
    return _LatentKernel(data).region_moments(
        u, state.Z, state.theta, Q, offset, 1.0 / state.sigma2)


def theta_conditional(state: ModelState, data: ConnectomeDataset):
    """Mean and variance (per subject) of theta_i | z_i, Sigma, tau2, Y."""
    Q = precision_from_cov(state.Sigma)
    obs = data.attr_observed.astype(float)
    hg = data.attr_covariates @ state.gamma
    t = (data.attributes - hg[:, None] - state.b[None, :]).sum(axis=1)
    prec = obs * data.n_attributes / state.tau2 + Q[-1, -1]
    lin = obs * t / state.tau2 - state.Z @ Q[:-1, -1]
    return lin / prec, 1.0 / prec


def reflection_log_odds(state: ModelState, Q: np.ndarray) -> np.ndarray:
    """Log odds of ``z_i -> -z_i`` versus keeping ``z_i``, per subject.

    The connectivity likelihood is invariant under a row flip, so only the
    cross term of the latent prior matters.
    """
    return 2.0 * (state.Z @ Q[:-1, -1]) * state.theta


def update_latents(state: ModelState, data: ConnectomeDataset, rng,
                   reflect: bool = False):
    """Systematic sweep over regions (vectorized across subjects), then theta.

    With ``reflect`` an exact Gibbs draw of each subject's row sign is made
    between the region sweep and the theta draw; ``reflect`` may also be a
    per-subject boolean mask.
    """
    Q = precision_from_cov(state.Sigma)
    Z = np.array(state.Z, dtype=float, copy=True)
    N, V = Z.shape
    offset = data.conn_covariates @ state.beta + state.a
    noise = rng.standard_normal((N, V))
    _sweep_regions(data.connectivity, data.conn_observed.astype(float), Z,
                   np.asarray(state.theta, dtype=float), Q, offset,
                   1.0 / state.sigma2, noise)
    flips = 0
    mask = np.broadcast_to(np.asarray(reflect, dtype=bool), (N,))
    if mask.any():
        lo = reflection_log_odds(state.replace(Z=Z), Q)
        flip = (rng.random(N) < expit(lo)) & mask
        Z[flip] *= -1
        flips = int(flip.sum())
    m, v = theta_conditional(state.replace(Z=Z), data)
    theta = m + np.sqrt(v) * rng.standard_normal(N)
    return Z, theta, flips


# --- step 6: Sigma -----------------------------------------------------------

def sigma_conditional(state: ModelState):
    """Degrees of freedom and scale of the inverse-Wishart full conditional."""
    F = np.column_stack([state.Z, state.theta])
    d = F.shape[1]
    # prior IW(I, d + 1) with d = V + 1, i.e. V + 3 degrees of freedom
    return state.Z.shape[0] + d + 2, np.eye(d) + F.T @ F


def _is_pd(S):
    try:
        np.linalg.cholesky(S)
        return True
    except np.linalg.LinAlgError:
        return False


def update_Sigma(state: ModelState, rng) -> np.ndarray:
    df, scale = sigma_conditional(state)
    S = stats.invwishart.rvs(df=df, scale=scale, random_state=rng)
    S = np.atleast_2d(S)
    S = 0.5 * (S + S.T)
    if not _is_pd(S):
        S = S + 1e-10 * np.eye(len(S))
        if not _is_pd(S):
            raise NotPositiveDefiniteError("inverse-Wishart draw is not positive definite")
    return S


# --- sign alignment ----------------------------------------------------------

def reference_signs_of(Z: np.ndarray) -> np.ndarray:
    s = np.sign(Z).astype(np.int8)
    s[s == 0] = 1
    return s


def align_signs(state: ModelState, reference_signs: np.ndarray, rows=None) -> ModelState:
    """Flip whole rows of Z whose inner product with the reference is negative.

    ``rows`` optionally restricts alignment to a boolean subset of subjects.
    """
    ip = np.einsum("ij,ij->i", state.Z, reference_signs)
    flip = ip < 0
    if rows is not None:
        flip &= np.asarray(rows, dtype=bool)
    if not flip.any():
        return state
    Z = state.Z.copy()
    Z[flip] *= -1
    return state.replace(Z=Z)


# --- driver ------------------------------------------------------------------

def run_chain(data: ConnectomeDataset, config: SamplerConfig = SamplerConfig(),
              initial: ModelState | None = None, callback=None) -> PosteriorChain:
    """Run one Gibbs chain.

    ``callback(iteration, state)`` is invoked on every retained state after
    sign alignment.
    """
    rng = np.random.default_rng(config.seed)
    N, V, P = data.n_subjects, data.n_nodes, data.n_attributes
    Qc, Qa = data.conn_covariates.shape[1], data.attr_covariates.shape[1]
    state = initial or ModelState.initial(N, V, Qc, Qa, P, rng, config.init_scale)
    check_dimensions(state, data)

    S = config.n_retained
    tr_l = np.empty((S, V))
    tr_lt = np.empty(S)
    tr_s2 = np.empty(S)
    tr_t2 = np.empty(S)
    tr_b = np.empty((S, Qc))
    tr_g = np.empty((S, Qa))
    Z_sum = np.zeros((N, V))
    th_sum = np.zeros(N)
    Sig_sum = np.zeros((V + 1, V + 1))
    zz_sum = np.zeros((V, V))
    Z_keep = np.empty((S, N, V)) if config.keep_latents else None
    th_keep = np.empty((S, N)) if config.keep_latents else None
    counters = {"iterations": 0, "reflection_flips": 0, "alignment_flips": 0,
                "sigma_jitter": 0}
    free_rows = ~data.conn_observed
    ref = None
    k = 0
    for it in range(1, config.n_iterations + 1):
        step = "beta_a"
        try:
            beta, a = update_connectivity_effects(state, data, rng)
            state = state.replace(beta=beta, a=a)
            step = "sigma2"
            state = state.replace(sigma2=update_sigma2(state, data, rng))
            step = "gamma_b"
            gamma, b = update_attribute_effects(state, data, rng)
            state = state.replace(gamma=gamma, b=b)
            step = "tau2"
            state = state.replace(tau2=update_tau2(state, data, rng))
            step = "latents"
            if config.sign_handling == "free" or (
                    config.sign_handling == "align" and it <= config.burn_in):
                reflect = True
            elif config.sign_handling == "align":
                # rows without connectivity carry no sign information, so
                # they keep the exact flip move instead of being aligned
                reflect = free_rows
            else:
                reflect = False
            Z, theta, flips = update_latents(state, data, rng, reflect)
            counters["reflection_flips"] += flips
            state = state.replace(Z=Z, theta=theta)
            step = "Sigma"
            state = state.replace(Sigma=update_Sigma(state, rng))
        except (NotPositiveDefiniteError, np.linalg.LinAlgError, ValueError) as exc:
            raise SamplerError(it, step, exc) from exc
        counters["iterations"] += 1
        if it <= config.burn_in:
            continue
        if ref is None:
            ref = reference_signs_of(state.Z)
        elif config.sign_handling == "align":
            aligned = align_signs(state, ref, data.conn_observed)
            if aligned is not state:
                counters["alignment_flips"] += int(
                    np.sum(np.any(aligned.Z != state.Z, axis=1)))
            state = aligned
        if (it - config.burn_in) % config.thin:
            continue
        if k >= S:
            break
        tr_l[k] = state.Lambda_ztheta
        tr_lt[k] = state.Lambda_theta
        tr_s2[k] = state.sigma2
        tr_t2[k] = state.tau2
        tr_b[k] = state.beta
        tr_g[k] = state.gamma
        Z_sum += state.Z
        th_sum += state.theta
        Sig_sum += state.Sigma
        zz_sum += state.Z.T @ state.Z / max(N, 1)
        if Z_keep is not None:
            Z_keep[k] = state.Z
            th_keep[k] = state.theta
        if callback is not None:
            callback(it, state)
        k += 1
    if ref is None:
        ref = reference_signs_of(state.Z)
    n = max(k, 1)
    return PosteriorChain(
        config=config, reference_signs=ref,
        lambda_ztheta=tr_l[:k], lambda_theta=tr_lt[:k], sigma2=tr_s2[:k],
        tau2=tr_t2[:k], beta=tr_b[:k], gamma=tr_g[:k],
        Z_mean=Z_sum / n, theta_mean=th_sum / n, Sigma_mean=Sig_sum / n,
        zz_mean=zz_sum / n,
        Z=None if Z_keep is None else Z_keep[:k],
        theta=None if th_keep is None else th_keep[:k],
        node_labels=data.node_labels, counters=counters)
