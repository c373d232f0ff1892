import numpy as np
import pytest
from scipy import stats

from latentsna.model import ConnectomeDataset, ModelState


def random_spd(rng, d, df=None):
    """A well-conditioned random covariance matrix."""
    df = df or d + 4
    return stats.wishart.rvs(df=df, scale=np.eye(d) / df, random_state=rng)


def random_instance(rng, N=4, V=3, P=2, Qc=2, Qa=2, conn_obs=None, attr_obs=None):
    """Random dataset and state of matching dimensions (not standardized)."""
    X = rng.normal(size=(N, V, V))
    W = np.column_stack([np.ones(N), rng.normal(size=(N, Qc - 1))])
    H = np.column_stack([np.ones(N), rng.normal(size=(N, Qa - 1))])
    data = ConnectomeDataset(X, rng.normal(size=(N, P)), W, H,
                             conn_observed=conn_obs, attr_observed=attr_obs)
    state = random_state(rng, N, V, P, Qc, Qa)
    return data, state


def random_state(rng, N, V, P, Qc, Qa):
    return ModelState(
        Z=rng.normal(size=(N, V)), theta=rng.normal(size=N),
        Sigma=random_spd(rng, V + 1), beta=rng.normal(size=Qc), gamma=rng.normal(size=Qa),
        a=rng.normal(size=N), b=rng.normal(size=P),
        sigma2=float(rng.gamma(2.0, 0.5)), tau2=float(rng.gamma(2.0, 0.5)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# --- acceptance reporting ----------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


def make_chain(lambda_samples, Z=None, labels=()):
    """A PosteriorChain holding the given coupling draws (S x V)."""
    from latentsna.sampler import PosteriorChain, SamplerConfig
    L = np.atleast_2d(np.asarray(lambda_samples, float))
    S, V = L.shape
    Zs = None if Z is None else np.asarray(Z, float)
    N = 1 if Zs is None else Zs.shape[1]
    zz = np.zeros((V, V)) if Zs is None else np.einsum("sik,sil->kl", Zs, Zs) / (S * N)
    return PosteriorChain(
        config=SamplerConfig(n_iterations=S + 1, burn_in=1), reference_signs=np.ones((N, V), np.int8),
        lambda_ztheta=L, lambda_theta=np.ones(S), sigma2=np.ones(S), tau2=np.ones(S),
        beta=np.zeros((S, 1)), gamma=np.zeros((S, 1)),
        Z_mean=np.zeros((N, V)) if Zs is None else Zs.mean(axis=0), theta_mean=np.zeros(N),
        Sigma_mean=np.eye(V + 1), zz_mean=zz, Z=Zs,
        theta=None if Zs is None else np.zeros((S, N)),
        node_labels=tuple(labels) or tuple(f"R{u + 1}" for u in range(V)))
