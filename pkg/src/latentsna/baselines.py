"""Comparison methods: CPM, cross-validated Lasso and ridge-stabilized CCA.

All three take an ``N x E`` matrix of vectorized upper-triangle edges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import stats

from .model import edge_indices

__all__ = [
    "CpmModel", "LassoModel", "CcaModel",
    "cpm_fit", "cpm_predict", "cpm_flag_regions",
    "lasso_lambda_grid", "lasso_path", "lasso_fit_cv", "lasso_predict",
    "lasso_flag_regions", "lasso_objective",
    "cca_fit", "cca_flag_regions", "regions_from_edges", "n_signal_regions",
]


def n_signal_regions(signal_proportion: float, V: int) -> int:
    """round(signal_proportion * V), halves rounded up."""
    return int(np.floor(signal_proportion * V + 0.5 + 1e-9))


def regions_from_edges(edge_mask, V: int) -> np.ndarray:
    """Flag every region with at least one incident selected edge."""
    iu, iv = edge_indices(V)
    edge_mask = np.asarray(edge_mask, dtype=bool)
    flags = np.zeros(V, dtype=bool)
    flags[iu[edge_mask]] = True
    flags[iv[edge_mask]] = True
    return flags


# --- CPM ---------------------------------------------------------------------

@dataclass(frozen=True)
class CpmModel:
    positive_edges: np.ndarray
    negative_edges: np.ndarray
    coef: np.ndarray            # intercept, positive-sum slope, negative-sum slope
    p_threshold: float
    intercept_only: bool


def edge_correlations(edges: np.ndarray, target: np.ndarray):
    """Pearson r of each column with the target and its two-sided p-value."""
    x = edges - edges.mean(axis=0)
    y = target - target.mean()
    denom = np.sqrt((x ** 2).sum(axis=0) * (y ** 2).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 0, x.T @ y / denom, 0.0)
    r = np.clip(r, -1.0, 1.0)
    df = len(y) - 2
    with np.errstate(divide="ignore"):
        t = r * np.sqrt(df / np.maximum(1.0 - r ** 2, 0.0))
    p = 2.0 * stats.t.sf(np.abs(t), df)
    return r, p


def cpm_fit(train_edges, train_target, p_threshold: float = 0.01) -> CpmModel:
    X = np.asarray(train_edges, dtype=float)
    y = np.asarray(train_target, dtype=float)
    if X.shape[0] < 3:
        raise ValueError("CPM needs at least 3 subjects")
    r, p = edge_correlations(X, y)
    sel = p < p_threshold
    pos = np.flatnonzero(sel & (r > 0))
    neg = np.flatnonzero(sel & (r < 0))
    feats = _cpm_features(X, pos, neg)
    cols = [0] + [k + 1 for k, idx in enumerate((pos, neg)) if idx.size]
    coef = np.zeros(3)
    sol, *_ = np.linalg.lstsq(feats[:, cols], y, rcond=None)
    coef[cols] = sol
    return CpmModel(pos, neg, coef, p_threshold, intercept_only=len(cols) == 1)


def _cpm_features(X, pos, neg):
    return np.column_stack([np.ones(len(X)), X[:, pos].sum(axis=1), X[:, neg].sum(axis=1)])


def cpm_predict(model: CpmModel, test_edges) -> np.ndarray:
    X = np.atleast_2d(np.asarray(test_edges, dtype=float))
    return _cpm_features(X, model.positive_edges, model.negative_edges) @ model.coef


def cpm_flag_regions(model: CpmModel, V: int) -> np.ndarray:
    mask = np.zeros(V * (V - 1) // 2, dtype=bool)
    mask[model.positive_edges] = True
    mask[model.negative_edges] = True
    return regions_from_edges(mask, V)


# --- Lasso -------------------------------------------------------------------

@dataclass(frozen=True)
class LassoModel:
    coef: np.ndarray
    intercept: float
    lam: float
    cv_folds: int
    lambda_grid: np.ndarray | None = None
    cv_mse: np.ndarray | None = None


def _standardize(X, y):
    xm = X.mean(axis=0)
    xs = X.std(axis=0)
    if np.any(xs == 0):
        xs = np.where(xs == 0, 1.0, xs)
    return (X - xm) / xs, y - y.mean(), xm, xs, y.mean()


@njit(cache=True)
def _cd_solve(G, c, lam, beta, tol, max_sweeps):
    """Covariance-update coordinate descent for
    0.5 * b'Gb - c'b + lam * |b|_1 (G = X'X/n, c = X'y/n)."""
    E = beta.shape[0]
    grad = c - G @ beta
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        max_delta = 0.0
        for j in range(E):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            rho = grad[j] + gjj * beta[j]
            if rho > lam:
                new = (rho - lam) / gjj
            elif rho < -lam:
                new = (rho + lam) / gjj
            else:
                new = 0.0
            d = new - beta[j]
            if d != 0.0:
                for k in range(E):
                    grad[k] -= G[k, j] * d
                beta[j] = new
                if abs(d) > max_delta:
                    max_delta = abs(d)
        if max_delta < tol:
            break
    return sweeps


def lasso_objective(X, y, coef, intercept, lam) -> float:
    """(1 / 2n) ||y - b0 - X b||^2 + lam ||b||_1 on standardized predictors."""
    r = y - intercept - X @ coef
    return 0.5 * float(r @ r) / len(y) + lam * float(np.abs(coef).sum())


def lasso_lambda_grid(X, y, n_lambda: int = 100, ratio: float = 1e-4) -> np.ndarray:
    Xs, yc, *_ = _standardize(np.asarray(X, float), np.asarray(y, float))
    lam_max = np.max(np.abs(Xs.T @ yc)) / len(yc)
    if lam_max == 0:
        return np.zeros(1)
    return np.geomspace(lam_max, ratio * lam_max, n_lambda)


def lasso_path(X, y, lambdas, tol: float = 1e-7, max_sweeps: int = 100000):
    """Coefficient path on the original predictor scale; warm-started.

    Returns ``(coefs, intercepts)`` with one row per lambda.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("lasso inputs must be finite")
    Xs, yc, xm, xs, ym = _standardize(X, y)
    n = len(y)
    G = Xs.T @ Xs / n
    c = Xs.T @ yc / n
    beta = np.zeros(X.shape[1])
    coefs = np.empty((len(lambdas), X.shape[1]))
    for k, lam in enumerate(lambdas):
        _cd_solve(G, c, float(lam), beta, tol, max_sweeps)
        coefs[k] = beta / xs
    intercepts = ym - coefs @ xm
    return coefs, intercepts


def lasso_fit_cv(train_edges, train_target, folds: int = 10, lambda_grid=None,
                 seed: int = 0) -> LassoModel:
    """Pick lambda by minimum mean K-fold CV error, then refit on all data."""
    X = np.asarray(train_edges, float)
    y = np.asarray(train_target, float)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("lasso inputs must be finite")
    grid = lasso_lambda_grid(X, y) if lambda_grid is None else np.asarray(lambda_grid, float)
    grid = np.sort(grid)[::-1]
    n = len(y)
    fold_of = np.random.default_rng(seed).permutation(n) % folds
    mse = np.zeros(len(grid))
    for f in range(folds):
        test = fold_of == f
        coefs, ints = lasso_path(X[~test], y[~test], grid)
        pred = X[test] @ coefs.T + ints[None, :]
        mse += ((pred - y[test, None]) ** 2).mean(axis=0) / folds
    k = int(np.argmin(mse))
    coefs, ints = lasso_path(X, y, grid[: k + 1])
    return LassoModel(coefs[-1], float(ints[-1]), float(grid[k]), folds, grid, mse)


def lasso_predict(model: LassoModel, test_edges) -> np.ndarray:
    return np.atleast_2d(np.asarray(test_edges, float)) @ model.coef + model.intercept


def lasso_flag_regions(model: LassoModel, V: int) -> np.ndarray:
    return regions_from_edges(model.coef != 0, V)


# --- CCA ---------------------------------------------------------------------

@dataclass(frozen=True)
class CcaModel:
    x_weights: np.ndarray
    y_weights: np.ndarray
    x_loadings: np.ndarray   # correlation of each edge with the edge-side variate
    y_loadings: np.ndarray
    correlation: float
    x_mean: np.ndarray
    y_mean: np.ndarray

    def transform(self, X, Y=None):
        u = (np.asarray(X, float) - self.x_mean) @ self.x_weights
        if Y is None:
            return u
        return u, (np.atleast_2d(np.asarray(Y, float)) - self.y_mean) @ self.y_weights


def _inv_sqrt_psd(C):
    w, U = np.linalg.eigh(C)
    if w[0] <= 0:
        raise np.linalg.LinAlgError("covariance is not positive definite after ridge")
    return (U / np.sqrt(w)) @ U.T


def cca_fit(train_edges, train_attributes, ridge: float = 1e-6) -> CcaModel:
    """First canonical pair with ``ridge * I`` added to both covariances.

    The edge side is handled through a thin SVD so ``E >> N`` costs
    O(N^2 E) rather than O(E^3).
    """
    X = np.asarray(train_edges, float)
    Y = np.asarray(train_attributes, float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = X.shape[0]
    if n < 2:
        raise ValueError("CCA needs at least 2 subjects")
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - xm, Y - ym
    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    d = s ** 2 / (n - 1) + ridge
    Cyy = Yc.T @ Yc / (n - 1) + ridge * np.eye(Y.shape[1])
    try:
        Wy = _inv_sqrt_psd(Cyy)
    except np.linalg.LinAlgError as exc:
        raise ValueError("degenerate attribute covariance") from exc
    if np.any(d <= 0):
        raise ValueError("degenerate edge covariance")
    # Whitened cross-covariance expressed in the right singular basis of Xc.
    M = ((s / np.sqrt(d))[:, None] * (U.T @ Yc)) / (n - 1) @ Wy
    A, rho, Bt = np.linalg.svd(M, full_matrices=False)
    a = Vt.T @ (A[:, 0] / np.sqrt(d))
    b = Wy @ Bt[0]
    u, v = Xc @ a, Yc @ b
    su, sv = u.std(ddof=1), v.std(ddof=1)
    if su > 0:
        a, u = a / su, u / su
    if sv > 0:
        b, v = b / sv, v / sv
    xl = _column_corr(Xc, u)
    yl = _column_corr(Yc, v)
    return CcaModel(a, b, xl, yl, float(np.clip(rho[0], 0.0, 1.0)), xm, ym)


def _column_corr(Xc, u):
    denom = np.sqrt((Xc ** 2).sum(axis=0) * (u ** 2).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, Xc.T @ u / denom, 0.0)


def cca_flag_regions(model: CcaModel, signal_proportion: float, V: int) -> np.ndarray:
    """Flag the top round(signal_proportion * V) regions by summed |edge loading|."""
    iu, iv = edge_indices(V)
    score = np.zeros(V)
    w = np.abs(model.x_loadings)
    np.add.at(score, iu, w)
    np.add.at(score, iv, w)
    k = n_signal_regions(signal_proportion, V)
    order = np.lexsort((np.arange(V), -score))
    flags = np.zeros(V, dtype=bool)
    flags[order[:k]] = True
    return flags
