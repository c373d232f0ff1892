"""Convergence summaries for retained traces, with an optional SVG trace plot."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

from .sampler import PosteriorChain

__all__ = [
    "ChainTooShortError", "batch_means_mcse", "lag1_autocorrelation",
    "effective_sample_size", "convergence_summary", "trace_svg", "MIN_LENGTH",
]

MIN_LENGTH = 10


class ChainTooShortError(ValueError):
    pass


def _is_constant(x):
    return np.ptp(x) <= 1e-14 * max(1.0, float(np.max(np.abs(x))))


def batch_means_mcse(x) -> float:
    """Monte Carlo standard error of the mean from floor(sqrt(n))-sized batches."""
    x = np.asarray(x, float)
    n = x.size
    b = max(int(math.isqrt(n)), 1)
    a = n // b
    if a < 2:
        return math.nan
    means = x[: a * b].reshape(a, b).mean(axis=1)
    var_bm = b * means.var(ddof=1)
    return math.sqrt(var_bm / n)


def _autocov(x):
    n = x.size
    d = x - x.mean()
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(d, m)
    return np.fft.irfft(f * np.conj(f), m)[:n] / n


def lag1_autocorrelation(x) -> float:
    x = np.asarray(x, float)
    if x.size < 2 or _is_constant(x):
        return math.nan
    c = _autocov(x)
    return float(c[1] / c[0])


def effective_sample_size(x) -> float:
    """Geyer initial-monotone-sequence ESS; NaN for a constant trace."""
    x = np.asarray(x, float)
    n = x.size
    if n < 2 or _is_constant(x):
        return math.nan
    c = _autocov(x)
    rho = c / c[0]
    # pair sums Gamma_k = rho_{2k} + rho_{2k+1}, truncated at the first
    # non-positive pair and forced to be non-increasing
    total = 0.0
    prev = math.inf
    for k in range(0, n - 1, 2):
        g = rho[k] + rho[k + 1]
        if g <= 0:
            break
        g = min(g, prev)
        total += g
        prev = g
    tau = max(2.0 * total - 1.0, 1.0 / n)
    return float(min(n / tau, n * math.log10(n)) if n > 1 else n)


def _traces(chain) -> dict:
    if isinstance(chain, PosteriorChain):
        out = {f"lambda_ztheta[{lab}]": chain.lambda_ztheta[:, u]
               for u, lab in enumerate(chain.node_labels)}
        out["sigma2"] = chain.sigma2
        out["tau2"] = chain.tau2
        return out
    return {k: np.asarray(v, float).ravel() for k, v in dict(chain).items()}


def convergence_summary(chain, svg_path=None) -> list:
    """One row per scalar summary parameter.

    ``chain`` is a :class:`PosteriorChain` (coupling covariances, sigma2,
    tau2) or a mapping of name to 1-D trace.  Rows hold ``parameter``,
    ``mean``, ``mcse``, ``lag1``, ``ess`` and ``n``; undefined quantities
    (e.g. for a constant trace) are NaN.
    """
    traces = _traces(chain)
    rows = []
    for name, x in traces.items():
        if x.size < MIN_LENGTH:
            raise ChainTooShortError(
                f"trace {name} has {x.size} draws; at least {MIN_LENGTH} are needed")
        const = _is_constant(x)
        rows.append({
            "parameter": name, "n": int(x.size), "mean": float(x.mean()),
            "mcse": 0.0 if const else batch_means_mcse(x),
            "lag1": lag1_autocorrelation(x), "ess": effective_sample_size(x),
        })
    if svg_path is not None:
        from .io import atomic_write
        atomic_write(svg_path, trace_svg(traces))
    return rows


def trace_svg(traces: dict, width: int = 640, panel: int = 80) -> str:
    """Stacked trace panels as a standalone SVG document."""
    names = list(traces)
    h = panel * max(len(names), 1) + 10
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h}" '
           f'viewBox="0 0 {width} {h}">',
           '<rect width="100%" height="100%" fill="white"/>']
    left, right = 150, width - 10
    for k, name in enumerate(names):
        x = np.asarray(traces[name], float)
        top = 5 + k * panel
        lo, hi = float(x.min()), float(x.max())
        span = hi - lo if hi > lo else 1.0
        xs = left + (right - left) * np.arange(x.size) / max(x.size - 1, 1)
        ys = top + panel - 10 - (panel - 20) * (x - lo) / span
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xs, ys))
        out.append(f'<text x="4" y="{top + panel / 2:.1f}" font-size="11" '
                   f'font-family="monospace">{escape(name)}</text>')
        out.append(f'<rect x="{left}" y="{top}" width="{right - left}" height="{panel - 10}" '
                   'fill="none" stroke="#999"/>')
        out.append(f'<polyline fill="none" stroke="#1f4e79" stroke-width="0.7" points="{pts}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
