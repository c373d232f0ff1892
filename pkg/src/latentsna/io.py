"""File formats: long-format dataset CSVs, chain directories, run manifests.

Every file is written atomically (temp file in the target directory, then
``os.replace``).  Reals are written with 17 significant digits, which
round-trips IEEE doubles exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import os
import platform
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .model import ConnectomeDataset, DimensionError, edge_indices
from .sampler import PosteriorChain, SamplerConfig

__all__ = [
    "DatasetFormatError", "ChainFormatError", "RunManifest",
    "atomic_write", "write_csv", "format_real", "file_digest", "path_digest",
    "load_dataset", "read_dataset", "save_dataset", "save_chain", "load_chain",
    "CHAIN_FORMAT_VERSION",
]

CHAIN_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


class DatasetFormatError(ValueError):
    pass


class ChainFormatError(ValueError):
    pass


# --- low-level writers -------------------------------------------------------

def atomic_write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_real(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if np.isnan(x):
            return "nan"
        if np.isinf(x):
            return "inf" if x > 0 else "-inf"
        return "%.17g" % x
    return "" if x is None else str(x)


def write_csv(path, header, rows) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_real(v) for v in row])
    atomic_write(path, buf.getvalue())


def _write_matrix(path, header, M) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    write_csv(path, header, M.tolist() if M.size else [])


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def path_digest(path, exclude=(MANIFEST_NAME,)) -> str:
    """SHA-256 of a file, or of a directory's sorted (name, digest) listing."""
    path = Path(path)
    if path.is_file():
        return file_digest(path)
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file() and p.name not in exclude:
            h.update(str(p.relative_to(path)).encode())
            h.update(file_digest(p).encode())
    return h.hexdigest()


# --- manifests ---------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Provenance record written next to every output.

    Only ``timestamps`` varies between two runs with the same inputs,
    config and seed.
    """

    command: str
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = __version__
    timestamps: dict = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps.setdefault("started", _now())

    def add_input(self, role: str, path) -> None:
        self.inputs[role] = {"path": str(path), "sha256": path_digest(path)}

    def add_output(self, path, root=None) -> None:
        name = str(Path(path).relative_to(root)) if root else Path(path).name
        self.outputs[name] = path_digest(path)

    def to_dict(self) -> dict:
        return {
            "command": self.command, "config": self.config, "seed": self.seed,
            "inputs": self.inputs, "outputs": self.outputs,
            "software": {"latentsna": self.version, "numpy": np.__version__,
                         "python": platform.python_version()},
            "timestamps": self.timestamps,
        }

    def write(self, path) -> Path:
        """Write to ``path`` (a directory gets ``manifest.json``)."""
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        self.timestamps["finished"] = _now()
        atomic_write(path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        d = json.loads(path.read_text())
        return cls(d["command"], d["config"], d["seed"], d["inputs"], d["outputs"],
                   d["software"]["latentsna"], d["timestamps"])

    def verify_inputs(self) -> list:
        """Roles whose input no longer matches the recorded digest."""
        return [r for r, v in self.inputs.items()
                if not Path(v["path"]).exists() or path_digest(v["path"]) != v["sha256"]]


# --- datasets ----------------------------------------------------------------

def _read_table(path: Path, first: str):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetFormatError(f"{path.name}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != first or len(header) < 2:
        raise DatasetFormatError(
            f"{path.name}: malformed header; expected '{first}' followed by value columns")
    body = [r for r in rows[1:] if r]
    ids, vals = [], []
    for k, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DatasetFormatError(f"{path.name}, line {k}: expected {len(header)} fields")
        ids.append(r[0].strip())
        vals.append([c.strip() for c in r[1:]])
    if len(set(ids)) != len(ids):
        raise DatasetFormatError(f"{path.name}: duplicate subject_id")
    return header[1:], ids, vals


def _parse_float(s: str, where: str) -> float:
    if s == "" or s.upper() == "NA":
        return np.nan
    try:
        return float(s)
    except ValueError:
        raise DatasetFormatError(f"{where}: not a number: {s!r}") from None


def _covariate_table(path: Path, ids):
    """Covariate matrix in attribute-file subject order, intercept first."""
    if not path.exists():
        return np.ones((len(ids), 1)), ()
    names, cids, vals = _read_table(path, "subject_id")
    if set(cids) != set(ids) or len(cids) != len(ids):
        raise DatasetFormatError(f"{path.name}: subject mismatch with attributes.csv")
    pos = {s: k for k, s in enumerate(cids)}
    C = np.array([[_parse_float(v, path.name) for v in vals[pos[s]]] for s in ids], float)
    if np.isnan(C).any():
        raise DatasetFormatError(f"{path.name}: missing covariate values")
    if not np.all(C[:, 0] == 1.0):
        C = np.column_stack([np.ones(len(ids)), C])
        names = ("intercept",) + tuple(names)
    return C, tuple(names)


def read_dataset(path, require_connectivity: bool = True):
    """Load a dataset directory; returns ``(dataset, subject_ids)``.

    Attribute rows that are entirely empty/NA mark an unobserved attribute
    block.  Without ``connectivity.csv`` (allowed only when
    ``require_connectivity`` is false) every connectivity block is
    unobserved.  Covariate files are optional; an intercept column is
    prepended unless the first column is already all ones.
    """
    path = Path(path)
    if not path.is_dir():
        raise DatasetFormatError(f"{path}: not a directory")
    names, ids, vals = _read_table(path / "attributes.csv", "subject_id")
    N, P = len(ids), len(names)
    Y = np.array([[_parse_float(v, "attributes.csv") for v in row] for row in vals],
                 float).reshape(N, P)
    miss = np.isnan(Y)
    partial = miss.any(axis=1) & ~miss.all(axis=1)
    if partial.any():
        raise DatasetFormatError(
            f"attributes.csv: subject {ids[int(np.flatnonzero(partial)[0])]} has partially "
            "missing attributes; only whole rows may be missing")
    attr_obs = ~miss.all(axis=1)
    Y[~attr_obs] = 0.0
    W, _ = _covariate_table(path / "covariates_conn.csv", ids)
    H, _ = _covariate_table(path / "covariates_attr.csv", ids)

    cfile = path / "connectivity.csv"
    if cfile.exists():
        X, V = _read_connectivity(cfile, ids)
        conn_obs = np.ones(N, bool)
    elif require_connectivity:
        raise DatasetFormatError(f"{path}: connectivity.csv not found")
    else:
        V = _node_count(path)
        X = np.zeros((N, V, V))
        conn_obs = np.zeros(N, bool)
    labels = _node_labels(path, V)
    data = ConnectomeDataset(X, Y, W, H, labels, tuple(names), conn_obs, attr_obs)
    return data, ids


def load_dataset(path) -> ConnectomeDataset:
    return read_dataset(path)[0]


def _node_count(path: Path) -> int:
    f = path / "nodes.csv"
    if not f.exists():
        raise DatasetFormatError(f"{path}: need connectivity.csv or nodes.csv to fix V")
    return len(_read_nodes(f))


def _read_nodes(f: Path):
    with open(f, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or [h.strip() for h in rows[0]] != ["node", "label"]:
        raise DatasetFormatError("nodes.csv: malformed header; expected 'node,label'")
    return [r[1].strip() for r in rows[1:]]


def _node_labels(path: Path, V: int):
    f = path / "nodes.csv"
    if not f.exists():
        return ()
    labels = _read_nodes(f)
    if len(labels) != V:
        raise DatasetFormatError(f"nodes.csv lists {len(labels)} nodes but V = {V}")
    return tuple(labels)


def _read_connectivity(f: Path, ids):
    with open(f, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["subject_id", "node_u", "node_v", "weight"]:
            raise DatasetFormatError(
                "connectivity.csv: malformed header; expected subject_id,node_u,node_v,weight")
        rows = [r for r in reader if r]
    pos = {s: k for k, s in enumerate(ids)}
    try:
        uu = np.array([int(r[1]) for r in rows])
        vv = np.array([int(r[2]) for r in rows])
        ww = np.array([float(r[3]) for r in rows])
    except (ValueError, IndexError) as exc:
        raise DatasetFormatError(f"connectivity.csv: unparsable row ({exc})") from None
    subj = [r[0].strip() for r in rows]
    unknown = sorted(set(subj) - set(pos))
    if unknown:
        raise DatasetFormatError(f"connectivity.csv: subject {unknown[0]} not in attributes.csv")
    if len(rows) == 0:
        raise DatasetFormatError("connectivity.csv: no edge rows")
    if (uu < 1).any() or (vv < 1).any() or (uu == vv).any():
        raise DatasetFormatError("connectivity.csv: node indices must be >= 1 with u != v")
    V = int(max(uu.max(), vv.max()))
    N = len(ids)
    X = np.zeros((N, V, V))
    # seen[i, a, b] with a < b marks a (u<v) row, with a > b a reversed row
    seen = np.zeros((N, V, V), bool)
    for s, u, v, w in zip(subj, uu, vv, ww):
        i = pos[s]
        lo, hi = (u, v) if u < v else (v, u)
        if seen[i, u - 1, v - 1]:
            what = "conflicting duplicate" if X[i, lo - 1, hi - 1] != w else "duplicate"
            raise DatasetFormatError(
                f"connectivity.csv: {what} row for subject {s}, edge ({lo}, {hi})")
        if seen[i, v - 1, u - 1] and X[i, lo - 1, hi - 1] != w:
            raise DatasetFormatError(
                f"connectivity.csv: conflicting weights for subject {s}, edge ({lo}, {hi}) "
                f"given in both orientations")
        seen[i, u - 1, v - 1] = True
        X[i, lo - 1, hi - 1] = w
    seen |= np.transpose(seen, (0, 2, 1))
    iu, iv = edge_indices(V)
    missing = ~seen[:, iu, iv]
    if missing.any():
        i, k = np.argwhere(missing)[0]
        raise DatasetFormatError(
            f"connectivity.csv: subject {ids[i]} is missing edge ({iu[k] + 1}, {iv[k] + 1})")
    if not np.all(np.isfinite(X)):
        raise DatasetFormatError("connectivity.csv: non-finite weight")
    return X, V


def save_dataset(dataset: ConnectomeDataset, path, subject_ids=None) -> Path:
    """Write the four dataset CSVs plus ``nodes.csv``; unobserved blocks as NA."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    N, V, P = dataset.n_subjects, dataset.n_nodes, dataset.n_attributes
    ids = list(subject_ids) if subject_ids is not None else [f"S{i + 1}" for i in range(N)]
    if len(ids) != N:
        raise DimensionError("subject_ids length does not match N")
    am = dataset.attr_observed
    write_csv(path / "attributes.csv", ["subject_id", *dataset.attribute_labels],
              ([ids[i], *(dataset.attributes[i] if am[i] else ["NA"] * P)] for i in range(N)))
    for name, C in (("covariates_conn.csv", dataset.conn_covariates),
                    ("covariates_attr.csv", dataset.attr_covariates)):
        cols = ["intercept"] + [f"c{k}" for k in range(1, C.shape[1])]
        write_csv(path / name, ["subject_id", *cols], ([ids[i], *C[i]] for i in range(N)))
    write_csv(path / "nodes.csv", ["node", "label"],
              ([u + 1, lab] for u, lab in enumerate(dataset.node_labels)))
    cfile = path / "connectivity.csv"
    if dataset.conn_observed.any():
        iu, iv = edge_indices(V)
        E = dataset.edge_matrix
        write_csv(cfile, ["subject_id", "node_u", "node_v", "weight"],
                  ([ids[i], int(iu[k]) + 1, int(iv[k]) + 1, E[i, k]]
                   for i in np.flatnonzero(dataset.conn_observed) for k in range(len(iu))))
    elif cfile.exists():
        cfile.unlink()
    return path


# --- chains ------------------------------------------------------------------

_TRACES = ("lambda_ztheta", "lambda_theta", "sigma2", "tau2", "beta", "gamma")
_MEANS = ("Z_mean", "theta_mean", "Sigma_mean", "zz_mean")


def _trace_header(name, width, labels):
    if name == "lambda_ztheta":
        return list(labels)
    if width == 1 and name in ("lambda_theta", "sigma2", "tau2"):
        return [name]
    return [f"{name}{k + 1}" for k in range(width)]


def save_chain(chain: PosteriorChain, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    S, V = len(chain), chain.n_nodes
    N = chain.Z_mean.shape[0]
    meta = {
        "format_version": CHAIN_FORMAT_VERSION,
        "software_version": __version__,
        "config": chain.config.to_dict(),
        "seed": chain.config.seed,
        "dims": {"S": S, "N": N, "V": V, "Qc": chain.beta.shape[1], "Qa": chain.gamma.shape[1]},
        "reference_signs": np.asarray(chain.reference_signs).astype(int).tolist(),
        "node_labels": list(chain.node_labels),
        "counters": chain.counters,
        "latents_retained": chain.Z is not None,
    }
    atomic_write(path / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for name in _TRACES:
        M = np.asarray(getattr(chain, name)).reshape(S, -1)
        _write_matrix(path / f"{name}.csv", _trace_header(name, M.shape[1], chain.node_labels), M)
    for name in _MEANS:
        M = np.asarray(getattr(chain, name))
        M = M.reshape(-1, 1) if M.ndim == 1 else M
        _write_matrix(path / f"{name}.csv", [f"c{k + 1}" for k in range(M.shape[1])], M)
    if chain.Z is not None:
        _write_matrix(path / "Z.csv", [f"z{i + 1}_{u + 1}" for i in range(N) for u in range(V)],
                      chain.Z.reshape(S, N * V))
        _write_matrix(path / "theta.csv", [f"theta{i + 1}" for i in range(N)], chain.theta)
    return path


def _read_matrix(f: Path, rows: int, cols: int) -> np.ndarray:
    if not f.exists():
        raise ChainFormatError(f"{f.name}: missing")
    with open(f) as fh:
        header = fh.readline()
        if not header.endswith("\n"):
            raise ChainFormatError(f"{f.name}: truncated")
        body = fh.read()
    if body and not body.endswith("\n"):
        raise ChainFormatError(f"{f.name}: truncated (incomplete last line)")
    lines = body.splitlines()
    if len(header.rstrip("\n").split(",")) != cols:
        raise DimensionError(f"{f.name}: expected {cols} columns")
    if len(lines) != rows:
        raise ChainFormatError(f"{f.name}: expected {rows} rows, found {len(lines)} (truncated?)")
    try:
        M = np.array([[float(v) for v in ln.split(",")] for ln in lines], float)
    except ValueError as exc:
        raise ChainFormatError(f"{f.name}: unparsable value ({exc})") from None
    M = M.reshape(rows, -1) if rows else np.empty((0, cols))
    if M.shape[1] != cols:
        raise DimensionError(f"{f.name}: expected {cols} columns, found {M.shape[1]}")
    return M


def load_chain(path, expected_nodes: int | None = None) -> PosteriorChain:
    """Read a chain directory written by :func:`save_chain`.

    Raises ``ChainFormatError`` on version mismatch or truncated files and
    ``DimensionError`` when ``expected_nodes`` disagrees with the chain.
    """
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError:
        raise ChainFormatError(f"{path}: meta.json not found") from None
    except json.JSONDecodeError as exc:
        raise ChainFormatError(f"{path}/meta.json: {exc}") from None
    if meta.get("format_version") != CHAIN_FORMAT_VERSION:
        raise ChainFormatError(
            f"chain format version {meta.get('format_version')} is not supported "
            f"(expected {CHAIN_FORMAT_VERSION})")
    d = meta["dims"]
    S, N, V = d["S"], d["N"], d["V"]
    if expected_nodes is not None and expected_nodes != V:
        raise DimensionError(f"chain has V={V} but {expected_nodes} nodes were expected")
    widths = {"lambda_ztheta": V, "lambda_theta": 1, "sigma2": 1, "tau2": 1,
              "beta": d["Qc"], "gamma": d["Qa"]}
    tr = {k: _read_matrix(path / f"{k}.csv", S, w) for k, w in widths.items()}
    for k in ("lambda_theta", "sigma2", "tau2"):
        tr[k] = tr[k][:, 0]
    means = {
        "Z_mean": _read_matrix(path / "Z_mean.csv", N, V),
        "theta_mean": _read_matrix(path / "theta_mean.csv", N, 1)[:, 0],
        "Sigma_mean": _read_matrix(path / "Sigma_mean.csv", V + 1, V + 1),
        "zz_mean": _read_matrix(path / "zz_mean.csv", V, V),
    }
    Z = theta = None
    if meta["latents_retained"]:
        Z = _read_matrix(path / "Z.csv", S, N * V).reshape(S, N, V)
        theta = _read_matrix(path / "theta.csv", S, N)
    return PosteriorChain(
        config=SamplerConfig(**meta["config"]),
        reference_signs=np.array(meta["reference_signs"], dtype=np.int8).reshape(N, V),
        Z=Z, theta=theta, node_labels=tuple(meta["node_labels"]),
        counters=dict(meta["counters"]), **tr, **means)
