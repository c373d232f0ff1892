import json

import numpy as np
import pytest

from latentsna.detect import covariance_intervals
from latentsna.io import (
    ChainFormatError, DatasetFormatError, RunManifest, format_real, load_chain,
    load_dataset, path_digest, read_dataset, save_chain, save_dataset, write_csv,
)
from latentsna.model import ConnectomeDataset, DimensionError
from latentsna.sampler import SamplerConfig, run_chain
from latentsna.simulate import SimulationConfig, generate_cohort


def write(d, name, text):
    (d / name).write_text(text)


@pytest.fixture
def minimal(tmp_path):
    write(tmp_path, "attributes.csv", "subject_id,score\nA,1.5\nB,-0.5\n")
    write(tmp_path, "covariates_conn.csv", "subject_id,intercept\nA,1\nB,1\n")
    write(tmp_path, "covariates_attr.csv", "subject_id,intercept,age\nA,1,10\nB,1,12\n")
    write(tmp_path, "connectivity.csv",
          "subject_id,node_u,node_v,weight\n"
          "A,1,2,0.1\nA,1,3,0.2\nA,2,3,0.3\n"
          "B,1,2,-0.1\nB,1,3,-0.2\nB,2,3,-0.3\n")
    return tmp_path


class TestFormatting:
    def test_reals(self):
        assert format_real(0.1) == "0.10000000000000001"
        assert float(format_real(1 / 3)) == 1 / 3
        assert format_real(np.nan) == "nan" and format_real(-np.inf) == "-inf"
        assert format_real(True) == "true" and format_real(np.int64(3)) == "3"

    def test_csv_line_endings(self, tmp_path):
        write_csv(tmp_path / "t.csv", ["a", "b"], [[1, 2.5]])
        assert (tmp_path / "t.csv").read_bytes() == b"a,b\n1,2.5\n"


class TestLoadDataset:
    def test_minimal(self, minimal):
        d, ids = read_dataset(minimal)
        assert ids == ["A", "B"]
        assert (d.n_subjects, d.n_nodes, d.n_attributes) == (2, 3, 1)
        assert d.edge_matrix.shape == (2, 3)
        np.testing.assert_array_equal(d.edge_matrix[1], [-0.1, -0.2, -0.3])
        np.testing.assert_array_equal(d.attr_covariates[:, 1], [10, 12])
        assert d.attribute_labels == ("score",)

    def test_duplicate_conflicting_row(self, minimal):
        with open(minimal / "connectivity.csv", "a") as fh:
            fh.write("B,2,3,0.9\n")
        with pytest.raises(DatasetFormatError, match=r"subject B, edge \(2, 3\)"):
            load_dataset(minimal)

    def test_reversed_orientation_conflict(self, minimal):
        with open(minimal / "connectivity.csv", "a") as fh:
            fh.write("A,2,1,0.7\n")
        with pytest.raises(DatasetFormatError, match="both orientations"):
            load_dataset(minimal)

    def test_missing_edge(self, minimal):
        text = (minimal / "connectivity.csv").read_text().replace("B,1,3,-0.2\n", "")
        write(minimal, "connectivity.csv", text)
        with pytest.raises(DatasetFormatError, match=r"subject B is missing edge \(1, 3\)"):
            load_dataset(minimal)

    def test_bad_header(self, minimal):
        text = (minimal / "connectivity.csv").read_text().replace("weight", "w")
        write(minimal, "connectivity.csv", text)
        with pytest.raises(DatasetFormatError, match="header"):
            load_dataset(minimal)

    def test_subject_mismatch(self, minimal):
        write(minimal, "covariates_conn.csv", "subject_id,intercept\nA,1\nC,1\n")
        with pytest.raises(DatasetFormatError, match="subject mismatch"):
            load_dataset(minimal)
        write(minimal, "covariates_conn.csv", "subject_id,intercept\nA,1\nB,1\n")
        with open(minimal / "connectivity.csv", "a") as fh:
            fh.write("Z,1,2,0.0\n")
        with pytest.raises(DatasetFormatError, match="Z not in attributes"):
            load_dataset(minimal)

    def test_partial_missing_attributes(self, minimal):
        write(minimal, "attributes.csv", "subject_id,s1,s2\nA,1,NA\nB,2,3\n")
        with pytest.raises(DatasetFormatError, match="partially"):
            load_dataset(minimal)

    def test_missing_attribute_row(self, minimal):
        write(minimal, "attributes.csv", "subject_id,score\nA,NA\nB,2\n")
        d = load_dataset(minimal)
        np.testing.assert_array_equal(d.attr_observed, [False, True])

    def test_optional_covariates(self, minimal):
        (minimal / "covariates_conn.csv").unlink()
        write(minimal, "covariates_attr.csv", "subject_id,age\nA,10\nB,12\n")
        d = load_dataset(minimal)
        assert d.conn_covariates.shape == (2, 1)
        np.testing.assert_array_equal(d.attr_covariates, [[1, 10], [1, 12]])


class TestDatasetRoundTrip:
    def test_values(self, tmp_path):
        c = generate_cohort(SimulationConfig(N=6, V=4, P=2, seed=1))
        save_dataset(c.dataset, tmp_path)
        d = load_dataset(tmp_path)
        np.testing.assert_array_equal(d.connectivity, c.dataset.connectivity)
        np.testing.assert_array_equal(d.attributes, c.dataset.attributes)
        assert d.node_labels == c.dataset.node_labels

    def test_missing_blocks(self, tmp_path, rng):
        d0 = ConnectomeDataset(rng.normal(size=(3, 3, 3)), rng.normal(size=(3, 2)),
                               attr_observed=[True, False, True])
        save_dataset(d0, tmp_path)
        d = load_dataset(tmp_path)
        np.testing.assert_array_equal(d.attr_observed, d0.attr_observed)
        np.testing.assert_array_equal(d.attributes, d0.attributes)
        d1 = ConnectomeDataset(np.zeros((3, 3, 3)), rng.normal(size=(3, 2)),
                               conn_observed=[False] * 3)
        save_dataset(d1, tmp_path)
        assert not (tmp_path / "connectivity.csv").exists()
        d, _ = read_dataset(tmp_path, require_connectivity=False)
        assert not d.conn_observed.any() and d.n_nodes == 3


@pytest.fixture(scope="module")
def small_chain():
    c = generate_cohort(SimulationConfig(N=12, V=4, seed=3))
    return run_chain(c.dataset, SamplerConfig(n_iterations=20, burn_in=10, seed=2,
                                              keep_latents=True))


class TestChainIO:
    def test_bit_exact(self, tmp_path, small_chain):
        save_chain(small_chain, tmp_path)
        ch = load_chain(tmp_path)
        for name in ("lambda_ztheta", "lambda_theta", "sigma2", "tau2", "beta", "gamma",
                     "Z_mean", "theta_mean", "Sigma_mean", "zz_mean", "Z", "theta",
                     "reference_signs"):
            np.testing.assert_array_equal(getattr(ch, name), getattr(small_chain, name))
        assert ch.config == small_chain.config and ch.counters == small_chain.counters

    def test_detection_report_reproduced(self, tmp_path, small_chain):
        save_chain(small_chain, tmp_path)
        a = covariance_intervals(small_chain)
        b = covariance_intervals(load_chain(tmp_path))
        assert list(a.rows()) == list(b.rows())

    def test_wrong_dims(self, tmp_path, small_chain):
        save_chain(small_chain, tmp_path)
        with pytest.raises(DimensionError):
            load_chain(tmp_path, expected_nodes=5)

    def test_version_mismatch(self, tmp_path, small_chain):
        save_chain(small_chain, tmp_path)
        meta = json.loads((tmp_path / "meta.json").read_text())
        meta["format_version"] = 99
        (tmp_path / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(ChainFormatError, match="version"):
            load_chain(tmp_path)

    def test_truncated(self, tmp_path, small_chain):
        save_chain(small_chain, tmp_path)
        f = tmp_path / "sigma2.csv"
        f.write_bytes(f.read_bytes()[:-5])
        with pytest.raises(ChainFormatError, match="truncated"):
            load_chain(tmp_path)


class TestManifest:
    def test_round_trip_and_verify(self, tmp_path, minimal):
        m = RunManifest("fit", {"a": 1}, 7)
        m.add_input("data", minimal)
        out = tmp_path / "out"
        out.mkdir()
        m.write(out)
        r = RunManifest.read(out)
        assert r.inputs == m.inputs and r.seed == 7 and r.verify_inputs() == []
        with open(minimal / "attributes.csv", "a") as fh:
            fh.write("C,1\n")
        assert r.verify_inputs() == ["data"]

    def test_directory_digest_ignores_manifest(self, tmp_path):
        (tmp_path / "x.csv").write_text("1\n")
        d0 = path_digest(tmp_path)
        (tmp_path / "manifest.json").write_text("{}")
        assert path_digest(tmp_path) == d0
