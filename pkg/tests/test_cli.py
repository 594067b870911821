import hashlib
from pathlib import Path

import numpy as np
import pytest

from hazmark.cli import main
from hazmark.errors import IngestionError
from hazmark.io import load_dataset, load_run_config, read_kv, read_samples, write_samples
from hazmark.mcmc import SamplerConfig, run_chain

from helpers import make_dataset

GOOD_COV = "unit_id,slope,pga\nu0,1.0,0.2\nu1,2.0,0.4\nu2,3.5,0.9\nu3,1.5,0.1\nu4,2.2,0.5\n"
GOOD_ADJ = "# comment line\n0 1\n1 2\n2 3\n3 4\n"
GOOD_INV = "unit_id,size\nu0,1.5\nu0,2.5\nu2,4.0\n"


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


@pytest.fixture
def dataset_files(tmp_path):
    return (
        _write(tmp_path, "adjacency.txt", GOOD_ADJ),
        _write(tmp_path, "covariates.csv", GOOD_COV),
        _write(tmp_path, "inventory.csv", GOOD_INV),
    )


class TestLoadDataset:
    def test_wellformed_counts(self, dataset_files):
        adj, cov_path, inv_path = dataset_files
        graph, cov, inv = load_dataset(adj, cov_path, inv_path)
        assert graph.n == 5
        assert graph.n_edges == 4
        assert cov.p == 3
        assert list(inv.counts) == [2, 0, 1, 0, 0]
        assert inv.n_events == 3
        assert graph.labels == ("u0", "u1", "u2", "u3", "u4")

    def test_unknown_unit_id(self, tmp_path, dataset_files):
        adj, cov_path, _ = dataset_files
        bad = _write(tmp_path, "bad_inv.csv", "unit_id,size\nu0,1.0\nuX,2.0\n")
        with pytest.raises(IngestionError, match=r"uX") as err:
            load_dataset(adj, cov_path, bad)
        assert ":3" in str(err.value)

    def test_zero_variance_column(self, tmp_path, dataset_files):
        adj, _, inv_path = dataset_files
        bad = _write(tmp_path, "bad_cov.csv",
                     "unit_id,slope,flat\nu0,1.0,7\nu1,2.0,7\nu2,3.5,7\nu3,1.5,7\nu4,2.2,7\n")
        with pytest.raises(IngestionError, match="zero variance"):
            load_dataset(adj, bad, inv_path)

    def test_malformed_corpus_each_located(self, tmp_path):
        """Every broken file yields a located IngestionError; none crash."""
        cases = [
            ("adjacency", "0 1 2\n", "expected 'i j'"),
            ("adjacency", "0 x\n", "non-integer"),
            ("adjacency", "0 9\n", "outside"),
            ("adjacency", "1 1\n", "self-loop"),
            ("covariates", "unit_id,a\nu0,1.0\nu0,2.0\nu2,3.0\nu3,4.0\nu4,5.0\n", "duplicate"),
            ("covariates", "unit_id,a\nu0,1.0\nu1,zzz\nu2,3.0\nu3,4.0\nu4,5.0\n", "non-numeric"),
            ("covariates", "unit_id,a\nu0,1.0,9\n", "fields"),
            ("covariates", "", "empty"),
            ("inventory", "wrong,header\n", "header"),
            ("inventory", "unit_id,size\nu0,-1.0\n", "finite and > 0"),
            ("inventory", "unit_id,size\nu0,abc\n", "non-numeric size"),
            ("inventory", "unit_id,size\nzz,1.0\n", "unknown unit id"),
        ]
        seen = set()
        for kind, text, needle in cases:
            adj = _write(tmp_path, "a.txt", GOOD_ADJ)
            cov = _write(tmp_path, "c.csv", GOOD_COV)
            inv = _write(tmp_path, "i.csv", GOOD_INV)
            if kind == "adjacency":
                adj.write_text(text)
            elif kind == "covariates":
                cov.write_text(text)
            else:
                inv.write_text(text)
            with pytest.raises(IngestionError) as err:
                load_dataset(adj, cov, inv)
            msg = str(err.value)
            assert needle in msg, (kind, text, msg)
            seen.add(msg)
        assert len(seen) == len(cases)  # errors are distinct

    def test_missing_files(self, tmp_path, dataset_files):
        adj, cov, inv = dataset_files
        with pytest.raises(IngestionError, match="does not exist"):
            load_dataset(tmp_path / "nope.txt", cov, inv)

    def test_offset_column_extracted(self, tmp_path, dataset_files):
        adj, _, inv_path = dataset_files
        cov = _write(tmp_path, "cov_area.csv",
                     "unit_id,slope,area\nu0,1.0,2.0\nu1,2.0,1.0\nu2,3.5,4.0\nu3,1.5,1.0\nu4,2.2,8.0\n")
        graph, covariates, inv = load_dataset(adj, cov, inv_path, offset_column="area")
        assert covariates.names == ("intercept", "slope")
        assert np.allclose(covariates.log_offset, np.log([2.0, 1.0, 4.0, 1.0, 8.0]))


class TestSamplesRoundtrip:
    def test_write_read_identity(self, tmp_path):
        g, cov, inv, state, config = make_dataset(rows=3, cols=4)
        sc = SamplerConfig(n_iter=80, burn_in=40, thin=2, n_chains=2, seed=12)
        samples = run_chain(inv, g, cov, config, sc)
        write_samples(samples, tmp_path / "fit", covariates=cov)
        loaded = read_samples(tmp_path / "fit")
        assert loaded.scalar_names == samples.scalar_names
        assert np.allclose(loaded.scalars, samples.scalars, rtol=0, atol=0)
        assert np.allclose(loaded.fields["w1"], samples.fields["w1"], rtol=0, atol=0)
        assert loaded.config.family == config.family
        assert loaded.config.structure == config.structure
        assert loaded.labels == samples.labels
        assert loaded.sampler.seed == 12

    def test_metadata_records_model(self, tmp_path):
        g, cov, inv, state, _ = make_dataset(rows=3, cols=4, family="split", split_threshold=2.0)
        from hazmark.model import ModelConfig
        config = ModelConfig(family="split", structure="shared_plus")
        sc = SamplerConfig(n_iter=40, burn_in=20, thin=1, n_chains=1, seed=12)
        samples = run_chain(inv, g, cov, config, sc)
        write_samples(samples, tmp_path / "fit", covariates=cov)
        meta = read_kv(tmp_path / "fit" / "metadata.txt")
        assert meta["family"] == "split"
        assert meta["structure"] == "shared_plus"
        assert "split_threshold" in meta  # the threshold actually used
        assert meta["adjacency_weights"] == "binary"


CONFIG_TEMPLATE = """
[run]
spec_version = 1
seed = 404

[paths]
adjacency = data/adjacency.txt
covariates = data/covariates.csv
inventory = data/inventory.csv
output_dir = out

[model]
family = {family}
structure = shared_plus

[sampler]
n_iter = 240
burn_in = 120
thin = 3
n_chains = 2
adapt_window = 20
rhat_gate = 50.0

[hazard]
thresholds = 0.0, 4.0

[simulate]
lattice_rows = 4
lattice_cols = 5
n_covariates = 2
heldout = true

[truth]
beta_count = 1.0, 0.4, -0.3
beta_size = 0.5, 0.2, -0.1
gamma = 0.5
xi = 0.1
kappa = 1.5

[predict]
samples_dir = out/fit_a

[score]
samples_dirs = out/fit_a, out/fit_b
held_out = out/heldout_inventory.csv

[diagnose]
samples_dir = out/fit_a
"""


@pytest.fixture
def config_file(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(CONFIG_TEMPLATE.format(family="egp"))
    return cfg


def _hash_tree(root):
    out = {}
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


class TestCommands:
    def test_pipeline_and_idempotence(self, config_file, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        assert main(["simulate", "--config", str(config_file)]) == 0
        truth = read_kv(tmp_path / "out" / "truth.txt")
        for key in ("beta_count[0]", "beta_size[2]", "gamma", "tau1", "tau2", "xi", "kappa"):
            assert key in truth  # sidecar carries every scalar
        assert main(["fit", "--config", str(config_file), "--out", "out/fit_a"]) == 0
        assert (tmp_path / "out/fit_a/samples_chain0.csv").exists()
        assert (tmp_path / "out/fit_a/samples_chain1.csv").exists()

        gp_cfg = tmp_path / "run_gp.ini"
        gp_cfg.write_text(CONFIG_TEMPLATE.format(family="gp"))
        assert main(["fit", "--config", str(gp_cfg), "--out", "out/fit_b"]) == 0

        assert main(["predict", "--config", str(config_file)]) == 0
        haz0 = (tmp_path / "out" / "hazard_0.0.csv").read_text().splitlines()
        assert len(haz0) == 21  # header + 20 units
        susc = [float(r.split(",")[1]) for r in haz0[1:]]
        haz = [float(r.split(",")[7]) for r in haz0[1:]]
        assert np.allclose(susc, haz, atol=1e-12)  # s = 0: hazard equals susceptibility

        assert main(["score", "--config", str(config_file)]) == 0
        scores = (tmp_path / "out" / "scores.csv").read_text()
        for level in ("0.9", "0.95", "0.99"):
            assert level in scores
        assert main(["diagnose", "--config", str(config_file)]) == 0
        trace = (tmp_path / "out" / "trace.csv").read_text().splitlines()
        assert len(trace) - 1 == 2 * 40  # chains x retained draws

        # byte-level idempotence of every command
        before = _hash_tree(tmp_path / "out")
        assert main(["simulate", "--config", str(config_file)]) == 0
        assert main(["fit", "--config", str(config_file), "--out", "out/fit_a"]) == 0
        assert main(["predict", "--config", str(config_file)]) == 0
        assert main(["score", "--config", str(config_file)]) == 0
        assert main(["diagnose", "--config", str(config_file)]) == 0
        assert _hash_tree(tmp_path / "out") == before

    def test_simulate_seed_changes_data(self, config_file, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert main(["simulate", "--config", str(config_file)]) == 0
        first = (tmp_path / "data" / "inventory.csv").read_bytes()
        assert main(["simulate", "--config", str(config_file), "--seed", "405"]) == 0
        assert (tmp_path / "data" / "inventory.csv").read_bytes() != first
        assert main(["simulate", "--config", str(config_file)]) == 0
        assert (tmp_path / "data" / "inventory.csv").read_bytes() == first

    def test_rhat_gate_exit_code(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = tmp_path / "gate.ini"
        cfg.write_text(CONFIG_TEMPLATE.format(family="egp")
                       .replace("rhat_gate = 50.0", "rhat_gate = 1.0001")
                       .replace("n_iter = 240", "n_iter = 24")
                       .replace("burn_in = 120", "burn_in = 10")
                       .replace("thin = 3", "thin = 1"))
        assert main(["simulate", "--config", str(cfg)]) == 0
        assert main(["fit", "--config", str(cfg), "--out", "out/gate"]) == 3
        assert (tmp_path / "out/gate/samples_chain0.csv").exists()  # outputs still written

    def test_ingestion_exit_code(self, tmp_path):
        assert main(["fit", "--config", str(tmp_path / "absent.ini")]) == 2

    def test_missing_required_key(self, tmp_path):
        cfg = tmp_path / "broken.ini"
        cfg.write_text("[run]\nseed = 1\n")
        with pytest.raises(IngestionError, match="spec_version"):
            load_run_config(cfg)

    def test_unsupported_version(self, tmp_path):
        cfg = tmp_path / "v9.ini"
        cfg.write_text("[run]\nspec_version = 9\n[paths]\nadjacency=a\ncovariates=c\ninventory=i\noutput_dir=o\n")
        with pytest.raises(IngestionError, match="spec_version"):
            load_run_config(cfg)

    def test_env_thread_default(self, tmp_path, monkeypatch, config_file):
        monkeypatch.setenv("HAZMARK_THREADS", "7")
        rc = load_run_config(config_file)
        assert rc.threads == 7
        rc = load_run_config(config_file, threads=2)  # flag overrides env
        assert rc.threads == 2

    def test_score_requires_two_dirs(self, tmp_path, monkeypatch, config_file):
        monkeypatch.chdir(tmp_path)
        cfg = tmp_path / "one.ini"
        cfg.write_text(CONFIG_TEMPLATE.format(family="egp")
                       .replace("samples_dirs = out/fit_a, out/fit_b", "samples_dirs = out/fit_a"))
        assert main(["simulate", "--config", str(cfg)]) == 0
        assert main(["fit", "--config", str(cfg), "--out", "out/fit_a"]) == 0
        assert main(["score", "--config", str(cfg)]) == 2
