import pytest

from fedprism.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

SMOKE_TOML = """
name = "clismoke"
algorithm = "fedprism"
rounds = 1
client_fraction = 0.34
seed = 0

[dataset]
kind = "synthetic"
latent_clusters = 3
classes_per_cluster = 2
input_dim = 8
n_clients = 9
samples_per_client = 36
test_samples_per_client = 12
cluster_noise = 0.5

[train]
epochs = 1
lr = 0.05
batch_size = 12

[prism]
n_clusters = 3
warmup_rounds = 1
recluster_every = 1
"""


@pytest.fixture
def smoke_config(tmp_path):
    path = tmp_path / "smoke.toml"
    path.write_text(SMOKE_TOML)
    return path


def csv_rows(path):
    return path.read_text().strip().split("\n")


class TestRun:
    def test_missing_config_exits_2_with_path(self, capsys, tmp_path):
        missing = tmp_path / "nope.toml"
        assert main(["run", "--config", str(missing)]) == EXIT_CONFIG
        assert str(missing) in capsys.readouterr().err

    def test_smoke_run(self, smoke_config, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["run", "--config", str(smoke_config), "--out", str(out)]) == EXIT_OK
        rows = csv_rows(out / "clismoke_0.csv")
        assert len(rows) == 2  # header + 1 round
        assert (out / "clismoke_0.json").exists()
        stdout = capsys.readouterr().out
        assert "clismoke_0.csv" in stdout
        assert "final: global=" in stdout

    def test_rounds_override(self, smoke_config, tmp_path):
        out = tmp_path / "out"
        code = main(
            ["run", "--config", str(smoke_config), "--out", str(out), "--set", "rounds=3"]
        )
        assert code == EXIT_OK
        assert len(csv_rows(out / "clismoke_0.csv")) == 4

    def test_unknown_key_exits_2(self, smoke_config, tmp_path, capsys):
        code = main(
            ["run", "--config", str(smoke_config), "--out", str(tmp_path), "--set", "bogus=1"]
        )
        assert code == EXIT_CONFIG
        assert "bogus" in capsys.readouterr().err

    def test_invalid_value_exits_2_naming_key(self, smoke_config, tmp_path, capsys):
        code = main(
            ["run", "--config", str(smoke_config), "--out", str(tmp_path), "--set", "rounds=0"]
        )
        assert code == EXIT_CONFIG
        assert "rounds" in capsys.readouterr().err

    def test_seed_list_writes_one_file_pair_per_seed(self, smoke_config, tmp_path):
        out = tmp_path / "out"
        code = main(
            ["run", "--config", str(smoke_config), "--out", str(out), "--seeds", "1,2"]
        )
        assert code == EXIT_OK
        assert (out / "clismoke_1.csv").exists()
        assert (out / "clismoke_2.csv").exists()

    def test_env_var_sets_default_out_dir(self, smoke_config, tmp_path, monkeypatch):
        env_dir = tmp_path / "from_env"
        monkeypatch.setenv("FEDPRISM_OUT", str(env_dir))
        monkeypatch.chdir(tmp_path)
        assert main(["run", "--config", str(smoke_config)]) == EXIT_OK
        assert (env_dir / "clismoke_0.csv").exists()

    def test_runtime_failure_exits_1(self, tmp_path, capsys):
        config = tmp_path / "idx.toml"
        config.write_text(
            """
name = "broken"
algorithm = "fedavg"
rounds = 1

[dataset]
kind = "idx"
train_images = "missing-images"
train_labels = "missing-labels"
test_images = "missing-images"
test_labels = "missing-labels"

[partition]
scheme = "dirichlet"
n_clients = 4
"""
        )
        assert main(["run", "--config", str(config)]) == EXIT_RUNTIME
        assert "error" in capsys.readouterr().err


class TestCompare:
    def test_two_algorithms_two_rows(self, smoke_config, tmp_path):
        doc = smoke_config.read_text() + '\n[compare]\nalgorithms = ["fedavg", "local"]\n'
        config = tmp_path / "cmp.toml"
        config.write_text(doc)
        out = tmp_path / "out"
        assert main(["compare", "--config", str(config), "--out", str(out)]) == EXIT_OK
        rows = csv_rows(out / "clismoke_comparison.csv")
        assert rows[0] == "algorithm,global_mean,global_std,local_mean,local_std"
        assert len(rows) == 3
        assert rows[1].startswith("fedavg,")
        assert rows[2].startswith("local,")

    def test_repeat_run_is_byte_identical(self, smoke_config, tmp_path):
        doc = smoke_config.read_text() + '\n[compare]\nalgorithms = ["fedavg", "local"]\n'
        config = tmp_path / "cmp.toml"
        config.write_text(doc)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["compare", "--config", str(config), "--out", str(out_a)]) == EXIT_OK
        assert main(["compare", "--config", str(config), "--out", str(out_b)]) == EXIT_OK
        assert (out_a / "clismoke_comparison.csv").read_bytes() == (
            out_b / "clismoke_comparison.csv"
        ).read_bytes()

    def test_empty_algorithm_list_exits_2(self, smoke_config, tmp_path, capsys):
        doc = smoke_config.read_text() + "\n[compare]\nalgorithms = []\n"
        config = tmp_path / "cmp.toml"
        config.write_text(doc)
        assert main(["compare", "--config", str(config), "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "algorithms" in capsys.readouterr().err


class TestSweep:
    def test_alpha_sweep_files(self, smoke_config, tmp_path):
        doc = smoke_config.read_text() + "\n[sweep]\nkind = \"alpha\"\nvalues = [0.1, 0.9]\n"
        config = tmp_path / "sweep.toml"
        config.write_text(doc)
        out = tmp_path / "out"
        assert main(["sweep", "--config", str(config), "--out", str(out)]) == EXIT_OK
        assert (out / "clismoke_alpha0.1_0.csv").exists()
        assert (out / "clismoke_alpha0.9_0.csv").exists()
        combined = csv_rows(out / "clismoke_alpha_sweep.csv")
        assert combined[0] == "alpha,final_global,best_global,final_local,best_local"
        assert len(combined) == 3

    def test_inference_weight_sweep_boundary_files(self, smoke_config, tmp_path):
        doc = smoke_config.read_text() + (
            "\n[sweep]\nkind = \"inference_weight\"\nvalues = [0.0, 1.0]\n"
        )
        config = tmp_path / "sweep.toml"
        config.write_text(doc)
        out = tmp_path / "out"
        assert main(["sweep", "--config", str(config), "--out", str(out)]) == EXIT_OK
        assert (out / "clismoke_w0_0.csv").exists()
        assert (out / "clismoke_w1_0.csv").exists()
        assert (out / "clismoke_inference_weight_sweep.csv").exists()

    def test_duplicate_values_deduplicated_with_warning(self, smoke_config, tmp_path, capsys):
        doc = smoke_config.read_text() + "\n[sweep]\nkind = \"alpha\"\nvalues = [0.1, 0.1]\n"
        config = tmp_path / "sweep.toml"
        config.write_text(doc)
        out = tmp_path / "out"
        assert main(["sweep", "--config", str(config), "--out", str(out)]) == EXIT_OK
        assert "duplicate sweep value" in capsys.readouterr().err
        combined = csv_rows(out / "clismoke_alpha_sweep.csv")
        assert len(combined) == 2

    def test_missing_sweep_block_exits_2(self, smoke_config, tmp_path):
        assert main(["sweep", "--config", str(smoke_config), "--out", str(tmp_path)]) == EXIT_CONFIG
