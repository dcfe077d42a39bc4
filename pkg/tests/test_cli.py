import json

import pytest

from splitfed.cli import main


@pytest.fixture
def config_file(tmp_path):
    def write(**over):
        raw = {
            "variant": "sflv1",
            "dataset": {"num_classes": 3, "dim": 6, "per_class": 20,
                        "test_per_class": 10, "class_sep": 2.0},
            "model": {"hidden": [8, 8, 8]},
            "clients": 3,
            "cut": 1,
            "rounds": 2,
            "epochs": 1,
            "batch_size": 10,
            "optimizer": {"kind": "sgd", "lr": 0.05},
            "seed": 1,
        }
        raw.update(over)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(raw))
        return str(path)
    return write


class TestRun:
    def test_run_writes_outputs(self, config_file, tmp_path, capsys):
        code = main(["run", "--config", config_file(), "--out",
                     str(tmp_path / "out")])
        assert code == 0
        assert (tmp_path / "out" / "metrics.csv").exists()
        assert (tmp_path / "out" / "checkpoint.ckpt").exists()
        printed = capsys.readouterr().out
        assert '"variant": "sflv1"' in printed  # effective config echoed

    def test_seed_flag_overrides(self, config_file, tmp_path):
        code = main(["run", "--config", config_file(), "--seed", "9",
                     "--out", str(tmp_path / "out")])
        assert code == 0
        echoed = json.loads((tmp_path / "out" / "config.json").read_text())
        assert echoed["seed"] == 9

    def test_config_error_exit_code(self, config_file):
        assert main(["run", "--config", config_file(clients=0)]) == 2

    def test_missing_file_exit_code(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2

    def test_data_error_exit_code(self, config_file):
        # 60 samples cannot give 3 clients 64 each under dirichlet defaults
        bad = config_file(partition={"kind": "dirichlet", "mu": 0.1},
                          batch_size=64)
        assert main(["run", "--config", bad]) == 3


class TestOtherCommands:
    def test_sweep(self, config_file, tmp_path, capsys):
        code = main(["sweep", "--config", config_file(), "--cuts", "1,2",
                     "--out", str(tmp_path / "sweep")])
        assert code == 0
        assert (tmp_path / "sweep" / "sweep.csv").exists()
        assert (tmp_path / "sweep" / "cut_1" / "metrics.csv").exists()

    def test_partition_inspect(self, config_file, capsys):
        assert main(["partition", "--config", config_file(), "--inspect"]) == 0
        out = capsys.readouterr().out
        assert "client   0" in out
        assert "alpha=" in out

    def test_gradcheck(self, capsys):
        assert main(["gradcheck"]) == 0
        assert "ok" in capsys.readouterr().out

    def test_diagnose(self, config_file, capsys):
        code = main(["diagnose", "--config",
                     config_file(optimizer={"kind": "sgd", "lr": 0.001})])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert "smoothness" in report
        assert "bound" in report

    def test_oracle_v1(self, config_file, capsys):
        assert main(["oracle-v1", "--config", config_file()]) == 0
        out = capsys.readouterr().out
        assert "worst deviation" in out
