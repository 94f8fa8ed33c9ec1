import json

import numpy as np
import pytest

from supconlab import cli
from supconlab import experiments as ex
from supconlab import grads

FAST = ["--dataset", "tiny", "--epochs", "2", "--batch-n", "8"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestVerifyAndGradcheck:
    def test_verify_passes_and_is_stable(self, capsys):
        code, out, _ = run(capsys, "verify", "--gradient-batches", "2")
        assert code == 0
        assert out.count("PASS") == 10 and "FAIL" not in out
        assert run(capsys, "verify", "--gradient-batches", "2")[1] == out

    def test_gradcheck_defaults(self, capsys):
        code, out, _ = run(capsys, "gradcheck")
        assert code == 0 and "PASS" in out

    def test_gradcheck_small_tau(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--tau", "1e-3", "--fd-step", "1e-7")
        assert code == 0, out

    def test_invalid_variant(self, capsys):
        assert run(capsys, "gradcheck", "--variant", "Bogus")[0] == 2

    def test_sign_flip_detected(self, capsys, monkeypatch):
        original = grads.similarity_coefficients

        def flipped(batch, tau, variant):
            G, t = original(batch, tau, variant)
            return -G, t

        monkeypatch.setattr(grads, "similarity_coefficients", flipped)
        code, out, _ = run(capsys, "gradcheck")
        assert code == 1 and "FAIL" in out
        code, out, _ = run(capsys, "verify", "--gradient-batches", "2")
        assert code == 1


class TestTrainCommand:
    def test_byte_identical(self, capsys, tmp_path):
        for name in ("a.json", "b.json"):
            assert run(capsys, "train", *FAST, "--out", str(tmp_path / name))[0] == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_seed_changes_output(self, capsys, tmp_path):
        run(capsys, "train", *FAST, "--seed", "1", "--out", str(tmp_path / "a.json"))
        run(capsys, "train", *FAST, "--seed", "2", "--out", str(tmp_path / "b.json"))
        assert (tmp_path / "a.json").read_bytes() != (tmp_path / "b.json").read_bytes()

    def test_env_seed(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("SUPCON_SEED", "5")
        run(capsys, "train", *FAST, "--out", str(tmp_path / "a.json"))
        assert json.loads((tmp_path / "a.json").read_text())["seed"] == 5
        monkeypatch.setenv("SUPCON_SEED", "five")
        assert run(capsys, "train", *FAST)[0] == 2

    def test_result_round_trip(self, capsys, tmp_path):
        path = tmp_path / "r.json"
        run(capsys, "train", *FAST, "--loss", "SupIn", "--max-positives", "2", "--out", str(path))
        result, cfg = ex.read_result(path)
        assert cfg.loss == "SupIn" and cfg.max_positives == 2 and cfg.dataset == "tiny"
        assert ex.dumps_result(ex.run_train(cfg)) == path.read_text()
        assert len(result["loss_trajectory"]) == 2
        assert result["severity_top1"][0] == result["probe_top1"]

    def test_wall_time_on_stderr(self, capsys):
        code, out, err = run(capsys, "train", *FAST)
        assert code == 0 and "wall_time" in err and "wall_time" not in out
        json.loads(out)

    @pytest.mark.parametrize("loss", ["xent", "two-stage-xent", "SelfSup"])
    def test_other_losses(self, capsys, loss):
        code, out, _ = run(capsys, "train", *FAST, "--loss", loss)
        assert code == 0
        assert 0 <= json.loads(out)["probe_top1"] <= 1

    def test_zero_epochs_near_chance(self, capsys):
        # random encoders keep blob structure, so the probe must be untrained too
        accs = []
        for s in range(8):
            code, out, _ = run(capsys, "train", "--epochs", "0", "--probe-epochs", "0",
                               "--seed", str(s), "--severities", "0")
            accs.append(json.loads(out)["probe_top1"])
        assert abs(np.mean(accs) - 0.25) <= 0.1

    def test_untrained_encoder_probe_near_centroid(self):
        r = ex.run_train(ex.RunConfig(epochs=0, dataset="blobs", severities=(0,)))
        assert r["probe_top1"] >= r["centroid_oracle_top1"] - 0.05

    @pytest.mark.parametrize("argv", [
        ["--tau", "0"], ["--tau", "-1"], ["--loss", "Triplet"], ["--dataset", "nope"],
        ["--epochs", "-1"], ["--max-positives", "0"], ["--severities", "0,7"],
        ["--probe-epochs", "-2"],
    ])
    def test_config_errors(self, capsys, argv):
        code, _, err = run(capsys, "train", *FAST, *argv)
        assert code == 2 and err

    def test_config_error_names_field(self, capsys):
        _, _, err = run(capsys, "train", *FAST, "--dataset", "nope")
        assert "dataset" in err


class TestSweeps:
    def test_positives_table(self, capsys):
        code, out, _ = run(capsys, "sweep-positives", *FAST, "--k-list", "1,3,all")
        assert code == 0
        lines = out.splitlines()
        assert lines[0] == ex.TABLE_VERSION and lines[1] == "k,top1"
        assert [l.split(",")[0] for l in lines[2:]] == ["1", "3", ""]

    def test_k1_matches_self_supervised_structure(self):
        cap = ex.RunConfig(dataset="tiny", epochs=1, batch_n=8, max_positives=1)
        out = ex.sweep_positives(cap, [1])
        assert out[0][0] == 1 and 0 <= out[0][1] <= 1

    def test_temperature_table(self, capsys):
        code, out, _ = run(capsys, "sweep-temperature", *FAST, "--tau-list", "0.05,0.1,0.5,1.0")
        assert code == 0
        assert [l.split(",")[0] for l in out.splitlines()[2:]] == ["0.05", "0.1", "0.5", "1.0"]

    def test_temperature_rejects_nonpositive(self, capsys):
        assert run(capsys, "sweep-temperature", *FAST, "--tau-list", "0.1,0")[0] == 2

    def test_rescale_irrelevant_at_tau_one(self, capsys):
        a = run(capsys, "train", *FAST, "--tau", "1", "--rescale-by-tau")[1]
        b = run(capsys, "train", *FAST, "--tau", "1", "--no-rescale-by-tau")[1]
        strip = lambda s: {k: v for k, v in json.loads(s).items() if k != "config"}
        assert strip(a) == strip(b)

    def test_robustness_table(self, capsys, tmp_path):
        path = tmp_path / "rob.csv"
        code, _, _ = run(capsys, "robustness", *FAST, "--severities", "0,1,3", "--out", str(path))
        assert code == 0
        lines = path.read_text().splitlines()
        assert lines[1] == ",".join(ex.ROBUSTNESS_HEADER)
        assert [l.split(",")[0] for l in lines[2:]] == ["0", "1", "3"]
        # severity 0 is clean accuracy
        clean = ex.run_train(ex.RunConfig(dataset="tiny", epochs=2, batch_n=8))["probe_top1"]
        assert float(lines[2].split(",")[1]) == clean

    def test_robustness_needs_contrastive(self, capsys):
        assert run(capsys, "robustness", *FAST, "--loss", "xent")[0] == 2

    def test_sweep_byte_identical(self, capsys):
        a = run(capsys, "sweep-temperature", *FAST, "--tau-list", "0.1,0.5")[1]
        b = run(capsys, "sweep-temperature", *FAST, "--tau-list", "0.1,0.5")[1]
        assert a == b


class TestFormatTable:
    def test_cells(self):
        text = ex.format_table(("k", "top1"), [(None, 0.5), (2, 1.0)])
        assert text == f"{ex.TABLE_VERSION}\nk,top1\n,0.5\n2,1.0\n"

    def test_read_result_rejects_schema(self, tmp_path):
        (tmp_path / "x.json").write_text('{"schema": "other/9"}')
        with pytest.raises(ValueError):
            ex.read_result(tmp_path / "x.json")

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            ex._check_finite({"a": [1.0, float("nan")]})
