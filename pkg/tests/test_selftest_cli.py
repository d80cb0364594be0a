"""Self-verification suites and the command-line interface."""

import json
import os

import numpy as np
import pytest

from lka3d import cli, network, selftest
from lka3d.cli import CLIError, resolve_config
from lka3d.pipeline import read_rvf


class TestSelftest:
    def test_registry(self):
        assert sorted(selftest.SUITES) == [
            "gradient_checks", "kernel_composition",
            "metrics_bruteforce", "sliding_window"]
        assert issubclass(selftest.SelfTestFailure, AssertionError)

    def test_clean_run_passes(self):
        lines = []
        assert selftest.run_selftest(corrupt="", printer=lines.append) is True
        assert len(lines) == len(selftest.SUITES)
        for line in lines:
            assert ": PASS (" in line

    @pytest.mark.parametrize("suite", sorted(selftest.SUITES))
    def test_corruption_flips_exactly_its_suite(self, suite):
        lines = []
        ok = selftest.run_selftest(corrupt=suite, printer=lines.append)
        assert ok is False
        status = {ln.split(":")[0]: ("FAIL" if ": FAIL" in ln else "PASS")
                  for ln in lines}
        assert status[suite] == "FAIL"
        for other in selftest.SUITES:
            if other != suite:
                assert status[other] == "PASS"

    def test_unknown_suite_rejected(self):
        with pytest.raises(ValueError):
            selftest.run_selftest(corrupt="nonsense")

    def test_env_variable_drives_corruption(self, monkeypatch):
        monkeypatch.setenv(selftest.CORRUPT_ENV, "kernel_composition")
        lines = []
        assert selftest.run_selftest(printer=lines.append) is False
        assert any(ln.startswith("kernel_composition: FAIL") for ln in lines)


class TestResolveConfig:
    KEYS = {"alpha": (int, 1, ""), "beta": (str, "x", ""), "gamma": (float, None, "")}

    def test_defaults(self):
        cfg = resolve_config(self.KEYS, None, {})
        assert cfg == {"alpha": 1, "beta": "x", "gamma": None}

    def test_file_overrides_defaults_flags_override_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"alpha": 5, "beta": "file"}))
        cfg = resolve_config(self.KEYS, str(path), {"beta": "flag", "gamma": None})
        assert cfg["alpha"] == 5       # from file
        assert cfg["beta"] == "flag"   # flag wins
        assert cfg["gamma"] is None    # None flags do not override

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"bogus": 1}))
        with pytest.raises(CLIError):
            resolve_config(self.KEYS, str(path), {})

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"alpha": "not-an-int"}))
        with pytest.raises(CLIError):
            resolve_config(self.KEYS, str(path), {})

    def test_non_object_config_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("[1, 2]")
        with pytest.raises(CLIError):
            resolve_config(self.KEYS, str(path), {})

    def test_missing_file_rejected(self):
        with pytest.raises(CLIError):
            resolve_config(self.KEYS, "/no/such/file.json", {})


class TestHelpers:
    def test_case_id_suffix_stripping(self):
        assert cli._case_id("case_0004_img.rvf") == "case_0004"
        assert cli._case_id("/a/b/case_0004_lbl.rvf") == "case_0004"
        assert cli._case_id("scan.nii.gz") == "scan"
        assert cli._case_id("scan.nii") == "scan"
        assert cli._case_id("vol.rvf") == "vol"

    def test_threads_resolution(self, monkeypatch):
        monkeypatch.delenv("LKA3D_THREADS", raising=False)
        assert cli._threads({"threads": 2}) == 2
        assert cli._threads({"threads": None}) >= 1
        monkeypatch.setenv("LKA3D_THREADS", "3")
        assert cli._threads({"threads": None}) == 3
        assert cli._threads({"threads": 5}) == 5  # explicit beats env
        monkeypatch.setenv("LKA3D_THREADS", "junk")
        with pytest.raises(CLIError):
            cli._threads({"threads": None})


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> train once; the slower commands reuse these artifacts."""
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data"
    run = root / "run"
    rc = cli.main(["synth", "--out-dir", str(data), "--count", "6",
                   "--shape", "24,24,24", "--seed", "5"])
    assert rc == 0
    rc = cli.main(["train", "--data", str(data), "--out-dir", str(run),
                   "--variant", "plain_unet", "--stage-channels", "4,8",
                   "--stage-repeats", "1,1", "--crop-size", "16,16,16",
                   "--batch-size", "2", "--epochs", "1", "--max-steps", "3"])
    assert rc == 0
    return {"root": root, "data": data, "run": run,
            "ckpt": run / "ckpt_final.lka3d"}


class TestCLICommands:
    def test_synth_outputs(self, workspace):
        data = workspace["data"]
        files = sorted(os.listdir(data))
        assert "manifest.json" in files
        assert "synth_config.json" in files
        assert sum(f.endswith("_img.rvf") for f in files) == 6
        assert sum(f.endswith("_lbl.rvf") for f in files) == 6
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["count"] == 6
        assert manifest["cases"][0] == "case_0000"
        assert manifest["spec"]["shape"] == [24, 24, 24]
        img = read_rvf(data / "case_0000_img.rvf")
        assert img.data.shape == (1, 24, 24, 24)

    def test_train_outputs(self, workspace):
        run = workspace["run"]
        assert (run / "ckpt_final.lka3d").exists()
        assert (run / "loss_curve.csv").exists()
        resolved = json.loads((run / "train_config.json").read_text())
        assert resolved["variant"] == "plain_unet"
        assert resolved["in_channels"] == 2  # derived from the data
        assert resolved["lr"] == 2e-4        # plain_unet default
        lines = (run / "loss_curve.csv").read_text().strip().splitlines()
        assert lines[0] == "step,epoch,loss,grad_norm"
        assert len(lines) == 4  # header + 3 steps

    def test_infer_and_metrics_roundtrip(self, workspace, capsys):
        pred = workspace["root"] / "pred"
        rc = cli.main(["infer", "--checkpoint", str(workspace["ckpt"]),
                       "--input", str(workspace["data"]),
                       "--out-dir", str(pred),
                       "--window-size", "16,16,16", "--save-logits", "true"])
        assert rc == 0
        files = sorted(os.listdir(pred))
        assert sum(f.endswith("_lbl.rvf") for f in files) == 6
        assert sum(f.endswith("_logits.rvf") for f in files) == 6
        lbl = read_rvf(pred / "case_0000_lbl.rvf")
        assert lbl.data.dtype == np.uint8
        assert lbl.data.shape == (1, 24, 24, 24)

        mdir = workspace["root"] / "scored"
        rc = cli.main(["metrics", "--pred", str(pred),
                       "--gt", str(workspace["data"]),
                       "--out-dir", str(mdir), "--threads", "1"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "mean dice_c1:" in out
        csv_lines = (mdir / "metrics.csv").read_text().strip().splitlines()
        assert len(csv_lines) == 7  # header + 6 cases
        agg = json.loads((mdir / "metrics.json").read_text())
        assert agg["num_cases"] == 6

    def test_infer_window_divisibility_checked(self, workspace):
        rc = cli.main(["infer", "--checkpoint", str(workspace["ckpt"]),
                       "--input", str(workspace["data"]),
                       "--out-dir", str(workspace["root"] / "bad"),
                       "--window-size", "15,15,15"])
        assert rc == 2

    def test_blurprobe_single_file(self, workspace, capsys):
        out = workspace["root"] / "probe"
        single = workspace["data"] / "case_0000_img.rvf"
        rc = cli.main(["blurprobe", "--checkpoint", str(workspace["ckpt"]),
                       "--input", str(single), "--out-dir", str(out),
                       "--window-size", "16,16,16", "--sigmas", "0,1"])
        assert rc == 0
        lines = (out / "blurprobe.csv").read_text().strip().splitlines()
        assert lines[0] == "case,sigma,dice,hd95"
        assert len(lines) == 3  # 1 case x 2 sigmas
        assert lines[1].startswith("case_0000,0.0,1.000000,0.000000")
        assert "sigma 0.0: median dice 1.0000" in capsys.readouterr().out

    def test_resume_training(self, workspace, capsys):
        run2 = workspace["root"] / "run2"
        rc = cli.main(["train", "--data", str(workspace["data"]),
                       "--out-dir", str(run2),
                       "--resume", str(workspace["ckpt"]),
                       "--crop-size", "16,16,16", "--batch-size", "2",
                       "--epochs", "2", "--max-steps", "5"])
        assert rc == 0
        assert "trained 2 steps" in capsys.readouterr().out
        lines = (run2 / "loss_curve.csv").read_text().strip().splitlines()
        # resumed numbering continues after the first run's 3 steps
        assert lines[1].split(",")[0] == "3"

    def test_resume_without_optimizer_state_rejected(self, workspace, tmp_path):
        model, _, _ = network.load_checkpoint(workspace["ckpt"])
        bare = tmp_path / "bare.lka3d"
        network.save_checkpoint(model, bare)
        rc = cli.main(["train", "--data", str(workspace["data"]),
                       "--out-dir", str(tmp_path / "out"),
                       "--resume", str(bare), "--epochs", "1",
                       "--max-steps", "1", "--crop-size", "16,16,16"])
        assert rc == 2

    def test_count_command(self, tmp_path, capsys):
        out = tmp_path / "count"
        rc = cli.main(["count", "--variant", "lka_e",
                       "--stage-channels", "4,8", "--stage-repeats", "1,1",
                       "--input-shape", "16,16,16", "--out-dir", str(out)])
        assert rc == 0
        text = capsys.readouterr().out
        assert "params:" in text and "GFLOPs" in text
        report = json.loads((out / "count_report.json").read_text())
        assert report["variant"] == "lka_e"
        assert report["params"] > 0
        assert report["convention"] == network.FLOP_CONVENTION

    def test_erf_command(self, tmp_path, capsys):
        out = tmp_path / "erf"
        rc = cli.main(["erf", "--out-dir", str(out),
                       "--stage-channels", "4,8", "--stage-repeats", "1,1",
                       "--input-shape", "17,17,17", "--num-inputs", "1",
                       "--stages", "1"])
        assert rc == 0
        assert "stage 1: erf_radius" in capsys.readouterr().out
        assert (out / "erf_stage1.rvf").exists()
        lines = (out / "erf_radius.csv").read_text().strip().splitlines()
        assert lines[0] == "stage,radius_vox"
        assert len(lines) == 2
        emap = read_rvf(out / "erf_stage1.rvf")
        assert emap.data.shape == (1, 17, 17, 17)
        assert emap.data.max() == pytest.approx(1.0)

    def test_erf_stage_out_of_range(self, tmp_path):
        rc = cli.main(["erf", "--out-dir", str(tmp_path / "x"),
                       "--stage-channels", "4,8", "--stage-repeats", "1,1",
                       "--stages", "9"])
        assert rc == 2


class TestCLIErrors:
    def test_missing_required_flag(self, capsys):
        assert cli.main(["train"]) == 2
        assert "--data is required" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"bogus": 1}))
        rc = cli.main(["count", "--config", str(cfg)])
        assert rc == 2
        assert "unknown config key" in capsys.readouterr().err

    def test_nonexistent_checkpoint(self, tmp_path):
        rc = cli.main(["infer", "--checkpoint", str(tmp_path / "no.lka3d"),
                       "--input", str(tmp_path), "--out-dir", str(tmp_path)])
        assert rc == 2

    def test_synth_negative_count(self, tmp_path):
        rc = cli.main(["synth", "--out-dir", str(tmp_path / "d"),
                       "--count", "-1"])
        assert rc == 2

    def test_metrics_missing_gt_dir(self, tmp_path):
        d = tmp_path / "pred"
        d.mkdir()
        rc = cli.main(["metrics", "--pred", str(d),
                       "--gt", str(tmp_path / "nope")])
        assert rc == 2

    def test_selftest_exit_code_3_on_corruption(self, monkeypatch, capsys):
        monkeypatch.setenv(selftest.CORRUPT_ENV, "metrics_bruteforce")
        assert cli.main(["selftest"]) == 3
        assert "metrics_bruteforce: FAIL" in capsys.readouterr().out

    def test_flag_precedence_over_config_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"count": 3, "shape": [16, 16, 16]}))
        out = tmp_path / "synthcfg"
        rc = cli.main(["synth", "--config", str(cfg),
                       "--out-dir", str(out), "--count", "2"])
        assert rc == 0
        resolved = json.loads((out / "synth_config.json").read_text())
        assert resolved["count"] == 2            # flag beat the file
        assert resolved["shape"] == [16, 16, 16]  # file beat the default
        files = os.listdir(out)
        assert sum(f.endswith("_img.rvf") for f in files) == 2
