"""End-to-end command tests: every subcommand through main(), no subprocesses."""

import json
import os

import numpy as np
import pytest

from crossfit import synthdata as sd
from crossfit.cli import _DEFAULTS, main


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("ds") / "eyes")
    assert run_cli("gen-data", "--out", path, "--n", "24", "--seed", "5") == 0
    return path


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    """Micro model + two epochs: seconds, not minutes."""
    cfg = {
        "encoder.stage_channels": [24],
        "encoder.stride": 16,
        "encoder.kernel": 15,
        "cfa.layers": 2,
        "cfa.heads": 2,
        "cfa.d_t": 16,
        "cfa.mlp_ratio": 2,
        "train.epochs": 2,
        "train.batch_size": 8,
    }
    path = str(tmp_path_factory.mktemp("cfg") / "tiny.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh)
    return path


@pytest.fixture(scope="module")
def trained_ckpt(tmp_path_factory, data_dir, tiny_config):
    out = str(tmp_path_factory.mktemp("ck") / "model.bin")
    code = run_cli("train", "--data", data_dir, "--config", tiny_config,
                   "--out", out, "--seed", "1")
    assert code == 0
    return out


class TestGenData:
    def test_summary_counts(self, data_dir, capsys):
        assert run_cli("gen-data", "--out", data_dir, "--n", "24",
                       "--seed", "5", "--force") == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["total"] == 24
        assert sum(summary["per_grade"]) == 24
        assert 0 <= summary["split_evidence"] <= 24

    def test_n_zero_is_usage_error(self, tmp_path):
        assert run_cli("gen-data", "--out", str(tmp_path / "x"), "--n", "0") == 2

    def test_refuses_nonempty_dir(self, data_dir):
        assert run_cli("gen-data", "--out", data_dir, "--n", "4") == 2

    def test_force_replaces(self, data_dir):
        assert run_cli("gen-data", "--out", data_dir, "--n", "24",
                       "--seed", "5", "--force") == 0

    def test_rerun_is_byte_identical(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        run_cli("gen-data", "--out", a, "--n", "6", "--seed", "9")
        run_cli("gen-data", "--out", b, "--n", "6", "--seed", "9")
        for name in sorted(os.listdir(os.path.join(a, "images"))):
            pa = os.path.join(a, "images", name)
            pb = os.path.join(b, "images", name)
            with open(pa, "rb") as fa, open(pb, "rb") as fb:
                assert fa.read() == fb.read(), name


class TestTrain:
    def test_writes_checkpoint_and_log(self, trained_ckpt):
        assert os.path.exists(trained_ckpt)
        with open(trained_ckpt + ".log.json", encoding="utf-8") as fh:
            log = json.load(fh)
        assert len(log["epochs"]) == 2
        assert all(np.isfinite(e["loss"]) for e in log["epochs"])

    def test_epoch_lines_are_json(self, data_dir, tiny_config, tmp_path, capsys):
        out = str(tmp_path / "m.bin")
        assert run_cli("train", "--data", data_dir, "--config", tiny_config,
                       "--out", out, "--seed", "2") == 0
        lines = capsys.readouterr().out.strip().splitlines()
        epochs = [json.loads(l) for l in lines if '"epoch"' in l]
        assert [e["epoch"] for e in epochs] == [0, 1]

    def test_threshold_out_of_range(self, data_dir, tiny_config, tmp_path):
        assert run_cli("train", "--data", data_dir, "--config", tiny_config,
                       "--out", str(tmp_path / "m.bin"), "--threshold", "1.5") == 2

    def test_inconsistent_width_heads(self, data_dir, tmp_path):
        cfg_path = str(tmp_path / "bad.json")
        with open(cfg_path, "w", encoding="utf-8") as fh:
            json.dump({"cfa.d_t": 20, "cfa.heads": 3}, fh)
        assert run_cli("train", "--data", data_dir, "--config", cfg_path,
                       "--out", str(tmp_path / "m.bin")) == 2

    def test_unknown_config_key(self, data_dir, tmp_path):
        cfg_path = str(tmp_path / "bad.json")
        with open(cfg_path, "w", encoding="utf-8") as fh:
            json.dump({"cfa.layer_count": 3}, fh)
        assert run_cli("train", "--data", data_dir, "--config", cfg_path,
                       "--out", str(tmp_path / "m.bin")) == 2

    def test_flag_overrides_config_file(self, data_dir, tmp_path, capsys):
        cfg_path = str(tmp_path / "c.json")
        with open(cfg_path, "w", encoding="utf-8") as fh:
            json.dump({"train.epochs": 5, "encoder.stage_channels": [8],
                       "encoder.stride": 16, "encoder.kernel": 15,
                       "cfa.layers": 1, "cfa.heads": 2, "cfa.d_t": 8,
                       "cfa.mlp_ratio": 1}, fh)
        out = str(tmp_path / "m.bin")
        assert run_cli("train", "--data", data_dir, "--config", cfg_path,
                       "--out", out, "--epochs", "1") == 0
        with open(out + ".log.json", encoding="utf-8") as fh:
            assert len(json.load(fh)["epochs"]) == 1

    def test_identical_seeds_identical_loss_curves(self, data_dir, tiny_config, tmp_path):
        logs = []
        for tag in ("p", "q"):
            out = str(tmp_path / f"{tag}.bin")
            run_cli("train", "--data", data_dir, "--config", tiny_config,
                    "--out", out, "--seed", "7")
            with open(out + ".log.json", encoding="utf-8") as fh:
                logs.append([e["loss"] for e in json.load(fh)["epochs"]])
        assert logs[0] == logs[1]


class TestEval:
    def test_report_fields(self, trained_ckpt, data_dir, tmp_path):
        report = str(tmp_path / "r.json")
        assert run_cli("eval", "--data", data_dir, "--ckpt", trained_ckpt,
                       "--report", report) == 0
        with open(report, encoding="utf-8") as fh:
            rep = json.load(fh)
        for key in ("kappa", "accuracy", "macro_auc", "per_class_auc",
                    "confusion", "n_samples"):
            assert key in rep
        assert rep["n_samples"] == 24

    def test_confusion_consistent_with_accuracy(self, trained_ckpt, data_dir, tmp_path):
        report = str(tmp_path / "r.json")
        run_cli("eval", "--data", data_dir, "--ckpt", trained_ckpt,
                "--report", report)
        with open(report, encoding="utf-8") as fh:
            rep = json.load(fh)
        conf = np.array(rep["confusion"])
        assert conf.sum() == rep["n_samples"]
        agree = np.trace(conf) / conf.sum()
        assert abs(agree - rep["accuracy"]) < 5e-6

    def test_missing_checkpoint_exits_2(self, data_dir, tmp_path):
        assert run_cli("eval", "--data", data_dir, "--ckpt",
                       str(tmp_path / "absent.bin"),
                       "--report", str(tmp_path / "r.json")) == 2

    def test_subset_split(self, trained_ckpt, data_dir, tmp_path):
        rep_tr = str(tmp_path / "tr.json")
        rep_te = str(tmp_path / "te.json")
        run_cli("eval", "--data", data_dir, "--ckpt", trained_ckpt,
                "--report", rep_tr, "--subset", "train")
        run_cli("eval", "--data", data_dir, "--ckpt", trained_ckpt,
                "--report", rep_te, "--subset", "test")
        with open(rep_tr, encoding="utf-8") as fh:
            n_tr = json.load(fh)["n_samples"]
        with open(rep_te, encoding="utf-8") as fh:
            n_te = json.load(fh)["n_samples"]
        assert n_tr == 19 and n_te == 5


class TestCompare:
    def test_table_rows_and_report(self, data_dir, tiny_config, tmp_path, capsys):
        report = str(tmp_path / "cmp.json")
        code = run_cli("compare", "--data", data_dir, "--config", tiny_config,
                       "--strategies", "feat_max,single_field_1",
                       "--seeds", "1,2", "--report", report)
        assert code == 0
        with open(report, encoding="utf-8") as fh:
            table = json.load(fh)
        assert [r["strategy"] for r in table["rows"]] == ["feat_max", "single_field_1"]
        assert len(table["cells"]) == 4
        text = capsys.readouterr().out
        assert "feat_max" in text and "single_field_1" in text

    def test_unknown_strategy_lists_valid_names(self, data_dir, tmp_path, capsys):
        code = run_cli("compare", "--data", data_dir, "--strategies",
                       "crossfit,bogus", "--seeds", "1",
                       "--report", str(tmp_path / "x.json"))
        assert code == 2
        err = capsys.readouterr().err
        assert "bogus" in err and "feat_max" in err and "crossfit" in err

    def test_bad_seeds(self, data_dir, tmp_path):
        assert run_cli("compare", "--data", data_dir, "--strategies", "feat_max",
                       "--seeds", "one,two",
                       "--report", str(tmp_path / "x.json")) == 2


class TestSweep:
    def test_default_grid_covers_table(self, data_dir, tiny_config, tmp_path):
        report = str(tmp_path / "sweep.json")
        code = run_cli("sweep", "--data", data_dir, "--config", tiny_config,
                       "--seeds", "1", "--report", report)
        assert code == 0
        with open(report, encoding="utf-8") as fh:
            table = json.load(fh)
        assert [r["threshold"] for r in table["rows"]] == [0.02, 0.04, 0.06, 0.08, 0.10]
        for row in table["rows"]:
            assert np.isfinite(row["kappa"])

    def test_bad_threshold_grid(self, data_dir, tmp_path):
        assert run_cli("sweep", "--data", data_dir, "--thresholds", "0.2,1.4",
                       "--report", str(tmp_path / "x.json")) == 2


class TestInspect:
    def test_dumps_all_payloads(self, trained_ckpt, data_dir, tmp_path):
        out = str(tmp_path / "probe")
        assert run_cli("inspect", "--ckpt", trained_ckpt, "--data", data_dir,
                       "--eye", "3", "--out", out) == 0
        names = sorted(os.listdir(out))
        attn = [n for n in names if n.startswith("attn_layer")]
        assert len(attn) == 2  # tiny config trains a 2-layer stack
        assert "mask_field1.json" in names and "mask_field2.json" in names
        assert "grids.json" in names
        assert "heatmap_f1_to_f2.ppm" in names

    def test_heatmap_is_readable_ppm(self, trained_ckpt, data_dir, tmp_path):
        out = str(tmp_path / "probe2")
        run_cli("inspect", "--ckpt", trained_ckpt, "--data", data_dir,
                "--eye", "0", "--out", out)
        img = sd.read_ppm(os.path.join(out, "heatmap_f1_to_f2.ppm"))
        assert img.shape == (64, 64, 3)

    def test_grid_offset_matches_annotations(self, trained_ckpt, data_dir, tmp_path):
        out = str(tmp_path / "probe3")
        run_cli("inspect", "--ckpt", trained_ckpt, "--data", data_dir,
                "--eye", "1", "--out", out)
        with open(os.path.join(out, "grids.json"), encoding="utf-8") as fh:
            grids = json.load(fh)
        data = sd.load_dataset(data_dir)
        i = int(np.flatnonzero(data.eye_ids == 1)[0])
        dx = 2.0 * (data.od2[i, 0] - data.od1[i, 0])
        assert abs(grids["offset"][0] - dx) < 1e-5
        f1 = np.array(grids["field1"])
        f2 = np.array(grids["field2"])
        assert f1.shape == f2.shape and f1.shape[-1] == 2

    def test_absent_eye_is_lookup_error(self, trained_ckpt, data_dir, tmp_path):
        assert run_cli("inspect", "--ckpt", trained_ckpt, "--data", data_dir,
                       "--eye", "9999", "--out", str(tmp_path / "x")) == 2


class TestVerify:
    def test_clean_pass(self, capsys):
        assert run_cli("verify") == 0
        out = capsys.readouterr().out
        for group in ("gradchecks", "mask_exactness", "geometry", "metric_oracles"):
            assert f"{group:<16} PASS" in out

    @pytest.mark.parametrize("group", ["gradchecks", "mask_exactness",
                                       "geometry", "metric_oracles"])
    def test_fault_injection_fails_matching_group(self, group, monkeypatch, capsys):
        monkeypatch.setenv("CROSSFIT_VERIFY_FAULT", group)
        assert run_cli("verify") == 1
        out = capsys.readouterr().out
        assert f"{group:<16} FAIL" in out
        others = [g for g, _ in
                  [("gradchecks", 0), ("mask_exactness", 0),
                   ("geometry", 0), ("metric_oracles", 0)] if g != group]
        for other in others:
            assert f"{other:<16} PASS" in out


class TestConfigDefaults:
    def test_defaults_are_consistent(self):
        from crossfit.cli import _build_configs
        model_cfg, train_cfg, frac = _build_configs(dict(_DEFAULTS))
        assert model_cfg.cfa.d_t % model_cfg.cfa.heads == 0
        assert model_cfg.cfa.d_t % 4 == 0
        assert 0 < frac < 1
        assert train_cfg.lr > 0
