"""Configuration, staged training with resume, inference, evaluation and the CLI."""

import hashlib

import numpy as np
import pytest

from conftest import tiny_config
from lfderain import cli
from lfderain.errors import ContractError, FormatError, NumericError
from lfderain.lightfield import LightField, read_lfi, write_lfi
from lfderain.nn import load_tensors, save_tensors
from lfderain.pipeline import (LOG_COLUMNS, RunConfig, cmd_ablate, cmd_derain, cmd_eval, cmd_synth,
                               cmd_train, component_seed, load_scenes)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = tiny_config()
    cmd_synth(cfg, 2, root / "syn")
    cmd_synth(cfg, 1, root / "real", real=True)
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    ck = tmp_path_factory.mktemp("ck")
    res = cmd_train(tiny_config(), dataset / "syn", ck, dataset / "real")
    assert res.finished
    return ck


class TestConfig:
    def test_round_trip_defaults(self):
        cfg = RunConfig()
        assert RunConfig.from_text(cfg.to_text()) == cfg

    def test_round_trip_modified(self, tmp_path):
        cfg = tiny_config(seed=7)
        cfg.schedule.omega = 0.3
        cfg.ablation.msgp = "mgp"
        cfg.network.shift = True
        cfg.synth.alpha = 0.1 + 0.2
        cfg.save(tmp_path / "run.ini")
        assert RunConfig.load(tmp_path / "run.ini") == cfg

    def test_schedule_defaults(self):
        s = RunConfig().schedule
        assert (s.lr, s.lr_decay, s.decay_every, s.omega) == (2e-4, 0.5, 80, 0.5)

    def test_unknown_key(self):
        with pytest.raises(FormatError, match="colour"):
            RunConfig.from_text("[synth]\ncolour = 3\n")

    def test_unknown_section(self):
        with pytest.raises(FormatError):
            RunConfig.from_text("[extras]\na = 1\n")

    def test_bad_value(self):
        with pytest.raises(FormatError, match="streak_count"):
            RunConfig.from_text("[synth]\nstreak_count = many\n")

    def test_validation(self):
        cfg = RunConfig()
        cfg.ablation.conv_mode = "5d"
        with pytest.raises(ContractError):
            cfg.validate()

    def test_component_seeds(self):
        assert component_seed(0, "scene", 1) == component_seed(0, "scene", 1)
        seeds = {component_seed(0, c, i) for c in ("scene", "streaks", "train") for i in range(3)}
        assert len(seeds) == 9
        assert component_seed(1, "scene") != component_seed(0, "scene")


class TestSynth:
    def test_empty(self, tmp_path):
        assert cmd_synth(tiny_config(), 0, tmp_path / "e") == []
        assert (tmp_path / "e" / "manifest.txt").read_text().splitlines()[:2] == ["kind=synthetic", "count=0"]

    def test_layout(self, dataset):
        dirs = sorted(p for p in (dataset / "syn").iterdir() if p.is_dir())
        assert [d.name for d in dirs] == ["scene_000", "scene_001"]
        for d in dirs:
            assert {"input", "gt", "rain", "depth", "fog"} <= {p.name for p in d.iterdir()}
        assert [p.name for p in (dataset / "real" / "scene_000").iterdir()] == ["input"]

    def test_reproducible(self, tmp_path):
        cmd_synth(tiny_config(), 2, tmp_path / "a")
        cmd_synth(tiny_config(), 2, tmp_path / "b")
        cmd_synth(tiny_config(seed=1), 2, tmp_path / "c")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
        assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


class TestTrain:
    def test_log_has_one_row_per_step(self, trained):
        lines = (trained / "loss_log.csv").read_text().splitlines()
        assert lines[0].split(",") == list(LOG_COLUMNS)
        stages = [l.split(",")[1] for l in lines[1:]]
        assert stages == ["dernet"] * 2 + ["stage1"] * 3 + ["stage2"] * 2 + ["joint"] * 2
        assert [int(l.split(",")[0]) for l in lines[1:]] == list(range(9))

    def test_stage2_skipped_without_real(self, dataset, tmp_path):
        cmd_train(tiny_config(), dataset / "syn", tmp_path)
        stages = [l.split(",")[1] for l in (tmp_path / "loss_log.csv").read_text().splitlines()[1:]]
        assert "stage2" not in stages and stages.count("joint") == 2

    def test_resume_is_bitwise(self, dataset, trained, tmp_path):
        chunks = []
        while True:
            res = cmd_train(tiny_config(), dataset / "syn", tmp_path, dataset / "real", max_steps=2)
            chunks.append(res.steps_run)
            if res.finished:
                break
        assert sum(chunks) == 9 and len(chunks) >= 4
        for name in ("mgpdnet", "dernet", "rnnat", "disc_global", "disc_local", "bank_0", "bank_2"):
            assert (tmp_path / f"{name}.bin").read_bytes() == (trained / f"{name}.bin").read_bytes()
        assert (tmp_path / "loss_log.csv").read_text() == (trained / "loss_log.csv").read_text()

    def test_joint_needs_stage1(self, dataset, tmp_path):
        with pytest.raises(ContractError, match="dernet checkpoint"):
            cmd_train(tiny_config(), dataset / "syn", tmp_path, only="joint")
        cmd_train(tiny_config(), dataset / "syn", tmp_path, only="dernet")
        with pytest.raises(ContractError, match=r"joint training requires a completed stage1 "
                                                r"checkpoint \(mgpdnet.bin\)"):
            cmd_train(tiny_config(), dataset / "syn", tmp_path, only="joint")

    def test_missing_data(self, tmp_path):
        with pytest.raises(ContractError, match="does not exist"):
            cmd_train(tiny_config(), tmp_path / "nowhere", tmp_path / "ck")

    def test_real_scenes_rejected_as_synthetic(self, dataset, tmp_path):
        with pytest.raises(ContractError, match="ground truth"):
            cmd_train(tiny_config(), dataset / "real", tmp_path)

    def test_checkpoint_file_round_trip(self, trained, tmp_path):
        tensors = load_tensors(trained / "rnnat.bin")
        save_tensors(tmp_path / "copy.bin", tensors)
        assert (tmp_path / "copy.bin").read_bytes() == (trained / "rnnat.bin").read_bytes()


class TestDerain:
    def test_outputs_and_determinism(self, dataset, trained, tmp_path):
        scene = dataset / "syn" / "scene_000"
        cmd_derain(tiny_config(), trained, scene, tmp_path / "a")
        cmd_derain(tiny_config(), trained, scene, tmp_path / "b")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
        for sub in ("derained", "rain", "depth", "fog"):
            assert len(list((tmp_path / "a" / sub).glob("view_*.png"))) == 9
        assert "depth_scale=" in (tmp_path / "a" / "manifest.txt").read_text()

    def test_zero_weights_return_input(self, dataset, trained, tmp_path):
        ck = tmp_path / "zero"
        ck.mkdir()
        for name in ("mgpdnet", "dernet", "rnnat"):
            t = load_tensors(trained / f"{name}.bin")
            save_tensors(ck / f"{name}.bin", {k: np.zeros_like(v) for k, v in t.items()})
        scene = dataset / "syn" / "scene_001"
        res = cmd_derain(tiny_config(), ck, scene, tmp_path / "out")
        np.testing.assert_array_equal(res.restored, read_lfi(scene / "input").data)

    def test_width_mismatch_names_tensors(self, dataset, trained, tmp_path):
        cfg = tiny_config()
        cfg.network.detector = 3
        with pytest.raises(ContractError, match="stem.weight"):
            cmd_derain(cfg, trained, dataset / "syn" / "scene_000", tmp_path)


class TestEval:
    def test_identical(self, dataset):
        d = dataset / "syn" / "scene_000" / "gt"
        rows = cmd_eval([(d, d)])
        assert all(r["psnr_db"] == 99.0 and r["ssim"] == pytest.approx(1.0) for r in rows)
        assert rows[-1]["scene"] == "mean" and len(rows) == 10

    def test_known_offset(self, tmp_path):
        base = np.full((1, 2, 3, 12, 12), 51 / 255)
        write_lfi(LightField(base), tmp_path / "ref")
        write_lfi(LightField(base + 51 / 255), tmp_path / "out")
        rows = cmd_eval([(tmp_path / "out", tmp_path / "ref")], tmp_path / "m.csv")
        for r in rows:
            assert r["psnr_db"] == pytest.approx(20 * np.log10(5), abs=1e-9)
        text = (tmp_path / "m.csv").read_text().splitlines()
        assert text[0] == "scene,view_u,view_v,psnr_db,ssim" and len(text) == 4

    def test_misaligned(self, tmp_path):
        write_lfi(LightField(np.zeros((2, 2, 3, 8, 8))), tmp_path / "a")
        write_lfi(LightField(np.zeros((2, 3, 3, 8, 8))), tmp_path / "b")
        with pytest.raises(ContractError, match="view_0_2"):
            cmd_eval([(tmp_path / "a", tmp_path / "b")])

    def test_empty(self):
        with pytest.raises(ContractError):
            cmd_eval([])


class TestAblate:
    def test_conv_rows(self, dataset, tmp_path):
        rows = cmd_ablate(tiny_config(), tmp_path / "w", dataset / "syn")
        assert [(r["ablation"], r["value"]) for r in rows] == [
            ("conv_mode", "2d"), ("conv_mode", "3d"), ("conv_mode", "4d")]
        first = (tmp_path / "w" / "ablation.csv").read_bytes()
        cmd_ablate(tiny_config(), tmp_path / "w2", dataset / "syn")
        assert (tmp_path / "w2" / "ablation.csv").read_bytes() == first


class TestCli:
    def test_gp_check(self, capsys):
        assert cli.main(["gp-check", "--instances", "20"]) == 0
        out = capsys.readouterr().out
        assert "max |mean - oracle|" in out

    def test_synth_and_eval(self, tmp_path, capsys):
        cfg = tmp_path / "run.ini"
        tiny_config().save(cfg)
        assert cli.main(["--config", str(cfg), "--seed", "3", "synth", "--count", "1",
                         "--out", str(tmp_path / "d")]) == 0
        gt = tmp_path / "d" / "scene_000" / "gt"
        assert cli.main(["eval", "--pair", str(gt), str(gt), "--csv", str(tmp_path / "m.csv")]) == 0
        assert "99.0000" in capsys.readouterr().out

    def test_contract_error_exit_code(self, tmp_path, capsys):
        assert cli.main(["eval"]) == 1
        assert "error" in capsys.readouterr().err

    def test_bad_config_exit_code(self, tmp_path):
        (tmp_path / "bad.ini").write_text("[nope]\n")
        assert cli.main(["--config", str(tmp_path / "bad.ini"), "gp-check"]) == 1

    def test_numeric_error_exit_code(self, monkeypatch):
        def broken(*a, **k):
            raise NumericError("non-finite")
        monkeypatch.setattr(cli, "gp_check", broken)
        assert cli.main(["gp-check"]) == 2

    def test_train_and_derain(self, dataset, tmp_path):
        cfg = tmp_path / "run.ini"
        tiny_config().save(cfg)
        ck = tmp_path / "ck"
        assert cli.main(["--config", str(cfg), "train", "--data", str(dataset / "syn"),
                         "--checkpoints", str(ck), "--max-steps", "4"]) == 0
        assert cli.main(["--config", str(cfg), "train", "--data", str(dataset / "syn"),
                         "--checkpoints", str(ck)]) == 0
        assert cli.main(["--config", str(cfg), "derain", "--checkpoints", str(ck),
                         "--scene", str(dataset / "syn" / "scene_000"), "--out", str(tmp_path / "o")]) == 0
        assert len(load_scenes(dataset / "syn")) == 2
        assert (tmp_path / "o" / "derained" / "view_2_2.png").exists()
