import json

import numpy as np
import pytest

import oracles
from splatguide.cli import EXIT_NUMERIC, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_parser, main
from splatguide.masks import coverage
from splatguide.nn import DenoiserConfig, DenoiserNet, save_checkpoint
from splatguide.splat import multiscale_splat
from splatguide.tensor import FieldMap, load_field, load_mask, load_ppm, save_field, save_ppm


@pytest.fixture
def scene(tmp_path):
    img = oracles.smooth_image(16)
    save_ppm(img, tmp_path / "img.ppm")
    assert main(["-q", "gen-mask", "--height", "16", "--width", "16", "--seed", "4",
                 "--out", str(tmp_path / "mask.splt")]) == EXIT_OK
    return tmp_path


def tiny_checkpoint(path, nan=False):
    net = DenoiserNet(DenoiserConfig(3, widths=(4, 8, 8)))
    if nan:
        b = net.params["out.bias"].copy()
        b[:] = np.nan
        net.set_param("out.bias", b)
    save_checkpoint(path, net, None, {"config": {"T": 5}})


@pytest.mark.parametrize("cmd", ["gen-mask", "splat", "train", "inpaint", "eval", "gradcheck"])
def test_help(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_gen_mask(tmp_path, capsys):
    args = ["gen-mask", "--height", "32", "--width", "32", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a.splt"), "--preview", str(tmp_path / "a.pgm")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b.splt")]) == EXIT_OK
    a = (tmp_path / "a.splt").read_bytes()
    assert a == (tmp_path / "b.splt").read_bytes()
    assert 0.15 <= coverage(load_field(tmp_path / "a.splt").data) <= 0.25
    np.testing.assert_array_equal(load_mask(tmp_path / "a.pgm"), load_mask(tmp_path / "a.splt"))
    assert "coverage" in capsys.readouterr().out


def test_missing_required():
    with pytest.raises(SystemExit) as exc:
        main(["gen-mask", "--height", "8"])
    assert exc.value.code == EXIT_USAGE


def test_splat_matches_library(scene):
    out = scene / "s.splt"
    assert main(["-q", "splat", "--image", str(scene / "img.ppm"), "--mask", str(scene / "mask.splt"),
                 "--out", str(out), "--preview", str(scene / "s.pgm"), "--report", str(scene / "rep")]) == EXIT_OK
    want = multiscale_splat(load_ppm(scene / "img.ppm"), load_mask(scene / "mask.splt"))
    got = load_field(out)
    assert got.data.tobytes() == want.data.tobytes()
    assert got.data.min() >= 0 and got.data.max() <= 1
    assert (scene / "rep" / "guidance.png").stat().st_size > 0
    lines = (scene / "rep" / "splat_scales.csv").read_text().splitlines()
    assert lines[0] == "scale,raw_min,raw_max,raw_mean" and len(lines) == 4


class TestConfigLayers:
    def splat(self, scene, *extra):
        return main(["-q", "splat", "--image", str(scene / "img.ppm"), "--mask", str(scene / "mask.splt"),
                     "--out", str(scene / "s.splt"), *extra])

    def test_unknown_key(self, scene):
        (scene / "c.json").write_text(json.dumps({"splat": {"betta": 0.2}}))
        assert self.splat(scene, "--config", str(scene / "c.json")) == EXIT_USAGE
        (scene / "c.json").write_text(json.dumps({"render": {}}))
        assert self.splat(scene, "--config", str(scene / "c.json")) == EXIT_USAGE
        (scene / "c.json").write_text("{not json")
        assert self.splat(scene, "--config", str(scene / "c.json")) == EXIT_USAGE
        assert self.splat(scene, "--set", "splat.scales=[4,2]") == EXIT_USAGE

    def test_precedence(self, scene, caplog):
        (scene / "c.json").write_text(json.dumps({"splat": {"beta": 0.3, "truncation": 2.0}}))
        with caplog.at_level("INFO"):
            main(["splat", "--image", str(scene / "img.ppm"), "--mask", str(scene / "mask.splt"),
                  "--out", str(scene / "s.splt"), "--config", str(scene / "c.json"),
                  "--set", "splat.truncation=2.5", "--set", "splat.epsilon=0.001", "--beta", "0.05"])
        line = next(r.getMessage() for r in caplog.records if "effective config" in r.getMessage())
        eff = json.loads(line.split("effective config: ", 1)[1])
        assert eff["splat"]["beta"] == 0.05
        assert eff["splat"]["truncation"] == 2.5
        assert eff["splat"]["epsilon"] == 0.001

    def test_set_changes_output(self, scene):
        self.splat(scene)
        a = (scene / "s.splt").read_bytes()
        self.splat(scene, "--set", "splat.beta=0.5")
        assert (scene / "s.splt").read_bytes() != a


def test_missing_input_is_runtime(scene):
    assert main(["-q", "splat", "--image", str(scene / "nope.ppm"), "--mask", str(scene / "mask.splt"),
                 "--out", str(scene / "s.splt")]) == EXIT_RUNTIME


class TestInpaint:
    def test_all_known_returns_input(self, scene):
        tiny_checkpoint(scene / "c.splc")
        save_field(FieldMap(np.zeros((16, 16), np.float32), "mask"), scene / "zero.splt")
        assert main(["-q", "inpaint", "--checkpoint", str(scene / "c.splc"), "--image", str(scene / "img.ppm"),
                     "--mask", str(scene / "zero.splt"), "--out", str(scene / "o.ppm")]) == EXIT_OK
        assert (scene / "o.ppm").read_bytes() == (scene / "img.ppm").read_bytes()

    def test_outputs(self, scene, capsys):
        tiny_checkpoint(scene / "c.splc")
        args = ["-q", "inpaint", "--checkpoint", str(scene / "c.splc"), "--image", str(scene / "img.ppm"),
                "--mask", str(scene / "mask.splt"), "--truth", str(scene / "img.ppm"), "--snapshot-every", "2",
                "--figure", str(scene / "f.png")]
        assert main(args + ["--out", str(scene / "o.ppm")]) == EXIT_OK
        out = capsys.readouterr().out
        assert "masked_psnr=" in out and "ssim=" in out
        assert sorted(p.name for p in (scene / "o_steps").iterdir()) == ["t0001.ppm", "t0002.ppm", "t0004.ppm"]
        assert (scene / "f.png").stat().st_size > 0
        main(args + ["--out", str(scene / "p.ppm")])
        assert (scene / "o.ppm").read_bytes() == (scene / "p.ppm").read_bytes()
        known = load_mask(scene / "mask.splt") == 0
        np.testing.assert_array_equal(load_ppm(scene / "o.ppm")[known], load_ppm(scene / "img.ppm")[known])

    def test_nan_checkpoint(self, scene):
        tiny_checkpoint(scene / "c.splc", nan=True)
        assert main(["-q", "inpaint", "--checkpoint", str(scene / "c.splc"), "--image", str(scene / "img.ppm"),
                     "--mask", str(scene / "mask.splt"), "--out", str(scene / "o.ppm")]) == EXIT_NUMERIC

    def test_channel_mismatch(self, scene):
        tiny_checkpoint(scene / "c.splc")
        save_ppm(oracles.smooth_image(16, 1), scene / "g.pgm")
        assert main(["-q", "inpaint", "--checkpoint", str(scene / "c.splc"), "--image", str(scene / "g.pgm"),
                     "--mask", str(scene / "mask.splt"), "--out", str(scene / "o.ppm")]) == EXIT_USAGE


def test_train_writes_artifacts(tmp_path, capsys):
    data = tmp_path / "data"
    data.mkdir()
    for i in range(2):
        save_ppm(oracles.smooth_image(8) * (0.5 + 0.2 * i), data / f"{i}.ppm")
    out = tmp_path / "run"
    (tmp_path / "c.json").write_text(json.dumps({"train": {"widths": [4, 8, 8]}, "schedule": {"T": 10}}))
    assert main(["-q", "train", "--dataset", str(data), "--epochs", "2", "--batch-size", "1",
                 "--out-dir", str(out), "--config", str(tmp_path / "c.json")]) == EXIT_OK
    assert (out / "checkpoint.splc").exists() and (out / "loss_curve.png").stat().st_size > 0
    assert len((out / "loss_log.csv").read_text().splitlines()) == 5
    assert "trained 4 steps" in capsys.readouterr().out


def test_train_empty_dataset(tmp_path):
    assert main(["-q", "train", "--dataset", str(tmp_path)]) == EXIT_USAGE


def test_eval(tmp_path, capsys, rng):
    for d in ("r", "t"):
        (tmp_path / d).mkdir()
    for i in range(2):
        img = rng.uniform(size=(12, 12, 3))
        save_ppm(img, tmp_path / "r" / f"{i}.ppm")
        save_ppm(img, tmp_path / "t" / f"{i}.ppm")
    assert main(["-q", "eval", "--results", str(tmp_path / "r"), "--truth", str(tmp_path / "t"),
                 "--out", str(tmp_path / "m.csv")]) == EXIT_OK
    rows = (tmp_path / "m.csv").read_text().splitlines()
    mean = rows[3].split(",")
    assert mean[0] == "MEAN" and float(mean[1]) == 0 and mean[2] == "inf" and float(mean[3]) == pytest.approx(1)
    assert (tmp_path / "m.png").stat().st_size > 0
    assert "MEAN" in capsys.readouterr().out


def test_eval_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SPLATGUIDE_THREADS", "0")
    (tmp_path / "r").mkdir()
    assert main(["-q", "eval", "--results", str(tmp_path / "r"), "--truth", str(tmp_path / "r")]) == EXIT_USAGE


def test_gradcheck(capsys):
    assert main(["-q", "gradcheck", "--size", "8"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "PASS" in out and len(out.splitlines()) >= 22


def test_gradcheck_failure_exit():
    assert main(["-q", "gradcheck", "--size", "8", "--params", "4", "--tolerance", "1e-12"]) == EXIT_NUMERIC


def test_quiet_after_subcommand():
    assert build_parser().parse_args(["eval", "-q", "--results", "a", "--truth", "b"]).quiet
