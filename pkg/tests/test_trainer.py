import csv

import numpy as np
import pytest

import oracles
from splatguide import ConfigError, NumericError
from splatguide.losses import LossWeights
from splatguide.nn import load_checkpoint
from splatguide.tensor import save_ppm
from splatguide.trainer import TrainConfig, denoiser_grad_check, load_dataset, train

SMALL = dict(widths=(4, 8, 8), T=20, lr=1e-3)


def images(n=4, size=8, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    return [rng.uniform(size=(size, size, 3)).astype(np.float32) for _ in range(n)]


def read_log(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_steps_per_epoch(tmp_path):
    cfg = TrainConfig(batch_size=2, epochs=1, out_dir=str(tmp_path), **SMALL)
    res = train(cfg, images=images())
    assert res.steps == 2 and len(read_log(res.log_path)) == 2
    cfg = TrainConfig(batch_size=3, epochs=2, out_dir=str(tmp_path), **SMALL)
    assert train(cfg, images=images()).steps == 4


def test_max_steps(tmp_path):
    cfg = TrainConfig(batch_size=1, epochs=5, max_steps=3, out_dir=str(tmp_path), **SMALL)
    assert train(cfg, images=images()).steps == 3


def test_deterministic(tmp_path):
    a = train(TrainConfig(batch_size=2, out_dir=str(tmp_path / "a"), **SMALL), images=images()).history
    b = train(TrainConfig(batch_size=2, out_dir=str(tmp_path / "b"), **SMALL), images=images()).history
    assert a == b


def test_resume_reproduces_losses(tmp_path):
    kw = dict(batch_size=1, epochs=2, seed=3, **SMALL)
    full = train(TrainConfig(out_dir=str(tmp_path / "full"), **kw), images=images(3)).history
    cut = TrainConfig(out_dir=str(tmp_path / "cut"), checkpoint_interval=2, **kw)
    train(TrainConfig(**{**cut.to_dict(), "max_steps": 4}), images=images(3))
    resumed = train(cut, resume=tmp_path / "cut" / "checkpoint_000004.splc", images=images(3))
    assert resumed.steps == 6
    assert [r["total"] for r in full[4:]] == [r["total"] for r in resumed.history]
    assert len(read_log(resumed.log_path)) == 6


def test_checkpoint_contents(tmp_path):
    res = train(TrainConfig(batch_size=2, out_dir=str(tmp_path), **SMALL), images=images())
    net, opt, extra = load_checkpoint(res.checkpoint)
    assert opt is not None and opt.step_count == 2
    assert extra["step"] == 2 and extra["config"]["T"] == 20


def test_noise_only_weights(tmp_path):
    w = LossWeights(rec=0, perc=0, style=0, tv=0)
    res = train(TrainConfig(batch_size=2, loss_weights=w, out_dir=str(tmp_path), **SMALL), images=images())
    assert all(r["total"] == r["noise"] for r in res.history)


def test_nan_dumps_sample(tmp_path, monkeypatch):
    import splatguide.trainer as tr

    def broken(*args, **kwargs):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(tr, "loss_and_backward", broken)
    with pytest.raises(NumericError):
        train(TrainConfig(batch_size=2, out_dir=str(tmp_path), **SMALL), images=images())
    assert (tmp_path / "nan_sample.npz").exists()


class TestConfig:
    def test_unknown_keys(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"learning_rate": 1})
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"splat": {"bta": 1}})
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"loss_weights": {"gan": 1}})

    def test_round_trip(self):
        cfg = TrainConfig(batch_size=3, widths=(4, 8, 8))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_invalid(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(dataset_kind="png")


class TestDataset:
    def test_empty(self, tmp_path):
        with pytest.raises(ConfigError):
            load_dataset(TrainConfig(dataset=str(tmp_path)))
        with pytest.raises(ConfigError):
            load_dataset(TrainConfig())

    def test_size_multiple_of_eight(self, tmp_path):
        save_ppm(np.zeros((12, 12, 3)), tmp_path / "a.ppm")
        with pytest.raises(ConfigError):
            load_dataset(TrainConfig(dataset=str(tmp_path)))

    def test_limit_and_order(self, tmp_path):
        for i, img in enumerate(images(3)):
            save_ppm(img, tmp_path / f"{i}.ppm")
        data = load_dataset(TrainConfig(dataset=str(tmp_path), limit=2))
        assert len(data) == 2 and data[0].shape == (8, 8, 3)


def test_grad_check_small():
    rep = denoiser_grad_check(size=8, n_params=20, widths=(4, 8, 8))
    assert rep.passed and len(rep.entries) >= 20


def test_smooth_image_trains(tmp_path):
    cfg = TrainConfig(batch_size=1, epochs=30, out_dir=str(tmp_path), **SMALL)
    hist = train(cfg, images=[oracles.smooth_image(8)]).history
    assert np.isfinite([r["total"] for r in hist]).all()
