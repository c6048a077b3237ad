import numpy as np
import pytest
import torch
from PIL import Image

from scgseg import training
from scgseg.config import DataConfig, TrainConfig
from scgseg.data import ImageSample, make_synthetic_dataset
from scgseg.errors import CheckpointError, NonFiniteLossError, ValidationError
from scgseg.losses import LossConfig
from scgseg.model import ModelConfig, build_model
from scgseg.training import (
    METRIC_FIELDS,
    MetricsLog,
    evaluate,
    load_checkpoint,
    predict,
    read_metrics,
    save_checkpoint,
    train,
)

TINY = dict(base_channels=4, input_size=32, node_grid=(4, 4), latent_dim=8, dropout_p=0.0)


def tiny_config(tmp_path, **kw):
    data = DataConfig(synthetic=True, synthetic_count=4, synthetic_test_count=2)
    base = dict(data=data, model=ModelConfig(**TINY), batch_size=2, epochs=2, learning_rate=1e-3,
                seed=3, checkpoint_dir=str(tmp_path / "ckpt"))
    base.update(kw)
    return TrainConfig(**base)


def state_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


class TestMetricsLog:
    def test_header_and_rows(self, tmp_path):
        log = MetricsLog(tmp_path / "m.csv")
        rec = dict(step=1, epoch=0, split="train", total=1.5, primary=1.0, kl=0.25, dl=0.0, aux=0.5, dice=0.1, ftl=0.9)
        log.append(rec)
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == ",".join(METRIC_FIELDS)
        assert read_metrics(tmp_path / "m.csv") == [rec]

    def test_truncated_tail_is_ignored(self, tmp_path):
        path = tmp_path / "m.csv"
        log = MetricsLog(path)
        for s in (1, 2):
            log.append(dict(step=s, epoch=0, split="train", total=1.0, primary=1.0, kl=0.0, dl=0.0, aux=0.0, dice=0.5, ftl=0.5))
        with open(path, "a") as fh:
            fh.write("3,0,train,0.9,0.")
        assert [r["step"] for r in read_metrics(path)] == [1, 2]

    def test_reopen_appends(self, tmp_path):
        path = tmp_path / "m.csv"
        rec = dict(step=1, epoch=0, split="test", total=1.0, primary=1.0, kl=0.0, dl=0.0, aux=0.0, dice=0.5, ftl=0.5)
        MetricsLog(path).append(rec)
        MetricsLog(path).append({**rec, "step": 2})
        assert [r["step"] for r in read_metrics(path)] == [1, 2]


class TestCheckpoint:
    def test_roundtrip_bitwise_double(self, tmp_path):
        model = build_model(ModelConfig(**TINY), seed=1).double().eval()
        x = torch.rand(2, 1, 32, 32, dtype=torch.float64)
        with torch.no_grad():
            before = model(x).prob
        save_checkpoint(tmp_path / "c.pt", model, step=7, metrics={"dice": 0.5})
        loaded, manifest = load_checkpoint(tmp_path / "c.pt")
        with torch.no_grad():
            assert torch.equal(loaded.eval()(x).prob, before)
        assert manifest["step"] == 7 and manifest["arch_hash"] == model.config.arch_hash()
        assert manifest["metrics"] == {"dice": 0.5}

    def test_mismatch_lists_entries(self, tmp_path):
        save_checkpoint(tmp_path / "c.pt", build_model(ModelConfig(**TINY)))
        other = build_model(ModelConfig(**{**TINY, "latent_dim": 6}))
        with pytest.raises(CheckpointError) as info:
            load_checkpoint(tmp_path / "c.pt", other)
        msg = str(info.value)
        assert "scg.mean_conv.weight" in msg and "gcn" in msg

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "junk.pt").write_bytes(b"nope")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "junk.pt")
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "absent.pt")


class TestTrain:
    def test_zero_epochs_keeps_initialisation(self, tmp_path):
        cfg = tiny_config(tmp_path, epochs=0)
        result = train(cfg)
        assert result.steps == 0 and result.log_rows == [] and result.best_checkpoint is None
        loaded, manifest = load_checkpoint(result.last_checkpoint)
        assert manifest["step"] == 0
        assert state_equal(loaded, build_model(cfg.model, seed=cfg.seed))
        assert read_metrics(tmp_path / "ckpt" / "metrics.csv") == []

    def test_logs_and_checkpoints(self, tmp_path):
        result = train(tiny_config(tmp_path))
        rows = read_metrics(tmp_path / "ckpt" / "metrics.csv")
        assert [r["split"] for r in rows] == ["train", "train", "test"] * 2
        steps = [r["step"] for r in rows if r["split"] == "train"]
        assert steps == sorted(steps) == [1, 2, 3, 4]
        assert result.best_checkpoint is not None and result.best_checkpoint.exists()
        for r in rows:
            assert r["total"] == pytest.approx(r["primary"] + r["kl"] + r["dl"] + 0.3 * r["aux"], rel=1e-5, abs=1e-6)

    def test_max_steps(self, tmp_path):
        result = train(tiny_config(tmp_path, epochs=50, max_steps=3))
        assert result.steps == 3

    def test_same_seed_same_run(self, tmp_path):
        a = train(tiny_config(tmp_path / "a", deterministic=True))
        b = train(tiny_config(tmp_path / "b", deterministic=True))
        torch.use_deterministic_algorithms(False)
        assert a.log_rows == b.log_rows
        assert state_equal(a.model, b.model)

    def test_nonfinite_names_term(self, tmp_path, monkeypatch):
        real = training.composite_loss

        def poisoned(*args, **kw):
            bundle = real(*args, **kw)
            return bundle._replace(kl=torch.tensor(float("nan")))

        monkeypatch.setattr(training, "composite_loss", poisoned)
        with pytest.raises(NonFiniteLossError, match="kl") as info:
            train(tiny_config(tmp_path))
        assert info.value.step == 1

    def test_unreadable_data_fails_before_training(self, tmp_path):
        (tmp_path / "img").mkdir()
        (tmp_path / "msk").mkdir()
        (tmp_path / "img" / "a.png").write_bytes(b"garbage")
        Image.fromarray(np.zeros((8, 8), np.uint8)).save(tmp_path / "msk" / "a.png")
        cfg = tiny_config(tmp_path, data=DataConfig(image_dir=str(tmp_path / "img"), mask_dir=str(tmp_path / "msk")))
        with pytest.raises(OSError, match="a.png"):
            train(cfg)
        assert not (tmp_path / "ckpt" / "last.pt").exists()


class _Oracle:
    def __init__(self, samples, value=None):
        self.masks = torch.stack([torch.from_numpy(s.mask).float()[None] for s in samples])
        self.value = value
        self.pos = 0

    def __call__(self, images):
        b = images.shape[0]
        out = self.masks[self.pos:self.pos + b]
        self.pos += b
        return torch.full_like(out, self.value) if self.value is not None else out


class TestEvaluate:
    def test_oracle_model(self):
        samples = make_synthetic_dataset(5, 32, 0)
        table = evaluate(_Oracle(samples), samples, LossConfig(), batch_size=2)
        assert table.aggregate == {"dice": 1.0, "ftl": 0.0}
        assert [r["id"] for r in table.rows] == [s.id for s in samples]

    def test_all_zero_model(self):
        samples = make_synthetic_dataset(3, 32, 1)
        table = evaluate(_Oracle(samples, 0.0), samples, LossConfig())
        assert table.aggregate["dice"] == 0.0
        assert table.aggregate["ftl"] > 0.9

    def test_csv(self, tmp_path):
        samples = make_synthetic_dataset(2, 32, 0)
        evaluate(_Oracle(samples), samples).write_csv(tmp_path / "e.csv")
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert lines[0] == "id,dice,ftl" and lines[-1].startswith("__mean__,1.0,0.0")

    def test_model_predictor(self):
        model = build_model(ModelConfig(**TINY), seed=0)
        table = evaluate(model, make_synthetic_dataset(3, 32, 0))
        assert len(table.rows) == 3 and 0 <= table.aggregate["dice"] <= 1

    def test_empty(self):
        with pytest.raises(ValidationError):
            evaluate(lambda x: x, [])


class TestPredict:
    def _model(self):
        return build_model(ModelConfig(**TINY), seed=0)

    def test_one_mask_per_image(self, tmp_path):
        src = tmp_path / "in"
        src.mkdir()
        Image.fromarray(np.full((40, 50), 120, np.uint8)).save(src / "slice.png")
        written, failures = predict(self._model(), src / "slice.png", tmp_path / "out")
        assert failures == {} and [p.name for p in written] == ["slice.png"]
        mask = np.array(Image.open(written[0]))
        assert mask.shape == (40, 50) and set(np.unique(mask)) <= {0, 255}

    def test_probability_maps(self, tmp_path):
        Image.fromarray(np.zeros((32, 32), np.uint8)).save(tmp_path / "a.png")
        written, _ = predict(self._model(), tmp_path / "a.png", tmp_path / "out", save_prob=True)
        prob = Image.open(tmp_path / "out" / "a_prob.png")
        assert len(written) == 2 and np.array(prob).dtype == np.uint16

    def test_empty_directory(self, tmp_path):
        (tmp_path / "in").mkdir()
        assert predict(self._model(), tmp_path / "in", tmp_path / "out") == ([], {})

    def test_threshold_zero_all_ones(self, tmp_path):
        Image.fromarray(np.zeros((32, 32), np.uint8)).save(tmp_path / "a.png")
        (path,), _ = predict(self._model(), tmp_path / "a.png", tmp_path / "out", threshold=0.0)
        assert np.all(np.array(Image.open(path)) == 255)

    def test_failures_collected(self, tmp_path):
        src = tmp_path / "in"
        src.mkdir()
        (src / "bad.png").write_bytes(b"xx")
        Image.fromarray(np.zeros((32, 32), np.uint8)).save(src / "good.png")
        written, failures = predict(self._model(), src, tmp_path / "out")
        assert [p.name for p in written] == ["good.png"]
        assert list(failures) == [str(src / "bad.png")]


def test_sample_type_checks():
    with pytest.raises(ValidationError):
        ImageSample(np.zeros((4, 4), np.float32), np.zeros((4, 5), np.uint8), "x")
