import numpy as np
import pytest

from sgcnet.data_eval import build_sample
from sgcnet.errors import DataError
from sgcnet.model import Config, NetworkConfig, TrainConfig, build
from sgcnet.training import (METRICS_HEADER, evaluate_model, load_into, predict, read_checkpoint,
                             train_loop, write_checkpoint)


def tiny_config(epochs=2, **net):
    kw = dict(input_resolution=32, channels=(4, 4), blocks=(1, 1), sgc_groups=2,
              sgc_min_resolution=4)
    kw.update(net)
    return Config(NetworkConfig(**kw), TrainConfig(batch_size=2, epochs=epochs,
                                                   learning_rate=0.02, lr_decay=0.0))


@pytest.fixture(scope="module")
def scenes():
    return [build_sample(s, 32) for s in range(3)]


def test_checkpoint_round_trip(tmp_path):
    g = build(tiny_config().network)
    write_checkpoint(tmp_path / "a.sgck", g.registry)
    values = read_checkpoint(tmp_path / "a.sgck")
    assert list(values) == list(g.registry.values)
    for k, v in values.items():
        assert np.array_equal(np.ravel(v), g.registry[k].astype(np.float32).ravel())
    g2 = build(tiny_config(init_seed=5).network)
    load_into(g2, values)
    assert all(np.array_equal(g2.registry[k].ravel(), values[k]) for k in values)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.sgck").write_bytes(b"NOPE\x00\x00\x00\x00")
    with pytest.raises(DataError):
        read_checkpoint(tmp_path / "bad.sgck")
    with pytest.raises(DataError):
        read_checkpoint(tmp_path / "missing.sgck")
    g = build(tiny_config().network)
    write_checkpoint(tmp_path / "t.sgck", g.registry)
    (tmp_path / "short.sgck").write_bytes((tmp_path / "t.sgck").read_bytes()[:-3])
    with pytest.raises(DataError):
        read_checkpoint(tmp_path / "short.sgck")


def test_load_into_rejects_other_architecture(tmp_path):
    g = build(tiny_config().network)
    other = build(tiny_config(channels=(4, 6)).network)
    write_checkpoint(tmp_path / "o.sgck", other.registry)
    with pytest.raises(DataError):
        load_into(g, read_checkpoint(tmp_path / "o.sgck"))


def test_zero_epochs_writes_initial_checkpoint_only(tmp_path, scenes):
    res = train_loop(tiny_config(epochs=0), scenes, tmp_path)
    assert [p.name for p in res.checkpoints] == ["ckpt_0000.sgck"]
    assert (tmp_path / "metrics.csv").read_text().splitlines() == [",".join(METRICS_HEADER)]
    assert res.metrics == []


def test_metrics_rows_and_loss_finite(tmp_path, scenes):
    res = train_loop(tiny_config(epochs=2), scenes, tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,loss,lr"
    assert len(lines) == 1 + 2 * 2  # two batches per epoch for three scenes
    assert all(np.isfinite(m[2]) for m in res.metrics)
    assert [p.name for p in res.checkpoints] == ["ckpt_0000.sgck", "ckpt_0002.sgck"]


def test_training_is_deterministic(tmp_path, scenes):
    train_loop(tiny_config(), scenes, tmp_path / "a", seed=4)
    train_loop(tiny_config(), scenes, tmp_path / "b", seed=4)
    for name in ("metrics.csv", "ckpt_0002.sgck"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_training_reduces_loss(scenes):
    res = train_loop(tiny_config(epochs=15), scenes[:2])
    losses = [m[2] for m in res.metrics]
    assert np.mean(losses[-3:]) < losses[0]


def test_empty_dataset_rejected():
    with pytest.raises(DataError):
        train_loop(tiny_config(), [])


def test_predict_and_evaluate_shapes(scenes):
    g = build(tiny_config().network)
    pred = predict(g, scenes)
    assert pred.shape == (3, 8, 8, 8)
    m = evaluate_model(g, scenes)
    assert 0 <= m.mean_iou <= 1 or np.isnan(m.mean_iou)
