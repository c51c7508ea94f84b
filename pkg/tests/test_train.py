import dataclasses

import numpy as np
import pytest

from ddnet import checkpoint, data
from ddnet.checkpoint import CheckpointError
from ddnet.config import TrainConfig, apply_overrides, config_from_text, config_to_text
from ddnet.model import ConfigError, ModelConfig, build
from ddnet.tensor import NumericError, Parameter
from ddnet.train import AdamState, adam_step, infer, predict_batches, train


def tiny_cfg(**overrides):
    base = dict(model=ModelConfig.tiny(), learning_rate=1e-3, batch_size=4, epochs=2, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    train_m, test_m = data.synth_generate(12, 16, 5, root)
    return root, train_m, test_m


def quiet(_line):
    pass


# ---- adam ---------------------------------------------------------------

def param(values, grad):
    p = Parameter(np.asarray(values, dtype=np.float64).reshape(1, 1, 1, -1))
    p.grad = np.asarray(grad, dtype=np.float64).reshape(p.dims)
    return p


def test_zero_gradient_leaves_parameters_and_advances_t():
    p = param([1.0, -2.0], [0.0, 0.0])
    state = AdamState.for_params([p])
    adam_step([p], state, 1e-4)
    adam_step([p], state, 1e-4)
    np.testing.assert_array_equal(p.data.reshape(-1), [1.0, -2.0])
    assert state.t == 2


def test_first_step_moves_by_lr():
    p = param([0.5], [1.0])
    adam_step([p], AdamState.for_params([p]), 1e-4)
    assert p.data.item() - 0.5 == pytest.approx(-1e-4, rel=1e-6)


def test_constant_gradient_update_converges_to_lr():
    p = param([0.0, 0.0], [-3.0, 0.2])
    state = AdamState.for_params([p])
    for _ in range(2000):
        before = p.data.copy()
        adam_step([p], state, 1e-3)
    np.testing.assert_allclose((p.data - before).reshape(-1), [1e-3, -1e-3], rtol=1e-6)


def test_missing_gradient_raises():
    p, q = param([1.0], [1.0]), Parameter(np.zeros((1, 1, 1, 1)), name="w")
    with pytest.raises(ValueError, match="w"):
        adam_step([p, q], AdamState.for_params([p, q]), 1e-3)


# ---- config -------------------------------------------------------------

def test_config_text_round_trip():
    cfg = tiny_cfg(loss="bce", checkpoint_interval=3)
    cfg.model.postprocess_threshold = 0.5
    back = config_from_text(config_to_text(cfg))
    assert back == cfg


def test_config_overrides_and_errors():
    cfg = apply_overrides(TrainConfig.preset("desk"), {"train.epochs": "7", "growth_rate": "4", "seed": "3"})
    assert (cfg.epochs, cfg.model.growth_rate, cfg.seed) == (7, 4, 3)
    assert cfg.learning_rate == 1e-3 and TrainConfig.preset("full").learning_rate == 1e-4
    with pytest.raises(ConfigError):
        apply_overrides(TrainConfig(), {"train.nope": "1"})
    with pytest.raises(ConfigError):
        apply_overrides(TrainConfig(), {"epochs": "many"})
    with pytest.raises(ConfigError):
        config_from_text("[extra]\nx = 1\n")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(loss="l1").validate()


# ---- training -----------------------------------------------------------

def test_same_seed_same_curve_and_checkpoints(tiny_data, tmp_path):
    _, train_m, test_m = tiny_data
    runs = []
    for k in range(2):
        lines = []
        train(tiny_cfg(checkpoint_interval=1), train_m, test_m, tmp_path / str(k), log=lines.append)
        runs.append(lines)
    assert runs[0] == runs[1] and len(runs[0]) == 3
    assert runs[0][0].startswith("epoch 0 loss ")
    for name in ("epoch_0001.ckpt", "epoch_0002.ckpt", "final.ckpt"):
        assert (tmp_path / "0" / name).read_bytes() == (tmp_path / "1" / name).read_bytes()


def test_log_lines_are_machine_parseable(tiny_data):
    _, train_m, test_m = tiny_data
    lines = []
    result = train(tiny_cfg(epochs=1), train_m, test_m, log=lines.append)
    fields = lines[-1].split()
    assert fields[0::2] == ["epoch", "loss", "E", "S", "Wf", "F", "MAE"]
    assert int(fields[1]) == 1 and all(np.isfinite(float(v)) for v in fields[3::2])
    assert [r.epoch for r in result.history] == [0, 1] and not result.model.training


def test_zero_learning_rate_keeps_parameters(tiny_data):
    _, train_m, _ = tiny_data
    cfg = tiny_cfg(learning_rate=0.0, epochs=1)
    before = [p.data.copy() for p in build(cfg.model, seed=cfg.seed).parameters()]
    after = train(cfg, train_m, log=quiet).model.parameters()
    for a, b in zip(before, after):
        assert a.tobytes() == b.data.tobytes()


def test_non_finite_loss_aborts_with_batch_index(tiny_data):
    _, train_m, _ = tiny_data
    images, masks = data.load_manifest_arrays(train_m)
    images[5] = np.nan
    with pytest.raises(NumericError, match="epoch 0, batch 1"):
        train(tiny_cfg(epochs=1), (images, masks), log=quiet)


def test_divergence_during_an_epoch_aborts(tiny_data):
    _, train_m, _ = tiny_data
    with np.errstate(all="ignore"), pytest.raises(NumericError, match="epoch 1, batch 1"):
        train(tiny_cfg(epochs=1, learning_rate=1e300), train_m, log=quiet)


def test_first_epoch_reduces_loss_on_tiny(tiny_data):
    _, train_m, _ = tiny_data
    history = train(tiny_cfg(epochs=1, batch_size=2), train_m, log=quiet).history
    assert history[1].loss < history[0].loss


# ---- checkpoints and inference ------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg()
    model = build(cfg.model, seed=4)
    for _, buf in model.named_buffers():
        buf[...] = np.random.default_rng(0).uniform(0.5, 1.5, buf.shape)
    checkpoint.save(tmp_path / "m.ckpt", model, cfg)
    loaded, cfg2 = checkpoint.load(tmp_path / "m.ckpt")
    assert cfg2 == cfg and not loaded.training
    for (n, a), (m, b) in zip(checkpoint.model_arrays(model).items(), checkpoint.model_arrays(loaded).items()):
        assert n == m and a.tobytes() == b.tobytes()
    assert checkpoint.dumps(loaded, cfg2) == (tmp_path / "m.ckpt").read_bytes()
    x = np.random.default_rng(1).uniform(size=(2, 3, 16, 16))
    np.testing.assert_array_equal(predict_batches(model.eval(), x, 2), predict_batches(loaded, x, 1))


def test_checkpoint_errors(tmp_path):
    cfg = tiny_cfg()
    raw = checkpoint.dumps(build(cfg.model), cfg)
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "trunc.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello\n\nworld")
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "junk.ckpt")
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "missing.ckpt")
    other = build(dataclasses.replace(cfg.model, deform_channels=6))
    with pytest.raises(CheckpointError):
        checkpoint.load_into(other, checkpoint.model_arrays(build(cfg.model)))


def test_infer_writes_one_map_per_image(tiny_data, tmp_path):
    root, _, _ = tiny_data
    model = build(ModelConfig.tiny(), seed=1)
    lines = []
    written = infer(model, root / "images", tmp_path / "a", log=lines.append)
    assert sorted(p.stem for p in written) == sorted(data.list_images(root / "images"))
    assert lines[-1].startswith("infer mean") and len(lines) == 13
    again = infer(model, root / "images", tmp_path / "b", log=quiet)
    for a, b in zip(written, again):
        assert a.read_bytes() == b.read_bytes()
    pred = data.load_saliency(written[0])
    assert pred.shape == (16, 16) and 0 <= pred.min() and pred.max() <= 1
    with pytest.raises(data.DataError):
        infer(model, tmp_path / "a" / "nothing", tmp_path / "c", log=quiet)
