"""Adam optimisation, the training loop and batch inference."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import checkpoint, data, metrics
from .config import TrainConfig
from .losses import get_loss
from .model import DDNet, build
from .ops import resize_bilinear
from .tensor import NumericError, Parameter, Tensor, backward, get_tape, no_grad


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Parameter]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every parameter, in place."""
    missing = [p.name or str(i) for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise ValueError(f"missing gradients for: {', '.join(missing)}")
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - step).astype(p.dtype, copy=False)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    report: Optional[metrics.MetricReport]

    def line(self) -> str:
        r = self.report
        scores = r.row() if r is not None else (float("nan"),) * 5
        e, s, wf, f, mae = scores
        return f"epoch {self.epoch} loss {self.loss:.6f} E {e:.6f} S {s:.6f} Wf {wf:.6f} F {f:.6f} MAE {mae:.6f}"


@dataclass
class TrainResult:
    model: DDNet
    history: List[EpochRecord] = field(default_factory=list)


def predict_batches(model: DDNet, images: np.ndarray, batch_size: int) -> np.ndarray:
    """Eval-mode saliency maps (n, h, w) for images (n, 3, h, w)."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            out = [model(Tensor(images[i:i + batch_size].astype(model.dtype))).data[:, 0]
                   for i in range(0, len(images), batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(out).astype(np.float64)


def evaluate_model(model: DDNet, images: np.ndarray, masks: np.ndarray, batch_size: int) -> metrics.MetricReport:
    preds = predict_batches(model, images, batch_size)
    return metrics.MetricReport.mean([metrics.score(p, g) for p, g in zip(preds, masks)])


def _initial_loss(model, images, masks, cfg, loss_fn) -> float:
    # batch statistics as in training, without touching the running buffers
    buffers = {k: v.copy() for k, v in model.named_buffers()}
    total = 0.0
    with no_grad():
        for b, i in enumerate(range(0, len(images), cfg.batch_size)):
            x = Tensor(images[i:i + cfg.batch_size].astype(model.dtype))
            y = Tensor(masks[i:i + cfg.batch_size, None].astype(model.dtype))
            try:
                value = loss_fn(model(x), y).item()
            except NumericError as exc:
                raise NumericError(f"non-finite values at epoch 0, batch {b}: {exc}") from None
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch 0, batch {b}")
            total += value * len(x.data)
    for k, v in model.named_buffers():
        v[...] = buffers[k]
    return total / len(images)


def train(
    cfg: TrainConfig,
    train_set,
    test_set=None,
    out_dir=None,
    log: Callable[[str], None] = print,
    model: Optional[DDNet] = None,
) -> TrainResult:
    """Train from ``(images, masks)`` arrays or manifests; log one line per epoch.

    Epoch 0 reports the loss of the freshly initialised model. Metrics are
    computed on ``test_set`` (or the training set when it is absent) after
    every epoch.
    """
    cfg.validate()
    size = cfg.model.input_size
    images, masks = _arrays(train_set, size, cfg.workers)
    if len(images) == 0:
        raise data.DataError("training set is empty")
    test_images, test_masks = _arrays(test_set, size, cfg.workers) if test_set is not None else (images, masks)
    if model is None:
        model = build(cfg.model, seed=cfg.seed)
    model.train()
    params = model.parameters()
    state = AdamState.for_params(params)
    loss_fn = get_loss(cfg.loss)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    result = TrainResult(model)
    out = Path(out_dir) if out_dir is not None else None

    record0 = EpochRecord(0, _initial_loss(model, images, masks, cfg, loss_fn),
                          evaluate_model(model, test_images, test_masks, cfg.batch_size))
    result.history.append(record0)
    log(record0.line())

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(images))
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = Tensor(images[idx].astype(model.dtype))
            y = Tensor(masks[idx, None].astype(model.dtype))
            get_tape().clear()
            try:
                loss = loss_fn(model(x), y)
            except NumericError as exc:
                get_tape().clear()
                raise NumericError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from None
            value = loss.item()
            if not np.isfinite(value):
                get_tape().clear()
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            for p in params:
                p.grad = None
            backward(loss)
            adam_step(params, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
            total += value * len(idx)
        rec = EpochRecord(epoch, total / len(images),
                          evaluate_model(model, test_images, test_masks, cfg.batch_size))
        result.history.append(rec)
        log(rec.line())
        if out is not None and cfg.checkpoint_interval and epoch % cfg.checkpoint_interval == 0:
            checkpoint.save(out / f"epoch_{epoch:04d}.ckpt", model, cfg)
    if out is not None:
        checkpoint.save(out / "final.ckpt", model, cfg)
    model.eval()
    return result


def _arrays(source, size, workers):
    if isinstance(source, data.DatasetManifest):
        imgs, masks = data.load_manifest_arrays(source, size, workers)
        return imgs, masks
    imgs, masks = source
    return np.asarray(imgs), np.asarray(masks, dtype=bool)


def infer(model: DDNet, image_dir, out_dir, log: Callable[[str], None] = print) -> List[Path]:
    """Write one 8-bit map per image, at the image's native size, under the same stem."""
    found = data.list_images(image_dir)
    if not found:
        raise data.DataError(f"no images in {image_dir}")
    size = model.config.input_size
    out = Path(out_dir)
    written, times = [], []
    model.eval()
    for stem, path in found.items():
        native = data.load_image(path)
        start = time.perf_counter()
        x = data.load_image(path, size)[None]
        pred = predict_batches(model, x, 1)[0]
        if pred.shape != native.shape[1:]:
            pred = resize_bilinear(pred, *native.shape[1:])
        t = time.perf_counter() - start
        if model.config.postprocess_threshold is not None:
            pred = (pred >= model.config.postprocess_threshold).astype(np.float64)
        target = out / f"{stem}.png"
        data.save_saliency(pred, target)
        written.append(target)
        times.append(t)
        log(f"infer {stem} {t:.4f}s")
    log(f"infer mean {np.mean(times):.4f}s over {len(times)} images")
    return written
