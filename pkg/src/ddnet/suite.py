"""Gradient-check cases for every differentiable operator and a tiny model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from . import ops
from .deform import DeformSpec, deform_conv2d, sample_points
from .gradcheck import grad_check
from .losses import bce, mse, ssim_loss
from .model import ModelConfig, build
from .ops import BatchNormState, ConvSpec
from .tensor import Tensor, sigmoid

OPS_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


def _t(rng, *dims) -> Tensor:
    return Tensor(rng.standard_normal(dims))


def _away_from_integers(rng, dims, low, high) -> np.ndarray:
    # bilinear weights have kinks at integer positions
    v = rng.uniform(low, high, dims)
    frac = v - np.floor(v)
    return np.where(np.minimum(frac, 1 - frac) < 0.05, v + 0.1, v)


def _conv(rng):
    spec = ConvSpec(3, 2, 3, 2, 1)
    return lambda x, w, b: ops.conv2d(x, w, b, spec), [_t(rng, 2, 3, 6, 6), _t(rng, *spec.weight_dims), _t(rng, 1, 2, 1, 1)]


def _tconv(rng):
    spec = ConvSpec(3, 2, 4, 2, 1)
    return (lambda x, w, b: ops.transposed_conv2d(x, w, spec, b),
            [_t(rng, 2, 3, 3, 4), _t(rng, *spec.transposed_weight_dims), _t(rng, 1, 2, 1, 1)])


def _batch_norm(rng):
    state = BatchNormState(2, dtype=np.float64)
    state.gamma.data = rng.uniform(0.5, 1.5, state.gamma.dims)
    state.beta.data = rng.standard_normal(state.beta.dims)
    return lambda x, g, b: ops.batch_norm(x, state, "train"), [_t(rng, 3, 2, 3, 3), state.gamma, state.beta]


def _max_pool(rng):
    return lambda x: ops.max_pool(x, 3, 2, 1), [_t(rng, 2, 2, 6, 6)]


def _avg_pool(rng):
    return lambda x: ops.avg_pool(x, 2, 2), [_t(rng, 2, 2, 6, 6)]


def _upsample(rng):
    return lambda x: ops.bilinear_upsample(x, 2), [_t(rng, 1, 2, 4, 5)]


def _sample(rng):
    rows = Tensor(_away_from_integers(rng, (1, 1, 1, 6), -0.8, 4.8))
    cols = Tensor(_away_from_integers(rng, (1, 1, 1, 6), -0.8, 5.8))
    return sample_points, [_t(rng, 1, 2, 4, 5), rows, cols]


def _deform(rng):
    spec = DeformSpec(ConvSpec(2, 2, 3, 1, 1))
    n, oh, ow = 1, 4, 4
    off = Tensor(_away_from_integers(rng, (n, spec.offset_channels, oh, ow), -1.5, 1.5))
    masks = Tensor(rng.uniform(0.1, 0.9, (n, spec.mask_channels, oh, ow)))
    return (lambda x, o, m, w, b: deform_conv2d(x, o, m, w, b, spec),
            [_t(rng, n, 2, 4, 4), off, masks, _t(rng, *spec.base.weight_dims), _t(rng, 1, 2, 1, 1)])


def _loss_case(fn):
    def case(rng):
        target = Tensor((rng.uniform(size=(2, 1, 12, 13)) > 0.5).astype(np.float64))
        pred = Tensor(rng.uniform(0.05, 0.95, (2, 1, 12, 13)))
        # the target is data, so only the prediction is perturbed
        return lambda p: fn(p, target), [pred]
    return case


def _logistic(rng):
    return sigmoid, [Tensor(rng.uniform(-6, 6, (2, 2, 3, 3)))]


OP_CASES: List[Tuple[str, Callable]] = [
    ("conv2d", _conv),
    ("transposed_conv2d", _tconv),
    ("batch_norm", _batch_norm),
    ("max_pool", _max_pool),
    ("avg_pool", _avg_pool),
    ("bilinear_upsample", _upsample),
    ("bilinear_sample", _sample),
    ("deform_conv2d", _deform),
    ("mse", _loss_case(mse)),
    ("bce", _loss_case(bce)),
    ("ssim_loss", _loss_case(ssim_loss)),
    ("sigmoid", _logistic),
]


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def run_ops(seeds=(0,), names=None) -> List[CheckResult]:
    """Worst error over ``seeds`` for each operator case."""
    results = []
    for name, make in OP_CASES:
        if names is not None and name not in names:
            continue
        start, worst = time.perf_counter(), 0.0
        for seed in seeds:
            fn, inputs = make(np.random.default_rng(seed))
            worst = max(worst, grad_check(fn, inputs, seed=seed))
        results.append(CheckResult(name, worst, OPS_TOLERANCE, time.perf_counter() - start))
    return results


def model_case(seed: int = 0, preset: str = "desk"):
    """A float64 model with non-trivial offset branches, plus its inputs."""
    cfg = ModelConfig.preset(preset)
    model = build(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 2])
    for name, p in model.named_parameters():
        if ".offset." in name:
            p.data = rng.normal(0.0, 0.05, p.dims)
    h, w = cfg.input_size
    x = Tensor(rng.uniform(size=(2, 3, h, w)))
    target = Tensor((rng.uniform(size=(2, 1, h, w)) > 0.5).astype(np.float64))
    params = model.parameters()

    def forward(x, *_params):
        return mse(model(x), target)

    return forward, [x] + params


# Small step: at 64x64 a 1e-5 step routinely crosses relu and max-pool kinks.
MODEL_EPS = 1e-7


def run_model(seed: int = 0, preset: str = "desk", max_checks: int = 2) -> CheckResult:
    """End-to-end check of ``max_checks`` scalars per parameter tensor (desk: ~2.5 min)."""
    start = time.perf_counter()
    forward, inputs = model_case(seed, preset)
    err = grad_check(forward, inputs, eps=MODEL_EPS, seed=seed, max_checks=max_checks)
    return CheckResult(f"model[{preset}]", err, MODEL_TOLERANCE, time.perf_counter() - start)


def format_results(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'item'.ljust(width)}  {'max_rel_error':>13}  {'tolerance':>9}  result"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {r.error:13.3e}  {r.tolerance:9.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
