"""Pretraining of the biased base models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tape
from .network import BatchNorm, ModelSpec, apply_layer, build_model, forward


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4


def estimate_running_stats(spec: ModelSpec, params: ParamSet, x: np.ndarray, chunk: int = 1000) -> None:
    """Set every BatchNorm layer's running mean/var to the data statistics.

    Layers are processed in order so each estimate sees the already
    re-normalized activations of the layers before it.
    """
    acts = [np.asarray(x[i:i + chunk], dtype=np.float64) - spec.input_center for i in range(0, len(x), chunk)]
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, BatchNorm):
            axes = (0,) + tuple(range(2, acts[0].ndim))
            count = sum(a.size // a.shape[1] for a in acts)
            mean = sum(a.sum(axis=axes) for a in acts) / count
            var = sum(((a - mean.reshape((1, -1) + (1,) * (a.ndim - 2))) ** 2).sum(axis=axes) for a in acts) / count
            params.buffers[f"{i}.running_mean"] = mean
            params.buffers[f"{i}.running_var"] = var
        acts = [apply_layer(i, layer, params, params.buffers, ad.Tensor(a)).data for a in acts]


def pretrain(spec: ModelSpec, x: np.ndarray, y: np.ndarray, seed: int, config: PretrainConfig = PretrainConfig()) -> ParamSet:
    """SGD with momentum and weight decay on the (biased) training split.

    Batchnorm statistics are re-estimated from the training data at the
    start of every epoch and held fixed within it.
    """
    rng = np.random.default_rng(seed)
    params = build_model(spec, seed)
    velocity = params.zeros_like(trainable=False)
    n = len(x)
    for _ in range(config.epochs):
        estimate_running_stats(spec, params, x)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            with Tape() as tape:
                loss = ad.softmax_cross_entropy(forward(spec, params, x[idx]), y[idx])
            ad.backward(tape, loss, params)
            ad.sgd_momentum_step(params, velocity, config.lr, config.momentum, config.weight_decay)
    return params
