"""Tuning loops: change-penalized, fine-tuning, side-tuning and MAS.

All four share one loop that stops a fixed number of update steps
(``epsilon``) after the tuning batch is first classified correctly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Collection, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tape, Tensor
from .network import (
    ChangeModel,
    ModelSpec,
    SideTunedModel,
    combined_forward,
    forward,
    predict,
    side_forward,
)
from .penalty import MasState, PenaltyConfig, clip_zero_crossings, mas_importance, mas_penalty_grad, penalty_grad, penalty_value


# Change-penalized runs use plain SGD: heavy-ball velocity built up before
# the batch is corrected keeps pushing afterwards, and the epsilon extra
# steps amplify that overshoot.
CP_LR = 1.5e-3
CP_MOMENTUM = 0.0
BASELINE_LR = 1e-5
BASELINE_MOMENTUM = 0.9
BASELINE_WEIGHT_DECAY = 5e-4


class Method(str, Enum):
    CHANGE_PENALIZED = "ChangePenalized"
    FINETUNE = "FineTune"
    SIDETUNE = "SideTune"
    MAS = "MAS"


@dataclass(frozen=True)
class StoppingPolicy:
    epsilon: int = 0
    max_steps: int = 500

    def __post_init__(self):
        if self.epsilon < 0 or self.max_steps < 1:
            raise ValueError(f"invalid stopping policy {self}")
        if self.epsilon > self.max_steps:
            raise ValueError(f"epsilon {self.epsilon} exceeds max_steps {self.max_steps}")


@dataclass(frozen=True)
class TuneConfig:
    method: Method
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    penalty: Optional[PenaltyConfig] = None
    lambda_mas: Optional[float] = None
    stopping: StoppingPolicy = field(default_factory=StoppingPolicy)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if (self.penalty is not None) != (self.method is Method.CHANGE_PENALIZED):
            raise ValueError("penalty is required for ChangePenalized and only for it")
        if (self.lambda_mas is not None) != (self.method is Method.MAS):
            raise ValueError("lambda_mas is required for MAS and only for it")

    @classmethod
    def change_penalized(cls, penalty: PenaltyConfig = PenaltyConfig(), lr: float = CP_LR, momentum: float = CP_MOMENTUM,
                         epsilon: int = 0, max_steps: int = 500, seed: int = 0) -> "TuneConfig":
        return cls(Method.CHANGE_PENALIZED, lr, momentum, 0.0, penalty=penalty,
                   stopping=StoppingPolicy(epsilon, max_steps), seed=seed)

    @classmethod
    def baseline(cls, method, lr: float = BASELINE_LR, momentum: float = BASELINE_MOMENTUM,
                 weight_decay: float = BASELINE_WEIGHT_DECAY,
                 epsilon: int = 0, max_steps: int = 500, lambda_mas: float = 1.0, seed: int = 0) -> "TuneConfig":
        method = Method(method)
        return cls(method, lr, momentum, weight_decay,
                   lambda_mas=lambda_mas if method is Method.MAS else None,
                   stopping=StoppingPolicy(epsilon, max_steps), seed=seed)


@dataclass
class TuneResult:
    steps_taken: int
    converged: bool
    loss_trace: list = field(default_factory=list)
    correct_trace: list = field(default_factory=list)
    params: Optional[ParamSet] = None
    model: object = None


# --------------------------------------------------------------------------
# stopping


@dataclass
class StopState:
    steps: int = 0
    countdown: Optional[int] = None


def stopping_step(state: StopState, all_correct: bool, policy: StoppingPolicy) -> bool:
    """Advance the countdown after an evaluation; True means stop.

    The countdown starts at epsilon on the first correct evaluation and then
    ticks once per step whether or not the batch stays correct.
    """
    if state.countdown is None:
        if all_correct:
            state.countdown = policy.epsilon
    else:
        state.countdown -= 1
    if state.countdown is not None and state.countdown <= 0:
        return True
    return state.steps >= policy.max_steps


def batch_correct(logits, labels) -> bool:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return bool(np.all(np.argmax(data, axis=1) == np.asarray(labels)))


# --------------------------------------------------------------------------
# batch selection


def _matches(labels, groups, group_filter) -> np.ndarray:
    if group_filter is None:
        return np.ones(len(labels), dtype=bool)
    mask = np.zeros(len(labels), dtype=bool)
    for label, group in group_filter:
        m = groups == group
        if label is not None:
            m &= labels == label
        mask |= m
    return mask


class InsufficientSamples(ValueError):
    pass


def select_contradicting(spec: ModelSpec, params: ParamSet, pool, group_filter: Optional[Collection] = None,
                         count: int = 1, draw_index: int = 0, seed: int = 0):
    """The ``draw_index``-th disjoint batch of misclassified, filter-matching samples.

    ``pool`` needs ``x``, ``y``, ``group`` and ``ids`` arrays; ``group_filter``
    is a collection of ``(label or None, group)`` pairs.  Returns ``(x, y, ids)``.
    """
    if count < 1 or draw_index < 0:
        raise ValueError(f"invalid count={count} draw_index={draw_index}")
    mask = _matches(pool.y, pool.group, group_filter)
    idx = np.flatnonzero(mask)
    if idx.size:
        wrong = predict(spec, params, pool.x[idx]) != pool.y[idx]
        idx = idx[wrong]
    need = count * (draw_index + 1)
    if idx.size < need:
        raise InsufficientSamples(f"only {idx.size} eligible samples, need {need} (b={count}, draw {draw_index})")
    idx = idx[np.argsort(pool.ids[idx], kind="stable")]
    order = np.random.default_rng(seed).permutation(idx.size)
    take = idx[order[draw_index * count:(draw_index + 1) * count]]
    return pool.x[take], pool.y[take], pool.ids[take]


# --------------------------------------------------------------------------
# loop


def _check_batch(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("tuning batch is empty")
    if len(x) != len(y):
        raise ValueError(f"{len(x)} inputs but {len(y)} labels")
    return x, y


def _run_loop(trainable: ParamSet, logits_fn: Callable, extra_grad: Callable, y, config: TuneConfig,
              post_step: Optional[Callable] = None) -> TuneResult:
    """Shared update loop.

    ``logits_fn`` records a forward pass on the active tape; ``extra_grad``
    adds any regularizer gradient in place and returns its value.
    ``post_step(before, velocity)`` may adjust parameters after each update.
    """
    velocity = trainable.zeros_like(trainable=False)
    policy = config.stopping
    state = StopState()
    result = TuneResult(0, False)

    with Tape() as tape:
        logits = logits_fn()
    correct = batch_correct(logits, y)
    if stopping_step(state, correct, policy):
        result.converged = correct
        return result

    while True:
        with tape:
            loss = ad.softmax_cross_entropy(logits, y)
        ad.backward(tape, loss, trainable)
        reg = extra_grad()
        before = {k: t.data for k, t in trainable.items()} if post_step else None
        ad.sgd_momentum_step(trainable, velocity, config.lr, config.momentum, config.weight_decay)
        if post_step:
            post_step(before, velocity)
        state.steps += 1
        result.loss_trace.append(loss.item() + reg)

        tape = Tape()
        with tape:
            logits = logits_fn()
        correct = batch_correct(logits, y)
        result.correct_trace.append(int(np.sum(np.argmax(logits.data, axis=1) == y)))
        if stopping_step(state, correct, policy):
            break
    result.steps_taken = state.steps
    result.converged = correct
    return result


def tune_change_penalized(base: ParamSet, spec: ModelSpec, batch, config: TuneConfig) -> TuneResult:
    """Train a zero-initialized delta on top of the frozen ``base``."""
    if config.method is not Method.CHANGE_PENALIZED:
        raise ValueError(f"expected ChangePenalized config, got {config.method}")
    x, y = _check_batch(*batch)
    model = ChangeModel.from_base(spec, base)

    def extra():
        v = penalty_value(model.delta, config.penalty)
        penalty_grad(model.delta, config.penalty)
        return v

    result = _run_loop(model.delta, lambda: combined_forward(model, x), extra, y, config,
                       post_step=lambda before, vel: clip_zero_crossings(model.delta, before, vel, config.penalty))
    result.params = model.delta
    result.model = model
    return result


def tune_finetune(params: ParamSet, spec: ModelSpec, batch, config: TuneConfig) -> TuneResult:
    if config.method is not Method.FINETUNE:
        raise ValueError(f"expected FineTune config, got {config.method}")
    x, y = _check_batch(*batch)
    tuned = params.copy(trainable=True)
    result = _run_loop(tuned, lambda: forward(spec, tuned, x), lambda: 0.0, y, config)
    result.params = tuned
    return result


def tune_sidetune(base: ParamSet, spec: ModelSpec, batch, config: TuneConfig) -> TuneResult:
    if config.method is not Method.SIDETUNE:
        raise ValueError(f"expected SideTune config, got {config.method}")
    x, y = _check_batch(*batch)
    model = SideTunedModel.from_base(spec, base)
    trainable = ParamSet()
    for name, t in model.side.items():
        trainable.add(name, t)
    trainable.add("blend_logit", model.blend_logit)
    result = _run_loop(trainable, lambda: side_forward(model, x), lambda: 0.0, y, config)
    result.params = model.side
    result.model = model
    return result


def tune_mas(params: ParamSet, spec: ModelSpec, batch, config: TuneConfig, omega: Optional[dict] = None) -> TuneResult:
    """Fine-tune all parameters with the MAS penalty anchored at ``params``.

    The importance weights are estimated once on the tuning batch unless
    ``omega`` is supplied.
    """
    if config.method is not Method.MAS:
        raise ValueError(f"expected MAS config, got {config.method}")
    x, y = _check_batch(*batch)
    if omega is None:
        omega = mas_importance(spec, params, x)
    state = MasState(omega, {k: t.data.copy() for k, t in params.items()}, config.lambda_mas)
    tuned = params.copy(trainable=True)
    result = _run_loop(tuned, lambda: forward(spec, tuned, x), lambda: mas_penalty_grad(tuned, state), y, config)
    result.params = tuned
    result.model = state
    return result


TUNERS = {
    Method.CHANGE_PENALIZED: tune_change_penalized,
    Method.FINETUNE: tune_finetune,
    Method.SIDETUNE: tune_sidetune,
    Method.MAS: tune_mas,
}


def tune(params: ParamSet, spec: ModelSpec, batch, config: TuneConfig) -> TuneResult:
    return TUNERS[config.method](params, spec, batch, config)


def tuned_logits_fn(result: TuneResult, spec: ModelSpec, base: ParamSet, config: TuneConfig) -> Callable:
    """Batch -> logits for the model a tuning run produced."""
    if config.method is Method.CHANGE_PENALIZED:
        return lambda xb: combined_forward(result.model, xb).data
    if config.method is Method.SIDETUNE:
        return lambda xb: side_forward(result.model, xb).data
    return lambda xb: forward(spec, result.params, xb).data
