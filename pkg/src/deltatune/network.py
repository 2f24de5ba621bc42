"""Layer specs, parameter initialization and the three forward compositions."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind: str = field(default="Dense", init=False)


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    bias: bool = True
    kind: str = field(default="Conv", init=False)


@dataclass(frozen=True)
class BatchNorm:
    channels: int
    eps: float = 1e-5
    kind: str = field(default="BatchNorm", init=False)


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="ReLU", init=False)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="Flatten", init=False)


LayerSpec = Union[Dense, Conv, BatchNorm, ReLU, Flatten]
LAYER_KINDS = {cls.__name__: cls for cls in (Dense, Conv, BatchNorm, ReLU, Flatten)}
PARAM_KINDS = ("Dense", "Conv", "BatchNorm")


def layer_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**d)


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple
    num_classes: int
    # subtracted from every input value before the first layer
    input_center: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))

    def to_dict(self) -> dict:
        return {
            "layers": [asdict(l) for l in self.layers],
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "input_center": self.input_center,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        unknown = set(d) - {"layers", "input_shape", "num_classes", "input_center"}
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(tuple(layer_from_dict(l) for l in d["layers"]), tuple(d["input_shape"]), int(d["num_classes"]),
                   float(d.get("input_center", 0.0)))

    def shapes(self) -> list[tuple]:
        """Per-sample activation shape after each layer; raises if layers don't compose."""
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if not isinstance(layer, tuple(LAYER_KINDS.values())):
                raise ValueError(f"layer {i}: unsupported layer {layer!r}")
            if isinstance(layer, Dense):
                if shape != (layer.in_features,):
                    raise ValueError(f"layer {i}: Dense expects ({layer.in_features},), got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Conv):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ValueError(f"layer {i}: Conv expects {layer.in_channels} input channels, got {shape}")
                h, w = shape[1] + 2 * layer.padding, shape[2] + 2 * layer.padding
                if layer.kernel > h or layer.kernel > w:
                    raise ValueError(f"layer {i}: kernel {layer.kernel} exceeds padded input {h}x{w}")
                shape = (layer.out_channels, (h - layer.kernel) // layer.stride + 1, (w - layer.kernel) // layer.stride + 1)
            elif isinstance(layer, BatchNorm):
                if len(shape) < 1 or shape[0] != layer.channels:
                    raise ValueError(f"layer {i}: BatchNorm expects {layer.channels} channels, got {shape}")
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            out.append(shape)
        if shape != (self.num_classes,):
            raise ValueError(f"final layer emits {shape}, expected ({self.num_classes},)")
        return out

    def param_shapes(self) -> dict[str, tuple]:
        self.shapes()
        shapes: dict[str, tuple] = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                shapes[f"{i}.weight"] = (layer.in_features, layer.out_features)
                shapes[f"{i}.bias"] = (layer.out_features,)
            elif isinstance(layer, Conv):
                shapes[f"{i}.weight"] = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
                if layer.bias:
                    shapes[f"{i}.bias"] = (layer.out_channels,)
            elif isinstance(layer, BatchNorm):
                shapes[f"{i}.scale"] = (layer.channels,)
                shapes[f"{i}.shift"] = (layer.channels,)
        return shapes

    def buffer_shapes(self) -> dict[str, tuple]:
        shapes: dict[str, tuple] = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm):
                shapes[f"{i}.running_mean"] = (layer.channels,)
                shapes[f"{i}.running_var"] = (layer.channels,)
        return shapes


def default_spec(input_shape=(3, 16, 16), num_classes: int = 2) -> ModelSpec:
    """Conv-BN-ReLU-Conv(stride 2)-BN-ReLU-Flatten-Dense on inputs centered at 0.5.

    The convolutions carry no bias since the batchnorm shift that follows
    makes it redundant.
    """
    c, h, w = input_shape
    oh, ow = (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1
    return ModelSpec(
        (
            Conv(c, 8, 3, 1, 1, bias=False),
            BatchNorm(8),
            ReLU(),
            Conv(8, 16, 3, 2, 1, bias=False),
            BatchNorm(16),
            ReLU(),
            Flatten(),
            Dense(16 * oh * ow, num_classes),
        ),
        input_shape,
        num_classes,
        input_center=0.5,
    )


def build_model(spec: ModelSpec, seed: int) -> ParamSet:
    """He-normal weights, zero biases/shifts, unit scales, identity running stats."""
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for name, shape in spec.param_shapes().items():
        if name.endswith(".weight"):
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            value = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif name.endswith(".scale"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params.add(name, value)
    for name, shape in spec.buffer_shapes().items():
        params.buffers[name] = np.zeros(shape) if name.endswith("mean") else np.ones(shape)
    return params


def _as_batch(spec: ModelSpec, batch) -> Tensor:
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.shape[1:] != spec.input_shape:
        raise ad.ShapeError(f"batch shape {x.shape} does not match model input {spec.input_shape}")
    if spec.input_center:
        x = Tensor(x.data - spec.input_center)
    return x


def apply_layer(i: int, layer: LayerSpec, params: ParamSet, buffers, x: Tensor, cols=None) -> Tensor:
    if isinstance(layer, Dense):
        return ad.linear_forward(x, params[f"{i}.weight"], params[f"{i}.bias"])
    if isinstance(layer, Conv):
        return ad.conv2d_forward(x, *_conv_pair(params, i, layer), layer.stride, layer.padding, cols)
    if isinstance(layer, BatchNorm):
        return ad.batchnorm_forward(
            x, params[f"{i}.scale"], params[f"{i}.shift"],
            buffers[f"{i}.running_mean"], buffers[f"{i}.running_var"], layer.eps,
        )
    if isinstance(layer, ReLU):
        return ad.relu(x)
    if isinstance(layer, Flatten):
        return ad.reshape(x, (x.shape[0], -1))
    raise ValueError(f"unsupported layer {layer!r}")


def forward(spec: ModelSpec, params: ParamSet, batch, capture: Optional[dict] = None) -> Tensor:
    """Logits of shape (n, C).

    ``capture``, if given, receives the input of every BatchNorm layer keyed
    by layer index (used to re-estimate running statistics).
    """
    x = _as_batch(spec, batch)
    for i, layer in enumerate(spec.layers):
        if capture is not None and isinstance(layer, BatchNorm):
            capture[i] = x.data
        x = apply_layer(i, layer, params, params.buffers, x)
    return x


@dataclass
class ChangeModel:
    """Frozen base parameters plus a zero-initialized, trainable change."""

    spec: ModelSpec
    base: ParamSet
    delta: ParamSet

    @classmethod
    def from_base(cls, spec: ModelSpec, base: ParamSet) -> "ChangeModel":
        frozen = base.copy(trainable=False)
        delta = frozen.zeros_like(trainable=True)
        return cls(spec, frozen, delta)


def combined_forward(model: ChangeModel, batch) -> Tensor:
    # Dense, Conv and BatchNorm are affine in their parameters, so running
    # base and delta on the same activation and summing equals one layer with
    # summed parameters.  Nonlinearities see the sum only.
    spec = model.spec
    x = _as_batch(spec, batch)
    buffers = model.base.buffers
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            x = ad.conv2d_sum(x, _conv_pair(model.base, i, layer), _conv_pair(model.delta, i, layer),
                              layer.stride, layer.padding)
        elif isinstance(layer, BatchNorm):
            x = ad.batchnorm_sum(x, _pair(model.base, i, "scale", "shift"), _pair(model.delta, i, "scale", "shift"),
                                 buffers[f"{i}.running_mean"], buffers[f"{i}.running_var"], layer.eps)
        elif isinstance(layer, Dense):
            x = ad.add(apply_layer(i, layer, model.base, buffers, x), apply_layer(i, layer, model.delta, buffers, x))
        else:
            x = apply_layer(i, layer, model.base, buffers, x)
    return x


def _pair(params: ParamSet, i: int, a: str, b: str) -> tuple:
    return params[f"{i}.{a}"], params[f"{i}.{b}"]


def _conv_pair(params: ParamSet, i: int, layer: Conv) -> tuple:
    if layer.bias:
        return _pair(params, i, "weight", "bias")
    return params[f"{i}.weight"], np.zeros(layer.out_channels)


def materialize_sum(model: ChangeModel) -> ParamSet:
    out = ParamSet()
    for name, t in model.base.items():
        out.add(name, t.data + model.delta[name].data)
    out.buffers = type(model.base.buffers)((k, v.copy()) for k, v in model.base.buffers.items())
    return out


@dataclass
class SideTunedModel:
    """Frozen base and a trainable side copy blended at the logits."""

    spec: ModelSpec
    base: ParamSet
    side: ParamSet
    blend_logit: Tensor

    @classmethod
    def from_base(cls, spec: ModelSpec, base: ParamSet, alpha: float = 0.5) -> "SideTunedModel":
        logit = float(np.log(alpha / (1.0 - alpha)))
        return cls(spec, base.copy(trainable=False), base.copy(trainable=True), Tensor(np.array([logit]), requires_grad=True))

    @property
    def alpha(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.blend_logit.data[0])))


def side_forward(model: SideTunedModel, batch) -> Tensor:
    return ad.alpha_blend(forward(model.spec, model.base, batch), forward(model.spec, model.side, batch), model.blend_logit)


def predict(spec: ModelSpec, params: ParamSet, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Argmax class per row (ties to the lower index), evaluated in chunks."""
    out = [np.argmax(forward(spec, params, x[i:i + batch_size]).data, axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
