"""Layered classifier with hand-rolled reverse-mode gradients.

The network is a fixed pipeline of layers described by ``LayerSpec`` values and
terminated by a softmax.  Forward passes run in one of three modes:

* ``train`` / ``mc-stochastic`` -- dropout layers sample a fresh inverted
  mask from the supplied generator,
* ``deterministic`` -- dropout is the identity (inverted scaling already puts
  the expectation there), so repeated calls are bitwise identical.

All math is float64.  Softmax uses max-subtraction and is fused with
cross-entropy in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, as_array

MODE_TRAIN = "train"
MODE_MC = "mc-stochastic"
MODE_DET = "deterministic"
_MODES = (MODE_TRAIN, MODE_MC, MODE_DET)

_KINDS = ("convolution", "dense", "relu", "maxpool", "flatten", "dropout", "softmax")


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the pipeline; only the fields for ``kind`` are meaningful."""

    kind: str
    out_channels: int = 0  # convolution
    kernel: int = 0        # convolution
    units: int = 0         # dense
    window: int = 0        # maxpool
    rate: float = 0.0      # dropout

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise NetworkError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dropout" and not (0.0 <= self.rate < 1.0):
            raise NetworkError(f"dropout rate {self.rate} outside [0, 1)")


def conv(out_channels: int, kernel: int = 3) -> LayerSpec:
    return LayerSpec("convolution", out_channels=out_channels, kernel=kernel)


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(window: int = 2) -> LayerSpec:
    return LayerSpec("maxpool", window=window)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def dropout(rate: float) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


def default_architecture(class_count: int) -> list[LayerSpec]:
    """Small convolutional stack with dropout placed before the final dense layer."""
    return [
        conv(8, 3), relu(), maxpool(2),
        conv(16, 3), relu(), maxpool(2),
        flatten(), dense(64), relu(), dropout(0.5),
        dense(class_count), softmax(),
    ]


@dataclass
class ModelParameters:
    """Named weight tensors plus the per-layer dropout rates of the model."""

    tensors: dict[str, Tensor]
    dropout_rates: tuple[float, ...] = ()

    def __post_init__(self):
        for rate in self.dropout_rates:
            if not (0.0 <= rate < 1.0):
                raise NetworkError(f"dropout rate {rate} outside [0, 1)")

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            {name: t.copy() for name, t in self.tensors.items()}, self.dropout_rates
        )


@dataclass
class LossValue:
    loss: float
    input_gradient: Tensor


# ---------------------------------------------------------------------------
# layer implementations


class _Conv:
    def __init__(self, index, in_ch, out_ch, k):
        self.index = index
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.wname = f"convolution{index}.weight"
        self.bname = f"convolution{index}.bias"

    def out_shape(self, shape):
        c, h, w = shape
        k = self.k
        if h < k or w < k:
            raise NetworkError(
                f"layer {self.index} (convolution): input {shape} smaller than kernel {k}"
            )
        return (self.out_ch, h - k + 1, w - k + 1)

    def init(self, rng):
        fan_in = self.in_ch * self.k * self.k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(self.out_ch, self.in_ch, self.k, self.k))
        b = np.zeros(self.out_ch)
        return {self.wname: Tensor(w), self.bname: Tensor(b)}

    def forward(self, x, params, rng, stochastic):
        w = params.tensors[self.wname].data
        b = params.tensors[self.bname].data
        n, cin, h, wd = x.shape
        k = self.k
        oh, ow = h - k + 1, wd - k + 1
        cols = np.empty((n, cin, k, k, oh, ow))
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = x[:, :, i:i + oh, j:j + ow]
        cols = cols.reshape(n, cin * k * k, oh * ow)
        w2 = w.reshape(self.out_ch, cin * k * k)
        y = np.matmul(w2, cols).reshape(n, self.out_ch, oh, ow) + b[None, :, None, None]
        return y, (x.shape, cols)

    def backward(self, dy, cache, params):
        x_shape, cols = cache
        n, cin, h, wd = x_shape
        k = self.k
        oh, ow = h - k + 1, wd - k + 1
        w = params.tensors[self.wname].data
        w2 = w.reshape(self.out_ch, cin * k * k)
        dy2 = dy.reshape(n, self.out_ch, oh * ow)
        dw = np.matmul(dy2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        db = dy2.sum(axis=(0, 2))
        dcols = np.matmul(w2.T, dy2).reshape(n, cin, k, k, oh, ow)
        dx = np.zeros(x_shape)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + oh, j:j + ow] += dcols[:, :, i, j]
        return dx, {self.wname: dw, self.bname: db}


class _Dense:
    def __init__(self, index, in_features, units):
        self.index = index
        self.in_features, self.units = in_features, units
        self.wname = f"dense{index}.weight"
        self.bname = f"dense{index}.bias"

    def out_shape(self, shape):
        return (self.units,)

    def init(self, rng):
        w = rng.normal(0.0, np.sqrt(2.0 / self.in_features), size=(self.in_features, self.units))
        b = np.zeros(self.units)
        return {self.wname: Tensor(w), self.bname: Tensor(b)}

    def forward(self, x, params, rng, stochastic):
        w = params.tensors[self.wname].data
        b = params.tensors[self.bname].data
        return x @ w + b, x

    def backward(self, dy, cache, params):
        x = cache
        w = params.tensors[self.wname].data
        dw = x.T @ dy
        db = dy.sum(axis=0)
        return dy @ w.T, {self.wname: dw, self.bname: db}


class _Relu:
    def __init__(self, index):
        self.index = index

    def out_shape(self, shape):
        return shape

    def init(self, rng):
        return {}

    def forward(self, x, params, rng, stochastic):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache, params):
        return dy * cache, {}


class _MaxPool:
    def __init__(self, index, window):
        self.index = index
        self.window = window

    def out_shape(self, shape):
        c, h, w = shape
        if h < self.window or w < self.window:
            raise NetworkError(
                f"layer {self.index} (maxpool): input {shape} smaller than window {self.window}"
            )
        return (c, h // self.window, w // self.window)

    def init(self, rng):
        return {}

    def forward(self, x, params, rng, stochastic):
        n, c, h, w = x.shape
        s = self.window
        oh, ow = h // s, w // s
        # odd remainder rows/cols are dropped
        xc = x[:, :, : oh * s, : ow * s]
        windows = xc.reshape(n, c, oh, s, ow, s).transpose(0, 1, 2, 4, 3, 5)
        windows = windows.reshape(n, c, oh, ow, s * s)
        idx = np.argmax(windows, axis=-1)
        y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, dy, cache, params):
        x_shape, idx = cache
        n, c, h, w = x_shape
        s = self.window
        oh, ow = h // s, w // s
        dwin = np.zeros((n, c, oh, ow, s * s))
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dxc = dwin.reshape(n, c, oh, ow, s, s).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(x_shape)
        dx[:, :, : oh * s, : ow * s] = dxc.reshape(n, c, oh * s, ow * s)
        return dx, {}


class _Flatten:
    def __init__(self, index):
        self.index = index

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def init(self, rng):
        return {}

    def forward(self, x, params, rng, stochastic):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, params):
        return dy.reshape(cache), {}


class _Dropout:
    def __init__(self, index, rate):
        self.index = index
        self.rate = rate

    def out_shape(self, shape):
        return shape

    def init(self, rng):
        return {}

    def forward(self, x, params, rng, stochastic):
        if not stochastic or self.rate == 0.0:
            return x, None
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) < keep) / keep
        return x * mask, mask

    def backward(self, dy, cache, params):
        if cache is None:
            return dy, {}
        return dy * cache, {}


# ---------------------------------------------------------------------------


def _stable_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class Network:
    """Validated layer pipeline over a fixed input shape.

    ``input_shape`` is (channels, height, width) for convolutional stacks or
    (features,) for purely dense ones.  Exactly one softmax is required and it
    must be terminal; the class-probability dimension is the preceding dense
    layer's unit count.
    """

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Sequence[int]):
        specs = list(specs)
        if not specs:
            raise NetworkError("empty layer list")
        softmax_positions = [i for i, s in enumerate(specs) if s.kind == "softmax"]
        if softmax_positions != [len(specs) - 1]:
            raise NetworkError("exactly one terminal softmax layer is required")
        self.specs = specs
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = []
        self.dropout_rates = []
        shape = self.input_shape
        for i, spec in enumerate(specs[:-1]):
            if spec.kind == "convolution":
                if len(shape) != 3:
                    raise NetworkError(
                        f"layer {i} (convolution): expected (C, H, W) input, got {shape}"
                    )
                layer = _Conv(i, shape[0], spec.out_channels, spec.kernel)
            elif spec.kind == "maxpool":
                if len(shape) != 3:
                    raise NetworkError(f"layer {i} (maxpool): expected (C, H, W) input, got {shape}")
                layer = _MaxPool(i, spec.window)
            elif spec.kind == "dense":
                if len(shape) != 1:
                    raise NetworkError(
                        f"layer {i} (dense): expected flat input, got {shape}; add a flatten layer"
                    )
                layer = _Dense(i, shape[0], spec.units)
            elif spec.kind == "relu":
                layer = _Relu(i)
            elif spec.kind == "flatten":
                layer = _Flatten(i)
            elif spec.kind == "dropout":
                layer = _Dropout(i, spec.rate)
                self.dropout_rates.append(spec.rate)
            else:  # pragma: no cover - softmax rejected above
                raise NetworkError(f"layer {i}: unexpected kind {spec.kind}")
            shape = layer.out_shape(shape)
            self.layers.append(layer)
        if len(shape) != 1:
            raise NetworkError("network must end with a flat class dimension before softmax")
        self.class_count = shape[0]

    # -- parameters ---------------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> ModelParameters:
        tensors: dict[str, Tensor] = {}
        for layer in self.layers:
            tensors.update(layer.init(rng))
        return ModelParameters(tensors, tuple(self.dropout_rates))

    def _check_params(self, params: ModelParameters):
        for layer in self.layers:
            for name in getattr(layer, "wname", None), getattr(layer, "bname", None):
                if name is not None and name not in params.tensors:
                    raise NetworkError(f"missing parameter {name}")

    # -- forward / backward -------------------------------------------------

    def _promote(self, x):
        arr = as_array(x)
        if arr.shape == self.input_shape:
            return arr[None, ...], True
        if arr.shape[1:] == self.input_shape:
            return arr, False
        raise NetworkError(
            f"layer 0 ({self.specs[0].kind}): input shape {arr.shape} does not match "
            f"expected {self.input_shape} (optionally batched)"
        )

    def _run(self, x, params, mode, rng):
        if mode not in _MODES:
            raise NetworkError(f"unknown mode {mode!r}")
        stochastic = mode in (MODE_TRAIN, MODE_MC)
        if stochastic and rng is None and any(r > 0 for r in self.dropout_rates):
            raise NetworkError("stochastic mode requires an rng")
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, params, rng, stochastic)
            caches.append(cache)
        return x, caches

    def _backprop(self, dlogits, caches, params):
        grads: dict[str, np.ndarray] = {}
        dy = dlogits
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dy, layer_grads = layer.backward(dy, cache, params)
            grads.update(layer_grads)
        return dy, grads

    def forward(self, params, x, mode: str = MODE_DET, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Class probabilities for one input or a batch of inputs."""
        self._check_params(params)
        arr, single = self._promote(x)
        logits, _ = self._run(arr, params, mode, rng)
        probs = _stable_softmax(logits)
        return Tensor(probs[0] if single else probs)

    def logits(self, params, x) -> np.ndarray:
        """Deterministic pre-softmax activations (batched)."""
        self._check_params(params)
        arr, single = self._promote(x)
        out, _ = self._run(arr, params, MODE_DET, None)
        return out[0] if single else out

    def loss_and_input_gradient(self, params, x, label: int, mode: str = MODE_DET,
                                rng: Optional[np.random.Generator] = None) -> LossValue:
        """Cross-entropy loss of a single input and its gradient w.r.t. the input."""
        self._check_params(params)
        arr, single = self._promote(x)
        if arr.shape[0] != 1:
            raise NetworkError("loss_and_input_gradient expects a single input")
        label = int(label)
        if not (0 <= label < self.class_count):
            raise NetworkError(f"label {label} out of range for {self.class_count} classes")
        logits, caches = self._run(arr, params, mode, rng)
        probs = _stable_softmax(logits)
        loss = -np.log(max(probs[0, label], 1e-300))
        dlogits = probs.copy()
        dlogits[0, label] -= 1.0
        dx, _ = self._backprop(dlogits, caches, params)
        grad = dx[0] if single else dx
        return LossValue(float(loss), Tensor(grad))

    def parameter_gradients(self, params, batch, labels, mode: str = MODE_TRAIN,
                            rng: Optional[np.random.Generator] = None):
        """Mean cross-entropy over a batch and one gradient tensor per parameter."""
        self._check_params(params)
        arr = as_array(batch)
        if arr.shape == self.input_shape:
            arr = arr[None, ...]
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if arr.shape[0] == 0:
            raise NetworkError("empty batch")
        if arr.shape[0] != labels.shape[0]:
            raise NetworkError(
                f"batch size {arr.shape[0]} does not match label count {labels.shape[0]}"
            )
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise NetworkError("label out of range")
        n = arr.shape[0]
        logits, caches = self._run(arr, params, mode, rng)
        probs = _stable_softmax(logits)
        picked = np.clip(probs[np.arange(n), labels], 1e-300, None)
        loss = float(-np.log(picked).mean())
        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        _, grads = self._backprop(dlogits, caches, params)
        # parameter-free layers contribute nothing; align with params
        return loss, {name: grads[name] for name in params.tensors if name in grads}

    def logit_input_gradient(self, params, x, class_index: int) -> np.ndarray:
        """Deterministic gradient of one pre-softmax logit w.r.t. a single input."""
        self._check_params(params)
        arr, _ = self._promote(x)
        if arr.shape[0] != 1:
            raise NetworkError("logit_input_gradient expects a single input")
        logits, caches = self._run(arr, params, MODE_DET, None)
        dlogits = np.zeros_like(logits)
        dlogits[0, int(class_index)] = 1.0
        dx, _ = self._backprop(dlogits, caches, params)
        return dx[0]
