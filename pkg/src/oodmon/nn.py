"""Feedforward/convolutional networks: file format, forward taps, gradients, training.

All layer computations follow the dtype of the input, so passing float64
inputs gives a float64 forward/backward pass (used by finite-difference
checks); float32 is the default working precision.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T

FORMAT = "oodmon-net/1"
BN_EPS = 1e-5


class NetworkFormatError(ValueError):
    pass


# ---------------------------------------------------------------- layers

@dataclass(frozen=True)
class Dense:
    w: np.ndarray  # out × in
    b: np.ndarray
    kind = "dense"

    @property
    def n_in(self) -> int:
        return self.w.shape[1]

    @property
    def n_out(self) -> int:
        return self.w.shape[0]

    def out_shape(self, shape):
        if tuple(shape) != (self.n_in,):
            raise NetworkFormatError(f"dense expects input ({self.n_in},), got {tuple(shape)}")
        return (self.n_out,)

    def forward(self, x):
        return x @ self.w.T + self.b

    def backward(self, x, y, g):
        return g @ self.w

    def param_grads(self, x, y, g):
        return {"w": g.T @ x, "b": g.sum(axis=0)}


@dataclass(frozen=True)
class Conv2d:
    w: np.ndarray  # F × C × kh × kw
    b: np.ndarray
    stride: int = 1
    padding: int = 0
    kind = "conv2d"

    def out_shape(self, shape):
        f, c, kh, kw = self.w.shape
        if len(shape) != 3 or shape[0] != c:
            raise NetworkFormatError(f"conv2d expects {c}×H×W input, got {tuple(shape)}")
        oh = T.conv_output_size(shape[1], kh, self.stride, self.padding)
        ow = T.conv_output_size(shape[2], kw, self.stride, self.padding)
        if oh <= 0 or ow <= 0 or self.stride <= 0:
            raise NetworkFormatError(f"conv2d kernel {kh}×{kw} does not fit input {tuple(shape)}")
        return (f, oh, ow)

    def forward(self, x):
        return T.conv2d(x, self.w, self.stride, self.padding, self.b)

    def backward(self, x, y, g):
        return T.conv2d_backward(x, self.w, g, self.stride, self.padding)[0]

    def param_grads(self, x, y, g):
        _, dw, db = T.conv2d_backward(x, self.w, g, self.stride, self.padding, need_weights=True)
        return {"w": dw, "b": db}


@dataclass(frozen=True)
class MaxPool2d:
    k: int = 2
    stride: int = 2
    kind = "maxpool2d"

    def out_shape(self, shape):
        if len(shape) != 3 or self.k > shape[1] or self.k > shape[2]:
            raise NetworkFormatError(f"maxpool2d({self.k}) does not fit input {tuple(shape)}")
        return (shape[0], (shape[1] - self.k) // self.stride + 1, (shape[2] - self.k) // self.stride + 1)

    def forward(self, x):
        return T.maxpool2d(x, self.k, self.stride)

    def backward(self, x, y, g):
        return T.maxpool2d_backward(x, g, self.k, self.stride)


@dataclass(frozen=True)
class BatchNorm:
    """Inference-mode batch normalization over axis 1 (channels or features)."""
    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = BN_EPS
    kind = "batchnorm"

    def out_shape(self, shape):
        if not shape or shape[0] != self.mean.shape[0]:
            raise NetworkFormatError(f"batchnorm({self.mean.shape[0]}) does not match input {tuple(shape)}")
        return tuple(shape)

    def _bcast(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def _scale(self, ndim):
        return self._bcast(self.gamma / np.sqrt(self.var + np.float32(self.eps)), ndim)

    def forward(self, x):
        return (x - self._bcast(self.mean, x.ndim)) * self._scale(x.ndim) + self._bcast(self.beta, x.ndim)

    def backward(self, x, y, g):
        return g * self._scale(x.ndim)


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def out_shape(self, shape):
        return tuple(shape)

    def forward(self, x):
        return np.maximum(x, 0)

    def backward(self, x, y, g):
        return g * (x > 0)


@dataclass(frozen=True)
class ELU:
    alpha: float = 1.0
    kind = "elu"

    def out_shape(self, shape):
        return tuple(shape)

    def forward(self, x):
        return np.where(x > 0, x, self.alpha * np.expm1(np.minimum(x, 0)))

    def backward(self, x, y, g):
        return g * np.where(x > 0, 1.0, self.alpha * np.exp(np.minimum(x, 0))).astype(g.dtype)


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, x, y, g):
        return g.reshape(x.shape)


Layer = Dense | Conv2d | MaxPool2d | BatchNorm | ReLU | ELU | Flatten


# ---------------------------------------------------------------- network

@dataclass(frozen=True)
class Network:
    layers: tuple
    class_count: int
    input_shape: tuple
    penultimate_tap: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        validate(self)

    @property
    def head(self) -> Dense:
        return self.layers[-1]

    @property
    def tap(self) -> int:
        """Index of the layer whose output is the penultimate feature (-1 = network input)."""
        if self.penultimate_tap is not None:
            return self.penultimate_tap
        return len(self.layers) - 2

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.layer_shapes()[self.tap + 1]))

    def layer_shapes(self) -> list:
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.out_shape(shapes[-1]))
        return shapes


def validate(net: Network) -> None:
    if not net.layers:
        raise NetworkFormatError("network has no layers")
    shape = net.input_shape
    for i, layer in enumerate(net.layers):
        try:
            shape = layer.out_shape(shape)
        except NetworkFormatError as exc:
            raise NetworkFormatError(f"layer {i} ({layer.kind}): {exc}") from None
        if isinstance(layer, BatchNorm) and np.any(layer.var < 0):
            raise NetworkFormatError(f"layer {i} (batchnorm): negative running variance")
    if not isinstance(net.layers[-1], Dense):
        raise NetworkFormatError("final layer must be dense")
    if net.layers[-1].n_out != net.class_count:
        raise NetworkFormatError(
            f"final dense layer has {net.layers[-1].n_out} outputs, class_count is {net.class_count}")
    tap = net.penultimate_tap
    if tap is not None and not -1 <= tap < len(net.layers) - 1:
        raise NetworkFormatError(f"penultimate_tap {tap} out of range")


# ---------------------------------------------------------------- file format

def _floats(values) -> list:
    return [float(v) for v in np.asarray(values, dtype=np.float32).ravel()]


def _arr(values, shape, what: str, index: int) -> np.ndarray:
    a = np.asarray(values, dtype=np.float32)
    expected = int(np.prod(shape))
    if a.ndim != 1 or a.size != expected:
        raise NetworkFormatError(f"layer {index}: {what} has {a.size} values, expected {expected}")
    if not np.all(np.isfinite(a)):
        raise NetworkFormatError(f"layer {index}: {what} contains non-finite values")
    return a.reshape(shape)


def layer_to_dict(layer) -> dict:
    if isinstance(layer, Dense):
        return {"kind": "dense", "in": layer.n_in, "out": layer.n_out, "w": _floats(layer.w), "b": _floats(layer.b)}
    if isinstance(layer, Conv2d):
        f, c, kh, kw = layer.w.shape
        return {"kind": "conv2d", "in_ch": c, "out_ch": f, "kernel": [kh, kw], "stride": layer.stride,
                "padding": layer.padding, "w": _floats(layer.w), "b": _floats(layer.b)}
    if isinstance(layer, MaxPool2d):
        return {"kind": "maxpool2d", "kernel": layer.k, "stride": layer.stride}
    if isinstance(layer, BatchNorm):
        return {"kind": "batchnorm", "features": int(layer.mean.shape[0]), "mean": _floats(layer.mean),
                "var": _floats(layer.var), "gamma": _floats(layer.gamma), "beta": _floats(layer.beta),
                "eps": layer.eps}
    if isinstance(layer, ELU):
        return {"kind": "elu", "alpha": layer.alpha}
    return {"kind": layer.kind}


def layer_from_dict(d: dict, index: int):
    kind = d.get("kind")
    try:
        if kind == "dense":
            n_in, n_out = int(d["in"]), int(d["out"])
            return Dense(_arr(d["w"], (n_out, n_in), "w", index), _arr(d["b"], (n_out,), "b", index))
        if kind == "conv2d":
            c, f = int(d["in_ch"]), int(d["out_ch"])
            kh, kw = (int(k) for k in d["kernel"])
            return Conv2d(_arr(d["w"], (f, c, kh, kw), "w", index), _arr(d["b"], (f,), "b", index),
                          int(d.get("stride", 1)), int(d.get("padding", 0)))
        if kind == "maxpool2d":
            k = int(d["kernel"])
            return MaxPool2d(k, int(d.get("stride", k)))
        if kind == "batchnorm":
            n = int(d["features"])
            return BatchNorm(*(_arr(d[key], (n,), key, index) for key in ("mean", "var", "gamma", "beta")),
                             eps=float(d.get("eps", BN_EPS)))
        if kind == "relu":
            return ReLU()
        if kind == "elu":
            return ELU(float(d.get("alpha", 1.0)))
        if kind == "flatten":
            return Flatten()
    except KeyError as exc:
        raise NetworkFormatError(f"layer {index} ({kind}): missing field {exc}") from None
    raise NetworkFormatError(f"layer {index}: unknown layer kind {kind!r}")


def network_to_dict(net: Network) -> dict:
    return {"format": FORMAT, "input_shape": list(net.input_shape), "class_count": net.class_count,
            "penultimate_tap": net.penultimate_tap, "layers": [layer_to_dict(l) for l in net.layers]}


def network_from_dict(d: dict) -> Network:
    if d.get("format") != FORMAT:
        raise NetworkFormatError(f"unsupported network format {d.get('format')!r}")
    layers = [layer_from_dict(ld, i) for i, ld in enumerate(d.get("layers", []))]
    return Network(layers, int(d["class_count"]), tuple(d["input_shape"]), d.get("penultimate_tap"))


def save_network(net: Network, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net)), encoding="utf-8")


def load_network(path) -> Network:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"{path}: malformed JSON ({exc})") from None
    return network_from_dict(d)


# ---------------------------------------------------------------- forward

@dataclass(frozen=True)
class ForwardTrace:
    input: np.ndarray
    logits: np.ndarray
    penultimate: np.ndarray
    activations: dict
    head_input: np.ndarray  # input of the final dense layer

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.logits))


@dataclass(frozen=True)
class BatchTrace:
    """Forward record for a batch; index it to get single-input traces."""
    inputs: np.ndarray
    logits: np.ndarray
    penultimate: np.ndarray
    activations: dict = field(repr=False)
    head_input: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.logits.shape[0]

    @property
    def predicted(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)

    def __getitem__(self, i) -> ForwardTrace:
        return ForwardTrace(self.inputs[i], self.logits[i], self.penultimate[i],
                            {k: v[i] for k, v in self.activations.items()}, self.head_input[i])

    def take(self, idx) -> "BatchTrace":
        return BatchTrace(self.inputs[idx], self.logits[idx], self.penultimate[idx],
                          {k: v[idx] for k, v in self.activations.items()}, self.head_input[idx])


def _run(net: Network, xs: np.ndarray):
    outs = [xs]
    for layer in net.layers:
        outs.append(layer.forward(outs[-1]))
    return outs


def _check_input(net: Network, xs: np.ndarray) -> np.ndarray:
    xs = np.asarray(xs)
    if xs.dtype != np.float64:
        xs = xs.astype(np.float32, copy=False)
    if xs.shape[1:] != net.input_shape:
        raise T.ShapeError(f"input shape {xs.shape[1:]} does not match network input {net.input_shape}")
    if not np.all(np.isfinite(xs)):
        raise ValueError("network input contains non-finite values")
    return xs


def forward_batch(net: Network, xs: np.ndarray, chunk: int = 1024) -> BatchTrace:
    xs = _check_input(net, xs)
    parts = []
    for start in range(0, max(len(xs), 1), chunk):
        outs = _run(net, xs[start:start + chunk])
        parts.append(outs)
    cat = [np.concatenate([p[i] for p in parts]) for i in range(len(parts[0]))]
    n = cat[0].shape[0]
    tap = net.tap
    acts = {i: cat[i + 1] for i in range(len(net.layers))}
    return BatchTrace(cat[0], cat[-1], cat[tap + 1].reshape(n, -1), acts, cat[-2].reshape(n, -1))


def forward(net: Network, x: np.ndarray) -> ForwardTrace:
    x = np.asarray(x)
    return forward_batch(net, x[None])[0]


def head_logits(net: Network, z: np.ndarray) -> np.ndarray:
    """Logits recomputed from (possibly reshaped) final-layer inputs."""
    return net.head.forward(z)


# ---------------------------------------------------------------- gradients

@dataclass(frozen=True)
class CrossEntropy:
    target: int | np.ndarray


@dataclass(frozen=True)
class NegLogMsp:
    """Loss ``-log max softmax(f / T)``, whose input gradient drives ODIN."""
    temperature: float = 1.0


def _logit_grad(logits: np.ndarray, loss) -> np.ndarray:
    n, c = logits.shape
    if isinstance(loss, CrossEntropy):
        target = np.broadcast_to(np.asarray(loss.target), (n,))
        if np.any(target < 0) or np.any(target >= c):
            raise ValueError(f"target outside [0, {c})")
        g = T.softmax(logits)
        g[np.arange(n), target] -= 1.0
        return g
    if isinstance(loss, NegLogMsp):
        t = loss.temperature
        if t <= 0:
            raise ValueError("temperature must be positive")
        g = T.softmax(logits / t)
        g[np.arange(n), np.argmax(logits, axis=1)] -= 1.0
        return g / t
    raise TypeError(f"unsupported loss {loss!r}")


def _backprop(net: Network, outs: list, g: np.ndarray, want_params: bool = False):
    grads = {}
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if want_params and hasattr(layer, "param_grads"):
            grads[i] = layer.param_grads(outs[i], outs[i + 1], g)
        g = layer.backward(outs[i], outs[i + 1], g)
    return g, grads


def grad_input_batch(net: Network, xs: np.ndarray, loss) -> np.ndarray:
    xs = _check_input(net, xs)
    outs = _run(net, xs)
    g = _logit_grad(outs[-1].astype(np.float64), loss).astype(outs[-1].dtype)
    return _backprop(net, outs, g)[0]


def grad_input(net: Network, x: np.ndarray, loss) -> np.ndarray:
    """Gradient of ``loss`` with respect to a single input ``x``."""
    return grad_input_batch(net, np.asarray(x)[None], loss)[0]


def grad_last_layer(net: Network, x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Gradient of KL(uniform ‖ softmax(f/T)) w.r.t. ``[W | b]`` of the final dense layer."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    tr = forward(net, x)
    p = T.softmax(np.asarray(tr.logits, dtype=np.float64) / temperature)
    u = (p - 1.0 / net.class_count) / temperature
    z1 = np.append(np.asarray(tr.head_input, dtype=np.float64), 1.0)
    return np.outer(u, z1)


# ---------------------------------------------------------------- construction and training

def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def mlp(n_in: int, hidden: list, class_count: int, seed: int = 0, activation: str = "relu",
        input_shape: tuple | None = None, batchnorm: bool = False) -> Network:
    """Randomly initialised fully connected network (flattening image inputs)."""
    rng = np.random.default_rng(seed)
    layers = []
    if input_shape is not None and len(input_shape) > 1:
        layers.append(Flatten())
    width = n_in
    for h in hidden:
        layers.append(Dense(_he(rng, (h, width), width), np.zeros(h, np.float32)))
        if batchnorm:
            layers.append(BatchNorm(np.zeros(h, np.float32), np.ones(h, np.float32),
                                    np.ones(h, np.float32), np.zeros(h, np.float32)))
        layers.append(ReLU() if activation == "relu" else ELU())
        width = h
    layers.append(Dense(_he(rng, (class_count, width), width), np.zeros(class_count, np.float32)))
    return Network(layers, class_count, input_shape or (n_in,))


def conv_net(input_shape: tuple, channels: list, kernel: int, dense: int, class_count: int,
             seed: int = 0) -> Network:
    """Conv-ReLU-MaxPool blocks followed by a dense hidden layer and the classifier head."""
    rng = np.random.default_rng(seed)
    layers = []
    c = input_shape[0]
    for f in channels:
        layers += [Conv2d(_he(rng, (f, c, kernel, kernel), c * kernel * kernel), np.zeros(f, np.float32),
                          1, kernel // 2),
                   ReLU(), MaxPool2d(2, 2)]
        c = f
    layers.append(Flatten())
    shape = tuple(input_shape)
    for layer in layers:
        shape = layer.out_shape(shape)
    width = shape[0]
    layers += [Dense(_he(rng, (dense, width), width), np.zeros(dense, np.float32)), ReLU(),
               Dense(_he(rng, (class_count, dense), dense), np.zeros(class_count, np.float32))]
    return Network(layers, class_count, input_shape)


def _estimate_batchnorm(net: Network, xs: np.ndarray) -> Network:
    """Set every batchnorm's running stats from one pass over ``xs``, layer by layer."""
    layers = list(net.layers)
    h = xs
    for i, layer in enumerate(layers):
        if isinstance(layer, BatchNorm):
            axes = (0,) + tuple(range(2, h.ndim))
            layer = replace(layer, mean=h.mean(axis=axes).astype(np.float32),
                            var=h.var(axis=axes).astype(np.float32))
            layers[i] = layer
        h = layer.forward(h)
    return replace(net, layers=tuple(layers))


def train_classifier(dataset, net: Network, epochs: int = 10, lr: float = 0.05, batch: int = 32,
                     seed: int = 0) -> Network:
    """Minibatch SGD on cross-entropy; batchnorm statistics are estimated once and frozen."""
    xs = np.asarray(dataset.images, dtype=np.float32)
    ys = np.asarray(dataset.labels)
    if len(xs) == 0:
        raise ValueError("cannot train on an empty dataset")
    if ys.max() >= net.class_count:
        raise ValueError(f"label {ys.max()} outside class_count {net.class_count}")
    if any(isinstance(l, BatchNorm) for l in net.layers):
        net = _estimate_batchnorm(net, xs)
    params = {i: {"w": l.w.copy(), "b": l.b.copy()} for i, l in enumerate(net.layers)
              if isinstance(l, (Dense, Conv2d))}
    rng = np.random.default_rng(seed)
    lr32 = np.float32(lr)
    for _ in range(epochs):
        order = rng.permutation(len(xs))
        for start in range(0, len(xs), batch):
            idx = order[start:start + batch]
            cur = _with_params(net, params)
            outs = _run(cur, xs[idx])
            g = _logit_grad(outs[-1].astype(np.float64), CrossEntropy(ys[idx])).astype(np.float32) / len(idx)
            _, grads = _backprop(cur, outs, g, want_params=True)
            for i, pg in grads.items():
                for key in ("w", "b"):
                    params[i][key] = (params[i][key] - lr32 * pg[key].astype(np.float32)).astype(np.float32)
    return _with_params(net, params)


def _with_params(net: Network, params: dict) -> Network:
    layers = tuple(replace(l, **params[i]) if i in params else l for i, l in enumerate(net.layers))
    return replace(net, layers=layers)
