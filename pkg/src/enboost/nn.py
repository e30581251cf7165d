"""Minimal deterministic CNN engine: conv / avg-pool / fc / softmax layers,
per-sample weighted cross-entropy training, and exact MAC accounting.

Everything runs in float64 on numpy. All randomness goes through seeded
`numpy.random.default_rng` instances, so training is bit-reproducible given
(seed, data, weights, hyperparameters).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ShapeError, TrainingDivergedError

CONV = "conv"
AVGPOOL = "avgpool"
FC = "fc"
SOFTMAX = "softmax"

_ACTIVATIONS = ("none", "relu")


@dataclass(frozen=True)
class TensorShape:
    channels: int
    height: int
    width: int

    def __post_init__(self):
        if self.channels < 1 or self.height < 1 or self.width < 1:
            raise ShapeError(f"all dimensions must be >= 1, got {self}")

    @property
    def size(self) -> int:
        return self.channels * self.height * self.width

    def to_list(self):
        return [self.channels, self.height, self.width]


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0        # conv
    kernel: int = 0         # conv
    stride: int = 1         # conv
    padding: int = 0        # conv
    window: int = 0         # avgpool
    units: int = 0          # fc
    activation: str = "none"  # conv / fc

    def __post_init__(self):
        if self.kind == CONV:
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ShapeError(f"conv kernel must be odd and >= 1, got {self.kernel}")
            if self.stride < 1:
                raise ShapeError(f"conv stride must be >= 1, got {self.stride}")
            if self.filters < 1:
                raise ShapeError(f"conv needs >= 1 filter, got {self.filters}")
        elif self.kind == AVGPOOL:
            if self.window < 1:
                raise ShapeError(f"avgpool window must be >= 1, got {self.window}")
        elif self.kind == FC:
            if self.units < 1:
                raise ShapeError(f"fc needs >= 1 unit, got {self.units}")
        elif self.kind != SOFTMAX:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.activation not in _ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == CONV:
            d.update(filters=self.filters, kernel=self.kernel, stride=self.stride,
                     padding=self.padding, activation=self.activation)
        elif self.kind == AVGPOOL:
            d["window"] = self.window
        elif self.kind == FC:
            d.update(units=self.units, activation=self.activation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def conv(filters, kernel=3, stride=1, padding=0, activation="relu") -> LayerSpec:
    return LayerSpec(kind=CONV, filters=filters, kernel=kernel, stride=stride,
                     padding=padding, activation=activation)


def avgpool(window) -> LayerSpec:
    return LayerSpec(kind=AVGPOOL, window=window)


def fc(units, activation="none") -> LayerSpec:
    return LayerSpec(kind=FC, units=units, activation=activation)


def softmax_layer() -> LayerSpec:
    return LayerSpec(kind=SOFTMAX)


def _layer_out_shape(layer: LayerSpec, shape: TensorShape) -> TensorShape:
    if layer.kind == CONV:
        h = (shape.height + 2 * layer.padding - layer.kernel) // layer.stride + 1
        w = (shape.width + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if h < 1 or w < 1:
            raise ShapeError(f"conv output collapses to {h}x{w} from {shape}")
        return TensorShape(layer.filters, h, w)
    if layer.kind == AVGPOOL:
        if shape.height % layer.window or shape.width % layer.window:
            raise ShapeError(
                f"avgpool window {layer.window} does not divide {shape.height}x{shape.width}")
        return TensorShape(shape.channels, shape.height // layer.window,
                           shape.width // layer.window)
    if layer.kind == FC:
        return TensorShape(layer.units, 1, 1)
    return shape  # softmax


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: TensorShape
    layers: tuple
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.class_count < 1:
            raise ShapeError("class_count must be >= 1")
        shapes = self.shapes()
        if not self.layers or self.layers[-1].kind != SOFTMAX:
            raise ShapeError("final layer must be softmax")
        if shapes[-1].size != self.class_count:
            raise ShapeError(
                f"final output size {shapes[-1].size} != class_count {self.class_count}")

    def shapes(self):
        """Output shape after each layer (validates propagation)."""
        out = []
        cur = self.input_shape
        for layer in self.layers:
            cur = _layer_out_shape(layer, cur)
            out.append(cur)
        return out

    def to_dict(self) -> dict:
        return {
            "input_shape": self.input_shape.to_list(),
            "class_count": self.class_count,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_shape=TensorShape(*d["input_shape"]),
            layers=tuple(LayerSpec.from_dict(ld) for ld in d["layers"]),
            class_count=d["class_count"],
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "NetworkSpec":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def count_macs(spec: NetworkSpec) -> int:
    """Multiply-accumulates per single-sample inference.

    conv: C_out*C_in*k^2*H_out*W_out; fc: in*out; pooling and softmax count 0.
    """
    total = 0
    cur = spec.input_shape
    for layer in spec.layers:
        nxt = _layer_out_shape(layer, cur)
        if layer.kind == CONV:
            total += layer.filters * cur.channels * layer.kernel ** 2 * nxt.height * nxt.width
        elif layer.kind == FC:
            total += cur.size * layer.units
        cur = nxt
    return total


def count_params(spec: NetworkSpec) -> int:
    total = 0
    for shapes in param_shapes(spec):
        if shapes is None:
            continue
        w_shape, b_shape = shapes
        total += int(np.prod(w_shape)) + int(np.prod(b_shape))
    return total


def param_shapes(spec: NetworkSpec):
    """Per-layer (W shape, b shape) tuples; None for parameterless layers."""
    out = []
    cur = spec.input_shape
    for layer in spec.layers:
        if layer.kind == CONV:
            out.append(((layer.filters, cur.channels, layer.kernel, layer.kernel),
                        (layer.filters,)))
        elif layer.kind == FC:
            out.append(((layer.units, cur.size), (layer.units,)))
        else:
            out.append(None)
        cur = _layer_out_shape(layer, cur)
    return out


def init_params(spec: NetworkSpec, rng: np.random.Generator):
    """He-style initialization for conv and fc weights; zero biases."""
    params = []
    for shapes in param_shapes(spec):
        if shapes is None:
            params.append(None)
            continue
        w_shape, b_shape = shapes
        fan_in = int(np.prod(w_shape[1:]))
        w = rng.standard_normal(w_shape) * np.sqrt(2.0 / fan_in)
        params.append((w, np.zeros(b_shape)))
    return params


def copy_params(params):
    return [None if p is None else (p[0].copy(), p[1].copy()) for p in params]


def params_checksum(params) -> str:
    h = hashlib.sha256()
    for p in params:
        if p is None:
            continue
        h.update(np.ascontiguousarray(p[0]).tobytes())
        h.update(np.ascontiguousarray(p[1]).tobytes())
    return h.hexdigest()


def flatten_params(params) -> np.ndarray:
    chunks = []
    for p in params:
        if p is None:
            continue
        chunks.append(p[0].ravel())
        chunks.append(p[1].ravel())
    return np.concatenate(chunks) if chunks else np.zeros(0)


def unflatten_params(spec: NetworkSpec, flat: np.ndarray):
    params = []
    i = 0
    for shapes in param_shapes(spec):
        if shapes is None:
            params.append(None)
            continue
        w_shape, b_shape = shapes
        wn = int(np.prod(w_shape))
        bn = int(np.prod(b_shape))
        params.append((flat[i:i + wn].reshape(w_shape).copy(),
                       flat[i + wn:i + wn + bn].reshape(b_shape).copy()))
        i += wn + bn
    if i != flat.size:
        raise ShapeError(f"parameter vector length {flat.size} != expected {i}")
    return params


@dataclass
class WeakLearner:
    spec: NetworkSpec
    params: list
    macs: int
    eval_accuracy: float
    id: str

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: int, learner_id: str) -> "WeakLearner":
        rng = np.random.default_rng(seed)
        return cls(spec=spec, params=init_params(spec, rng),
                   macs=count_macs(spec), eval_accuracy=0.0, id=learner_id)

    def copy(self) -> "WeakLearner":
        return WeakLearner(spec=self.spec, params=copy_params(self.params),
                           macs=self.macs, eval_accuracy=self.eval_accuracy, id=self.id)

    def checksum(self) -> str:
        return params_checksum(self.params)


# ---------------------------------------------------------------------------
# forward / backward


def _im2col(x, k, s, p):
    b, c, h, w = x.shape
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i:i + s * ho:s, j:j + s * wo:s]
    return cols, ho, wo


def _col2im(dcols, x_shape, k, s, p):
    b, c, h, w = x_shape
    hp, wp = h + 2 * p, w + 2 * p
    dx = np.zeros((b, c, hp, wp), dtype=dcols.dtype)
    ho, wo = dcols.shape[4], dcols.shape[5]
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, i, j]
    if p:
        dx = dx[:, :, p:-p, p:-p]
    return dx


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_cache(spec: NetworkSpec, params, x):
    """Run the network on a batch, recording what backward needs."""
    cache = []
    cur = x
    for idx, layer in enumerate(spec.layers):
        if layer.kind == CONV:
            w, b = params[idx]
            cols, ho, wo = _im2col(cur, layer.kernel, layer.stride, layer.padding)
            z = np.einsum("fckl,bcklhw->bfhw", w, cols, optimize=True)
            z += b[None, :, None, None]
            if layer.activation == "relu":
                out = np.maximum(z, 0.0)
            else:
                out = z
            cache.append(("conv", cur.shape, cols, z, layer))
            cur = out
        elif layer.kind == AVGPOOL:
            b_, c, h, w_ = cur.shape
            win = layer.window
            out = cur.reshape(b_, c, h // win, win, w_ // win, win).mean(axis=(3, 5))
            cache.append(("avgpool", cur.shape, layer))
            cur = out
        elif layer.kind == FC:
            w, b = params[idx]
            flat = cur.reshape(cur.shape[0], -1)
            z = flat @ w.T + b
            if layer.activation == "relu":
                out = np.maximum(z, 0.0)
            else:
                out = z
            cache.append(("fc", cur.shape, flat, z, layer))
            cur = out.reshape(cur.shape[0], layer.units, 1, 1)
        else:  # softmax
            flat = cur.reshape(cur.shape[0], -1)
            out = _softmax(flat)
            cache.append(("softmax", cur.shape))
            cur = out.reshape(cur.shape[0], -1, 1, 1)
    return cur.reshape(cur.shape[0], -1), cache


def _backward(spec: NetworkSpec, params, cache, dlogits):
    """Backprop from d(loss)/d(softmax logits); returns per-layer grads."""
    grads = [None] * len(spec.layers)
    dcur = dlogits
    for idx in range(len(spec.layers) - 1, -1, -1):
        entry = cache[idx]
        kind = entry[0]
        if kind == "softmax":
            in_shape = entry[1]
            dcur = dcur.reshape(in_shape)
        elif kind == "fc":
            _, in_shape, flat, z, layer = entry
            dz = dcur.reshape(z.shape)
            if layer.activation == "relu":
                dz = dz * (z > 0)
            w, _ = params[idx]
            grads[idx] = (dz.T @ flat, dz.sum(axis=0))
            dcur = (dz @ w).reshape(in_shape)
        elif kind == "avgpool":
            _, in_shape, layer = entry
            b_, c, h, w_ = in_shape
            win = layer.window
            d = dcur.reshape(b_, c, h // win, 1, w_ // win, 1) / (win * win)
            dcur = np.broadcast_to(d, (b_, c, h // win, win, w_ // win, win)).reshape(in_shape)
        else:  # conv
            _, in_shape, cols, z, layer = entry
            dz = dcur.reshape(z.shape)
            if layer.activation == "relu":
                dz = dz * (z > 0)
            w, _ = params[idx]
            dw = np.einsum("bfhw,bcklhw->fckl", dz, cols, optimize=True)
            db = dz.sum(axis=(0, 2, 3))
            grads[idx] = (dw, db)
            dcols = np.einsum("fckl,bfhw->bcklhw", w, dz, optimize=True)
            dcur = _col2im(dcols, in_shape, layer.kernel, layer.stride, layer.padding)
    return grads


def _as_batch(spec: NetworkSpec, x):
    x = np.asarray(x, dtype=np.float64)
    ish = spec.input_shape
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (ish.channels, ish.height, ish.width):
        raise ShapeError(f"input shape {x.shape} does not match {ish}")
    return x


def forward(learner: WeakLearner, x) -> np.ndarray:
    """Class-probability vector(s) for one sample or a batch."""
    single = np.asarray(x).ndim == 3
    batch = _as_batch(learner.spec, x)
    probs, _ = _forward_cache(learner.spec, learner.params, batch)
    return probs[0] if single else probs


def _one_hot(y, class_count):
    y = np.asarray(y, dtype=int)
    oh = np.zeros((y.shape[0], class_count))
    oh[np.arange(y.shape[0]), y] = 1.0
    return oh


def _loss_and_grads(spec, params, x, y_onehot, weights):
    probs, cache = _forward_cache(spec, params, x)
    n = x.shape[0]
    p_true = np.clip((probs * y_onehot).sum(axis=1), 1e-300, None)
    loss = float(np.mean(weights * -np.log(p_true)))
    dlogits = weights[:, None] * (probs - y_onehot) / n
    grads = _backward(spec, params, cache, dlogits)
    return loss, grads, probs


def _sgd_step(params, grads, lr):
    for idx, g in enumerate(grads):
        if g is None:
            continue
        w, b = params[idx]
        params[idx] = (w - lr * g[0], b - lr * g[1])


def evaluate(learner: WeakLearner, x, y) -> float:
    """Top-1 accuracy (argmax ties resolve to the lowest class index)."""
    probs = forward(learner, x)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(y)))


def train(learner: WeakLearner, dataset, sample_weights, epochs, learning_rate,
          seed, batch_size=32):
    """Weighted-loss SGD over the train split; refreshes eval_accuracy.

    Per-sample weights multiply each sample's cross-entropy before the batch
    mean. Returns (trained learner, per-epoch mean loss history).
    """
    x, y = dataset.split("train")
    weights = np.asarray(sample_weights, dtype=np.float64)
    if weights.shape[0] != x.shape[0]:
        raise ShapeError(f"{weights.shape[0]} weights for {x.shape[0]} train samples")
    if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
        raise ShapeError("sample weights must be positive and finite")
    spec = learner.spec
    params = copy_params(learner.params)
    y_onehot = _one_hot(y, spec.class_count)
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            sel = order[start:start + batch_size]
            loss, grads, _ = _loss_and_grads(spec, params, x[sel], y_onehot[sel],
                                             weights[sel])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            _sgd_step(params, grads, learning_rate)
            total += loss * len(sel)
        history.append(total / n)
    out = WeakLearner(spec=spec, params=params, macs=learner.macs,
                      eval_accuracy=0.0, id=learner.id)
    ex, ey = dataset.split("eval")
    out.eval_accuracy = evaluate(out, ex, ey)
    return out, history


def train_fc_only(learner: WeakLearner, batch_x, batch_y, sample_weights,
                  learning_rate):
    """One weighted SGD step on fully-connected layers only.

    Convolutional parameters are untouched. Returns (updated learner,
    pre-update forward probabilities for the batch): the forward pass that
    feeds the update is the same one whose outputs are returned, so callers
    can reuse it as the inference result.
    """
    x = _as_batch(learner.spec, batch_x)
    if x.shape[0] == 0:
        raise ShapeError("train_fc_only requires a non-empty batch")
    y = np.atleast_1d(np.asarray(batch_y, dtype=int))
    weights = np.asarray(sample_weights, dtype=np.float64)
    spec = learner.spec
    params = copy_params(learner.params)
    y_onehot = _one_hot(y, spec.class_count)
    _, grads, probs = _loss_and_grads(spec, params, x, y_onehot, weights)
    for idx, layer in enumerate(spec.layers):
        if layer.kind == FC and grads[idx] is not None:
            w, b = params[idx]
            params[idx] = (w - learning_rate * grads[idx][0],
                           b - learning_rate * grads[idx][1])
    out = WeakLearner(spec=spec, params=params, macs=learner.macs,
                      eval_accuracy=learner.eval_accuracy, id=learner.id)
    return out, probs


def gradient_check(spec: NetworkSpec, seed: int, step=1e-5, batch=2) -> float:
    """Max relative error between backprop and central finite differences.

    Intended for toy specs (< 10k parameters); everything in float64.
    """
    rng = np.random.default_rng(seed)
    params = init_params(spec, rng)
    ish = spec.input_shape
    x = rng.standard_normal((batch, ish.channels, ish.height, ish.width))
    y = rng.integers(0, spec.class_count, size=batch)
    weights = rng.uniform(0.5, 1.5, size=batch)
    y_onehot = _one_hot(y, spec.class_count)

    _, grads, _ = _loss_and_grads(spec, params, x, y_onehot, weights)
    analytic = flatten_params([g for g in grads])
    flat = flatten_params(params)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        for sign, slot in ((1.0, 0), (-1.0, 1)):
            probe = flat.copy()
            probe[i] += sign * step
            p = unflatten_params(spec, probe)
            loss, _, _ = _loss_and_grads(spec, p, x, y_onehot, weights)
            if slot == 0:
                hi = loss
            else:
                lo = loss
        numeric[i] = (hi - lo) / (2 * step)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
