"""Minimal numpy neural-network engine with hand-written backpropagation.

Images are NHWC float arrays (batch, height, width, channels). Parameters are stored as float32 by default; a
model can be cast to float64 (``Model.astype``) for gradient checking.
"""

from __future__ import annotations

import struct
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2x2", "flatten", "sigmoid", "reshape")


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``args`` is (in, out) for dense, (in_ch, out_ch) for conv2d,
    the target shape for reshape and empty otherwise."""

    kind: str
    args: tuple = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "args", tuple(int(a) for a in self.args))
        if self.kind in ("dense", "conv2d") and len(self.args) != 2:
            raise ValueError(f"{self.kind} needs (in, out), got {self.args}")

    def param_shapes(self):
        if self.kind == "dense":
            n_in, n_out = self.args
            return [(n_in, n_out), (n_out,)]
        if self.kind == "conv2d":
            c_in, c_out = self.args
            return [(3, 3, c_in, c_out), (c_out,)]
        return []

    def output_shape(self, shape):
        """Per-sample output shape, raising ShapeError on incompatible input."""
        shape = tuple(shape)
        if self.kind == "dense":
            if shape != (self.args[0],):
                raise ShapeError(f"dense expects ({self.args[0]},), got {shape}")
            return (self.args[1],)
        if self.kind == "conv2d":
            if len(shape) != 3 or shape[2] != self.args[0]:
                raise ShapeError(f"conv2d expects (H, W, {self.args[0]}), got {shape}")
            return shape[:2] + (self.args[1],)
        if self.kind == "maxpool2x2":
            if len(shape) != 3 or shape[0] % 2 or shape[1] % 2:
                raise ShapeError(f"maxpool2x2 needs (even H, even W, C), got {shape}")
            return (shape[0] // 2, shape[1] // 2, shape[2])
        if self.kind == "flatten":
            return (math.prod(shape),)
        if self.kind == "reshape":
            if math.prod(shape) != math.prod(self.args):
                raise ShapeError(f"cannot reshape {shape} to {self.args}")
            return self.args
        return shape


def dense(n_in, n_out):
    return LayerSpec("dense", (n_in, n_out))


def conv2d(c_in, c_out):
    return LayerSpec("conv2d", (c_in, c_out))


RELU = LayerSpec("relu")
MAXPOOL = LayerSpec("maxpool2x2")
FLATTEN = LayerSpec("flatten")
SIGMOID = LayerSpec("sigmoid")


def desk_architecture(num_classes=10, image_shape=(16, 16, 1), hidden=64):
    h, w, c = image_shape
    flat = 16 * (h // 4) * (w // 4)
    return [
        conv2d(c, 8), RELU, MAXPOOL,
        conv2d(8, 16), RELU, MAXPOOL,
        FLATTEN, dense(flat, hidden), RELU, dense(hidden, num_classes),
    ]


def _rng(seed):
    # counter-based generator; identical streams on every platform
    return np.random.Generator(np.random.Philox(int(seed) % 2**64))


class Model:
    """A feed-forward stack of layers with its own parameter arrays."""

    def __init__(self, layers, input_shape, params=None, dtype=np.float32):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape
        expected = [s for layer in self.layers for s in layer.param_shapes()]
        if params is None:
            params = [np.zeros(s, dtype=dtype) for s in expected]
        params = [np.asarray(p) for p in params]
        if [p.shape for p in params] != expected:
            raise ShapeError(f"parameter shapes {[p.shape for p in params]} != {expected}")
        self.params = params

    @classmethod
    def init(cls, layers, input_shape, seed, dtype=np.float32):
        """He-uniform weights, zero biases."""
        model = cls(layers, input_shape, dtype=dtype)
        rng = _rng(seed)
        for layer, (w, b) in model._param_pairs():
            fan_in = math.prod(w.shape[:3]) if layer.kind == "conv2d" else w.shape[0]
            bound = math.sqrt(6.0 / fan_in)
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            b[...] = 0.0
        return model

    @property
    def num_classes(self):
        return math.prod(self.output_shape)

    @property
    def dtype(self):
        return self.params[0].dtype if self.params else np.dtype(np.float32)

    def _param_pairs(self):
        i = 0
        for layer in self.layers:
            n = len(layer.param_shapes())
            if n:
                yield layer, self.params[i:i + n]
                i += n

    def copy(self):
        return Model(self.layers, self.input_shape, [p.copy() for p in self.params])

    def __deepcopy__(self, memo):
        return self.copy()

    def astype(self, dtype):
        return Model(self.layers, self.input_shape, [p.astype(dtype) for p in self.params])

    def num_parameters(self):
        return sum(p.size for p in self.params)

    def __repr__(self):
        kinds = ", ".join(l.kind + (str(l.args) if l.args else "") for l in self.layers)
        return f"Model(input={self.input_shape}, layers=[{kinds}])"


# -- layer kernels ---------------------------------------------------------

def _conv_forward(x, w, b):
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # n, h, w, c, 3, 3
    cols = win.reshape(n * h * wd, c * 9)
    wmat = w.transpose(2, 0, 1, 3).reshape(c * 9, -1)
    out = cols @ wmat + b
    return out.reshape(n, h, wd, -1), cols


def _conv_backward(dout, cols, x_shape, w, need_dx=True):
    n, h, wd, c = x_shape
    c_out = w.shape[3]
    d2 = dout.reshape(n * h * wd, c_out)
    dw = (cols.T @ d2).reshape(c, 3, 3, c_out).transpose(1, 2, 0, 3)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    wmat = w.transpose(2, 0, 1, 3).reshape(c * 9, c_out)
    dcols = (d2 @ wmat.T).reshape(n, h, wd, c, 3, 3)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd, :] += dcols[..., i, j]
    return dxp[:, 1:-1, 1:-1, :], dw, db


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _pool_forward(x):
    quads = [x[:, i::2, j::2, :] for i, j in _POOL_OFFSETS]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    # first maximal quadrant wins ties, so exactly one input gets the gradient
    masks, taken = [], np.zeros(out.shape, dtype=bool)
    for q in quads:
        m = (q == out) & ~taken
        taken |= m
        masks.append(m)
    return out, masks


def _pool_backward(dout, masks, x_shape):
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for (i, j), m in zip(_POOL_OFFSETS, masks):
        dx[:, i::2, j::2, :] = dout * m
    return dx


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class Trace:
    """Per-layer state recorded by :func:`forward_cached` for backprop."""

    caches: list = field(default_factory=list)
    output: np.ndarray = None


def _check_input(model, x):
    x = np.asarray(x)
    if x.ndim != len(model.input_shape) + 1 or x.shape[1:] != model.input_shape:
        raise ShapeError(f"expected batch of {model.input_shape}, got {x.shape}")
    return x.astype(model.dtype, copy=False)


def forward_cached(model, x, check_finite=True):
    x = _check_input(model, x)
    trace = Trace()
    params = iter(model.params)
    for i, layer in enumerate(model.layers):
        kind = layer.kind
        if kind == "dense":
            w, b = next(params), next(params)
            cache = x
            x = x @ w + b
        elif kind == "conv2d":
            w, b = next(params), next(params)
            shape = x.shape
            x, cols = _conv_forward(x, w, b)
            cache = (cols, shape)
        elif kind == "relu":
            cache = x > 0
            x = x * cache
        elif kind == "sigmoid":
            x = _sigmoid(x)
            cache = x
        elif kind == "maxpool2x2":
            shape = x.shape
            x, masks = _pool_forward(x)
            cache = (masks, shape)
        else:  # flatten / reshape
            cache = x.shape
            x = x.reshape((x.shape[0],) + layer.output_shape(x.shape[1:]))
        if check_finite and not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activation after layer {i} ({kind})", i)
        trace.caches.append(cache)
    trace.output = x
    return trace


def forward(model, batch):
    """Logits for a batch; never mutates the model."""
    return forward_cached(model, batch, check_finite=False).output


def backward(model, trace, dout, need_input_grad=True):
    """Backpropagate ``dout`` (gradient w.r.t. the output) through a trace.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` aligned to
    ``model.params``; ``input_grad`` is None when not requested.
    """
    grads = [None] * len(model.params)
    pi = len(model.params)
    d = np.asarray(dout, dtype=trace.output.dtype)
    for pos in range(len(model.layers) - 1, -1, -1):
        layer, cache = model.layers[pos], trace.caches[pos]
        kind = layer.kind
        need_dx = pos > 0 or need_input_grad
        if kind == "dense":
            pi -= 2
            grads[pi] = cache.T @ d
            grads[pi + 1] = d.sum(axis=0)
            d = d @ model.params[pi].T if need_dx else None
        elif kind == "conv2d":
            pi -= 2
            cols, shape = cache
            d, grads[pi], grads[pi + 1] = _conv_backward(d, cols, shape, model.params[pi], need_dx)
        elif kind == "relu":
            d = d * cache
        elif kind == "sigmoid":
            d = d * cache * (1.0 - cache)
        elif kind == "maxpool2x2":
            masks, shape = cache
            d = _pool_backward(d, masks, shape)
        else:
            d = d.reshape(cache)
    return grads, d


# -- losses ----------------------------------------------------------------

def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    if len(labels) == 0:
        return 0.0
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def l1_logits(logits_a, logits_b):
    """Mean absolute elementwise difference."""
    a = np.asarray(logits_a, dtype=np.float64)
    b = np.asarray(logits_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.abs(a - b).mean())


class CrossEntropy:
    """Loss spec: cross-entropy against integer labels.

    ``reduction`` is "mean" or "sum" over the batch.
    """

    def __init__(self, labels, reduction="mean"):
        self.labels = np.asarray(labels, dtype=np.int64)
        self.reduction = reduction

    def __call__(self, logits):
        n = len(self.labels)
        if n == 0:
            return 0.0, np.zeros_like(logits)
        lp = log_softmax(logits)
        rows = np.arange(n)
        value = -lp[rows, self.labels].sum()
        d = np.exp(lp)
        d[rows, self.labels] -= 1.0
        if self.reduction == "mean":
            value, d = value / n, d / n
        return float(value), d


class L1Logits:
    """Loss spec: l1 distance to fixed target logits.

    ``per_sample="mean"`` averages over every element (matching
    :func:`l1_logits`); ``"sum"`` sums over classes and averages over samples.
    """

    def __init__(self, target, per_sample="mean"):
        self.target = np.asarray(target)
        self.per_sample = per_sample

    def __call__(self, logits):
        diff = logits - self.target.astype(logits.dtype)
        if diff.size == 0:
            return 0.0, np.zeros_like(logits)
        denom = diff.size if self.per_sample == "mean" else diff.shape[0]
        return float(np.abs(diff).sum() / denom), np.sign(diff) / denom


@dataclass
class Gradients:
    params: list
    input: np.ndarray
    loss: float


def grad(model, batch, loss, input_grad=True):
    """Gradients of ``loss(forward(model, batch))`` w.r.t. params and input."""
    trace = forward_cached(model, batch)
    value, dlogits = loss(trace.output)
    if not math.isfinite(value):
        raise NumericError("non-finite loss", len(model.layers) - 1)
    pgrads, dx = backward(model, trace, dlogits, input_grad)
    return Gradients(pgrads, dx, value)


def sgd_step(model, grads, lr):
    """In-place ``params -= lr * grads``."""
    if isinstance(grads, Gradients):
        grads = grads.params
    if lr == 0:
        return model
    for p, g in zip(model.params, grads):
        p -= (lr * g).astype(p.dtype, copy=False)
    return model


class Adam:
    """Adam with bias correction; state is keyed to one model's parameters."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, model, grads):
        if isinstance(grads, Gradients):
            grads = grads.params
        if self.m is None:
            self.m = [np.zeros_like(p) for p in model.params]
            self.v = [np.zeros_like(p) for p in model.params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(model.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)
        return model


def add_scaled(acc, grads, scale=1.0):
    """``acc + scale * grads`` over aligned gradient lists."""
    return [a + scale * g for a, g in zip(acc, grads)]


# -- data & training -------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    logits: np.ndarray = None  # optional distillation targets

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ShapeError(f"{len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        logits = None if self.logits is None else self.logits[idx]
        return Dataset(self.images[idx], self.labels[idx], logits)


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)
    diverged: bool = False


def _loss_for(kind, batch):
    if kind == "ce":
        return CrossEntropy(batch.labels)
    if kind == "l1":
        if batch.logits is None:
            raise ValueError("l1 training needs dataset logits")
        return L1Logits(batch.logits)
    raise ValueError(f"unknown loss {kind!r}")


def train(model, data, cfg, loss="ce"):
    """Minibatch SGD, in place. Deterministic for a fixed ``cfg.seed``."""
    report = TrainReport()
    rng = _rng(cfg.seed)
    n = len(data)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = data.subset(order[start:start + cfg.batch_size])
            try:
                g = grad(model, batch.images, _loss_for(loss, batch), input_grad=False)
            except NumericError:
                report.diverged = True
                return report
            sgd_step(model, g, cfg.learning_rate)
            total += g.loss * len(batch)
        report.losses.append(total / max(n, 1))
        report.accuracies.append(evaluate_accuracy(model, data) if n else float("nan"))
    return report


def predict(model, images, batch_size=512):
    images = np.asarray(images)
    if len(images) == 0:
        return np.zeros(0, dtype=np.int64)
    out = [forward(model, images[i:i + batch_size]).argmax(axis=1)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def accuracy(model, images, labels):
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise UndefinedMetricError("accuracy of an empty set is undefined")
    return float((predict(model, images) == labels).mean())


def evaluate_accuracy(model, data):
    """Fraction of argmax hits; argmax ties go to the lowest class index."""
    return accuracy(model, data.images, data.labels)


# -- checkpoints -----------------------------------------------------------

MAGIC = b"WMDL"
FORMAT_VERSION = 1
FLAG_GENERATOR = 1
_KIND_CODES = {k: i for i, k in enumerate(LAYER_KINDS)}


def dumps(model, flags=0, extra=()):
    """Serialize to the WMDL container (layout in the README)."""

    out = bytearray(MAGIC)
    out += struct.pack("<III", FORMAT_VERSION, flags, len(model.input_shape))
    out += struct.pack(f"<{len(model.input_shape)}I", *model.input_shape)
    out += struct.pack("<I", len(extra))
    out += struct.pack(f"<{len(extra)}I", *extra)
    out += struct.pack("<I", len(model.layers))
    for layer in model.layers:
        out += struct.pack("<BB", _KIND_CODES[layer.kind], len(layer.args))
        out += struct.pack(f"<{len(layer.args)}I", *layer.args)
    for p in model.params:
        out += np.ascontiguousarray(p, dtype="<f4").tobytes()
    return bytes(out)


def loads(blob):
    """Inverse of :func:`dumps`; returns ``(model, flags, extra)``."""

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise ValueError("truncated WMDL checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    if blob[:4] != MAGIC:
        raise ValueError("not a WMDL checkpoint (bad magic)")
    pos = 4
    version, flags, rank = take("<III")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported WMDL version {version}")
    input_shape = take(f"<{rank}I")
    (n_extra,) = take("<I")
    extra = take(f"<{n_extra}I")
    (n_layers,) = take("<I")
    layers = []
    for _ in range(n_layers):
        code, n_args = take("<BB")
        if code >= len(LAYER_KINDS):
            raise ValueError(f"unknown layer code {code}")
        layers.append(LayerSpec(LAYER_KINDS[code], take(f"<{n_args}I")))
    model = Model(layers, input_shape)
    for p in model.params:
        n = p.size * 4
        if pos + n > len(blob):
            raise ValueError("truncated WMDL checkpoint")
        p[...] = np.frombuffer(blob, dtype="<f4", count=p.size, offset=pos).reshape(p.shape)
        pos += n
    if pos != len(blob):
        raise ValueError("trailing bytes in WMDL checkpoint")
    return model, flags, tuple(extra)


def save(model, path, flags=0, extra=()):
    with open(path, "wb") as fh:
        fh.write(dumps(model, flags, extra))


def load(path):
    with open(path, "rb") as fh:
        model, _, _ = loads(fh.read())
    return model
