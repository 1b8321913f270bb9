"""Fully convolutional VIL regressor written directly on numpy.

Nine 3x3 valid convolutions with ReLU map a (50, 50, 3) stack of predictor
frames to a (32, 32) nowcast. Tensors are channels-last; kernels are stored
(out, in, row, col). Arithmetic follows the dtype of the weights, so the same
code serves float32 training and float64 gradient checks.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAPER_CHANNELS = (3, 128, 64, 32, 16, 16, 32, 64, 128, 1)
KERNEL = 3
# im2col buffers are built per batch chunk so one chunk stays under this many elements
_CHUNK_ELEMENTS = 1 << 23


class NumericError(ArithmeticError):
    """Training produced a non-finite loss."""


class WeightFormatError(ValueError):
    """Malformed or corrupted weight stream."""


@dataclass(frozen=True, eq=False)
class ConvLayer:
    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        k, b = np.asarray(self.kernel), np.asarray(self.bias)
        if k.ndim != 4 or k.shape[2:] != (KERNEL, KERNEL):
            raise ValueError(f"kernel must be (out, in, 3, 3), got {k.shape}")
        if b.shape != (k.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match {k.shape[0]} output channels")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "bias", b)

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    def n_params(self) -> int:
        return self.kernel.size + self.bias.size


@dataclass(frozen=True, eq=False)
class ModelWeights:
    layers: tuple[ConvLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a model needs at least one layer")
        for prev, cur in zip(layers, layers[1:]):
            if cur.in_channels != prev.out_channels:
                raise ValueError(f"channel mismatch: {prev.out_channels} -> {cur.in_channels}")
        object.__setattr__(self, "layers", layers)

    @property
    def channels(self) -> tuple[int, ...]:
        return (self.layers[0].in_channels,) + tuple(l.out_channels for l in self.layers)

    @property
    def dtype(self):
        return self.layers[0].kernel.dtype

    def arrays(self) -> list[np.ndarray]:
        """Parameters in layer order as [kernel0, bias0, kernel1, bias1, ...]."""
        out = []
        for layer in self.layers:
            out += [layer.kernel, layer.bias]
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "ModelWeights":
        arrays = list(arrays)
        return cls(tuple(ConvLayer(k, b) for k, b in zip(arrays[0::2], arrays[1::2])))

    def map(self, fn) -> "ModelWeights":
        return ModelWeights.from_arrays(fn(a) for a in self.arrays())

    def astype(self, dtype) -> "ModelWeights":
        return self.map(lambda a: a.astype(dtype))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def same_architecture(self, other: "ModelWeights") -> bool:
        return [a.shape for a in self.arrays()] == [a.shape for a in other.arrays()]

    def __eq__(self, other):
        if not isinstance(other, ModelWeights):
            return NotImplemented
        return self.same_architecture(other) and all(
            a.dtype == b.dtype and np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )

    __hash__ = None


def param_counts(weights_or_channels) -> list[int]:
    """(k*k*C_in + 1) * C_out for every layer."""
    if isinstance(weights_or_channels, ModelWeights):
        ch = weights_or_channels.channels
    else:
        ch = tuple(weights_or_channels)
    return [(KERNEL * KERNEL * cin + 1) * cout for cin, cout in zip(ch, ch[1:])]


def init_model(seed: int = 0, channels=PAPER_CHANNELS, dtype=np.float32) -> ModelWeights:
    """Glorot-uniform kernels (fan = channels * 9) and zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for cin, cout in zip(channels, channels[1:]):
        limit = np.sqrt(6.0 / (KERNEL * KERNEL * (cin + cout)))
        kernel = rng.uniform(-limit, limit, size=(cout, cin, KERNEL, KERNEL)).astype(dtype)
        layers.append(ConvLayer(kernel, np.zeros(cout, dtype=dtype)))
    return ModelWeights(tuple(layers))


def _chunks(n: int, per_item: int):
    step = max(1, _CHUNK_ELEMENTS // max(per_item, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def _cols(x: np.ndarray) -> np.ndarray:
    # (n, H, W, C) -> (n * H' * W', 9 * C) ordered (row, col, c); see _kernel_matrix
    n, h, w, c = x.shape
    ho, wo = h - KERNEL + 1, w - KERNEL + 1
    out = np.empty((n, ho, wo, KERNEL * KERNEL * c), dtype=x.dtype)
    for r in range(KERNEL):
        for q in range(KERNEL):
            k = r * KERNEL + q
            out[..., k * c:(k + 1) * c] = x[:, r:r + ho, q:q + wo, :]
    return out.reshape(-1, KERNEL * KERNEL * c)


def _kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    # (out, in, row, col) -> (out, row * col * in), matching _cols
    return kernel.transpose(0, 2, 3, 1).reshape(kernel.shape[0], -1)


def _conv_pre(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    n, h, w, cin = x.shape
    if cin != layer.in_channels:
        raise ValueError(f"input has {cin} channels, layer expects {layer.in_channels}")
    if h < KERNEL or w < KERNEL:
        raise ValueError(f"input {h}x{w} is smaller than the {KERNEL}x{KERNEL} kernel")
    ho, wo = h - KERNEL + 1, w - KERNEL + 1
    wm = _kernel_matrix(layer.kernel).T
    out = np.empty((n, ho, wo, layer.out_channels), dtype=np.result_type(x, layer.kernel))
    for sl in _chunks(n, ho * wo * cin * KERNEL * KERNEL):
        out[sl] = (_cols(x[sl]) @ wm).reshape(-1, ho, wo, layer.out_channels)
    out += layer.bias
    return out


def conv2d_valid(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """3x3 stride-1 valid cross-correlation plus bias, then ReLU.

    Accepts a single (H, W, C) tensor or a batch (N, H, W, C).
    """
    x = np.asarray(x)
    if x.ndim == 3:
        return conv2d_valid(x[None], layer)[0]
    if x.ndim != 4:
        raise ValueError(f"expected (H, W, C) or (N, H, W, C), got {x.shape}")
    return np.maximum(_conv_pre(x, layer), 0)


def _check_input(weights: ModelWeights, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=weights.dtype)
    if x.ndim != 4 or x.shape[3] != weights.channels[0]:
        raise ValueError(f"expected (N, H, W, {weights.channels[0]}) input, got {x.shape}")
    margin = (KERNEL - 1) * len(weights.layers)
    if x.shape[1] <= margin or x.shape[2] <= margin:
        raise ValueError(f"input {x.shape[1]}x{x.shape[2]} too small for {len(weights.layers)} valid convolutions")
    return x


def forward(weights: ModelWeights, x: np.ndarray, return_activations: bool = False):
    """Network output for (H, W, C) or (N, H, W, C) input; single-channel outputs are squeezed."""
    x = np.asarray(x)
    single = x.ndim == 3
    h = _check_input(weights, x[None] if single else x)
    acts = [h]
    for layer in weights.layers:
        h = np.maximum(_conv_pre(h, layer), 0)
        acts.append(h)
    out = h[..., 0] if h.shape[-1] == 1 else h
    if single:
        out = out[0]
    if return_activations:
        return out, acts
    return out


def predict(weights: ModelWeights, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    x = np.asarray(x)
    return np.concatenate([forward(weights, x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def _conv_backward(x: np.ndarray, dpre: np.ndarray, layer: ConvLayer, need_dx: bool):
    n, h, w, cin = x.shape
    ho, wo, cout = dpre.shape[1:]
    wm = _kernel_matrix(layer.kernel)
    dwm = np.zeros_like(wm)
    dx = np.zeros_like(x) if need_dx else None
    for sl in _chunks(n, ho * wo * cin * KERNEL * KERNEL):
        d2 = dpre[sl].reshape(-1, cout)
        dwm += d2.T @ _cols(x[sl])
        if need_dx:
            dcols = (d2 @ wm).reshape(-1, ho, wo, KERNEL * KERNEL * cin)
            for r in range(KERNEL):
                for q in range(KERNEL):
                    k = r * KERNEL + q
                    dx[sl, r:r + ho, q:q + wo, :] += dcols[..., k * cin:(k + 1) * cin]
    db = dpre.sum(axis=(0, 1, 2))
    dk = dwm.reshape(cout, KERNEL, KERNEL, cin).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dk), db, dx


def loss_and_gradients(weights: ModelWeights, x: np.ndarray, y: np.ndarray):
    """Mean squared error over batch and pixels, and its gradient w.r.t. every parameter.

    ``x`` is (N, H, W, C); ``y`` must already match the output window, (N, H', W').
    The ReLU derivative at exactly zero is taken as zero.
    """
    x = np.asarray(x)
    if len(x) == 0:
        raise ValueError("empty batch")
    out, acts = forward(weights, x, return_activations=True)
    y = np.asarray(y, dtype=weights.dtype)
    if y.shape != out.shape:
        raise ValueError(f"target shape {y.shape} does not match output {out.shape}")
    diff = out - y
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    if grad.ndim == 3:
        grad = grad[..., None]
    grads = []
    for i in range(len(weights.layers) - 1, -1, -1):
        dpre = grad * (acts[i + 1] > 0)
        dk, db, grad = _conv_backward(acts[i], dpre, weights.layers[i], need_dx=i > 0)
        grads.append((dk, db))
    grads.reverse()
    return loss, ModelWeights(tuple(ConvLayer(k, b) for k, b in grads))


@dataclass(frozen=True)
class OptimizerState:
    step_count: int
    first_moment: tuple
    second_moment: tuple
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_hat: float = 1e-8


def adam_init(weights: ModelWeights, learning_rate: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon_hat: float = 1e-8) -> OptimizerState:
    zeros = tuple(np.zeros_like(a) for a in weights.arrays())
    return OptimizerState(0, zeros, tuple(np.zeros_like(a) for a in zeros), learning_rate, beta1, beta2, epsilon_hat)


def adam_step(state: OptimizerState, weights: ModelWeights, grads: ModelWeights):
    """One bias-corrected Adam update, epsilon-hat form.

    The step size absorbs both bias corrections, lr * sqrt(1 - b2^t) / (1 - b1^t),
    and epsilon is added to the raw second-moment root.
    """
    if not weights.same_architecture(grads) or len(state.first_moment) != len(weights.arrays()):
        raise ValueError("optimizer state, weights and gradients must share shapes")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    step = float(state.learning_rate * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t))
    new_m, new_v, new_w = [], [], []
    for w, g, m, v in zip(weights.arrays(), grads.arrays(), state.first_moment, state.second_moment):
        if m.shape != w.shape:
            raise ValueError("optimizer state shape mismatch")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_m.append(m)
        new_v.append(v)
        new_w.append((w - step * m / (np.sqrt(v) + state.epsilon_hat)).astype(w.dtype))
    new_state = OptimizerState(t, tuple(new_m), tuple(new_v), state.learning_rate, b1, b2, state.epsilon_hat)
    return new_state, ModelWeights.from_arrays(new_w)


@dataclass
class TrainResult:
    weights: ModelWeights
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else float("nan")


def train(weights: ModelWeights, x: np.ndarray, y: np.ndarray, epochs: int, batch_size: int = 32,
          seed: int = 0, learning_rate: float = 1e-3) -> TrainResult:
    """Minibatch Adam on MSE with a fresh optimizer state.

    Each epoch visits a seeded permutation of the data; the last partial batch is kept.
    Epoch loss is the sample-weighted mean of the per-batch losses seen during the epoch.
    """
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    if epochs == 0:
        return TrainResult(weights)
    x = np.asarray(x, dtype=weights.dtype)
    y = np.asarray(y, dtype=weights.dtype)
    n = len(x)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(y) != n:
        raise ValueError("inputs and targets differ in length")
    rng = np.random.default_rng(seed)
    state = adam_init(weights, learning_rate)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_gradients(weights, x[idx], y[idx])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss after {state.step_count} steps")
            state, weights = adam_step(state, weights, grads)
            total += loss * len(idx)
        losses.append(total / n)
    return TrainResult(weights, losses)


_HEAD = struct.Struct("<4sHH")
_LAYER = struct.Struct("<HH")
_CRC = struct.Struct("<I")
WEIGHT_MAGIC = b"ADFL"
WEIGHT_VERSION = 1


def serialize_weights(weights: ModelWeights) -> bytes:
    """``ADFL | version | n_layers | (out, in, kernel f32, bias f32)* | crc32``.

    All integers are little-endian u16; the trailing u32 CRC covers every preceding byte.
    """
    parts = [_HEAD.pack(WEIGHT_MAGIC, WEIGHT_VERSION, len(weights.layers))]
    for layer in weights.layers:
        parts.append(_LAYER.pack(layer.out_channels, layer.in_channels))
        parts.append(np.ascontiguousarray(layer.kernel, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def deserialize_weights(data: bytes) -> ModelWeights:
    data = bytes(data)
    if len(data) < _HEAD.size + _CRC.size:
        raise WeightFormatError("truncated weight stream")
    magic, version, n_layers = _HEAD.unpack_from(data)
    if magic != WEIGHT_MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}")
    if version != WEIGHT_VERSION:
        raise WeightFormatError(f"unsupported weight format version {version}")
    body, (crc,) = data[:-_CRC.size], _CRC.unpack(data[-_CRC.size:])
    pos = _HEAD.size
    layers = []
    for i in range(n_layers):
        if pos + _LAYER.size > len(body):
            raise WeightFormatError(f"truncated weight stream in layer {i} header")
        cout, cin = _LAYER.unpack_from(body, pos)
        pos += _LAYER.size
        nk = cout * cin * KERNEL * KERNEL
        if pos + 4 * (nk + cout) > len(body):
            raise WeightFormatError(f"truncated weight stream in layer {i} payload")
        kernel = np.frombuffer(body, "<f4", nk, pos).reshape(cout, cin, KERNEL, KERNEL).astype(np.float32)
        pos += 4 * nk
        bias = np.frombuffer(body, "<f4", cout, pos).astype(np.float32)
        pos += 4 * cout
        layers.append(ConvLayer(kernel, bias))
    if pos != len(body):
        raise WeightFormatError(f"{len(body) - pos} unexpected trailing bytes")
    if zlib.crc32(body) != crc:
        raise WeightFormatError("checksum mismatch")
    try:
        return ModelWeights(tuple(layers))
    except ValueError as exc:
        raise WeightFormatError(str(exc)) from None


def save_weights(weights: ModelWeights, path) -> None:
    Path(path).write_bytes(serialize_weights(weights))


def load_weights(path) -> ModelWeights:
    return deserialize_weights(Path(path).read_bytes())
