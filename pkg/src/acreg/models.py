"""Network definitions: the denoising autoencoder that learns the
anatomical code space, and the U-shaped deformation-field predictor.

Both are hardwired to 64x64 inputs; the autoencoder consumes 4-channel
one-hot masks and exposes a 32-dimensional linear code, the predictor
consumes a 2-channel (source, target) image stack and emits a
2-channel displacement field.
"""

from __future__ import annotations

import numpy as np

from .autodiff.tensor import DEFAULT_DTYPE, ShapeError, Tensor, reshape
from .autodiff.layers import (
    avgpool2d,
    batchnorm2d,
    concat_channels,
    conv2d,
    dropout,
    elu,
    fully_connected,
    relu,
    softmax_channel,
    upsample_nearest2,
)

IMAGE_SIZE = 64
NUM_CLASSES = 4
CODE_WIDTH = 32


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    # zero-mean uniform with variance 2/fan_in
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, rng, cin, cout, ksize=3, stride=1, padding=1, dtype=DEFAULT_DTYPE):
        self.stride = stride
        self.padding = padding
        fan_in = ksize * ksize * cin
        self.w = Tensor(_uniform_init(rng, (ksize, ksize, cin, cout), fan_in, dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def named_params(self):
        return [("w", self.w), ("b", self.b)]

    def named_buffers(self):
        return []


class BatchNorm2d:
    def __init__(self, channels, dtype=DEFAULT_DTYPE, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           mode, self.momentum, self.eps)

    def named_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def named_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class Dense:
    def __init__(self, rng, in_features, out_features, dtype=DEFAULT_DTYPE):
        self.w = Tensor(_uniform_init(rng, (in_features, out_features), in_features, dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.w, self.b)

    def named_params(self):
        return [("w", self.w), ("b", self.b)]

    def named_buffers(self):
        return []


class ConvBN:
    """Conv + BN pair, the repeating unit of both tables."""

    def __init__(self, rng, cin, cout, stride=1, dtype=DEFAULT_DTYPE):
        self.conv = Conv2d(rng, cin, cout, stride=stride, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return self.bn(self.conv(x), mode)

    def named_params(self):
        return [("conv." + n, p) for n, p in self.conv.named_params()] + [
            ("bn." + n, p) for n, p in self.bn.named_params()
        ]

    def named_buffers(self):
        return [("bn." + n, b) for n, b in self.bn.named_buffers()]


class _Network:
    """Shared bookkeeping: mode flag, parameter registry, freezing."""

    architecture = "network"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.mode = "train"
        self._layers: list[tuple[str, object]] = []

    def _register(self, name: str, layer):
        self._layers.append((name, layer))
        return layer

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def named_parameters(self):
        out = []
        for lname, layer in self._layers:
            out.extend((f"{lname}.{n}", p) for n, p in layer.named_params())
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        out = []
        for lname, layer in self._layers:
            out.extend((f"{lname}.{n}", b) for n, b in layer.named_buffers())
        return out

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


def parameter_checksum(net: _Network) -> str:
    """Order-stable digest of all parameter and buffer bytes."""
    import hashlib

    h = hashlib.sha256()
    for name, p in net.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    for name, b in net.named_buffers():
        h.update(name.encode())
        h.update(np.ascontiguousarray(b).tobytes())
    return h.hexdigest()


class Autoencoder(_Network):
    """Mask autoencoder: 64x64x4 -> 32-dim code -> 64x64x4 probabilities.

    Encoder: three conv stages (stride-2 entry conv each except the
    last stage, which is a single stride-2 conv to one channel), then a
    fully connected layer to the 32-wide linear code. Decoder: FC back
    to 64 units, reshaped to 8x8x1, three nearest-neighbor upsampling
    conv stages, and a final conv to 4-channel logits under a channel
    softmax.
    """

    architecture = "autoencoder"

    def __init__(self, seed: int, dtype=DEFAULT_DTYPE):
        super().__init__(seed)
        rng = np.random.default_rng(seed)
        r = self._register
        self.e1 = r("e1", ConvBN(rng, NUM_CLASSES, 16, stride=2, dtype=dtype))
        self.e2 = r("e2", ConvBN(rng, 16, 16, dtype=dtype))
        self.e3 = r("e3", ConvBN(rng, 16, 32, stride=2, dtype=dtype))
        self.e4 = r("e4", ConvBN(rng, 32, 32, dtype=dtype))
        self.e5 = r("e5", ConvBN(rng, 32, 1, stride=2, dtype=dtype))
        self.fc_code = r("fc_code", Dense(rng, 8 * 8, CODE_WIDTH, dtype=dtype))
        self.fc_expand = r("fc_expand", Dense(rng, CODE_WIDTH, 8 * 8, dtype=dtype))
        self.d1 = r("d1", ConvBN(rng, 1, 32, dtype=dtype))
        self.d2 = r("d2", ConvBN(rng, 32, 32, dtype=dtype))
        self.d3 = r("d3", ConvBN(rng, 32, 16, dtype=dtype))
        self.d4 = r("d4", ConvBN(rng, 16, 16, dtype=dtype))
        self.d5 = r("d5", ConvBN(rng, 16, 16, dtype=dtype))
        self.out_conv = r("out_conv", Conv2d(rng, 16, NUM_CLASSES, dtype=dtype))

    def encode(self, mask: Tensor) -> Tensor:
        if mask.ndim != 4 or mask.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, NUM_CLASSES):
            raise ShapeError(
                f"encoder expects (N, {IMAGE_SIZE}, {IMAGE_SIZE}, {NUM_CLASSES}), "
                f"got {tuple(mask.shape)}"
            )
        m = self.mode
        x = relu(self.e1(mask, m))
        x = relu(self.e2(x, m))
        x = relu(self.e3(x, m))
        x = relu(self.e4(x, m))
        x = relu(self.e5(x, m))
        return self.fc_code(x)

    def decode(self, code: Tensor) -> Tensor:
        if code.ndim != 2 or code.shape[1] != CODE_WIDTH:
            raise ShapeError(f"code must be (N, {CODE_WIDTH}), got {tuple(code.shape)}")
        m = self.mode
        x = relu(self.fc_expand(code))
        x = reshape(x, (code.shape[0], 8, 8, 1))
        x = relu(self.d1(upsample_nearest2(x), m))
        x = relu(self.d2(x, m))
        x = relu(self.d3(upsample_nearest2(x), m))
        x = relu(self.d4(x, m))
        x = relu(self.d5(upsample_nearest2(x), m))
        return softmax_channel(self.out_conv(x))

    def __call__(self, mask: Tensor) -> Tensor:
        return self.decode(self.encode(mask))


class VectorCNN(_Network):
    """U-shaped displacement predictor: 64x64x2 -> 64x64x2 field.

    Four encoder stages (16/32/64/128 channels, ELU, 2x2 average
    pooling), 50% dropout at the bottleneck and after each decoder
    stage, three decoder stages with nearest-neighbor upsampling and
    skip concatenation. Skips are taken at the tagged Conv+BN outputs
    (before their ELU); each concatenation doubles the channel count
    and the following convolution reduces it back. The final Conv+BN
    has no activation, so displacements are unbounded reals.
    """

    architecture = "vectorcnn"
    dropout_rate = 0.5

    def __init__(self, seed: int, dtype=DEFAULT_DTYPE):
        super().__init__(seed)
        rng = np.random.default_rng(seed)
        self._dropout_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        r = self._register
        self.e1a = r("e1a", ConvBN(rng, 2, 16, dtype=dtype))
        self.e1b = r("e1b", ConvBN(rng, 16, 16, dtype=dtype))
        self.e2a = r("e2a", ConvBN(rng, 16, 32, dtype=dtype))
        self.e2b = r("e2b", ConvBN(rng, 32, 32, dtype=dtype))
        self.e3a = r("e3a", ConvBN(rng, 32, 64, dtype=dtype))
        self.e3b = r("e3b", ConvBN(rng, 64, 64, dtype=dtype))
        self.b1 = r("b1", ConvBN(rng, 64, 128, dtype=dtype))
        self.b2 = r("b2", ConvBN(rng, 128, 128, dtype=dtype))
        self.d3up = r("d3up", ConvBN(rng, 128, 64, dtype=dtype))
        self.d3a = r("d3a", ConvBN(rng, 128, 64, dtype=dtype))
        self.d3b = r("d3b", ConvBN(rng, 64, 64, dtype=dtype))
        self.d2up = r("d2up", ConvBN(rng, 64, 32, dtype=dtype))
        self.d2a = r("d2a", ConvBN(rng, 64, 32, dtype=dtype))
        self.d2b = r("d2b", ConvBN(rng, 32, 32, dtype=dtype))
        self.d1up = r("d1up", ConvBN(rng, 32, 16, dtype=dtype))
        self.d1a = r("d1a", ConvBN(rng, 32, 16, dtype=dtype))
        self.d1b = r("d1b", ConvBN(rng, 16, 16, dtype=dtype))
        self.out = r("out", ConvBN(rng, 16, 2, dtype=dtype))

    def __call__(self, pair: Tensor) -> Tensor:
        if pair.ndim != 4 or pair.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 2):
            raise ShapeError(
                f"expected (N, {IMAGE_SIZE}, {IMAGE_SIZE}, 2) input, got {tuple(pair.shape)}"
            )
        m = self.mode
        rng = self._dropout_rng

        skip1 = self.e1b(elu(self.e1a(pair, m)), m)
        x = avgpool2d(elu(skip1))
        skip2 = self.e2b(elu(self.e2a(x, m)), m)
        x = avgpool2d(elu(skip2))
        skip3 = self.e3b(elu(self.e3a(x, m)), m)
        x = avgpool2d(elu(skip3))

        x = elu(self.b1(x, m))
        x = elu(self.b2(x, m))
        x = dropout(x, self.dropout_rate, m, rng)

        x = self.d3up(upsample_nearest2(x), m)
        x = elu(concat_channels(x, skip3))
        x = elu(self.d3a(x, m))
        x = elu(self.d3b(x, m))
        x = dropout(x, self.dropout_rate, m, rng)

        x = self.d2up(upsample_nearest2(x), m)
        x = elu(concat_channels(x, skip2))
        x = elu(self.d2a(x, m))
        x = elu(self.d2b(x, m))
        x = dropout(x, self.dropout_rate, m, rng)

        x = self.d1up(upsample_nearest2(x), m)
        x = elu(concat_channels(x, skip1))
        x = elu(self.d1a(x, m))
        x = elu(self.d1b(x, m))
        return self.out(x, m)


def build_autoencoder(seed: int, dtype=DEFAULT_DTYPE) -> Autoencoder:
    return Autoencoder(seed, dtype=dtype)


def build_vectorcnn(seed: int, dtype=DEFAULT_DTYPE) -> VectorCNN:
    return VectorCNN(seed, dtype=dtype)


def encode(net: Autoencoder, mask: Tensor) -> Tensor:
    return net.encode(mask)


def decode(net: Autoencoder, code: Tensor) -> Tensor:
    return net.decode(code)


def predict_field(net: VectorCNN, source: Tensor, target: Tensor) -> Tensor:
    """Predict the displacement field aligning source to target.

    Both inputs are (N, 64, 64, 1) intensity images in [0, 1]; they are
    stacked source-first into the 2-channel network input.
    """
    for name, img in (("source", source), ("target", target)):
        if img.ndim != 4 or img.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 1):
            raise ShapeError(
                f"{name} must be (N, {IMAGE_SIZE}, {IMAGE_SIZE}, 1), got {tuple(img.shape)}"
            )
        lo, hi = float(img.data.min()), float(img.data.max())
        if lo < -1e-5 or hi > 1.0 + 1e-5:
            raise ValueError(f"{name} intensities must lie in [0, 1], got [{lo}, {hi}]")
    return net(concat_channels(source, target))


def corrupt_mask(mask: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Noise model for denoising training: each border pixel (one whose
    label differs from at least one 4-neighbor) independently takes the
    label of its left neighbor with probability p. Leftmost-column
    pixels are never modified. Decisions read the original mask, so the
    sweep is order-independent.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability must be in [0, 1], got {p}")
    mask = np.asarray(mask)
    single = mask.ndim == 2
    m = mask[None] if single else mask
    if m.ndim != 3:
        raise ShapeError(f"mask must be (H, W) or (N, H, W), got {mask.shape}")

    border = np.zeros(m.shape, dtype=bool)
    border[:, 1:, :] |= m[:, 1:, :] != m[:, :-1, :]
    border[:, :-1, :] |= m[:, :-1, :] != m[:, 1:, :]
    border[:, :, 1:] |= m[:, :, 1:] != m[:, :, :-1]
    border[:, :, :-1] |= m[:, :, :-1] != m[:, :, 1:]

    flip = border & (rng.random(m.shape) < p)
    flip[:, :, 0] = False
    out = m.copy()
    left = np.empty_like(m)
    left[:, :, 1:] = m[:, :, :-1]
    left[:, :, 0] = m[:, :, 0]
    out[flip] = left[flip]
    return out[0] if single else out
