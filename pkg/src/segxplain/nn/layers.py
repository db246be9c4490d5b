"""Layer specifications and the forward/backward network runtime.

A network is an ordered list of layer specs. Each layer consumes the previous
layer's output; ``Concat`` additionally pulls the recorded output of an
earlier layer (skip connections). Shape compatibility is checked once at
construction, so a bad architecture fails before any forward pass.
"""

from dataclasses import dataclass

import numpy as np

from segxplain.nn import ops
from segxplain.nn.tensor import Tensor, as_array
from segxplain.rng import derive_rng


class ConfigurationError(ValueError):
    """Invalid layer configuration or activation-shape mismatch."""


class TapeConsumedError(RuntimeError):
    """A tape was replayed more than once."""


# ---------------------------------------------------------------------------
# Layer specs


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class TransposedConv2D:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class MaxPool2D:
    window: int


@dataclass(frozen=True)
class BatchNorm:
    channels: int
    epsilon: float = 1e-5
    momentum: float = 0.99


@dataclass(frozen=True)
class Dropout:
    rate: float


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Activation:
    kind: str  # relu | sigmoid | softmax


@dataclass(frozen=True)
class Concat:
    """Concatenate the previous output with the output of step ``source``."""

    source: int


LAYER_TYPES = (Conv2D, TransposedConv2D, MaxPool2D, BatchNorm, Dropout,
               Dense, Activation, Concat)


class Parameter:
    """A named array owned by a network; buffers are never trainable."""

    __slots__ = ("name", "array", "trainable", "is_buffer", "group")

    def __init__(self, name, array, trainable=True, is_buffer=False, group=""):
        self.name = name
        self.array = array
        self.trainable = trainable and not is_buffer
        self.is_buffer = is_buffer
        self.group = group


def _infer_shape(spec, shape, index):
    """Activation shape (without batch dim) after applying ``spec``."""

    def fail(msg):
        raise ConfigurationError(f"layer {index} ({type(spec).__name__}): {msg}")

    if isinstance(spec, (Conv2D, TransposedConv2D)):
        if len(shape) != 3:
            fail(f"expects (C,H,W) input, got {shape}")
        c, h, w = shape
        if c != spec.in_channels:
            fail(f"expects {spec.in_channels} input channels, got {c}")
        if spec.kernel < 1 or spec.stride < 1 or spec.padding < 0:
            fail("kernel and stride must be >= 1, padding >= 0")
        if isinstance(spec, Conv2D):
            oh = ops.conv_output_size(h, spec.kernel, spec.stride, spec.padding)
            ow = ops.conv_output_size(w, spec.kernel, spec.stride, spec.padding)
            if oh < 1 or ow < 1:
                fail(f"kernel {spec.kernel} larger than padded input {shape}")
        else:
            oh = (h - 1) * spec.stride + spec.kernel - 2 * spec.padding
            ow = (w - 1) * spec.stride + spec.kernel - 2 * spec.padding
            if oh < 1 or ow < 1:
                fail("output collapses to zero size")
        return (spec.out_channels, oh, ow)
    if isinstance(spec, MaxPool2D):
        if len(shape) != 3:
            fail(f"expects (C,H,W) input, got {shape}")
        c, h, w = shape
        if spec.window < 1:
            fail("window must be >= 1")
        if h % spec.window or w % spec.window:
            fail(f"window {spec.window} does not divide spatial size {(h, w)}")
        return (c, h // spec.window, w // spec.window)
    if isinstance(spec, BatchNorm):
        channels = shape[0] if len(shape) == 3 else shape[-1]
        if channels != spec.channels:
            fail(f"expects {spec.channels} channels, got {channels}")
        if spec.epsilon <= 0:
            fail("epsilon must be positive")
        return shape
    if isinstance(spec, Dropout):
        if not 0.0 <= spec.rate < 1.0:
            fail(f"rate must be in [0,1), got {spec.rate}")
        return shape
    if isinstance(spec, Dense):
        features = int(np.prod(shape))
        if features != spec.in_features:
            fail(f"expects {spec.in_features} input features, got {features} {shape}")
        return (spec.out_features,)
    if isinstance(spec, Activation):
        if spec.kind not in ("relu", "sigmoid", "softmax"):
            fail(f"unknown activation {spec.kind!r}")
        return shape
    if isinstance(spec, Concat):
        fail("internal: Concat handled by the caller")
    fail("unknown layer spec")


class Network:
    """Bound network: specs plus parameters, validated end to end."""

    def __init__(self, layers, input_shape, precision=np.float32, seed=0,
                 groups=None):
        """``groups`` optionally maps layer index -> parameter group tag."""
        self.specs = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.dtype = np.dtype(precision)
        self.seed = seed
        groups = groups or {}
        self._params = []
        self._by_name = {}
        self.layer_shapes = []  # output shape (without batch) of every step

        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            if not isinstance(spec, LAYER_TYPES):
                raise ConfigurationError(f"layer {i}: not a layer spec: {spec!r}")
            if isinstance(spec, Concat):
                if not 0 <= spec.source < i:
                    raise ConfigurationError(
                        f"layer {i} (Concat): source {spec.source} out of range")
                src = self.layer_shapes[spec.source]
                if len(shape) != 3 or len(src) != 3 or shape[1:] != src[1:]:
                    raise ConfigurationError(
                        f"layer {i} (Concat): spatial mismatch {shape} vs {src}")
                shape = (shape[0] + src[0], shape[1], shape[2])
            else:
                shape = _infer_shape(spec, shape, i)
            self._init_params(i, spec, groups.get(i, ""))
            self.layer_shapes.append(shape)
        self.output_shape = shape

    def _add(self, name, array, trainable=True, is_buffer=False, group=""):
        p = Parameter(name, array, trainable=trainable, is_buffer=is_buffer,
                      group=group)
        self._params.append(p)
        self._by_name[name] = p
        return p

    def _init_params(self, i, spec, group):
        rng = derive_rng(self.seed, "init", i)
        if isinstance(spec, Conv2D):
            fan_in = spec.in_channels * spec.kernel * spec.kernel
            w = ops.he_uniform(rng, (spec.out_channels, spec.in_channels,
                                     spec.kernel, spec.kernel), fan_in, self.dtype)
            self._add(f"layer{i}.weight", w, group=group)
            self._add(f"layer{i}.bias",
                      np.zeros(spec.out_channels, dtype=self.dtype), group=group)
        elif isinstance(spec, TransposedConv2D):
            fan_in = spec.in_channels * spec.kernel * spec.kernel
            w = ops.he_uniform(rng, (spec.in_channels, spec.out_channels,
                                     spec.kernel, spec.kernel), fan_in, self.dtype)
            self._add(f"layer{i}.weight", w, group=group)
            self._add(f"layer{i}.bias",
                      np.zeros(spec.out_channels, dtype=self.dtype), group=group)
        elif isinstance(spec, Dense):
            w = ops.he_uniform(rng, (spec.in_features, spec.out_features),
                               spec.in_features, self.dtype)
            self._add(f"layer{i}.weight", w, group=group)
            self._add(f"layer{i}.bias",
                      np.zeros(spec.out_features, dtype=self.dtype), group=group)
        elif isinstance(spec, BatchNorm):
            c = spec.channels
            self._add(f"layer{i}.gamma", np.ones(c, dtype=self.dtype), group=group)
            self._add(f"layer{i}.beta", np.zeros(c, dtype=self.dtype), group=group)
            self._add(f"layer{i}.running_mean", np.zeros(c, dtype=self.dtype),
                      is_buffer=True, group=group)
            self._add(f"layer{i}.running_var", np.ones(c, dtype=self.dtype),
                      is_buffer=True, group=group)

    # -- parameter access ---------------------------------------------------

    def parameters(self):
        return list(self._params)

    def trainable_parameters(self):
        return [p for p in self._params if p.trainable]

    def param(self, name) -> Parameter:
        return self._by_name[name]

    def freeze(self, group):
        """Mark all parameters of ``group`` untrainable; returns their names."""
        names = []
        for p in self._params:
            if p.group == group and not p.is_buffer:
                p.trainable = False
                names.append(p.name)
        return names

    def unfreeze_all(self):
        for p in self._params:
            if not p.is_buffer:
                p.trainable = True

    def state_arrays(self):
        """Parameter/buffer arrays in declaration order."""
        return [p.array for p in self._params]

    def copy_state(self):
        return [p.array.copy() for p in self._params]

    def load_state(self, arrays):
        if len(arrays) != len(self._params):
            raise ValueError(f"expected {len(self._params)} arrays, got {len(arrays)}")
        for p, a in zip(self._params, arrays):
            if a.shape != p.array.shape:
                raise ValueError(f"{p.name}: shape {a.shape} != {p.array.shape}")
            p.array = a.astype(self.dtype, copy=True)

    def last_conv_index(self):
        idx = None
        for i, spec in enumerate(self.specs):
            if isinstance(spec, Conv2D):
                idx = i
        return idx


class Tape:
    """Execution record of one forward pass, replayable exactly once."""

    def __init__(self, network, mode, records, step_inputs, step_outputs,
                 batch_size):
        self.network = network
        self.mode = mode
        self.records = records            # per step: opaque ctx for backward
        self.step_inputs = step_inputs    # per step: shape of its direct input
        self.step_outputs = step_outputs  # per step: activation array
        self.batch_size = batch_size
        self.consumed = False
        self.step_output_grads = None     # filled by backward()


def _canonical_input(x, network):
    arr = as_array(x, dtype=network.dtype)
    want = network.input_shape
    if arr.shape == want:
        arr = arr[None]
    elif len(want) == 3 and want[0] == 1 and arr.ndim == 2 and arr.shape == want[1:]:
        arr = arr[None, None]
    elif arr.ndim == len(want) + 1 and tuple(arr.shape[1:]) == want:
        pass
    else:
        raise ConfigurationError(
            f"input shape {arr.shape} does not match network input {want}")
    return arr


def forward(network, x, mode="train", rng=None):
    """Run the network; returns (output Tensor, Tape).

    ``rng`` feeds Dropout draws in train mode (one stream per pass); eval mode
    never consumes randomness.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        rng = derive_rng(network.seed, "forward")
    arr = _canonical_input(x, network)
    n = arr.shape[0]
    outputs = []
    records = []
    step_inputs = []
    cur = arr
    for i, spec in enumerate(network.specs):
        step_inputs.append(cur.shape)
        cur, ctx = _layer_forward(network, i, spec, cur, outputs, mode, rng)
        outputs.append(cur)
        records.append(ctx)
    out = Tensor(cur)
    out.assert_finite(f"forward output ({mode} mode)")
    return out, Tape(network, mode, records, step_inputs, outputs, n)


def backward(tape, output_gradient, start_step=None):
    """Reverse pass over a tape; returns {parameter name: gradient array}.

    ``start_step`` seeds the gradient at that step's output instead of the
    network output (used to differentiate a pre-softmax class score). Frozen
    parameters and buffers are absent from the result. The tape is consumed:
    replaying it raises :class:`TapeConsumedError`.
    """
    if tape.consumed:
        raise TapeConsumedError("tape already consumed by a previous backward pass")
    tape.consumed = True
    net = tape.network
    n_steps = len(net.specs)
    if start_step is None:
        start_step = n_steps - 1
    gy = as_array(output_gradient, dtype=net.dtype)
    want = net.layer_shapes[start_step] if n_steps else net.input_shape
    if gy.shape == tuple(want):
        gy = gy[None]
    expected = (tape.batch_size,) + tuple(want)
    if gy.shape != expected:
        raise ValueError(f"output gradient shape {gy.shape} != {expected}")

    step_grads = [None] * n_steps  # gradient flowing into each step's OUTPUT
    if n_steps:
        step_grads[start_step] = gy
    grads = {}
    for i in range(start_step, -1, -1):
        g = step_grads[i]
        if g is None:
            continue
        spec = net.specs[i]
        gx = _layer_backward(net, i, spec, tape.records[i],
                             tape.step_inputs[i], g, tape.mode, grads)
        if isinstance(spec, Concat):
            gx, gskip = gx
            src = spec.source
            step_grads[src] = gskip if step_grads[src] is None \
                else step_grads[src] + gskip
        if i > 0:
            step_grads[i - 1] = gx if step_grads[i - 1] is None \
                else step_grads[i - 1] + gx
    tape.step_output_grads = step_grads
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    return grads


# ---------------------------------------------------------------------------
# Per-layer forward/backward


def _layer_forward(net, i, spec, x, outputs, mode, rng):
    if isinstance(spec, Conv2D):
        w = net.param(f"layer{i}.weight").array
        b = net.param(f"layer{i}.bias").array
        y, cols = ops.conv2d_forward(x, w, b, spec.stride, spec.padding)
        return y, cols
    if isinstance(spec, TransposedConv2D):
        w = net.param(f"layer{i}.weight").array
        b = net.param(f"layer{i}.bias").array
        y = ops.conv2d_transpose_forward(x, w, b, spec.stride, spec.padding)
        return y, x
    if isinstance(spec, MaxPool2D):
        y, idx = ops.maxpool_forward(x, spec.window)
        return y, idx
    if isinstance(spec, BatchNorm):
        return _batchnorm_forward(net, i, spec, x, mode)
    if isinstance(spec, Dropout):
        if mode == "eval" or spec.rate == 0.0:
            return x, None
        keep = (rng.random(x.shape) >= spec.rate).astype(x.dtype)
        scale = np.asarray(1.0 / (1.0 - spec.rate), dtype=x.dtype)
        return x * keep * scale, (keep, scale)
    if isinstance(spec, Dense):
        w = net.param(f"layer{i}.weight").array
        b = net.param(f"layer{i}.bias").array
        flat = x.reshape(x.shape[0], -1)
        return flat @ w + b, (flat, x.shape)
    if isinstance(spec, Activation):
        if spec.kind == "relu":
            return np.maximum(x, 0), x
        if spec.kind == "sigmoid":
            y = 1.0 / (1.0 + np.exp(-x))
            return y, y
        y = ops.softmax(x, axis=1)
        return y, y
    if isinstance(spec, Concat):
        skip = outputs[spec.source]
        return np.concatenate([x, skip], axis=1), x.shape[1]
    raise ConfigurationError(f"layer {i}: unknown spec {spec!r}")


def _batchnorm_forward(net, i, spec, x, mode):
    gamma = net.param(f"layer{i}.gamma").array
    beta = net.param(f"layer{i}.beta").array
    rmean = net.param(f"layer{i}.running_mean")
    rvar = net.param(f"layer{i}.running_var")
    conv = x.ndim == 4
    axes = (0, 2, 3) if conv else (0,)
    shape = (1, -1, 1, 1) if conv else (1, -1)
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + spec.epsilon)
        xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
        m = np.asarray(spec.momentum, dtype=x.dtype)
        rmean.array = m * rmean.array + (1 - m) * mean.astype(x.dtype)
        rvar.array = m * rvar.array + (1 - m) * var.astype(x.dtype)
        y = gamma.reshape(shape) * xhat + beta.reshape(shape)
        count = x.size // x.shape[1]
        return y, ("train", xhat, inv, count)
    inv = 1.0 / np.sqrt(rvar.array + spec.epsilon)
    xhat = (x - rmean.array.reshape(shape)) * inv.reshape(shape)
    y = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return y, ("eval", xhat, inv, None)


def _layer_backward(net, i, spec, ctx, in_shape, gy, mode, grads):
    def put(name, g):
        p = net.param(name)
        if p.trainable:
            grads[name] = g.astype(net.dtype, copy=False)

    if isinstance(spec, Conv2D):
        w = net.param(f"layer{i}.weight").array
        gx, gw, gb = ops.conv2d_backward(gy, in_shape, ctx, w,
                                         spec.stride, spec.padding)
        put(f"layer{i}.weight", gw)
        put(f"layer{i}.bias", gb)
        return gx
    if isinstance(spec, TransposedConv2D):
        w = net.param(f"layer{i}.weight").array
        gx, gw, gb = ops.conv2d_transpose_backward(gy, ctx, w,
                                                   spec.stride, spec.padding)
        put(f"layer{i}.weight", gw)
        put(f"layer{i}.bias", gb)
        return gx
    if isinstance(spec, MaxPool2D):
        return ops.maxpool_backward(gy, ctx, in_shape, spec.window)
    if isinstance(spec, BatchNorm):
        return _batchnorm_backward(net, i, spec, ctx, gy, put)
    if isinstance(spec, Dropout):
        if ctx is None:
            return gy
        keep, scale = ctx
        return gy * keep * scale
    if isinstance(spec, Dense):
        flat, x_shape = ctx
        w = net.param(f"layer{i}.weight").array
        put(f"layer{i}.weight", flat.T @ gy)
        put(f"layer{i}.bias", gy.sum(axis=0))
        return (gy @ w.T).reshape(x_shape)
    if isinstance(spec, Activation):
        if spec.kind == "relu":
            return gy * (ctx > 0)
        if spec.kind == "sigmoid":
            return gy * ctx * (1 - ctx)
        y = ctx
        dot = (gy * y).sum(axis=1, keepdims=True)
        return y * (gy - dot)
    if isinstance(spec, Concat):
        c_main = ctx
        return gy[:, :c_main], gy[:, c_main:]
    raise ConfigurationError(f"layer {i}: unknown spec {spec!r}")


def _batchnorm_backward(net, i, spec, ctx, gy, put):
    kind, xhat, inv, count = ctx
    conv = gy.ndim == 4
    axes = (0, 2, 3) if conv else (0,)
    shape = (1, -1, 1, 1) if conv else (1, -1)
    gamma = net.param(f"layer{i}.gamma").array
    put(f"layer{i}.gamma", (gy * xhat).sum(axis=axes))
    put(f"layer{i}.beta", gy.sum(axis=axes))
    gxhat = gy * gamma.reshape(shape)
    if kind == "eval":
        return gxhat * inv.reshape(shape)
    mean_g = gxhat.mean(axis=axes).reshape(shape)
    mean_gx = (gxhat * xhat).mean(axis=axes).reshape(shape)
    return inv.reshape(shape) * (gxhat - mean_g - xhat * mean_gx)
