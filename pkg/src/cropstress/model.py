"""The lightweight hybrid classifier: inverted bottlenecks, one densely
connected block, a compressing transition, and a tiny sigmoid head.

Layer plan (default configuration, NHWC):

    stem        conv 3x3 stride 2 same -> BN -> relu6
    bottlenecks (16,1,1) (24,6,2) (24,6,1) (32,6,2)
    dense block 4 units of [BN -> relu -> conv 3x3], each concatenated in
    transition  BN -> relu -> conv 1x1 (halve channels) -> avgpool 2x2 s2
    bottleneck  (32,6,1)
    head        global average pool -> dense+relu -> dense(1)+sigmoid

A bottleneck (filters f, expansion e, stride s) expands with a 1x1 conv to
f*e channels, filters depthwise 3x3 at the given stride, then projects back
to f channels linearly; the identity skip is added only when s == 1 and the
input already has f channels. Every conv is bias-free and followed by BN.
"""

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import ParameterStore, Tensor

_DTYPES = {"f4": np.float32, "f8": np.float64}


def _scaled(n: int, scale: float) -> int:
    """Width scaling: floor, but never below one unit."""
    return max(1, math.floor(n * scale))


@dataclass
class ArchitectureConfig:
    """Everything needed to build (or count) a model, JSON-serializable."""

    input_size: tuple = (224, 224)
    stem_filters: int = 32
    bottlenecks: list = field(default_factory=lambda: [(16, 1, 1), (24, 6, 2), (24, 6, 1), (32, 6, 2)])
    dense_layers: int = 4
    growth_rate: int = 32
    transition_reduction: float = 0.5
    post_bottlenecks: list = field(default_factory=lambda: [(32, 6, 1)])
    head_units: int = 128
    scale_factor: float = 1.0

    def validate(self) -> None:
        if len(self.input_size) != 2 or any(int(v) < 1 for v in self.input_size):
            raise ConfigError(f"input_size must be two positive ints, got {self.input_size!r}")
        if self.stem_filters < 1:
            raise ConfigError("stem_filters must be >= 1")
        for entry in list(self.bottlenecks) + list(self.post_bottlenecks):
            if len(entry) != 3:
                raise ConfigError(f"bottleneck entry must be (filters, expansion, stride), got {entry!r}")
            f, e, s = entry
            if f < 1:
                raise ConfigError(f"bottleneck filters must be >= 1, got {f}")
            if e < 1:
                raise ConfigError(f"bottleneck expansion must be >= 1, got {e}")
            if s not in (1, 2):
                raise ConfigError(f"bottleneck stride must be 1 or 2, got {s}")
        if self.dense_layers < 0:
            raise ConfigError("dense_layers must be >= 0")
        if self.growth_rate < 1:
            raise ConfigError("growth_rate must be >= 1")
        if not (0.0 < self.transition_reduction <= 1.0):
            raise ConfigError(f"transition_reduction must lie in (0, 1], got {self.transition_reduction}")
        if self.head_units < 1:
            raise ConfigError("head_units must be >= 1")
        if not (self.scale_factor > 0):
            raise ConfigError(f"scale_factor must be positive, got {self.scale_factor}")

    def to_dict(self) -> dict:
        return {
            "input_size": [int(v) for v in self.input_size],
            "stem_filters": int(self.stem_filters),
            "bottlenecks": [[int(f), int(e), int(s)] for f, e, s in self.bottlenecks],
            "dense_layers": int(self.dense_layers),
            "growth_rate": int(self.growth_rate),
            "transition_reduction": float(self.transition_reduction),
            "post_bottlenecks": [[int(f), int(e), int(s)] for f, e, s in self.post_bottlenecks],
            "head_units": int(self.head_units),
            "scale_factor": float(self.scale_factor),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown architecture config keys: {sorted(extra)}")
        cfg = cls()
        if "input_size" in d:
            cfg.input_size = tuple(int(v) for v in d["input_size"])
        if "stem_filters" in d:
            cfg.stem_filters = int(d["stem_filters"])
        if "bottlenecks" in d:
            cfg.bottlenecks = [tuple(int(v) for v in entry) for entry in d["bottlenecks"]]
        if "dense_layers" in d:
            cfg.dense_layers = int(d["dense_layers"])
        if "growth_rate" in d:
            cfg.growth_rate = int(d["growth_rate"])
        if "transition_reduction" in d:
            cfg.transition_reduction = float(d["transition_reduction"])
        if "post_bottlenecks" in d:
            cfg.post_bottlenecks = [tuple(int(v) for v in entry) for entry in d["post_bottlenecks"]]
        if "head_units" in d:
            cfg.head_units = int(d["head_units"])
        if "scale_factor" in d:
            cfg.scale_factor = float(d["scale_factor"])
        return cfg


# -- initialization -----------------------------------------------------------


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Symmetric truncated normal: draws beyond 2 sigma are redrawn."""
    v = rng.standard_normal(shape)
    for _ in range(64):
        mask = np.abs(v) > 2.0
        if not mask.any():
            break
        v[mask] = rng.standard_normal(int(mask.sum()))
    return (v * std).astype(dtype)


# -- building blocks ----------------------------------------------------------


class _BatchNorm:
    def __init__(self, store: ParameterStore, name: str, channels: int, dtype):
        self.gamma = store.add(f"{name}.gamma", Tensor(np.ones(channels, dtype=dtype)))
        self.beta = store.add(f"{name}.beta", Tensor(np.zeros(channels, dtype=dtype)))
        # both buffers start at zero so the infer-time EMA debiasing is exact
        self.running_mean = store.add(f"{name}.running_mean", Tensor(np.zeros(channels, dtype=dtype)), trainable=False)
        self.running_var = store.add(f"{name}.running_var", Tensor(np.zeros(channels, dtype=dtype)), trainable=False)

    def __call__(self, x, mode, num_updates):
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            mode=mode, num_updates=num_updates,
        )


class _ConvBN:
    """Bias-free conv + BN + optional activation."""

    def __init__(self, store, name, kh, kw, cin, cout, stride, act, rng, dtype):
        fan_in = kh * kw * cin
        kern = _trunc_normal(rng, (kh, kw, cin, cout), math.sqrt(2.0 / fan_in), dtype)
        self.kernel = store.add(f"{name}.kernel", Tensor(kern))
        self.bn = _BatchNorm(store, f"{name}.bn", cout, dtype)
        self.stride = stride
        self.act = act

    def __call__(self, x, mode, num_updates):
        y = T.conv2d(x, self.kernel, stride=self.stride, padding="same")
        y = self.bn(y, mode, num_updates)
        if self.act is not None:
            y = T.activation(y, self.act)
        return y


class _DepthwiseBN:
    def __init__(self, store, name, k, channels, stride, act, rng, dtype):
        kern = _trunc_normal(rng, (k, k, channels), math.sqrt(2.0 / (k * k)), dtype)
        self.kernel = store.add(f"{name}.kernel", Tensor(kern))
        self.bn = _BatchNorm(store, f"{name}.bn", channels, dtype)
        self.stride = stride
        self.act = act

    def __call__(self, x, mode, num_updates):
        y = T.depthwise_conv2d(x, self.kernel, stride=self.stride, padding="same")
        y = self.bn(y, mode, num_updates)
        if self.act is not None:
            y = T.activation(y, self.act)
        return y


class BottleneckBlock:
    """Inverted residual: expand 1x1 -> depthwise 3x3 -> linear project 1x1.

    The expansion width is filters * expansion (the block's own output width
    scaled up, not the incoming width), and the skip connection is active
    exactly when stride == 1 and the input channel count equals ``filters``.
    """

    def __init__(self, store, name, cin, filters, expansion, stride, rng, dtype):
        width = filters * expansion
        self.expand = _ConvBN(store, f"{name}.expand", 1, 1, cin, width, 1, "relu6", rng, dtype)
        self.depthwise = _DepthwiseBN(store, f"{name}.depthwise", 3, width, stride, "relu6", rng, dtype)
        self.project = _ConvBN(store, f"{name}.project", 1, 1, width, filters, 1, None, rng, dtype)
        self.uses_skip = stride == 1 and cin == filters
        self.in_channels = cin
        self.out_channels = filters
        self.stride = stride

    def __call__(self, x, mode, num_updates):
        y = self.expand(x, mode, num_updates)
        y = self.depthwise(y, mode, num_updates)
        y = self.project(y, mode, num_updates)
        return T.add(y, x) if self.uses_skip else y


class DenseBlock:
    """Chain of [BN -> relu -> conv 3x3 (growth filters)] units, each unit's
    output concatenated onto the running feature map."""

    def __init__(self, store, name, cin, num_layers, growth, rng, dtype):
        self.units = []
        c = cin
        for i in range(num_layers):
            bn = _BatchNorm(store, f"{name}.unit{i}.bn", c, dtype)
            kern = _trunc_normal(rng, (3, 3, c, growth), math.sqrt(2.0 / (9 * c)), dtype)
            conv = store.add(f"{name}.unit{i}.conv.kernel", Tensor(kern))
            self.units.append((bn, conv))
            c += growth
        self.in_channels = cin
        self.out_channels = c

    def __call__(self, x, mode, num_updates):
        cur = x
        for bn, conv in self.units:
            y = bn(cur, mode, num_updates)
            y = T.relu(y)
            y = T.conv2d(y, conv, stride=1, padding="same")
            cur = T.concat_channels(cur, y)
        return cur


class TransitionLayer:
    """BN -> relu -> 1x1 conv down to floor(reduction * channels) -> avgpool 2x2 s2."""

    def __init__(self, store, name, cin, reduction, rng, dtype):
        cout = math.floor(reduction * cin)
        if cout < 1:
            raise ConfigError(
                f"transition_reduction {reduction} collapses {cin} channels to zero"
            )
        self.bn = _BatchNorm(store, f"{name}.bn", cin, dtype)
        kern = _trunc_normal(rng, (1, 1, cin, cout), math.sqrt(2.0 / cin), dtype)
        self.kernel = store.add(f"{name}.conv.kernel", Tensor(kern))
        self.in_channels = cin
        self.out_channels = cout

    def __call__(self, x, mode, num_updates):
        y = self.bn(x, mode, num_updates)
        y = T.relu(y)
        y = T.conv2d(y, self.kernel, stride=1, padding="same")
        return T.avg_pool_2x2(y)


class _DenseLayer:
    def __init__(self, store, name, cin, units, act, rng, dtype):
        w = _trunc_normal(rng, (cin, units), math.sqrt(2.0 / cin), dtype)
        self.weight = store.add(f"{name}.weight", Tensor(w))
        self.bias = store.add(f"{name}.bias", Tensor(np.zeros(units, dtype=dtype)))
        self.act = act

    def __call__(self, x):
        y = T.dense(x, self.weight, self.bias)
        if self.act is not None:
            y = T.activation(y, self.act)
        return y


class Model:
    """The assembled classifier. Parameters live in ``store``; ``forward``
    rebuilds the graph on every call (define-by-run)."""

    def __init__(self, config: ArchitectureConfig, seed: int, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype).type
        if self.dtype not in (np.float32, np.float64):
            raise ConfigError("model dtype must be float32 or float64")
        self.store = ParameterStore()
        self.mode = "train"
        rng = np.random.Generator(np.random.PCG64(seed))
        scale = config.scale_factor

        # One counter for all BN layers: they only ever update together, on a
        # full train-mode forward. Serialized with the rest of the store.
        self._updates = self.store.add("bn_update_count", Tensor(np.zeros(1, dtype=dtype)), trainable=False)

        c = 3
        stem_f = _scaled(config.stem_filters, scale)
        self.stem = _ConvBN(self.store, "stem", 3, 3, c, stem_f, 2, "relu6", rng, dtype)
        c = stem_f

        self.bottleneck_blocks = []
        for i, (f, e, s) in enumerate(config.bottlenecks):
            block = BottleneckBlock(self.store, f"block{i}", c, _scaled(f, scale), e, s, rng, dtype)
            self.bottleneck_blocks.append(block)
            c = block.out_channels

        self.dense_block = DenseBlock(
            self.store, "denseblock", c, config.dense_layers, _scaled(config.growth_rate, scale), rng, dtype
        )
        c = self.dense_block.out_channels

        self.transition = TransitionLayer(self.store, "transition", c, config.transition_reduction, rng, dtype)
        c = self.transition.out_channels

        self.post_blocks = []
        for i, (f, e, s) in enumerate(config.post_bottlenecks):
            block = BottleneckBlock(self.store, f"post{i}", c, _scaled(f, scale), e, s, rng, dtype)
            self.post_blocks.append(block)
            c = block.out_channels

        self.feature_channels = c
        head_u = _scaled(config.head_units, scale)
        self.head_hidden = _DenseLayer(self.store, "head.hidden", c, head_u, "relu", rng, dtype)
        self.head_out = _DenseLayer(self.store, "head.out", head_u, 1, "sigmoid", rng, dtype)

    # -- state ------------------------------------------------------------

    @property
    def num_updates(self) -> int:
        return int(self._updates.data.reshape(-1)[0])

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def infer(self) -> "Model":
        self.mode = "infer"
        return self

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def skip_flags(self) -> list:
        """Skip-connection activation per bottleneck, in forward order."""
        return [b.uses_skip for b in self.bottleneck_blocks + self.post_blocks]

    # -- forward ------------------------------------------------------------

    def forward(self, x, mode: str | None = None, trace: list | None = None) -> Tensor:
        mode = self.mode if mode is None else mode
        if mode not in ("train", "infer"):
            raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x), dtype=self.dtype)
        if x.ndim != 4 or x.shape[3] != 3:
            raise DimensionError(f"model input must be [N,H,W,3], got shape {x.shape}")
        nu = self.num_updates

        def note(name, t):
            if trace is not None:
                trace.append((name, tuple(t.shape)))

        note("input", x)
        y = self.stem(x, mode, nu)
        note("stem", y)
        for i, block in enumerate(self.bottleneck_blocks):
            y = block(y, mode, nu)
            note(f"block{i}", y)
        y = self.dense_block(y, mode, nu)
        note("denseblock", y)
        y = self.transition(y, mode, nu)
        note("transition", y)
        for i, block in enumerate(self.post_blocks):
            y = block(y, mode, nu)
            note(f"post{i}", y)
        y = T.global_avg_pool(y)
        note("global_avg_pool", y)
        y = self.head_hidden(y)
        note("head.hidden", y)
        y = self.head_out(y)
        note("head.out", y)

        if mode == "train":
            self._updates.data = self._updates.data + 1
        return y

    def __call__(self, x, mode: str | None = None) -> Tensor:
        return self.forward(x, mode=mode)


def build_model(config: ArchitectureConfig | None = None, seed: int = 0, dtype=np.float32) -> Model:
    return Model(config if config is not None else ArchitectureConfig(), seed, dtype)


# -- parameter accounting -------------------------------------------------------


def count_parameters(model: Model):
    """Walk the live store. Returns (trainable, non_trainable, rows) where
    rows are (name, shape, count, trainable) in registration order."""
    rows = []
    trainable = 0
    frozen = 0
    for name, t, tr in model.store.items():
        rows.append((name, tuple(t.shape), int(t.size), tr))
        if tr:
            trainable += t.size
        else:
            frozen += t.size
    return int(trainable), int(frozen), rows


def expected_parameter_count(config: ArchitectureConfig) -> int:
    """Closed-form trainable-parameter total for a config.

    Independent of the builder on purpose: it never touches tensors, just
    applies the counting formulas (conv k*k*cin*cout, depthwise k*k*c,
    BN 2c, dense d*u+u) to the channel walk implied by the config.
    """
    config.validate()
    s = config.scale_factor

    def sc(n):
        return max(1, math.floor(n * s))

    def bottleneck(cin, f, e):
        w = f * e
        expand = cin * w + 2 * w
        depthwise = 9 * w + 2 * w
        project = w * f + 2 * f
        return expand + depthwise + project

    total = 0
    c = 3
    stem = sc(config.stem_filters)
    total += 9 * c * stem + 2 * stem
    c = stem
    for f, e, _stride in config.bottlenecks:
        f2 = sc(f)
        total += bottleneck(c, f2, e)
        c = f2
    g = sc(config.growth_rate)
    for _ in range(config.dense_layers):
        total += 2 * c + 9 * c * g
        c += g
    ct = math.floor(config.transition_reduction * c)
    if ct < 1:
        raise ConfigError(f"transition_reduction {config.transition_reduction} collapses {c} channels to zero")
    total += 2 * c + c * ct
    c = ct
    for f, e, _stride in config.post_bottlenecks:
        f2 = sc(f)
        total += bottleneck(c, f2, e)
        c = f2
    h = sc(config.head_units)
    total += c * h + h
    total += h + 1
    return int(total)
