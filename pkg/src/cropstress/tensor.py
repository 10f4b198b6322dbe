"""Reverse-mode automatic differentiation over NHWC numpy arrays.

The engine is deliberately small: a ``Tensor`` wraps a float32 or float64
numpy array, every operator builds the graph as it runs, and
``Tensor.backward()`` walks the graph once in reverse topological order.
Only the operators the classifier actually needs are implemented, and each
one checks its shape contract up front and verifies its output is finite.

Gradient conventions:

* gradients accumulate; callers reset them with an explicit ``zero_grad``
* subgradient 0 is used at the relu kink (x == 0) and at the relu6 ceiling
* ``backward`` is only defined for scalar outputs

Every analytic backward here is pinned against central finite differences
in the test suite.
"""

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    NumericError,
    UninitializedStatisticsError,
)

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99

_FLOAT_DTYPES = (np.float32, np.float64)


def _coerce(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(np.float32)


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced a non-finite value")


class Tensor:
    """A numpy array plus the bookkeeping reverse-mode autodiff needs."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = ""

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ---------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` on every requires-grad tensor reachable from here.

        Only scalar roots are accepted. Repeated calls without ``zero_grad``
        add their contributions on top of whatever is already stored.
        """
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NumericError("backward called on a non-finite value")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        flowing = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                held = flowing.get(id(parent))
                flowing[id(parent)] = pg if held is None else held + pg

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _make(data: np.ndarray, parents, backward, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _require_tensor(x, op: str) -> Tensor:
    if not isinstance(x, Tensor):
        raise ContractError(f"{op} expects Tensor inputs, got {type(x).__name__}")
    return x


# -- elementwise arithmetic ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a = _require_tensor(a, "add")
    b = _require_tensor(b, "add")
    if a.shape != b.shape:
        raise DimensionError(f"add needs identical shapes, got {a.shape} vs {b.shape}")
    data = a.data + b.data
    _ensure_finite(data, "add")

    def backward(g):
        return g, g

    return _make(data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a = _require_tensor(a, "sub")
    b = _require_tensor(b, "sub")
    if a.shape != b.shape:
        raise DimensionError(f"sub needs identical shapes, got {a.shape} vs {b.shape}")
    data = a.data - b.data
    _ensure_finite(data, "sub")

    def backward(g):
        return g, -g

    return _make(data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a = _require_tensor(a, "mul")
    b = _require_tensor(b, "mul")
    if a.shape != b.shape:
        raise DimensionError(f"mul needs identical shapes, got {a.shape} vs {b.shape}")
    data = a.data * b.data
    _ensure_finite(data, "mul")

    def backward(g):
        da = g * b.data if a.requires_grad else None
        db = g * a.data if b.requires_grad else None
        return da, db

    return _make(data, (a, b), backward, "mul")


def sum_all(x: Tensor) -> Tensor:
    x = _require_tensor(x, "sum")
    data = np.asarray(x.data.sum(), dtype=x.dtype)
    _ensure_finite(data, "sum")

    def backward(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _make(data, (x,), backward, "sum")


def mean_all(x: Tensor) -> Tensor:
    x = _require_tensor(x, "mean")
    if x.size == 0:
        raise DimensionError("mean of an empty tensor")
    data = np.asarray(x.data.mean(), dtype=x.dtype)
    _ensure_finite(data, "mean")
    inv = 1.0 / x.size

    def backward(g):
        return (np.full(x.shape, g * inv, dtype=x.dtype),)

    return _make(data, (x,), backward, "mean")


# -- activations ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    x = _require_tensor(x, "relu")
    data = np.maximum(x.data, 0)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(data, (x,), backward, "relu")


def relu6(x: Tensor) -> Tensor:
    x = _require_tensor(x, "relu6")
    data = np.clip(x.data, 0, 6)
    mask = (x.data > 0) & (x.data < 6)

    def backward(g):
        return (g * mask,)

    return _make(data, (x,), backward, "relu6")


def sigmoid(x: Tensor) -> Tensor:
    x = _require_tensor(x, "sigmoid")
    with np.errstate(over="ignore"):
        data = 1.0 / (1.0 + np.exp(-x.data))
    data = data.astype(x.dtype, copy=False)
    _ensure_finite(data, "sigmoid")

    def backward(g):
        return (g * data * (1.0 - data),)

    return _make(data, (x,), backward, "sigmoid")


_ACTIVATIONS = {"relu": relu, "relu6": relu6, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}, expected one of {sorted(_ACTIVATIONS)}")
    return fn(x)


# -- convolutions ----------------------------------------------------------------


def _axis_geometry(in_size: int, k: int, stride: int, padding: str):
    """Output extent plus (before, after) padding for one spatial axis."""
    if padding == "same":
        out = -(-in_size // stride)
        total = max((out - 1) * stride + k - in_size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if k > in_size:
            raise DimensionError(f"kernel size {k} exceeds input extent {in_size} with valid padding")
        return (in_size - k) // stride + 1, 0, 0
    raise ConfigError(f"padding must be 'same' or 'valid', got {padding!r}")


def _check_stride(stride: int) -> int:
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ConfigError(f"stride must be an integer >= 1, got {stride!r}")
    return int(stride)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation, NHWC input against a [kh, kw, cin, cout] kernel.

    No bias: every convolution in the model is followed by batch norm or is
    deliberately linear, so bias terms live only in dense layers.
    """
    x = _require_tensor(x, "conv2d")
    kernel = _require_tensor(kernel, "conv2d")
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be NHWC 4-D, got shape {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be 4-D [kh,kw,cin,cout], got shape {kernel.shape}")
    stride = _check_stride(stride)
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    ho, pt, pb = _axis_geometry(h, kh, stride, padding)
    wo, pl, pr = _axis_geometry(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    kd = kernel.data
    out = np.zeros((n, ho, wo, cout), dtype=np.result_type(x.dtype, kernel.dtype))
    for a in range(kh):
        ha = a + (ho - 1) * stride + 1
        for b in range(kw):
            wb = b + (wo - 1) * stride + 1
            patch = xp[:, a:ha:stride, b:wb:stride, :]
            out += np.tensordot(patch, kd[a, b], axes=([3], [0]))
    _ensure_finite(out, "conv2d")

    def backward(g):
        dk = np.zeros_like(kd) if kernel.requires_grad else None
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for a in range(kh):
            ha = a + (ho - 1) * stride + 1
            for b in range(kw):
                wb = b + (wo - 1) * stride + 1
                if dk is not None:
                    patch = xp[:, a:ha:stride, b:wb:stride, :]
                    dk[a, b] = np.tensordot(patch, g, axes=([0, 1, 2], [0, 1, 2]))
                if dxp is not None:
                    dxp[:, a:ha:stride, b:wb:stride, :] += np.tensordot(g, kd[a, b], axes=([3], [1]))
        dx = None
        if dxp is not None:
            dx = dxp[:, pt:pt + h, pl:pl + w, :]
        return dx, dk

    return _make(out, (x, kernel), backward, "conv2d")


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel 2-D convolution with a [kh, kw, c] kernel (multiplier 1)."""
    x = _require_tensor(x, "depthwise_conv2d")
    kernel = _require_tensor(kernel, "depthwise_conv2d")
    if x.ndim != 4:
        raise DimensionError(f"depthwise_conv2d input must be NHWC 4-D, got shape {x.shape}")
    if kernel.ndim != 3:
        raise DimensionError(f"depthwise kernel must be 3-D [kh,kw,c], got shape {kernel.shape}")
    stride = _check_stride(stride)
    n, h, w, c = x.shape
    kh, kw, kc = kernel.shape
    if kc != c:
        raise DimensionError(f"depthwise channel mismatch: input has {c}, kernel expects {kc}")
    ho, pt, pb = _axis_geometry(h, kh, stride, padding)
    wo, pl, pr = _axis_geometry(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    kd = kernel.data
    out = np.zeros((n, ho, wo, c), dtype=np.result_type(x.dtype, kernel.dtype))
    for a in range(kh):
        ha = a + (ho - 1) * stride + 1
        for b in range(kw):
            wb = b + (wo - 1) * stride + 1
            out += xp[:, a:ha:stride, b:wb:stride, :] * kd[a, b]
    _ensure_finite(out, "depthwise_conv2d")

    def backward(g):
        dk = np.zeros_like(kd) if kernel.requires_grad else None
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for a in range(kh):
            ha = a + (ho - 1) * stride + 1
            for b in range(kw):
                wb = b + (wo - 1) * stride + 1
                if dk is not None:
                    patch = xp[:, a:ha:stride, b:wb:stride, :]
                    dk[a, b] = (patch * g).sum(axis=(0, 1, 2))
                if dxp is not None:
                    dxp[:, a:ha:stride, b:wb:stride, :] += g * kd[a, b]
        dx = None
        if dxp is not None:
            dx = dxp[:, pt:pt + h, pl:pl + w, :]
        return dx, dk

    return _make(out, (x, kernel), backward, "depthwise_conv2d")


# -- batch normalization ----------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str = "train",
    eps: float = BN_EPSILON,
    momentum: float = BN_MOMENTUM,
    num_updates: int = 0,
) -> Tensor:
    """Per-channel batch normalization over the N, H, W axes.

    Train mode normalizes with biased batch statistics and folds them into
    the running buffers via ``running = momentum * running + (1 - momentum) * batch``.
    Infer mode normalizes with the running buffers debiased by
    ``1 - momentum**num_updates``: the buffers start at zero, so the raw EMA
    is shrunk toward zero early in training exactly like Adam's moment
    estimates, and the same correction undoes it. Calling infer mode before
    any train-mode batch has populated the buffers (``num_updates == 0``) is
    an error. The running buffers are plain state, not differentiated through.
    """
    x = _require_tensor(x, "batch_norm")
    for t, nm in ((gamma, "gamma"), (beta, "beta"), (running_mean, "running_mean"), (running_var, "running_var")):
        _require_tensor(t, "batch_norm")
        if t.ndim != 1:
            raise DimensionError(f"batch_norm {nm} must be 1-D, got shape {t.shape}")
    if x.ndim != 4:
        raise DimensionError(f"batch_norm input must be NHWC 4-D, got shape {x.shape}")
    c = x.shape[3]
    for t, nm in ((gamma, "gamma"), (beta, "beta"), (running_mean, "running_mean"), (running_var, "running_var")):
        if t.shape[0] != c:
            raise DimensionError(f"batch_norm {nm} has {t.shape[0]} channels, input has {c}")
    if mode not in ("train", "infer"):
        raise ConfigError(f"batch_norm mode must be 'train' or 'infer', got {mode!r}")

    xd = x.data
    if mode == "train":
        m = xd.shape[0] * xd.shape[1] * xd.shape[2]
        if m < 2:
            raise DimensionError("batch_norm train mode needs at least 2 values per channel")
        mu = xd.mean(axis=(0, 1, 2))
        var = xd.var(axis=(0, 1, 2))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu) * inv
        out = gamma.data * xhat + beta.data
        _ensure_finite(out, "batch_norm")
        running_mean.data = (momentum * running_mean.data + (1.0 - momentum) * mu).astype(running_mean.dtype, copy=False)
        running_var.data = (momentum * running_var.data + (1.0 - momentum) * var).astype(running_var.dtype, copy=False)

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 1, 2)) if gamma.requires_grad else None
            dbeta = g.sum(axis=(0, 1, 2)) if beta.requires_grad else None
            dx = None
            if x.requires_grad:
                sg = g.sum(axis=(0, 1, 2))
                sgx = (g * xhat).sum(axis=(0, 1, 2))
                dx = (gamma.data * inv / m) * (m * g - sg - xhat * sgx)
            return dx, dgamma, dbeta

        return _make(out, (x, gamma, beta), backward, "batch_norm")

    if num_updates <= 0:
        raise UninitializedStatisticsError(
            "batch_norm infer mode requested before any train-mode batch populated the running statistics"
        )
    correction = 1.0 - momentum ** num_updates
    inv_r = 1.0 / np.sqrt(running_var.data / correction + eps)
    xhat = (xd - running_mean.data / correction) * inv_r
    out = gamma.data * xhat + beta.data
    _ensure_finite(out, "batch_norm")

    def backward_infer(g):
        dgamma = (g * xhat).sum(axis=(0, 1, 2)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 1, 2)) if beta.requires_grad else None
        dx = g * (gamma.data * inv_r) if x.requires_grad else None
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), backward_infer, "batch_norm")


# -- pooling -------------------------------------------------------------------


def avg_pool_2x2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; odd trailing rows/columns are dropped."""
    x = _require_tensor(x, "avg_pool_2x2")
    if x.ndim != 4:
        raise DimensionError(f"avg_pool_2x2 input must be NHWC 4-D, got shape {x.shape}")
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise DimensionError(f"avg_pool_2x2 needs spatial dims >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    data = x.data[:, : 2 * h2, : 2 * w2, :].reshape(n, h2, 2, w2, 2, c).mean(axis=(2, 4))

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, : 2 * h2, : 2 * w2, :] = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        return (dx,)

    return _make(data, (x,), backward, "avg_pool_2x2")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes, [N,H,W,C] -> [N,C]."""
    x = _require_tensor(x, "global_avg_pool")
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool input must be NHWC 4-D, got shape {x.shape}")
    n, h, w, c = x.shape
    if h * w == 0:
        raise DimensionError("global_avg_pool over a zero-area feature map")
    data = x.data.mean(axis=(1, 2))
    inv = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to(g[:, None, None, :] * inv, x.shape).copy(),)

    return _make(data, (x,), backward, "global_avg_pool")


_POOLS = {"avg2x2s2": avg_pool_2x2, "global_avg": global_avg_pool}


def pool(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _POOLS[kind]
    except KeyError:
        raise ConfigError(f"unknown pool kind {kind!r}, expected one of {sorted(_POOLS)}")
    return fn(x)


# -- dense / concat ----------------------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine layer: [N,D] @ [D,U] + [U]."""
    x = _require_tensor(x, "dense")
    weight = _require_tensor(weight, "dense")
    bias = _require_tensor(bias, "dense")
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise DimensionError(
            f"dense expects x [N,D], weight [D,U], bias [U]; got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense inner dims differ: {x.shape[1]} vs {weight.shape[0]}")
    if weight.shape[1] != bias.shape[0]:
        raise DimensionError(f"dense bias has {bias.shape[0]} units, weight produces {weight.shape[1]}")
    data = x.data @ weight.data + bias.data
    _ensure_finite(data, "dense")

    def backward(g):
        dx = g @ weight.data.T if x.requires_grad else None
        dw = x.data.T @ g if weight.requires_grad else None
        db = g.sum(axis=0) if bias.requires_grad else None
        return dx, dw, db

    return _make(data, (x, weight, bias), backward, "dense")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NHWC tensors along the channel axis."""
    a = _require_tensor(a, "concat_channels")
    b = _require_tensor(b, "concat_channels")
    if a.ndim != 4 or b.ndim != 4:
        raise DimensionError("concat_channels expects NHWC 4-D inputs")
    if a.shape[:3] != b.shape[:3]:
        raise DimensionError(f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[3]
    data = np.concatenate((a.data, b.data), axis=3)

    def backward(g):
        da = g[..., :ca] if a.requires_grad else None
        db = g[..., ca:] if b.requires_grad else None
        return da, db

    return _make(data, (a, b), backward, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Take channels [start, stop) of an NHWC tensor."""
    x = _require_tensor(x, "slice_channels")
    if x.ndim != 4:
        raise DimensionError("slice_channels expects an NHWC 4-D input")
    c = x.shape[3]
    if not (0 <= start < stop <= c):
        raise DimensionError(f"slice_channels range [{start},{stop}) invalid for {c} channels")
    data = x.data[..., start:stop].copy()

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[..., start:stop] = g
        return (dx,)

    return _make(data, (x,), backward, "slice_channels")


# -- parameter registry --------------------------------------------------------------


class ParameterStore:
    """Ordered, named registry of model tensors.

    Insertion order is the canonical order everywhere downstream: parameter
    counting tables, optimizer state, gradient flattening for influence
    scores, and the serialized tensor directory all iterate this order.
    Batch-norm running statistics live here too, flagged non-trainable.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, t: Tensor, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise ContractError(f"parameter {name!r} registered twice")
        if not isinstance(t, Tensor):
            raise ContractError("ParameterStore.add expects a Tensor")
        t.requires_grad = bool(trainable)
        self._tensors[name] = t
        self._trainable[name] = bool(trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        for name, t in self._tensors.items():
            yield name, t, self._trainable[name]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_items(self):
        return [(name, t) for name, t, tr in self.items() if tr]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def scalar_counts(self):
        """(trainable, non_trainable) scalar totals."""
        trainable = 0
        frozen = 0
        for _, t, tr in self.items():
            if tr:
                trainable += t.size
            else:
                frozen += t.size
        return trainable, frozen
