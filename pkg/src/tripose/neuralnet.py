"""Minimal tensor math with reverse-mode differentiation, plus the layers,
optimizer and parameter I/O used by the pose predictor and control policy.

Compute is 32-bit float by default (float64 is supported so tests can build
high-precision finite-difference oracles). Randomness always flows through an
explicitly seeded counter-based generator (Philox), which makes
initialization, dropout masks and action sampling reproducible.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

DTYPE = np.float32


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


# ---------------------------------------------------------------------------
# autodiff tape
# ---------------------------------------------------------------------------

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (inference / rollout collection)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else
                               (data.dtype if isinstance(data, np.ndarray) and
                                data.dtype in (np.float32, np.float64) else DTYPE))
        self.grad = None
        self.requires_grad = requires_grad and _grad_enabled
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    # -- introspection ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # -- graph construction ---------------------------------------------------
    def _make(self, data, parents, backward):
        req = _grad_enabled and any(p.requires_grad for p in parents)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = req
        out._parents = parents if req else ()
        out._backward = backward if req else None
        return out

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _wrap(other, self.dtype)
        out_data = self.data + other.data

        def backward(g, out=None):
            _accum(self, _unbroadcast(g, self.shape))
            _accum(other, _unbroadcast(g, other.shape))
        return self._make(out_data, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other, self.dtype)
        out_data = self.data - other.data

        def backward(g, out=None):
            _accum(self, _unbroadcast(g, self.shape))
            _accum(other, _unbroadcast(-g, other.shape))
        return self._make(out_data, (self, other), backward)

    def __rsub__(self, other):
        return _wrap(other, self.dtype) - self

    def __neg__(self):
        def backward(g, out=None):
            _accum(self, -g)
        return self._make(-self.data, (self,), backward)

    def __mul__(self, other):
        other = _wrap(other, self.dtype)
        out_data = self.data * other.data

        def backward(g, out=None):
            _accum(self, _unbroadcast(g * other.data, self.shape))
            _accum(other, _unbroadcast(g * self.data, other.shape))
        return self._make(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, self.dtype)
        out_data = self.data / other.data

        def backward(g, out=None):
            _accum(self, _unbroadcast(g / other.data, self.shape))
            _accum(other, _unbroadcast(-g * self.data / (other.data * other.data),
                                       other.shape))
        return self._make(out_data, (self, other), backward)

    def __rtruediv__(self, other):
        return _wrap(other, self.dtype) / self

    def __matmul__(self, other):
        assert isinstance(other, Tensor)
        a, b = self, other
        out_data = a.data @ b.data

        def backward(g, out=None):
            if a.requires_grad:
                _accum(a, g @ b.data.T if b.data.ndim == 2 else np.outer(g, b.data))
            if b.requires_grad:
                _accum(b, a.data.T @ g if a.data.ndim == 2 else np.outer(a.data, g))
        return self._make(out_data, (a, b), backward)

    # -- reductions / shape ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g, out=None):
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accum(self, np.broadcast_to(gg, self.shape).copy())
        return self._make(out_data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        out_data = self.data.reshape(*shape)
        orig = self.shape

        def backward(g, out=None):
            _accum(self, g.reshape(orig))
        return self._make(out_data, (self,), backward)

    # -- elementwise nonlinearities ---------------------------------------------
    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(g, out_data=out_data):
            _accum(self, g * (1.0 - out_data * out_data))
        return self._make(out_data, (self,), backward)

    def sigmoid(self):
        x = np.clip(self.data, -60.0, 60.0)
        out_data = 1.0 / (1.0 + np.exp(-x))

        def backward(g, out_data=out_data):
            _accum(self, g * out_data * (1.0 - out_data))
        return self._make(out_data.astype(self.data.dtype), (self,), backward)

    def relu(self):
        out_data = np.maximum(self.data, 0.0)

        def backward(g, out=None):
            _accum(self, g * (self.data > 0.0))
        return self._make(out_data, (self,), backward)

    def exp(self):
        out_data = np.exp(np.clip(self.data, -80.0, 80.0)).astype(self.data.dtype)

        def backward(g, out_data=out_data):
            _accum(self, g * out_data)
        return self._make(out_data, (self,), backward)

    def log(self):
        out_data = np.log(self.data)

        def backward(g, out=None):
            _accum(self, g / self.data)
        return self._make(out_data, (self,), backward)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(g, out_data=out_data):
            _accum(self, g * (0.5 / out_data))
        return self._make(out_data, (self,), backward)

    def sin(self):
        def backward(g, out=None):
            _accum(self, g * np.cos(self.data))
        return self._make(np.sin(self.data), (self,), backward)

    def cos(self):
        def backward(g, out=None):
            _accum(self, g * -np.sin(self.data))
        return self._make(np.cos(self.data), (self,), backward)

    def clip(self, lo, hi):
        out_data = np.clip(self.data, lo, hi)

        def backward(g, out=None):
            _accum(self, g * ((self.data >= lo) & (self.data <= hi)))
        return self._make(out_data, (self,), backward)

    # -- autodiff entry point -----------------------------------------------------
    def backward(self):
        """Populate gradients of every reachable parameter from this scalar.

        Repeated calls without zeroing accumulate, matching gradient
        accumulation across sub-losses.
        """
        if self.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        _accum(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g is t.data else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g, out=None):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)
    return tensors[0]._make(out_data, tuple(tensors), backward)


def narrow(t: Tensor, start: int, length: int, axis: int = -1) -> Tensor:
    index = [slice(None)] * t.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out_data = t.data[index]

    def backward(g, out=None):
        full = np.zeros_like(t.data)
        full[index] = g
        _accum(t, full)
    return t._make(out_data, (t,), backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    out_data = np.minimum(a.data, b.data)

    def backward(g, out=None):
        take_a = a.data <= b.data
        _accum(a, _unbroadcast(g * take_a, a.shape))
        _accum(b, _unbroadcast(g * ~take_a, b.shape))
    return a._make(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def uniform_init(rng: np.random.Generator, fan_in: int, shape, dtype=DTYPE) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Dense:
    def __init__(self, in_size: int, out_size: int, rng: np.random.Generator, dtype=DTYPE):
        self.in_size = in_size
        self.out_size = out_size
        self.w = Tensor(uniform_init(rng, in_size, (in_size, out_size), dtype), requires_grad=True)
        self.b = Tensor(np.zeros(out_size, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class GRUCell:
    """Standard GRU: z/r gates plus tanh candidate, h' = (1-z)*h + z*hhat."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, dtype=DTYPE):
        self.input_size = input_size
        self.hidden_size = hidden_size
        fan = input_size + hidden_size
        def mk(): return Tensor(uniform_init(rng, fan, (fan, hidden_size), dtype), requires_grad=True)
        self.w_z, self.w_r, self.w_h = mk(), mk(), mk()
        self.b_z = Tensor(np.zeros(hidden_size, dtype=dtype), requires_grad=True)
        self.b_r = Tensor(np.zeros(hidden_size, dtype=dtype), requires_grad=True)
        self.b_h = Tensor(np.zeros(hidden_size, dtype=dtype), requires_grad=True)

    def initial_state(self, batch: int, dtype=None) -> Tensor:
        return Tensor(np.zeros((batch, self.hidden_size),
                               dtype=dtype or self.w_z.data.dtype))

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        """Fused forward+backward: one graph node instead of ~14.

        Computes h' = (1-z)*h + z*tanh(W_h [x, r*h] + b_h) with
        z = sigma(W_z [x,h] + b_z), r = sigma(W_r [x,h] + b_r).
        """
        if x.shape[-1] != self.input_size or h.shape[-1] != self.hidden_size:
            raise ValueError(
                f"gru_step shape mismatch: x {x.shape} h {h.shape} for "
                f"cell ({self.input_size}, {self.hidden_size})")
        n_in = self.input_size
        xd, hd = x.data, h.data
        xh = np.concatenate([xd, hd], axis=-1)
        z = _sigmoid_np(xh @ self.w_z.data + self.b_z.data)
        r = _sigmoid_np(xh @ self.w_r.data + self.b_r.data)
        xrh = np.concatenate([xd, r * hd], axis=-1)
        c = np.tanh(xrh @ self.w_h.data + self.b_h.data)
        out_data = (1.0 - z) * hd + z * c

        wz, wr, wh = self.w_z, self.w_r, self.w_h
        bz, br, bh = self.b_z, self.b_r, self.b_h

        def backward(g, out=None):
            dz = g * (c - hd)
            da_h = (g * z) * (1.0 - c * c)
            d_xrh = da_h @ wh.data.T
            if wh.requires_grad:
                _accum(wh, xrh.T @ da_h)
                _accum(bh, da_h.sum(axis=0))
            dr = d_xrh[..., n_in:] * hd
            dh = g * (1.0 - z) + d_xrh[..., n_in:] * r
            da_r = dr * r * (1.0 - r)
            da_z = dz * z * (1.0 - z)
            if wr.requires_grad:
                _accum(wr, xh.T @ da_r)
                _accum(br, da_r.sum(axis=0))
                _accum(wz, xh.T @ da_z)
                _accum(bz, da_z.sum(axis=0))
            d_xh = da_r @ wr.data.T + da_z @ wz.data.T
            if x.requires_grad:
                _accum(x, d_xrh[..., :n_in] + d_xh[..., :n_in])
            if h.requires_grad:
                _accum(h, dh + d_xh[..., n_in:])
        return x._make(out_data, (x, h, wz, wr, wh, bz, br, bh), backward)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_z": self.w_z, f"{prefix}.w_r": self.w_r, f"{prefix}.w_h": self.w_h,
                f"{prefix}.b_z": self.b_z, f"{prefix}.b_r": self.b_r, f"{prefix}.b_h": self.b_h}


def gru_step(cell: GRUCell, x: Tensor, h: Tensor) -> Tensor:
    return cell.step(x, h)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity at inference or rate 0."""
    if rate < 0.0 or rate >= 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return x * Tensor(mask)


class MLP:
    """Fully connected stack with ReLU between layers, linear output."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, dtype=DTYPE):
        self.layers = [Dense(a, b, rng, dtype) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor, dropout_rates: list[float] | None = None,
                 training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        for i, layer in enumerate(self.layers):
            if dropout_rates is not None and training:
                x = dropout(x, dropout_rates[i], training, rng)
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}.fc{i}"))
        return out


LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0


class GaussianHead:
    """Diagonal Gaussian over actions with a state-independent learnable log-std."""

    def __init__(self, dim: int, init_std: float = 0.1, dtype=DTYPE):
        self.dim = dim
        self.log_std = Tensor(np.full(dim, np.log(init_std), dtype=dtype), requires_grad=True)

    def std(self) -> np.ndarray:
        return np.exp(np.clip(self.log_std.data, LOG_STD_MIN, LOG_STD_MAX))

    def sample(self, mean: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        """Draw an action and its log density (plain numpy; no graph)."""
        std = self.std()
        action = mean + std * rng.standard_normal(mean.shape).astype(mean.dtype)
        return action, self.log_prob_np(mean, action)

    def log_prob_np(self, mean: np.ndarray, action: np.ndarray) -> float:
        std = self.std()
        z = (action - mean) / std
        return float(-0.5 * np.sum(z * z) - np.sum(np.log(std))
                     - 0.5 * self.dim * np.log(2.0 * np.pi))

    def log_prob(self, mean: Tensor, action: np.ndarray) -> Tensor:
        """Differentiable log density of `action` under N(mean, std^2)."""
        log_std = self.log_std.clip(LOG_STD_MIN, LOG_STD_MAX)
        std = log_std.exp()
        z = (Tensor(action.astype(mean.data.dtype)) - mean) / std
        return (z * z).sum(axis=-1) * -0.5 - log_std.sum() \
            - 0.5 * self.dim * np.log(2.0 * np.pi)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.log_std": self.log_std}


def gaussian_sample_logprob(head: GaussianHead, mean: np.ndarray,
                            rng: np.random.Generator) -> tuple[np.ndarray, float]:
    if not np.all(np.isfinite(mean)):
        raise ValueError("non-finite action mean")
    return head.sample(mean, rng)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class Adam:
    """Standard Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape mismatch for {k}")
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            mhat = self.m[k] / (1 - b1 ** t)
            vhat = self.v[k] / (1 - b2 ** t)
            p.data = p.data - (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def clip_grad_norm(params: dict[str, Tensor], max_norm: float = 1.0) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.data.dtype)
    return float(norm)


# ---------------------------------------------------------------------------
# parameter checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"N3PW"
CHECKPOINT_VERSION = 1


def save_params(path, params: dict[str, Tensor | np.ndarray]):
    """Write named float32 blocks; round-trips bit-exactly."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", CHECKPOINT_VERSION))
        for name, p in params.items():
            arr = np.ascontiguousarray(p.data if isinstance(p, Tensor) else p,
                                       dtype=np.float32)
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f4").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    if blob[4] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob[4]}")
    out: dict[str, np.ndarray] = {}
    off = 5
    while off < len(blob):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        rank = blob[off]
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        out[name] = arr.copy()
    return out


def assign_params(params: dict[str, Tensor], values: dict[str, np.ndarray]):
    """Load checkpoint values into live parameters by name."""
    missing = set(params) - set(values)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
    for k, p in params.items():
        v = values[k]
        if v.shape != p.data.shape:
            raise ValueError(f"shape mismatch for {k}: {v.shape} vs {p.data.shape}")
        p.data = v.astype(p.data.dtype)
