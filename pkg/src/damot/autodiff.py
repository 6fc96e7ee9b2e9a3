"""Dense tensor engine with reverse-mode automatic differentiation.

Double precision throughout. Tensors wrap numpy arrays; each operation
records a backward closure, and `backward()` walks the graph once in
reverse topological order. Includes the gradient reverse layer, layer
modules (Linear/Conv2d/BatchNorm2d/Dropout), AdamW and a finite-difference
gradient checker.
"""

import os

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _op=""):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- graph plumbing ----------------------------------------------------

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            if grad.shape == self.data.shape:
                self.grad = grad.astype(self.data.dtype, copy=True)
            else:
                self.grad = np.zeros_like(self.data)
                self.grad += grad
        else:
            self.grad += grad

    def backward(self):
        """Populate gradients of every requires_grad tensor reachable from
        this scalar loss."""
        if self.data.size != 1:
            raise UsageError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # -- elementwise arithmetic ---------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data + other.data, _parents=(self, other), _op="add")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))
        out._backward = _bw
        return out

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data * other.data, _parents=(self, other), _op="mul")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))
        out._backward = _bw
        return out

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self * other.pow(-1.0)

    def __rtruediv__(self, other):
        return Tensor(other) * self.pow(-1.0)

    __radd__ = __add__
    __rmul__ = __mul__

    def pow(self, exponent: float):
        out = Tensor(np.power(self.data, exponent), _parents=(self,), _op=f"pow{exponent}")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g * exponent * np.power(self.data, exponent - 1.0))
        out._backward = _bw
        return out

    def square(self):
        out = Tensor(self.data * self.data, _parents=(self,), _op="square")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g * 2.0 * self.data)
        out._backward = _bw
        return out

    def sqrt(self):
        return self.pow(0.5)

    def exp(self):
        out = Tensor(np.exp(self.data), _parents=(self,), _op="exp")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g * out.data)
        out._backward = _bw
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,), _op="log")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g / self.data)
        out._backward = _bw
        return out

    def clip(self, lo: float, hi: float):
        """Clamp values; gradient is zero outside [lo, hi]."""
        out = Tensor(np.clip(self.data, lo, hi), _parents=(self,), _op="clip")
        mask = (self.data >= lo) & (self.data <= hi)

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g * mask)
        out._backward = _bw
        return out

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                     _parents=(self,), _op="sum")

        def _bw(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.data.shape).copy())
        out._backward = _bw
        return out

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), _parents=(self,), _op="reshape")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g.reshape(self.data.shape))
        out._backward = _bw
        return out

    def transpose(self, *axes):
        axes = axes or None
        out = Tensor(self.data.transpose(axes), _parents=(self,), _op="transpose")
        inv = np.argsort(axes) if axes else None

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g.transpose(inv))
        out._backward = _bw
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], _parents=(self,), _op="getitem")

        def _bw(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.add.at(full, key, g)
                self._accumulate(full)
        out._backward = _bw
        return out

    # -- linear algebra --------------------------------------------------------

    def matmul(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError(
                f"matmul expects 2-D operands, got {self.shape} @ {other.shape}"
            )
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeError(
                f"matmul inner dims differ: {self.shape} @ {other.shape}"
            )
        out = Tensor(self.data @ other.data, _parents=(self, other), _op="matmul")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)
        out._backward = _bw
        return out

    __matmul__ = matmul

    # -- activations ------------------------------------------------------------

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), _parents=(self,), _op="relu")
        mask = self.data > 0

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g * mask)
        out._backward = _bw
        return out

    def leaky_relu(self, slope: float = 0.2):
        out = Tensor(np.where(self.data > 0, self.data, slope * self.data),
                     _parents=(self,), _op="leaky_relu")
        factor = np.where(self.data > 0, 1.0, slope)

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g * factor)
        out._backward = _bw
        return out

    def sigmoid(self):
        z = np.clip(self.data, -500.0, 500.0)   # exp overflow guard; sigmoid saturates anyway
        out = Tensor(1.0 / (1.0 + np.exp(-z)), _parents=(self,), _op="sigmoid")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g * out.data * (1.0 - out.data))
        out._backward = _bw
        return out

    def softmax(self, axis: int = -1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        sm = e / e.sum(axis=axis, keepdims=True)
        out = Tensor(sm, _parents=(self,), _op="softmax")

        def _bw(g):
            if self.requires_grad:
                dot = (g * sm).sum(axis=axis, keepdims=True)
                self._accumulate(sm * (g - dot))
        out._backward = _bw
        return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors), _op="concat")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])
    out._backward = _bw
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.stack([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors), _op="stack")

    def _bw(g):
        parts = np.split(g, len(tensors), axis=axis)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(part.reshape(t.data.shape))
    out._backward = _bw
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on (N, C, H, W) input; no implicit padding."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects (N, C, H, W) input, got {x.shape}")
    if weight.data.ndim != 4 or weight.data.shape[1] != x.data.shape[1]:
        raise ShapeError(
            f"conv2d weight {weight.shape} incompatible with input {x.shape}"
        )
    xp = x.data
    if padding > 0:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kernels.conv2d_output_shape(xp.shape[2], xp.shape[3],
                                weight.data.shape[2], weight.data.shape[3], stride)
    y = kernels.conv2d_forward(np.ascontiguousarray(xp),
                               np.ascontiguousarray(weight.data), stride)
    out = Tensor(y, _parents=(x, weight), _op="conv2d")

    def _bw(g):
        gx, gw = kernels.conv2d_backward(
            np.ascontiguousarray(xp), np.ascontiguousarray(weight.data),
            np.ascontiguousarray(g), stride)
        if x.requires_grad:
            if padding > 0:
                gx = gx[:, :, padding:-padding, padding:-padding]
            x._accumulate(gx)
        if weight.requires_grad:
            weight._accumulate(gw)
    out._backward = _bw
    result = out
    if bias is not None:
        result = out + bias.reshape(1, -1, 1, 1)
    return result


def avgpool2d_global(x: Tensor) -> Tensor:
    """Global average pooling (N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool2d_global expects 4-D input, got {x.shape}")
    return x.mean(axis=(2, 3))


def grl(x: Tensor, scale: float = 1.0) -> Tensor:
    """Gradient reverse layer: forward identity, backward times -scale."""
    out = Tensor(x.data, _parents=(x,), _op="grl")

    def _bw(g):
        if x.requires_grad:
            x._accumulate(-scale * g)
    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Module:
    """Minimal layer base: named parameters, train/eval mode."""

    def __init__(self):
        self.training = True

    def parameters(self) -> dict:
        params = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                params[name] = value
            elif isinstance(value, Module):
                for sub, p in value.parameters().items():
                    params[f"{name}.{sub}"] = p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.parameters().items():
                            params[f"{name}.{i}.{sub}"] = p
        return params

    def set_training(self, flag: bool):
        self.training = flag
        for value in vars(self).values():
            if isinstance(value, Module):
                value.set_training(flag)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.set_training(flag)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        scale = np.sqrt(2.0 / in_features)
        self.weight = Tensor(rng.normal(0.0, scale, (in_features, out_features)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x.matmul(self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int, rng: np.random.Generator, padding: int = 0):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        scale = np.sqrt(2.0 / fan_in)
        self.weight = Tensor(
            rng.normal(0.0, scale, (out_channels, in_channels, kernel_size, kernel_size)),
            requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    """Batch statistics in training mode, running averages (momentum 0.9)
    in evaluation mode."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9):
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4:
            raise ShapeError(f"BatchNorm2d expects 4-D input, got {x.shape}")
        if self.training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            var = (x - mu).square().mean(axis=(0, 2, 3), keepdims=True)
            self.running_mean = (self.momentum * self.running_mean
                                 + (1 - self.momentum) * mu.data.ravel())
            self.running_var = (self.momentum * self.running_var
                                + (1 - self.momentum) * var.data.ravel())
            xhat = (x - mu) * (var + self.eps).pow(-0.5)
        else:
            mu = self.running_mean.reshape(1, -1, 1, 1)
            std = np.sqrt(self.running_var + self.eps).reshape(1, -1, 1, 1)
            xhat = (x - Tensor(mu)) * Tensor(1.0 / std)
        return xhat * self.gamma.reshape(1, -1, 1, 1) + self.beta.reshape(1, -1, 1, 1)


class Dropout(Module):
    """Identity in evaluation mode; mask-scaled (1/(1-p)) in training mode."""

    def __init__(self, p: float = 0.5):
        super().__init__()
        if not (0.0 <= p < 1.0):
            raise ValueError(f"dropout p must be in [0, 1), got {p}")
        self.p = p
        self.rng = np.random.default_rng(0)

    def reseed(self, rng: np.random.Generator):
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        mask = (self.rng.random(x.data.shape) >= self.p) / (1.0 - self.p)
        return x * Tensor(mask)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """AdamW with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: dict, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key, p in self.params.items():
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            v *= self.beta2
            if p.grad is not None:
                m += (1 - self.beta1) * p.grad
                v += (1 - self.beta2) * np.square(p.grad)
            p.data *= (1.0 - self.lr * self.weight_decay)
            denom = np.sqrt(v / bc2)
            denom += self.eps
            p.data -= (self.lr / bc1) * m / denom


def adamw_step(params, grads, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
               weight_decay=0.0, state=None, t=1):
    """Single functional AdamW update over parallel lists of arrays.

    Returns (updated_params, state). `state` carries the first/second
    moments between calls.
    """
    beta1, beta2 = betas
    if state is None:
        state = ([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    m, v = state
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeError(f"param/grad shape mismatch: {p.shape} vs {g.shape}")
        m[i] = beta1 * m[i] + (1 - beta1) * g
        v[i] = beta2 * v[i] + (1 - beta2) * g * g
        new_p = p * (1.0 - lr * weight_decay)
        mhat = m[i] / (1.0 - beta1 ** t)
        vhat = v[i] / (1.0 - beta2 ** t)
        updated.append(new_p - lr * mhat / (np.sqrt(vhat) + eps))
    return updated, (m, v)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn, inputs, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` takes the input Tensors and returns a scalar Tensor. Relative error
    is |analytic - numeric| / max(1, |analytic|), maximized over coordinates.
    """
    inputs = [t if isinstance(t, Tensor) else Tensor(t, requires_grad=True)
              for t in inputs]
    for t in inputs:
        t.zero_grad()
    loss = fn(*inputs)
    loss.backward()
    analytic = [np.array(t.grad) if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]

    max_err = 0.0
    for t, ana in zip(inputs, analytic):
        if not t.requires_grad:
            continue
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn(*inputs).data)
            flat[i] = orig - h
            down = float(fn(*inputs).data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = ana.ravel()[i]
            err = abs(a - numeric) / max(1.0, abs(a))
            max_err = max(max_err, err)
    return max_err


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: dict, path: str):
    """Flat binary little-endian float64 file + `.idx` text sidecar with
    `name,shape,offset` rows (offset in elements)."""
    names = sorted(params)
    offset = 0
    index_lines = []
    with open(path, "wb") as fh:
        for name in names:
            arr = params[name].data if isinstance(params[name], Tensor) else params[name]
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(arr.tobytes())
            shape = "x".join(str(s) for s in arr.shape) or "1"
            index_lines.append(f"{name},{shape},{offset}")
            offset += arr.size
    with open(path + ".idx", "w") as fh:
        fh.write("".join(line + "\n" for line in index_lines))


def load_checkpoint(path: str) -> dict:
    raw = np.fromfile(path, dtype="<f8")
    out = {}
    with open(path + ".idx") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            name, shape_s, offset_s = line.split(",")
            shape = tuple(int(s) for s in shape_s.split("x"))
            offset = int(offset_s)
            size = int(np.prod(shape))
            out[name] = raw[offset:offset + size].reshape(shape).astype(np.float64)
    return out


def load_into(module: Module, path: str):
    values = load_checkpoint(path)
    params = module.parameters()
    for name, arr in values.items():
        if name in params:
            params[name].data = arr.reshape(params[name].data.shape)
