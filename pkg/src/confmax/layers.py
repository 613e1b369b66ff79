"""Layer primitives with hand-written backward rules, and the toy classifier.

Every primitive here is a single tape node: forward in numpy, backward as a
closure over the saved intermediates.  Module objects (``Conv2d``,
``BatchNorm2d`` ...) only hold parameters and dispatch to the primitives.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, record, relu
from .errors import ContractError, ShapeError

TRAIN_STATS = "train-stats"
RUNNING_STATS = "running-stats"
NORM_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# primitives


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - k) // stride + 1
    if out < 1:
        raise ShapeError(f"convolution output size {out} for input {size}, kernel {k}, "
                         f"stride {stride}, padding {padding}")
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) of NCHW input with an (O, C, k, k) kernel."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if k != k2 or k < 1:
        raise ShapeError(f"conv2d kernel must be square, got {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    wd = weight.data
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if weight.tracked else None
        gx = _conv_input_grad(g, wd, (h, w), stride, padding) if x.tracked else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record("conv2d", out, inputs, backward)


def _conv_input_grad(g: np.ndarray, wd: np.ndarray, hw: tuple, stride: int, padding: int) -> np.ndarray:
    """Gradient wrt the conv input: scatter each kernel tap back onto the padded input."""
    n, o, ho, wo = g.shape
    k = wd.shape[2]
    h, w = hw
    cols = np.tensordot(g, wd, axes=([1], [0]))  # (n, ho, wo, c, k, k)
    gxp = np.zeros((n, wd.shape[1], h + 2 * padding, w + 2 * padding))
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + hs:stride, j:j + ws:stride] += cols[..., i, j].transpose(0, 3, 1, 2)
    return gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp


def _affine_backward(g, xhat, gamma_shape, axes):
    return (g * xhat).sum(axis=axes).reshape(gamma_shape), g.sum(axis=axes).reshape(gamma_shape)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               mode: str = TRAIN_STATS, eps: float = NORM_EPS, momentum: float = BN_MOMENTUM,
               update_running: bool = True) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In train-stats mode the current batch supplies mean and biased variance and,
    if ``update_running``, the running buffers are blended in place with
    ``momentum``.  In running-stats mode the stored buffers are used.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm: input {x.shape} vs {gamma.shape[0]} channels")
    n, c, h, w = x.shape
    xd = x.data
    gd = gamma.data[None, :, None, None]
    if mode == TRAIN_STATS:
        m = n * h * w
        if m < 2:
            raise ContractError("train-stats batch norm needs at least two values per channel")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var
    elif mode == RUNNING_STATS:
        mu, var = running_mean, running_var
    else:
        raise ContractError(f"unknown normalization mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gd * xhat + beta.data[None, :, None, None]
    axes = (0, 2, 3)

    def backward(g):
        ggamma, gbeta = _affine_backward(g, xhat, gamma.shape, axes)
        gx = None
        if x.tracked:
            dxhat = g * gd
            if mode == TRAIN_STATS:
                mcount = n * h * w
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                gx = inv[None, :, None, None] / mcount * (mcount * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return record("batch_norm", out, (x, gamma, beta), backward)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = NORM_EPS) -> Tensor:
    """Per-sample normalization over each (channel-group, H, W) slice."""
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"group_norm: input {x.shape} vs {gamma.shape[0]} channels")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, c // groups, h, w)
    axes = (2, 3, 4)
    mu = xg.mean(axis=axes, keepdims=True)
    var = xg.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    gd = gamma.data[None, :, None, None]
    out = gd * xhat + beta.data[None, :, None, None]

    def backward(g):
        ggamma, gbeta = _affine_backward(g, xhat, gamma.shape, (0, 2, 3))
        gx = None
        if x.tracked:
            m = (c // groups) * h * w
            dxhat = (g * gd).reshape(xg.shape)
            xh = xhat.reshape(xg.shape)
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xh).sum(axis=axes, keepdims=True)
            gx = (inv / m * (m * dxhat - s1 - xh * s2)).reshape(n, c, h, w)
        return gx, ggamma, gbeta

    return record("group_norm", out, (x, gamma, beta), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` with weight of shape (out, in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data[None, :]
    return record("linear", out, (x, weight, bias),
                  lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    shape = x.shape
    hw = shape[2] * shape[3]
    return record("global_avg_pool", x.data.mean(axis=(2, 3)), (x,),
                  lambda g: (np.broadcast_to(g[:, :, None, None] / hw, shape).copy(),))


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """``gamma[c] * x + beta[c]`` broadcast over N, H, W."""
    if x.ndim != 4 or x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise ShapeError(f"channel_affine: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    out = gd * xd + beta.data[None, :, None, None]
    return record("channel_affine", out, (x, gamma, beta),
                  lambda g: (g * gd, (g * xd).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))))


# ---------------------------------------------------------------------------
# modules


class Module:
    """Parameter container; attributes are walked in assignment order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in vars(self).items():
            if isinstance(val, np.ndarray):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = set(targets) - set(state)
        if missing:
            raise ShapeError(f"state dict missing entries: {sorted(missing)}")
        for name, arr in targets.items():
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise ShapeError(f"{name}: expected shape {arr.shape}, got {src.shape}")
            arr[...] = src


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int = 3, stride: int = 1, padding: int = 1,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * k * k
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, k, k)))
        self.bias = Tensor(np.zeros(out_ch))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, ch: int, eps: float = NORM_EPS, momentum: float = BN_MOMENTUM):
        self.gamma = Tensor(np.ones(ch))
        self.beta = Tensor(np.zeros(ch))
        self.running_mean = np.zeros(ch)
        self.running_var = np.ones(ch)
        self.eps = eps
        self.momentum = momentum
        self.mode = TRAIN_STATS
        self.update_running = True

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.mode, self.eps, self.momentum, self.update_running)


class GroupNorm(Module):
    def __init__(self, ch: int, groups: int, eps: float = NORM_EPS):
        if groups < 1 or ch % groups:
            raise ShapeError(f"{ch} channels not divisible into {groups} groups")
        self.gamma = Tensor(np.ones(ch))
        self.beta = Tensor(np.zeros(ch))
        self.groups = groups
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return group_norm(x, self.gamma, self.beta, self.groups, self.eps)


class Linear(Module):
    def __init__(self, in_f: int, out_f: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(rng.normal(0.0, np.sqrt(1.0 / in_f), (out_f, in_f)))
        self.bias = Tensor(np.zeros(out_f))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class ConvBlock(Module):
    """conv 3x3 -> batch norm -> ReLU."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator):
        self.conv = Conv2d(in_ch, out_ch, 3, stride, 1, rng)
        self.bn = BatchNorm2d(out_ch)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


class ToyCNN(Module):
    """Three conv/BN/ReLU blocks (stride 2 on blocks 2-3), global pool, linear head."""

    def __init__(self, channels: tuple[int, ...] = (16, 32, 64), n_classes: int = 10,
                 in_ch: int = 1, input_size: int = 28, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.in_ch = in_ch
        self.input_size = input_size
        self.channels = tuple(channels)
        self.n_classes = n_classes
        blocks = []
        prev = in_ch
        for i, ch in enumerate(channels):
            blocks.append(ConvBlock(prev, ch, 1 if i == 0 else 2, rng))
            prev = ch
        self.blocks = blocks
        self.head = Linear(prev, n_classes, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return classifier_forward(self, x)

    def batch_norms(self) -> list[BatchNorm2d]:
        return [m for m in self.modules() if isinstance(m, BatchNorm2d)]

    def set_norm_mode(self, mode: str, update_running: bool = True) -> None:
        if mode not in (TRAIN_STATS, RUNNING_STATS):
            raise ContractError(f"unknown normalization mode {mode!r}")
        for bn in self.batch_norms():
            bn.mode = mode
            bn.update_running = update_running


def classifier_forward(model: ToyCNN, x: Tensor) -> Tensor:
    """Logits of shape (N, n_classes); softmax is left to the losses."""
    if x.ndim != 4 or x.shape[1:] != (model.in_ch, model.input_size, model.input_size):
        raise ShapeError(f"classifier expects (N, {model.in_ch}, {model.input_size}, "
                         f"{model.input_size}), got {x.shape}")
    h = x
    for block in model.blocks:
        h = block(h)
    return model.head(global_avg_pool(h))
