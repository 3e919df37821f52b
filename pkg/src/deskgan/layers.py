"""Building blocks shared by the generator and discriminator.

Modules are plain parameter containers: attribute order defines parameter
naming, forward is reentrant, and the only mutating pieces are batch-norm
running statistics and spectral-norm u/v estimates (single-writer during
training).
"""

from __future__ import annotations

import zlib
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError
from .spectral import SpectralNormState, normalized_weight, advance_enabled


def seeded_rng(seed: int, name: str = "") -> np.random.Generator:
    """Philox generator derived from (seed, name) so adding or removing one
    layer never shifts another layer's initialization."""
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(name.encode())])))


def orthogonal_init(rng: np.random.Generator, shape: tuple, dtype=np.float32) -> np.ndarray:
    """Orthogonal rows/columns on the flattened [out, fan_in] view."""
    out = shape[0]
    fan_in = int(np.prod(shape[1:]))
    a = rng.standard_normal((max(out, fan_in), min(out, fan_in)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if out < fan_in:
        q = q.T
    return np.ascontiguousarray(q[:out, :fan_in].reshape(shape), dtype=dtype)


def normal_init(rng: np.random.Generator, shape: tuple, std: float = 0.02,
                dtype=np.float32) -> np.ndarray:
    return (std * rng.standard_normal(shape)).astype(dtype)


class Module:
    """Base container.  Parameters are Tensor attributes with
    requires_grad=True; buffers are registered numpy arrays (running stats,
    spectral-norm vectors) that checkpoints must carry."""

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        return value

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in self.__dict__.items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self.__dict__.items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, value in self.__dict__.items():
            if isinstance(value, SpectralNormState):
                yield f"{prefix}{name}.u", value.u
                yield f"{prefix}{name}.v", value.v
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def load_state(self, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]) -> None:
        """Copy values in place; shapes must match exactly."""
        for name, p in self.named_parameters():
            src = params[name]
            if src.shape != p.data.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {src.shape} "
                                 f"vs model shape {p.data.shape}")
            p.data[...] = src
        for name, _ in self.named_buffers():
            src = buffers[name]
            self._set_buffer(name, src)

    def _set_buffer(self, path: str, value: np.ndarray) -> None:
        head, _, rest = path.partition(".")
        if rest:
            obj = self.__dict__.get(head)
            if isinstance(obj, Module):
                obj._set_buffer(rest, value)
                return
            if isinstance(obj, SpectralNormState):
                cur = getattr(obj, rest)
                if cur.shape != value.shape:
                    raise ShapeError(f"buffer {path}: checkpoint shape {value.shape} "
                                     f"vs model shape {cur.shape}")
                setattr(obj, rest, value.astype(cur.dtype))
                return
            if isinstance(obj, (list, tuple)):
                idx, _, rest2 = rest.partition(".")
                obj[int(idx)]._set_buffer(rest2, value)
                return
        if head in self._buffers:
            cur = self._buffers[head]
            if cur.shape != value.shape:
                raise ShapeError(f"buffer {path}: checkpoint shape {value.shape} "
                                 f"vs model shape {cur.shape}")
            cur[...] = value
            return
        raise KeyError(f"unknown buffer path: {path}")

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    """Cross-correlating convolution with optional spectral normalization."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, pad: int = 0,
                 bias: bool = True, spectral_norm: bool = False,
                 rng: Optional[np.random.Generator] = None, init: str = "orthogonal",
                 dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (out_ch, in_ch, kernel, kernel)
        if init == "orthogonal":
            w = orthogonal_init(rng, shape, dtype)
        elif init == "normal":
            w = normal_init(rng, shape, dtype=dtype)
        elif init == "zeros":
            w = np.zeros(shape, dtype=dtype)
        else:
            raise ValueError(f"unknown init: {init}")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.pad = pad
        self.sn = SpectralNormState(w.reshape(out_ch, -1), rng) if spectral_norm else None

    def effective_weight(self) -> Tensor:
        if self.sn is None:
            return self.weight
        return normalized_weight(self.weight, self.sn, self.training and advance_enabled())

    def forward(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.effective_weight(), stride=self.stride, pad=self.pad)
        if self.bias is not None:
            y = y + T.reshape(self.bias, (1, self.bias.shape[0], 1, 1))
        return y

    __call__ = forward


class Linear(Module):
    def __init__(self, in_f: int, out_f: int, bias: bool = True, spectral_norm: bool = False,
                 rng: Optional[np.random.Generator] = None, init: str = "orthogonal",
                 dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if init == "orthogonal":
            w = orthogonal_init(rng, (out_f, in_f), dtype)
        elif init == "normal":
            w = normal_init(rng, (out_f, in_f), dtype=dtype)
        else:
            raise ValueError(f"unknown init: {init}")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_f, dtype=dtype), requires_grad=True) if bias else None
        self.sn = SpectralNormState(w, rng) if spectral_norm else None

    def effective_weight(self) -> Tensor:
        if self.sn is None:
            return self.weight
        return normalized_weight(self.weight, self.sn, self.training and advance_enabled())

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, T.transpose(self.effective_weight()))
        if self.bias is not None:
            y = y + T.reshape(self.bias, (1, self.bias.shape[0]))
        return y

    __call__ = forward


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.table = Tensor(orthogonal_init(rng, (num_embeddings, dim), dtype),
                            requires_grad=True)

    def forward(self, idx: np.ndarray) -> Tensor:
        return T.gather_rows(self.table, idx)

    __call__ = forward


class ConditionalBatchNorm(Module):
    """Batch normalization whose gain and bias are looked up per class label.

    Normalizes each channel over (B, H, W) with batch statistics in training
    mode and running statistics otherwise; gain rows start at 1 and bias
    rows at 0, so a fresh layer is plain batch norm.
    """

    def __init__(self, num_classes: int, channels: int, eps: float = 1e-5,
                 momentum: float = 0.1, dtype=np.float32):
        super().__init__()
        self.gain_table = Tensor(np.ones((num_classes, channels), dtype=dtype),
                                 requires_grad=True)
        self.bias_table = Tensor(np.zeros((num_classes, channels), dtype=dtype),
                                 requires_grad=True)
        self.running_mean = self.register_buffer(
            "running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = self.register_buffer(
            "running_var", np.ones(channels, dtype=dtype))
        self.eps = eps
        self.momentum = momentum
        self.num_classes = num_classes
        self.channels = channels

    def forward(self, x: Tensor, labels: np.ndarray) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"cbn expects [B×{self.channels}×H×W], got {x.shape}")
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise IndexError(f"class label out of range: {int(labels.max())} "
                             f"vs num_classes {self.num_classes}")
        if self.training:
            mean = T.tmean(x, axis=(0, 2, 3), keepdims=True)
            centered = x - mean
            var = T.tmean(centered * centered, axis=(0, 2, 3), keepdims=True)
            n = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean.data.reshape(-1)
            self.running_var[...] = (1 - m) * self.running_var + m * unbiased
            xhat = centered / T.sqrt(var + Tensor(np.asarray(self.eps, dtype=x.dtype)))
        else:
            rm = Tensor(self.running_mean.reshape(1, -1, 1, 1).astype(x.dtype))
            rv = Tensor(self.running_var.reshape(1, -1, 1, 1).astype(x.dtype))
            xhat = (x - rm) / T.sqrt(rv + Tensor(np.asarray(self.eps, dtype=x.dtype)))
        gain = T.gather_rows(self.gain_table, labels)
        bias = T.gather_rows(self.bias_table, labels)
        b, c = gain.shape
        return xhat * T.reshape(gain, (b, c, 1, 1)) + T.reshape(bias, (b, c, 1, 1))

    __call__ = forward


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor repetition of each pixel into a factor×factor block."""
    if x.ndim != 4:
        raise ShapeError(f"upsample expects [B×C×H×W], got {x.shape}")
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    b, c, h, w = x.shape
    data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return T._make(data, (x,), bw, "upsample_nearest")


def downsample_avg(x: Tensor, factor: int) -> Tensor:
    """Window averaging over factor×factor blocks; extents must divide."""
    if x.ndim != 4:
        raise ShapeError(f"downsample expects [B×C×H×W], got {x.shape}")
    b, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"downsample factor {factor} does not divide extents of {x.shape}")
    oh, ow = h // factor, w // factor
    data = x.data.reshape(b, c, oh, factor, ow, factor).mean(axis=(3, 5))
    scale = 1.0 / (factor * factor)

    def bw(g):
        g2 = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return ((g2 * scale).astype(x.dtype),)

    return T._make(data, (x,), bw, "downsample_avg")


def global_sum_pool(x: Tensor) -> Tensor:
    return T.tsum(x, axis=(2, 3))


def global_avg_pool(x: Tensor) -> Tensor:
    return T.tmean(x, axis=(2, 3))


class ResidualBlock(Module):
    """Two-conv residual branch sized to match an attention block's
    parameter count at the same insertion point.

    1×1 convolutions with hidden width 2·C̄ give 4·C·C̄ weights, one short
    of the attention block's 4·C·C̄ + 1 (its gate scalar).  The final conv
    is zero-initialized so a fresh block is exactly the identity.
    """

    def __init__(self, channels: int, reduction: int = 8, spectral_norm: bool = False,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = max(1, 2 * max(1, channels // reduction))
        self.conv1 = Conv2d(channels, hidden, 1, bias=False, spectral_norm=spectral_norm,
                            rng=rng, dtype=dtype)
        self.conv2 = Conv2d(hidden, channels, 1, bias=False, spectral_norm=spectral_norm,
                            rng=rng, init="zeros", dtype=dtype)
        self.channels = channels
        self.hidden = hidden

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"residual block built for {self.channels} channels, got {x.shape}")
        h = self.conv1(T.relu(x))
        return x + self.conv2(T.relu(h))

    __call__ = forward


class ProjectionHead(Module):
    """Unconditional linear score plus the inner product of a class
    embedding with the pooled features."""

    def __init__(self, num_classes: int, feature_dim: int, spectral_norm: bool = True,
                 spectral_norm_embedding: bool = False,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.psi = Linear(feature_dim, 1, bias=True, spectral_norm=spectral_norm,
                          rng=rng, dtype=dtype)
        self.embed = Embedding(num_classes, feature_dim, rng=rng, dtype=dtype)
        self.embed_sn = (SpectralNormState(self.embed.table.data, rng)
                         if spectral_norm_embedding else None)
        self.num_classes = num_classes
        self.feature_dim = feature_dim

    def forward(self, phi: Tensor, labels: np.ndarray) -> Tensor:
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise IndexError(f"class label out of range: {int(labels.max())} "
                             f"vs num_classes {self.num_classes}")
        if phi.ndim != 2 or phi.shape[1] != self.feature_dim:
            raise ShapeError(f"projection head expects [B×{self.feature_dim}], got {phi.shape}")
        uncond = T.reshape(self.psi(phi), (phi.shape[0],))
        table = self.embed.table
        if self.embed_sn is not None:
            table = normalized_weight(table, self.embed_sn,
                                      self.training and advance_enabled())
        e = T.gather_rows(table, labels)
        return uncond + T.tsum(e * phi, axis=1)

    __call__ = forward
