"""Parameter containers on top of the autodiff ops."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, ops


class Module:
    """Minimal module: named parameters, named buffers, train/eval flag.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    numpy arrays registered through ``register_buffer``. Child modules may
    be attributes or entries of ``Sequential``.
    """

    def __init__(self):
        self.training = True
        self._buffers: dict = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (used by float64 checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for k, v in m._buffers.items():
                if np.issubdtype(v.dtype, np.floating):
                    m._buffers[k] = v.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self):
        return (m for _, m in self.children())

    def __len__(self):
        return sum(1 for _ in self.children())

    def __getitem__(self, i):
        return getattr(self, str(i))

    def forward(self, x):
        for layer in self:
            x = layer(x)
        return x


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 dilation=1, bias=False, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        std = np.sqrt(2.0 / fan_in)
        w = rng.standard_normal((out_channels, in_channels, kernel_size, kernel_size)) * std
        self.weight = Tensor(w.astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, np.float32), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class BatchNorm2d(Module):
    """Batch norm with running statistics.

    Running statistics count as valid once a training-mode forward has
    updated them, or after ``init_running_stats``/loading a checkpoint.
    Eval mode before that is an error.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, np.float32))
        self.register_buffer("running_var", np.ones(channels, np.float32))
        self.momentum = momentum
        self.eps = eps
        self.stats_initialized = False

    def init_running_stats(self):
        self.stats_initialized = True

    def forward(self, x):
        if not self.training and not self.stats_initialized:
            raise RuntimeError(
                "batch norm in eval mode has no running statistics; run a training "
                "forward, load a checkpoint, or call init_running_stats()"
            )
        out = ops.batch_norm2d(
            x, self.gamma, self.beta, self._buffers["running_mean"],
            self._buffers["running_var"], self.training, self.momentum, self.eps,
        )
        if self.training:
            self.stats_initialized = True
        return out


class ReLU(Module):
    def forward(self, x):
        return ops.relu(x)


def conv_bn_relu(in_ch, out_ch, kernel, stride=1, padding=0, dilation=1, rng=None, relu=True):
    layers = [Conv2d(in_ch, out_ch, kernel, stride, padding, dilation, rng=rng), BatchNorm2d(out_ch)]
    if relu:
        layers.append(ReLU())
    return Sequential(*layers)
