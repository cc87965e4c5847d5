"""Layer modules over the autograd backend.

A `Module` discovers parameters, buffers and submodules by scanning its
attributes (lists/tuples of modules included), yielding dotted names like
``stages.0.blocks.1.conv1.weight``. Initialization is fully seeded: every
constructor that creates weights takes a `numpy.random.Generator`.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import DTYPE, Tensor
from .errors import ShapeError


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Kaiming-uniform weight draw for ReLU networks: U(-sqrt(6/fan_in), +)."""
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def bias_uniform(rng: np.random.Generator, size: int, fan_in: int) -> np.ndarray:
    bound = float(1.0 / np.sqrt(fan_in)) if fan_in > 0 else 0.0
    return rng.uniform(-bound, bound, size=size).astype(DTYPE)


class Module:
    """Base class with attribute-scanned parameters/buffers and train/eval mode."""

    def __init__(self):
        self.training = True
        self._buffer_names: list[str] = []

    # -- registration --------------------------------------------------------
    def register_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, np.asarray(value, dtype=DTYPE))
        self._buffer_names.append(name)

    # -- traversal ------------------------------------------------------------
    def _children(self):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        """Every Tensor attribute in the tree (momentum copies included, even
        though their requires_grad is False — they are still weights)."""
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                out[prefix + name] = value
        for name, child in self._children():
            out.update(child.named_parameters(prefix=f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self._buffer_names:
            out[prefix + name] = getattr(self, name)
        for name, child in self._children():
            out.update(child.named_buffers(prefix=f"{prefix}{name}."))
        return out

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    # -- modes ----------------------------------------------------------------
    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    # -- state ----------------------------------------------------------------
    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters(prefix).items()}
        out.update({name: b.copy() for name, b in self.named_buffers(prefix).items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        own = {**params, **buffers}
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if strict and (missing or unexpected):
            raise ShapeError(f"load_state_dict: missing keys {missing}, unexpected keys {unexpected}")
        for name, value in state.items():
            if name not in own:
                continue
            target = own[name]
            arr = np.asarray(value, dtype=DTYPE)
            want = target.data.shape if isinstance(target, Tensor) else target.shape
            if arr.shape != want:
                raise ShapeError(f"load_state_dict: {name} has shape {arr.shape}, expected {want}")
            if isinstance(target, Tensor):
                target.data = arr.copy()
            else:
                target[...] = arr  # in-place so EMA/layer references stay valid

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 bias: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in),
                             requires_grad=True)
        self.bias = Tensor(bias_uniform(rng, out_channels, fan_in), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    """Batch normalization owning its running buffers.

    `track_running` controls whether training-mode forwards update the
    buffers; momentum-side encoder copies set it False so their buffers
    evolve only through the exponential-moving-average update.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.track_running = True
        self.gamma = Tensor(np.ones(channels, dtype=DTYPE), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=DTYPE), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=DTYPE))
        self.register_buffer("running_var", np.ones(channels, dtype=DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return ag.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              training=self.training, momentum=self.momentum, eps=self.eps,
                              update_running=self.training and self.track_running)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.weight = Tensor(kaiming_uniform(rng, (out_features, in_features), in_features),
                             requires_grad=True)
        self.bias = Tensor(bias_uniform(rng, out_features, in_features), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


def freeze_running_stats(module: Module) -> None:
    """Stop every BatchNorm2d under `module` from writing its own buffers."""
    for m in module.modules():
        if isinstance(m, BatchNorm2d):
            m.track_running = False
