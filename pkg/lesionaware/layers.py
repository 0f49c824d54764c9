"""Parameter containers wrapping the `tensor` primitives.

A `Module` owns named parameters (leaf tensors with `requires_grad=True`), named buffers (batch
norm running statistics) and child modules. Names are dotted paths (`stages.0.conv1.weight`) and
are what checkpoints store.
"""
import logging
from collections import OrderedDict

import numpy as np

from ._utils import cn
from .errors import CheckpointError, DimensionError
from .tensor import RunningStats, Tensor, batch_norm, conv2d, matmul


__all__ = ['BatchNorm2d', 'Conv2d', 'Linear', 'Module', 'ModuleList', 'xavier_uniform']

log = logging.getLogger(__name__)


def xavier_uniform(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    def __init__(self):
        object.__setattr__(self, '_parameters', OrderedDict())
        object.__setattr__(self, '_modules', OrderedDict())
        object.__setattr__(self, 'training', True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad and value.is_leaf:
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError(f'{cn(self)} does not implement forward')

    # ----------------------------------------------------------------------------------------------
    # Traversal
    # ----------------------------------------------------------------------------------------------
    def named_modules(self, prefix=''):
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f'{prefix}{name}.')

    def named_parameters(self):
        for prefix, module in self.named_modules():
            for name, param in module._parameters.items():
                yield f'{prefix}{name}', param

    def parameters(self):
        return [param for _, param in self.named_parameters()]

    def named_buffers(self):
        for prefix, module in self.named_modules():
            for name, value in module._own_buffers().items():
                yield f'{prefix}{name}', value

    def _own_buffers(self):
        return {}

    def _load_buffer(self, name, value):
        raise CheckpointError(f'{cn(self)} has no buffer {name!r}')

    # ----------------------------------------------------------------------------------------------
    # Mode and gradients
    # ----------------------------------------------------------------------------------------------
    def train(self, mode=True):
        for _, module in self.named_modules():
            object.__setattr__(module, 'training', mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    # ----------------------------------------------------------------------------------------------
    # State
    # ----------------------------------------------------------------------------------------------
    def state_dict(self):
        """Copies of every parameter and buffer keyed by dotted name, parameters first."""
        state = OrderedDict((name, param.data.copy()) for name, param in self.named_parameters())
        state.update((name, np.array(value)) for name, value in self.named_buffers())
        return state

    def load_state_dict(self, state):
        expected = self.state_dict()
        missing = [name for name in expected if name not in state]
        unexpected = [name for name in state if name not in expected]
        if missing or unexpected:
            raise CheckpointError(
                f'state does not match {cn(self)}: missing {missing[:3]}, unexpected {unexpected[:3]}'
            )
        for name, current in expected.items():
            if np.shape(state[name]) != current.shape:
                raise CheckpointError(
                    f'{name}: stored shape {np.shape(state[name])} != model shape {current.shape}'
                )

        params = dict(self.named_parameters())
        modules = dict(self.named_modules())
        for name, value in state.items():
            if name in params:
                params[name].data[...] = value
                continue
            owner, _, attr = name.rpartition('.')
            modules[f'{owner}.' if owner else '']._load_buffer(attr, np.array(value))


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for module in modules:
            self.append(module)

    def append(self, module):
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, index):
        return self._items[index]


class Conv2d(Module):
    def __init__(
        self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0, bias=True,
        dtype=np.float64,
    ):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        fan_out = out_channels * kernel_size * kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            xavier_uniform(
                rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, fan_out, dtype
            ),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running = RunningStats(channels, dtype=dtype)

    def forward(self, x):
        return batch_norm(
            x, self.gamma, self.beta, self.running, training=self.training, eps=self.eps,
            momentum=self.momentum,
        )

    def _own_buffers(self):
        return {'running_mean': self.running.mean, 'running_var': self.running.var}

    def _load_buffer(self, name, value):
        if name == 'running_mean':
            self.running.mean = value.astype(self.running.mean.dtype)
        elif name == 'running_var':
            self.running.var = value.astype(self.running.var.dtype)
        else:
            super()._load_buffer(name, value)


class Linear(Module):
    """`x @ weight.T + bias` with `weight` shaped `[out_features, in_features]`."""

    def __init__(self, in_features, out_features, rng, bias=True, dtype=np.float64):
        super().__init__()
        self.in_features = in_features
        self.weight = Tensor(
            xavier_uniform(rng, (out_features, in_features), in_features, out_features, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(
                f'linear: expects [N, {self.in_features}] input, got {x.shape}'
            )
        out = matmul(x, self.weight.T)
        return out + self.bias if self.bias is not None else out
