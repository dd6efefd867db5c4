"""Parameter containers.

A :class:`Module` treats every :class:`Tensor` attribute (directly, or inside
lists/dicts, or inside child modules) as a learnable parameter.  Parameter
names are dotted attribute paths in insertion order, which keeps checkpoints
and optimizer state deterministic.
"""

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor


class Module:

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        problems = []
        for name, p in own.items():
            if name not in state:
                if strict:
                    problems.append(f"{name}: missing")
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                problems.append(f"{name}: checkpoint {arr.shape} vs model {p.shape}")
        if strict:
            problems += [f"{name}: unexpected" for name in state if name not in own]
        if problems:
            raise CheckpointError("incompatible checkpoint tensors:\n  " + "\n  ".join(problems))
        for name, p in own.items():
            if name in state:
                p.data = np.array(state[name], dtype=p.dtype, copy=True)

    def set_requires_grad(self, flag):
        for p in self.parameters():
            p.requires_grad = flag


def _walk(value, path):
    if isinstance(value, Tensor):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{path}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{path}.{k}")


def normal_param(rng, shape, std, dtype=np.float64):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def uniform_param(rng, shape, bound, dtype=np.float64):
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def const_param(shape, value, dtype=np.float64):
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)
