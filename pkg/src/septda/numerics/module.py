"""Parameter containers with stable dotted names."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)


class Module:
    """Base class; parameters are discovered from attributes in assignment order.

    Attributes may be a ``Parameter``, a ``Module``, or a list of modules
    (named by index, e.g. ``triple.3.intra.lstm.w_ih``).
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used to run gradient checks in double)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    @property
    def dtype(self):
        for p in self.parameters():
            return p.dtype
        return np.dtype(np.float32)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        unknown = sorted(set(state) - set(own))
        missing = sorted(set(own) - set(state))
        if unknown:
            raise KeyError(f"unknown parameter name(s): {', '.join(unknown[:5])}")
        if missing:
            raise KeyError(f"missing parameter(s): {', '.join(missing[:5])}")
        for name, value in state.items():
            if own[name].shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != expected {own[name].shape}")
        for name, value in state.items():
            own[name].data = np.array(value, dtype=own[name].dtype)
