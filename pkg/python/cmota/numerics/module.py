"""Parameter containers."""

from __future__ import annotations

from collections.abc import Iterator, Mapping

import numpy as np

from cmota.errors import CheckpointError, DimensionError
from cmota.numerics.tensor import Tensor


class Module:
    """Holds parameter tensors and child modules as plain attributes.

    Parameters are discovered in attribute insertion order, so names and
    iteration order are deterministic.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def train(self, mode: bool = True) -> Module:
        self.training = mode
        for child in self._children():
            child.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError(
                f"parameter names differ (missing={missing[:5]}, unexpected={unexpected[:5]})"
            )
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {value.shape} != model {p.shape}")
            p.data = value.astype(p.data.dtype, copy=True)

    def _children(self) -> Iterator[Module]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))
            elif isinstance(value, dict):
                yield from (v for v in value.values() if isinstance(v, Module))


def _walk(value: object, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=f"{name}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{name}.{key}")
    elif hasattr(value, "tensors") and hasattr(value, "__dataclass_fields__"):
        for field in value.__dataclass_fields__:
            yield from _walk(getattr(value, field), f"{name}.{field}")
