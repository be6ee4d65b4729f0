"""Named registry of learnable tensors, shared by every model component."""

from __future__ import annotations

import numpy as np

from w2wbev.tensor import Tensor


class ParamSet:
    """Insertion-ordered name -> Tensor map; names are unique.

    Every registered tensor has ``requires_grad`` set; the checkpoint codec
    serializes the registry by name.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data), requires_grad=True, dtype=data.dtype)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def replace(self, name: str, tensor: Tensor) -> None:
        """Swap a registered slot (gradient verification hook)."""
        if name not in self._params:
            raise KeyError(name)
        self._params[name] = tensor

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; shapes must match exactly."""
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise KeyError(
                f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in self._params.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(t.shape):
                raise ValueError(
                    f"parameter {name!r}: stored shape {arr.shape} != model shape {t.shape}")
            t.data[...] = arr.astype(t.data.dtype)


def normal_init(rng: np.random.Generator, shape, scale: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * scale).astype(dtype)


def fan_in_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return normal_init(rng, shape, 1.0 / np.sqrt(max(fan_in, 1)), dtype)
