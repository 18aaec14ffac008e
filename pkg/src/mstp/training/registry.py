"""Named-parameter registry: grouping, freezing, and integrity hashes."""

from __future__ import annotations

import hashlib
from typing import Callable, Dict, Iterable, List, Tuple

from ..autodiff import Tensor
from ..errors import ContractError, RegistryError


class ParamRegistry:
    """Ordered view of a model's parameters with per-group trainability.

    Freezing flips `requires_grad` on the underlying tensors, so frozen
    parameters drop out of backward graphs entirely (no gradient is computed
    for them, not merely ignored).
    """

    def __init__(self, entries: Iterable[Tuple[str, str, Tensor]]):
        self._names: List[str] = []
        self._groups: Dict[str, str] = {}
        self._tensors: Dict[str, Tensor] = {}
        for name, group, tensor in entries:
            if name in self._tensors:
                raise RegistryError(f"duplicate parameter name {name!r}")
            self._names.append(name)
            self._groups[name] = group
            self._tensors[name] = tensor
        if not self._names:
            raise ContractError("registry built from an empty parameter list")

    # --- lookups ----------------------------------------------------------
    def names(self) -> List[str]:
        return list(self._names)

    def tensor(self, name: str) -> Tensor:
        if name not in self._tensors:
            raise RegistryError(f"unknown parameter {name!r}")
        return self._tensors[name]

    def group(self, name: str) -> str:
        if name not in self._groups:
            raise RegistryError(f"unknown parameter {name!r}")
        return self._groups[name]

    def groups(self) -> List[str]:
        seen = []
        for n in self._names:
            g = self._groups[n]
            if g not in seen:
                seen.append(g)
        return seen

    def items(self):
        for n in self._names:
            yield n, self._groups[n], self._tensors[n]

    # --- trainability ------------------------------------------------------
    def set_trainable(self, predicate: Callable[[str, str], bool]) -> None:
        """predicate(name, group) -> whether that parameter trains."""
        for n in self._names:
            self._tensors[n].requires_grad = bool(predicate(n, self._groups[n]))

    def freeze_all(self) -> None:
        self.set_trainable(lambda n, g: False)

    def trainable_names(self) -> List[str]:
        return [n for n in self._names if self._tensors[n].requires_grad]

    def trainable_items(self) -> List[Tuple[str, Tensor]]:
        return [(n, self._tensors[n]) for n in self._names
                if self._tensors[n].requires_grad]

    def trainable_fraction(self) -> float:
        total = sum(self._tensors[n].size for n in self._names)
        trainable = sum(self._tensors[n].size for n in self.trainable_names())
        return trainable / total

    # --- integrity ----------------------------------------------------------
    def buffer_hashes(self, names: Iterable[str] = None) -> Dict[str, str]:
        """blake2b digest of each parameter's raw bytes."""
        targets = list(names) if names is not None else self._names
        out = {}
        for n in targets:
            t = self.tensor(n)
            out[n] = hashlib.blake2b(t.data.tobytes(), digest_size=16).hexdigest()
        return out

    def zero_grads(self) -> None:
        for n in self._names:
            self._tensors[n].grad = None
