"""Named parameter store with sharing and regularization metadata."""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import Tensor


@dataclass
class ParamEntry:
    name: str
    tensor: Tensor
    shared: bool
    regularized: bool


class ParamRegistry:
    """Ordered map of parameter name -> entry.

    Invariants enforced at registration: names are unique, and regularized
    parameters are shared rank-4 conv weights (F, C, Kh, Kw).  Shared and
    task-specific parameters are disjoint by construction of the name sets.
    """

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, tensor: Tensor, *, shared: bool, regularized: bool) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if regularized:
            if not shared:
                raise ValueError(f"{name!r}: regularized parameters must be shared")
            if tensor.data.ndim != 4:
                raise ValueError(
                    f"{name!r}: regularized parameters must be rank-4 conv weights, "
                    f"got shape {tensor.shape}"
                )
        tensor.requires_grad = True
        self._entries[name] = ParamEntry(name, tensor, shared, regularized)
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, name: str) -> ParamEntry:
        return self._entries[name]

    def tensor(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def entries(self) -> list[ParamEntry]:
        return list(self._entries.values())

    def names(self) -> list[str]:
        return list(self._entries)

    def regularized_entries(self) -> list[ParamEntry]:
        return [e for e in self._entries.values() if e.regularized]

    def shared_names(self) -> set[str]:
        return {e.name for e in self._entries.values() if e.shared}

    def task_specific_names(self) -> set[str]:
        return {e.name for e in self._entries.values() if not e.shared}

    def n_params(self) -> int:
        return sum(e.tensor.size for e in self._entries.values())
