"""Named parameter storage with group tags and trainable flags."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor


class Group(enum.IntEnum):
    """Parameter groups; the integer value is the checkpoint tag."""

    BACKBONE = 0
    SSL_HEAD = 1
    ADAPTER = 2
    ASR_HEAD = 3

    @classmethod
    def parse(cls, value: "Group | str | int") -> "Group":
        if isinstance(value, Group):
            return value
        if isinstance(value, int):
            return cls(value)
        key = str(value).strip().replace("-", "_").lower()
        aliases = {
            "backbone": cls.BACKBONE, "sslhead": cls.SSL_HEAD, "ssl_head": cls.SSL_HEAD,
            "adapter": cls.ADAPTER, "adapters": cls.ADAPTER,
            "asrhead": cls.ASR_HEAD, "asr_head": cls.ASR_HEAD,
        }
        if key not in aliases:
            raise ConfigurationError(
                f"unknown parameter group {value!r}; expected one of "
                "Backbone, SslHead, Adapter, AsrHead")
        return aliases[key]

    @property
    def label(self) -> str:
        return ("Backbone", "SslHead", "Adapter", "AsrHead")[self.value]


def parse_groups(groups: Iterable["Group | str | int"]) -> frozenset[Group]:
    return frozenset(Group.parse(g) for g in groups)


@dataclass
class Param:
    tensor: Tensor
    group: Group
    trainable: bool = True


class ParamStore:
    """Mapping from unique name to :class:`Param`, iterated in lexicographic order."""

    def __init__(self) -> None:
        self._entries: dict[str, Param] = {}

    def add(self, name: str, value, group: Group | str, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = bool(trainable)
        t.name = name
        self._entries[name] = Param(t, Group.parse(group), bool(trainable))
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._entries))

    def entry(self, name: str) -> Param:
        return self._entries[name]

    def items(self) -> Iterator[tuple[str, Param]]:
        for name in sorted(self._entries):
            yield name, self._entries[name]

    def names(self, groups: Iterable[Group | str] | None = None) -> list[str]:
        if groups is None:
            return sorted(self._entries)
        sel = parse_groups(groups)
        return [n for n, p in self.items() if p.group in sel]

    def groups_present(self) -> frozenset[Group]:
        return frozenset(p.group for p in self._entries.values())

    def remove(self, names: Iterable[str]) -> None:
        for n in list(names):
            del self._entries[n]

    def set_trainable(self, groups: Iterable[Group | str]) -> None:
        """Make exactly the parameters in ``groups`` trainable."""
        sel = parse_groups(groups)
        for p in self._entries.values():
            p.trainable = p.group in sel
            p.tensor.requires_grad = p.trainable
            if not p.trainable:
                p.tensor.grad = None

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.items() if p.trainable]

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.tensor.grad = None

    def count(self, groups: Iterable[Group | str] | None = None) -> int:
        return int(sum(self._entries[n].tensor.size for n in self.names(groups)))

    def snapshot(self, groups: Iterable[Group | str] | None = None) -> dict[str, np.ndarray]:
        return {n: self._entries[n].tensor.data.copy() for n in self.names(groups)}

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for n, p in self.items():
            out.add(n, Tensor(p.tensor.data.copy()), p.group, p.trainable)
        return out


def count_params(store: ParamStore, group_filter: Iterable[Group | str]) -> int:
    """Exact number of scalar parameters in the selected groups."""
    return store.count(list(group_filter))
