"""Cross-batch memory: a FIFO of detached past embeddings with labels."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable

import torch

from umafd.data import Modality
from umafd.errors import ConfigError


@dataclass(frozen=True)
class XBMEntry:
    embedding: torch.Tensor
    label: int
    modality: Modality
    step: int

    @classmethod
    def make(cls, embedding: torch.Tensor, label: int, modality: Modality, step: int) -> "XBMEntry":
        return cls(embedding.detach().clone(), int(label), Modality(modality), int(step))


class XBMMemory:
    def __init__(self, capacity: int = 128):
        if capacity <= 0:
            raise ConfigError(f"XBM capacity must be > 0, got {capacity}")
        self.capacity = capacity
        self._entries: deque[XBMEntry] = deque(maxlen=capacity)

    def push(self, entries: Iterable[XBMEntry]) -> "XBMMemory":
        for e in entries:
            if e.embedding.requires_grad:
                e = XBMEntry.make(e.embedding, e.label, e.modality, e.step)
            self._entries.append(e)
        return self

    def snapshot(self) -> tuple[XBMEntry, ...]:
        return tuple(self._entries)

    def clear(self) -> None:
        self._entries.clear()

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self):
        return f"XBMMemory({len(self)}/{self.capacity})"


def push(memory: XBMMemory, new_entries: Iterable[XBMEntry]) -> XBMMemory:
    return memory.push(new_entries)


def snapshot(memory: XBMMemory) -> tuple[XBMEntry, ...]:
    return memory.snapshot()


def stack_entries(entries, dim: int, dtype=torch.float32):
    """Return (embeddings (M, dim), labels (M,)) for a memory snapshot."""
    if not entries:
        return torch.zeros(0, dim, dtype=dtype), torch.zeros(0, dtype=torch.long)
    emb = torch.stack([e.embedding.to(dtype) for e in entries])
    labels = torch.tensor([e.label for e in entries], dtype=torch.long)
    return emb, labels
