"""Token layout: per-item blocks ``[BOS, s1, s2, s3, s4, ITEM]``."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .tokenizer import SidIndex

BLOCK = 6
N_SID = 4


@dataclass(frozen=True)
class Vocab:
    """Disjoint token-ID ranges: BOS | S1 | S2 | S3 | S4 | ITEM | PAD."""

    K: int
    s4_max: int
    n_items: int

    @property
    def bos(self) -> int:
        return 0

    def level_offset(self, level: int) -> int:
        """First token ID of SID level ``level`` (1-based)."""
        if not 1 <= level <= N_SID:
            raise ValueError(f"SID level must be in 1..4, got {level}")
        return 1 + (level - 1) * self.K

    def level_size(self, level: int) -> int:
        return self.s4_max if level == N_SID else self.K

    @property
    def item_offset(self) -> int:
        return 1 + 3 * self.K + self.s4_max

    @property
    def pad(self) -> int:
        return self.item_offset + self.n_items

    @property
    def size(self) -> int:
        return self.pad + 1

    def sid(self, level: int, code: int) -> int:
        if not 0 <= code < self.level_size(level):
            raise ValueError(f"code {code} out of range for level {level}")
        return self.level_offset(level) + code

    def item(self, item_id: int) -> int:
        if not 0 <= item_id < self.n_items:
            raise ValueError(f"unknown item {item_id}")
        return self.item_offset + item_id

    def encode(self, kind: str, value: int = 0) -> int:
        if kind == "BOS":
            return self.bos
        if kind == "PAD":
            return self.pad
        if kind == "ITEM":
            return self.item(value)
        if kind in ("S1", "S2", "S3", "S4"):
            return self.sid(int(kind[1]), value)
        raise ValueError(f"unknown token kind {kind!r}")

    def decode(self, token: int) -> tuple[str, int]:
        if token == self.bos:
            return ("BOS", 0)
        if token == self.pad:
            return ("PAD", 0)
        if self.item_offset <= token < self.pad:
            return ("ITEM", token - self.item_offset)
        for level in range(1, N_SID + 1):
            lo = self.level_offset(level)
            if lo <= token < lo + self.level_size(level):
                return (f"S{level}", token - lo)
        raise ValueError(f"token {token} outside vocabulary of size {self.size}")


@dataclass
class SerializedSequence:
    tokens: list[int]
    target_mask: list[bool]  # position i predicts an SID token at i + 1
    block_starts: list[int]


def serialize_history(items: list[int], sid_index: SidIndex, vocab: Vocab, context: int | None = None) -> SerializedSequence:
    need = BLOCK * len(items)
    if context is not None and need > context:
        raise ValueError(f"history needs {need} positions but the context window holds {context}")
    tokens: list[int] = []
    starts = []
    for x in items:
        sid = sid_index.item_to_sid.get(x)
        if sid is None:
            raise KeyError(f"item {x} has no semantic ID")
        starts.append(len(tokens))
        tokens.append(vocab.bos)
        tokens.extend(vocab.sid(level, code) for level, code in enumerate(sid, start=1))
        tokens.append(vocab.item(x))
    mask = [False] * len(tokens)
    for s in starts:
        for h in range(N_SID):
            mask[s + h] = True
    return SerializedSequence(tokens, mask, starts)


def pos(t: int, h: int, n_items: int | None = None) -> int:
    """Position of target ``s_t^h``; the logit predicting it sits one position earlier."""
    if t < 0 or not 1 <= h <= N_SID or (n_items is not None and t >= n_items):
        raise IndexError(f"pos({t}, {h}) out of range")
    return BLOCK * t + h


def deserialize(tokens: list[int], vocab: Vocab) -> list[int]:
    return [v for kind, v in map(vocab.decode, tokens) if kind == "ITEM"]


def build_rerank_suffix(
    candidate_sid: tuple[int, ...], retrieved_items: list[int], candidate_item: int, vocab: Vocab
) -> tuple[list[int], int]:
    """``[BOS, S1..S4 of the candidate, ITEM(retrieved)..., ITEM(candidate)]`` and the scoring index."""
    tokens = [vocab.bos]
    tokens.extend(vocab.sid(level, code) for level, code in enumerate(candidate_sid, start=1))
    tokens.extend(vocab.item(i) for i in retrieved_items)
    tokens.append(vocab.item(candidate_item))
    return tokens, len(tokens) - 1


def render(tokens: list[int], vocab: Vocab) -> str:
    """Debug text form, e.g. ``[BOS s1:1 s2:2 s3:3 s4:0 item:7]``."""
    parts = []
    for kind, v in map(vocab.decode, tokens):
        parts.append(kind if kind in ("BOS", "PAD") else f"{kind.lower()}:{v}")
    return "[" + " ".join(parts) + "]"


def pad_rows(rows: list[list[int]], pad: int) -> tuple[torch.Tensor, torch.Tensor]:
    width = max((len(r) for r in rows), default=0)
    tokens = torch.full((len(rows), width), pad, dtype=torch.long)
    valid = torch.zeros(len(rows), width, dtype=torch.bool)
    for i, r in enumerate(rows):
        tokens[i, : len(r)] = torch.as_tensor(r, dtype=torch.long)
        valid[i, : len(r)] = True
    return tokens, valid
