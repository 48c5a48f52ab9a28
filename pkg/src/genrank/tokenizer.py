"""Residual k-means item tokenizer producing 4-level semantic IDs."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAX_ITERS = 100
REL_TOL = 1e-6
FILE_MAGIC = b"RQKM"
FILE_VERSION = 1

SemanticId = tuple[int, int, int, int]


class CodebookFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        self.offset = offset
        super().__init__(f"{msg} (byte offset {offset})")


@dataclass
class Codebook:
    levels: list[np.ndarray]  # each [K, d] float32
    K: int
    d: int
    seed: int = 0

    @property
    def n_levels(self) -> int:
        return len(self.levels)


@dataclass
class SidIndex:
    sid_to_item: dict[SemanticId, int]
    item_to_sid: dict[int, SemanticId]
    s4_max: int
    trie: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.trie:
            self.trie = build_trie(self.sid_to_item)

    def __len__(self) -> int:
        return len(self.sid_to_item)

    def children(self, prefix: tuple[int, ...]) -> list[int]:
        node = self.trie
        for code in prefix:
            node = node.get(code)
            if node is None:
                return []
        if not isinstance(node, dict):
            return []
        return sorted(node)

    def lookup(self, sid: tuple[int, ...]) -> int | None:
        node = self.trie
        for code in sid:
            if not isinstance(node, dict) or code not in node:
                return None
            node = node[code]
        return node if isinstance(node, int) else None


def build_trie(sid_to_item: Mapping[SemanticId, int]) -> dict:
    """Nested dicts keyed by code; depth-4 leaves hold the item ID."""
    root: dict = {}
    for sid, item in sorted(sid_to_item.items()):
        node = root
        for code in sid[:-1]:
            node = node.setdefault(code, {})
        node[sid[-1]] = item
    return root


# -- k-means ------------------------------------------------------------------

def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            i = rng.choice(n, p=closest / total)
        else:
            i = rng.integers(n)
        centers.append(x[i])
        closest = np.minimum(closest, ((x - x[i]) ** 2).sum(1))
    return np.stack(centers)


def _nearest(x: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = _sq_dists(x, c)
    # argmin returns the first minimum, i.e. the lowest code on ties
    idx = d.argmin(1)
    return idx, d[np.arange(len(x)), idx]


def lloyd(x: np.ndarray, k: int, rng: np.random.Generator, init: np.ndarray | None = None) -> np.ndarray:
    """Lloyd's k-means from k-means++ seeding (or ``init``); float64 centroids."""
    c = _kmeans_pp(x, k, rng) if init is None else np.array(init, dtype=np.float64)
    prev = np.inf
    for _ in range(MAX_ITERS):
        idx, d = _nearest(x, c)
        counts = np.bincount(idx, minlength=k)
        for j in np.flatnonzero(counts == 0):
            far = int(d.argmax())
            c[j] = x[far]
            idx[far] = j
            d[far] = 0.0
            counts = np.bincount(idx, minlength=k)
        for j in range(k):
            members = x[idx == j]
            if len(members):
                c[j] = members.mean(0)
        obj = float(_nearest(x, c)[1].mean())
        if prev < np.inf and prev - obj <= REL_TOL * max(prev, 1e-300):
            break
        prev = obj
    return c


def fit_codebook(
    embeddings: Mapping[int, np.ndarray] | np.ndarray,
    K: int,
    seed: int = 0,
    n_levels: int = 3,
) -> Codebook:
    """Fit ``n_levels`` of residual k-means with ``K`` centroids per level."""
    if isinstance(embeddings, Mapping):
        ids = sorted(embeddings)
        x = np.stack([np.asarray(embeddings[i], dtype=np.float64) for i in ids]) if ids else np.zeros((0, 0))
    else:
        x = np.asarray(embeddings, dtype=np.float64)
        ids = list(range(len(x)))
    if len(x) < K:
        raise ValueError(f"need at least K={K} points, got {len(x)}")
    bad = ~np.isfinite(x).all(1)
    if bad.any():
        raise ValueError(f"non-finite embedding for item {ids[int(np.flatnonzero(bad)[0])]}")
    rng = np.random.default_rng(seed)
    residual = x.copy()
    levels = []
    for _ in range(n_levels):
        c = lloyd(residual, K, rng).astype(np.float32)
        levels.append(c)
        idx, _ = _nearest(residual, c.astype(np.float64))
        residual = residual - c[idx].astype(np.float64)
    return Codebook(levels=levels, K=K, d=x.shape[1], seed=seed)


def assign_sid(embedding: np.ndarray, codebook: Codebook) -> tuple[int, ...]:
    """Greedy per-level nearest centroid on the running residual."""
    r = np.asarray(embedding, dtype=np.float64)
    if r.shape != (codebook.d,):
        raise ValueError(f"embedding dimension {r.shape} does not match codebook d={codebook.d}")
    codes = []
    for c in codebook.levels:
        c64 = c.astype(np.float64)
        j = int(((c64 - r) ** 2).sum(1).argmin())
        codes.append(j)
        r = r - c64[j]
    return tuple(codes)


def assign_all(x: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Vectorised :func:`assign_sid` over rows of ``x``; returns [N, levels]."""
    r = np.asarray(x, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != codebook.d:
        raise ValueError(f"embedding dimension {r.shape} does not match codebook d={codebook.d}")
    out = np.zeros((len(r), codebook.n_levels), dtype=np.int64)
    for lvl, c in enumerate(codebook.levels):
        c64 = c.astype(np.float64)
        idx, _ = _nearest(r, c64)
        out[:, lvl] = idx
        r = r - c64[idx]
    return out


def reconstruct(codes: np.ndarray, codebook: Codebook, depth: int | None = None) -> np.ndarray:
    depth = codebook.n_levels if depth is None else depth
    codes = np.atleast_2d(codes)
    out = np.zeros((len(codes), codebook.d))
    for lvl in range(depth):
        out += codebook.levels[lvl].astype(np.float64)[codes[:, lvl]]
    return out


def level_mse(x: np.ndarray, codebook: Codebook) -> list[float]:
    """Mean squared reconstruction error using levels 1..l, for each l."""
    codes = assign_all(x, codebook)
    x = np.asarray(x, dtype=np.float64)
    return [float(((x - reconstruct(codes, codebook, l)) ** 2).sum(1).mean()) for l in range(1, codebook.n_levels + 1)]


def resolve_collisions(items: Mapping[int, tuple[int, ...]], s4_max: int, seed: int = 0) -> SidIndex:
    """Append a disambiguation code so every item has a unique 4-tuple.

    Each collision group draws its codes without replacement from its own
    seeded shuffle of ``range(s4_max)``.
    """
    groups: dict[tuple[int, ...], list[int]] = {}
    for item in sorted(items):
        groups.setdefault(tuple(int(c) for c in items[item]), []).append(item)
    rng = np.random.default_rng(seed)
    sid_to_item: dict[SemanticId, int] = {}
    item_to_sid: dict[int, SemanticId] = {}
    for prefix in sorted(groups):
        members = groups[prefix]
        if len(members) > s4_max:
            raise ValueError(f"collision group {prefix} has {len(members)} items, exceeds s4_max={s4_max}")
        codes = rng.permutation(s4_max)[: len(members)]
        for item, s4 in zip(members, codes):
            sid = (*prefix, int(s4))
            sid_to_item[sid] = item
            item_to_sid[item] = sid
    return SidIndex(sid_to_item=sid_to_item, item_to_sid=item_to_sid, s4_max=s4_max)


def tokenize_catalog(
    embeddings: np.ndarray, K: int = 32, n_levels: int = 3, s4_max: int = 64, seed: int = 0
) -> tuple[Codebook, SidIndex]:
    cb = fit_codebook(embeddings, K, seed=seed, n_levels=n_levels)
    codes = assign_all(embeddings, cb)
    index = resolve_collisions({i: tuple(codes[i]) for i in range(len(codes))}, s4_max, seed=seed)
    return cb, index


# -- file format --------------------------------------------------------------

def save_codebook(path: str | Path, codebook: Codebook, index: SidIndex) -> None:
    if codebook.n_levels != 3:
        raise ValueError("the codebook file stores exactly 3 quantized levels")
    buf = bytearray(FILE_MAGIC)
    buf += struct.pack("<IIIII", FILE_VERSION, codebook.d, codebook.K, codebook.n_levels, index.s4_max)
    for c in codebook.levels:
        buf += np.ascontiguousarray(c, dtype="<f4").tobytes()
    for item in sorted(index.item_to_sid):
        buf += struct.pack("<QHHHH", item, *index.item_to_sid[item])
    Path(path).write_bytes(bytes(buf))


def load_codebook(path: str | Path, expect_d: int | None = None) -> tuple[Codebook, SidIndex]:
    raw = Path(path).read_bytes()
    if raw[:4] != FILE_MAGIC:
        raise CodebookFormatError("bad magic", 0)
    if len(raw) < 24:
        raise CodebookFormatError("truncated header", len(raw))
    version, d, K, n_levels, s4_max = struct.unpack_from("<IIIII", raw, 4)
    if version != FILE_VERSION:
        raise CodebookFormatError(f"unsupported version {version}", 4)
    if expect_d is not None and d != expect_d:
        raise ValueError(f"codebook dimension {d} does not match embeddings dimension {expect_d}")
    off = 24
    levels = []
    size = K * d * 4
    for lvl in range(n_levels):
        if off + size > len(raw):
            raise CodebookFormatError(f"truncated centroids at level {lvl + 1}", off)
        levels.append(np.frombuffer(raw, dtype="<f4", count=K * d, offset=off).reshape(K, d).astype(np.float32))
        off += size
    rec = struct.Struct("<QHHHH")
    if (len(raw) - off) % rec.size:
        last = off + (len(raw) - off) // rec.size * rec.size
        raise CodebookFormatError("truncated item/SID record", last)
    sid_to_item: dict[SemanticId, int] = {}
    item_to_sid: dict[int, SemanticId] = {}
    for item, *sid in rec.iter_unpack(raw[off:]):
        t = tuple(sid)
        if t in sid_to_item or item in item_to_sid:
            raise CodebookFormatError(f"duplicate record for item {item}", off)
        sid_to_item[t] = item
        item_to_sid[item] = t
        off += rec.size
    return Codebook(levels=levels, K=K, d=d), SidIndex(sid_to_item, item_to_sid, s4_max)
