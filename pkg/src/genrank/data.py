"""Item catalogs, user sequences, file loaders and leave-last-out splits."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EMB_MAGIC = b"EMB0"
MAX_HISTORY = 1000


@dataclass
class Catalog:
    embeddings: np.ndarray  # [N, d] float32, row i is item i
    cluster: np.ndarray | None = None  # synthetic only

    @property
    def n_items(self) -> int:
        return len(self.embeddings)

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class UserSequence:
    user_id: int
    events: list[int]  # oldest first


@dataclass
class Split:
    """Leave-last-out split.

    ``train`` maps user -> training prefix; ``valid`` and ``test`` hold
    ``(user, target_position)`` instances.
    """

    train: dict[int, list[int]] = field(default_factory=dict)
    valid: list[tuple[int, int]] = field(default_factory=list)
    test: list[tuple[int, int]] = field(default_factory=list)


def generate_synthetic(
    n_items: int = 1000,
    n_users: int = 2000,
    n_clusters: int = 8,
    markov_self_prob: float = 0.6,
    noise_sigma: float = 0.15,
    seq_len: int = 40,
    d: int = 16,
    seed: int = 0,
    repeat_prob: float = 0.0,
) -> tuple[Catalog, list[UserSequence]]:
    """Clustered catalog plus Markov-chain user walks.

    With probability ``repeat_prob`` a step re-emits an item the user already
    consumed from the current cluster (when there is one) instead of drawing
    uniformly from the cluster.
    """
    if not 1 <= n_clusters <= n_items:
        raise ValueError(f"n_clusters must be in [1, n_items], got {n_clusters}")
    if not 0 < markov_self_prob <= 1:
        raise ValueError(f"markov_self_prob must be in (0, 1], got {markov_self_prob}")
    if noise_sigma < 0 or seq_len < 2 or n_users < 1 or not 0 <= repeat_prob <= 1:
        raise ValueError("noise_sigma >= 0, seq_len >= 2, n_users >= 1, repeat_prob in [0, 1] required")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_clusters, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    # every cluster gets at least one item
    cluster = np.concatenate([np.arange(n_clusters), rng.integers(n_clusters, size=n_items - n_clusters)])
    rng.shuffle(cluster)
    emb = centers[cluster] + rng.normal(scale=noise_sigma, size=(n_items, d)) if noise_sigma > 0 else centers[cluster].copy()
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    members = [np.flatnonzero(cluster == g) for g in range(n_clusters)]

    users = []
    for u in range(n_users):
        state = int(rng.integers(n_clusters))
        events: list[int] = []
        for t in range(seq_len):
            if t > 0 and n_clusters > 1 and rng.random() >= markov_self_prob:
                # move to one of the other clusters, uniformly
                state = (state + 1 + int(rng.integers(n_clusters - 1))) % n_clusters
            if repeat_prob > 0 and rng.random() < repeat_prob:
                seen = sorted({e for e in events if cluster[e] == state})
                if seen:
                    events.append(int(seen[rng.integers(len(seen))]))
                    continue
            events.append(int(members[state][rng.integers(len(members[state]))]))
        users.append(UserSequence(u, events))
    return Catalog(emb.astype(np.float32), cluster), users


# -- files --------------------------------------------------------------------

def write_embeddings(path: str | Path, embeddings: np.ndarray) -> None:
    emb = np.asarray(embeddings, dtype="<f4")
    n, d = emb.shape
    rec = np.zeros(n, dtype=[("id", "<u8"), ("v", "<f4", (d,))])
    rec["id"] = np.arange(n)
    rec["v"] = emb
    Path(path).write_bytes(EMB_MAGIC + struct.pack("<QI", n, d) + rec.tobytes())


def read_embeddings(path: str | Path) -> dict[int, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != EMB_MAGIC or len(raw) < 16:
        raise ValueError(f"{path}: not an embeddings file (bad header)")
    n, d = struct.unpack_from("<QI", raw, 4)
    size = 8 + 4 * d
    body = raw[16:]
    if len(body) != n * size:
        full = len(body) // size
        raise ValueError(f"{path}: malformed record {full} (expected {n} records of {size} bytes)")
    rec = np.frombuffer(body, dtype=[("id", "<u8"), ("v", "<f4", (d,))], count=n)
    out: dict[int, np.ndarray] = {}
    for i, r in enumerate(rec):
        v = np.array(r["v"], dtype=np.float32)
        if not np.isfinite(v).all() or not v.any():
            raise ValueError(f"{path}: malformed record {i} (non-finite or zero embedding)")
        out[int(r["id"])] = v
    return out


def write_sequences(path: str | Path, users: list[UserSequence]) -> None:
    with open(path, "w") as fh:
        for u in users:
            fh.write(f"{u.user_id}\t{','.join(map(str, u.events))}\n")


def read_sequences(path: str | Path) -> list[UserSequence]:
    users = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                uid, events = line.split("\t")
                users.append(UserSequence(int(uid), [int(e) for e in events.split(",") if e]))
            except ValueError:
                raise ValueError(f"{path}: malformed record {i}") from None
    return users


def load_taobao_mm(
    embeddings_path: str | Path, sequences_path: str | Path, max_history: int = MAX_HISTORY
) -> tuple[Catalog, list[UserSequence], int]:
    """Load embeddings and sequences; returns ``(catalog, users, dropped_events)``.

    Item IDs are remapped to dense ``[0, N)`` in ascending order of the file IDs;
    the returned sequences use the dense IDs.
    """
    emb = read_embeddings(embeddings_path)
    ids = sorted(emb)
    dense = {raw: i for i, raw in enumerate(ids)}
    matrix = np.stack([emb[i] for i in ids]) if ids else np.zeros((0, 0), np.float32)
    dropped = 0
    users = []
    for u in read_sequences(sequences_path):
        kept = [dense[e] for e in u.events if e in dense]
        dropped += len(u.events) - len(kept)
        users.append(UserSequence(u.user_id, kept[-max_history:]))
    if dropped:
        log.warning("dropped %d events referencing items without embeddings", dropped)
    return Catalog(matrix), users, dropped


def make_splits(users: list[UserSequence], protocol: str = "leave-last-out") -> Split:
    if protocol != "leave-last-out":
        raise ValueError(f"unknown split protocol {protocol!r}")
    split = Split()
    for u in users:
        n = len(u.events)
        if n < 3:
            split.train[u.user_id] = list(u.events)
            continue
        split.train[u.user_id] = list(u.events[: n - 2])
        split.valid.append((u.user_id, n - 2))
        split.test.append((u.user_id, n - 1))
    return split


def training_windows(split: Split) -> list[tuple[int, int]]:
    """Sliding next-item targets over each user's training prefix, as ``(user, target_position)``."""
    out = []
    for uid in sorted(split.train):
        n = len(split.train[uid])
        out.extend((uid, t) for t in range(1, n))
    return out
