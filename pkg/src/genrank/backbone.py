"""Decoder-only transformer shared by SID generation and reranking.

The same code path serves full-sequence and incremental forwards: a full
forward is an incremental forward from an empty :class:`DecodeState`.
Batches are right-padded; ``valid`` masks padded positions out of attention.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import numerics as nx

CKPT_MAGIC = b"RCKP"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    context: int = 256
    dropout: float = 0.0
    seed: int = 0
    init_std: float = 0.02

    def validate(self) -> None:
        if min(self.vocab_size, self.n_layers, self.d_model, self.n_heads, self.d_ff, self.context) < 1:
            raise ValueError(f"all model sizes must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class ContextOverflow(ValueError):
    pass


@dataclass(frozen=True)
class DecodeState:
    """Per-layer key/value caches for a batch of sequences.

    keys/values: one ``[B, H, T, Dh]`` tensor per layer; ``valid`` is ``[B, T]``;
    ``next_pos`` is ``[B]``, the position index the next real token takes.
    Extending a state always builds new tensors, so a parent is never mutated.
    """

    keys: tuple[torch.Tensor, ...]
    values: tuple[torch.Tensor, ...]
    valid: torch.Tensor
    next_pos: torch.Tensor

    @property
    def batch(self) -> int:
        return self.valid.shape[0]

    @property
    def count(self) -> int:
        return self.valid.shape[1]

    def branch(self, rows) -> "DecodeState":
        """Select (and possibly repeat) batch rows, e.g. one row per beam."""
        rows = torch.as_tensor(rows, dtype=torch.long)
        return DecodeState(
            tuple(k.index_select(0, rows) for k in self.keys),
            tuple(v.index_select(0, rows) for v in self.values),
            self.valid.index_select(0, rows),
            self.next_pos.index_select(0, rows),
        )

    def detach(self) -> "DecodeState":
        return DecodeState(
            tuple(k.detach() for k in self.keys),
            tuple(v.detach() for v in self.values),
            self.valid,
            self.next_pos,
        )

    def truncate(self, lengths) -> "DecodeState":
        """Keep positions ``< lengths[b]`` valid per row (cache tensors keep their width)."""
        lengths = torch.as_tensor(lengths, dtype=torch.long)
        keep = torch.arange(self.count)[None, :] < lengths[:, None]
        return DecodeState(self.keys, self.values, self.valid & keep, torch.minimum(self.next_pos, lengths))


class Output(NamedTuple):
    hidden: torch.Tensor  # [B, n, d_model] after the final layer norm
    log_probs: torch.Tensor | None  # [B, n, V] next-token log-softmax
    state: DecodeState


class Backbone(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        g = torch.Generator().manual_seed(c.seed)
        dt = nx.dtype()

        def w(*shape):
            return nn.Parameter(torch.randn(*shape, generator=g, dtype=torch.float64).to(dt) * c.init_std)

        def zeros(*shape):
            return nn.Parameter(torch.zeros(*shape, dtype=dt))

        def ones(*shape):
            return nn.Parameter(torch.ones(*shape, dtype=dt))

        self.tok_emb = w(c.vocab_size, c.d_model)
        self.pos_emb = w(c.context, c.d_model)
        self.blocks = nn.ModuleList()
        for _ in range(c.n_layers):
            blk = nn.Module()
            blk.ln1_w, blk.ln1_b = ones(c.d_model), zeros(c.d_model)
            # no key bias: it shifts every score of a query equally, so softmax ignores it
            blk.qkv_w, blk.q_b, blk.v_b = w(c.d_model, 3 * c.d_model), zeros(c.d_model), zeros(c.d_model)
            blk.out_w, blk.out_b = w(c.d_model, c.d_model), zeros(c.d_model)
            blk.ln2_w, blk.ln2_b = ones(c.d_model), zeros(c.d_model)
            blk.ff1_w, blk.ff1_b = w(c.d_model, c.d_ff), zeros(c.d_ff)
            blk.ff2_w, blk.ff2_b = w(c.d_ff, c.d_model), zeros(c.d_model)
            self.blocks.append(blk)
        self.lnf_w, self.lnf_b = ones(c.d_model), zeros(c.d_model)
        self.sid_w, self.sid_b = w(c.d_model, c.vocab_size), zeros(c.vocab_size)
        self.rank_w, self.rank_b = w(c.d_model, 1), zeros(1)

    # -- state ----------------------------------------------------------------

    def empty_state(self, batch: int) -> DecodeState:
        c = self.config
        z = torch.zeros(batch, c.n_heads, 0, c.head_dim, dtype=self.tok_emb.dtype)
        return DecodeState(
            tuple(z for _ in range(c.n_layers)),
            tuple(z for _ in range(c.n_layers)),
            torch.zeros(batch, 0, dtype=torch.bool),
            torch.zeros(batch, dtype=torch.long),
        )

    # -- forward --------------------------------------------------------------

    def forward_incremental(
        self,
        state: DecodeState,
        tokens,
        valid: torch.Tensor | None = None,
        head: bool = True,
    ) -> Output:
        """Consume ``tokens`` ``[B, n]`` on top of ``state``.

        Padding must be trailing within each row of ``tokens``.
        """
        c = self.config
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.dim() == 1:
            tokens = tokens[None, :]
        B, n = tokens.shape
        if B != state.batch:
            raise nx.ShapeError("forward_incremental", tuple(tokens.shape), (state.batch, state.count))
        valid = torch.ones(B, n, dtype=torch.bool) if valid is None else torch.as_tensor(valid, dtype=torch.bool)
        if n == 0:
            empty = torch.zeros(B, 0, c.d_model, dtype=self.tok_emb.dtype)
            return Output(empty, self._head(empty) if head else None, state)
        n_valid = valid.sum(1)
        end = state.next_pos + n_valid
        if int(end.max()) > c.context:
            raise ContextOverflow(
                f"sequence needs {int(end.max())} positions but the context window holds {c.context}"
            )
        positions = (state.next_pos[:, None] + torch.arange(n)[None, :]).clamp(max=c.context - 1)
        x = nx.embedding(tokens, self.tok_emb) + nx.embedding(positions, self.pos_emb)

        key_valid = torch.cat([state.valid, valid], dim=1)  # [B, T + n]
        T = state.count
        causal = torch.ones(n, T + n, dtype=torch.bool)
        causal[:, T:] = torch.tril(torch.ones(n, n, dtype=torch.bool))
        allowed = key_valid[:, None, :] & causal[None, :, :]
        allowed[:, :, T:] |= torch.eye(n, dtype=torch.bool)[None]  # a pad query may always see itself
        allowed = allowed[:, None, :, :]  # [B, 1, n, T + n]

        new_keys, new_values = [], []
        for layer, blk in enumerate(self.blocks):
            h = nx.layer_norm(x, blk.ln1_w, blk.ln1_b)
            q, k, v = nx.linear(h, blk.qkv_w).split(c.d_model, dim=-1)
            q, v = q + blk.q_b, v + blk.v_b
            q = q.view(B, n, c.n_heads, c.head_dim).transpose(1, 2)
            k = k.view(B, n, c.n_heads, c.head_dim).transpose(1, 2)
            v = v.view(B, n, c.n_heads, c.head_dim).transpose(1, 2)
            k = torch.cat([state.keys[layer], k], dim=2)
            v = torch.cat([state.values[layer], v], dim=2)
            new_keys.append(k)
            new_values.append(v)
            att = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed)
            att = att.transpose(1, 2).reshape(B, n, c.d_model)
            x = x + self._drop(nx.linear(att, blk.out_w, blk.out_b))
            h = nx.layer_norm(x, blk.ln2_w, blk.ln2_b)
            h = nx.linear(nx.gelu(nx.linear(h, blk.ff1_w, blk.ff1_b)), blk.ff2_w, blk.ff2_b)
            x = x + self._drop(h)
        hidden = nx.layer_norm(x, self.lnf_w, self.lnf_b)
        new_state = DecodeState(tuple(new_keys), tuple(new_values), key_valid, end)
        return Output(hidden, self._head(hidden) if head else None, new_state)

    def forward_full(self, tokens, valid: torch.Tensor | None = None, head: bool = True) -> Output:
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.dim() == 1:
            tokens = tokens[None, :]
        return self.forward_incremental(self.empty_state(tokens.shape[0]), tokens, valid, head=head)

    def _drop(self, x: torch.Tensor) -> torch.Tensor:
        p = self.config.dropout
        return F.dropout(x, p, training=True) if (p > 0 and self.training) else x

    def _head(self, hidden: torch.Tensor) -> torch.Tensor:
        return nx.log_softmax(nx.linear(hidden, self.sid_w, self.sid_b), dim=-1)

    def sid_log_probs(self, hidden: torch.Tensor) -> torch.Tensor:
        return self._head(hidden)

    def rank_logit(self, hidden: torch.Tensor) -> torch.Tensor:
        return nx.linear(hidden, self.rank_w, self.rank_b).squeeze(-1)

    def rank_probability(self, hidden: torch.Tensor) -> torch.Tensor:
        return nx.sigmoid(self.rank_logit(hidden))


def init_model(config: ModelConfig) -> Backbone:
    return Backbone(config)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path: str | Path, model: Backbone, extra: dict | None = None) -> None:
    """``RCKP`` | version | config JSON block | named float32 tensors, little-endian."""
    block = json.dumps({"model": asdict(model.config), "extra": extra or {}}, sort_keys=True).encode()
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(block)) + block
    params = dict(model.named_parameters())
    buf += struct.pack("<I", len(params))
    for name, p in params.items():
        nb = name.encode()
        arr = p.detach().cpu().numpy().astype("<f4")
        buf += struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> tuple[Backbone, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, blen = struct.unpack_from("<II", raw, 4)
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        meta = json.loads(raw[off : off + blen])
        off += blen
        model = Backbone(ModelConfig(**meta["model"]))
        params = dict(model.named_parameters())
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        seen = set()
        for _ in range(count):
            (nl,) = struct.unpack_from("<I", raw, off)
            name = raw[off + 4 : off + 4 + nl].decode()
            off += 4 + nl
            (ndim,) = struct.unpack_from("<I", raw, off)
            shape = struct.unpack_from(f"<{ndim}I", raw, off + 4)
            off += 4 + 4 * ndim
            size = int(np.prod(shape)) * 4
            if off + size > len(raw):
                raise ValueError(f"{path}: truncated tensor {name!r} at byte {off}")
            arr = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=off).reshape(shape)
            off += size
            if name not in params or tuple(params[name].shape) != tuple(shape):
                raise ValueError(f"{path}: unexpected tensor {name!r} with shape {shape}")
            with torch.no_grad():
                params[name].copy_(torch.from_numpy(arr.copy()))
            seen.add(name)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint ({exc})") from None
    missing = set(params) - seen
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    return model, meta.get("extra", {})
