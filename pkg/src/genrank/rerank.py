"""Candidate-aware history retrieval and rank-head scoring."""
from __future__ import annotations

import math

import numpy as np
import torch

from . import numerics as nx
from .backbone import Backbone, ContextOverflow, DecodeState
from .decode import Candidate
from .serialization import Vocab, pad_rows

LN_CLAMP = 1e-12


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(a @ b / (na * nb))


class Retriever:
    """Top-M cosine search over a user's history, using frozen item embeddings."""

    def __init__(self, embeddings: np.ndarray):
        emb = np.asarray(embeddings, dtype=np.float64)
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        if (norms == 0).any():
            raise ValueError(f"zero embedding for item {int(np.flatnonzero(norms[:, 0] == 0)[0])}")
        self.unit = emb / norms

    def retrieve(self, candidate: int, pool: list[int], M: int) -> list[int]:
        """Item IDs of the ``M`` most similar pool events, oldest first."""
        return [pool[p] for p in self.retrieve_positions(self.unit[candidate], pool, M)]

    def retrieve_positions(self, query: np.ndarray, pool: list[int], M: int) -> list[int]:
        if M <= 0 or not pool:
            return []
        sims = self.unit[np.asarray(pool)] @ (query / np.linalg.norm(query))
        pos = np.arange(len(pool))
        # primary key descending similarity, ties to the more recent event
        order = np.lexsort((-pos, -sims))[:M]
        return sorted(int(p) for p in order)


def gsu_retrieve(candidate_embedding, pool_embeddings, M: int) -> list[int]:
    """Positions (oldest first) of the ``M`` pool rows most similar to the candidate."""
    pool = np.asarray(pool_embeddings, dtype=np.float64)
    if M <= 0 or len(pool) == 0:
        return []
    r = Retriever(pool)
    return r.retrieve_positions(np.asarray(candidate_embedding, dtype=np.float64), list(range(len(pool))), M)


def score_suffixes(
    model: Backbone,
    state: DecodeState,
    rows: list[int],
    suffixes: list[list[int]],
    vocab: Vocab,
    detach_trunk: bool = False,
) -> torch.Tensor:
    """Rank logits after feeding each suffix on a branch of ``state``.

    ``rows[i]`` selects the state row suffix ``i`` continues; the logit is read
    at the suffix's last token (the candidate ITEM scoring position).
    """
    if not suffixes:
        return torch.zeros(0, dtype=nx.dtype())
    tokens, valid = pad_rows(suffixes, vocab.pad)
    branch = state.branch(rows)
    need = int((branch.next_pos + valid.sum(1)).max())
    if need > model.config.context:
        raise ContextOverflow(
            f"rerank suffix needs {need} positions (prefix {int(branch.next_pos.max())} + "
            f"suffix {tokens.shape[1]}) but the context window holds {model.config.context}"
        )
    out = model.forward_incremental(branch, tokens, valid, head=False)
    last = valid.sum(1) - 1
    h = out.hidden[torch.arange(len(suffixes)), last]
    if detach_trunk:
        h = h.detach()
    return model.rank_logit(h)


def rank_probability(model: Backbone, hidden: torch.Tensor) -> torch.Tensor:
    return model.rank_probability(hidden)


def combined_score(gen_logprob: float, yhat: float) -> float:
    return gen_logprob + math.log(max(yhat, LN_CLAMP))


def base_order(cands: list[Candidate]) -> list[Candidate]:
    return sorted(cands, key=lambda c: (-c.gen_logprob, c.sid))


def rank_order(cands: list[Candidate]) -> list[Candidate]:
    return sorted(cands, key=lambda c: (-c.score, -c.gen_logprob, c.sid))


def rerank_candidates(
    model: Backbone,
    cand_state: DecodeState,
    candidates: list[list[Candidate]],
    pools: list[list[int]],
    retriever: Retriever,
    vocab: Vocab,
    M: int,
    mode: str = "model",
    truths: list[int] | None = None,
) -> None:
    """Fill ``retrieved``, ``yhat``, ``log_yhat`` and ``score`` on every candidate in place.

    ``cand_state`` is the post-generation state from beam search (the SID
    tokens are already cached), so only the ITEM suffix is fed. ``mode`` is
    ``model``, ``constant`` (yhat = 0.5) or ``oracle`` (yhat = 1 for the true
    item, a dominated epsilon for the rest; needs ``truths``).
    """
    flat: list[Candidate] = []
    suffixes = []
    for b, cands in enumerate(candidates):
        for c in cands:
            c.retrieved = retriever.retrieve(c.item, pools[b], M)
            flat.append(c)
            suffixes.append([vocab.item(i) for i in c.retrieved] + [vocab.item(c.item)])
    if mode == "model":
        with torch.no_grad():
            logits = score_suffixes(model, cand_state, [c.row for c in flat], suffixes, vocab)
        log_y = nx.log_sigmoid(logits).double().numpy()
        y = nx.sigmoid(logits).double().numpy()
        for c, ly, yy in zip(flat, log_y, y):
            c.log_yhat, c.yhat = float(ly), float(yy)
            c.score = c.gen_logprob + max(c.log_yhat, math.log(LN_CLAMP))
    elif mode == "constant":
        for c in flat:
            c.yhat, c.log_yhat = 0.5, math.log(0.5)
            c.score = combined_score(c.gen_logprob, c.yhat)
    elif mode == "oracle":
        if truths is None:
            raise ValueError("oracle mode needs the true items")
        for b, cands in enumerate(candidates):
            if not cands:
                continue
            gens = [c.gen_logprob for c in cands]
            # ln(eps) strictly below min - max keeps every wrong candidate under the truth
            log_eps = min(gens) - max(gens) - 1.0
            for c in cands:
                hit = c.item == truths[b]
                c.log_yhat = 0.0 if hit else log_eps
                c.yhat = math.exp(c.log_yhat)
                c.score = c.gen_logprob + c.log_yhat
    else:
        raise ValueError(f"unknown yhat mode {mode!r}")
