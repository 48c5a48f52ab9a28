"""Hierarchical beam search over SID levels with KV-cache reuse."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import torch

from .backbone import Backbone, DecodeState
from .serialization import N_SID, Vocab, pad_rows, serialize_history
from .tokenizer import SidIndex


@dataclass
class Candidate:
    sid: tuple[int, ...]
    item: int
    gen_logprob: float
    row: int = -1  # row of this candidate's branch in the post-generation state
    retrieved: list[int] = field(default_factory=list)
    yhat: float = float("nan")
    log_yhat: float = float("nan")
    score: float = float("nan")


@dataclass
class BeamResult:
    candidates: list[list[Candidate]]  # per batch row, sorted by gen_logprob desc
    state: DecodeState  # one row per surviving beam; Candidate.row indexes it
    steps: int = 0  # incremental forward calls
    dropped: int = 0  # invalid SIDs discarded in unconstrained mode
    trace: list[tuple[int, int, tuple[int, ...], float]] = field(default_factory=list)


def level_log_probs(log_probs: torch.Tensor, vocab: Vocab, level: int) -> torch.Tensor:
    """Log-softmax restricted to the token range of one SID level."""
    lo = vocab.level_offset(level)
    sl = log_probs[..., lo : lo + vocab.level_size(level)]
    return sl - torch.logsumexp(sl, dim=-1, keepdim=True)


def beam_search(
    model: Backbone,
    state: DecodeState,
    first_log_probs: torch.Tensor,
    index: SidIndex,
    vocab: Vocab,
    beam: int,
    constrained: bool = True,
    record_trace: bool = False,
) -> BeamResult:
    """Generate up to ``beam`` SIDs per batch row.

    ``state`` holds each row's prefix ending in BOS; ``first_log_probs`` is
    ``[B, V]``, the next-token distribution read at that BOS.
    """
    if beam < 1:
        raise ValueError(f"beam width must be >= 1, got {beam}")
    if len(index) == 0:
        raise ValueError("empty SID trie")
    B = state.batch
    # live beams: (batch row, prefix, score); beam r lives in row r of `state`
    beams: list[tuple[int, tuple[int, ...], float]] = [(b, (), 0.0) for b in range(B)]
    log_probs = first_log_probs
    steps = 0
    trace = []
    for level in range(1, N_SID + 1):
        lp = level_log_probs(log_probs, vocab, level).detach().double().cpu().numpy()
        per_row: list[list[tuple[float, tuple[int, ...], int]]] = [[] for _ in range(B)]
        for r, (b, prefix, score) in enumerate(beams):
            kids = index.children(prefix) if constrained else range(vocab.level_size(level))
            row_lp = lp[r]
            for code in kids:
                per_row[b].append((score + float(row_lp[code]), prefix + (code,), r))
        new_beams = []
        parents = []
        for b in range(B):
            ranked = sorted(per_row[b], key=lambda e: (-e[0], e[1]))[:beam]
            for score, prefix, r in ranked:
                new_beams.append((b, prefix, score))
                parents.append(r)
                if record_trace:
                    trace.append((b, level, prefix, score))
        beams = new_beams
        tokens = torch.tensor([[vocab.sid(level, p[-1])] for _, p, _ in beams], dtype=torch.long)
        out = model.forward_incremental(state.branch(parents), tokens.view(-1, 1), head=level < N_SID)
        steps += 1
        state = out.state
        if level < N_SID:
            log_probs = out.log_probs[:, -1]

    cands: list[list[Candidate]] = [[] for _ in range(B)]
    dropped = 0
    for r, (b, sid, score) in enumerate(beams):
        item = map_sid_to_item(sid, index)
        if item is None:
            dropped += 1
            continue
        cands[b].append(Candidate(sid=sid, item=item, gen_logprob=score, row=r))
    for lst in cands:
        lst.sort(key=lambda c: (-c.gen_logprob, c.sid))
    return BeamResult(cands, state, steps, dropped, trace)


def map_sid_to_item(sid: tuple[int, ...], index: SidIndex) -> int | None:
    return index.sid_to_item.get(tuple(sid))


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "level", "sid_prefix", "logprob"])
        for b, level, prefix, score in trace:
            w.writerow([b, level, "-".join(map(str, prefix)), f"{score:.6f}"])


def start_generation(model: Backbone, windows: list[list[int]], index: SidIndex, vocab: Vocab):
    """Encode each history window plus a trailing BOS.

    Returns the prefix state and the ``[B, V]`` log-probs read at each BOS.
    """
    rows = [serialize_history(w, index, vocab).tokens + [vocab.bos] for w in windows]
    tokens, valid = pad_rows(rows, vocab.pad)
    out = model.forward_full(tokens, valid)
    last = valid.sum(1) - 1
    return out.state, out.log_probs[torch.arange(len(rows)), last]
