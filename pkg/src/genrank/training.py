"""Stage I SID pretraining and Stage II joint generate/retrieve/rerank training."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import numerics as nx
from .backbone import Backbone
from .data import MAX_HISTORY
from .decode import Candidate, beam_search
from .rerank import LN_CLAMP, Retriever, score_suffixes
from .serialization import BLOCK, Vocab, pad_rows, serialize_history
from .tokenizer import SidIndex

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-4
    warmup_steps: int = 200
    total_steps: int = 5000
    batch_size: int = 16
    grad_accum: int = 1
    beam: int = 20
    retrieval: int = 10
    window: int = 32
    seed: int = 0
    rank_pos_weight: bool = False  # reweight positives by the beam width
    head_only_rank: bool = False  # stop rank-loss gradients at the rank head
    use_rank_loss: bool = True
    log_every: int = 50

    def validate(self) -> None:
        ints = (self.warmup_steps, self.total_steps, self.batch_size, self.grad_accum, self.beam, self.window)
        if min(ints) < 1 or self.retrieval < 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError(f"invalid training config: {self}")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` then cosine decay to zero at ``total_steps``."""
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    frac = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """torch AdamW with explicit per-step gradients and learning rate."""

    def __init__(self, params: dict[str, torch.Tensor], weight_decay: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.opt = torch.optim.AdamW(list(params.values()), lr=0.0, betas=betas, eps=eps, weight_decay=weight_decay)

    def step(self, grads: dict[str, torch.Tensor], lr: float) -> None:
        for name, g in grads.items():
            if not torch.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        for name, p in self.params.items():
            p.grad = grads[name].detach().clone()
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.opt.step()
        for p in self.params.values():
            p.grad = None


def optimizer_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], lr: float, weight_decay: float, opt: AdamW | None = None) -> AdamW:
    opt = opt or AdamW(params, weight_decay)
    opt.step(grads, lr)
    return opt


# -- losses -------------------------------------------------------------------

def sid_nll(log_probs: torch.Tensor, tokens: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """Per-row NLL of the SID targets: position i predicts token i + 1 where the mask is set."""
    if not bool(target_mask[:, :-1].any()):
        raise ValueError("sequence has no supervised SID targets")
    picked = log_probs[:, :-1].gather(-1, tokens[:, 1:, None]).squeeze(-1)
    mask = target_mask[:, :-1].to(picked.dtype)
    return -(picked * mask).sum(1)


def sid_nll_from_hidden(model: Backbone, hidden: torch.Tensor, tokens: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """Same value as :func:`sid_nll`, applying the vocab head only at supervised positions."""
    if not bool(target_mask[:, :-1].any()):
        raise ValueError("sequence has no supervised SID targets")
    rows, cols = target_mask[:, :-1].nonzero(as_tuple=True)
    lp = model.sid_log_probs(hidden[rows, cols])
    picked = lp.gather(-1, tokens[rows, cols + 1][:, None]).squeeze(-1)
    return -torch.zeros(tokens.shape[0], dtype=picked.dtype).index_add(0, rows, picked)


def loss_sid(model: Backbone, seq) -> torch.Tensor:
    """Teacher-forced SID loss of one serialized sequence (sum over its targets)."""
    tokens = torch.as_tensor(seq.tokens, dtype=torch.long)[None]
    mask = torch.as_tensor(seq.target_mask, dtype=torch.bool)[None]
    out = model.forward_full(tokens)
    return sid_nll(out.log_probs, tokens, mask)[0]


def make_beam_labels(candidates: list[Candidate], truth_sid: tuple[int, ...]) -> list[int]:
    truth = tuple(truth_sid)
    return [int(tuple(c.sid) == truth) for c in candidates]


def bce_terms(yhats: torch.Tensor, labels, pos_weight: float = 1.0) -> torch.Tensor:
    """Per-candidate binary cross-entropy with log arguments clamped at 1e-12."""
    yhats = torch.as_tensor(yhats, dtype=nx.dtype())
    y = torch.as_tensor(labels, dtype=yhats.dtype)
    if yhats.shape != y.shape:
        raise ValueError(f"{yhats.numel()} predictions vs {y.numel()} labels")
    pos = torch.log(yhats.clamp(min=LN_CLAMP))
    neg = torch.log((1 - yhats).clamp(min=LN_CLAMP))
    return -(pos_weight * y * pos + (1 - y) * neg)


def loss_rank(yhats, labels, pos_weight: float = 1.0) -> torch.Tensor:
    """Binary cross-entropy summed (not averaged) over beam candidates."""
    return bce_terms(yhats, labels, pos_weight).sum()


# -- batches ------------------------------------------------------------------

@dataclass
class Batch:
    tokens: torch.Tensor
    valid: torch.Tensor
    target_mask: torch.Tensor
    prefix_len: torch.Tensor  # positions up to and including the target's BOS
    truth_items: list[int]
    truth_sids: list[tuple[int, ...]]
    pools: list[list[int]]


def make_batch(
    instances: list[tuple[list[int], int]], window: int, index: SidIndex, vocab: Vocab
) -> Batch:
    """``instances`` are ``(events, target_position)``; input is the last ``window`` events before the target."""
    rows, masks, plen, truths, pools = [], [], [], [], []
    for events, t in instances:
        hist = events[max(0, t - window) : t]
        seq = serialize_history(hist + [events[t]], index, vocab)
        rows.append(seq.tokens)
        masks.append(seq.target_mask)
        plen.append(BLOCK * len(hist) + 1)
        truths.append(events[t])
        pools.append(events[max(0, t - MAX_HISTORY) : t])
    tokens, valid = pad_rows(rows, vocab.pad)
    tmask = torch.zeros_like(valid)
    for i, m in enumerate(masks):
        tmask[i, : len(m)] = torch.as_tensor(m)
    return Batch(
        tokens, valid, tmask, torch.as_tensor(plen), truths, [index.item_to_sid[x] for x in truths], pools
    )


@dataclass
class StepResult:
    loss_sid: torch.Tensor  # [B]
    loss_rank: torch.Tensor  # [B]
    candidates: list[list[Candidate]] = field(default_factory=list)
    labels: list[list[int]] = field(default_factory=list)

    @property
    def total(self) -> torch.Tensor:
        return self.loss_sid + self.loss_rank


def generate_candidates(model: Backbone, batch: Batch, index: SidIndex, vocab: Vocab, beam: int, out=None):
    """Beam search from each instance's history prefix, without gradient recording."""
    with torch.no_grad():
        if out is None:
            out = model.forward_full(batch.tokens, batch.valid, head=False)
        state = out.state.detach().truncate(batch.prefix_len)
        first = model.sid_log_probs(out.hidden.detach()[torch.arange(len(batch.truth_items)), batch.prefix_len - 1])
        return beam_search(model, state, first, index, vocab, beam).candidates


def stage2_losses(
    model: Backbone,
    batch: Batch,
    index: SidIndex,
    vocab: Vocab,
    retriever: Retriever,
    cfg: TrainConfig,
    candidates: list[list[Candidate]] | None = None,
    with_rank: bool = True,
) -> StepResult:
    """Teacher-forced SID loss plus beam-level rank loss.

    The rank suffix ``[s1..s4, ITEM(retrieved)..., ITEM(candidate)]`` continues
    the grad-carrying prefix cache of the teacher-forced pass, so rank-loss
    gradients reach the shared trunk. Passing ``candidates`` skips beam search.
    """
    out = model.forward_full(batch.tokens, batch.valid, head=False)
    l_sid = sid_nll_from_hidden(model, out.hidden, batch.tokens, batch.target_mask)
    B = len(batch.truth_items)
    if not with_rank:
        return StepResult(l_sid, torch.zeros_like(l_sid))
    if candidates is None:
        candidates = generate_candidates(model, batch, index, vocab, cfg.beam, out)
    prefix = out.state.truncate(batch.prefix_len)
    rows, suffixes, labels = [], [], []
    for b, cands in enumerate(candidates):
        lab = make_beam_labels(cands, batch.truth_sids[b])
        labels.append(lab)
        for c, y in zip(cands, lab):
            c.retrieved = retriever.retrieve(c.item, batch.pools[b], cfg.retrieval)
            rows.append(b)
            suffixes.append(
                [vocab.sid(level, code) for level, code in enumerate(c.sid, start=1)]
                + [vocab.item(i) for i in c.retrieved]
                + [vocab.item(c.item)]
            )
    l_rank = torch.zeros(B, dtype=l_sid.dtype)
    if suffixes:
        logits = score_suffixes(model, prefix, rows, suffixes, vocab, detach_trunk=cfg.head_only_rank)
        flat_labels = [y for lab in labels for y in lab]
        pw = float(cfg.beam) if cfg.rank_pos_weight else 1.0
        terms = bce_terms(nx.sigmoid(logits), flat_labels, pw)
        l_rank = l_rank.index_add(0, torch.as_tensor(rows), terms)
    return StepResult(l_sid, l_rank, candidates, labels)


# -- loops --------------------------------------------------------------------

def train(
    model: Backbone,
    instances: list[tuple[list[int], int]],
    index: SidIndex,
    vocab: Vocab,
    cfg: TrainConfig,
    stage: int,
    retriever: Retriever | None = None,
    metrics_path: str | Path | None = None,
    on_log: Callable[[int, dict], None] | None = None,
) -> list[dict]:
    """Run ``cfg.total_steps`` optimizer steps of stage 1 or 2.

    Returns the logged metric rows (step, loss_sid, loss_rank, lr).
    """
    cfg.validate()
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if stage == 2 and retriever is None:
        raise ValueError("stage 2 needs a retriever")
    rng = np.random.default_rng(cfg.seed)
    params = dict(model.named_parameters())
    opt = AdamW(params, cfg.weight_decay)
    rows: list[dict] = []
    fh = open(metrics_path, "w", newline="") if metrics_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(["step", "loss_sid", "loss_rank", "lr"])
    skipped = 0
    model.train()
    try:
        for step in range(cfg.total_steps):
            lr = lr_at(step + 1, cfg)
            grads = {n: torch.zeros_like(p) for n, p in params.items()}
            acc_sid = acc_rank = 0.0
            for _ in range(cfg.grad_accum):
                pick = rng.integers(len(instances), size=cfg.batch_size)
                batch = make_batch([instances[i] for i in pick], cfg.window, index, vocab)
                if stage == 1:
                    res = stage2_losses(model, batch, index, vocab, retriever, cfg, with_rank=False)
                else:
                    res = stage2_losses(model, batch, index, vocab, retriever, cfg, with_rank=cfg.use_rank_loss)
                    skipped += sum(1 for c in res.candidates if not c)
                loss = res.total.mean() / cfg.grad_accum
                for n, g in nx.backward(loss, params).items():
                    grads[n] += g
                acc_sid += float(res.loss_sid.detach().mean()) / cfg.grad_accum
                acc_rank += float(res.loss_rank.detach().mean()) / cfg.grad_accum
            opt.step(grads, lr)
            if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
                row = {"step": step, "loss_sid": acc_sid, "loss_rank": acc_rank, "lr": lr}
                rows.append(row)
                if writer:
                    writer.writerow([step, f"{acc_sid:.6f}", f"{acc_rank:.6f}", f"{lr:.8g}"])
                    fh.flush()
                log.info("stage%d step %d loss_sid %.4f loss_rank %.4f lr %.3g", stage, step, acc_sid, acc_rank, lr)
                if on_log:
                    on_log(step, row)
    finally:
        model.eval()
        if fh:
            fh.close()
    if skipped:
        log.warning("%d instances produced an empty beam", skipped)
    return rows


def mean_losses(
    model: Backbone,
    instances: list[tuple[list[int], int]],
    index: SidIndex,
    vocab: Vocab,
    cfg: TrainConfig,
    retriever: Retriever | None = None,
    with_rank: bool = False,
    batch_size: int = 64,
) -> tuple[float, float]:
    """Mean per-instance (loss_sid, loss_rank) without parameter updates."""
    tot_sid = tot_rank = 0.0
    with torch.no_grad():
        for i in range(0, len(instances), batch_size):
            batch = make_batch(instances[i : i + batch_size], cfg.window, index, vocab)
            res = stage2_losses(model, batch, index, vocab, retriever, cfg, with_rank=with_rank)
            tot_sid += float(res.loss_sid.sum())
            tot_rank += float(res.loss_rank.sum())
    n = max(len(instances), 1)
    return tot_sid / n, tot_rank / n
