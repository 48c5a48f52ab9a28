"""Recall/NDCG for generation-score (Base) and combined-score (Rank) orderings."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .backbone import Backbone
from .data import MAX_HISTORY
from .decode import Candidate, beam_search, start_generation
from .rerank import Retriever, base_order, rank_order, rerank_candidates
from .serialization import Vocab
from .tokenizer import SidIndex

KS = (5, 10)
AXES = ("beam", "seq_len", "retrieval_len")


def recall_at_k(ranked_items: list[int], truth: int, K: int) -> int:
    if K < 1:
        raise ValueError("K must be >= 1")
    return int(truth in ranked_items[:K])


def ndcg_at_k(ranked_items: list[int], truth: int, K: int) -> float:
    """Single relevant item, so the ideal DCG is 1."""
    if K < 1:
        raise ValueError("K must be >= 1")
    for r, item in enumerate(ranked_items[:K], start=1):
        if item == truth:
            return 1.0 / math.log2(r + 1)
    return 0.0


@dataclass
class EvalConfig:
    beam: int = 20
    retrieval: int = 10
    seq_len: int = 32
    batch_size: int = 16
    yhat_mode: str = "model"  # model | constant | oracle
    constrained: bool = True
    ks: tuple[int, ...] = KS


@dataclass
class EvalInstance:
    user: int
    truth: int
    base: list[int]
    rank: list[int]
    candidates: list[Candidate] = field(default_factory=list)


@dataclass
class EvalResult:
    instances: list[EvalInstance]
    skipped: int = 0
    dropped: int = 0

    def metric(self, name: str, ordering: str, K: int) -> float:
        fn = recall_at_k if name == "recall" else ndcg_at_k
        if not self.instances:
            return 0.0
        vals = [fn(getattr(i, ordering), i.truth, K) for i in self.instances]
        return float(np.mean(vals))

    def table(self, ks=KS) -> list[tuple[str, float, float]]:
        """``(metric, base, rank)`` rows in the order Recall@K..., NDCG@K..."""
        rows = []
        for name, label in (("recall", "Recall"), ("ndcg", "NDCG")):
            for K in ks:
                rows.append((f"{label}@{K}", self.metric(name, "base", K), self.metric(name, "rank", K)))
        return rows

    def beam_hit_rate(self) -> float:
        if not self.instances:
            return 0.0
        return float(np.mean([any(c.item == i.truth for c in i.candidates) for i in self.instances]))


def rel_gain(base: float, rank: float) -> float:
    return (rank - base) / base * 100.0 if base > 0 else float("nan")


def evaluate(
    model: Backbone,
    users: dict[int, list[int]],
    instances: list[tuple[int, int]],
    index: SidIndex,
    vocab: Vocab,
    retriever: Retriever,
    cfg: EvalConfig,
    keep_candidates: bool = False,
) -> EvalResult:
    """Generate, retrieve and rerank for every ``(user, target_position)`` instance."""
    if cfg.yhat_mode not in ("model", "constant", "oracle"):
        raise ValueError(f"unknown yhat mode {cfg.yhat_mode!r}")
    model.eval()
    todo = []
    skipped = 0
    for uid, t in instances:
        events = users[uid]
        truth = events[t]
        if truth not in index.item_to_sid or t < 1:
            skipped += 1
            continue
        todo.append((uid, events, t))
    out: list[EvalInstance] = []
    dropped = 0
    with torch.no_grad():
        for s in range(0, len(todo), cfg.batch_size):
            chunk = todo[s : s + cfg.batch_size]
            windows = [ev[max(0, t - cfg.seq_len) : t] for _, ev, t in chunk]
            pools = [ev[max(0, t - MAX_HISTORY) : t] for _, ev, t in chunk]
            truths = [ev[t] for _, ev, t in chunk]
            state, first = start_generation(model, windows, index, vocab)
            res = beam_search(model, state, first, index, vocab, cfg.beam, constrained=cfg.constrained)
            dropped += res.dropped
            rerank_candidates(
                model, res.state, res.candidates, pools, retriever, vocab, cfg.retrieval, cfg.yhat_mode, truths
            )
            for (uid, _, _), truth, cands in zip(chunk, truths, res.candidates):
                base = [c.item for c in base_order(cands)]
                rank = [c.item for c in rank_order(cands)]
                assert sorted(base) == sorted(rank)
                out.append(EvalInstance(uid, truth, base, rank, cands if keep_candidates else []))
    return EvalResult(out, skipped, dropped)


# -- reporting ----------------------------------------------------------------

CSV_HEADER = ["axis_value", "metric", "base", "rank", "rel_gain_pct"]


def result_rows(axis_value, result: EvalResult, ks=KS) -> list[list[str]]:
    rows = []
    for metric, base, rank in result.table(ks):
        g = rel_gain(base, rank)
        rows.append([str(axis_value), metric, f"{base:.4f}", f"{rank:.4f}", "nan" if math.isnan(g) else f"{g:+.2f}"])
    return rows


def write_csv(path_or_buf, rows: list[list[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(rows)
    text = buf.getvalue()
    if path_or_buf is not None:
        with open(path_or_buf, "w", newline="") as fh:
            fh.write(text)
    return text


def format_table(axis: str, rows: list[list[str]], ks=KS) -> str:
    """Aligned text grid: one line per axis value, ``base rank (+x.xx%)`` per metric."""
    metrics = [f"Recall@{k}" for k in ks] + [f"NDCG@{k}" for k in ks]
    by_value: dict[str, dict[str, list[str]]] = {}
    for value, metric, base, rank, gain in rows:
        by_value.setdefault(value, {})[metric] = [base, rank, gain]
    head = f"{axis:>14} | " + " | ".join(f"{m:^27}" for m in metrics)
    sub = f"{'':>14} | " + " | ".join(f"{'Base':>6}   {'Rank':>6} {'(gain)':>10}" for _ in metrics)
    lines = [head, sub, "-" * len(head)]
    for value, cells in by_value.items():
        parts = []
        for m in metrics:
            base, rank, gain = cells[m]
            parts.append(f"{base:>6}   {rank:>6} {('(' + gain + '%)'):>10}")
        lines.append(f"{value:>14} | " + " | ".join(parts))
    return "\n".join(lines)


def run_ablation(
    axis: str,
    values: list[int],
    model: Backbone,
    users: dict[int, list[int]],
    instances: list[tuple[int, int]],
    index: SidIndex,
    vocab: Vocab,
    retriever: Retriever,
    base_cfg: EvalConfig,
) -> tuple[list[list[str]], dict[int, EvalResult]]:
    """One :func:`evaluate` per value with only ``axis`` changed."""
    field_name = {"beam": "beam", "seq_len": "seq_len", "retrieval_len": "retrieval"}.get(axis)
    if field_name is None:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    rows: list[list[str]] = []
    results = {}
    for v in values:
        cfg = replace(base_cfg, **{field_name: int(v)})
        res = evaluate(model, users, instances, index, vocab, retriever, cfg)
        results[v] = res
        rows.extend(result_rows(v, res, cfg.ks))
    return rows, results
