"""Command-line entry point: ``genrank <subcommand> [options]``.

Every subcommand accepts ``--config run.json``; explicit flags override the
file, and the resolved configuration is written next to the outputs.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import numerics as nx
from .backbone import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .decode import beam_search, start_generation, write_trace_csv
from .evaluation import AXES, EvalConfig, evaluate, format_table, result_rows, run_ablation, write_csv
from .rerank import Retriever, base_order, rank_order, rerank_candidates
from .serialization import Vocab, render, serialize_history
from .tokenizer import load_codebook, save_codebook, tokenize_catalog
from .training import TrainConfig, mean_losses, train

log = logging.getLogger("genrank")


class CliError(Exception):
    pass


def _opt(p: argparse.ArgumentParser, flag: str, key: str, type=str, help: str = "", **kw) -> None:
    p.add_argument(flag, dest=key, type=type, default=None, help=help or f"overrides {key}", **kw)


def _flag(p: argparse.ArgumentParser, flag: str, key: str, help: str) -> None:
    p.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=help)


def _data_opts(p: argparse.ArgumentParser, codebook: bool = True) -> None:
    _opt(p, "--embeddings", "data.embeddings", help="embeddings file (EMB0 format)")
    _opt(p, "--sequences", "data.sequences", help="sequences file (user_id<TAB>item,item,...)")
    if codebook:
        _opt(p, "--codebook", "data.codebook", help="codebook file (RQKM format)")


def _train_opts(p: argparse.ArgumentParser) -> None:
    _opt(p, "--steps", "train.total_steps", int, "optimizer steps")
    _opt(p, "--warmup", "train.warmup_steps", int, "linear warmup steps")
    _opt(p, "--lr", "train.lr", float, "peak learning rate")
    _opt(p, "--weight-decay", "train.weight_decay", float, "AdamW decoupled weight decay")
    _opt(p, "--batch-size", "train.batch_size", int, "instances per micro-batch")
    _opt(p, "--grad-accum", "train.grad_accum", int, "micro-batches per optimizer step")
    _opt(p, "--window", "train.window", int, "serialized history window L (items)")
    _opt(p, "--log-every", "train.log_every", int, "metrics log interval (steps)")
    _opt(p, "--out-dir", "out_dir", help="output directory", required=True)


def _eval_opts(p: argparse.ArgumentParser) -> None:
    _opt(p, "--checkpoint", "checkpoint", help="model checkpoint (RCKP format)", required=True)
    _opt(p, "--split", "eval.split", help="valid or test")
    _opt(p, "--beam", "eval.beam", int, "beam width C")
    _opt(p, "--retrieval", "eval.retrieval", int, "retrieval length M")
    _opt(p, "--seq-len", "eval.seq_len", int, "serialized history window L (items)")
    _opt(p, "--yhat-mode", "eval.yhat_mode", help="model | constant | oracle (debug)")
    _opt(p, "--max-instances", "eval.max_instances", int, "evaluate only the first N instances")
    _opt(p, "--eval-batch", "eval.batch_size", int, "users per decoding batch")
    p.add_argument("--unconstrained", dest="eval.constrained", action="store_const", const=False, default=None,
                   help="debug: decode without the SID trie; invalid SIDs are dropped and counted")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genrank", description="Generative retrieval + in-model reranking recommender.")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        _opt(p, "--seed", "seed", int, "seed for all randomness")

    p = sub.add_parser("gen-data", help="write a synthetic catalog and user sequences")
    common(p)
    _opt(p, "--out-dir", "out_dir", required=True)
    _opt(p, "--n-items", "synth.n_items", int)
    _opt(p, "--n-users", "synth.n_users", int)
    _opt(p, "--clusters", "synth.n_clusters", int)
    _opt(p, "--self-prob", "synth.markov_self_prob", float)
    _opt(p, "--sigma", "synth.noise_sigma", float)
    _opt(p, "--seq-len", "synth.seq_len", int)
    _opt(p, "--dim", "synth.d", int)
    _opt(p, "--repeat-prob", "synth.repeat_prob", float)

    p = sub.add_parser("tokenize", help="fit the residual k-means codebook and assign semantic IDs")
    common(p)
    _opt(p, "--embeddings", "data.embeddings", required=True)
    _opt(p, "--k", "tokenizer.k", int, "codes per level")
    _opt(p, "--levels", "tokenizer.levels", int, "quantized levels (must be 3)")
    _opt(p, "--s4-max", "tokenizer.s4_max", int, "range of the disambiguation code")
    _opt(p, "--out", "out", required=True)

    p = sub.add_parser("train-stage1", help="teacher-forced SID pretraining")
    common(p)
    _data_opts(p)
    _train_opts(p)

    p = sub.add_parser("train-stage2", help="joint generate/retrieve/rerank training")
    common(p)
    _data_opts(p)
    _train_opts(p)
    _opt(p, "--init", "init", help="stage-1 checkpoint to start from", required=True)
    _opt(p, "--beam", "train.beam", int, "beam width C")
    _opt(p, "--retrieval", "train.retrieval", int, "retrieval length M")
    _flag(p, "--head-only-rank", "train.head_only_rank", "rank loss updates only the rank head")
    _flag(p, "--rank-pos-weight", "train.rank_pos_weight", "weight positive labels by the beam width")

    p = sub.add_parser("eval", help="Recall/NDCG before and after reranking")
    common(p)
    _data_opts(p)
    _eval_opts(p)
    _opt(p, "--out", "out", help="metrics CSV path")

    p = sub.add_parser("ablate", help="vary one axis and tabulate Base vs Rank")
    common(p)
    _data_opts(p)
    _eval_opts(p)
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values, e.g. 10,20,30,40")
    _opt(p, "--out", "out", help="grid CSV path")

    p = sub.add_parser("infer", help="rank candidates for one user")
    common(p)
    _data_opts(p)
    _eval_opts(p)
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--target-pos", type=int, default=None,
                   help="predict the event at this position (default: the event after the full history)")
    _opt(p, "--out", "out", help="candidate CSV path (default: stdout)")
    p.add_argument("--dump-beams", help="write the per-round beam table as CSV")
    p.add_argument("--show-serialized", action="store_true", help="print the serialized history")
    return parser


def resolve(ns: argparse.Namespace) -> tuple[RunConfig, dict]:
    cfg = load_config(getattr(ns, "config", None))
    extra = {}
    for key, value in vars(ns).items():
        if value is None or key in ("config", "command", "log_level"):
            continue
        try:
            cfg.set(key, value)
        except KeyError:
            extra[key] = value
    return cfg, extra


def _seed_all(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)


def _load_corpus(cfg: RunConfig, need_codebook: bool = True):
    if not cfg.data.embeddings or not cfg.data.sequences:
        raise CliError("--embeddings and --sequences are required")
    catalog, users, dropped = data_mod.load_taobao_mm(cfg.data.embeddings, cfg.data.sequences, cfg.data.max_history)
    if dropped:
        print(f"warning: dropped {dropped} events with unknown items", file=sys.stderr)
    if not need_codebook:
        return catalog, users, None, None, None
    if not cfg.data.codebook:
        raise CliError("--codebook is required")
    codebook, index = load_codebook(cfg.data.codebook, expect_d=catalog.d)
    if len(index) != catalog.n_items:
        raise CliError(f"codebook covers {len(index)} items but the catalog has {catalog.n_items}")
    vocab = Vocab(codebook.K, index.s4_max, catalog.n_items)
    return catalog, users, codebook, index, vocab


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        lr=t.lr, weight_decay=t.weight_decay, warmup_steps=t.warmup_steps, total_steps=t.total_steps,
        batch_size=t.batch_size, grad_accum=t.grad_accum, beam=t.beam, retrieval=t.retrieval,
        window=t.window, seed=cfg.seed, rank_pos_weight=t.rank_pos_weight, head_only_rank=t.head_only_rank,
        log_every=t.log_every,
    )


def _eval_config(cfg: RunConfig) -> EvalConfig:
    e = cfg.eval
    return EvalConfig(beam=e.beam, retrieval=e.retrieval, seq_len=e.seq_len, batch_size=e.batch_size,
                      yhat_mode=e.yhat_mode, constrained=e.constrained)


def _eval_instances(cfg: RunConfig, users) -> tuple[dict, list]:
    split = data_mod.make_splits(users)
    if cfg.eval.split not in ("valid", "test"):
        raise CliError(f"--split must be valid or test, got {cfg.eval.split!r}")
    inst = split.valid if cfg.eval.split == "valid" else split.test
    if cfg.eval.max_instances:
        inst = inst[: cfg.eval.max_instances]
    return {u.user_id: u.events for u in users}, inst


def _load_model(path: str, vocab: Vocab):
    model, extra = load_checkpoint(path)
    if model.config.vocab_size != vocab.size:
        raise CliError(f"checkpoint vocabulary {model.config.vocab_size} does not match codebook/catalog ({vocab.size})")
    model.eval()
    return model


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, extra: dict, ns) -> None:
    s = cfg.synth
    catalog, users = data_mod.generate_synthetic(
        s.n_items, s.n_users, s.n_clusters, s.markov_self_prob, s.noise_sigma, s.seq_len, s.d, cfg.seed, s.repeat_prob
    )
    out = Path(extra["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    data_mod.write_embeddings(out / "embeddings.bin", catalog.embeddings)
    data_mod.write_sequences(out / "sequences.tsv", users)
    cfg.data.embeddings = str(out / "embeddings.bin")
    cfg.data.sequences = str(out / "sequences.tsv")
    cfg.write(out / "run_config.json")
    print(f"wrote {catalog.n_items} items (d={catalog.d}) and {len(users)} users to {out}")


def cmd_tokenize(cfg: RunConfig, extra: dict, ns) -> None:
    if cfg.tokenizer.levels != 3:
        raise CliError("the semantic-ID layout uses exactly 3 quantized levels plus the disambiguation code")
    emb = data_mod.read_embeddings(cfg.data.embeddings)
    matrix = np.stack([emb[i] for i in sorted(emb)])
    t = cfg.tokenizer
    codebook, index = tokenize_catalog(matrix, t.k, t.levels, t.s4_max, cfg.seed)
    save_codebook(extra["out"], codebook, index)
    cfg.data.codebook = extra["out"]
    cfg.write(str(extra["out"]) + ".config.json")
    prefixes: dict[tuple, int] = {}
    for sid in index.sid_to_item:
        prefixes[sid[:3]] = prefixes.get(sid[:3], 0) + 1
    n = len(matrix)
    print(f"items: {n}")
    print(f"distinct (s1,s2,s3): {len(prefixes)}")
    print(f"collision groups (size > 1): {sum(1 for v in prefixes.values() if v > 1)}; largest group: {max(prefixes.values())}")
    print(f"distinct full SIDs: {len(index)} ({100.0 * len(index) / n:.2f}% unique)")


def _cmd_train(cfg: RunConfig, extra: dict, stage: int) -> None:
    catalog, users, _, index, vocab = _load_corpus(cfg)
    out = Path(extra["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    split = data_mod.make_splits(users)
    events = {u.user_id: u.events for u in users}
    instances = [(events[u], t) for u, t in data_mod.training_windows(split)]
    if not instances:
        raise CliError("no training instances (every user needs at least 2 training events)")
    tcfg = _train_config(cfg)
    if stage == 1:
        m = cfg.model
        model = init_model(ModelConfig(vocab.size, m.n_layers, m.d_model, m.n_heads, m.d_ff, m.context, m.dropout, cfg.seed))
    else:
        model = _load_model(extra["init"], vocab)
    retriever = Retriever(catalog.embeddings)
    cfg.write(out / "run_config.json")
    train(model, instances, index, vocab, tcfg, stage, retriever, metrics_path=out / "metrics.csv")
    ckpt = out / f"stage{stage}.ckpt"
    save_checkpoint(ckpt, model, {"stage": stage, "K": vocab.K, "s4_max": vocab.s4_max, "n_items": vocab.n_items})
    valid = [(events[u], t) for u, t in split.valid][:500]
    if valid:
        l_sid, l_rank = mean_losses(model, valid, index, vocab, tcfg, retriever, with_rank=stage == 2)
        print(f"validation loss_sid {l_sid:.4f}" + (f" loss_rank {l_rank:.4f}" if stage == 2 else ""))
    print(f"wrote {ckpt}")


def cmd_eval(cfg: RunConfig, extra: dict, ns) -> None:
    catalog, users, _, index, vocab = _load_corpus(cfg)
    model = _load_model(extra["checkpoint"], vocab)
    events, inst = _eval_instances(cfg, users)
    ecfg = _eval_config(cfg)
    res = evaluate(model, events, inst, index, vocab, Retriever(catalog.embeddings), ecfg)
    label = f"beam={ecfg.beam};retrieval={ecfg.retrieval};seq_len={ecfg.seq_len}"
    rows = result_rows(label, res)
    text = write_csv(extra.get("out"), rows)
    if extra.get("out"):
        cfg.write(str(extra["out"]) + ".config.json")
    else:
        sys.stdout.write(text)
    print(format_table("config", rows), file=sys.stderr)
    print(f"instances {len(res.instances)} skipped {res.skipped} dropped-sids {res.dropped}", file=sys.stderr)


def cmd_ablate(cfg: RunConfig, extra: dict, ns) -> None:
    catalog, users, _, index, vocab = _load_corpus(cfg)
    model = _load_model(extra["checkpoint"], vocab)
    events, inst = _eval_instances(cfg, users)
    try:
        values = [int(v) for v in ns.values.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"--values must be comma-separated integers, got {ns.values!r}") from None
    rows, _ = run_ablation(ns.axis, values, model, events, inst, index, vocab, Retriever(catalog.embeddings), _eval_config(cfg))
    text = write_csv(extra.get("out"), rows)
    if extra.get("out"):
        cfg.write(str(extra["out"]) + ".config.json")
    else:
        sys.stdout.write(text)
    print(format_table(ns.axis, rows), file=sys.stderr)


def cmd_infer(cfg: RunConfig, extra: dict, ns) -> None:
    catalog, users, _, index, vocab = _load_corpus(cfg)
    model = _load_model(extra["checkpoint"], vocab)
    by_user = {u.user_id: u.events for u in users}
    if ns.user not in by_user:
        raise CliError(f"unknown user {ns.user}")
    events = by_user[ns.user]
    t = len(events) if ns.target_pos is None else ns.target_pos
    if not 0 <= t <= len(events):
        raise CliError(f"--target-pos must be in [0, {len(events)}]")
    e = cfg.eval
    window = events[max(0, t - e.seq_len) : t]
    pool = events[max(0, t - cfg.data.max_history) : t]
    if ns.show_serialized:
        print(render(serialize_history(window, index, vocab).tokens, vocab), file=sys.stderr)
    with torch.no_grad():
        state, first = start_generation(model, [window], index, vocab)
        res = beam_search(model, state, first, index, vocab, e.beam, constrained=e.constrained, record_trace=bool(ns.dump_beams))
        truth = [events[t]] if t < len(events) else None
        if e.yhat_mode == "oracle" and truth is None:
            raise CliError("oracle yhat mode needs --target-pos inside the history")
        rerank_candidates(model, res.state, res.candidates, [pool], Retriever(catalog.embeddings), vocab, e.retrieval, e.yhat_mode, truth)
    if ns.dump_beams:
        write_trace_csv(ns.dump_beams, res.trace)
    cands = res.candidates[0]
    base_rank = {id(c): r for r, c in enumerate(base_order(cands), start=1)}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sid", "item", "gen_logprob", "yhat", "combined_score", "base_rank", "rerank_rank"])
    for r, c in enumerate(rank_order(cands), start=1):
        w.writerow(["-".join(map(str, c.sid)), c.item, f"{c.gen_logprob:.6f}", f"{c.yhat:.6f}", f"{c.score:.6f}", base_rank[id(c)], r])
    if extra.get("out"):
        Path(extra["out"]).write_text(buf.getvalue())
        cfg.write(str(extra["out"]) + ".config.json")
    else:
        sys.stdout.write(buf.getvalue())


COMMANDS = {
    "gen-data": cmd_gen_data,
    "tokenize": cmd_tokenize,
    "train-stage1": lambda cfg, extra, ns: _cmd_train(cfg, extra, 1),
    "train-stage2": lambda cfg, extra, ns: _cmd_train(cfg, extra, 2),
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "infer": cmd_infer,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)  # exits 2 with usage on bad input
    logging.basicConfig(level=getattr(logging, str(ns.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg, extra = resolve(ns)
        nx.set_float_mode("float32")
        _seed_all(cfg.seed)
        COMMANDS[ns.command](cfg, extra, ns)
    except (CliError, KeyError, ValueError, TypeError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
