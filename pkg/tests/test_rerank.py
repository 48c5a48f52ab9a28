import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from genrank.backbone import ContextOverflow
from genrank.decode import Candidate, beam_search, start_generation
from genrank.rerank import (
    Retriever,
    base_order,
    combined_score,
    cosine_sim,
    gsu_retrieve,
    rank_order,
    rerank_candidates,
    score_suffixes,
)
from genrank.serialization import Vocab, build_rerank_suffix, serialize_history

from conftest import jitter, toy_index, toy_model


def test_cosine_examples():
    assert cosine_sim([1, 2], [1, 2]) == pytest.approx(1.0, abs=1e-12)
    assert cosine_sim([1, 0], [0, 3]) == 0.0
    assert cosine_sim([1, 1], [1, 0]) == pytest.approx(0.70710678, abs=1e-8)
    with pytest.raises(ValueError):
        cosine_sim([0, 0], [1, 0])


def test_gsu_examples():
    pool = [(1, 0), (0, 1), (0.9, 0.1)]
    assert gsu_retrieve((1, 0), pool, 2) == [0, 2]
    assert gsu_retrieve((1, 0), pool, 0) == []
    assert gsu_retrieve((1, 0), pool, 10) == [0, 1, 2]
    same = [(1, 1)] * 5
    assert gsu_retrieve((2, 2), same, 2) == [3, 4]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 30), st.integers(0, 12), st.integers(0, 10_000))
def test_gsu_output_sorted_and_sized(n, M, seed):
    rng = np.random.default_rng(seed)
    pool = rng.normal(size=(n, 3)) + 0.01
    got = gsu_retrieve(rng.normal(size=3) + 0.01, pool, M)
    assert got == sorted(got) and len(got) == min(M, n)


def test_retriever_can_return_the_candidate_itself():
    emb = np.eye(4) + 0.01
    r = Retriever(emb)
    assert r.retrieve(2, [0, 2, 1, 3], 1) == [2]
    with pytest.raises(ValueError):
        Retriever(np.zeros((2, 3)))


def test_combined_score_examples():
    assert combined_score(-1.0, 0.5) == pytest.approx(-1.6931472, abs=1e-7)
    a, b = combined_score(-1.0, 0.1), combined_score(-2.0, 0.9)
    assert a == pytest.approx(-3.3026, abs=1e-4) and b == pytest.approx(-2.1054, abs=1e-4)
    c1 = Candidate((0, 0, 0, 0), 0, -1.0, score=a)
    c2 = Candidate((0, 0, 0, 1), 1, -2.0, score=b)
    assert rank_order([c1, c2])[0] is c2 and base_order([c1, c2])[0] is c1


def setup(n_items=30, history=(1, 2, 3, 4), seed=0):
    vocab = Vocab(3, 4, n_items)
    index = toy_index(n_items=n_items, seed=seed)
    model = jitter(toy_model(vocab, seed=seed), 0.3, seed=seed)
    emb = np.random.default_rng(seed).normal(size=(n_items, 5))
    state, first = start_generation(model, [list(history)], index, vocab)
    with torch.no_grad():
        res = beam_search(model, state, first, index, vocab, 8)
    return vocab, index, model, Retriever(emb), res


def test_constant_yhat_keeps_base_order():
    vocab, index, model, ret, res = setup()
    rerank_candidates(model, res.state, res.candidates, [[1, 2, 3, 4]], ret, vocab, 2, mode="constant")
    assert rank_order(res.candidates[0]) == base_order(res.candidates[0])
    assert all(c.yhat == 0.5 for c in res.candidates[0])


def test_zeroed_rank_head_gives_half():
    vocab, index, model, ret, res = setup()
    with torch.no_grad():
        model.rank_w.zero_()
        model.rank_b.zero_()
    rerank_candidates(model, res.state, res.candidates, [[1, 2, 3, 4]], ret, vocab, 3)
    assert all(c.yhat == 0.5 for c in res.candidates[0])
    assert rank_order(res.candidates[0]) == base_order(res.candidates[0])


@pytest.mark.parametrize("M", [0, 2, 4])
def test_cached_rerank_matches_full_reencode(M):
    history = [1, 2, 3, 4]
    vocab, index, model, ret, res = setup(history=history)
    rerank_candidates(model, res.state, res.candidates, [history], ret, vocab, M)
    prefix = serialize_history(history, index, vocab).tokens
    for c in res.candidates[0]:
        suffix, at = build_rerank_suffix(c.sid, c.retrieved, c.item, vocab)
        assert len(c.retrieved) == min(M, len(history))
        with torch.no_grad():
            h = model.forward_full(torch.tensor([prefix + suffix])).hidden[0, len(prefix) + at]
            y = float(model.rank_probability(h))
        assert abs(y - c.yhat) <= 1e-4
        assert c.score == pytest.approx(c.gen_logprob + math.log(c.yhat), abs=1e-6)


def test_oracle_yhat_puts_truth_first():
    vocab, index, model, ret, res = setup()
    truth = res.candidates[0][-1].item  # the weakest candidate
    rerank_candidates(model, res.state, res.candidates, [[1, 2, 3, 4]], ret, vocab, 2, "oracle", [truth])
    assert rank_order(res.candidates[0])[0].item == truth
    with pytest.raises(ValueError):
        rerank_candidates(model, res.state, res.candidates, [[1]], ret, vocab, 2, "oracle")
    with pytest.raises(ValueError):
        rerank_candidates(model, res.state, res.candidates, [[1]], ret, vocab, 2, "bogus")


def test_suffix_overflow_reports_lengths():
    vocab = Vocab(3, 4, 30)
    index = toy_index(n_items=30)
    model = toy_model(vocab, context=40)
    state, first = start_generation(model, [[1, 2, 3, 4, 5]], index, vocab)
    res = beam_search(model, state, first, index, vocab, 2)
    with pytest.raises(ContextOverflow, match="suffix"):
        score_suffixes(model, res.state, [0], [[vocab.item(1)] * 10], vocab)
