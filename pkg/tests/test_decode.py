import pytest
import torch

from genrank.decode import beam_search, map_sid_to_item, start_generation, write_trace_csv
from genrank.serialization import Vocab, serialize_history
from genrank.tokenizer import SidIndex, resolve_collisions

from conftest import enumerate_leaves, jitter, toy_index, toy_model


def run_beam(model, index, vocab, history, beam, **kw):
    state, first = start_generation(model, [history], index, vocab)
    return beam_search(model, state, first, index, vocab, beam, **kw)


@pytest.mark.parametrize("seed", range(5))
def test_full_width_beam_matches_enumeration(f64, seed):
    index = toy_index(n_items=30, K=3, s4_max=4, seed=seed)
    vocab = Vocab(3, 4, 30)
    model = jitter(toy_model(vocab, seed=seed), 0.4, seed=seed)
    history = [seed % 30, (seed * 7 + 3) % 30]
    res = run_beam(model, index, vocab, history, beam=len(index))
    prefix = serialize_history(history, index, vocab).tokens + [vocab.bos]
    want = enumerate_leaves(model, prefix, index, vocab)
    got = [(c.gen_logprob, c.sid) for c in res.candidates[0]]
    assert [s for _, s in got] == [s for _, s in want]
    assert max(abs(a - b) for (a, _), (b, _) in zip(got, want)) <= 1e-6


def test_single_item_trie():
    vocab = Vocab(3, 4, 5)
    index = SidIndex({(2, 1, 0, 3): 4}, {4: (2, 1, 0, 3)}, 4)
    model = jitter(toy_model(vocab), 0.3)
    res = run_beam(model, index, vocab, [4], beam=5)
    [c] = res.candidates[0]
    assert c.item == 4 and c.sid == (2, 1, 0, 3)
    prefix = serialize_history([4], index, vocab).tokens + [vocab.bos]
    assert c.gen_logprob == pytest.approx(enumerate_leaves(model, prefix, index, vocab)[0][0], abs=1e-5)


def test_ties_go_to_lower_sid():
    vocab = Vocab(3, 4, 12)
    index = toy_index(n_items=12)
    model = toy_model(vocab)
    with torch.no_grad():
        model.sid_w.zero_()
    res = run_beam(model, index, vocab, [0], beam=3)
    # uniform heads: scores depend only on level sizes, so every leaf ties
    sids = [c.sid for c in res.candidates[0]]
    assert sids == sorted(index.sid_to_item)[:3]


def test_four_rounds_regardless_of_width():
    vocab = Vocab(3, 4, 12)
    index = toy_index(n_items=12)
    model = jitter(toy_model(vocab), 0.2)
    for beam in (1, 3, 12, 50):
        res = run_beam(model, index, vocab, [1, 2], beam=beam)
        assert res.steps == 4
        assert len(res.candidates[0]) == min(beam, len(index))
        scores = [c.gen_logprob for c in res.candidates[0]]
        assert scores == sorted(scores, reverse=True) and max(scores) <= 0


def test_widening_keeps_top_candidates():
    vocab = Vocab(3, 4, 30)
    index = toy_index(n_items=30)
    model = jitter(toy_model(vocab), 0.5)
    narrow = run_beam(model, index, vocab, [3], beam=4).candidates[0]
    wide = run_beam(model, index, vocab, [3], beam=10).candidates[0]
    assert {c.sid for c in narrow} <= {c.sid for c in wide}


def test_mapping_and_bijection():
    index = toy_index(n_items=12)
    for item, sid in index.item_to_sid.items():
        assert map_sid_to_item(sid, index) == item
        assert index.item_to_sid[map_sid_to_item(sid, index)] == sid


def test_unconstrained_mode_drops_invalid():
    vocab = Vocab(3, 4, 1)
    index = resolve_collisions({0: (1, 1, 1)}, 4, seed=0)
    model = toy_model(vocab)
    with torch.no_grad():
        model.sid_w.zero_()
    res = run_beam(model, index, vocab, [0], beam=1, constrained=False)
    # uniform scores pick (0,0,0,0), which is not a catalog SID
    assert res.dropped == 1 and res.candidates[0] == []
    ok = run_beam(model, index, vocab, [0], beam=1)
    assert ok.dropped == 0 and ok.candidates[0][0].item == 0


def test_batched_rows_match_single_rows():
    vocab = Vocab(3, 4, 30)
    index = toy_index(n_items=30)
    model = jitter(toy_model(vocab), 0.3)
    windows = [[1, 2, 3], [4], [5, 6]]
    state, first = start_generation(model, windows, index, vocab)
    res = beam_search(model, state, first, index, vocab, 5)
    for w, got in zip(windows, res.candidates):
        ref = run_beam(model, index, vocab, w, 5).candidates[0]
        assert [c.sid for c in got] == [c.sid for c in ref]
        assert all(abs(a.gen_logprob - b.gen_logprob) < 1e-4 for a, b in zip(got, ref))


def test_errors_and_trace(tmp_path):
    vocab = Vocab(3, 4, 12)
    index = toy_index(n_items=12)
    model = toy_model(vocab)
    state, first = start_generation(model, [[0]], index, vocab)
    with pytest.raises(ValueError):
        beam_search(model, state, first, index, vocab, 0)
    with pytest.raises(ValueError):
        beam_search(model, state, first, SidIndex({}, {}, 4), vocab, 3)
    res = beam_search(model, state, first, index, vocab, 2, record_trace=True)
    write_trace_csv(tmp_path / "t.csv", res.trace)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "row,level,sid_prefix,logprob" and len(lines) > 4
