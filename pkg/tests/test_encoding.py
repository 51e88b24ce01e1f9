import pytest
from hypothesis import given, strategies as st

from procplan.encoding import (BOS, EOS, SEP, OutOfVocabulary, ParseFailure, Vocabulary, build_vocab,
                               decode_action, decode_context, decode_plan, encode_context, encode_plan)


def test_context_layout(small_suite):
    s = small_suite
    inst = s.train[0]
    ctx = encode_context(inst.init, inst.goal, s.domain, s.vocab)
    assert ctx.ids[0] == BOS and ctx.ids[-1] == SEP
    for name in ("dk", "observation", "goal"):
        a, b = ctx.spans[name]
        assert ctx.ids[b] == SEP
    obs, goal = decode_context(ctx, s.vocab, s.domain)
    assert set(obs) == inst.init.atoms and set(goal) == inst.goal


def test_plan_round_trip(small_suite):
    s = small_suite
    for inst in s.train:
        plan = [s.domain.schema(a.split("(")[0]).ground(a[a.index("(") + 1:-1].split(",")) for a in inst.meta["plan"]]
        ids = encode_plan(plan, s.vocab)
        assert ids[-1] == EOS
        back, fail = decode_plan(ids, s.vocab, s.domain, inst.objects)
        assert fail is None and back == plan


def test_vocab_save_load(tmp_path, small_suite):
    p = tmp_path / "v.txt"
    small_suite.vocab.save(p)
    assert Vocabulary.load(p) == small_suite.vocab


def test_out_of_vocabulary(small_suite):
    with pytest.raises(OutOfVocabulary):
        small_suite.vocab.id("dragon")


def test_vocab_order_is_deterministic(small_suite):
    s = small_suite
    assert build_vocab(s.domain, s.train + s.test) == s.vocab
    assert s.vocab.tokens[:4] == ["<pad>", "<bos>", "<eos>", "<sep>"]


@pytest.mark.parametrize("toks, reason", [
    (["dance", "("], "unknown action"),
    (["move", "(", "loc-0-0"], "truncated action"),
    (["move", "loc-0-0"], "expected '('"),
    (["move", "(", "loc-0-0", "loc-0-1", ")"], "expected ','"),
    (["move", "(", "agent", ",", "loc-0-1", ")"], "not a static"),
])
def test_decode_action_failures(small_suite, toks, reason):
    s = small_suite
    ids = [s.vocab.id(t) if t in s.vocab else 3 for t in toks]
    if toks[0] == "dance":
        ids[0] = s.vocab.id("<sep>")
    with pytest.raises(ParseFailure) as e:
        decode_action(ids, s.vocab, s.domain, s.train[0].objects)
    assert reason in e.value.reason


def test_missing_eos_reported(small_suite):
    s = small_suite
    ids = [s.vocab.id(t) for t in ["move", "(", "loc-0-0", ",", "loc-0-1", ")"]]
    acts, fail = decode_plan(ids, s.vocab, s.domain, s.train[0].objects)
    assert len(acts) == 1 and fail.reason == "missing EOS"


@given(st.lists(st.integers(0, 200), max_size=30))
def test_decode_plan_never_raises(ids):
    s = _SUITE
    acts, fail = decode_plan(ids, s.vocab, s.domain, s.train[0].objects)
    assert fail is None or isinstance(fail, ParseFailure)
    assert isinstance(acts, list)


def _suite():
    from procplan.experiments import SuiteSpec, build_suite
    return build_suite(SuiteSpec(grid_w=2, grid_h=2, n_train=3, n_test=1, seed=0))


_SUITE = _suite()
