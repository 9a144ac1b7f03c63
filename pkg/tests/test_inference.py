import json

import pytest

from hcot.dataprep import question_ids
from hcot.inference import (
    Handoff, InferenceConfig, InferenceTrace, extract_answer, infer_full_cot, infer_hcot, infer_no_cot,
    recover_thoughts,
)
from hcot.model import decode, init_model
from hcot.taskgen import CHAIN_ARITHMETIC, KB_LOOKUP, thought_only_tokens
from hcot.vocab import COT, EOS


@pytest.fixture(scope="module", params=["arith", "kb"])
def world(request, toy_arith, toy_kb):
    return toy_arith if request.param == "arith" else toy_kb


def hcot_traces(world, **cfg):
    icfg = InferenceConfig(**cfg)
    return [infer_hcot(s.question, world.hcot, world.aux, icfg, world.task) for s in world.samples]


def test_memorised_samples_replay_gold_contents(world):
    for s, t in zip(world.samples, hcot_traces(world)):
        assert t.contents == s.contents
        assert t.stats.handoff_count == len(s.thoughts)
        assert t.answer == s.gold_answer
        assert not t.truncated


def test_cot_count_equals_handoff_records(world):
    for t in hcot_traces(world):
        assert t.emitted.count(COT) == len(t.handoffs) == t.stats.handoff_count
        for h in t.handoffs:
            assert h.prefix[h.cot_position] == COT and h.cot_position == len(h.prefix) - 1


def test_hcot_never_emits_thought_only_tokens(world):
    only = thought_only_tokens(world.samples, world.vocab)
    assert only
    for t in hcot_traces(world):
        assert not only & set(t.emitted)


def test_completion_tokens_count_hcot_decoded_tokens_only(world):
    for t in hcot_traces(world):
        assert t.stats.completion_tokens == len(t.emitted)
        assert t.stats.aux_encode_tokens == sum(len(h.prefix) for h in t.handoffs)


def test_wall_clock_phases_add_up(world):
    for t in hcot_traces(world, recover_thoughts=True):
        w = t.stats.wall_ms
        parts = w["hcot_decode"] + w["aux_encode"] + w["recovery"]
        assert abs(w["total"] - parts) <= 0.05 * w["total"]


def test_no_thought_model_gives_plain_decode(toy_arith):
    # the content-only model never emits [CoT], so HCoT reduces to a plain decode
    s = toy_arith.samples[0]
    t = infer_hcot(s.question, toy_arith.nocot, toy_arith.aux, InferenceConfig(), CHAIN_ARITHMETIC)
    plain = decode(toy_arith.nocot, question_ids(s.question, toy_arith.vocab), stop_set={COT, EOS}, max_new=256)
    assert t.stats.handoff_count == 0 and t.emitted == plain


def test_max_handoffs_truncates_but_still_extracts(toy_arith):
    s = max(toy_arith.samples, key=lambda x: len(x.thoughts))
    assert len(s.thoughts) > 1
    t = infer_hcot(s.question, toy_arith.hcot, toy_arith.aux, InferenceConfig(max_handoffs=1), CHAIN_ARITHMETIC)
    assert t.truncated and t.stats.handoff_count == 1
    assert t.answer is None


def test_max_new_tokens_truncates(toy_arith):
    s = toy_arith.samples[0]
    t = infer_full_cot(s.question, toy_arith.fullcot, InferenceConfig(max_new_tokens=5), CHAIN_ARITHMETIC)
    assert t.truncated and t.stats.completion_tokens == 5


def test_unfrozen_aux_or_mismatched_dims_rejected(toy_arith):
    s = toy_arith.samples[0]
    with pytest.raises(ValueError, match="frozen"):
        infer_hcot(s.question, toy_arith.hcot, toy_arith.hcot, InferenceConfig())
    from hcot.model import ModelConfig

    other = init_model(ModelConfig(len(toy_arith.vocab), hidden_dim=16, num_layers=1, num_heads=2), 0)
    other.freeze()
    with pytest.raises(ValueError, match="hidden_dim"):
        infer_hcot(s.question, toy_arith.hcot, other, InferenceConfig())


def test_recovery_matches_gold_thoughts(world):
    hits = total = 0
    for s, t in zip(world.samples, hcot_traces(world)):
        texts = recover_thoughts(t, world.aux)
        assert len(texts) == t.stats.handoff_count
        hits += sum(a == b for a, b in zip(texts, s.thoughts))
        total += len(s.thoughts)
    assert hits / total >= 0.9


def test_recovery_is_deterministic_and_leaves_trace_alone(toy_kb):
    s = toy_kb.samples[0]
    t = infer_hcot(s.question, toy_kb.hcot, toy_kb.aux, InferenceConfig(), KB_LOOKUP)
    before = json.dumps(t.to_record(), sort_keys=True)
    assert recover_thoughts(t, toy_kb.aux) == recover_thoughts(t, toy_kb.aux)
    assert json.dumps(t.to_record(), sort_keys=True) == before


def test_recover_flag_fills_handoff_records(toy_kb):
    s = toy_kb.samples[1]
    t = infer_hcot(s.question, toy_kb.hcot, toy_kb.aux, InferenceConfig(recover_thoughts=True), KB_LOOKUP)
    assert [h.recovered_thought for h in t.handoffs] == s.thoughts
    assert t.stats.wall_ms["recovery"] > 0


def test_recovery_preconditions(toy_kb):
    empty = InferenceTrace("q", "hcot", [])
    with pytest.raises(ValueError, match="no handoffs"):
        recover_thoughts(empty, toy_kb.aux)
    broken = InferenceTrace("q", "hcot", [COT], handoffs=[Handoff(prefix=[], cot_position=0, r_hash="x")])
    with pytest.raises(ValueError, match="prefix"):
        recover_thoughts(broken, toy_kb.aux)


def test_fullcot_costs_at_least_as_many_tokens_as_hcot(world):
    for s, h in zip(world.samples, hcot_traces(world)):
        f = infer_full_cot(s.question, world.fullcot, InferenceConfig(), world.task)
        assert COT not in f.emitted
        assert f.answer == s.gold_answer
        assert f.stats.completion_tokens >= h.stats.completion_tokens


def test_baselines_are_deterministic_and_cot_free(world):
    for s in world.samples[:3]:
        for fn, m in ((infer_full_cot, world.fullcot), (infer_no_cot, world.nocot)):
            a = fn(s.question, m, InferenceConfig(), world.task)
            b = fn(s.question, m, InferenceConfig(), world.task)
            assert a.emitted == b.emitted and COT not in a.emitted and not a.handoffs


def test_nocot_uses_same_answer_regex(toy_kb):
    s = toy_kb.samples[2]
    t = infer_no_cot(s.question, toy_kb.nocot, InferenceConfig(), KB_LOOKUP)
    assert t.answer == extract_answer(t, KB_LOOKUP) == s.gold_answer


def test_hcot_is_deterministic(world):
    a = [t.to_record() for t in hcot_traces(world)]
    b = [t.to_record() for t in hcot_traces(world)]
    for x, y in zip(a, b):
        x["stats"]["wall_ms"] = y["stats"]["wall_ms"] = None
    assert a == b


def test_sampling_path_runs_with_seed(toy_arith):
    s = toy_arith.samples[0]
    cfg = InferenceConfig(temperature=0.7, top_p=0.9, seed=3)
    a = infer_hcot(s.question, toy_arith.hcot, toy_arith.aux, cfg, CHAIN_ARITHMETIC)
    b = infer_hcot(s.question, toy_arith.hcot, toy_arith.aux, cfg, CHAIN_ARITHMETIC)
    assert a.emitted == b.emitted


def test_extract_answer_examples():
    t = InferenceTrace("q", "fullcot", [], text="... 7 * 2 = 14 Answer: 14")
    assert extract_answer(t, CHAIN_ARITHMETIC) == "14"
    t = InferenceTrace("q", "fullcot", [], text="Action 2: finish[blue]")
    assert extract_answer(t, KB_LOOKUP) == "blue"
    t = InferenceTrace("q", "fullcot", [], text="Answer: 3 and later Answer: 9")
    assert extract_answer(t, CHAIN_ARITHMETIC) == "9"
    t = InferenceTrace("q", "fullcot", [], text="nothing")
    assert extract_answer(t, CHAIN_ARITHMETIC) is None


def test_trace_record_round_trip(toy_arith):
    s = toy_arith.samples[2]
    t = infer_hcot(s.question, toy_arith.hcot, toy_arith.aux, InferenceConfig(store_vectors=True), CHAIN_ARITHMETIC)
    rec = json.loads(json.dumps(t.to_record()))
    assert InferenceTrace.from_record(rec) == t
    assert all(len(h.r_vector) == toy_arith.aux.config.hidden_dim for h in t.handoffs)


@pytest.mark.parametrize("kwargs", [{"max_handoffs": 0}, {"top_p": 0.0}, {"max_new_tokens": 0}])
def test_inference_config_validation(kwargs):
    with pytest.raises(ValueError):
        InferenceConfig(**kwargs)
