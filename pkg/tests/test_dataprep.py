import numpy as np
import pytest

from hcot import dataprep as dp
from hcot.taskgen import TaskSpec, gen_chain_arithmetic, gen_kb_lookup, generate_dataset
from hcot.vocab import BOS, COT, EOS, EOT, SEP, Vocab

V = Vocab()


@pytest.fixture(params=["arith", "kb"])
def sample(request):
    return gen_chain_arithmetic(11, 3, 9) if request.param == "arith" else gen_kb_lookup(11, 2, 500)


def test_aux_input_is_hcot_prefix_cut_after_each_cot(sample):
    h = dp.make_hcot_instance(sample, V)
    aux = dp.make_aux_instances(sample, V)
    assert len(aux) == len(sample.thoughts) == len(h.cot_positions)
    for k, a in enumerate(aux):
        assert a.input_ids == h.aux_prefix(k)
        assert a.input_ids[-1] == COT and a.cot_position == len(a.input_ids) - 1
        assert a.target_ids == V.encode(sample.thoughts[k]) + [EOT]
        assert [a.tokens[i] for i in a.thought_span] == a.target_ids[:-1]


def test_full_text_prior_keeps_earlier_thoughts(sample):
    aux = dp.make_aux_instances(sample, V, prior=dp.FULL_TEXT)
    last = aux[-1].input_ids
    for z in sample.thoughts[:-1]:
        enc = V.encode(z)
        assert any(last[i:i + len(enc)] == enc for i in range(len(last)))
    with pytest.raises(ValueError):
        dp.make_aux_instances(sample, V, prior="other")


def test_hcot_target_layout(sample):
    h = dp.make_hcot_instance(sample, V)
    assert h.input_ids[0] == BOS and h.input_ids[-1] == SEP
    assert h.target_ids[-1] == EOS
    assert h.target_ids.count(COT) == len(sample.thoughts)
    assert [h.target_ids[p] for p in h.cot_positions] == [COT] * len(sample.thoughts)
    assert V.split_on_cot(h.target_ids[:-1]) == sample.contents


def test_fullcot_and_nocot_layouts(sample):
    full = dp.make_fullcot_instance(sample, V)
    none = dp.make_nocot_instance(sample, V)
    assert COT not in full.target_ids and COT not in none.target_ids
    assert V.decode(none.target_ids) == " ".join(c for c in sample.contents if c)
    n_thought = sum(len(V.encode(z)) for z in sample.thoughts)
    assert len(full.target_ids) == len(none.target_ids) + n_thought


def test_collate_masks_exactly_the_target_predictions():
    samples = generate_dataset(TaskSpec("chain_arithmetic"), 5, seed=0)
    inst = dp.build_instances(samples, V, "hcot")
    batch = dp.collate(inst)
    for b, x in enumerate(inst):
        predicted = batch.targets[b][batch.loss_mask[b] == 1]
        assert list(predicted) == x.target_ids
        seq = x.tokens
        assert list(batch.tokens[b, : len(seq)]) == seq
        assert (batch.tokens[b, len(seq):] == 0).all()


def test_build_instances_sources_and_stage_check():
    samples = generate_dataset(TaskSpec("kb_lookup"), 4, seed=0)
    aux = dp.build_instances(samples, V, "aux")
    assert sorted({a.source for a in aux}) == [0, 1, 2, 3]
    assert len(aux) == sum(len(s.thoughts) for s in samples)
    with pytest.raises(ValueError):
        dp.build_instances(samples, V, "dpo")


def test_instance_cache_records(tmp_path):
    samples = generate_dataset(TaskSpec("chain_arithmetic"), 3, seed=0)
    inst = dp.build_instances(samples, V, "aux")
    path = tmp_path / "c.jsonl"
    dp.write_instance_cache(path, inst, "aux")
    import json

    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(recs) == len(inst)
    assert recs[0]["input_ids"] == inst[0].input_ids and recs[0]["cot_position"] == inst[0].cot_position


def test_kb_first_content_is_empty_so_hcot_starts_with_cot():
    h = dp.make_hcot_instance(gen_kb_lookup(3, 1, 500), V)
    assert h.target_ids[0] == COT and h.cot_positions[0] == 0
    assert np.all(np.diff(h.cot_positions) > 0)
