import json
import random

import pytest
from hypothesis import given, strategies as st

from hcot import bench
from hcot.inference import InferenceTrace, RunStats
from hcot.taskgen import CHAIN_ARITHMETIC, KB_LOOKUP


def trace(mode, answer, tokens=10, wall=5.0, recovery=0.0, text=""):
    stats = RunStats(completion_tokens=tokens, wall_ms={
        "total": wall + recovery, "hcot_decode": wall, "aux_encode": 0.0, "recovery": recovery})
    return InferenceTrace("q", mode, [], text=text, answer=answer, stats=stats)


def runset(mode, answers, task=CHAIN_ARITHMETIC, **kw):
    traces = {f"q{i}": trace(mode, a, **kw) for i, a in enumerate(answers)}
    gold = {f"q{i}": "7" for i in range(len(answers))}
    return bench.RunSet.build(mode, task, traces, gold), gold


def test_accuracy_all_correct_is_one():
    rs, gold = runset("hcot", ["7"] * 5)
    assert bench.accuracy(rs, gold) == 1.0


def test_accuracy_counts_none_as_wrong():
    rs, gold = runset("hcot", ["7", None, "7", "7"])
    assert bench.accuracy(rs, gold) == 0.75


def test_accuracy_needs_gold_for_every_id():
    rs, gold = runset("hcot", ["7", "7"])
    del gold["q1"]
    with pytest.raises(KeyError):
        bench.accuracy(rs, gold)


@pytest.mark.parametrize("pred,gold,task,ok", [
    (" 14", "14", CHAIN_ARITHMETIC, True),
    ("014", "14", CHAIN_ARITHMETIC, True),
    ("14.0", "14", CHAIN_ARITHMETIC, False),
    ("Blue ", "blue", KB_LOOKUP, True),
    ("teal", "blue", KB_LOOKUP, False),
    (None, "blue", KB_LOOKUP, False),
])
def test_answers_match_canonicalises(pred, gold, task, ok):
    assert bench.answers_match(pred, gold, task) is ok


def test_runset_rejects_mixed_modes_and_duplicates():
    t = trace("hcot", "1")
    with pytest.raises(ValueError, match="duplicate"):
        bench.RunSet("hcot", CHAIN_ARITHMETIC, [bench.RunEntry("a", t, True), bench.RunEntry("a", t, True)])
    with pytest.raises(ValueError, match="share"):
        bench.RunSet("fullcot", CHAIN_ARITHMETIC, [bench.RunEntry("a", t, True)])


def test_half_the_tokens_gives_half_compression():
    h, _ = runset("hcot", ["7"] * 4, tokens=50)
    b, _ = runset("fullcot", ["7"] * 4, tokens=100)
    r = bench.compression_report(h, b)
    assert r.S_CR == 0.5 and r.S_S == 2.0


def test_identical_costs_give_unit_ratios():
    h, _ = runset("hcot", ["7"] * 3, tokens=40, wall=9.0)
    b, _ = runset("fullcot", ["7"] * 3, tokens=40, wall=9.0)
    r = bench.compression_report(h, b)
    assert (r.S_CR, r.S_S, r.W_CR, r.W_S) == (1.0, 1.0, 1.0, 1.0)


def test_wall_clock_excludes_recovery():
    h, _ = runset("hcot", ["7"] * 3, wall=4.0, recovery=100.0)
    b, _ = runset("fullcot", ["7"] * 3, wall=8.0)
    assert bench.compression_report(h, b).W_CR == 0.5


@given(st.lists(st.tuples(st.integers(1, 500), st.integers(1, 500), st.floats(0.1, 1e4), st.floats(0.1, 1e4)),
                min_size=1, max_size=20))
def test_ratio_of_means_and_reciprocals(rows):
    h = bench.RunSet("hcot", CHAIN_ARITHMETIC, [
        bench.RunEntry(f"q{i}", trace("hcot", "1", tokens=a, wall=c), True) for i, (a, _, c, _) in enumerate(rows)])
    b = bench.RunSet("fullcot", CHAIN_ARITHMETIC, [
        bench.RunEntry(f"q{i}", trace("fullcot", "1", tokens=b_, wall=d), True) for i, (_, b_, _, d) in enumerate(rows)])
    r = bench.compression_report(h, b)
    assert r.S_CR == pytest.approx(sum(x[0] for x in rows) / sum(x[1] for x in rows), rel=1e-12)
    assert r.W_CR == pytest.approx(sum(x[2] for x in rows) / sum(x[3] for x in rows), rel=1e-9)
    assert r.S_CR * r.S_S == pytest.approx(1.0, rel=1e-12)
    assert r.W_CR * r.W_S == pytest.approx(1.0, rel=1e-12)


def test_compression_requires_paired_fullcot_baseline():
    h, _ = runset("hcot", ["7"] * 3)
    b, _ = runset("fullcot", ["7"] * 2)
    with pytest.raises(ValueError, match="different"):
        bench.compression_report(h, b)
    n, _ = runset("nocot", ["7"] * 3)
    with pytest.raises(ValueError, match="fullcot"):
        bench.compression_report(h, n)


def action_text(actions):
    return " ".join(f"Thought {i + 1}: ... Action {i + 1}: {a}" for i, a in enumerate(actions))


def agent_oracle(cases):
    """Walk every trace step by step, counting steps that agree with gold."""
    num = den = 0
    for emitted, gold, correct in cases:
        steps = len(emitted) if correct else len(gold)
        den += steps
        for k in range(min(len(emitted), len(gold))):
            if emitted[k] == gold[k]:
                num += 1
    return num / den


def test_agent_accuracy_step_oracle():
    rnd = random.Random(0)
    names = [f"lookup[e{i}.color]" for i in range(8)] + ["finish[red]", "finish[blue]"]
    cases, entries, paths = [], [], {}
    for i in range(50):
        gold = [rnd.choice(names[:8]) for _ in range(rnd.randint(1, 3))] + [rnd.choice(names[8:])]
        emitted = [a if rnd.random() < 0.8 else rnd.choice(names) for a in gold]
        if rnd.random() < 0.3:
            emitted = emitted[:rnd.randint(0, len(emitted))]
        if rnd.random() < 0.2:
            emitted.append(rnd.choice(names))
        correct = emitted == gold or rnd.random() < 0.3
        cases.append((emitted, gold, correct))
        entries.append(bench.RunEntry(f"q{i}", trace("fullcot", "x", text=action_text(emitted)), correct))
        paths[f"q{i}"] = gold
    rs = bench.RunSet("fullcot", KB_LOOKUP, entries)
    assert bench.agent_accuracy(rs, paths) == pytest.approx(agent_oracle(cases), abs=1e-12)


def test_agent_accuracy_perfect_traces():
    gold = ["lookup[a.color]", "finish[red]"]
    rs = bench.RunSet("hcot", KB_LOOKUP, [bench.RunEntry("q", trace("hcot", "red", text=action_text(gold)), True)])
    assert bench.agent_accuracy(rs, {"q": gold}) == 1.0


def test_agent_accuracy_only_for_kb():
    rs, _ = runset("hcot", ["7"])
    with pytest.raises(ValueError):
        bench.agent_accuracy(rs, {"q0": []})


def sample_report():
    h, _ = runset("hcot", ["7"] * 2, tokens=6045, wall=30.0)
    b, _ = runset("fullcot", ["7"] * 2, tokens=10000, wall=50.0)
    return bench.compression_report(h, b, {"hcot": "abc"})


def test_report_json_round_trip():
    r = sample_report()
    out = json.loads(bench.emit_report({"arith": r}, "json", {"fullcot": {"arith": 0.97}}))
    assert bench.CompressionReport(**out["compression"]["arith"]) == r
    assert out["accuracy"] == {"fullcot": {"arith": 0.97}}


def test_report_table_rows_and_formats():
    text = bench.emit_report({"arith": sample_report()}, "table", {"hcot": {"arith": 0.955}})
    lines = text.splitlines()
    for row in bench.METRIC_ROWS:
        assert sum(line.split()[0] == row for line in lines if line.strip()) == 1
    assert "60.45%" in text and "1.65x" in text and "95.50%" in text
    assert any(line.startswith("hardware:") for line in lines)
    with pytest.raises(ValueError):
        bench.emit_report({}, "xml")


def test_agent_accuracy_one_wrong_action_of_four():
    gold = ["lookup[a.friend]", "lookup[b.friend]", "lookup[c.color]", "finish[red]"]
    emitted = gold[:1] + ["lookup[x.friend]"] + gold[2:]
    rs = bench.RunSet("hcot", KB_LOOKUP, [bench.RunEntry("q", trace("hcot", "red", text=action_text(emitted)), True)])
    assert bench.agent_accuracy(rs, {"q": gold}) == 0.75
