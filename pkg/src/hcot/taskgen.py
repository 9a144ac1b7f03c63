"""Deterministic generators for interleaved content/thought reasoning samples.

Two task families:

* ``chain_arithmetic``: a chained integer computation. Content segments are
  the equations; thought segments spell out the reasoning for each step.
* ``kb_lookup``: multi-hop lookups in a fixed synthetic key-value store,
  written as ReAct-style ``Action``/``Observation`` contents with a thought
  before every action. The store itself is a "world" fixed by
  ``(kb_size, kb_seed)`` and must be learned by the model, the way
  retrieval facts are world knowledge for an agent.

Thoughts are padded to at least three times the token length of the content
that follows them so that hiding them saves a measurable share of decoding.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Iterable, Sequence

from hcot.vocab import Vocab

CHAIN_ARITHMETIC = "chain_arithmetic"
KB_LOOKUP = "kb_lookup"
TASK_KINDS = (CHAIN_ARITHMETIC, KB_LOOKUP)

ANSWER_PATTERNS = {
    CHAIN_ARITHMETIC: re.compile(r"Answer:\s*(-?\d+)"),
    KB_LOOKUP: re.compile(r"finish\[([^\]]*)\]"),
}
ACTION_PATTERN = re.compile(r"Action \d+: ((?:lookup|finish)\[[^\]]*\])")

THOUGHT_RATIO = 3
_VOCAB = Vocab()


@dataclass(frozen=True)
class Segment:
    kind: str  # "content" | "thought"
    text: str


@dataclass
class HCoTSample:
    task: str
    question: str
    segments: list[Segment]
    gold_answer: str
    seed: int

    @property
    def contents(self) -> list[str]:
        return [s.text for s in self.segments if s.kind == "content"]

    @property
    def thoughts(self) -> list[str]:
        return [s.text for s in self.segments if s.kind == "thought"]

    def validate(self) -> None:
        kinds = [s.kind for s in self.segments]
        n = len(kinds) // 2
        if n < 1 or len(kinds) != 2 * n + 1:
            raise ValueError(f"need c0, z0, ..., c_n with n >= 1; got {len(kinds)} segments")
        expected = ["content", "thought"] * n + ["content"]
        if kinds != expected:
            raise ValueError(f"segments do not alternate: {kinds}")
        if any(not t.strip() for t in self.thoughts):
            raise ValueError("empty thought segment")
        found = extract_answer_text(self.contents[-1], self.task)
        if found != self.gold_answer:
            raise ValueError(f"gold answer {self.gold_answer!r} not extractable (got {found!r})")

    def to_record(self) -> dict:
        return {
            "task": self.task,
            "question": self.question,
            "segments": [asdict(s) for s in self.segments],
            "gold_answer": self.gold_answer,
            "seed": self.seed,
        }

    @classmethod
    def from_record(cls, rec: dict) -> HCoTSample:
        return cls(
            task=rec["task"],
            question=rec["question"],
            segments=[Segment(s["kind"], s["text"]) for s in rec["segments"]],
            gold_answer=rec["gold_answer"],
            seed=int(rec["seed"]),
        )


@dataclass(frozen=True)
class TaskSpec:
    """Task kind plus generator parameters."""

    kind: str = CHAIN_ARITHMETIC
    steps_min: int = 1
    steps_max: int = 3
    operand_max: int = 9
    value_max: int = 15
    hops_min: int = 1
    hops_max: int = 3
    kb_size: int = 500
    kb_seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == CHAIN_ARITHMETIC:
            if not 1 <= self.steps_min <= self.steps_max:
                raise ValueError("need 1 <= steps_min <= steps_max")
            if self.operand_max < 2:
                raise ValueError("operand_max must be >= 2")
            if self.value_max < self.operand_max:
                raise ValueError("value_max must be >= operand_max")
        else:
            if not 1 <= self.hops_min <= self.hops_max:
                raise ValueError("need 1 <= hops_min <= hops_max")
            if self.kb_size < self.hops_max + 2 or self.kb_size > 900:
                raise ValueError("kb_size must lie in [hops_max + 2, 900]")


def extract_answer_text(text: str, task: str) -> str | None:
    """Last match of the task's answer pattern, or None."""
    matches = ANSWER_PATTERNS[task].findall(text)
    return matches[-1] if matches else None


def _token_len(text: str) -> int:
    return len(_VOCAB.encode(text))


def _pad_thought(thought: str, following_content: str, filler: str) -> str:
    need = THOUGHT_RATIO * _token_len(following_content)
    while _token_len(thought) < need:
        thought += " " + filler
    return thought


# -- chain arithmetic --------------------------------------------------------

_OPS = {
    "+": ("Add {w}.", "add {w}", "add {w} to it", "plus"),
    "-": ("Subtract {w}.", "subtract {w}", "subtract {w} from it", "minus"),
    "*": ("Multiply by {w}.", "multiply by {w}", "multiply it by {w}", "times"),
}


def _apply(v: int, op: str, w: int) -> int:
    if op == "+":
        return v + w
    if op == "-":
        return v - w
    return v * w


def _operand_choices(v: int, op: str, operand_max: int, value_max: int) -> list[int]:
    if op == "+":
        return list(range(0, min(operand_max, value_max - v) + 1))
    if op == "-":
        return list(range(0, min(operand_max, v) + 1))
    return [w for w in range(1, operand_max + 1) if v * w <= value_max]


def gen_chain_arithmetic(seed: int, steps: int, operand_max: int, value_max: int = 15) -> HCoTSample:
    if steps < 1 or operand_max < 2:
        raise ValueError("need steps >= 1 and operand_max >= 2")
    rng = random.Random(seed)
    start = rng.randint(1, operand_max)
    program = []
    v = start
    for _ in range(steps):
        op = rng.choice("+-*")
        w = rng.choice(_operand_choices(v, op, operand_max, value_max))
        program.append((op, w))
        v = _apply(v, op, w)
    return _render_arithmetic(seed, start, program)


def _render_arithmetic(seed: int, start: int, program: Sequence[tuple[str, int]]) -> HCoTSample:
    steps = len(program)
    question = " ".join([f"Start with {start}."] + [_OPS[op][0].format(w=w) for op, w in program])
    noun = "step" if steps == 1 else "steps"
    segments = [Segment("content", f"We apply {steps} {noun} in order, starting from {start}.")]
    v = start
    for k, (op, w) in enumerate(program, 1):
        u = _apply(v, op, w)
        _, instr, act, word = _OPS[op]
        content = f"{v} {op} {w} = {u}."
        if k == steps:
            content += f" Answer: {u}"
        thought = (
            f"Step {k} says to {instr.format(w=w)}, so we take the current value {v} "
            f"and {act.format(w=w)}, and {v} {word} {w} gives {u}, which is the new value."
        )
        thought = _pad_thought(thought, content, f"We keep {u} as the result.")
        segments += [Segment("thought", thought), Segment("content", content)]
        v = u
    sample = HCoTSample(CHAIN_ARITHMETIC, question, segments, str(v), seed)
    sample.validate()
    return sample


def evaluate_question(question: str) -> int:
    """Reference interpreter for chain-arithmetic question text."""
    m = re.match(r"Start with (\d+)\.", question)
    if not m:
        raise ValueError(f"not a chain question: {question!r}")
    v = int(m.group(1))
    for verb, w in re.findall(r"(Add|Subtract|Multiply by) (\d+)\.", question[m.end():]):
        w = int(w)
        v = {"Add": v + w, "Subtract": v - w, "Multiply by": v * w}[verb]
    return v


# -- kb lookup ---------------------------------------------------------------


@lru_cache(maxsize=16)
def knowledge_base(kb_size: int, kb_seed: int = 0) -> dict[str, str]:
    """The fixed key -> key store for a (size, seed) world. Keys are 3-digit codes."""
    rng = random.Random(f"kb:{kb_seed}:{kb_size}")
    keys = [str(k) for k in rng.sample(range(100, 1000), kb_size)]
    store = {}
    for k in keys:
        v = rng.choice(keys)
        while v == k:
            v = rng.choice(keys)
        store[k] = v
    return store


def gen_kb_lookup(seed: int, hops: int, kb_size: int, kb_seed: int = 0) -> HCoTSample:
    if hops < 1 or kb_size < hops + 2:
        raise ValueError("need hops >= 1 and kb_size >= hops + 2")
    store = knowledge_base(kb_size, kb_seed)
    keys = list(store)
    rng = random.Random(seed)
    while True:
        start = rng.choice(keys)
        path = [start]
        for _ in range(hops):
            path.append(store[path[-1]])
        if len(set(path)) == len(path):
            break
    return _render_kb(seed, path)


def _render_kb(seed: int, path: Sequence[str]) -> HCoTSample:
    hops = len(path) - 1
    start, answer = path[0], path[-1]
    if hops == 1:
        question = f"What does {start} map to?"
        span = "after 1 lookup"
    else:
        question = f"What does {start} map to after {hops} lookups?"
        span = f"after {hops} lookups"
    segments = [Segment("content", "")]
    for j in range(1, hops + 1):
        key = path[j - 1]
        content = f"Action {j}: lookup[{key}] Observation {j}: {path[j]}"
        thought = (
            f"I need to find what {key} maps to, because the question asks where the chain "
            f"from {start} ends {span}, and this is lookup {j} of {hops}, so the next thing "
            f"to do is to look up {key} in the store."
        )
        thought = _pad_thought(thought, content, f"I look up {key} now.")
        segments += [Segment("thought", thought), Segment("content", content)]
    content = f"Action {hops + 1}: finish[{answer}]"
    thought = (
        f"There are no more lookups left, so the chain from {start} ends at {answer}, "
        f"and {answer} should be the answer, so this is done now."
    )
    thought = _pad_thought(thought, content, f"The answer is {answer}.")
    segments += [Segment("thought", thought), Segment("content", content)]
    sample = HCoTSample(KB_LOOKUP, question, segments, answer, seed)
    sample.validate()
    return sample


def gold_actions(sample: HCoTSample) -> list[str]:
    return ACTION_PATTERN.findall(" ".join(sample.contents))


# -- datasets ----------------------------------------------------------------


def sample_seed(base_seed: int, index: int) -> int:
    return (int(base_seed) << 24) + int(index)


def generate_one(task: TaskSpec, seed: int) -> HCoTSample:
    rng = random.Random(f"size:{seed}")
    if task.kind == CHAIN_ARITHMETIC:
        steps = rng.randint(task.steps_min, task.steps_max)
        return gen_chain_arithmetic(seed, steps, task.operand_max, task.value_max)
    hops = rng.randint(task.hops_min, task.hops_max)
    return gen_kb_lookup(seed, hops, task.kb_size, task.kb_seed)


def generate_dataset(task: TaskSpec, count: int, seed: int, max_tries: int | None = None) -> list[HCoTSample]:
    """``count`` samples with pairwise distinct questions (duplicates are skipped)."""
    seen: set[str] = set()
    out: list[HCoTSample] = []
    limit = max_tries if max_tries is not None else 50 * count + 1000
    i = 0
    while len(out) < count:
        if i >= limit:
            raise ValueError(f"only {len(out)} distinct questions after {i} draws; question space too small")
        s = generate_one(task, sample_seed(seed, i))
        i += 1
        if s.question in seen:
            continue
        seen.add(s.question)
        out.append(s)
    return out


def split_dataset(
    samples: Sequence[HCoTSample], fractions: Sequence[float], seed: int
) -> tuple[list[HCoTSample], list[HCoTSample], list[HCoTSample]]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
    n = len(samples)
    order = list(range(n))
    random.Random(f"split:{seed}").shuffle(order)
    n_train = round(fractions[0] * n)
    n_dev = min(round(fractions[1] * n), n - n_train)
    parts = (order[:n_train], order[n_train:n_train + n_dev], order[n_train + n_dev:])
    splits = tuple([samples[i] for i in sorted(p)] for p in parts)
    qs = [set(s.question for s in part) for part in splits]
    for a in range(3):
        for b in range(a + 1, 3):
            shared = qs[a] & qs[b]
            if shared:
                raise ValueError(f"question appears in two splits: {sorted(shared)[0]!r}")
    return splits


def write_jsonl(path, samples: Iterable[HCoTSample]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), ensure_ascii=True) + "\n")
            n += 1
    return n


def read_jsonl(path) -> list[HCoTSample]:
    with open(path, encoding="utf-8") as fh:
        return [HCoTSample.from_record(json.loads(line)) for line in fh if line.strip()]


def thought_only_tokens(samples: Iterable[HCoTSample], vocab: Vocab) -> set[int]:
    """Token ids that occur in thoughts but never in questions or contents."""
    in_thoughts: set[int] = set()
    elsewhere: set[int] = set()
    for s in samples:
        elsewhere.update(vocab.encode(s.question))
        for seg in s.segments:
            (in_thoughts if seg.kind == "thought" else elsewhere).update(vocab.encode(seg.text))
    return in_thoughts - elsewhere


__all__ = [
    "ANSWER_PATTERNS", "CHAIN_ARITHMETIC", "KB_LOOKUP", "HCoTSample", "Segment", "TaskSpec",
    "evaluate_question", "extract_answer_text", "gen_chain_arithmetic", "gen_kb_lookup",
    "generate_dataset", "gold_actions", "knowledge_base", "read_jsonl", "split_dataset",
    "thought_only_tokens", "write_jsonl",
]
