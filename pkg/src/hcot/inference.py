"""Decode-time orchestration for HCoT and the two single-model baselines.

HCoT loop: the main model decodes until it emits [CoT] or [EOS]. On [CoT] the
aux model encodes the whole prefix (question, contents so far, every [CoT]
marker) in one forward pass; its final hidden state at the terminal [CoT]
replaces that token's input embedding in the main model, and decoding resumes.
Only tokens sampled by the main model count as completion tokens; aux
encoding is timed separately.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from hcot.dataprep import question_ids
from hcot.model import Decoder, Transformer, extract_cot_representation, forward, generate
from hcot.taskgen import extract_answer_text
from hcot.vocab import COT, EOS, EOT, Vocab

_VOCAB = Vocab()


@dataclass
class InferenceConfig:
    temperature: float = 0.01
    top_p: float = 1.0
    max_new_tokens: int = 256
    max_handoffs: int = 16
    max_thought_tokens: int = 128
    recover_thoughts: bool = False
    store_vectors: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.max_handoffs < 1 or self.max_new_tokens < 1:
            raise ValueError("max_handoffs and max_new_tokens must be >= 1")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")


@dataclass
class Handoff:
    prefix: list[int]
    cot_position: int
    r_hash: str
    r_vector: list[float] | None = None
    recovered_thought: str | None = None


@dataclass
class RunStats:
    completion_tokens: int = 0
    aux_encode_tokens: int = 0
    handoff_count: int = 0
    wall_ms: dict[str, float] = field(default_factory=lambda: {
        "total": 0.0, "hcot_decode": 0.0, "aux_encode": 0.0, "recovery": 0.0,
    })


@dataclass
class InferenceTrace:
    question: str
    mode: str
    emitted: list[int]
    text: str = ""
    contents: list[str] = field(default_factory=list)
    handoffs: list[Handoff] = field(default_factory=list)
    answer: str | None = None
    truncated: bool = False
    stats: RunStats = field(default_factory=RunStats)

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: dict) -> InferenceTrace:
        rec = dict(rec)
        rec["handoffs"] = [Handoff(**h) for h in rec.get("handoffs", [])]
        rec["stats"] = RunStats(**rec["stats"])
        return cls(**rec)


def vector_hash(v: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(v, dtype="<f8").tobytes()).hexdigest()[:16]


def _rng(cfg: InferenceConfig) -> np.random.Generator | None:
    return None if cfg.temperature <= 0.01 else np.random.default_rng(cfg.seed)


def _finish(trace: InferenceTrace, task: str | None, vocab: Vocab) -> InferenceTrace:
    trace.text = vocab.decode(trace.emitted)
    trace.contents = vocab.split_on_cot([t for t in trace.emitted if t != EOS])
    if task is not None:
        trace.answer = extract_answer(trace, task)
    return trace


def infer_hcot(
    question: str,
    hcot_model: Transformer,
    aux_model: Transformer,
    cfg: InferenceConfig | None = None,
    task: str | None = None,
    vocab: Vocab = _VOCAB,
) -> InferenceTrace:
    cfg = cfg or InferenceConfig()
    if not aux_model.frozen:
        raise ValueError("the aux model must be frozen for inference")
    if hcot_model.config.hidden_dim != aux_model.config.hidden_dim:
        raise ValueError("hcot and aux models must share hidden_dim")
    if hcot_model.config.vocab_size != aux_model.config.vocab_size:
        raise ValueError("hcot and aux models must share the vocabulary")
    prompt = question_ids(question, vocab)
    trace = InferenceTrace(question, "hcot", [])
    wall = trace.stats.wall_ms
    rng = _rng(cfg)
    stop = frozenset((COT, EOS))

    t_start = time.perf_counter()
    dec = Decoder(hcot_model)
    logits = dec.feed(prompt)
    t_mark = time.perf_counter()
    wall["hcot_decode"] += (t_mark - t_start) * 1e3
    while True:
        t0 = time.perf_counter()
        budget = cfg.max_new_tokens - len(trace.emitted)
        out = generate(dec, logits, stop, budget, cfg.temperature, cfg.top_p, rng)
        trace.emitted += out
        wall["hcot_decode"] += (time.perf_counter() - t0) * 1e3
        if out[-1] != COT:
            trace.truncated = out[-1] != EOS
            break
        if len(trace.handoffs) >= cfg.max_handoffs or len(trace.emitted) >= cfg.max_new_tokens:
            trace.truncated = True
            break
        if dec.length + 1 > hcot_model.config.max_seq_len:
            trace.truncated = True
            break
        t0 = time.perf_counter()
        prefix = prompt + trace.emitted
        r = extract_cot_representation(forward(aux_model, prefix), len(prefix) - 1)
        trace.stats.aux_encode_tokens += len(prefix)
        trace.handoffs.append(Handoff(
            prefix=prefix, cot_position=len(prefix) - 1, r_hash=vector_hash(r),
            r_vector=r.tolist() if cfg.store_vectors else None,
        ))
        t1 = time.perf_counter()
        wall["aux_encode"] += (t1 - t0) * 1e3
        logits = dec.feed([COT], {0: r})
        wall["hcot_decode"] += (time.perf_counter() - t1) * 1e3
    wall["total"] = (time.perf_counter() - t_start) * 1e3
    trace.stats.completion_tokens = len(trace.emitted)
    trace.stats.handoff_count = len(trace.handoffs)
    if cfg.recover_thoughts and trace.handoffs:
        t0 = time.perf_counter()
        for h, text in zip(trace.handoffs, recover_thoughts(trace, aux_model, cfg, vocab)):
            h.recovered_thought = text
        wall["recovery"] = (time.perf_counter() - t0) * 1e3
        wall["total"] += wall["recovery"]
    return _finish(trace, task, vocab)


def recover_thoughts(
    trace: InferenceTrace, aux_model: Transformer, cfg: InferenceConfig | None = None, vocab: Vocab = _VOCAB
) -> list[str]:
    """Greedy-decode the full thought behind every handoff; the trace is not modified."""
    cfg = cfg or InferenceConfig()
    if not trace.handoffs:
        raise ValueError("trace has no handoffs")
    texts = []
    for h in trace.handoffs:
        if not h.prefix:
            raise ValueError("handoff record has no prefix")
        dec = Decoder(aux_model)
        logits = dec.feed(h.prefix)
        out = generate(dec, logits, frozenset((EOT,)), cfg.max_thought_tokens, 0.0, 1.0, None)
        texts.append(vocab.decode([t for t in out if t != EOT]))
    return texts


def _single_model(question: str, model: Transformer, cfg: InferenceConfig, mode: str, task, vocab) -> InferenceTrace:
    prompt = question_ids(question, vocab)
    trace = InferenceTrace(question, mode, [])
    t0 = time.perf_counter()
    dec = Decoder(model)
    logits = dec.feed(prompt)
    out = generate(dec, logits, frozenset((EOS,)), cfg.max_new_tokens, cfg.temperature, cfg.top_p, _rng(cfg))
    ms = (time.perf_counter() - t0) * 1e3
    trace.emitted = out
    trace.truncated = out[-1] != EOS
    trace.stats.completion_tokens = len(out)
    trace.stats.wall_ms["hcot_decode"] = ms
    trace.stats.wall_ms["total"] = ms
    return _finish(trace, task, vocab)


def infer_full_cot(question, cot_model, cfg=None, task=None, vocab: Vocab = _VOCAB) -> InferenceTrace:
    return _single_model(question, cot_model, cfg or InferenceConfig(), "fullcot", task, vocab)


def infer_no_cot(question, nocot_model, cfg=None, task=None, vocab: Vocab = _VOCAB) -> InferenceTrace:
    return _single_model(question, nocot_model, cfg or InferenceConfig(), "nocot", task, vocab)


def extract_answer(trace: InferenceTrace, task: str) -> str | None:
    text = trace.text if trace.text else _VOCAB.decode(trace.emitted)
    return extract_answer_text(text, task)


def run_questions(questions: Sequence[str], mode: str, models: dict, cfg: InferenceConfig, task: str):
    if mode == "hcot":
        return [infer_hcot(q, models["hcot"], models["aux"], cfg, task) for q in questions]
    if mode == "fullcot":
        return [infer_full_cot(q, models["fullcot"], cfg, task) for q in questions]
    if mode == "nocot":
        return [infer_no_cot(q, models["nocot"], cfg, task) for q in questions]
    raise ValueError(f"unknown mode {mode!r}")
