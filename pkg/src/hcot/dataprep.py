"""Tokenized training instances for the four training configurations.

Every sequence is laid out as ``[BOS] question [SEP] target``. The layouts:

* aux:     input  = BOS x SEP c0 [CoT] c1 [CoT] ... c_i [CoT]
           target = z_i [EOT]
* hcot:    input  = BOS x SEP
           target = c0 [CoT] c1 [CoT] ... c_n [EOS]
* fullcot: target = c0 z0 c1 z1 ... c_n [EOS]
* nocot:   target = c0 c1 ... c_n [EOS]

so aux input ``i`` is exactly the hcot sequence cut after its ``i``-th [CoT].
Loss is taken on target tokens only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from hcot.taskgen import HCoTSample
from hcot.vocab import BOS, COT, EOS, EOT, PAD, SEP, Vocab

MARKER = "marker"
FULL_TEXT = "full"


@dataclass
class Instance:
    """One input/target pair. ``source`` indexes the originating sample."""

    input_ids: list[int]
    target_ids: list[int]
    sample: HCoTSample
    source: int = 0

    @property
    def tokens(self) -> list[int]:
        return self.input_ids + self.target_ids

    def __len__(self) -> int:
        return len(self.input_ids) + len(self.target_ids)


@dataclass
class AuxInstance(Instance):
    thought_index: int = 0
    cot_position: int = 0
    thought_span: list[int] = field(default_factory=list)


@dataclass
class HCoTInstance(Instance):
    cot_positions: list[int] = field(default_factory=list)  # indices into target_ids
    cot_links: list[int] = field(default_factory=list)  # thought index per [CoT]

    def aux_prefix(self, k: int) -> list[int]:
        """Aux-model input for the ``k``-th [CoT]: the sequence up to and including it."""
        return self.input_ids + self.target_ids[: self.cot_positions[k] + 1]


def question_ids(question: str, vocab: Vocab) -> list[int]:
    return [BOS] + vocab.encode(question) + [SEP]


def make_aux_instances(
    sample: HCoTSample, vocab: Vocab, prior: str = MARKER, source: int = 0
) -> list[AuxInstance]:
    """One instance per thought. ``prior="full"`` keeps earlier thoughts verbatim in the input."""
    if prior not in (MARKER, FULL_TEXT):
        raise ValueError(f"prior must be {MARKER!r} or {FULL_TEXT!r}")
    contents = [vocab.encode(c) for c in sample.contents]
    thoughts = [vocab.encode(z) for z in sample.thoughts]
    out = []
    prefix = question_ids(sample.question, vocab)
    for i, z in enumerate(thoughts):
        prefix = prefix + contents[i] + [COT]
        target = z + [EOT]
        n = len(prefix)
        out.append(AuxInstance(
            input_ids=prefix, target_ids=target, sample=sample, source=source,
            thought_index=i, cot_position=n - 1, thought_span=list(range(n, n + len(z))),
        ))
        if prior == FULL_TEXT:
            prefix = prefix + z
    return out


def make_hcot_instance(sample: HCoTSample, vocab: Vocab, source: int = 0) -> HCoTInstance:
    if not sample.thoughts:
        raise ValueError("sample has no thoughts")
    contents = [vocab.encode(c) for c in sample.contents]
    target: list[int] = []
    cots = []
    for i, c in enumerate(contents):
        target += c
        if i < len(contents) - 1:
            cots.append(len(target))
            target.append(COT)
    target.append(EOS)
    return HCoTInstance(
        input_ids=question_ids(sample.question, vocab), target_ids=target, sample=sample,
        source=source, cot_positions=cots, cot_links=list(range(len(cots))),
    )


def make_fullcot_instance(sample: HCoTSample, vocab: Vocab, source: int = 0) -> Instance:
    target = [t for seg in sample.segments for t in vocab.encode(seg.text)] + [EOS]
    return Instance(question_ids(sample.question, vocab), target, sample, source)


def make_nocot_instance(sample: HCoTSample, vocab: Vocab, source: int = 0) -> Instance:
    target = [t for c in sample.contents for t in vocab.encode(c)] + [EOS]
    return Instance(question_ids(sample.question, vocab), target, sample, source)


def build_instances(samples: Sequence[HCoTSample], vocab: Vocab, stage: str, prior: str = MARKER) -> list:
    if stage == "aux":
        return [a for k, s in enumerate(samples) for a in make_aux_instances(s, vocab, prior, k)]
    maker = {"hcot": make_hcot_instance, "fullcot": make_fullcot_instance, "nocot": make_nocot_instance}
    if stage not in maker:
        raise ValueError(f"unknown stage {stage!r}")
    return [maker[stage](s, vocab, k) for k, s in enumerate(samples)]


@dataclass
class Batch:
    """Right-padded teacher-forcing batch.

    ``tokens[b, t]`` is the model input; ``targets[b, t]`` the next token and
    ``loss_mask[b, t]`` is 1 where ``targets`` is a target-side token.
    """

    tokens: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    instances: list


def collate(instances: Sequence[Instance]) -> Batch:
    T = max(len(x) for x in instances)
    B = len(instances)
    tokens = np.full((B, T), PAD, dtype=np.int64)
    targets = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T))
    for b, inst in enumerate(instances):
        seq = inst.tokens
        tokens[b, : len(seq)] = seq
        targets[b, : len(seq) - 1] = seq[1:]
        mask[b, len(inst.input_ids) - 1 : len(seq) - 1] = 1.0
    return Batch(tokens, targets, mask, list(instances))


def instance_record(inst: Instance, stage: str) -> dict:
    rec = {"stage": stage, "source": inst.source, "input_ids": inst.input_ids, "target_ids": inst.target_ids}
    if isinstance(inst, AuxInstance):
        rec.update(thought_index=inst.thought_index, cot_position=inst.cot_position,
                   thought_span=inst.thought_span)
    if isinstance(inst, HCoTInstance):
        rec.update(cot_positions=inst.cot_positions, cot_links=inst.cot_links)
    return rec


def write_instance_cache(path, instances: Iterable[Instance], stage: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_record(inst, stage)) + "\n")
