"""Two-stage training: auxiliary CoT model, then HCoT model against the frozen aux.

Stage 1 minimises ``CE + lam * contrastive`` where the contrastive term is a
symmetric in-batch softmax between the unit-normalised [CoT] hidden state
(anchor ``r``) and the unit-normalised mean of the hidden states over the
thought tokens (``z``) of the same teacher-forced pass. Stage 2 trains the
main model with plain CE while the frozen aux model supplies the vectors that
replace the [CoT] input embeddings.
"""

from __future__ import annotations

import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from hcot import numerics as nx
from hcot.dataprep import AuxInstance, HCoTInstance, Instance, collate
from hcot.model import FrozenModelError, Transformer, forward_batch

log = logging.getLogger(__name__)

STAGES = ("aux", "hcot", "fullcot", "nocot")
IN_CONTEXT = "in_context"
STANDALONE = "standalone"


@dataclass
class TrainConfig:
    lam: float = 0.1
    learning_rate: float = 3e-3
    batch_size: int = 16
    epochs: int = 10
    grad_accum_steps: int = 1
    seed: int = 0
    checkpoint_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    min_lr_frac: float = 0.1
    max_grad_norm: float = 1.0
    pooling: str = IN_CONTEXT
    dev_limit: int | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.batch_size < 1 or self.grad_accum_steps < 1 or self.epochs < 1:
            raise ValueError("batch_size, grad_accum_steps and epochs must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.pooling not in (IN_CONTEXT, STANDALONE):
            raise ValueError(f"pooling must be {IN_CONTEXT!r} or {STANDALONE!r}")


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; carries the last good model and the log so far."""

    def __init__(self, message: str, model: Transformer, log_records: list[dict]):
        super().__init__(message)
        self.model = model
        self.log = log_records


# -- optimizer -----------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay (matrices only), warmup then cosine decay."""

    def __init__(self, model: Transformer, cfg: TrainConfig, total_steps: int):
        self.model = model
        self.cfg = cfg
        self.total_steps = max(1, total_steps)
        self.warmup = max(1, int(round(cfg.warmup_frac * self.total_steps)))
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params.items()}

    def lr_at(self, t: int) -> float:
        base = self.cfg.learning_rate
        if t <= self.warmup:
            return base * t / self.warmup
        frac = min(1.0, (t - self.warmup) / max(1, self.total_steps - self.warmup))
        floor = self.cfg.min_lr_frac
        return base * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))

    def step(self, grads: dict[str, np.ndarray]) -> float:
        if self.model.frozen:
            raise FrozenModelError("refusing to update a frozen model")
        cfg = self.cfg
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        clip = min(1.0, cfg.max_grad_norm / (norm + 1e-12)) if cfg.max_grad_norm > 0 else 1.0
        self.t += 1
        lr = self.lr_at(self.t)
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for name, p in self.model.params.items():
            g = grads[name] * clip
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if p.ndim == 2 and cfg.weight_decay:
                p *= 1 - lr * cfg.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        return norm


@dataclass
class TrainState:
    """Optimizer plus gradient-accumulation buffer for one model."""

    optimizer: AdamW
    accum_steps: int = 1
    pending: dict[str, np.ndarray] = field(default_factory=dict)
    micro: int = 0
    steps: int = 0

    def accumulate(self, grads: dict[str, np.ndarray]) -> bool:
        for k, g in grads.items():
            self.pending[k] = g if k not in self.pending else self.pending[k] + g
        self.micro += 1
        if self.micro >= self.accum_steps:
            self.flush()
            return True
        return False

    def flush(self) -> None:
        if not self.micro:
            return
        self.optimizer.step(self.pending)
        self.pending = {}
        self.micro = 0
        self.steps += 1


def new_state(model: Transformer, cfg: TrainConfig, total_steps: int) -> TrainState:
    if model.frozen:
        raise FrozenModelError("cannot train a frozen model")
    return TrainState(AdamW(model, cfg, total_steps), cfg.grad_accum_steps)


# -- losses --------------------------------------------------------------------


def contrastive_loss(Z: nx.Tensor, R: nx.Tensor, tol: float = 1e-8) -> nx.Tensor:
    """Symmetric in-batch contrastive loss between matched rows of ``Z`` and ``R``.

    ``-(1/2n) sum_i [log softmax_k(z_i . r_k)[i] + log softmax_j(z_j . r_i)[i]]``
    with raw dot products of unit vectors and no temperature.
    """
    if Z.shape != R.shape or Z.data.ndim != 2:
        raise ValueError(f"contrastive_loss needs matching [n, d] inputs, got {Z.shape} and {R.shape}")
    for name, t in (("Z", Z), ("R", R)):
        norms = np.sqrt((t.data * t.data).sum(axis=1))
        if np.abs(norms - 1.0).max() > tol:
            raise ValueError(f"{name} rows must be unit norm")
    n = Z.shape[0]
    labels = np.arange(n)
    sim = nx.matmul(Z, nx.transpose(R))
    rows = nx.softmax_cross_entropy(sim, labels)
    cols = nx.softmax_cross_entropy(nx.transpose(sim), labels)
    return nx.scale(nx.add(rows, cols), 0.5)


def _standalone_pool(model: Transformer, instances: Sequence[AuxInstance], graph) -> nx.Tensor:
    seqs = [[1] + inst.target_ids[:-1] for inst in instances]  # BOS + thought tokens
    T = max(len(s) for s in seqs)
    toks = np.zeros((len(seqs), T), dtype=np.int64)
    w = np.zeros((len(seqs), T))
    for b, s in enumerate(seqs):
        toks[b, : len(s)] = s
        w[b, 1 : len(s)] = 1.0
    _, hidden = forward_batch(model, toks, graph=graph)
    return nx.masked_mean(hidden, w)


def aux_losses(
    model: Transformer, instances: Sequence[AuxInstance], lam: float, graph=None, pooling: str = IN_CONTEXT
) -> tuple[nx.Tensor, nx.Tensor, nx.Tensor]:
    """Return ``(ce, contrastive, total)`` tensors for one stage-1 batch."""
    batch = collate(instances)
    logits, hidden = forward_batch(model, batch.tokens, graph=graph)
    ce = nx.softmax_cross_entropy(logits, batch.targets, batch.loss_mask)
    B = len(instances)
    r = nx.take_rows(hidden, np.arange(B), [inst.cot_position for inst in instances])
    if pooling == STANDALONE:
        pooled = _standalone_pool(model, instances, graph)
    else:
        w = np.zeros(batch.tokens.shape)
        for b, inst in enumerate(instances):
            w[b, inst.thought_span] = 1.0
        pooled = nx.masked_mean(hidden, w)
    con = contrastive_loss(nx.l2_normalize(pooled), nx.l2_normalize(r))
    total = nx.add(ce, nx.scale(con, lam))
    return ce, con, total


def lm_loss(
    model: Transformer, instances: Sequence[Instance], graph=None, reps: dict | None = None, mask_cot: bool = False
) -> nx.Tensor:
    """Teacher-forced CE over target tokens; ``reps[(source, k)]`` overrides the k-th [CoT]."""
    batch = collate(instances)
    overrides = []
    for b, inst in enumerate(instances):
        if isinstance(inst, HCoTInstance):
            if reps is None:
                raise ValueError("hcot instances need [CoT] representations")
            base = len(inst.input_ids)
            for k, pos in enumerate(inst.cot_positions):
                overrides.append((b, base + pos, reps[(inst.source, k)]))
    mask = batch.loss_mask
    if mask_cot:
        mask = mask * (batch.targets != model.config.cot_token_id)
    logits, _ = forward_batch(model, batch.tokens, overrides, graph=graph)
    return nx.softmax_cross_entropy(logits, batch.targets, mask)


def compute_representations(
    aux: Transformer, instances: Sequence[HCoTInstance], batch_size: int = 64
) -> dict[tuple[int, int], np.ndarray]:
    """r vectors for every [CoT] of every instance: aux final hidden at the prefix's last position."""
    jobs = [(inst.source, k, inst.aux_prefix(k)) for inst in instances for k in range(len(inst.cot_positions))]
    jobs.sort(key=lambda j: len(j[2]))
    out = {}
    for i in range(0, len(jobs), batch_size):
        chunk = jobs[i : i + batch_size]
        T = max(len(j[2]) for j in chunk)
        toks = np.zeros((len(chunk), T), dtype=np.int64)
        for b, (_, _, seq) in enumerate(chunk):
            toks[b, : len(seq)] = seq
        _, hidden = forward_batch(aux, toks)
        for b, (src, k, seq) in enumerate(chunk):
            out[(src, k)] = hidden.data[b, len(seq) - 1].copy()
    return out


# -- single steps --------------------------------------------------------------


def aux_training_step(
    aux_model: Transformer, instances: Sequence[AuxInstance], cfg: TrainConfig, state: TrainState
) -> dict[str, float]:
    if aux_model.frozen:
        raise FrozenModelError("aux model is frozen")
    if cfg.lam > 0 and len({i.source for i in instances}) < len(instances):
        log.info("stage-1 batch holds several thoughts of one sample; in-batch negatives overlap")
    g = nx.Graph()
    ce, con, total = aux_losses(aux_model, instances, cfg.lam, g, cfg.pooling)
    g.backward(nx.scale(total, 1.0 / state.accum_steps))
    state.accumulate(g.grads())
    return {"ce": ce.item(), "contrastive": con.item(), "total": total.item()}


def lm_training_step(
    model: Transformer, instances: Sequence[Instance], cfg: TrainConfig, state: TrainState
) -> dict[str, float]:
    g = nx.Graph()
    loss = lm_loss(model, instances, g)
    g.backward(nx.scale(loss, 1.0 / state.accum_steps))
    state.accumulate(g.grads())
    v = loss.item()
    return {"ce": v, "contrastive": 0.0, "total": v}


def hcot_training_step(
    hcot_model: Transformer,
    frozen_aux: Transformer,
    instances: Sequence[HCoTInstance],
    cfg: TrainConfig,
    state: TrainState,
    reps: dict | None = None,
) -> dict[str, float]:
    """One stage-2 step. ``reps`` may hold precomputed aux vectors (the aux is frozen,
    so they equal what a fresh aux pass would give)."""
    if not frozen_aux.frozen:
        raise ValueError("stage 2 requires a frozen aux model")
    if reps is None:
        reps = compute_representations(frozen_aux, instances)
    g = nx.Graph()
    loss = lm_loss(hcot_model, instances, g, reps)
    g.backward(nx.scale(loss, 1.0 / state.accum_steps))
    state.accumulate(g.grads())
    v = loss.item()
    return {"ce": v, "contrastive": 0.0, "total": v}


# -- batching ------------------------------------------------------------------


def make_batches(instances: Sequence[Instance], batch_size: int, rng: random.Random, distinct_sources: bool = False):
    """Shuffle, bucket by length within groups of 8 batches, optionally avoid repeated sources."""
    order = list(range(len(instances)))
    rng.shuffle(order)
    group = 8 * batch_size
    batches = []
    for start in range(0, len(order), group):
        chunk = sorted(order[start : start + group], key=lambda i: len(instances[i]))
        if distinct_sources:
            pending = chunk
            while pending:
                batch, seen, rest = [], set(), []
                for i in pending:
                    src = instances[i].source
                    if len(batch) < batch_size and src not in seen:
                        batch.append(i)
                        seen.add(src)
                    else:
                        rest.append(i)
                batches.append(batch)
                pending = rest
        else:
            batches += [chunk[j : j + batch_size] for j in range(0, len(chunk), batch_size)]
    rng.shuffle(batches)
    return [[instances[i] for i in b] for b in batches]


# -- evaluation ----------------------------------------------------------------


def aux_perplexity(aux: Transformer, instances: Sequence[AuxInstance], batch_size: int = 64) -> float:
    """exp of the token-mean CE over dev thought targets."""
    total = 0.0
    count = 0.0
    ordered = sorted(instances, key=len)
    for i in range(0, len(ordered), batch_size):
        chunk = ordered[i : i + batch_size]
        batch = collate(chunk)
        ce = lm_loss(aux, chunk).item()
        n = batch.loss_mask.sum()
        total += ce * n
        count += n
    return math.exp(total / count)


def dev_accuracy(model: Transformer, dev: Sequence[Instance], stage: str, aux: Transformer | None, infer_cfg) -> float:
    from hcot.inference import extract_answer, infer_full_cot, infer_hcot, infer_no_cot
    from hcot.bench import answers_match

    correct = 0
    for inst in dev:
        s = inst.sample
        if stage == "hcot":
            trace = infer_hcot(s.question, model, aux, infer_cfg, task=s.task)
        elif stage == "fullcot":
            trace = infer_full_cot(s.question, model, infer_cfg, task=s.task)
        else:
            trace = infer_no_cot(s.question, model, infer_cfg, task=s.task)
        correct += answers_match(extract_answer(trace, s.task), s.gold_answer, s.task)
    return correct / len(dev)


# -- full stage ----------------------------------------------------------------


def _dedupe_samples(dev: Sequence[Instance]) -> list[Instance]:
    seen, out = set(), []
    for inst in dev:
        if inst.source not in seen:
            seen.add(inst.source)
            out.append(inst)
    return out


def train_stage(
    model: Transformer,
    instances: Sequence[Instance],
    dev_instances: Sequence[Instance],
    cfg: TrainConfig,
    stage: str,
    aux_model: Transformer | None = None,
    infer_cfg=None,
    progress: Callable[[dict], None] | None = None,
) -> tuple[Transformer, list[dict]]:
    """Train ``model`` in place for ``cfg.epochs`` and return ``(best_model, log)``.

    Dev is scored at step 0 and every ``checkpoint_every`` optimizer steps:
    aux by thought perplexity (lower is better), the rest by answer accuracy
    through the inference path (higher is better). Ties keep the earliest.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if not instances or not dev_instances:
        raise ValueError("train and dev sets must be nonempty")
    if stage == "hcot" and (aux_model is None or not aux_model.frozen):
        raise ValueError("stage hcot requires a frozen aux model")
    if infer_cfg is None:
        from hcot.inference import InferenceConfig

        infer_cfg = InferenceConfig()

    rng = random.Random(cfg.seed)
    distinct = stage == "aux"
    schedule = [make_batches(instances, cfg.batch_size, rng, distinct) for _ in range(cfg.epochs)]
    total_steps = sum(math.ceil(len(b) / cfg.grad_accum_steps) for b in schedule)
    state = new_state(model, cfg, total_steps)
    reps = compute_representations(aux_model, instances) if stage == "hcot" else None
    dev = list(dev_instances) if stage == "aux" else _dedupe_samples(dev_instances)
    if cfg.dev_limit is not None and stage != "aux":
        dev = dev[: cfg.dev_limit]
    lower_is_better = stage == "aux"

    def evaluate() -> float:
        if stage == "aux":
            return aux_perplexity(model, dev)
        return dev_accuracy(model, dev, stage, aux_model, infer_cfg)

    t0 = time.perf_counter()
    records: list[dict] = []
    window: list[dict] = []
    best = {"metric": None, "model": model.copy(), "step": 0}

    def checkpoint() -> None:
        metric = evaluate()
        rec = {
            "step": state.steps,
            "stage": stage,
            "ce": float(np.mean([w["ce"] for w in window])) if window else None,
            "contrastive": float(np.mean([w["contrastive"] for w in window])) if window else None,
            "total": float(np.mean([w["total"] for w in window])) if window else None,
            "dev_metric": metric,
            "wall_clock": time.perf_counter() - t0,
        }
        window.clear()
        records.append(rec)
        better = best["metric"] is None or (metric < best["metric"] if lower_is_better else metric > best["metric"])
        if better:
            best.update(metric=metric, model=model.copy(), step=state.steps)
        if progress:
            progress(rec)

    checkpoint()
    for epoch_batches in schedule:
        for batch in epoch_batches:
            before = state.steps
            if stage == "aux":
                out = aux_training_step(model, batch, cfg, state)
            elif stage == "hcot":
                out = hcot_training_step(model, aux_model, batch, cfg, state, reps)
            else:
                out = lm_training_step(model, batch, cfg, state)
            if not math.isfinite(out["total"]):
                raise TrainingAborted(f"non-finite loss at step {state.steps}", best["model"], records)
            window.append(out)
            if state.steps != before and state.steps % cfg.checkpoint_every == 0:
                checkpoint()
        before = state.steps
        state.flush()
        if state.steps != before and state.steps % cfg.checkpoint_every == 0:
            checkpoint()
    if records[-1]["step"] != state.steps:
        checkpoint()
    return best["model"], records


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
