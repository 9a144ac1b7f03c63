"""Fast invariant suite behind ``hcot check``.

Model-level checks run on tiny random models; run-directory checks only run
for artifacts that already exist under the configured run root.
"""

from __future__ import annotations

import math

import numpy as np

from hcot import numerics as nx
from hcot.config import ExperimentConfig
from hcot.dataprep import build_instances
from hcot.model import Decoder, EmbeddingOverride, ModelConfig, file_sha256, forward, init_model
from hcot.taskgen import TaskSpec, generate_dataset
from hcot.training import aux_losses, contrastive_loss
from hcot.vocab import COT, Vocab

Result = tuple[str, bool, str]


def _contrastive_oracle(Z: np.ndarray, R: np.ndarray) -> float:
    n = Z.shape[0]
    total = 0.0
    for i in range(n):
        row = [float(Z[i] @ R[k]) for k in range(n)]
        col = [float(Z[j] @ R[i]) for j in range(n)]
        total -= row[i] - math.log(math.fsum(math.exp(s) for s in row))
        total -= col[i] - math.log(math.fsum(math.exp(s) for s in col))
    return total / (2 * n)


def check_gradients() -> Result:
    vocab = Vocab()
    samples = generate_dataset(TaskSpec("chain_arithmetic", steps_max=1), 2, seed=7)
    inst = build_instances(samples, vocab, "aux")[:2]
    model = init_model(ModelConfig(len(vocab), hidden_dim=8, num_layers=1, num_heads=2, max_seq_len=128), 3)
    names = ["tok_emb", "layers.0.attn.w_qkv", "layers.0.mlp.w1", "head.w"]
    errs = nx.grad_check(lambda g: aux_losses(model, inst, 0.1, g)[2], eps=1e-4,
                         params=names)
    worst = max(errs.values())
    return "gradients", worst < 1e-4, f"max relative error {worst:.2e}"


def check_contrastive(trials: int = 20) -> Result:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.choice([1, 2, 4, 8]))
        Z = rng.normal(size=(n, 16))
        R = rng.normal(size=(n, 16))
        Z /= np.linalg.norm(Z, axis=1, keepdims=True)
        R /= np.linalg.norm(R, axis=1, keepdims=True)
        got = contrastive_loss(nx.constant(Z), nx.constant(R)).item()
        worst = max(worst, abs(got - _contrastive_oracle(Z, R)))
    return "contrastive", worst < 1e-10, f"max deviation from oracle {worst:.2e}"


def check_identity_override() -> Result:
    vocab = Vocab()
    model = init_model(ModelConfig(len(vocab), hidden_dim=16, num_layers=2, num_heads=2, max_seq_len=32), 5)
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(10):
        toks = rng.integers(6, len(vocab), size=20)
        pos = int(rng.integers(0, 20))
        toks[pos] = COT
        plain = forward(model, toks).logits
        over = forward(model, toks, [EmbeddingOverride(pos, model.params["tok_emb"][COT])]).logits
        worst = max(worst, float(np.abs(plain - over).max()))
    return "identity override", worst <= 1e-12, f"max logit change {worst:.2e}"


def check_decoder() -> Result:
    vocab = Vocab()
    model = init_model(ModelConfig(len(vocab), hidden_dim=16, num_layers=2, num_heads=2, max_seq_len=32), 6)
    toks = list(np.random.default_rng(2).integers(6, len(vocab), size=24))
    full = forward(model, toks).logits
    dec = Decoder(model)
    steps = [dec.feed(toks[:8])] + [dec.feed([t]) for t in toks[8:]]
    worst = max(float(np.abs(full[7 + i] - s).max()) for i, s in enumerate(steps))
    return "kv-cache decoder", worst < 1e-10, f"max deviation from full forward {worst:.2e}"


def check_run_dir(cfg: ExperimentConfig) -> list[Result]:
    from hcot import experiment as ex

    root = cfg.run_root()
    out: list[Result] = []
    if not root.exists():
        return out
    if (root / "data" / ex.MANIFEST).exists():
        problems = ex.check_data(cfg)
        out.append(("data splits", not problems, "; ".join(problems) or "manifest and disjointness ok"))
    for d in sorted(p for p in root.iterdir() if p.is_dir() and p.name != "data"):
        if (d / ex.MANIFEST).exists():
            problems = ex.verify_manifest(d)
            out.append((f"manifest {d.name}", not problems, "; ".join(problems) or "ok"))
    hman = root / "train-hcot" / ex.MANIFEST
    aux = root / "train-aux" / "model.ckpt"
    if hman.exists() and aux.exists():
        recorded = ex.read_manifest(root / "train-hcot")["aux_checkpoint_sha256"]
        same = recorded == file_sha256(aux)
        out.append(("aux frozen", same, "aux checkpoint hash matches hcot provenance" if same else "aux changed"))
    return out


def run_checks(cfg: ExperimentConfig | None = None) -> list[Result]:
    results = [check_gradients(), check_contrastive(), check_identity_override(), check_decoder()]
    if cfg is not None:
        results += check_run_dir(cfg)
    return results
