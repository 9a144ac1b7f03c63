import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from hcot import training as tr
from hcot.dataprep import build_instances
from hcot.model import ModelConfig, init_model
from hcot.taskgen import TaskSpec, generate_dataset
from hcot.vocab import Vocab


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda x: int(x.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} {number}: {detail}"
        request.config.stash[ACCEPTANCE].append(line)
        print(line)
        assert ok, line

    return record


@pytest.fixture(scope="session", autouse=True)
def single_thread_blas():
    with threadpool_limits(1):
        yield


def overfit(model, instances, step_fn, steps=600, lr=3e-3, target=2e-3, **kw):
    """Full-batch training at constant lr until the loss drops below ``target``."""
    cfg = tr.TrainConfig(learning_rate=lr, warmup_frac=0.0, min_lr_frac=1.0, weight_decay=0.0, **kw)
    state = tr.new_state(model, cfg, steps)
    for _ in range(steps):
        out = step_fn(instances, cfg, state)
        if out["ce"] < target:
            break
    return out["ce"]


class ToyWorld:
    """Small models that have memorised a handful of samples."""

    def __init__(self, task: str, n: int, seed: int = 0):
        self.vocab = Vocab()
        kind = TaskSpec(task, steps_max=3) if task == "chain_arithmetic" else TaskSpec(task, kb_size=40, hops_max=2)
        self.task = task
        self.samples = generate_dataset(kind, n, seed)
        cfg = ModelConfig(len(self.vocab), hidden_dim=32, num_layers=2, num_heads=2, max_seq_len=256)
        v = self.vocab

        self.aux = init_model(cfg, 1)
        aux_inst = build_instances(self.samples, v, "aux")
        overfit(self.aux, aux_inst, lambda i, c, s: tr.aux_training_step(self.aux, i, c, s), lam=0.1)
        self.aux.freeze()

        self.hcot = init_model(cfg, 2)
        h_inst = build_instances(self.samples, v, "hcot")
        reps = tr.compute_representations(self.aux, h_inst)
        overfit(self.hcot, h_inst, lambda i, c, s: tr.hcot_training_step(self.hcot, self.aux, i, c, s, reps))

        self.fullcot = init_model(cfg, 3)
        overfit(self.fullcot, build_instances(self.samples, v, "fullcot"),
                lambda i, c, s: tr.lm_training_step(self.fullcot, i, c, s))
        self.nocot = init_model(cfg, 4)
        overfit(self.nocot, build_instances(self.samples, v, "nocot"),
                lambda i, c, s: tr.lm_training_step(self.nocot, i, c, s))


@pytest.fixture(scope="session")
def toy_arith():
    return ToyWorld("chain_arithmetic", 6, seed=0)


@pytest.fixture(scope="session")
def toy_kb():
    return ToyWorld("kb_lookup", 6, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
