"""Run directories and the gen -> train -> infer -> bench pipeline.

Layout under ``<output root>/<name>-<config fingerprint>/``::

    config.toml
    data/          train.jsonl dev.jsonl test.jsonl manifest.json
    train-<stage>/ model.ckpt log.jsonl manifest.json
    infer-<mode>/  traces.jsonl manifest.json
    bench/         report.json report.txt manifest.json

Every manifest lists the files of its directory with their sha256, so each
artifact is reachable from a manifest. A directory with a manifest is
complete and is not rewritten without ``force``.
"""

from __future__ import annotations

import json
import logging
import shutil
from pathlib import Path
from typing import Callable, Sequence

from hcot import bench
from hcot.config import ExperimentConfig, dumps_config
from hcot.dataprep import build_instances
from hcot.inference import InferenceConfig, InferenceTrace, infer_full_cot, infer_hcot, infer_no_cot
from hcot.model import file_sha256, init_model, load_checkpoint, read_checkpoint_header, save_checkpoint
from hcot.taskgen import (
    HCoTSample, KB_LOOKUP, generate_dataset, gold_actions, read_jsonl, split_dataset, write_jsonl,
)
from hcot.training import STAGES, train_stage
from hcot.vocab import Vocab

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
MODE_STAGE = {"hcot": "hcot", "fullcot": "fullcot", "nocot": "nocot"}
MANIFEST = "manifest.json"


class RunExistsError(RuntimeError):
    pass


class MissingDependencyError(RuntimeError):
    pass


class ValidationError(ValueError):
    pass


# -- manifests -----------------------------------------------------------------


def write_manifest(directory: Path, kind: str, cfg: ExperimentConfig, **extra) -> dict:
    files = {p.name: file_sha256(p) for p in sorted(directory.iterdir()) if p.is_file() and p.name != MANIFEST}
    manifest = {"kind": kind, "config_fingerprint": cfg.fingerprint(), "seed": cfg.seed, "files": files, **extra}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise MissingDependencyError(f"{directory} has no manifest; run the producing step first")
    return json.loads(path.read_text(encoding="utf-8"))


def verify_manifest(directory) -> list[str]:
    """Problems found: hash mismatches, missing files and orphan files."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    problems = []
    listed = manifest["files"]
    for name, digest in listed.items():
        p = directory / name
        if not p.exists():
            problems.append(f"{p}: missing")
        elif file_sha256(p) != digest:
            problems.append(f"{p}: hash mismatch")
    for p in directory.iterdir():
        if p.is_file() and p.name != MANIFEST and p.name not in listed:
            problems.append(f"{p}: not in manifest")
    return problems


def _prepare_dir(directory: Path, force: bool) -> None:
    if directory.exists() and any(directory.iterdir()):
        if not force:
            raise RunExistsError(f"{directory} already exists and is not empty (use --force)")
        shutil.rmtree(directory)
    directory.mkdir(parents=True, exist_ok=True)


def _root(cfg: ExperimentConfig) -> Path:
    root = cfg.run_root()
    root.mkdir(parents=True, exist_ok=True)
    cfg_path = root / "config.toml"
    if not cfg_path.exists():
        cfg_path.write_text(dumps_config(cfg), encoding="utf-8")
    return root


# -- gen -----------------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig, force: bool = False) -> dict:
    out = _root(cfg) / "data"
    _prepare_dir(out, force)
    samples = generate_dataset(cfg.task, cfg.data.total, cfg.stage_seed("data"))
    splits = split_dataset(samples, cfg.data.fractions, cfg.stage_seed("split"))
    counts = {name: write_jsonl(out / f"{name}.jsonl", part) for name, part in zip(SPLITS, splits)}
    return write_manifest(out, "data", cfg, counts=counts, task=cfg.task.kind)


def load_split(cfg: ExperimentConfig, name: str) -> list[HCoTSample]:
    d = cfg.run_root() / "data"
    read_manifest(d)
    return read_jsonl(d / f"{name}.jsonl")


def check_data(cfg: ExperimentConfig) -> list[str]:
    """Manifest consistency plus pairwise split disjointness."""
    d = cfg.run_root() / "data"
    problems = verify_manifest(d)
    manifest = read_manifest(d)
    questions = {}
    for name in SPLITS:
        samples = read_jsonl(d / f"{name}.jsonl")
        if len(samples) != manifest["counts"][name]:
            problems.append(f"{name}: {len(samples)} lines but manifest says {manifest['counts'][name]}")
        questions[name] = {s.question for s in samples}
    for i, a in enumerate(SPLITS):
        for b in SPLITS[i + 1:]:
            shared = questions[a] & questions[b]
            if shared:
                problems.append(f"{len(shared)} questions shared by {a} and {b}")
    return problems


# -- train ---------------------------------------------------------------------


def stage_dir(cfg: ExperimentConfig, stage: str) -> Path:
    return cfg.run_root() / f"train-{stage}"


def load_stage_model(cfg: ExperimentConfig, stage: str):
    d = stage_dir(cfg, stage)
    read_manifest(d)
    return load_checkpoint(d / "model.ckpt")


def cmd_train(cfg: ExperimentConfig, stage: str, force: bool = False,
              progress: Callable[[dict], None] | None = None) -> dict:
    if stage not in STAGES:
        raise ValidationError(f"unknown stage {stage!r}; choose from {STAGES}")
    vocab = Vocab()
    train = load_split(cfg, "train")
    dev = load_split(cfg, "dev")
    extra = {}
    aux = None
    if stage == "hcot":
        aux_ckpt = stage_dir(cfg, "aux") / "model.ckpt"
        if not aux_ckpt.exists():
            raise MissingDependencyError("stage hcot needs a trained aux checkpoint; run --stage aux first")
        if not read_checkpoint_header(aux_ckpt)["frozen"]:
            raise ValidationError(f"aux checkpoint {aux_ckpt} is not frozen")
        aux = load_checkpoint(aux_ckpt)
        extra["aux_checkpoint_sha256"] = file_sha256(aux_ckpt)
    train_inst, dev_inst = build_instances(train, vocab, stage), build_instances(dev, vocab, stage)
    longest = max(len(i.tokens) for i in [*train_inst, *dev_inst])
    if longest > cfg.model.max_seq_len:
        raise ValidationError(f"{stage} sequences reach {longest} tokens but model.max_seq_len is "
                              f"{cfg.model.max_seq_len}")
    out = stage_dir(cfg, stage)
    _prepare_dir(out, force)
    tcfg = cfg.train_config(stage)
    model = init_model(cfg.model, cfg.stage_seed(f"init:{stage}"))
    best, records = train_stage(
        model, train_inst, dev_inst,
        tcfg, stage, aux_model=aux, infer_cfg=cfg.inference, progress=progress,
    )
    if stage == "aux":
        best.freeze()
    with open(out / "log.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    meta = {"stage": stage, "vocab": vocab.fingerprint, "config_fingerprint": cfg.fingerprint()}
    digest = save_checkpoint(best, out / "model.ckpt", meta)
    if aux is not None and file_sha256(stage_dir(cfg, "aux") / "model.ckpt") != extra["aux_checkpoint_sha256"]:
        raise RuntimeError("aux checkpoint changed during hcot training")
    return write_manifest(out, "train", cfg, stage=stage, checkpoint_sha256=digest, train_config=tcfg.__dict__,
                          best_dev_metric=_best_metric(records, stage), **extra)


def _best_metric(records: list[dict], stage: str) -> float:
    metrics = [r["dev_metric"] for r in records]
    return min(metrics) if stage == "aux" else max(metrics)


# -- infer ---------------------------------------------------------------------


def _models_for(cfg: ExperimentConfig, mode: str) -> dict:
    if mode not in MODE_STAGE:
        raise ValidationError(f"unknown mode {mode!r}")
    needed = ["hcot", "aux"] if mode == "hcot" else [mode]
    paths = {}
    for stage in needed:
        p = stage_dir(cfg, stage) / "model.ckpt"
        if not p.exists():
            raise MissingDependencyError(f"mode {mode} needs a trained {stage} checkpoint at {p}")
        paths[stage] = p
    vocabs = {s: read_checkpoint_header(p)["meta"].get("vocab") for s, p in paths.items()}
    expected = Vocab().fingerprint
    for s, fp in vocabs.items():
        if fp != expected:
            raise ValidationError(f"vocab mismatch: {s} checkpoint has {fp}, current vocabulary is {expected}")
    if len(set(vocabs.values())) > 1:
        raise ValidationError(f"vocab mismatch between checkpoints: {vocabs}")
    return {s: load_checkpoint(p) for s, p in paths.items()}


def infer_one(question: str, mode: str, models: dict, icfg: InferenceConfig, task: str) -> InferenceTrace:
    if mode == "hcot":
        return infer_hcot(question, models["hcot"], models["aux"], icfg, task)
    if mode == "fullcot":
        return infer_full_cot(question, models["fullcot"], icfg, task)
    return infer_no_cot(question, models["nocot"], icfg, task)


def cmd_infer(cfg: ExperimentConfig, mode: str, question: str | None = None, recover: bool = False,
              force: bool = False, store_vectors: bool = False) -> list[InferenceTrace] | InferenceTrace:
    """Single-question mode returns one trace; test-split mode writes the dump and returns all traces."""
    icfg = InferenceConfig(**{**cfg.inference.__dict__, "recover_thoughts": recover, "store_vectors": store_vectors})
    if recover and mode != "hcot":
        raise ValidationError("--recover only applies to hcot mode")
    models = _models_for(cfg, mode)
    if question is not None:
        return infer_one(question, mode, models, icfg, cfg.task.kind)
    test = load_split(cfg, "test")
    out = cfg.run_root() / f"infer-{mode}"
    _prepare_dir(out, force)
    traces = []
    with open(out / "traces.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for i, s in enumerate(test):
            t = infer_one(s.question, mode, models, icfg, s.task)
            traces.append(t)
            rec = {"question_id": f"test-{i:05d}", "gold_answer": s.gold_answer,
                   "correct": bench.answers_match(t.answer, s.gold_answer, s.task), "trace": t.to_record()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    data_manifest = read_manifest(cfg.run_root() / "data")
    write_manifest(
        out, "infer", cfg, mode=mode, recover=recover, task=cfg.task.kind,
        split_sha256=data_manifest["files"]["test.jsonl"],
        model_sha256={s: file_sha256(stage_dir(cfg, s) / "model.ckpt") for s in models},
    )
    return traces


def load_runset(infer_dir) -> tuple[bench.RunSet, dict, dict]:
    """RunSet, gold answers by id, and the manifest of an infer directory."""
    infer_dir = Path(infer_dir)
    manifest = read_manifest(infer_dir)
    traces, gold = {}, {}
    with open(infer_dir / "traces.jsonl", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            traces[rec["question_id"]] = InferenceTrace.from_record(rec["trace"])
            gold[rec["question_id"]] = rec["gold_answer"]
    return bench.RunSet.build(manifest["mode"], manifest["task"], traces, gold), gold, manifest


# -- bench ---------------------------------------------------------------------


def cmd_bench(cfg: ExperimentConfig, hcot_dir=None, baseline_dir=None, force: bool = False) -> dict:
    root = cfg.run_root()
    hcot_dir = Path(hcot_dir) if hcot_dir else root / "infer-hcot"
    baseline_dir = Path(baseline_dir) if baseline_dir else root / "infer-fullcot"
    h_runs, h_gold, h_man = load_runset(hcot_dir)
    b_runs, b_gold, b_man = load_runset(baseline_dir)
    if h_man["split_sha256"] != b_man["split_sha256"]:
        raise ValidationError(
            f"test split fingerprints differ: {h_man['split_sha256'][:12]} vs {b_man['split_sha256'][:12]}")
    fingerprints = {
        "hcot_run": {k: h_man[k] for k in ("config_fingerprint", "model_sha256", "split_sha256", "seed")},
        "baseline_run": {k: b_man[k] for k in ("config_fingerprint", "model_sha256", "split_sha256", "seed")},
        "lam": cfg.train["aux"].lam,
    }
    report = bench.compression_report(h_runs, b_runs, fingerprints)
    grid = {}
    for mode in ("nocot", "fullcot", "hcot"):
        d = root / f"infer-{mode}"
        if (d / MANIFEST).exists():
            runs, gold, _ = load_runset(d)
            grid[mode] = {cfg.task.kind: bench.accuracy(runs, gold)}
    for label, (runs, gold) in (("bench:hcot", (h_runs, h_gold)), ("bench:baseline", (b_runs, b_gold))):
        grid.setdefault(label, {})[cfg.task.kind] = bench.accuracy(runs, gold)
    result = {"compression": report.to_dict(), "accuracy": grid}
    if cfg.task.kind == KB_LOOKUP:
        test = load_split(cfg, "test")
        paths = {f"test-{i:05d}": gold_actions(s) for i, s in enumerate(test)}
        result["agent_accuracy"] = {m: bench.agent_accuracy(r, paths) for m, r in
                                    (("hcot", h_runs), ("baseline", b_runs))}
    out = root / "bench"
    _prepare_dir(out, force)
    (out / "report.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "report.txt").write_text(
        bench.emit_report({cfg.task.kind: report}, "table", grid), encoding="utf-8")
    write_manifest(out, "bench", cfg, hcot_dir=str(hcot_dir), baseline_dir=str(baseline_dir))
    return result


def run_pipeline(cfg: ExperimentConfig, stages: Sequence[str] = ("fullcot", "aux", "hcot"),
                 modes: Sequence[str] = ("fullcot", "hcot"), force: bool = False,
                 progress: Callable[[dict], None] | None = None) -> dict:
    cmd_gen(cfg, force)
    for stage in stages:
        cmd_train(cfg, stage, force, progress)
    for mode in modes:
        cmd_infer(cfg, mode, force=force)
    return cmd_bench(cfg, force=force)
