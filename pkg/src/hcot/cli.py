"""``hcot`` command line: gen, train, infer, bench, check."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from hcot import experiment as ex
from hcot.config import THREADS_ENV, ConfigError, ExperimentConfig, load_config
from hcot.training import STAGES, TrainingAborted

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

log = logging.getLogger("hcot")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment TOML file (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--threads", type=int, help=f"BLAS threads (default ${THREADS_ENV} or 1)")
    common.add_argument("--force", action="store_true", help="overwrite a completed output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hcot", description="Hidden chain-of-thought toy pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate train/dev/test splits")
    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("--stage", required=True, choices=STAGES)
    i = sub.add_parser("infer", parents=[common], help="run inference on a question or the test split")
    i.add_argument("--mode", default="hcot", choices=tuple(ex.MODE_STAGE))
    i.add_argument("--question", help="single question; omit to run the whole test split")
    i.add_argument("--recover", action="store_true", help="decode full thoughts at every handoff")
    i.add_argument("--store-vectors", action="store_true", help="keep raw handoff vectors in the dump")
    b = sub.add_parser("bench", parents=[common], help="compression report from paired infer runs")
    b.add_argument("--runs", nargs=2, metavar=("HCOT_DIR", "FULLCOT_DIR"), help="infer directories to compare")
    b.add_argument("--format", default="table", choices=("table", "json"))
    sub.add_parser("check", parents=[common], help="run the invariant suite")
    return p


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _threads(args) -> int:
    n = args.threads if args.threads is not None else int(os.environ.get(THREADS_ENV, "1"))
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    return n


def _progress(rec: dict) -> None:
    log.info("step %d %s dev=%.4f loss=%s", rec["step"], rec["stage"], rec["dev_metric"],
             "-" if rec["total"] is None else f"{rec['total']:.4f}")


def run(args) -> int:
    cfg = _load(args)
    if args.command == "gen":
        m = ex.cmd_gen(cfg, args.force)
        print(json.dumps({"dir": str(cfg.run_root() / "data"), "counts": m["counts"]}))
    elif args.command == "train":
        m = ex.cmd_train(cfg, args.stage, args.force, progress=_progress)
        print(json.dumps({"dir": str(ex.stage_dir(cfg, args.stage)), "checkpoint_sha256": m["checkpoint_sha256"],
                          "best_dev_metric": m["best_dev_metric"]}))
    elif args.command == "infer":
        out = ex.cmd_infer(cfg, args.mode, args.question, args.recover, args.force, args.store_vectors)
        if args.question is not None:
            print(f"answer: {out.answer}")
            print(f"handoffs: {out.stats.handoff_count}")
            print(f"output: {out.text}")
            for k, h in enumerate(out.handoffs):
                if h.recovered_thought is not None:
                    print(f"thought {k}: {h.recovered_thought}")
        else:
            print(json.dumps({"dir": str(cfg.run_root() / f"infer-{args.mode}"), "traces": len(out)}))
    elif args.command == "bench":
        hdir, bdir = args.runs if args.runs else (None, None)
        result = ex.cmd_bench(cfg, hdir, bdir, args.force)
        if args.format == "json":
            print(json.dumps(result, indent=2, sort_keys=True))
        else:
            print((cfg.run_root() / "bench" / "report.txt").read_text(encoding="utf-8"), end="")
    elif args.command == "check":
        from hcot.checks import run_checks

        results = run_checks(cfg)
        for name, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_CONFIG
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        with threadpool_limits(_threads(args)):
            return run(args)
    except (ConfigError, ex.ValidationError, ex.RunExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.MissingDependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
