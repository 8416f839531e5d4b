"""Command-line surface: corpus generation, the training phases, evaluation,
translation, the parameter-overhead report, and the two experiment sweeps.

Every command is deterministic given its config and seeds. Contract
violations exit nonzero with a single machine-parseable line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .adapters import AdapterConfig, count_adapter_params
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_experiment, load_generator_spec
from .data import (RawTask, derive_seed, load_tasks, make_synthetic_task,
                   subsample, tokenize_line, write_manifest)
from .errors import ContractError, NanomtError, TaskNotFoundError
from .training import (TrainConfig, adapt, bundle_from_checkpoint, evaluate,
                       full_finetune, model_from_checkpoint, pretrain)


def _default_out() -> str:
    return os.environ.get("NANOMT_OUT", ".")


def _find_task(tasks: list[RawTask], task_id: str) -> RawTask:
    for task in tasks:
        if task.task_id == task_id:
            return task
    raise TaskNotFoundError(
        f"task {task_id!r} not in manifest "
        f"(have: {', '.join(t.task_id for t in tasks)})"
    )


def _train_config(args, temperature: float = 1.0) -> TrainConfig:
    return TrainConfig(
        steps=args.steps, eval_every=args.eval_every, seed=args.seed,
        base_lr=args.base_lr, warmup=args.warmup,
        batch_tokens=args.batch_tokens, select_by=args.select_by,
        temperature=temperature, dev_bleu_cap=args.dev_bleu_cap,
    )


def _add_train_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--steps", type=int, required=True)
    sub.add_argument("--eval-every", type=int, default=100)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--base-lr", type=float, default=1.0)
    sub.add_argument("--warmup", type=int, default=400)
    sub.add_argument("--batch-tokens", type=int, default=1024)
    sub.add_argument("--select-by", choices=("loss", "bleu"), default="loss")
    sub.add_argument("--dev-bleu-cap", type=int, default=64)


def cmd_gen_tasks(args) -> int:
    specs = load_generator_spec(args.spec)
    tasks = [make_synthetic_task(spec, args.seed) for spec in specs]
    manifest = write_manifest(tasks, args.out)
    print(f"wrote {len(tasks)} tasks to {manifest}")
    return 0


def cmd_pretrain(args) -> int:
    config = load_experiment(args.config)
    manifest = Path(args.config).parent / config.manifest \
        if not Path(config.manifest).is_absolute() else Path(config.manifest)
    tasks = load_tasks(manifest, config.vocab_mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "pretrain_metrics.csv"
    ckpt, records = pretrain(tasks, config.train,
                             model_opts=config.model_opts,
                             vocab_mode=config.vocab_mode,
                             max_vocab=config.max_vocab,
                             metrics_path=metrics_path)
    ckpt_path = save_checkpoint(ckpt, out / "base.ckpt")
    print(f"base checkpoint: {ckpt_path} (best step {ckpt.header['best_step']})")
    print(f"metrics: {metrics_path}")
    if args.plot:
        from .figures import plot_training_curves
        fig = plot_training_curves(metrics_path, out / "pretrain_curves.png")
        print(f"figure: {fig}")
    return 0


def cmd_adapt(args) -> int:
    base = load_checkpoint(args.base)
    mode = base.header.get("vocab_mode", "word")
    task = _find_task(load_tasks(args.manifest, mode), args.task)
    adapter = AdapterConfig(bottleneck=args.bottleneck,
                            init_scale=args.init_scale)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / f"adapt_{args.task}_metrics.csv"
    ckpt, _ = adapt(base, task, adapter, _train_config(args),
                    metrics_path=metrics_path)
    ckpt_path = save_checkpoint(ckpt, out / f"adapter_{args.task}.ckpt")
    print(f"bundle checkpoint: {ckpt_path} (best step {ckpt.header['best_step']})")
    print(f"metrics: {metrics_path}")
    if args.plot:
        from .figures import plot_training_curves
        fig = plot_training_curves(metrics_path,
                                   out / f"adapt_{args.task}_curves.png")
        print(f"figure: {fig}")
    return 0


def cmd_finetune(args) -> int:
    base = load_checkpoint(args.base)
    mode = base.header.get("vocab_mode", "word")
    task = _find_task(load_tasks(args.manifest, mode), args.task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / f"finetune_{args.task}_metrics.csv"
    ckpt, _ = full_finetune(base, task, _train_config(args),
                            metrics_path=metrics_path)
    ckpt_path = save_checkpoint(ckpt, out / f"finetune_{args.task}.ckpt")
    print(f"finetuned checkpoint: {ckpt_path} "
          f"(best step {ckpt.header['best_step']})")
    print(f"metrics: {metrics_path}")
    if args.plot:
        from .figures import plot_training_curves
        fig = plot_training_curves(metrics_path,
                                   out / f"finetune_{args.task}_curves.png")
        print(f"figure: {fig}")
    return 0


def cmd_evaluate(args) -> int:
    base = load_checkpoint(args.base)
    bundle = load_checkpoint(args.bundle) if args.bundle else None
    mode = base.header.get("vocab_mode", "word")
    task = _find_task(load_tasks(args.manifest, mode), args.task)
    metrics = evaluate(base, bundle, task, args.split, beam=args.beam)
    print(f"task={args.task} split={args.split} "
          f"bleu={metrics['bleu']:.6f} "
          f"token_accuracy={metrics['token_accuracy']:.6f} "
          f"loss={metrics['loss']:.6f}")
    return 0


def cmd_translate(args) -> int:
    base = load_checkpoint(args.base)
    model, vocab = model_from_checkpoint(base)
    bundle = None
    if args.bundle:
        bundle = bundle_from_checkpoint(load_checkpoint(args.bundle), base)
    multi = base.header.get("multi_task") == "1"
    task_id = args.task or (bundle.task_id if bundle else None)
    prefix = []
    if multi:
        if task_id is None:
            raise TaskNotFoundError(
                "--task is required for a multi-task base model")
        prefix = [vocab.task_token_id(task_id)]
    mode = base.header.get("vocab_mode", "word")
    for line in sys.stdin:
        words = tokenize_line(line, mode)
        if not words:
            print()
            continue
        ids = np.asarray(prefix + vocab.encode_words(words), dtype=np.int64)
        if args.beam > 1:
            out_ids = model.decode_beam(ids, args.beam, bundle)
        else:
            out_ids = model.decode_greedy([ids], bundle)[0]
        print(" ".join(vocab.decode(out_ids)))
    return 0


def cmd_params_report(args) -> int:
    rows: list[tuple[str, int, int, float]] = []
    if args.base:
        base = load_checkpoint(args.base)
        base_params = sum(a.size for _, a in base.param_items())
        d = int(base.header["model.d_model"])
        layers = int(base.header["model.num_layers"])
        print(f"base parameters: {base_params}")
        for bundle_path in args.bundle or []:
            ckpt = load_checkpoint(bundle_path)
            b = int(ckpt.header["adapter.bottleneck"])
            count = count_adapter_params(d, b, 2 * layers)
            rows.append((ckpt.header["task_id"], b, count,
                         100.0 * count / base_params))
    else:
        if args.base_params is None or args.d is None or args.b is None \
                or args.sites is None:
            raise ContractError(
                "either --base or all of --d/--b/--sites/--base-params required")
        count = count_adapter_params(args.d, args.b, args.sites)
        rows.append(("(arithmetic)", args.b, count,
                     100.0 * count / args.base_params))
    print(f"{'task':<16}{'bottleneck':>12}{'params':>14}{'fraction':>12}")
    for task, b, count, fraction in rows:
        print(f"{task:<16}{b:>12}{count:>14}{fraction:>11.4f}%")
    return 0


def _capacity_point(job: dict) -> dict:
    base = load_checkpoint(job["base"])
    mode = base.header.get("vocab_mode", "word")
    task = _find_task(load_tasks(job["manifest"], mode), job["task"])
    train = TrainConfig(**{**job["train"], "seed": job["seed"]})
    adapter = AdapterConfig(bottleneck=job["bottleneck"],
                            init_scale=job["init_scale"])
    bundle_ckpt, _ = adapt(base, task, adapter, train)
    metrics = evaluate(base, bundle_ckpt, task, "dev")
    d = int(base.header["model.d_model"])
    layers = int(base.header["model.num_layers"])
    base_params = sum(a.size for _, a in base.param_items())
    count = count_adapter_params(d, job["bottleneck"], 2 * layers)
    return {"bottleneck": job["bottleneck"],
            "param_fraction": 100.0 * count / base_params,
            "seed": job["seed"],
            "dev_bleu": metrics["bleu"]}


def _fraction_point(job: dict) -> dict:
    base = load_checkpoint(job["base"])
    mode = base.header.get("vocab_mode", "word")
    task = _find_task(load_tasks(job["manifest"], mode), job["task"])
    train = TrainConfig(**job["train"])
    fraction = job["fraction"]
    sub_seed = derive_seed(train.seed, f"fraction:{fraction!r}")
    reduced = RawTask(task.task_id, task.kind, {
        "train": subsample(task.splits["train"], fraction, sub_seed),
        "dev": task.splits["dev"],
        "test": task.splits["test"],
    })
    if job["mode"] == "adapter":
        adapter = AdapterConfig(bottleneck=job["bottleneck"],
                                init_scale=job["init_scale"])
        ckpt, _ = adapt(base, reduced, adapter, train)
        metrics = evaluate(base, ckpt, reduced, "dev")
    else:
        ckpt, _ = full_finetune(base, reduced, train)
        metrics = evaluate(ckpt, None, reduced, "dev")
    return {"fraction": fraction, "mode": job["mode"],
            "dev_bleu": metrics["bleu"]}


def _run_jobs(worker, jobs: list[dict], parallel: int) -> list[dict]:
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(worker, jobs))
    return [worker(job) for job in jobs]


def _write_rows(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})


def cmd_sweep_capacity(args) -> int:
    bottlenecks = [int(x) for x in args.bottlenecks.split(",")]
    seeds = [int(x) for x in args.seeds.split(",")]
    base_train = asdict(_train_config(args))
    jobs = [{"base": args.base, "manifest": args.manifest, "task": args.task,
             "bottleneck": b, "seed": seed, "init_scale": args.init_scale,
             "train": base_train}
            for b in bottlenecks for seed in seeds]
    rows = _run_jobs(_capacity_point, jobs, args.parallel)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "capacity_sweep.csv"
    _write_rows(csv_path, ["bottleneck", "param_fraction", "seed", "dev_bleu"],
                rows)
    print(f"sweep: {csv_path}")
    if args.plot:
        from .figures import plot_capacity_sweep
        fig = plot_capacity_sweep(csv_path, out / "capacity_sweep.png")
        print(f"figure: {fig}")
    return 0


def cmd_sweep_datafraction(args) -> int:
    fractions = [float(x) for x in args.fractions.split(",")]
    modes = [m.strip() for m in args.modes.split(",")]
    for mode in modes:
        if mode not in ("adapter", "finetune"):
            raise ContractError(f"unknown sweep mode {mode!r}")
    base_train = asdict(_train_config(args))
    jobs = [{"base": args.base, "manifest": args.manifest, "task": args.task,
             "fraction": fraction, "mode": mode, "bottleneck": args.bottleneck,
             "init_scale": args.init_scale, "train": base_train}
            for fraction in fractions for mode in modes]
    rows = _run_jobs(_fraction_point, jobs, args.parallel)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "datafraction_sweep.csv"
    _write_rows(csv_path, ["fraction", "mode", "dev_bleu"], rows)
    print(f"sweep: {csv_path}")
    if args.plot:
        from .figures import plot_datafraction_sweep
        fig = plot_datafraction_sweep(csv_path, out / "datafraction_sweep.png")
        print(f"figure: {fig}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nanomt",
        description="Desk-scale NMT with per-task residual adapters.")
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("gen-tasks", help="generate synthetic corpora")
    sub.add_argument("--spec", required=True)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", default=_default_out())
    sub.set_defaults(func=cmd_gen_tasks)

    sub = subs.add_parser("pretrain", help="train and freeze a base model")
    sub.add_argument("--config", required=True)
    sub.add_argument("--out", default=_default_out())
    sub.add_argument("--plot", action="store_true")
    sub.set_defaults(func=cmd_pretrain)

    sub = subs.add_parser("adapt", help="train one task's adapter bundle")
    sub.add_argument("--base", required=True)
    sub.add_argument("--task", required=True)
    sub.add_argument("--manifest", required=True)
    sub.add_argument("--bottleneck", type=int, required=True)
    sub.add_argument("--init-scale", type=float, default=0.01)
    _add_train_flags(sub)
    sub.add_argument("--out", default=_default_out())
    sub.add_argument("--plot", action="store_true")
    sub.set_defaults(func=cmd_adapt)

    sub = subs.add_parser("finetune", help="full fine-tuning baseline")
    sub.add_argument("--base", required=True)
    sub.add_argument("--task", required=True)
    sub.add_argument("--manifest", required=True)
    _add_train_flags(sub)
    sub.add_argument("--out", default=_default_out())
    sub.add_argument("--plot", action="store_true")
    sub.set_defaults(func=cmd_finetune)

    sub = subs.add_parser("evaluate", help="BLEU/accuracy/loss on a split")
    sub.add_argument("--base", required=True)
    sub.add_argument("--bundle")
    sub.add_argument("--task", required=True)
    sub.add_argument("--manifest", required=True)
    sub.add_argument("--split", choices=("train", "dev", "test"),
                     default="test")
    sub.add_argument("--beam", type=int, default=1)
    sub.set_defaults(func=cmd_evaluate)

    sub = subs.add_parser("translate", help="translate stdin to stdout")
    sub.add_argument("--base", required=True)
    sub.add_argument("--bundle")
    sub.add_argument("--task")
    sub.add_argument("--beam", type=int, default=1)
    sub.set_defaults(func=cmd_translate)

    sub = subs.add_parser("params-report",
                          help="per-task adapter parameter counts")
    sub.add_argument("--base")
    sub.add_argument("--bundle", action="append")
    sub.add_argument("--d", type=int)
    sub.add_argument("--b", type=int)
    sub.add_argument("--sites", type=int)
    sub.add_argument("--base-params", type=int)
    sub.set_defaults(func=cmd_params_report)

    sub = subs.add_parser("sweep-capacity",
                          help="dev BLEU across adapter bottleneck widths")
    sub.add_argument("--base", required=True)
    sub.add_argument("--task", required=True)
    sub.add_argument("--manifest", required=True)
    sub.add_argument("--bottlenecks", required=True,
                     help="comma-separated widths, e.g. 1,4,16,64")
    sub.add_argument("--seeds", default="0")
    sub.add_argument("--init-scale", type=float, default=0.01)
    _add_train_flags(sub)
    sub.add_argument("--parallel", type=int, default=1)
    sub.add_argument("--out", default=_default_out())
    sub.add_argument("--plot", action="store_true")
    sub.set_defaults(func=cmd_sweep_capacity)

    sub = subs.add_parser("sweep-datafraction",
                          help="dev BLEU across adaptation data fractions")
    sub.add_argument("--base", required=True)
    sub.add_argument("--task", required=True)
    sub.add_argument("--manifest", required=True)
    sub.add_argument("--fractions", required=True,
                     help="comma-separated fractions, e.g. 0.05,0.1,0.5,1.0")
    sub.add_argument("--modes", default="adapter,finetune")
    sub.add_argument("--bottleneck", type=int, default=8)
    sub.add_argument("--init-scale", type=float, default=0.01)
    _add_train_flags(sub)
    sub.add_argument("--parallel", type=int, default=1)
    sub.add_argument("--out", default=_default_out())
    sub.add_argument("--plot", action="store_true")
    sub.set_defaults(func=cmd_sweep_datafraction)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NanomtError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
