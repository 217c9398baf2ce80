"""Command-line entry point: demos, pretraining, finetuning, evaluation, baselines, reports."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shlex
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import reports
from .baselines import DIRECT, PRETRAIN_FINETUNE, bc_evaluate, bc_train, load_bc_model, save_bc_model
from .buffers import DatasetError, load_dataset, save_dataset
from .envs import TASKS, DomainGap, ExpertFailure, TaskSpec, generate_demos
from .trainer import (TrainConfig, TrainingHalted, coverage_report, evaluate, finetune, pretrain)
from .world_model import load_checkpoint, read_checkpoint_header, save_checkpoint

log = logging.getLogger("wmtransfer")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

DIM_NAMES = {
    "reach": ["px", "py", "vx", "vy", "gx", "gy"],
    "push": ["px", "py", "vx", "vy", "cx", "cy", "gx", "gy"],
    "insert": ["px", "py", "vx", "vy", "cx", "cy"],
}


class UsageError(Exception):
    pass


class Context:
    """Resolved paths, config and the provenance stamped on every output."""

    def __init__(self, args, cfg: TrainConfig, manifest_hash: str):
        self.args = args
        self.workdir = Path(args.workdir)
        self.cfg = cfg
        self.manifest_hash = manifest_hash

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.workdir / p

    def provenance(self, seed: int | None = None, **extra) -> dict:
        out = {"manifest_hash": self.manifest_hash, "config": asdict(self.cfg),
               "seed": self.cfg.seed if seed is None else seed}
        out.update(extra)
        return out


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_demos(ctx: Context, path, task: str | None = None):
    episodes = load_dataset(ctx.path(path))
    if not episodes:
        raise UsageError(f"dataset {path} holds no episodes")
    tasks = {ep.task for ep in episodes}
    if len(tasks) != 1:
        raise UsageError(f"dataset {path} mixes tasks {sorted(tasks)}")
    if task is not None and task not in tasks:
        raise UsageError(f"dataset {path} is for task {tasks.pop()!r}, expected {task!r}")
    return episodes


def _gap(text: str) -> DomainGap:
    try:
        return DomainGap.parse(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- commands


def cmd_gen_demos(ctx: Context) -> int:
    a = ctx.args
    if a.n <= 0:
        raise UsageError("--n must be positive")
    spec = TaskSpec.make(a.task)
    episodes = generate_demos(spec, _gap(a.gap), a.n, noise_sigma=a.sigma, seed=a.seed)
    out = ctx.path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, episodes)
    lengths = [len(ep) for ep in episodes]
    print(f"episodes={len(episodes)}\tmean_length={np.mean(lengths):.2f}\tsha256={_file_sha256(out)}")
    return EXIT_OK


def cmd_pretrain(ctx: Context) -> int:
    a = ctx.args
    demos = _load_demos(ctx, a.demos)
    cfg = replace(ctx.cfg, task=demos[0].task)
    ctx.cfg = cfg
    spec, gap = cfg.spec, _gap(a.gap)
    out = ctx.path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out if cfg.checkpoint_interval else None

    def progress(row):
        print("\t".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
              file=sys.stderr)

    t0 = time.perf_counter()
    try:
        model, metrics, behavioral = pretrain(spec, gap, demos, cfg, checkpoint_dir=ckpt_dir,
                                              progress=progress)
    except TrainingHalted as exc:
        if exc.model is not None:
            save_checkpoint(out / "last_good.ckpt", exc.model, spec.task,
                            extra=ctx.provenance(status="halted"))
        raise
    prov = ctx.provenance(gap=gap.label())
    ckpt_hash = save_checkpoint(out / "model.ckpt", model, spec.task, extra=prov)
    metrics_text = "".join(f"# {k}: {json.dumps(prov[k], sort_keys=True)}\n" for k in sorted(prov))
    (out / "metrics.csv").write_text(metrics_text + metrics.to_csv(), encoding="utf-8")
    save_dataset(out / "behavioral.jsonl", behavioral.episodes)
    summary = dict(prov, checkpoint_hash=ckpt_hash, env_steps=cfg.pretrain_env_steps,
                   behavioral_episodes=len(behavioral.episodes))
    _write_json(out / "summary.json", summary)
    print(f"checkpoint={out / 'model.ckpt'}\tsha256={ckpt_hash}")
    print(f"wall_clock_s={time.perf_counter() - t0:.1f}", file=sys.stderr)
    return EXIT_OK


def cmd_finetune(ctx: Context) -> int:
    a = ctx.args
    model, head = load_checkpoint(ctx.path(a.checkpoint))
    demos = _load_demos(ctx, a.demos, head["task"] or None)
    cfg = replace(ctx.cfg, task=head["task"] or ctx.cfg.task)
    ctx.cfg = cfg
    tuned = finetune(model, demos, cfg, steps=a.steps)
    prov = ctx.provenance(source_checkpoint=_file_sha256(ctx.path(a.checkpoint)))
    out = ctx.path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    h = save_checkpoint(out, tuned, cfg.task, extra=prov)
    print(f"checkpoint={out}\tsha256={h}")
    return EXIT_OK


def cmd_eval(ctx: Context) -> int:
    a = ctx.args
    path = ctx.path(a.checkpoint)
    head = read_checkpoint_header(path)
    task = head.get("task") or ctx.cfg.task
    spec, gap = TaskSpec.make(task), _gap(a.gap)
    episodes = a.episodes if a.episodes is not None else ctx.cfg.eval_episodes
    if episodes < 1:
        raise UsageError("--episodes must be at least 1")
    if head.get("kind") == "bc":
        model, _ = load_bc_model(path)
        mode = "policy"
        result = bc_evaluate(model, spec, gap, episodes, a.seed)
    else:
        model, _ = load_checkpoint(path)
        mode = a.mode or ctx.cfg.eval_mode
        result = evaluate(model, spec, gap, episodes, a.seed, mode=mode,
                          planner=ctx.cfg.planner_config())
    summary = dict(ctx.provenance(seed=a.seed), success_rate=result.success_rate,
                   episodes=result.episodes, checkpoint_hash=_file_sha256(path), mode=mode,
                   task=task, gap=gap.label())
    if a.out:
        out = ctx.path(a.out)
        _write_json(out, summary)
        lines = ["episode,success,length"] + [f"{r['episode']},{int(r['success'])},{r['length']}"
                                              for r in result.log_rows()]
        out.with_suffix(".episodes.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_bc(ctx: Context) -> int:
    a = ctx.args
    mode = {"direct": DIRECT, "pf": PRETRAIN_FINETUNE}[a.mode]
    if mode == PRETRAIN_FINETUNE and not a.source:
        raise UsageError("--mode pf needs --source (the pretraining dataset)")
    target = _load_demos(ctx, a.demos)
    task = target[0].task
    source = _load_demos(ctx, a.source, task) if a.source else ()
    cfg = replace(ctx.cfg, task=task)
    ctx.cfg = cfg
    model = bc_train(cfg.spec, mode, target, source_data=source, steps=cfg.bc_steps, lr=cfg.bc_lr,
                     batch_size=cfg.bc_batch, horizon=cfg.finetune_horizon, lam=cfg.lam, seed=cfg.seed,
                     finetune_steps=cfg.finetune_steps, finetune_lr=cfg.finetune_lr,
                     finetune_weight_decay=cfg.finetune_weight_decay, hidden=cfg.hidden,
                     latent_dim=cfg.latent_dim)
    out = ctx.path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    h = save_bc_model(out, model, task, extra=ctx.provenance(mode=a.mode))
    print(f"checkpoint={out}\tsha256={h}")
    return EXIT_OK


def _pairs(items, what: str) -> list[tuple[str, str]]:
    out = []
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"{what} entries look like LABEL=PATH, got {item!r}")
        k, v = item.split("=", 1)
        out.append((k, v))
    if not out:
        raise UsageError(f"report needs at least one {what}")
    return out


def _rate(ctx: Context, path) -> float:
    data = json.loads(ctx.path(path).read_text(encoding="utf-8"))
    if "success_rate" not in data:
        raise UsageError(f"{path} is not an evaluation summary")
    return float(data["success_rate"])


def cmd_report(ctx: Context) -> int:
    a = ctx.args
    prov = ctx.provenance()
    if a.kind == "coverage":
        if not (a.expert and a.behavioral):
            raise UsageError("coverage needs --expert and --behavioral")
        exp = load_dataset(ctx.path(a.expert))
        beh = load_dataset(ctx.path(a.behavioral))
        if not exp or not beh:
            raise UsageError("coverage needs two nonempty datasets")
        table = coverage_report(exp, beh, a.bins)
        names = DIM_NAMES.get(exp[0].task)
        rep = reports.coverage(table, names, prov)
    elif a.kind == "transfer":
        rep = reports.transfer([(k, _rate(ctx, v)) for k, v in _pairs(a.result, "--result")], prov)
    elif a.kind == "degradation":
        rows = []
        for k, v in _pairs(a.result, "--result"):
            if "," not in v:
                raise UsageError("degradation entries look like LABEL=ORIGINAL.json,FINETUNED.json")
            o, f = v.split(",", 1)
            rows.append((k, _rate(ctx, o), _rate(ctx, f)))
        rep = reports.degradation(rows, prov)
    else:
        rows = []
        for k, v in _pairs(a.result, "--result"):
            try:
                rows.append((int(k), _rate(ctx, v)))
            except ValueError:
                raise UsageError(f"ablation labels are demo counts, got {k!r}") from None
        rep = reports.ablation(rows, prov)
    files = rep.write(ctx.path(a.out))
    sys.stdout.write(rep.text_table())
    for f in files:
        print(f"wrote\t{f}")
    return EXIT_OK


def cmd_run(ctx: Context) -> int:
    """Run every stage of a JSON manifest in order; its hash is stamped on all outputs."""
    path = ctx.path(ctx.args.manifest)
    raw = path.read_bytes()
    try:
        manifest = json.loads(raw)
        stages = manifest["stages"]
    except (ValueError, KeyError, TypeError):
        raise UsageError(f"{path}: manifest must be a JSON object with a 'stages' list") from None
    digest = hashlib.sha256(raw).hexdigest()
    for i, stage in enumerate(stages):
        argv = stage if isinstance(stage, list) else shlex.split(stage)
        if argv and argv[0] == "run":
            raise UsageError("manifests cannot nest")
        print(f"stage\t{i}\t{' '.join(argv)}", file=sys.stderr)
        base = ["--workdir", str(ctx.workdir)]
        code = main(base + argv, manifest_hash=digest)
        if code != EXIT_OK:
            return code
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wmtransfer", description=__doc__)
    p.add_argument("--workdir", default=".", help="base directory for relative paths")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-demos", help="write scripted-expert demonstrations as JSONL")
    g.add_argument("--task", choices=TASKS, required=True)
    g.add_argument("--gap", default="none")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--sigma", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_demos)

    g = sub.add_parser("pretrain", help="online imitation pretraining")
    g.add_argument("--demos", required=True)
    g.add_argument("--gap", default="none")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("finetune", help="offline supervised finetuning of encoder and policy")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--demos", required=True)
    g.add_argument("--steps", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_finetune)

    g = sub.add_parser("eval", help="success rate of a world-model or BC checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--gap", default="none")
    g.add_argument("--episodes", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mode", choices=("planner", "policy"))
    g.add_argument("--out", help="write the JSON summary (and a per-episode CSV) here")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("bc", help="behaviour-cloning baseline")
    g.add_argument("--mode", choices=("direct", "pf"), required=True)
    g.add_argument("--demos", required=True, help="target-domain dataset")
    g.add_argument("--source", help="pretraining dataset (pf mode)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_bc)

    g = sub.add_parser("report", help="tables, CSV and figures")
    g.add_argument("--kind", choices=reports.KINDS, required=True)
    g.add_argument("--expert")
    g.add_argument("--behavioral")
    g.add_argument("--bins", type=int, default=30)
    g.add_argument("--result", action="append", metavar="LABEL=PATH")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_report)

    g = sub.add_parser("run", help="execute a JSON manifest of stages")
    g.add_argument("--manifest", required=True)
    g.set_defaults(func=cmd_run)
    return p


def _invocation_hash(args, cfg: TrainConfig) -> str:
    keep = {k: v for k, v in vars(args).items() if k not in ("func", "verbose", "workdir")}
    blob = json.dumps({"args": keep, "config": asdict(cfg)}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def main(argv=None, manifest_hash: str | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = TrainConfig()
        if args.config:
            cfg = TrainConfig.load(Path(args.workdir) / args.config if not Path(args.config).is_absolute()
                                   else args.config)
        if args.set:
            cfg = TrainConfig.loads("\n".join(args.set), cfg)
        ctx = Context(args, cfg, manifest_hash or _invocation_hash(args, cfg))
        return args.func(ctx)
    except (UsageError, ExpertFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingHalted, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
