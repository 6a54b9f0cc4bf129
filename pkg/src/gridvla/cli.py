"""Command-line entry point: data generation, annotation, training, sweeps,
evaluation, and attention visualization, all reproducible from persisted configs."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evalviz, trainer
from .model import CheckpointError, ConfigError, ModelConfig, extract_attention
from .sim import TASKS, VARIANT_AGGREGATION, VISUAL_MATCHING, VariantError, make_variant, render, reset
from .teacher import (
    OracleTeacher,
    RemoteTeacher,
    RemoteTeacherConfig,
    RemoteTeacherHttpError,
    TeacherTransportError,
)
from .vocab import VocabError, build_vocab

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PARTIAL = 4
EXIT_DIVERGENCE = 5

ENDPOINT_ENV = "REFINEVLA_TEACHER_ENDPOINT"
TOKEN_ENV = "REFINEVLA_TEACHER_TOKEN"


class CliConfigError(ValueError):
    pass


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CliConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CliConfigError(f"config file is not valid JSON: {exc}") from exc


def _merge(section: dict, overrides: dict) -> dict:
    merged = dict(section)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def _write_resolved_config(path: Path, resolved: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(resolved, sort_keys=True, indent=2) + "\n")


def _parse_tasks(spec: str | None) -> dict:
    if not spec:
        return dict(TASKS)
    names = [s.strip() for s in spec.split(",") if s.strip()]
    unknown = [n for n in names if n not in TASKS]
    if unknown:
        raise CliConfigError(f"unknown tasks {unknown}; known: {list(TASKS)}")
    return {n: TASKS[n] for n in names}


def _tribool(value: str | None) -> bool | None:
    if value is None or value == "auto":
        return None
    if value in ("true", "yes", "1"):
        return True
    if value in ("false", "no", "0"):
        return False
    raise CliConfigError(f"expected auto/true/false, got {value!r}")


# ---- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    file_cfg = _load_config_file(args.config).get("gen_data", {})
    resolved = _merge(
        {
            "episodes": 1,
            "grid": 8,
            "seed": 0,
            "tasks": None,
            "variant_mode": VISUAL_MATCHING,
        },
        _merge(
            file_cfg,
            {
                "episodes": args.episodes,
                "grid": args.grid,
                "seed": args.seed,
                "tasks": args.tasks,
                "variant_mode": args.variant_mode,
            },
        ),
    )
    if resolved["episodes"] < 1:
        raise CliConfigError("--episodes must be >= 1")
    tasks = _parse_tasks(resolved["tasks"])
    vocab = build_vocab()
    dataset = data_mod.generate_demos(
        episodes_per_task=resolved["episodes"],
        seed=resolved["seed"],
        vocab=vocab,
        tasks=tasks,
        variant_mode=resolved["variant_mode"],
        grid=resolved["grid"],
    )
    base = Path(args.out)
    data_mod.save(dataset, vocab, base)
    _write_resolved_config(
        base.with_name(base.name + ".config.json"),
        {"command": "gen-data", "gen_data": resolved, "out": str(base)},
    )
    print(f"wrote {len(dataset)} steps over {dataset.manifest(vocab)['episodes']} episodes to {base}")
    return EXIT_OK


def cmd_annotate(args) -> int:
    dataset, vocab = data_mod.load(args.inp)
    teacher_kind = args.teacher or "oracle"
    if teacher_kind == "oracle":
        teacher = OracleTeacher()
        teacher_cfg = {"teacher": "oracle"}
    elif teacher_kind == "remote":
        endpoint = args.endpoint or os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise CliConfigError(f"remote teacher needs --endpoint or ${ENDPOINT_ENV}")
        token = args.token or os.environ.get(TOKEN_ENV)
        cfg = RemoteTeacherConfig(
            endpoint=endpoint,
            token=token,
            retries=args.retries,
            timeout=args.timeout,
        )
        teacher = RemoteTeacher(cfg, vocab)
        teacher_cfg = {
            "endpoint": endpoint,
            "retries": cfg.retries,
            "teacher": "remote",
            "timeout": cfg.timeout,
        }
    else:
        raise CliConfigError(f"unknown teacher {teacher_kind!r}")

    base = Path(args.out)
    try:
        annotated = data_mod.augment(dataset, teacher, vocab)
    except data_mod.PartialAnnotationError as exc:
        base.parent.mkdir(parents=True, exist_ok=True)
        base.with_name(base.name + ".failures.json").write_text(
            json.dumps(
                {"causes": exc.causes, "failed_indices": exc.failed_indices},
                sort_keys=True,
                indent=2,
            )
            + "\n"
        )
        print(f"annotation failed for {len(exc.failed_indices)} steps", file=sys.stderr)
        return EXIT_PARTIAL
    data_mod.save(annotated, vocab, base)
    _write_resolved_config(
        base.with_name(base.name + ".config.json"),
        {"command": "annotate", "in": args.inp, "out": str(base), "teacher": teacher_cfg},
    )
    print(f"annotated {len(annotated)} steps to {base}")
    return EXIT_OK


def _resolve_train(args) -> tuple[dict, dict]:
    file_cfg = _load_config_file(args.config)
    model_section = _merge(
        file_cfg.get("model", {}),
        {
            "layers": args.layers,
            "heads": args.heads,
            "dim": args.dim,
            "rationale_max": args.rationale_max,
            "frozen_blocks": args.freeze_blocks,
            "freeze_embeddings": _tribool(args.freeze_embeddings),
        },
    )
    train_section = _merge(
        file_cfg.get("train", {}),
        {
            "lambda_r": args.lambda_r,
            "learning_rate": args.lr,
            "batch_size": args.batch_size,
            "max_steps": args.max_steps,
            "eval_interval": args.eval_interval,
            "patience": args.patience,
            "optimizer": args.optimizer,
            "seed": args.seed,
            "val_episodes_per_task": args.val_episodes,
            "val_fraction": args.val_fraction,
            "strict_sum": True if args.strict_sum else None,
            "action_only": True if args.action_only else None,
        },
    )
    return model_section, train_section


def _prepare_training(args):
    model_section, train_section = _resolve_train(args)
    dataset, vocab = data_mod.load(args.data)
    if not dataset.steps:
        raise CliConfigError("dataset is empty")
    if dataset.steps[0].rationale_ids is None:
        raise CliConfigError("dataset has no rationales; run `annotate` first")
    grid = dataset.steps[0].scene.grid_w
    model_defaults = {"vocab_size": len(vocab), "grid": grid}
    merged = _merge(model_defaults, model_section)
    if "frozen_blocks" not in merged and "layers" in merged:
        merged["frozen_blocks"] = merged["layers"] // 2  # default depth ratio
    model_cfg = ModelConfig(**merged)
    train_cfg = trainer.TrainConfig(**train_section)
    train_ds, val_ds = data_mod.split_by_episode(
        dataset, train_cfg.val_fraction, train_cfg.seed
    )
    return dataset, vocab, grid, model_cfg, train_cfg, train_ds, val_ds


def cmd_train(args) -> int:
    dataset, vocab, grid, model_cfg, train_cfg, train_ds, val_ds = _prepare_training(args)
    out = Path(args.out)
    _write_resolved_config(
        out / "config.json",
        {
            "command": "train",
            "data": args.data,
            "model": model_cfg.to_json(),
            "out": str(out),
            "train": train_cfg.to_json(),
        },
    )
    result = trainer.train_loop(train_ds, val_ds, model_cfg, train_cfg, vocab, out, grid=grid)
    print(
        f"trained {result.steps_run} steps; best val success "
        f"{result.best_val_success:.3f}; metrics at {result.metrics_path}"
    )
    return EXIT_OK


def _cmd_sweep(args, axis: str) -> int:
    dataset, vocab, grid, model_cfg, train_cfg, train_ds, val_ds = _prepare_training(args)
    if axis == "lambda_r":
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    else:
        values = [int(v) for v in args.values.split(",") if v.strip() != ""]
    out = Path(args.out)
    _write_resolved_config(
        out / "config.json",
        {
            "command": f"sweep-{axis}",
            "data": args.data,
            "model": model_cfg.to_json(),
            "out": str(out),
            "train": train_cfg.to_json(),
            "values": values,
        },
    )
    report = trainer.sweep(
        axis, values, model_cfg, train_cfg, train_ds, val_ds, vocab, out, grid=grid
    )
    ok_rows = [r for r in report if r.get("status") == "ok"]
    if len(ok_rows) >= 2:
        evalviz.emit_curves(report, out / "curve")
    failures = [r for r in report if r.get("status") != "ok"]
    print(f"sweep over {axis}: {len(ok_rows)} ok, {len(failures)} failed; report at {out}")
    return EXIT_OK


def cmd_sweep_lambda(args) -> int:
    return _cmd_sweep(args, "lambda_r")


def cmd_sweep_freeze(args) -> int:
    return _cmd_sweep(args, "frozen_blocks")


def _load_vocab_for_eval(args):
    if args.data:
        _, vocab = data_mod.load(args.data)
        return vocab
    if args.vocab:
        from .vocab import Vocabulary

        return Vocabulary.from_json(json.loads(Path(args.vocab).read_text()))
    return build_vocab()


def _eval_config(args, grid: int) -> evalviz.EvalConfig:
    modes = tuple((args.modes or VISUAL_MATCHING).split(","))
    for m in modes:
        if m not in (VISUAL_MATCHING, VARIANT_AGGREGATION):
            raise CliConfigError(f"unknown variant mode {m!r}")
    return evalviz.EvalConfig(
        episodes_per_task=args.episodes,
        modes=modes,
        seed_base=args.seed_base,
        max_steps=args.max_steps,
        grid=grid,
    )


def cmd_eval(args) -> int:
    vocab = _load_vocab_for_eval(args)
    policy = evalviz.ModelPolicy.from_checkpoint(args.checkpoint, vocab)
    cfg = _eval_config(args, policy.cfg.grid)
    out = Path(args.out)
    _write_resolved_config(
        out / "config.json",
        {"checkpoint": args.checkpoint, "command": "eval", "eval": cfg.to_json(), "out": str(out)},
    )
    table = evalviz.eval_suite(policy, cfg, out_dir=out / "reports")
    for mode, avg in table.averages.items():
        print(f"{mode}: average grasp {avg['grasp']:.3f}, success {avg['success']:.3f}")
    return EXIT_OK


def cmd_viz_attn(args) -> int:
    vocab = _load_vocab_for_eval(args)
    before = evalviz.ModelPolicy.from_checkpoint(args.before, vocab)
    after = evalviz.ModelPolicy.from_checkpoint(args.after, vocab)
    cfg = _eval_config(args, before.cfg.grid)
    out = Path(args.out)
    _write_resolved_config(
        out / "config.json",
        {
            "after": args.after,
            "before": args.before,
            "command": "viz-attn",
            "eval": cfg.to_json(),
            "heatmaps": args.heatmaps,
            "out": str(out),
        },
    )
    report = evalviz.compare_alignment(before, after, cfg)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "reports" / "alignment.json").write_text(
        json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n"
    )

    heat_dir = out / "heatmaps"
    for episode in report.episodes[: args.heatmaps]:
        task = TASKS[episode["task"]]
        variant = make_variant(episode["mode"], episode["seed"])
        scene = reset(task, variant, episode["seed"], cfg.grid, cfg.grid)
        image = render(scene, variant)
        for tag, policy in (("before", before), ("after", after)):
            decision = policy.decide(task, image)
            patch_attn = extract_attention(decision.attention, decision.layout, "action")
            row = patch_attn.mean(axis=(0, 1))[0]
            evalviz.emit_heatmap(
                image, row, heat_dir / f"{episode['task']}_{episode['seed']}_{tag}"
            )
    print(
        f"alignment before {report.mean_before:.4f} after {report.mean_after:.4f} "
        f"delta {report.delta:+.4f}; artifacts at {out}"
    )
    return EXIT_OK


# ---- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridvla",
        description="Gridworld VLA policy training with rationale supervision",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate expert demonstrations")
    p.add_argument("--tasks", help="comma-separated task names (default: all four)")
    p.add_argument("--episodes", type=int, help="episodes per task")
    p.add_argument("--variant-mode", choices=(VISUAL_MATCHING, VARIANT_AGGREGATION))
    p.add_argument("--seed", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="dataset base path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("annotate", help="attach teacher rationales to a dataset")
    p.add_argument("--in", dest="inp", required=True, help="input dataset base path")
    p.add_argument("--teacher", choices=("oracle", "remote"))
    p.add_argument("--endpoint", help=f"remote teacher URL (or ${ENDPOINT_ENV})")
    p.add_argument("--token", help=f"remote teacher auth token (or ${TOKEN_ENV})")
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--out", required=True, help="output dataset base path")
    p.set_defaults(func=cmd_annotate)

    def add_train_flags(p):
        p.add_argument("--data", required=True, help="annotated dataset base path")
        p.add_argument("--config")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--lambda-r", dest="lambda_r", type=float)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--max-steps", type=int)
        p.add_argument("--eval-interval", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--optimizer", choices=("adam", "sgd"))
        p.add_argument("--freeze-blocks", type=int)
        p.add_argument("--freeze-embeddings", choices=("auto", "true", "false"))
        p.add_argument("--val-fraction", type=float)
        p.add_argument("--val-episodes", type=int)
        p.add_argument("--layers", type=int)
        p.add_argument("--heads", type=int)
        p.add_argument("--dim", type=int)
        p.add_argument("--rationale-max", type=int)
        p.add_argument("--strict-sum", action="store_true", default=None)
        p.add_argument("--action-only", action="store_true", default=None)

    p = sub.add_parser("train", help="train a policy on an annotated dataset")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-lambda", help="sweep the reasoning-loss weight")
    add_train_flags(p)
    p.add_argument("--values", required=True, help="comma-separated weights")
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("sweep-freeze", help="sweep the number of frozen blocks")
    add_train_flags(p)
    p.add_argument("--values", required=True, help="comma-separated block counts")
    p.set_defaults(func=cmd_sweep_freeze)

    def add_eval_flags(p):
        p.add_argument("--data", help="dataset base path (for the vocabulary)")
        p.add_argument("--vocab", help="vocab.json path")
        p.add_argument("--episodes", type=int, default=50)
        p.add_argument("--modes", help="comma-separated variant modes")
        p.add_argument("--seed-base", type=int, default=0)
        p.add_argument("--max-steps", type=int, default=64)
        p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    add_eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz-attn", help="paired attention comparison of two checkpoints")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    add_eval_flags(p)
    p.add_argument("--heatmaps", type=int, default=4, help="episodes to render as heatmaps")
    p.set_defaults(func=cmd_viz_attn)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (
        CliConfigError,
        ConfigError,
        VariantError,
        VocabError,
        CheckpointError,
        evalviz.CompatibilityError,
        evalviz.MetricError,
        evalviz.PlotError,
        data_mod.SampleSizeError,
        data_mod.GenerationError,
    ) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except trainer.DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (TeacherTransportError, RemoteTeacherHttpError, data_mod.PartialAnnotationError) as exc:
        print(f"remote/partial failure: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except (
        OSError,
        data_mod.DatasetFormatError,
        data_mod.DatasetVersionError,
        data_mod.DatasetConsistencyError,
    ) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
