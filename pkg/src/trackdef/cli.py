"""Command-line surface: train the tracker, train a defense branch, evaluate
configuration grids, and merge run reports.

Exit codes: 0 on success, 2 for configuration problems (bad file, missing
checkpoint, invalid flag combination), 3 for runtime failures such as
diverging training. Flags override config-file values; the DUALOSSDEF_OUT
environment variable overrides the configured output root.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from .advtrain import TrainConfig, save_defense_checkpoint, train_defense
from .attacks import AttackConfig
from .config import ExperimentConfig, load_config
from .defense import DeploymentPattern, build_defense_net
from .errors import CheckpointError, ConfigError, DataFormatError, TrainingDiverged
from .evaluation import (
    DefenseSelection,
    RunSpec,
    dump_score_maps,
    evaluate_reset,
    ope_metrics,
    run_ope,
)
from .reporting import (
    RunMetrics,
    format_comparison_table,
    format_timing_table,
    read_metrics_file,
    timing_report,
    write_metrics_files,
    write_timing_file,
)
from .tracker import (
    TrackerTrainConfig,
    load_tracker_checkpoint,
    save_tracker_checkpoint,
    train_baseline_tracker,
)

OUT_ENV_VAR = "DUALOSSDEF_OUT"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trackdef",
        description="Adversarial defense toolkit for siamese trackers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-tracker", help="train the baseline tracker on clean pairs")
    _common_args(p)
    p.set_defaults(func=cmd_train_tracker)

    p = sub.add_parser("train-defense", help="adversarially train one defense branch")
    _common_args(p)
    p.add_argument(
        "--branch", choices=("template", "search"), required=True,
        help="which tracker input branch the defense net protects",
    )
    p.set_defaults(func=cmd_train_defense)

    p = sub.add_parser("eval", help="evaluate a (pattern, attack) grid")
    _common_args(p)
    p.add_argument(
        "--pattern", default="none",
        help="comma list of defense patterns: none|template|search|both",
    )
    p.add_argument(
        "--attack", default="none",
        help="comma list of attacks: none|fgsm|pgd|iou",
    )
    p.add_argument(
        "--adaptive", action="store_true",
        help="craft attacks against the defense-plus-tracker composition",
    )
    p.add_argument("--jobs", type=int, default=None, help="parallel sequence workers")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge run directories into one comparison table")
    p.add_argument("run_dirs", nargs="+", help="directories holding metrics.json")
    p.add_argument("--out", default=None, help="directory for the merged report files")
    p.set_defaults(func=cmd_report)
    return parser


def _common_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config file (YAML)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the output directory")


def _load(args) -> tuple[ExperimentConfig, Path, int]:
    cfg = load_config(args.config)
    out = args.out or os.environ.get(OUT_ENV_VAR) or cfg.output_dir
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if args.seed is None else args.seed
    return cfg, out_dir, seed


def _load_sequences(cfg: ExperimentConfig):
    return cfg.data.dataset_spec().load()


def cmd_train_tracker(args) -> int:
    cfg, out_dir, seed = _load(args)
    section = cfg.tracker_training
    train_cfg = TrackerTrainConfig(
        model=cfg.tracker.model_config(),
        loss=section.loss,
        epochs=section.epochs,
        batches_per_epoch=section.batches_per_epoch,
        batch_size=section.batch_size,
        lr=section.lr,
        betas=section.betas,
        frame_gap=section.frame_gap,
        shift_jitter=section.shift_jitter,
        scale_jitter=section.scale_jitter,
        seed=seed,
    )
    sequences = _load_sequences(cfg)
    model, rows = train_baseline_tracker(
        train_cfg, sequences, log_path=out_dir / "tracker_train_log.csv"
    )
    ckpt = out_dir / "tracker.ckpt"
    save_tracker_checkpoint(model, ckpt)
    print(f"tracker checkpoint: {ckpt}")
    print(f"final loss: {rows[-1]['loss']:.4f} over {len(rows)} batches")
    return 0


def cmd_train_defense(args) -> int:
    cfg, out_dir, seed = _load(args)
    ckpt_path = cfg.tracker.checkpoint
    if ckpt_path is None:
        raise ConfigError("config tracker.checkpoint is required to train a defense")
    if not Path(ckpt_path).is_file():
        raise ConfigError(f"tracker checkpoint {ckpt_path} does not exist")
    tracker = load_tracker_checkpoint(ckpt_path)
    input_size = (
        tracker.cfg.search_size if args.branch == "search" else tracker.cfg.template_size
    )
    net = build_defense_net(
        args.branch,
        input_size,
        depth=cfg.defense.depth,
        base_width=cfg.defense.base_width,
        seed=seed,
    )
    section = cfg.defense_training
    train_cfg = TrainConfig(
        epochs=section.epochs,
        batch_size=section.batch_size,
        lr=section.lr,
        betas=section.betas,
        epsilon=section.epsilon,
        branch=args.branch,
        seed=seed,
        batches_per_epoch=section.batches_per_epoch,
        init_dist=section.init_dist,
        loss=section.loss,
        frame_gap=section.frame_gap,
        shift_jitter=section.shift_jitter,
        scale_jitter=section.scale_jitter,
    )
    sequences = _load_sequences(cfg)
    log = train_defense(
        tracker, net, sequences, train_cfg,
        log_path=out_dir / f"defense_train_{args.branch}_log.csv",
    )
    ckpt = out_dir / f"defense_{args.branch}.ckpt"
    save_defense_checkpoint(net, train_cfg, ckpt)
    print(f"defense checkpoint: {ckpt}")
    print(
        f"final pass-2 loss: {log.rows[-1]['loss_pass2']:.4f} over "
        f"{log.optimizer_steps} steps"
    )
    return 0


_ATTACK_ALIASES = {"fgsm": "fgsm", "pgd": "pgd", "iou": "iou_blackbox"}


def _eval_grid(args) -> tuple[list[str], list[str]]:
    patterns = [p.strip() for p in args.pattern.split(",") if p.strip()]
    attacks = [a.strip() for a in args.attack.split(",") if a.strip()]
    for p in patterns:
        if p not in ("none", "template", "search", "both"):
            raise ConfigError(f"unknown defense pattern {p!r}")
    for a in attacks:
        if a not in ("none",) + tuple(_ATTACK_ALIASES):
            raise ConfigError(f"unknown attack {a!r}")
    if not patterns or not attacks:
        raise ConfigError("eval needs at least one pattern and one attack")
    return patterns, attacks


def cmd_eval(args) -> int:
    cfg, out_dir, seed = _load(args)
    patterns, attacks = _eval_grid(args)
    if args.adaptive and all(p == "none" for p in patterns):
        raise ConfigError("an adaptive attack requires a defense pattern")
    tracker_ckpt = cfg.tracker.checkpoint
    if tracker_ckpt is None:
        raise ConfigError("config tracker.checkpoint is required for evaluation")
    if not Path(tracker_ckpt).is_file():
        raise ConfigError(f"tracker checkpoint {tracker_ckpt} does not exist")
    dataset = cfg.data.dataset_spec()
    jobs = args.jobs if args.jobs is not None else cfg.evaluation.jobs

    run_metrics: list[RunMetrics] = []
    timings = {}
    results_by_run = {}
    for pattern_name in patterns:
        for attack_name in attacks:
            name = f"{pattern_name}_{attack_name}" + ("_adaptive" if args.adaptive else "")
            defense = _defense_selection(cfg, pattern_name)
            attack = _attack_config(cfg, attack_name, args.adaptive, seed)
            if attack is not None and attack.adaptive and defense is None:
                raise ConfigError("an adaptive attack requires a defense pattern")
            spec = RunSpec(
                tracker_checkpoint=tracker_ckpt,
                dataset=dataset,
                defense=defense,
                attack=attack,
                seed=seed,
                jobs=jobs,
                dump_patches=(
                    str(out_dir / "patches" / name) if cfg.evaluation.dump_patches else None
                ),
            )
            metrics: dict[str, float] = {}
            if cfg.evaluation.protocol in ("ope", "both"):
                results = run_ope(spec)
                metrics.update(ope_metrics(results))
                results_by_run[name] = results
                timings[name] = timing_report(results)
            if cfg.evaluation.protocol in ("reset", "both"):
                from .evaluation import _materialize

                model, stack, pat, sequences = _materialize(spec)
                outcome = evaluate_reset(
                    model, sequences, stack=stack, pattern=pat, attack=spec.attack, seed=seed
                )
                metrics.update(
                    {
                        "accuracy": outcome.accuracy,
                        "robustness": outcome.robustness,
                        "eao_s": outcome.eao_s,
                    }
                )
                if name not in timings:
                    timings[name] = timing_report(outcome.results)
            run_metrics.append(
                RunMetrics(
                    name=name,
                    dataset=dataset.dataset_id(),
                    metrics=metrics,
                    spec={
                        "pattern": pattern_name,
                        "attack": attack_name,
                        "adaptive": bool(args.adaptive and attack_name != "none"),
                        "seed": seed,
                    },
                )
            )
            if cfg.evaluation.dump_frames:
                dump_score_maps(
                    spec, list(cfg.evaluation.dump_frames), out_dir / "score_maps" / name
                )
    write_metrics_files(out_dir, run_metrics)
    write_timing_file(out_dir, timings)
    if cfg.evaluation.plots and results_by_run:
        from .reporting import plot_curves

        plot_curves(results_by_run, out_dir)
    print(format_comparison_table(run_metrics))
    print()
    print(format_timing_table(timings))
    return 0


def _defense_selection(cfg: ExperimentConfig, pattern_name: str) -> DefenseSelection | None:
    if pattern_name == "none":
        return None
    pattern = DeploymentPattern.parse(pattern_name)
    selection = DefenseSelection(
        pattern=pattern,
        template_checkpoint=cfg.defense.template_checkpoint,
        search_checkpoint=cfg.defense.search_checkpoint,
    )
    if pattern.uses_template and selection.template_checkpoint is None:
        raise ConfigError(f"pattern {pattern_name!r} needs defense.template_checkpoint")
    if pattern.uses_search and selection.search_checkpoint is None:
        raise ConfigError(f"pattern {pattern_name!r} needs defense.search_checkpoint")
    for path in (selection.template_checkpoint, selection.search_checkpoint):
        if path is not None and not Path(path).is_file():
            raise ConfigError(f"defense checkpoint {path} does not exist")
    return selection


def _attack_config(
    cfg: ExperimentConfig, attack_name: str, adaptive: bool, seed: int
) -> AttackConfig | None:
    if attack_name == "none":
        return None
    return dataclasses.replace(
        cfg.attack, kind=_ATTACK_ALIASES[attack_name], adaptive=adaptive, seed=seed
    )


def cmd_report(args) -> int:
    merged: list[RunMetrics] = []
    timing_rows = {}
    for run_dir in args.run_dirs:
        merged.extend(read_metrics_file(run_dir))
        timing_path = Path(run_dir) / "timing.json"
        if timing_path.is_file():
            import json

            from .reporting import TimingReport

            for name, payload in json.loads(timing_path.read_text()).items():
                timing_rows[name] = TimingReport(
                    tracker_ms=payload["tracker_ms"],
                    defense_ms=payload["defense_ms"],
                    attack_ms=payload["attack_ms"],
                )
    if not merged:
        raise ConfigError("no runs found in the given directories")
    table = format_comparison_table(merged)
    out_dir = Path(args.out) if args.out else Path(args.run_dirs[0])
    write_metrics_files(out_dir / "combined", merged)
    print(table)
    if timing_rows:
        print()
        print(format_timing_table(timing_rows))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
