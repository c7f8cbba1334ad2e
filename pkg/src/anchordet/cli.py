"""Command-line entry point for reproducible runs.

Subcommands wire data generation, the staged training pipeline,
evaluation, the refinement-schedule ablation, the travel-length analysis,
and attention-map export. Every command echoes its resolved config into
the run directory and is deterministic for a fixed seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from . import checkpoint as ckpt
from . import evaluation as ev
from .config import RunConfig
from .decoder import export_attention_maps, validate_refine_layers
from .errors import ConfigError
from .scene import SceneParseError, generate_scene, load_scene, save_scene
from .training import (
    TrainConfig,
    continue_with_refinement,
    train_aam,
    train_detector,
    write_training_log,
)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--profile", default="desk", choices=("desk", "paper-shape"))
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")
    p.add_argument("--out", required=True, help="run output directory")


def _resolve(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "refine", None):
        overrides["refine"] = args.refine
    cfg = RunConfig.from_sources(args.profile, args.config, overrides)
    os.makedirs(args.out, exist_ok=True)
    cfg.echo(os.path.join(args.out, "config.echo"))
    return cfg


def _load_scenes(data_dir: str) -> list:
    files = sorted(
        f for f in os.listdir(data_dir) if f.endswith(".txt") and f.startswith("scene_")
    )
    if not files:
        raise FileNotFoundError(f"no scene_*.txt files in {data_dir}")
    return [load_scene(os.path.join(data_dir, f)) for f in files]


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    scene_cfg = cfg.scene_config()
    base_seed = cfg["seed"]
    for i in range(args.count):
        scene = generate_scene(scene_cfg, base_seed + i)
        save_scene(scene, os.path.join(args.out, f"scene_{i:05d}.txt"))
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    scenes = _load_scenes(args.data)
    train_cfg = cfg.train_config()
    os.makedirs(os.path.join(args.out, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(args.out, "logs"), exist_ok=True)

    if args.refine:
        if not args.init_checkpoint or not args.aam_checkpoint:
            print("--refine needs --init-checkpoint (stage 1) and --aam-checkpoint",
                  file=sys.stderr)
            return 2
        model = ckpt.load_checkpoint(args.init_checkpoint)
        ckpt.load_aam_checkpoint(args.aam_checkpoint, model)
        s_r = validate_refine_layers(cfg.refine_layers(), model.cfg.k_layers)
        log = continue_with_refinement(model, scenes, train_cfg, s_r)
        # persist the schedule so `eval` without --refine replays it
        model.cfg = dataclasses.replace(model.cfg, refine_layers=s_r)
        out_path = os.path.join(args.out, "checkpoints", "stage2.ckpt")
    else:
        model, log = train_detector(
            scenes, cfg.grid_config(), cfg.decoder_config(), train_cfg
        )
        out_path = os.path.join(args.out, "checkpoints", "stage1.ckpt")
    ckpt.save_checkpoint(out_path, model)
    write_training_log(os.path.join(args.out, "logs", "training.csv"), log)
    print(f"checkpoint written to {out_path}")
    return 0


def cmd_train_aam(args) -> int:
    cfg = _resolve(args)
    scenes = _load_scenes(args.data)
    model = ckpt.load_checkpoint(args.checkpoint)
    log = train_aam(model, scenes, cfg.train_config())
    os.makedirs(os.path.join(args.out, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(args.out, "logs"), exist_ok=True)
    out_path = os.path.join(args.out, "checkpoints", "aam.ckpt")
    ckpt.save_aam_checkpoint(out_path, model)
    write_training_log(os.path.join(args.out, "logs", "aam_training.csv"), log)
    print(f"AAM checkpoint written to {out_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    scenes = _load_scenes(args.data)
    model = ckpt.load_checkpoint(args.checkpoint)
    refine = cfg.refine_layers() if args.refine else model.cfg.refine_layers
    rows = []
    report, _ = ev.evaluate_detector(model, scenes, refine_layers=refine)
    rows.append(("no_nms", report))
    if args.nms is not None:
        rep_nms, _ = ev.evaluate_detector(
            model, scenes, refine_layers=refine, nms_overlap=args.nms
        )
        rows.append((f"nms_{args.nms:g}", rep_nms))
    os.makedirs(os.path.join(args.out, "reports"), exist_ok=True)
    path = os.path.join(args.out, "reports", "metrics.csv")
    ev.write_metrics_csv(path, rows)
    for method, rep in rows:
        print(f"{method}: AP={rep.ap:.4f} ATE={rep.ate:.4f} "
              f"ASE={rep.ase:.4f} AOE={rep.aoe:.4f}")
    return 0


def _schedule_variants(k_layers: int) -> list[tuple[str, frozenset[int]]]:
    return [
        ("Propagation", frozenset()),
        ("Once", frozenset({1})),
        ("Every 2nd", frozenset(range(1, k_layers, 2))),
        ("After each", frozenset(range(1, k_layers))),
    ]


def cmd_ablate_schedules(args) -> int:
    cfg = _resolve(args)
    train_scenes = _load_scenes(args.data)
    eval_scenes = _load_scenes(args.eval_data)
    train_cfg = cfg.train_config()
    dec_cfg = cfg.decoder_config()
    model, _ = train_detector(train_scenes, cfg.grid_config(), dec_cfg, train_cfg)
    train_aam(model, train_scenes, train_cfg)
    base_state = {k: v.clone() for k, v in model.state_dict().items()}

    rows = []
    for name, s_r in _schedule_variants(dec_cfg.k_layers):
        model.load_state_dict(base_state)
        if s_r:
            continue_with_refinement(model, train_scenes, train_cfg, s_r)
        report, _ = ev.evaluate_detector(model, eval_scenes, refine_layers=s_r)
        rows.append((name, report))
        print(f"{name} (S_r={sorted(s_r) or 'empty'}): AP={report.ap:.4f} "
              f"ATE={report.ate:.4f} ASE={report.ase:.4f} AOE={report.aoe:.4f}")
    os.makedirs(os.path.join(args.out, "reports"), exist_ok=True)
    ev.write_metrics_csv(os.path.join(args.out, "reports", "schedules.csv"), rows)
    ev.plot_metrics(os.path.join(args.out, "reports", "schedules.svg"), rows)
    return 0


def cmd_analyze_travel(args) -> int:
    cfg = _resolve(args)
    scenes = _load_scenes(args.data)
    model = ckpt.load_checkpoint(args.checkpoint)
    refine = cfg.refine_layers() if args.refine else model.cfg.refine_layers
    _, records = ev.evaluate_detector(model, scenes, refine_layers=refine)
    stats = ev.travel_length_stats(records, bin_width=args.bin_width)
    os.makedirs(os.path.join(args.out, "reports"), exist_ok=True)
    ev.write_travel_csv(os.path.join(args.out, "reports", "travel.csv"), stats)
    ev.plot_travel_stats(os.path.join(args.out, "reports", "travel.svg"), stats)
    print(f"travel analysis over {len(stats.fq_lengths)} matched detections "
          f"written to {args.out}/reports")
    return 0


def cmd_dump_attention(args) -> int:
    cfg = _resolve(args)
    model = ckpt.load_checkpoint(args.checkpoint)
    scene = load_scene(args.scene)
    refine = cfg.refine_layers() if args.refine else model.cfg.refine_layers
    import torch

    with torch.no_grad():
        out = model.run_scene(scene, refine_layers=refine)
    if not (0 <= args.query < model.cfg.m_queries):
        print(f"query index {args.query} out of range [0, {model.cfg.m_queries})",
              file=sys.stderr)
        return 2
    paths = export_attention_maps(out, model.grid_cfg, args.query,
                                  os.path.join(args.out, "reports"))
    print(f"wrote {len(paths)} attention files")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchordet",
        description="Anchor-query transformer detector for large point clouds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic scenes")
    _add_common(p)
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train stage 1, or stage 2 with --refine")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--refine", metavar="SR", help="comma list, e.g. 1,3,5")
    p.add_argument("--init-checkpoint", help="stage-1 checkpoint (with --refine)")
    p.add_argument("--aam-checkpoint", help="trained AAM (with --refine)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("train-aam", help="train the alignment module")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")
    p.set_defaults(fn=cmd_train_aam)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--refine", metavar="SR")
    p.add_argument("--nms", type=float, help="also report NMS at this IoU overlap")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate-schedules", help="compare refinement schedules")
    _add_common(p)
    p.add_argument("--data", required=True, help="training scenes")
    p.add_argument("--eval-data", required=True, help="evaluation scenes")
    p.set_defaults(fn=cmd_ablate_schedules)

    p = sub.add_parser("analyze-travel", help="query travel-length analysis")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--refine", metavar="SR")
    p.add_argument("--bin-width", type=float, default=4.0)
    p.set_defaults(fn=cmd_analyze_travel)

    p = sub.add_parser("dump-attention", help="export per-layer attention maps")
    _add_common(p)
    p.add_argument("--scene", required=True, help="scene file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", type=int, required=True)
    p.add_argument("--refine", metavar="SR")
    p.set_defaults(fn=cmd_dump_attention)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, SceneParseError, ckpt.CheckpointError,
            FileNotFoundError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
