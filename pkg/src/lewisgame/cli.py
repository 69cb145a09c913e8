"""Command-line entry point.

Subcommands: gen-world, train, eval, sweep, pretrain, plotdata.
Exit codes: 0 ok, 1 usage or config error, 2 data or format error,
3 numerical failure during training. The LEWISGAME_CONFIG environment
variable supplies a default --config path.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys

import numpy as np

from .agents import ListenerModel, SpeakerPolicy, model_config_from_params
from .config import ConfigError, RunConfig, load_config
from .evaluate import (ablation_sweep, ema, evaluate_agents,
                       supervised_pretrain, sweep_summary)
from .params import (FormatError, ParameterSet, load_checkpoint,
                     save_checkpoint)
from .training import NumericalFailureError, Trainer
from .world import (CapacityError, SamplingError, Vocabulary,
                    generate_dataset, generate_splits, load_dataset,
                    mix_datasets, save_dataset)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

ENV_CONFIG = "LEWISGAME_CONFIG"


def _load_cfg(path: str | None) -> RunConfig:
    path = path or os.environ.get(ENV_CONFIG)
    if not path:
        return RunConfig()
    return load_config(path)


def _build_splits(cfg: RunConfig):
    w = cfg.world
    splits = generate_splits(w.seed, cfg.world_spec(), w.n_scenes,
                             w.val_scenes, w.test_scenes)
    if w.mix_scenes > 0:
        extra = generate_dataset(w.mix_seed, w.mix_scenes, cfg.mix_spec())
        splits["train"] = mix_datasets(splits["train"], extra)
    return splits


def cmd_gen_world(args) -> int:
    cfg = _load_cfg(args.config)
    splits = _build_splits(cfg)
    if args.split not in splits:
        print(f"split {args.split!r} has no scenes in this config",
              file=sys.stderr)
        return EXIT_USAGE
    dataset = splits[args.split]
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} scenes ({args.split}) to {args.out}")
    print(f"world capacity: {cfg.world_spec().capacity()} distinct scenes")
    return EXIT_OK


def _make_trainer(cfg: RunConfig, dataset) -> Trainer:
    model_cfg = cfg.model_config(len(dataset.vocab), dataset.spec.input_dim)
    return Trainer(dataset, cfg.game_config(), model_cfg,
                   cfg.train_settings())


def cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    dataset = load_dataset(cfg.paths.dataset)
    trainer = _make_trainer(cfg, dataset)
    if args.resume:
        trainer.load_state(load_checkpoint(args.resume))
    remaining = cfg.train.steps - trainer.step_index
    run_id = cfg.run_id()
    os.makedirs(os.path.dirname(cfg.paths.metrics) or ".", exist_ok=True)
    stop = {"flag": False}

    def on_signal(signum, frame):
        stop["flag"] = True

    old_int = signal.signal(signal.SIGINT, on_signal)
    old_term = signal.signal(signal.SIGTERM, on_signal)
    try:
        with open(cfg.paths.metrics, "a", encoding="utf-8") as fh:
            trainer.run(max(0, remaining), metrics_fh=fh, run_id=run_id,
                        checkpoint_dir=cfg.paths.checkpoint_dir,
                        checkpoint_every=cfg.train.eval_interval,
                        stop_flag=lambda: stop["flag"])
    except NumericalFailureError as exc:
        save_checkpoint(trainer.pack_state(),
                        os.path.join(cfg.paths.checkpoint_dir, "latest.lgc"))
        print(f"numerical failure at step {trainer.step_index}: {exc}",
              file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        signal.signal(signal.SIGINT, old_int)
        signal.signal(signal.SIGTERM, old_term)
    print(f"trained to step {trainer.step_index} "
          f"(checkpoints in {cfg.paths.checkpoint_dir})")
    return EXIT_OK


def _agents_from_checkpoint(state: ParameterSet, dataset):
    speaker_params = state.subset("speaker.")
    listener_params = state.subset("listener.")
    if not len(speaker_params) or not len(listener_params):
        raise FormatError("checkpoint lacks speaker./listener. entries", 0)
    cfg = model_config_from_params(
        speaker_params, listener_params, raster=dataset.spec.raster,
        raster_size=dataset.spec.raster_size, raster_grid=dataset.spec.grid)
    speaker = SpeakerPolicy(cfg, speaker_params)
    listener = ListenerModel(cfg, listener_params, encoder=speaker)
    return speaker, listener


def cmd_eval(args) -> int:
    dataset = load_dataset(args.dataset)
    state = load_checkpoint(args.checkpoint)
    speaker, listener = _agents_from_checkpoint(state, dataset)
    if args.k > len(dataset):
        print(f"K={args.k} exceeds dataset size {len(dataset)}",
              file=sys.stderr)
        return EXIT_DATA
    report = evaluate_agents(speaker, listener, dataset, k=args.k,
                             n_rounds=args.rounds, t_max=args.t_max,
                             seed=args.seed)
    row = report.row(run_id=os.path.basename(args.checkpoint),
                     seed=args.seed)
    for name in ("bleu1", "bleu2", "bleu3", "bleu4", "coverage", "top1",
                 "top10", "mean_length"):
        print(f"{name}: {row[name]:.4f}")
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row) + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args.config)
    k_list = [int(x) for x in args.k_list.split(",")]
    seeds = [int(x) for x in args.seeds.split(",")]
    g = cfg.game
    t = cfg.train
    m = cfg.model
    w = cfg.world
    cells = ablation_sweep(
        cfg.world.seed, cfg.world_spec(), cfg.world.n_scenes,
        cfg.world.val_scenes, k_list, seeds, steps=args.steps or t.steps,
        game_kw={"gamma": g.gamma, "lam": g.lam,
                 "generations": g.generations, "t_max": g.t_max},
        model_kw={
            "vocab_size": len(Vocabulary()), "d_e": m.d_e, "d_o": m.d_o,
            "n_layers": m.n_layers, "n_patches": m.n_patches,
            "d_att": m.d_att, "raster": w.raster,
            "raster_size": w.raster_size, "raster_grid": w.grid,
            "listener_stop_gradient": m.listener_stop_gradient,
        },
        settings_kw={
            "replicas": t.replicas, "sync_period": t.sync_period,
            "targets_per_replica": t.targets_per_replica,
            "lr_speaker": t.lr_speaker, "lr_listener": t.lr_listener,
            "optimizer_speaker": t.optimizer_speaker,
            "optimizer_listener": t.optimizer_listener,
            "baseline_mode": t.baseline_mode,
            "standardize_advantages": t.standardize_advantages,
            "temperature": t.temperature, "clip_norm": t.clip_norm,
        },
        eval_rounds=cfg.eval.rounds, workers=args.workers,
    )
    summary = sweep_summary(cells)
    for k, metrics in summary.items():
        cov = metrics["coverage"]
        b1 = metrics["bleu1"]
        print(f"K={k}: coverage {cov['mean']:.3f}±{cov['std']:.3f} "
              f"bleu1 {b1['mean']:.3f}±{b1['std']:.3f}")
    failures = [c for c in cells if "error" in c]
    for c in failures:
        print(f"K={c['k']} seed={c['seed']} failed: {c['error']}",
              file=sys.stderr)
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "a", encoding="utf-8") as fh:
            for c in cells:
                if "report" in c:
                    fh.write(json.dumps(c["report"].row(
                        run_id="sweep", seed=c["seed"])) + "\n")
                else:
                    fh.write(json.dumps(c) + "\n")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args.config)
    dataset = load_dataset(cfg.paths.dataset)
    trainer = _make_trainer(cfg, dataset)
    supervised_pretrain(trainer.speaker, dataset, steps=args.steps,
                        lr=args.lr, seed=cfg.train.seed)
    for rep in trainer.replicas[1:]:
        for name, t in rep.params.items():
            t.data = trainer.speaker.params[name].data.copy()
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    save_checkpoint(trainer.pack_state(), args.out)
    print(f"pretrained speaker for {args.steps} steps -> {args.out}")
    return EXIT_OK


def cmd_plotdata(args) -> int:
    rows = []
    with open(args.metrics, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    if not rows:
        print("metrics log is empty", file=sys.stderr)
        return EXIT_DATA
    available = [k for k in rows[0] if k not in ("run_id",)]
    fields = [f.strip() for f in args.fields.split(",") if f.strip()]
    for f in fields:
        if f not in rows[0]:
            print(f"unknown field {f!r}; available: {', '.join(available)}",
                  file=sys.stderr)
            return EXIT_USAGE
    columns = {f: np.array([float(r[f]) for r in rows]) for f in fields}
    if args.alpha < 1.0:
        columns = {f: ema(v, args.alpha) for f, v in columns.items()}
    print("\t".join(["step"] + fields))
    for i, r in enumerate(rows):
        vals = "\t".join(f"{columns[f][i]:.6g}" for f in fields)
        print(f"{r['step']}\t{vals}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lewisgame",
        description="Train and probe the cooperative description game.")
    parser.add_argument("--print-config", action="store_true",
                        help="print the full default config and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-world", help="generate and write a dataset file")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train",
                   choices=["train", "val", "test"])
    p.set_defaults(fn=cmd_gen_world)

    p = sub.add_parser("train", help="run the game training loop")
    p.add_argument("--config", default=None)
    p.add_argument("--resume", default=None,
                   help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--rounds", type=int, default=200)
    p.add_argument("--t-max", type=int, default=12)
    p.add_argument("--topn", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="append JSON-lines here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="train across a list of K values")
    p.add_argument("--config", default=None)
    p.add_argument("--k-list", default="4,8,16,32,64")
    p.add_argument("--seeds", default="2024,2025,2026")
    p.add_argument("--steps", type=int, default=0,
                   help="per-cell steps (0 = train.steps)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("pretrain",
                       help="supervised warm start on reference captions")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("plotdata", help="emit tab-separated metric columns")
    p.add_argument("--metrics", required=True)
    p.add_argument("--fields", default="joint_loss")
    p.add_argument("--alpha", type=float, default=1.0,
                   help="EMA smoothing factor; 1 = raw values")
    p.set_defaults(fn=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.print_config:
        print(RunConfig().to_text(), end="")
        return EXIT_OK
    if not getattr(args, "command", None):
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, CapacityError, SamplingError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
