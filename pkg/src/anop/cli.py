"""Command-line experiment runner.

Exit codes: 0 ok, 2 configuration error, 3 runtime failure,
4 acceptance-gate failure (compare --assert).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import checkpoint as CK
from . import encoder as E
from . import evaluation as EV
from . import runner as R
from . import training as TR
from . import world as W
from .config import ConfigError, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_GATE = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anop",
        description="Anchor-guided prompt learning lab on a synthetic "
                    "dual-encoder world")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", help="output directory (or ANOP_OUT)")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE", help="config override (repeatable)")
        return p

    common(sub.add_parser("run", help="full pipeline: baseline and dynamic-anchor rows"))
    common(sub.add_parser("pretrain", help="contrastive pretraining only"))

    p = common(sub.add_parser("train-anchor", help="stage 1: anchor optimization"))
    p.add_argument("--stack", help="pretrained stack checkpoint (default: <out>/checkpoints/stack.anop)")

    p = common(sub.add_parser("adapt", help="stage 2: soft tokens + position matrix"))
    p.add_argument("--stack", help="pretrained stack checkpoint")
    p.add_argument("--state", help="stage-1 state checkpoint (default: <out>/checkpoints/stage1.anop)")

    common(sub.add_parser("one-stage", help="alternating one-stage training"))

    p = common(sub.add_parser("eval", help="evaluate a trained state"))
    p.add_argument("--stack", help="pretrained stack checkpoint")
    p.add_argument("--state", required=True, help="trained state checkpoint")
    p.add_argument("--shift", action="append", default=[], metavar="KIND:FACTOR",
                   help="also evaluate on a shifted world (repeatable); "
                        f"kinds: {', '.join(W.SHIFT_KINDS)}")

    p = common(sub.add_parser("ablate", help="single-axis ablation grid"))
    p.add_argument("--axis", required=True, choices=sorted(EV.ABLATION_AXES))
    p.add_argument("--values", help="comma-separated subset of the axis values")
    p.add_argument("--seeds", type=int, help="number of seeds (0..n-1)")

    p = common(sub.add_parser("compare", help="three-method comparison table"))
    p.add_argument("--seeds", type=int, help="number of seeds (0..n-1)")
    p.add_argument("--assert", dest="assert_gates", action="store_true",
                   help="exit 4 unless the directional gates hold")

    common(sub.add_parser("dump-world", help="print the synthetic world summary"))
    return parser


def parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must be KEY=VALUE, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    return out


def resolve_cli_config(args):
    overrides = parse_overrides(args.override)
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    out = args.out or os.environ.get("ANOP_OUT")
    config = load_config(args.config, overrides, out_override=out)
    return config, Path(config["run.out"])


def _seed_range(args, config):
    if getattr(args, "seeds", None):
        return tuple(range(args.seeds))
    return config["run.seeds"]


def _stack_path(args, out_dir):
    explicit = getattr(args, "stack", None)
    return Path(explicit) if explicit else out_dir / "checkpoints" / "stack.anop"


def _load_or_pretrain_stack(args, config, out_dir):
    path = _stack_path(args, out_dir)
    if path.exists():
        return CK.load_stack(path)
    return R.prepare(config, out_dir).stack


def cmd_run(args) -> int:
    config, out_dir = resolve_cli_config(args)
    R.pipeline_run(config, out_dir)
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config, out_dir = resolve_cli_config(args)
    R.prepare(config, out_dir)
    print(f"stack checkpoint: {out_dir / 'checkpoints' / 'stack.anop'}")
    return EXIT_OK


def cmd_train_anchor(args) -> int:
    config, out_dir = resolve_cli_config(args)
    ctx_stack = _load_or_pretrain_stack(args, config, out_dir)
    world = W.generate_world(seed=config["run.seed"], **config.world_kwargs())
    split = W.base_novel_split(world, config["world.base_fraction"],
                               seed=config["run.seed"])
    cfg = config.trainer_config()
    seed = R.run_seed_value(config["run.seed"], config["run.seeds"][0])
    state = TR.init_train_state(cfg, ctx_stack.dims.d_tok, seed)
    trace = TR.train_stage1_anchor(state, world, ctx_stack, cfg, split.base_classes)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)
    path = out_dir / "checkpoints" / "stage1.anop"
    CK.save_state(state, path, config_digest=config.digest(),
                  world_seed=config["run.seed"])
    print(f"anchor MSE {trace[0]:.4f} -> {trace[-1]:.4f}; state: {path}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    config, out_dir = resolve_cli_config(args)
    stack = _load_or_pretrain_stack(args, config, out_dir)
    state_path = Path(args.state) if args.state else out_dir / "checkpoints" / "stage1.anop"
    state = CK.load_state(state_path)
    world = W.generate_world(seed=config["run.seed"], **config.world_kwargs())
    split = W.base_novel_split(world, config["world.base_fraction"],
                               seed=config["run.seed"])
    cfg = config.trainer_config()
    shots = W.sample_dataset(world, split.base_classes, config["world.shots"],
                             seed=int(R.derive_rng(state.seed, "shots").integers(2**31)))
    trace = TR.train_stage2_adapt(state, shots, world, stack, cfg)
    path = out_dir / "checkpoints" / "stage2.anop"
    CK.save_state(state, path, config_digest=config.digest(),
                  world_seed=config["run.seed"])
    print(f"final losses ce {trace[-1].ce:.4f} kd {trace[-1].kd:.4f}; state: {path}")
    return EXIT_OK


def cmd_one_stage(args) -> int:
    config, out_dir = resolve_cli_config(args)
    ctx = R.prepare(config, out_dir)
    cfg = config.trainer_config()
    seed = R.run_seed_value(config["run.seed"], config["run.seeds"][0])
    state = TR.init_train_state(cfg, ctx.stack.dims.d_tok, seed)
    shots = W.sample_dataset(ctx.world, ctx.split.base_classes, config["world.shots"],
                             seed=int(R.derive_rng(seed, "shots").integers(2**31)))
    trace = TR.train_one_stage(state, shots, ctx.world, ctx.stack, cfg)
    path = out_dir / "checkpoints" / "one_stage.anop"
    CK.save_state(state, path, config_digest=config.digest(),
                  world_seed=config["run.seed"])
    print(f"final ce {trace[-1].ce:.4f} (kd eliminated); state: {path}")
    return EXIT_OK


def _parse_shift(spec: str) -> W.ShiftSpec:
    kind, _, factor = spec.partition(":")
    if not factor:
        raise ConfigError(f"--shift expects KIND:FACTOR, got {spec!r}")
    return W.ShiftSpec(kind=kind.strip(), factor=float(factor))


def cmd_eval(args) -> int:
    config, out_dir = resolve_cli_config(args)
    stack = _load_or_pretrain_stack(args, config, out_dir)
    state = CK.load_state(Path(args.state))
    world = W.generate_world(seed=config["run.seed"], **config.world_kwargs())
    split = W.base_novel_split(world, config["world.base_fraction"],
                               seed=config["run.seed"])
    cfg = config.trainer_config()
    ctx = R.RunContext(config=config, out_dir=out_dir, world=world,
                       split=split, stack=stack)
    record = EV.evaluate_base_to_novel(state, split, world, stack, cfg,
                                       n_eval=config["eval.samples_per_class"],
                                       seed=state.seed,
                                       ensemble=config["eval.ensemble"],
                                       config_digest=config.digest())
    ctx.results.append(R.RunResult(
        run_id="eval", method="eval", paradigm=config["train.paradigm"],
        axis="eval", value="source", seed=state.seed, record=record,
        ce_final=0.0, kd_final=0.0, state=state,
        runtime_seconds=record.runtime_seconds))
    print(f"base {record.base_acc:.2f} novel {record.novel_acc:.2f} hm {record.hm:.2f}")
    for spec in args.shift:
        shift = _parse_shift(spec)
        target = W.shift_world(world, shift, seed=config["run.seed"])
        rec = EV.evaluate_cross_world(state, world, [target], stack, cfg, split,
                                      n_eval=config["eval.samples_per_class"],
                                      seed=state.seed,
                                      config_digest=config.digest())[0]
        ctx.results.append(R.RunResult(
            run_id=f"eval-{shift.kind}-{shift.factor}", method="eval",
            paradigm=config["train.paradigm"], axis="shift",
            value=f"{shift.kind}:{shift.factor}", seed=state.seed, record=rec,
            ce_final=0.0, kd_final=0.0, state=state,
            runtime_seconds=rec.runtime_seconds))
        print(f"  shift {shift.kind} x{shift.factor}: base {rec.base_acc:.2f} "
              f"novel {rec.novel_acc:.2f} hm {rec.hm:.2f}")
    (out_dir / "figures").mkdir(parents=True, exist_ok=True)
    R.write_metrics_csv(ctx)
    R.dump_position_matrix(ctx.results[0], ctx)
    R.write_manifest(ctx)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config, out_dir = resolve_cli_config(args)
    values = None
    if args.values:
        axis_values = EV.ABLATION_AXES[args.axis]
        lookup = {str(v): v for v in axis_values}
        values = []
        for part in args.values.split(","):
            part = part.strip()
            if part not in lookup:
                raise ConfigError(f"value {part!r} not valid for axis {args.axis}")
            values.append(lookup[part])
    R.pipeline_ablate(config, out_dir, args.axis, values=values,
                      seeds=_seed_range(args, config))
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    config, out_dir = resolve_cli_config(args)
    _, passed = R.pipeline_compare(config, out_dir,
                                   seeds=_seed_range(args, config),
                                   assert_gates=args.assert_gates)
    print(f"artifacts in {out_dir}")
    if args.assert_gates and not passed:
        return EXIT_GATE
    return EXIT_OK


def cmd_dump_world(args) -> int:
    # no artifacts are written, so the output directory is not required
    args.out = args.out or os.environ.get("ANOP_OUT") or "."
    config, _ = resolve_cli_config(args)
    print(R.world_summary(config))
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "pretrain": cmd_pretrain,
    "train-anchor": cmd_train_anchor,
    "adapt": cmd_adapt,
    "one-stage": cmd_one_stage,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "compare": cmd_compare,
    "dump-world": cmd_dump_world,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (E.PretrainError, TR.TrainingDiverged, CK.CheckpointError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
