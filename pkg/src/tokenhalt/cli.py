"""Operator surface: train / eval / profile / viz-halting.

Every command takes ``--config`` (sectioned key=value file, see
docs/config.schema.json) and writes into the config's output directory
(--out overrides). Exit codes: 0 success, 2 configuration error,
3 runtime failure. Each run drops a resolved-config snapshot sufficient
to reproduce it exactly.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .halting import HaltingError
from .model import Model
from .rng import SeededRng
from .training import (METRICS_COLUMNS, TrainingError, evaluate, train)
from .video import VideoError, synth_dataset

CONFIG_EXIT = 2
RUNTIME_EXIT = 3

FRONTIER_COLUMNS = ["beta", "R", "accuracy", "gflops_per_clip", "mean_halt_depth"]
RESULTS_COLUMNS = ["index", "label", "prediction", "gflops_per_clip", "mean_halt_depth"]


def _write_csv(path, columns, rows):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _load_config(args):
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config: no such file: {path}")
    rc = RunConfig.from_file(path)
    if args.seed is not None:
        rc.override("run", "seed", args.seed)
    if args.out is not None:
        rc.override("run", "out_dir", args.out)
    return rc


def _prepare_out(rc):
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.ini").write_text(rc.to_ini())
    return out


def _build_model(rc, rng):
    return Model.build(rc.model_config(), rc.halting_config(), rc.glimpse_config(),
                       rng=rng, dtype=rc.dtype)


def _load_model(rc, checkpoint):
    if checkpoint is None:
        raise ConfigError("config: this command needs --checkpoint")
    if not Path(checkpoint).exists():
        raise ConfigError(f"config: no such checkpoint: {checkpoint}")
    return Model.from_checkpoint(checkpoint, rc.model_config(), rc.halting_config(),
                                 rc.glimpse_config(), dtype=rc.dtype)


def _eval_dataset(rc, rng):
    return synth_dataset(rc.dataset_spec("eval"), rng.child("dataset:eval"))


def cmd_train(args):
    rc = _load_config(args)
    t = rc._section("training")
    if t["base_epochs"] + t["epochs"] < 1:
        raise ConfigError("config: training.base_epochs + training.epochs must be >= 1")
    out = _prepare_out(rc)
    rng = SeededRng(rc.seed)
    clips = synth_dataset(rc.dataset_spec("train"), rng.child("dataset:train"))
    model = _build_model(rc, rng.child("init"))
    rows = []

    def log(row):
        print(f"[{row.stage}] epoch {row.epoch}: task={row.task_loss:.4f} "
              f"ponder={row.ponder_loss:.4f} motion={row.motion_loss:.4f} "
              f"acc={row.train_acc:.3f} gflops={row.gflops_per_clip:.6f}")

    try:
        for stage in ("base", "halting"):
            tcfg = rc.train_config(stage)
            if tcfg.epochs > 0:
                rows += train(model, clips, tcfg, rc.loss_config(),
                              rng=rng.child(f"train:{stage}"), log=log)
    finally:
        if rows:
            _write_csv(out / "metrics.csv", METRICS_COLUMNS, [r.values() for r in rows])
            model.save(out / "checkpoint.bin")
    print(f"wrote {out / 'checkpoint.bin'}")
    return 0


def cmd_eval(args):
    rc = _load_config(args)
    out = _prepare_out(rc)
    model = _load_model(rc, args.checkpoint)
    clips = _eval_dataset(rc, SeededRng(rc.seed))
    result = evaluate(model, clips)
    print(f"top1_accuracy={result.accuracy:.4f}")
    print(f"mean_gflops_per_clip={result.mean_gflops:.6f}")
    print(f"mean_halt_depth={result.mean_halt_depth:.4f}")
    _write_csv(out / "results.csv", RESULTS_COLUMNS,
               [[s["index"], s["label"], s["prediction"], s["gflops_per_clip"],
                 s["mean_halt_depth"]] for s in result.per_sample])
    return 0


def _parse_sweep(text, rc):
    points = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            beta_s, r_s = item.split(":")
            beta = None if beta_s.strip().lower() == "off" else float(beta_s)
            ratio = float(r_s)
        except ValueError:
            raise ConfigError(f"config: bad sweep point {item!r}; want beta:R or off:R") from None
        if not 0.0 < ratio <= 1.0:
            raise ConfigError(f"config: sweep R must be in (0, 1], got {ratio}")
        if ratio != 1.0 and rc.glimpse_config() is None:
            raise ConfigError("config: sweep R < 1 requires glimpser.enabled = true")
        points.append((beta, ratio))
    if not points:
        raise ConfigError("config: empty sweep")
    return points


def cmd_profile(args):
    rc = _load_config(args)
    points = _parse_sweep(args.sweep, rc)
    out = _prepare_out(rc)
    model = _load_model(rc, args.checkpoint)
    clips = _eval_dataset(rc, SeededRng(rc.seed))
    rows = []
    for beta, ratio in points:
        if beta is None:
            hcfg = replace(model.hcfg, enabled=False)
        else:
            hcfg = replace(model.hcfg, beta=beta, enabled=True)
        ratio_arg = ratio if rc.glimpse_config() is not None else None
        result = evaluate(model, clips, hcfg=hcfg, glimpse_ratio=ratio_arg)
        beta_col = "off" if beta is None else beta
        rows.append([beta_col, ratio, result.accuracy, result.mean_gflops,
                     result.mean_halt_depth])
        print(f"beta={beta_col} R={ratio} acc={result.accuracy:.4f} "
              f"gflops={result.mean_gflops:.6f} depth={result.mean_halt_depth:.4f}")
    _write_csv(out / "frontier.csv", FRONTIER_COLUMNS, rows)
    return 0


def cmd_viz_halting(args):
    from .viz import export_clip

    rc = _load_config(args)
    out = _prepare_out(rc)
    model = _load_model(rc, args.checkpoint)
    clips = _eval_dataset(rc, SeededRng(rc.seed))
    try:
        selected = [int(s) for s in args.clips.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"config: bad clip selector {args.clips!r}") from None
    if not selected:
        raise ConfigError("config: empty clip selector")
    for idx in selected:
        if not 0 <= idx < len(clips):
            raise TrainingError(f"clip selector {idx} out of range [0, {len(clips)})")
        output = model.forward_clips([clips[idx]], mode="gather")
        grid = (model.cfg.frames, model.cfg.height // model.cfg.patch,
                model.cfg.width // model.cfg.patch)
        d = export_clip(out / "viz", idx, output.halt_map(0), grid,
                        model.cfg.patch, model.cfg.layers)
        print(f"wrote {d}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="tokenhalt",
                                description="adaptive token-halting video transformer")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, extra in (
        ("train", cmd_train, ()),
        ("eval", cmd_eval, ("checkpoint",)),
        ("profile", cmd_profile, ("checkpoint", "sweep")),
        ("viz-halting", cmd_viz_halting, ("checkpoint", "clips")),
    ):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="run config file")
        sp.add_argument("--out", default=None, help="override run.out_dir")
        sp.add_argument("--seed", type=int, default=None, help="override run.seed")
        if "checkpoint" in extra:
            sp.add_argument("--checkpoint", default=None, help="checkpoint file")
        if "sweep" in extra:
            sp.add_argument("--sweep", required=True,
                            help="comma list of beta:R points; beta 'off' disables halting")
        if "clips" in extra:
            sp.add_argument("--clips", required=True, help="comma list of clip indices")
        sp.set_defaults(fn=fn)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(e, file=sys.stderr)
        return CONFIG_EXIT
    except (TrainingError, CheckpointError, HaltingError, VideoError, ValueError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
