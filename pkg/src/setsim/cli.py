"""Command-line driver: ``setsim <command> [flags]``.

Exit status: 0 success, 2 usage error, 3 invariant violation or bad
input data, 4 file-system error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import encoder as enc
from . import numcore as nc
from .attention import build_attention
from .checkpoint import CheckpointError
from .evaluate import (
    eval_scenes,
    export_overlay,
    match_scenes,
    correspondence_precision,
    probe_checkpoint,
    write_correspondences,
)
from .gradcheck import TOLERANCE, timed_suite
from .matching import Strategy, match
from .trainer import (
    TrainConfig,
    TrainingError,
    derive_seed,
    load_checkpoint,
    normalize_views,
    train,
)

EXIT_USAGE = 2
EXIT_INVARIANT = 3
EXIT_IO = 4


class InvariantViolation(RuntimeError):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--strategy", help="random | sort | hungarian | set2set | set2set_nn")
    p.add_argument("--delta", type=float)
    p.add_argument("--framework", choices=("moco", "simsiam"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="setsim", description="Contrastive pretraining over attention-selected feature sets.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run the training loop")
    _common(p)
    p.add_argument("--batch", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--geo", action="store_true", help="add the geometry-consistency term")
    p.add_argument("--sym", action="store_true", help="symmetrize the loss")

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    _common(p)
    p.add_argument("--seeds", type=int, default=50)

    for name, helptext in (("eval-matching", "score the five strategies on held-out scenes"),
                           ("probe", "linear probe on frozen pooled features"),
                           ("export-viz", "write attention/correspondence overlays")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--checkpoint", type=Path, help="training checkpoint (default: seed init)")
        p.add_argument("--scenes", type=int)
    return parser


def resolve_config(args) -> TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {}
    for flag, key in (("seed", "seed"), ("steps", "steps"), ("strategy", "strategy"),
                      ("delta", "delta"), ("framework", "framework"), ("batch", "batch"),
                      ("checkpoint_every", "checkpoint_every")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "geo", False):
        overrides["enable_geo"] = True
    if getattr(args, "sym", False):
        overrides["enable_sym"] = True
    return TrainConfig.from_mapping(overrides, base=config)


def _params(args, config: TrainConfig):
    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint).query
    return enc.init_params(config.seed)


def cmd_pretrain(args, config: TrainConfig) -> int:
    out = args.out or Path("run")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text(), encoding="utf-8")
    state, reports = train(config, out_dir=out)
    if reports:
        print(f"steps {state.step} final total {reports[-1].total!r}")
    else:
        print("steps 0: wrote initial checkpoint")
    return 0


def cmd_gradcheck(args, config: TrainConfig) -> int:
    result, seconds = timed_suite(config.seed, args.seeds)
    width = max(len(k) for k in result)
    for name, err in result.items():
        print(f"{name:<{width}}  max_rel_err {err:.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
    print(f"{len(result)} components, {args.seeds} seeds each, {seconds:.1f}s")
    bad = [k for k, v in result.items() if not v < TOLERANCE]
    if bad:
        raise InvariantViolation(f"gradient mismatch in {', '.join(bad)}")
    return 0


def cmd_eval_matching(args, config: TrainConfig) -> int:
    params = _params(args, config)
    scenes = eval_scenes(args.scenes or 200, config.seed, config.scene_size, config.view_size)
    rows = []
    for strategy in Strategy:
        corrs, mq, mk = match_scenes(params, scenes, strategy, config.delta, config.seed)
        rows.append((strategy.value, correspondence_precision(corrs, mq, mk), sum(c.pair_count for c in corrs)))
        if args.out:
            args.out.mkdir(parents=True, exist_ok=True)
            write_correspondences(args.out / f"corr_{strategy.value}.jsonl", corrs,
                                  [sc.scene_id for sc, _ in scenes])
    print(f"{'strategy':<12}  precision  pairs")
    for name, prec, pairs in rows:
        print(f"{name:<12}  {prec:.4f}     {pairs}")
    if args.out:
        with open(args.out / "matching.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("strategy", "precision", "pairs"))
            w.writerows((n, repr(p), c) for n, p, c in rows)
    return 0


def cmd_probe(args, config: TrainConfig) -> int:
    params = _params(args, config)
    acc = probe_checkpoint(params, args.scenes or 600, seed=config.seed, view_size=config.view_size)
    print(f"probe_accuracy {acc:.4f}")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "probe.txt").write_text(f"probe_accuracy {acc!r}\n", encoding="utf-8")
    return 0


def cmd_export_viz(args, config: TrainConfig) -> int:
    params = _params(args, config)
    out = args.out or Path("viz")
    out.mkdir(parents=True, exist_ok=True)
    scenes = eval_scenes(args.scenes or 4, config.seed, config.scene_size, config.view_size)
    for b, (scene, vp) in enumerate(scenes):
        pq = enc.encode(params, normalize_views(vp.view_q))
        pk = enc.encode(params, normalize_views(vp.view_k))
        att_q = build_attention(pq.z[0], config.delta)
        att_k = build_attention(pk.z[0], config.delta)
        corr = match(config.strategy, att_q.selected, att_k.selected,
                     rescaled_q=att_q.rescaled, rescaled_k=att_k.rescaled,
                     p_q=pq.p_set[0], p_k=pk.p_set[0], z_q=pq.z[0], z_k=pk.z[0],
                     rng_seed=derive_seed(config.seed, b))
        export_overlay(vp.view_q, att_q.rescaled, att_q.selected, corr, out / f"scene{b:03d}_q", scene.scene_id)
        export_overlay(vp.view_k, att_k.rescaled, att_k.selected, corr, out / f"scene{b:03d}_k", scene.scene_id)
    print(f"wrote {len(scenes)} overlay pairs to {out}")
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "gradcheck": cmd_gradcheck,
    "eval-matching": cmd_eval_matching,
    "probe": cmd_probe,
    "export-viz": cmd_export_viz,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except (InvariantViolation, TrainingError, CheckpointError, nc.ShapeError,
            ValueError, FloatingPointError) as exc:
        print(f"setsim {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"setsim {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
