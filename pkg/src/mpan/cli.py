"""Command-line entry points: gen-data, permset, train, eval, cluster-demo.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import TrainConfig, config_to_dict, load_config, override_seed
from .episodes import generate_synthetic, write_dataset
from .errors import ConfigError, MpanError
from .gclust import build_adjacency, gc_update, kmeans_lloyd, pool_from_backbone
from .pretext import generate_permutation_set, save_permset
from .train import (ModelBundle, eval_stage2, prepare_dataset, report_to_json,
                    train_stage1)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError (exit code 1)."""

    def error(self, message):
        raise ConfigError(f"{message}\n{self.format_usage()}")


def build_parser() -> _Parser:
    parser = _Parser(prog="mpan", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def common(p, need_out=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override every seed stream")
        p.add_argument("--out", required=need_out, help="output directory")

    common(sub.add_parser("gen-data", help="write a synthetic dataset directory"), need_out=True)
    p = sub.add_parser("permset", help="write the jigsaw permutation file")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="seed for the initial permutation")
    p.add_argument("--out", required=True, help="output text file")
    p.add_argument("--n", type=int, default=9, help="number of patch indices")
    p.add_argument("--count", type=int, default=64, help="permutations to select")
    common(sub.add_parser("train", help="stage-1 joint training"), need_out=True)
    p = sub.add_parser("eval", help="stage-2 episodic evaluation of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file from train")
    p.add_argument("--episodes", type=int, help="override eval.episodes")
    common(sub.add_parser("cluster-demo", help="adjacency stats and cluster histograms"))
    return parser


def _load_cfg(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        override_seed(cfg, args.seed)
    return cfg


def _cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    d = cfg.data
    ds = generate_synthetic(d.num_classes, d.per_class, d.image_size, d.seed,
                            channels=d.channels, noise=d.noise, standardize=d.standardize)
    write_dataset(ds, args.out)
    print(f"wrote {ds.images.shape[0]} images ({ds.num_classes} classes) to {args.out}")
    return 0


def _cmd_permset(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    seed = args.seed if args.seed is not None else cfg.pretext.perm_seed
    permset = generate_permutation_set(args.n, args.count, seed=seed)
    save_permset(args.out, permset)
    print(f"wrote {len(permset)} permutations of {args.n} to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config_resolved.json"), "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=1)

    def log(record):
        losses = " ".join(f"{k}={v:.3f}" for k, v in record.losses.items() if v is not None)
        print(f"epoch {record.epoch:3d} lr={record.learning_rate:g} {losses}")

    train_stage1(cfg, out_dir=args.out, log=log)
    print(f"checkpoint and metrics written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    report = eval_stage2(cfg, args.checkpoint, episodes=args.episodes)
    payload = json.dumps(report_to_json(report), indent=1)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "eval_report.json")
        with open(path, "w") as fh:
            fh.write(payload + "\n")
        print(f"wrote {path}")
    print(payload)
    return 0


def _cmd_cluster_demo(args) -> int:
    cfg = _load_cfg(args)
    ds = prepare_dataset(cfg)
    base_mask = np.isin(ds.labels, ds.split.base)
    ids = np.flatnonzero(base_mask)
    if 0 < cfg.gc.pool_cap < len(ids):
        ids = ids[:cfg.gc.pool_cap]
    bundle = ModelBundle(cfg, num_base_classes=len(ds.split.base))
    pool = pool_from_backbone(ds.images[ids], ids, bundle.backbone)
    adjacency = build_adjacency(pool)
    pseudo = gc_update(pool, adjacency, bundle.gc_head, cfg.gc.steps, lr=cfg.gc.lr,
                       lambda_bal=cfg.gc.lambda_bal, clip_norm=cfg.gc.clip_norm)
    km_labels, _, km_history = kmeans_lloyd(pool.features.data, cfg.gc.k,
                                            seed=cfg.data.seed)
    report = {
        "pool_size": int(len(ids)),
        "k": cfg.gc.k,
        "adjacency": {
            "exactly_symmetric": bool(np.array_equal(adjacency, adjacency.T)),
            "unit_diagonal": bool(np.all(np.diag(adjacency) == 1.0)),
            "min": float(adjacency.min()),
            "max": float(adjacency.max()),
            "mean": float(adjacency.mean()),
        },
        "gc": {
            "histogram": np.bincount(pseudo.labels, minlength=cfg.gc.k).tolist(),
            "steps": cfg.gc.steps,
            "lambda_bal": cfg.gc.lambda_bal,
        },
        "kmeans": {
            "histogram": np.bincount(km_labels, minlength=cfg.gc.k).tolist(),
            "iterations": len(km_history),
            "final_inertia": km_history[-1],
        },
    }
    payload = json.dumps(report, indent=1)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "cluster_demo.json")
        with open(path, "w") as fh:
            fh.write(payload + "\n")
        print(f"wrote {path}")
    print(payload)
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "permset": _cmd_permset,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "cluster-demo": _cmd_cluster_demo,
}


def cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except MpanError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
