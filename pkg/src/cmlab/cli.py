"""Umbrella command line: gen-data, vse-select, pretrain, probe, simmap, report.

Every subcommand writes machine-readable JSON/CSV. Exit codes: 0 on success,
2 on usage or validation failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluate, pretrain, worldgen
from .scene import MaskStore, SceneError, load_scene_index
from .vse import run_vse


def _write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _cmd_gen_data(args) -> int:
    if args.config:
        cfg = worldgen.SyntheticWorldConfig(**_load_json(args.config))
    else:
        cfg = worldgen.SyntheticWorldConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    world = worldgen.generate_world(cfg, args.out)
    print(f"wrote world with {len(world.scene_names)} scene(s) to {world.root}")
    return 0


def _cmd_vse_select(args) -> int:
    index = load_scene_index(args.scene)
    store = MaskStore(args.masks)
    report = run_vse(index, store)
    Path(args.out).write_text(report.to_json(), encoding="utf-8")
    n_sel = len(report.selected_frame_ids())
    print(f"{index.scene_id}: selected {n_sel} sweep(s) over {len(report.intervals)} interval(s)")
    return 0


def _cmd_pretrain(args) -> int:
    if args.config:
        raw = _load_json(args.config)
        raw["hidden"] = tuple(raw.get("hidden", (32,)))
        cfg = pretrain.TrainConfig(**raw)
    else:
        cfg = pretrain.reference_train_config()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    result = pretrain.train(args.world, cfg, method=args.method, use_vse=args.vse == "on")
    pretrain.save_checkpoint(result.checkpoint, args.out)
    curve_path = args.curve or f"{args.out}.curve.csv"
    pretrain.write_loss_curve(curve_path, result.loss_curve)
    final = result.loss_curve[-1]
    print(f"trained {len(result.sample_frames)} samples, final loss {final[1]:.6f} -> {args.out}")
    return 0


def _cmd_probe(args) -> int:
    checkpoint = pretrain.load_checkpoint(args.ckpt)
    result = evaluate.linear_probe(checkpoint, args.world, epochs=args.epochs, lr=args.lr)
    _write_json(args.out, result.to_dict())
    print(f"probe accuracy {result.overall_accuracy:.4f} -> {args.out}")
    return 0


def _write_grid_csv(path, grid: np.ndarray) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in np.atleast_2d(grid)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_heatmap_ppm(path, grid: np.ndarray, vmin: float = -1.0, vmax: float = 1.0) -> None:
    """Blue-to-red portable pixmap of a similarity grid."""
    t = np.clip((np.atleast_2d(grid) - vmin) / (vmax - vmin), 0.0, 1.0)
    r = np.round(255 * t).astype(np.uint8)
    b = np.round(255 * (1.0 - t)).astype(np.uint8)
    g = np.round(255 * (1.0 - np.abs(2 * t - 1.0))).astype(np.uint8)
    h, w = t.shape
    header = f"P6 {w} {h} 255\n".encode("ascii")
    Path(path).write_bytes(header + np.stack([r, g, b], axis=-1).tobytes())


def _cmd_simmap(args) -> int:
    checkpoint = pretrain.load_checkpoint(args.ckpt)
    smap = evaluate.similarity_map(checkpoint, args.world, args.frame, args.query)
    out = Path(args.out)
    lines = ["point_index,similarity"]
    lines += [f"{i},{float(v)!r}" for i, v in enumerate(smap.point_sims)]
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    for cid, grid in sorted(smap.pixel_sims.items()):
        _write_grid_csv(out.with_suffix(f".{cid}.csv"), grid)
        if args.ppm:
            _write_heatmap_ppm(out.with_suffix(f".{cid}.ppm"), grid)
    print(f"query {smap.query_index} in {smap.scene_name}/{smap.frame_id} -> {out}")
    return 0


def _cmd_report(args) -> int:
    ck_a = pretrain.load_checkpoint(args.ckpt_a)
    ck_b = pretrain.load_checkpoint(args.ckpt_b)

    def side(ck) -> dict:
        probe = evaluate.linear_probe(ck, args.world)
        cons = evaluate.consistency_report(ck, args.world)
        return {
            "method": ck.config.get("method"),
            "use_vse": ck.config.get("use_vse"),
            "probe_accuracy": probe.overall_accuracy,
            "consistency": cons.to_dict(),
            "checkpoint_hash": ck.config_hash(),
        }

    a, b = side(ck_a), side(ck_b)
    payload = {
        "a": a,
        "b": b,
        "deltas": {
            "probe_accuracy": a["probe_accuracy"] - b["probe_accuracy"],
            "consistency_gap": a["consistency"]["gap"] - b["consistency"]["gap"],
        },
    }
    _write_json(args.out, payload)
    print(
        f"probe a={a['probe_accuracy']:.4f} b={b['probe_accuracy']:.4f} "
        f"gap a={a['consistency']['gap']:.4f} b={b['consistency']['gap']:.4f} -> {args.out}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmlab",
        description="Conflict-aware LiDAR-camera contrastive pretraining laboratory",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate a synthetic world")
    p.add_argument("--config", help="world config JSON (defaults to the reference world)")
    p.add_argument("--out", required=True, help="output world directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("vse-select", help="select distinct, well-synchronized sweeps")
    p.add_argument("--scene", required=True, help="scene index JSON")
    p.add_argument("--masks", required=True, help="directory mask paths resolve against")
    p.add_argument("--out", required=True, help="selection report JSON")
    p.set_defaults(func=_cmd_vse_select)

    p = sub.add_parser("pretrain", help="run contrastive pretraining")
    p.add_argument("--world", required=True, help="world directory from gen-data")
    p.add_argument("--method", required=True, choices=["nce", "conflict", "conflict_aware"])
    p.add_argument("--vse", default="off", choices=["on", "off"])
    p.add_argument("--config", help="train config JSON (defaults to the reference recipe)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="checkpoint output path (.cmpt)")
    p.add_argument("--curve", help="loss curve CSV path (default: <out>.curve.csv)")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("probe", help="linear probing of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=evaluate.PROBE_EPOCHS)
    p.add_argument("--lr", type=float, default=evaluate.PROBE_LR)
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("simmap", help="cosine similarity maps from a query point")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--frame", required=True, help="LiDAR frame id, optionally scene/frame")
    p.add_argument("--query", type=int, required=True, help="query point index")
    p.add_argument("--out", required=True, help="point similarity CSV; grids go beside it")
    p.add_argument("--ppm", action="store_true", help="also write portable-pixmap heatmaps")
    p.set_defaults(func=_cmd_simmap)

    p = sub.add_parser("report", help="compare two checkpoints on one world")
    p.add_argument("--ckpt-a", required=True, dest="ckpt_a")
    p.add_argument("--ckpt-b", required=True, dest="ckpt_b")
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def cli_dispatch(argv) -> int:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except (SceneError, ValueError, OSError, pretrain.TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
