"""Command-line entry point: ``mdnpose {gen-data,train,eval,predict,fuse-views}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .camera import find_camera, load_cameras, save_cameras
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (ChainOracle, NormStats, SynthSpec, companion_path, load_dataset, load_stats, normalize_x,
                   orthogonal_cameras, save_dataset, synth_generate, synth_multiview)
from .errors import ConfigError, DimensionError, MdnPoseError, ParseError, ProvenanceError
from .evaluation import evaluate, hypothesis_sets, multiview_fuse
from .train import TrainConfig, load_config, train

log = logging.getLogger("mdnpose")


# -- gen-data ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = SynthSpec(bones=args.bones, bone_lengths=args.bone_lengths, samples=args.samples,
                     reflection_mix=args.reflection_mix, seed=args.seed,
                     polar=tuple(args.polar), azimuth=tuple(args.azimuth))
    out = Path(args.out)
    if args.views:
        cams = orthogonal_cameras(args.views)
        world, views, oracle = synth_multiview(spec, cams)
        stem = out.name[:-4] if out.name.endswith(".csv") else out.name
        for cam, ds in zip(cams, views):
            save_dataset(ds, out.with_name(f"{stem}.cam{cam.id}.csv"))
        save_cameras(cams, companion_path(out, "cameras"))
        rows = [",".join(repr(float(v)) for v in pose) for pose in world]
        out.with_name(f"{stem}.world.csv").write_text("\n".join(rows) + "\n")
        paths = [out.with_name(f"{stem}.cam{c.id}.csv") for c in cams]
    else:
        ds, oracle = synth_generate(spec)
        save_dataset(ds, out)
        paths = [out]
    companion_path(out, "oracle").write_text(json.dumps(dict(oracle.to_dict(), spec=spec.to_dict()), indent=1) + "\n")
    for p in paths:
        print(p)
    return 0


# -- train ---------------------------------------------------------------------

_TRAIN_FLAGS = {
    "seed": int, "M": int, "lam": float, "gamma_elu": float, "lr": float, "decay_rate": float,
    "decay_steps": int, "batch_size": int, "epochs": int, "dropout": float, "max_norm": float,
    "occlusion_k": int, "width": int, "n_blocks": int, "val_fraction": float,
}


def _train_config(args) -> TrainConfig:
    overrides = {k: getattr(args, k) for k in _TRAIN_FLAGS}
    overrides.update(train_data=args.data, checkpoint=args.checkpoint, loss_log=args.loss_log)
    if args.alpha_clip:
        overrides["alpha_clip"] = args.alpha_clip
    if args.sigma_clip:
        overrides["sigma_clip"] = args.sigma_clip
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    config = _train_config(args)
    if args.print_config:
        print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        return 0
    if config.train_data is None:
        raise ConfigError("train_data: pass --data or set it in the config file")
    if config.checkpoint is None:
        raise ConfigError("checkpoint: pass --checkpoint or set it in the config file")
    if config.loss_log is None:
        config.loss_log = str(Path(config.checkpoint).with_suffix(".loss.csv"))
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(config, resume=resume,
                   on_epoch=lambda r, _: print(f"epoch {r.epoch}  train {r.train_loss:.5f}  "
                                               f"val {r.val_loss:.5f}  lr {r.lr:.6g}", flush=True))
    if not result.history and resume is None:
        # zero epochs still leaves an initialised checkpoint behind
        save_checkpoint(result.checkpoint(), config.checkpoint)
    return 0


# -- eval ----------------------------------------------------------------------


def _load_oracle(path) -> Optional[ChainOracle]:
    if path is None:
        return None
    return ChainOracle.from_dict(json.loads(Path(path).read_text()))


def _checked_stats(ckpt, stats_path) -> NormStats:
    if stats_path is not None:
        stats = load_stats(stats_path)
        if stats.fingerprint() != ckpt.stats.fingerprint():
            raise ProvenanceError(f"{stats_path}: normalization statistics differ from the ones the checkpoint "
                                  "was trained with")
    return ckpt.stats


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    ckpt.check_compatible(ds.n_joints)
    stats = _checked_stats(ckpt, args.stats)
    report = evaluate(ckpt.build_model(), stats, ds, _load_oracle(args.oracle), occlude_k=args.occlude_k,
                      seed=args.seed, tau=args.tau, pck_threshold=args.pck_threshold,
                      allow_scale=args.allow_scale)
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    print(report.to_table(), end="")
    return 0


# -- predict / fuse-views ------------------------------------------------------


def read_inputs(path, n_joints: int):
    """2D inputs from a dataset file or a plain CSV of ``2N`` floats per row.

    Returns ``(x, vis, cam_ids)``; plain files carry no camera ids.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if text.startswith("#mdnpose"):
        ds = load_dataset(path)
        if ds.n_joints != n_joints:
            raise DimensionError(f"{path}: N={ds.n_joints}, checkpoint expects N={n_joints}")
        return ds.x, ds.vis, ds.cam
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 2 * n_joints:
            raise ParseError(f"expected {2 * n_joints} values, got {len(parts)}", lineno)
        try:
            row = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"malformed number in {line!r}", lineno) from None
        if not np.all(np.isfinite(row)):
            raise ParseError("non-finite value", lineno)
        rows.append(row)
    x = np.asarray(rows, dtype=np.float64).reshape(-1, 2 * n_joints)
    return x, np.ones((len(x), n_joints), dtype=bool), None


def _predict_sets(ckpt, model, x, vis):
    pred = model.predict(normalize_x(x, ckpt.stats, vis))
    return hypothesis_sets(pred, ckpt.stats)


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    x, vis, _ = read_inputs(args.input, ckpt.arch.n_joints)
    sets = _predict_sets(ckpt, ckpt.build_model(), x, vis)
    n = ckpt.arch.n_joints
    header = ["sample", "rank", "kernel", "alpha", "sigma"] + [f"y{j}_{a}" for j in range(n) for a in "xyz"]
    lines = [",".join(header)]
    for i, hs in enumerate(sets):
        # stable sort keeps the lower kernel index first among equal alphas
        for rank, k in enumerate(np.argsort(-hs.alphas, kind="stable")):
            vals = [repr(float(hs.alphas[k])), repr(float(hs.sigmas[k]))] + [repr(float(v)) for v in hs.poses[k]]
            lines.append(",".join([str(i), str(rank), str(int(k))] + vals))
    _write(args.out, "\n".join(lines) + "\n")
    return 0


def cmd_fuse_views(args) -> int:
    if len(args.inputs) < 2:
        raise ConfigError("fuse-views needs at least 2 per-camera input files; use predict for a single view")
    ckpt = load_checkpoint(args.checkpoint)
    cams_all = load_cameras(args.cameras)
    model = ckpt.build_model()
    ids = args.camera_ids
    if ids is not None and len(ids) != len(args.inputs):
        raise ConfigError(f"--camera-ids lists {len(ids)} ids for {len(args.inputs)} input files")
    per_view, cams = [], []
    for v, path in enumerate(args.inputs):
        x, vis, file_ids = read_inputs(path, ckpt.arch.n_joints)
        if file_ids is not None:
            uniq = np.unique(file_ids)
            if len(uniq) != 1:
                raise ConfigError(f"{path}: rows carry several camera ids {uniq.tolist()}")
            cam_id = int(uniq[0])
            if ids is not None and ids[v] != cam_id:
                raise ConfigError(f"{path}: file says camera {cam_id}, --camera-ids says {ids[v]}")
        elif ids is not None:
            cam_id = ids[v]
        else:
            cam_id = cams_all[v].id if v < len(cams_all) else v
        cam = find_camera(cams_all, cam_id)
        if cam is None:
            raise ConfigError(f"{path}: camera id {cam_id} is not in {args.cameras}")
        if per_view and len(x) != len(per_view[0]):
            raise ConfigError(f"{path}: {len(x)} rows, expected {len(per_view[0])}")
        per_view.append(_predict_sets(ckpt, model, x, vis))
        cams.append(cam)
    fused = [multiview_fuse([sets[i] for sets in per_view], cams) for i in range(len(per_view[0]))]
    n = ckpt.arch.n_joints
    lines = [",".join(f"y{j}_{a}" for j in range(n) for a in "xyz")]
    lines += [",".join(repr(float(v)) for v in pose) for pose in fused]
    _write(args.out, "\n".join(lines) + "\n")
    return 0


def _write(path, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdnpose", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic chain dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--bones", type=int, default=4)
    g.add_argument("--bone-lengths", type=float, nargs="+")
    g.add_argument("--samples", type=int, default=10_000)
    g.add_argument("--reflection-mix", type=float, default=0.5)
    g.add_argument("--polar", type=float, nargs=2, default=SynthSpec.polar)
    g.add_argument("--azimuth", type=float, nargs=2, default=SynthSpec.azimuth)
    g.add_argument("--views", type=int, default=0, help="also write this many orthogonal camera views")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="JSON config; flags override its values")
    t.add_argument("--data")
    t.add_argument("--checkpoint")
    t.add_argument("--loss-log")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    for name, kind in _TRAIN_FLAGS.items():
        flag = "--lambda" if name == "lam" else "--" + name.replace("_", "-")
        t.add_argument(flag, dest=name, type=kind)
    t.add_argument("--alpha-clip", type=float, nargs=2)
    t.add_argument("--sigma-clip", type=float, nargs=2)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--oracle", help="oracle JSON written by gen-data; enables mode coverage")
    e.add_argument("--stats", help="statistics file to verify against the checkpoint")
    e.add_argument("--occlude-k", type=int, nargs="*", default=[], help="missing-joint counts to report")
    e.add_argument("--tau", type=float)
    e.add_argument("--pck-threshold", type=float)
    e.add_argument("--allow-scale", action="store_true", help="fit scale in the aligned protocol")
    e.add_argument("--json", help="also write the report as JSON")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="write M hypotheses per 2D input row")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_predict)

    f = sub.add_parser("fuse-views", help="fuse per-camera predictions into world-frame poses")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--inputs", nargs="+", required=True)
    f.add_argument("--cameras", required=True)
    f.add_argument("--camera-ids", type=int, nargs="+")
    f.add_argument("--out")
    f.set_defaults(func=cmd_fuse_views)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except MdnPoseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
