"""Command-line interface: ``meshdeform <command> [options]``.

Options can also come from an INI file passed with ``--config``; each
command reads the section of the same name (plus ``[global]``), and flags
given on the command line take precedence.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def _flag(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _out_dir(args, default: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("MESHDEFORM_OUT_DIR")
    if root:
        return Path(root) / default
    raise UsageError("--out is required (or set MESHDEFORM_OUT_DIR)")


def _record_config(args, path: Path) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .synthetic import SyntheticConfig, gen_synthetic_dataset, save_dataset

    if args.val_scenes is None:
        args.val_scenes = max(1, round(args.scenes / 7)) if args.scenes > 1 else 0
    if args.val_scenes > 0 and args.val_scenes >= args.scenes:
        raise UsageError("--val-scenes must be smaller than --scenes")
    cfg = SyntheticConfig(dims=args.dims, noise_sigma=args.noise)
    scenes = gen_synthetic_dataset(args.scenes, args.structures, args.dims, args.seed, cfg)
    out = _out_dir(args, "data")
    n_train = args.scenes - args.val_scenes
    manifest = {
        "seed": args.seed,
        "n_structures": args.structures,
        "synthetic": asdict(cfg),
        "split": {"train": list(range(n_train)), "val": list(range(n_train, args.scenes))},
    }
    save_dataset(out, scenes, manifest)
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def _split(data_dir, val_override=None):
    from .synthetic import load_dataset

    scenes, manifest = load_dataset(data_dir)
    if val_override is not None:
        n_train = len(scenes) - val_override
        split = {"train": list(range(n_train)), "val": list(range(n_train, len(scenes)))}
    else:
        split = manifest.get("split") or {"train": list(range(len(scenes))), "val": []}
    return [scenes[i] for i in split["train"]], [scenes[i] for i in split["val"]]


def _model_configs(args):
    from .deformer import DeformerConfig
    from .encoder import EncoderConfig

    enc = EncoderConfig(levels=len(args.filters), filters_per_level=args.filters, dropout_rate=args.dropout)
    dfm = DeformerConfig(block_feature_dims=args.block_dims, displacement_scale=args.displacement_scale)
    return enc, dfm


def _train_config(args):
    from .train import TrainConfig

    return TrainConfig(lr0=args.lr, epochs=args.epochs, seed=args.seed,
                       subdivisions=args.subdivisions, augment=args.augment)


def cmd_train(args) -> int:
    from .losses import LossWeights
    from .train import train

    tr, va = _split(args.data, args.val_scenes)
    enc, dfm = _model_configs(args)
    out = _out_dir(args, "run")
    out.mkdir(parents=True, exist_ok=True)
    _record_config(args, out / "resolved_config.json")
    weights = LossWeights(*args.weights)

    def progress(rec):
        if not args.quiet:
            print(f"epoch {rec['epoch']:4d}  loss {rec['loss_total']:.4f}  point {rec['loss_point']:.4f}  "
                  f"val {rec['val_point']:.4f}  lr {rec['lr']:.2e}", flush=True)

    train(tr, va, _train_config(args), weights=weights, out_dir=out, enc_cfg=enc, def_cfg=dfm, progress=progress)
    print(f"checkpoint: {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .deformer import predict
    from .mesh import write_obj
    from .train import load_model
    from .volume import read_rvol, write_rvol

    model, templates, _, _ = load_model(args.checkpoint)
    image = read_rvol(args.image)
    blocks, occ = predict(model, image, templates)
    out = _out_dir(args, "pred")
    out.mkdir(parents=True, exist_ok=True)
    for b, meshes in enumerate(blocks):
        for m in meshes:
            write_obj(out / f"block{b}_s{m.structure_id}.obj", m)
    for m in blocks[-1]:
        write_obj(out / f"pred_s{m.structure_id}.obj", m)
    write_rvol(out / "occupancy.rvol", occ, "f32")
    print(f"wrote predictions to {out}")
    return EXIT_OK


def _meshes(directory: Path, prefix: str):
    from .mesh import read_obj

    paths = sorted(directory.glob(f"{prefix}_s*.obj"), key=lambda p: int(p.stem.rsplit("_s", 1)[1]))
    if not paths:
        raise FileNotFoundError(f"no {prefix}_s<k>.obj files in {directory}")
    return [read_obj(p) for p in paths]


def cmd_evaluate(args) -> int:
    from .metrics import dice, evaluate_meshes, jaccard
    from .volume import read_rvol

    if args.pred_mask:
        if not args.truth_mask:
            raise UsageError("--pred-mask needs --truth-mask")
        p, g = read_rvol(args.pred_mask), read_rvol(args.truth_mask)
        result = {"dice": dice(p, g), "jaccard": jaccard(p, g)}
        text = json.dumps(result, indent=2, sort_keys=True)
    else:
        if not (args.pred and args.scene):
            raise UsageError("evaluate needs --pred and --scene (or --pred-mask and --truth-mask)")
        scene = Path(args.scene)
        pred = _meshes(Path(args.pred), "pred")
        truth = _meshes(scene, "gt")
        if len(pred) != len(truth):
            raise ValueError(f"{len(pred)} predicted structures but {len(truth)} ground-truth structures")
        ref = read_rvol(scene / "image.rvol")
        masks = [read_rvol(scene / f"occupancy_s{i}.rvol") for i in range(len(truth))] \
            if all((scene / f"occupancy_s{i}.rvol").exists() for i in range(len(truth))) else None
        report = evaluate_meshes(pred, truth, ref, masks, args.sample_density)
        text = report.to_json()
        if args.csv:
            w = report.whole
            row = [scene.name, w.dice, w.jaccard, w.assd_mm, w.hd_mm, w.ane, w.anld, w.self_intersection_pct]
            new = not Path(args.csv).exists()
            with open(args.csv, "a") as fh:
                if new:
                    fh.write("scene,dice,jaccard,assd_mm,hd_mm,ane,anld,self_intersection_pct\n")
                fh.write(",".join(str(x) for x in row) + "\n")
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_postprocess(args) -> int:
    from .mesh import write_obj
    from .postprocess import build_adjacency, close_gaps, postprocess_segmentation
    from .volume import read_rvol, write_rvol

    if args.mask:
        if not args.out:
            raise UsageError("--mask needs --out")
        vol = read_rvol(args.mask)
        write_rvol(args.out, postprocess_segmentation(vol), "u8")
        return EXIT_OK
    if not (args.pred and args.checkpoint and args.data):
        raise UsageError("postprocess needs --mask, or --pred with --checkpoint and --data")
    from .deformer import predict
    from .train import load_model

    model, templates, _, _ = load_model(args.checkpoint)
    tr, _ = _split(args.data)
    corresponded = [predict(model, sc.image, templates)[0][-1] for sc in tr]
    adj = build_adjacency(corresponded, args.tau)
    meshes = _meshes(Path(args.pred), "pred")
    out = _out_dir(args, "post")
    out.mkdir(parents=True, exist_ok=True)
    for m in close_gaps(meshes, adj):
        write_obj(out / f"pred_s{m.structure_id}.obj", m)
    (out / "adjacency.json").write_text(json.dumps(
        {f"{a},{b}": idx.tolist() for (a, b), idx in sorted(adj.items())}, indent=1) + "\n")
    print(f"closed gaps on {sum(len(v) for v in adj.values())} vertices; wrote {out}")
    return EXIT_OK


def cmd_convert(args) -> int:
    from .mesh import read_obj, write_obj
    from .volume import marching_cubes, read_rvol, voxelize, write_rvol

    if not args.out:
        raise UsageError("convert needs --out")
    if args.mesh:
        if not args.ref:
            raise UsageError("--mesh needs --ref")
        write_rvol(args.out, voxelize(read_obj(args.mesh), read_rvol(args.ref)), "u8")
    elif args.volume:
        write_obj(args.out, marching_cubes(read_rvol(args.volume), args.iso))
    else:
        raise UsageError("convert needs --mesh or --volume")
    return EXIT_OK


def cmd_search_lambdas(args) -> int:
    from .train import search_lambdas

    tr, va = _split(args.data, args.val_scenes)
    enc, dfm = _model_configs(args)
    rows = search_lambdas(tr, va, _train_config(args), n_sets=args.sets, enc_cfg=enc, def_cfg=dfm)
    lines = ["lambda1\tlambda2\tlambda3\tlambda4\tval_point\tbest"]
    for r in rows:
        lines.append("\t".join(f"{w:.6f}" for w in r["weights"]) + f"\t{r['val_point']:.6f}\t{'*' if r['best'] else ''}")
    table = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(table + "\n")
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _model_args(p):
    p.add_argument("--data", help="dataset directory written by gen-data")
    p.add_argument("--val-scenes", type=int, help="use the last N scenes for validation instead of the manifest split")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--filters", type=_ints, default=[8, 16, 32, 64], help="filters per encoder level")
    p.add_argument("--block-dims", type=_ints, default=[96, 64, 32])
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--displacement-scale", type=float, default=0.1)
    p.add_argument("--subdivisions", type=int, default=3)
    p.add_argument("--augment", type=_flag, default=True)


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = _Parser(prog="meshdeform", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with one section per command")
    common.add_argument("--threads", type=int, help="torch intra-op threads (default 1, or $MESHDEFORM_THREADS)")
    common.add_argument("--seed", type=int, default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    subs = {}

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, parents=[common])
        p.set_defaults(func=func)
        p.add_argument("--out", help="output path (defaults under $MESHDEFORM_OUT_DIR)")
        subs[name] = p
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic dataset")
    p.add_argument("--scenes", type=int, default=28)
    p.add_argument("--val-scenes", type=int, help="held-out scenes at the end (default: one in seven)")
    p.add_argument("--structures", type=int, default=2)
    p.add_argument("--dims", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.04)

    p = add("train", cmd_train, "train a model")
    _model_args(p)
    p.add_argument("--weights", type=_floats, default=[0.3, 0.46, 0.16, 0.05], help="lambda1..lambda4")
    p.add_argument("--quiet", action="store_true")

    p = add("predict", cmd_predict, "predict meshes and occupancy for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)

    p = add("evaluate", cmd_evaluate, "compute metrics against ground truth")
    p.add_argument("--pred", help="directory with pred_s<k>.obj")
    p.add_argument("--scene", help="scene directory with gt_s<k>.obj and image.rvol")
    p.add_argument("--pred-mask")
    p.add_argument("--truth-mask")
    p.add_argument("--sample-density", type=float, help="surface points per mm^2 for distances")
    p.add_argument("--csv", help="append a whole-scene row to this CSV file")

    p = add("postprocess", cmd_postprocess, "clean a segmentation or close gaps between meshes")
    p.add_argument("--mask", help="binary RVOL segmentation")
    p.add_argument("--pred", help="directory with pred_s<k>.obj")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--tau", type=float, help="adjacency distance threshold in mm")

    p = add("convert", cmd_convert, "voxelize a mesh or extract a mesh from a volume")
    p.add_argument("--mesh")
    p.add_argument("--ref", help="reference RVOL giving the voxel grid")
    p.add_argument("--volume")
    p.add_argument("--iso", type=float, default=0.5)

    p = add("search-lambdas", cmd_search_lambdas, "random search over loss weights")
    _model_args(p)
    p.set_defaults(epochs=5)
    p.add_argument("--sets", type=int, default=8)
    return parser, subs


def _apply_config_file(path, subs, argv) -> None:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    command = next((a for a in argv if a in subs), None)
    target = subs.get(command)
    if target is None:
        return
    actions = {a.dest: a for a in target._actions}
    values = {}
    for section in ("global", command):
        if not cp.has_section(section):
            continue
        for key, raw in cp.items(section):
            dest = key.replace("-", "_")
            if dest not in actions or dest in ("config", "help"):
                if section == "global":
                    continue
                raise UsageError(f"{path}: unknown option {key!r} in [{section}]")
            act = actions[dest]
            if act.type:
                values[dest] = act.type(raw)
            elif act.nargs == 0:
                values[dest] = _flag(raw)
            else:
                values[dest] = raw
    target.set_defaults(**values)


def _configure_threads(threads) -> None:
    import torch

    n = threads or int(os.environ.get("MESHDEFORM_THREADS", "1"))
    torch.set_num_threads(max(1, n))


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        scan = argparse.ArgumentParser(add_help=False)
        scan.add_argument("--config")
        pre, _ = scan.parse_known_args(argv)
        if pre.config:
            _apply_config_file(pre.config, subs, argv)
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        _configure_threads(args.threads)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        return _report(exc)


def _report(exc: Exception) -> int:
    from .augment import FoldOverError
    from .train import NumericalError

    tb = traceback.extract_tb(exc.__traceback__)
    where = f" ({tb[-1].filename}:{tb[-1].lineno})" if tb else ""
    print(f"meshdeform: error: {exc}{where}", file=sys.stderr)
    if isinstance(exc, UsageError | argparse.ArgumentTypeError):
        return EXIT_USAGE
    if isinstance(exc, NumericalError | FoldOverError | FloatingPointError):
        return EXIT_NUMERIC
    if isinstance(exc, OSError | ValueError | KeyError | json.JSONDecodeError):
        return EXIT_DATA
    return EXIT_NUMERIC if isinstance(exc, ArithmeticError) else EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
