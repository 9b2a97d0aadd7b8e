"""Command-line entry point: gen-data, train, encode, eval, export-template.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from voxshape import data, losses, retrieval, train
from voxshape.errors import ConfigError, FormatError, NotTrainedError
from voxshape.model import ModelConfig, ShapeModel

log = logging.getLogger("voxshape")

MIN_TRAIN_PER_CLASS = 4  # one class-balanced batch of 12

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(train.TrainConfig)} - {"augment"}
_AUGMENT_KEYS = {f.name for f in fields(data.AugmentSpec)}


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "false"):
        return low == "true"
    if "," in text:
        return [_parse_value(t) for t in text.split(",") if t.strip()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def resolve_run_config(file_values: dict, overrides: dict):
    """Merge config-file values with command-line overrides into model/train configs."""
    merged = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    unknown = set(merged) - _MODEL_KEYS - _TRAIN_KEYS - _AUGMENT_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        mcfg = ModelConfig(**{k: v for k, v in merged.items() if k in _MODEL_KEYS})
        aug = data.AugmentSpec(**{k: v for k, v in merged.items() if k in _AUGMENT_KEYS})
        tcfg = train.TrainConfig(augment=aug, **{k: v for k, v in merged.items() if k in _TRAIN_KEYS})
        tcfg.check(mcfg.num_structures)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return mcfg, tcfg


def write_resolved(path, mcfg: ModelConfig, tcfg: train.TrainConfig, extra: dict) -> None:
    lines = []
    for section in (mcfg.to_dict(), {k: v for k, v in tcfg.to_dict().items() if k != "augment"},
                    tcfg.to_dict()["augment"], extra):
        for k in sorted(section):
            v = section[k]
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def _require_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} {p} is not a directory")
    return p


def _require_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} {p} does not exist")
    return p


# ---------------------------------------------------------------- commands


def _parse_split(text: str) -> tuple:
    try:
        ratio = tuple(int(t) for t in text.split("/"))
        data.split_counts(100, ratio)
    except ValueError:
        raise ConfigError(f"--split must look like 165/50/100, got {text!r}") from None
    return ratio


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    ratio = _parse_split(args.split)
    need = MIN_TRAIN_PER_CLASS * data.NUM_CLASSES
    if args.subjects < 1 or data.split_counts(args.subjects, ratio)[0] < need:
        smallest = next(n for n in range(1, 100_000) if data.split_counts(n, ratio)[0] >= need)
        raise ConfigError(f"--subjects {args.subjects} leaves fewer than {need} training subjects for "
                          f"class-balanced batches; use at least {smallest} with split {args.split}")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} exists and is not empty (use --force)")
    ds = data.generate_dataset(args.subjects, args.seed, args.extent, ratio)
    data.save_dataset(ds, out)
    counts = data.split_counts(args.subjects, ratio)
    (out / "config.resolved").write_text(f"extent = {args.extent}\nseed = {args.seed}\n"
                                         f"split = {args.split}\nsubjects = {args.subjects}\n")
    print(f"wrote {args.subjects} subjects to {out} (train/val/test = {counts[0]}/{counts[1]}/{counts[2]}, "
          f"{len(ds.repeats)} repeat scans)")
    return 0


def cmd_train(args) -> int:
    data_dir = _require_dir(args.data, "--data")
    _require_file(data_dir / "manifest.csv", "manifest")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = train.load_checkpoint(_require_file(args.resume, "--resume"))
        if args.epochs is not None:
            trainer.cfg.epochs = args.epochs
        mcfg, tcfg = trainer.model.cfg, trainer.cfg
    else:
        file_values = read_config_file(_require_file(args.config, "--config")) if args.config else {}
        overrides = {"epochs": args.epochs, "seed": args.seed, "lr": args.lr,
                     "passes_per_epoch": args.passes_per_epoch}
        mcfg, tcfg = resolve_run_config(file_values, overrides)
        trainer = train.Trainer(ShapeModel(mcfg), tcfg)
    write_resolved(out / "config.resolved", mcfg, tcfg, {"data": data_dir.resolve(), "out": out.resolve()})
    ds = data.load_dataset(data_dir)
    history = train.fit(trainer, ds, out_dir=out)
    if history:
        last = history[-1]
        print(f"epoch {last.epoch}: align dice {last.align_dice:.4f}, recon dice {last.recon_dice:.4f}")
    print(f"checkpoint: {out / 'last.vxck'}")
    return 0


def _volume_inputs(path):
    """(ids, classes, volumes) from a dataset directory, a directory of .vxs files, or one file."""
    p = Path(path)
    if p.is_dir() and (p / "manifest.csv").exists():
        ds = data.load_dataset(p)
        rows = ds.rows
        return [r.subject_id for r in rows], [r.structure_class for r in rows], [ds.volumes[r.subject_id] for r in rows]
    files = sorted(p.glob("*.vxs")) if p.is_dir() else [p]
    if not files or not all(f.is_file() for f in files):
        raise ConfigError(f"no volumes found at {p}")
    return [f.stem for f in files], [-1] * len(files), [data.read_volume(f) for f in files]


def cmd_encode(args) -> int:
    trainer = train.load_checkpoint(_require_file(args.checkpoint, "--checkpoint"))
    model = trainer.model
    ids, classes, vols = _volume_inputs(args.volumes)
    ext = model.cfg.volume_extent
    for sid, v in zip(ids, vols):
        if v.shape != (ext,) * 3:
            raise ConfigError(f"volume {sid} has shape {v.shape}, checkpoint expects {(ext,) * 3}")
    z = model.describe(np.stack(vols))
    header = "subject_id,class," + ",".join(f"z_{i}" for i in range(z.shape[1]))
    lines = [header] + [f"{sid},{c}," + ",".join(repr(float(x)) for x in row) for sid, c, row in zip(ids, classes, z)]
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(ids)} descriptors of dim {z.shape[1]} to {args.out}")
    return 0


def cmd_eval(args) -> int:
    names = retrieval.TABLE_SCENARIOS if args.scenario == "all" else [args.scenario]
    try:
        scenarios = [retrieval.get_scenario(n) for n in names]
    except ValueError as err:
        raise ConfigError(str(err)) from err
    ds = data.load_dataset(_require_dir(args.data, "--data"))
    if args.baseline:
        describe = retrieval.describe_baseline
    else:
        trainer = train.load_checkpoint(_require_file(args.checkpoint, "--checkpoint"))
        describe = retrieval.model_describer(trainer.model)
    results = [retrieval.run_experiment(describe, ds, sc, seed=args.seed, draws=args.draws) for sc in scenarios]
    print(f"{'scenario':22s} {'top1':>7s} {'top5':>7s} {'queries':>8s}")
    for res in results:
        print(f"{res['scenario']:22s} {res['top1']:7.4f} {res['top5']:7.4f} {res['n_queries']:8d}")
    if args.out:
        retrieval.write_results(args.out, results)
    return 0


def cmd_export_template(args) -> int:
    trainer = train.load_checkpoint(_require_file(args.checkpoint, "--checkpoint"))
    model = trainer.model
    if not 0 <= args.structure < model.cfg.num_structures:
        raise ConfigError(f"--structure must be in [0, {model.cfg.num_structures})")
    tpl = model.get_template(args.structure).value.astype(np.float32)
    out = Path(args.out)
    data.write_volume(out, tpl)
    binary_path = out.with_name(out.stem + "_binary" + out.suffix)
    binary = (tpl >= 0.5).astype(np.float32)
    data.write_volume(binary_path, binary)
    print(f"wrote {out} and {binary_path}")
    if args.data:
        ds = data.load_dataset(_require_dir(args.data, "--data"))
        members = [ds.volumes[r.subject_id] for r in ds.split("train") if r.structure_class == args.structure]
        if members:
            mean_shape = (np.mean(members, axis=0) >= 0.5).astype(np.float32)
            log.info("template %d vs population mean shape: Dice %.4f", args.structure,
                     losses.dice_value(binary, mean_shape))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxshape", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic segmentation population")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=63)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extent", type=int, default=32)
    p.add_argument("--split", default="165/50/100", help="train/val/test proportions")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the transformer + autoencoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="plain-text 'key = value' config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--passes-per-epoch", type=int)
    p.add_argument("--resume", help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="write shape descriptors as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volumes", required=True, help="dataset dir, directory of .vxs files, or one .vxs file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("eval", help="run retrieval experiments")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--scenario", default="all", help=f"'all' or one of: {', '.join(retrieval.SCENARIOS)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", type=int, default=6)
    p.add_argument("--baseline", action="store_true", help="use the voxel-count descriptor instead of a model")
    p.add_argument("--out", help="CSV results path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-template", help="write a learned template as a volume file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--structure", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset dir; logs Dice against the population mean shape")
    p.set_defaults(func=cmd_export_template)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "eval" and not args.baseline and not args.checkpoint:
        print("error: --checkpoint is required unless --baseline is given", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError, NotTrainedError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - any compute failure maps to exit code 2
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
