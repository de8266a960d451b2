"""Command-line entry point wiring the pipeline stages.

Subcommands: synth-data, enhance, pretrain-teacher, train, stain, evaluate,
fit-niqe. Exit codes are stable API: 0 success, 2 configuration error,
3 missing artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path


from . import histmatch as enh
from .errors import ConfigError, MissingArtifactError, NumericalError
from .imaging import UnpairedDataset, load_image, save_image, scan_directory
from .metrics import NiqeModel, evaluate, fit_niqe_model
from .networks import build_embedder, load_checkpoint, ConvEmbedder
from .synthcells import SynthConfig, write_dataset
from .training import TrainConfig, pretrain_teacher, stain, train_student

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4


def read_config_file(path: str | Path) -> dict[str, str]:
    """Key-value config format: one ``key = value`` per line, '#' comments."""
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"no such config file: {path}")
    out: dict[str, str] = {}
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, annotation) -> object:
    if annotation is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if annotation is int:
        return int(value)
    if annotation is float:
        return float(value)
    return value


def train_config_from_sources(config_path: str | None, overrides: dict) -> TrainConfig:
    cfg = TrainConfig()
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    if config_path:
        for key, raw in read_config_file(config_path).items():
            if key in ("lambda1", "lambda2"):
                setattr(cfg.weights, key, float(raw))
            elif key == "weights":
                raise ConfigError("set loss weights via the lambda1/lambda2 keys")
            elif key == "max_steps":
                cfg.max_steps = None if raw.lower() in ("none", "") else int(raw)
            elif key in fields:
                ann = type(getattr(cfg, key)) if getattr(cfg, key) is not None else str
                try:
                    setattr(cfg, key, _coerce(raw, ann))
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {raw!r}") from exc
            else:
                raise ConfigError(f"unknown config key {key!r}")
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ("lambda1", "lambda2"):
            setattr(cfg.weights, key, float(value))
        else:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


def _write_manifest(out_dir: Path, subcommand: str, args: argparse.Namespace, cfg_hash: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "config_path": getattr(args, "config", None),
        "seed": getattr(args, "seed", None),
        "out": str(out_dir),
        "config_hash": cfg_hash,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / "run.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def _dataset_from_dir(data_dir: str | Path) -> UnpairedDataset:
    data_dir = Path(data_dir)
    dm, bm = data_dir / "dark_manifest.txt", data_dir / "bright_manifest.txt"
    if dm.is_file() and bm.is_file():
        return UnpairedDataset.from_manifests(dm, bm)
    dd, bd = data_dir / "dark", data_dir / "bright"
    if dd.is_dir() and bd.is_dir():
        return UnpairedDataset.from_dirs(dd, bd)
    raise MissingArtifactError(f"no manifests or dark/bright directories under {data_dir}")


def _load_embedder(args) -> ConvEmbedder:
    if getattr(args, "embedder_weights", None):
        payload = load_checkpoint(args.embedder_weights)
        if payload["kind"] != "embedder":
            raise ConfigError(f"{args.embedder_weights} is not an embedder checkpoint")
        emb = ConvEmbedder()
        emb.load_state_dict(payload["states"]["embedder"])
        emb.eval()
        emb.seed_tag = f"external:{Path(args.embedder_weights).name}"
        return emb
    emb = build_embedder(args.embedder_seed)
    emb.seed_tag = f"convembed-seed{args.embedder_seed}"
    return emb


def cmd_synth_data(args) -> int:
    cfg = SynthConfig(
        image_size=args.size,
        n_images=args.n_images,
        seed=args.seed,
    )
    if args.config:
        raw = read_config_file(args.config)
        updates = {}
        for key, value in raw.items():
            if key in ("image_size", "n_images", "seed"):
                updates[key] = int(value)
            elif key == "background_noise_sigma":
                updates[key] = float(value)
            elif key in ("cells_per_image", "cell_radius"):
                lo, _, hi = value.partition(",")
                cast = int if key == "cells_per_image" else float
                updates[key] = (cast(lo), cast(hi))
            else:
                raise ConfigError(f"unknown synth config key {key!r}")
        cfg = dataclasses.replace(cfg, **updates)
    cfg.validate()
    out_dir = Path(args.out)
    dark, bright = write_dataset(cfg, out_dir)
    _write_manifest(out_dir, "synth-data", args, config_hash_of(cfg))
    print(f"wrote {len(dark)} dark and {len(bright)} bright images under {out_dir}")
    return EXIT_OK


def config_hash_of(cfg) -> str:
    import hashlib

    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def cmd_enhance(args) -> int:
    if args.lut and args.per_image:
        raise ConfigError("--lut and --per-image are mutually exclusive")
    data = _dataset_from_dir(args.data)
    data.validate_for_training()
    out_dir = Path(args.out)
    (out_dir / "enhanced").mkdir(parents=True, exist_ok=True)

    bright_hist = enh.accumulate_histogram(load_image(p) for p in data.bright_paths)
    c_b = enh.histogram_to_cdf(bright_hist)
    dark_images = [load_image(p) for p in data.dark_paths]
    if args.lut:
        # reuse a fixed mapping (the inference regime) instead of refitting
        lut, _ = enh.load_lut(args.lut)
        enh.save_lut(lut, out_dir / "lut.txt", {"source": Path(args.lut).name})
    else:
        c_d = enh.histogram_to_cdf(enh.accumulate_histogram(dark_images))
        lut = enh.build_staining_lut(c_d, c_b)
        hashes = {
            "dark": enh.hash_image_files(data.dark_paths),
            "bright": enh.hash_image_files(data.bright_paths),
        }
        enh.save_lut(lut, out_dir / "lut.txt", hashes)

    enhanced = []
    for path, img in zip(data.dark_paths, dark_images):
        if args.per_image:
            c_one = enh.histogram_to_cdf(enh.accumulate_histogram([img]))
            z = enh.enhance(img, enh.build_staining_lut(c_one, c_b))
        else:
            z = enh.enhance(img, lut)
        enhanced.append(z)
        save_image(z, out_dir / "enhanced" / Path(path).name)

    c_z = enh.histogram_to_cdf(enh.accumulate_histogram(enhanced))
    ks = enh.ks_statistic(c_z, c_b)
    _write_manifest(out_dir, "enhance", args, "-")
    print(f"lut written to {out_dir / 'lut.txt'}; KS(enhanced, bright) = {ks:.5f}")
    return EXIT_OK


def cmd_pretrain_teacher(args) -> int:
    cfg = train_config_from_sources(args.config, {"seed": args.seed, "max_steps": args.steps,
                                                  "image_size": args.size, "device": args.device})
    data = _dataset_from_dir(args.data)
    if not data.bright_paths:
        raise MissingArtifactError(f"no bright images under {args.data}")
    ckpt = pretrain_teacher(data.bright_paths, cfg, args.out,
                            manifest_extra={"subcommand": "pretrain-teacher",
                                            "config_path": args.config})
    print(f"teacher checkpoint: {ckpt}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "max_steps": args.steps, "variant": args.variant,
                 "image_size": args.size, "device": args.device}
    cfg = train_config_from_sources(args.config, overrides)
    data = _dataset_from_dir(args.data)
    lut, _ = enh.load_lut(args.lut)
    ckpt = train_student(data, args.teacher, lut, cfg, args.out,
                         resume_from=args.resume,
                         manifest_extra={"subcommand": "train", "config_path": args.config})
    print(f"student checkpoint: {ckpt}")
    return EXIT_OK


def cmd_stain(args) -> int:
    lut, _ = enh.load_lut(args.lut)
    src = Path(args.input)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if src.is_dir():
        paths = scan_directory(src)
        if not paths:
            raise MissingArtifactError(f"no PNG images under {src}")
    elif src.is_file():
        paths = [src]
    else:
        raise MissingArtifactError(f"no such input: {src}")
    from .training import load_student

    student = load_student(args.student)
    for p in paths:
        y = stain(load_image(p), lut, student)
        save_image(y, out_dir / p.name)
    _write_manifest(out_dir, "stain", args, "-")
    print(f"stained {len(paths)} image(s) into {out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    outputs = [load_image(p) for p in scan_directory(args.outputs)]
    refs = [load_image(p) for p in scan_directory(args.reference)]
    enhanced = [load_image(p) for p in scan_directory(args.enhanced)]
    embedder = _load_embedder(args)
    if args.niqe_model:
        model = NiqeModel.load(args.niqe_model)
    else:
        model = fit_niqe_model(refs)
    out_csv = Path(args.out)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    report = evaluate(outputs, refs, enhanced, embedder, model,
                      csv_path=out_csv, method=args.method)
    _write_manifest(out_csv.parent, "evaluate", args, "-")
    print(f"fid={report.fid:.4f} kid={report.kid:.5f} "
          f"niqe={report.niqe:.4f} lpips={report.lpips:.5f}")
    return EXIT_OK


def cmd_fit_niqe(args) -> int:
    images = [load_image(p) for p in scan_directory(args.images)]
    if not images:
        raise MissingArtifactError(f"no PNG images under {args.images}")
    model = fit_niqe_model(images)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    print(f"niqe model written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="darkstain",
        description="Unsupervised digital staining of dark-field cell images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate an unpaired synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-images", type=int, default=64, dest="n_images")
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("enhance", help="build the staining LUT and enhance the dark set")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lut", default=None,
                   help="apply an existing LUT file instead of fitting a new one")
    p.add_argument("--per-image", action="store_true", dest="per_image",
                   help="build a per-image dark CDF instead of the aggregate one")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("pretrain-teacher", help="pretrain the colorization teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--device", choices=("cpu", "accelerator"), default=None)
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser("train", help="train the student staining generator")
    p.add_argument("--data", required=True)
    p.add_argument("--lut", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--variant", choices=("full", "ablation1", "ablation2", "ablation3"),
                   default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--device", choices=("cpu", "accelerator"), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stain", help="stain one image or a directory of images")
    p.add_argument("--input", required=True)
    p.add_argument("--lut", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stain)

    p = sub.add_parser("evaluate", help="no-reference evaluation of stained outputs")
    p.add_argument("--outputs", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--enhanced", required=True)
    p.add_argument("--out", required=True, help="CSV results table to append to")
    p.add_argument("--method", default="ours")
    p.add_argument("--niqe-model", default=None, dest="niqe_model")
    p.add_argument("--embedder-weights", default=None, dest="embedder_weights")
    p.add_argument("--embedder-seed", type=int, default=0, dest="embedder_seed")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fit-niqe", help="fit the pristine NIQE model on an image set")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_niqe)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
