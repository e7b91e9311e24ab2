"""``occaware`` command line: gen-data, train-detector, train-backbone, evaluate.

Exit codes: 0 success, 2 configuration error, 3 training-contract violation,
4 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from .backbone import BackboneConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .data_model import load_dataset
from .detector import (DetectorConfig, DetectorTrainConfig, OcclusionDetector, evaluate_detector, freeze,
                       train_detector, weight_checksum)
from .errors import (BadSpec, CheckpointError, DuplicateEntry, EmptyDataset, FrozenContractViolation,
                     InvalidDeclaration, MissingVideo, OccAwareError)
from .evaluation import (CONSISTENT, DEFAULT_RANKS, DYNAMIC, FLAT, PART_MEAN, EvalProtocol, cross_occlusion_eval,
                         read_protocol_csv, run_protocol, sliced_eval, table_rows)
from .model import VARIANT_CHOICES, build_model, estimate_beta_scale, load_model, save_model
from .training import TrainConfig, train_occluded
from .walker import REGIMES, build_dataset

EXIT_OK, EXIT_CONFIG, EXIT_CONTRACT, EXIT_DATA = 0, 2, 3, 4
logger = logging.getLogger("occaware")


class ConfigError(OccAwareError):
    pass


def _classes(text: str) -> tuple[int, ...]:
    try:
        values = tuple(sorted({int(x) for x in str(text).split(",") if x.strip()}))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad class list {text!r}")
    if not values or any(not 0 <= v <= 8 for v in values):
        raise argparse.ArgumentTypeError("classes must be a comma list drawn from 0-8")
    return values


def _beta_scale(text: str) -> str:
    if text != "auto":
        try:
            if float(text) <= 0:
                raise ValueError
        except ValueError:
            raise argparse.ArgumentTypeError("--beta-scale must be a positive number or 'auto'")
    return text


def _prepare_output(path: Path, overwrite: bool, is_dir: bool) -> Path:
    path = Path(path)
    if not path.parent.exists():
        raise ConfigError(f"output parent directory {path.parent} does not exist")
    if path.exists() and (not is_dir or any(path.iterdir())):
        if not overwrite:
            raise ConfigError(f"{path} exists; pass --overwrite to replace it")
        if is_dir:
            shutil.rmtree(path)
        else:
            path.unlink()
    if is_dir:
        path.mkdir()
    return path


def _write_resolved(path: Path, args: argparse.Namespace, **extra) -> None:
    # the output location and clobber flag do not affect results, so reruns stay byte-identical
    data = {k: v for k, v in vars(args).items() if k not in ("func", "config", "overwrite", "out")}
    data.update(extra)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=str))


def _load_detector(path: Path) -> OcclusionDetector:
    tensors, sidecar = load_checkpoint(path)
    if sidecar.get("kind") != "detector":
        raise CheckpointError(f"{path} is not a detector checkpoint")
    cfg = dict(sidecar["config"])
    if cfg.get("widths") is not None:
        cfg["widths"] = tuple(cfg["widths"])
    net = OcclusionDetector(DetectorConfig(**cfg))
    net.load_state_dict(tensors)
    return freeze(net)


def _split_videos(dataset, split: str):
    subjects = set(dataset.split_subjects(split))
    videos = [v for v in dataset if v.subject_id in subjects]
    if not videos:
        raise EmptyDataset(f"no {split} videos in dataset")
    return videos


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = _prepare_output(args.out, args.overwrite, is_dir=True)
    dataset = build_dataset(out, args.subjects, args.seqs, args.frames, args.noise, args.seed,
                            num_test_subjects=args.test_subjects, regime=args.regime)
    _write_resolved(out / "config.json", args)
    print(f"wrote {len(dataset)} videos to {out}")
    return EXIT_OK


def cmd_train_detector(args) -> int:
    dataset = load_dataset(args.data)
    out = _prepare_output(args.out, args.overwrite, is_dir=False)
    config = DetectorConfig(num_conv_layers=args.layers)
    net = OcclusionDetector(config, seed=args.seed)
    tcfg = DetectorTrainConfig(learning_rate=args.lr, batch_size=args.batch, epochs=args.epochs,
                               rng_seed=args.seed, occlusion_classes=args.occlusion_classes)
    net, log = train_detector(net, _split_videos(dataset, "train"), tcfg)
    freeze(net)
    test = [v for v in dataset if v.subject_id in set(dataset.split_subjects("test"))]
    metrics = evaluate_detector(net, test, seed=args.seed, draws=args.eval_draws) if test else {}
    cfg = asdict(config)
    sidecar = {"kind": "detector", "config": cfg, "train_config": asdict(tcfg),
               "test_metrics": metrics, "checksum": weight_checksum(net)}
    save_checkpoint(out, net.state_dict(), sidecar)
    with open(str(out) + ".metrics.ndjson", "w") as fh:
        for record in log:
            fh.write(json.dumps(record) + "\n")
    _write_resolved(str(out) + ".config.json", args)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_train_backbone(args) -> int:
    dataset = load_dataset(args.data)
    out = _prepare_output(args.out, args.overwrite, is_dir=False)
    detector = None
    if args.variant != "none":
        if args.detector is None:
            raise ConfigError(f"--variant {args.variant} needs --detector")
        detector = _load_detector(args.detector)
    bcfg = BackboneConfig.compact() if args.preset == "compact" else BackboneConfig()
    videos = _split_videos(dataset, "train")
    beta_scale = 1.0
    if detector is not None and args.beta_scale == "auto":
        beta_scale = estimate_beta_scale(detector, videos, args.occlusion_classes, seed=args.seed)
    elif detector is not None:
        beta_scale = float(args.beta_scale)
    model = build_model(args.variant, bcfg, detector, seed=args.seed, more_channels=args.more_channels,
                        beta_scale=beta_scale)
    tcfg = TrainConfig(frames_per_clip=args.frames_per_clip, batch_subjects=args.batch_subjects,
                       clips_per_subject=args.clips_per_subject, learning_rate=args.lr,
                       triplet_margin=args.margin, max_steps=args.steps, eval_every=args.eval_every,
                       rng_seed=args.seed, occlusion_classes=args.occlusion_classes,
                       val_fraction=args.val_fraction, steps_per_epoch=args.steps_per_epoch,
                       workers=args.workers)
    log_path = Path(str(out) + ".metrics.ndjson")
    result = train_occluded(model, detector, videos, tcfg, log_path=log_path)
    save_model(out, model, {f"classifier.{k}": v for k, v in result.classifier.state_dict().items()},
               {"train_config": asdict(tcfg), "val_subjects": result.val_subjects})
    _write_resolved(str(out) + ".config.json", args, train_config=asdict(tcfg))
    print(f"trained {args.variant} for {args.steps} steps -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    dataset = load_dataset(args.data)
    out = _prepare_output(args.out, args.overwrite, is_dir=True)
    detector = _load_detector(args.detector) if args.detector else None
    model, sidecar = load_model(args.checkpoint, detector)
    if model.needs_beta and detector is None:
        raise ConfigError("this checkpoint is occlusion aware; pass --detector")
    gallery_classes = args.gallery_classes or args.classes
    probe_classes = args.probe_classes or args.classes
    kwargs = dict(ranks=args.ranks, num_runs=args.runs, gallery_occlusion_classes=gallery_classes,
                  probe_occlusion_classes=probe_classes, rng_seed=args.seed, probe_only=args.probe_only,
                  occlusion_kind=DYNAMIC if args.mode == "dynamic" else CONSISTENT, metric=args.metric)
    if args.protocol:
        protocol = read_protocol_csv(args.protocol, **kwargs)
    else:
        protocol = EvalProtocol.from_dataset(dataset, "test", **kwargs)
    if args.mode in ("standard", "dynamic"):
        report = run_protocol(model, detector, dataset, protocol, out / "manifests", replay_dir=args.replay)
        report.manifests = [str(Path(m).relative_to(out)) for m in report.manifests]
        if args.replay:
            report.config["replayed_from"] = Path(args.replay).name
        report.write(out / "report.json", out / "report.csv")
        print(json.dumps(report.mean, sort_keys=True))
    else:
        if args.replay:
            raise ConfigError("--replay applies to standard and dynamic modes")
        fn = sliced_eval if args.mode == "sliced" else cross_occlusion_eval
        rows = fn(model, detector, dataset, protocol, manifest_dir=out / "manifests")
        for r in rows:
            r["report"].manifests = [str(Path(m).relative_to(out)) for m in r["report"].manifests]
        payload = [{**{k: v for k, v in r.items() if k != "report"}, "report": r["report"].to_dict()}
                   for r in rows]
        (out / "report.json").write_text(json.dumps({"mode": args.mode, "rows": payload}, indent=2,
                                                    sort_keys=True))
        table = table_rows(rows, args.ranks)
        with open(out / "report.csv", "w") as fh:
            fh.write("row," + ",".join(f"rank{k}" for k in args.ranks) + "\n")
            for row in table:
                fh.write(",".join(f'"{c}"' if "," in c else c for c in row) + "\n")
        for row in table:
            print(" ".join(row))
    _write_resolved(out / "config.json", args, checkpoint_sidecar=sidecar)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occaware", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, overwrite=True):
        p.add_argument("--config", type=Path, help="JSON file of flag values; command-line flags win")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=0, help="0 = strict single-worker mode")
        if overwrite:
            p.add_argument("--overwrite", action="store_true", help="replace existing outputs")

    p = sub.add_parser("gen-data", help="render a synthetic walker dataset")
    common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--subjects", type=int, default=60)
    p.add_argument("--test-subjects", type=int, default=None, help="default: a third of --subjects")
    p.add_argument("--seqs", type=int, default=3)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--noise", type=float, default=1.0, help="camera jitter strength in [0, 1]")
    p.add_argument("--regime", choices=sorted(REGIMES), default="A")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-detector", help="train the occlusion-type detector")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--layers", type=int, choices=(1, 3, 5), default=3)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--occlusion-classes", type=_classes, default=tuple(range(9)))
    p.add_argument("--eval-draws", type=int, default=4)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("train-backbone", help="train a baseline or occlusion-aware recognizer")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variant", choices=VARIANT_CHOICES, default="none")
    p.add_argument("--detector", type=Path, help="detector checkpoint (loaded frozen)")
    p.add_argument("--occlusion-classes", type=_classes, default=tuple(range(9)))
    p.add_argument("--preset", choices=("reference", "compact"), default="reference")
    p.add_argument("--more-channels", action="store_true", help="widen the learnable 3-D conv output")
    p.add_argument("--beta-scale", type=_beta_scale, default="1.0",
                   help="multiplier on detector features, or 'auto' for unit mean norm")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--eval-every", type=int, default=200)
    p.add_argument("--batch-subjects", type=int, default=8)
    p.add_argument("--clips-per-subject", type=int, default=8)
    p.add_argument("--frames-per-clip", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--steps-per-epoch", type=int, default=100)
    p.set_defaults(func=cmd_train_backbone)

    p = sub.add_parser("evaluate", help="rank-K retrieval under occlusion")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--detector", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--protocol", type=Path, help="CSV role,video_id,subject_id,condition,start,end")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--ranks", type=lambda s: tuple(int(x) for x in s.split(",")), default=DEFAULT_RANKS)
    p.add_argument("--classes", type=_classes, default=tuple(range(9)))
    p.add_argument("--gallery-classes", type=_classes)
    p.add_argument("--probe-classes", type=_classes)
    p.add_argument("--mode", choices=("standard", "sliced", "cross", "dynamic"), default="standard")
    p.add_argument("--probe-only", action="store_true", help="leave gallery videos unoccluded")
    p.add_argument("--metric", choices=(FLAT, PART_MEAN), default=FLAT)
    p.add_argument("--replay", type=Path, help="directory of per-run manifests to replay")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    try:
        values = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "func"):
            raise ConfigError(f"unknown config key {key!r}")
        action = known[dest]
        if action.type is not None and isinstance(value, str):
            value = action.type(value)
        elif isinstance(value, list):
            value = tuple(value)
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if args.workers < 0:
        print("error: --workers must be >= 0", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(max(1, args.workers) if args.workers else 1)
    try:
        return args.func(args)
    except FrozenContractViolation as exc:
        print(f"training contract violated: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (MissingVideo, EmptyDataset, DuplicateEntry, FileNotFoundError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, BadSpec, InvalidDeclaration, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
