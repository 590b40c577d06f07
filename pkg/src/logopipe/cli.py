"""Command-line front end.

One executable, nine subcommands: synth, propose, train, calibrate,
predict, evaluate, ablate, dedup, bench. Settings resolve in three layers:
built-in defaults, then a flat ``key = value`` config file (--config),
then explicit command-line flags. Unknown config keys are rejected, and
every run echoes its fully-resolved configuration to stderr.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as dm
from .data import NO_LOGO, DatasetError
from .dedup import find_exact_duplicates, find_near_duplicates
from .evaluation import (METRIC_HEADER, TOGGLE_HEADER, ablation_rows,
                         ablation_table, evaluate_model, format_table,
                         table_to_csv, timing_report)
from .inference import classify_batch, classify_image
from .network import ModelFormatError, load_model, save_model
from .proposals import ProposalConfig, ProposalGenerator
from .synth import SynthSpec, generate
from .training import (PRESET_NAMES, TrainingConfig, calibrate_threshold,
                       preset, train)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse variant whose usage failures exit 1 instead of 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool_flag(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


def build_parser() -> Parser:
    parser = Parser(prog="logopipe",
                    description="logo recognition pipeline tools")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p):
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--seed", type=int, default=0, help="master RNG seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for per-image stages "
                            "(1 guarantees determinism)")

    def proposal_opts(p):
        p.add_argument("--k-values", default="100,200",
                       help="comma-separated segmentation scales")
        p.add_argument("--min-size", type=int, default=20,
                       help="minimum component/box pixel size")
        p.add_argument("--max-proposals", type=int, default=2000,
                       help="keep at most this many boxes per image")

    p = sub.add_parser("synth", help="generate the synthetic benchmark",
                       description="Write a deterministic synthetic logo "
                                   "dataset in the standard layout.")
    common(p)
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--train-per-class", type=int, default=25)
    p.add_argument("--val-per-class", type=int, default=10)
    p.add_argument("--test-per-class", type=int, default=30)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--noise", type=float, default=0.03)

    p = sub.add_parser("propose", help="emit candidate boxes for images",
                       description="One line per box: image_path x y w h score.")
    common(p)
    proposal_opts(p)
    p.add_argument("images", nargs="+", help="image files")

    p = sub.add_parser("train", help="train a model on a dataset",
                       description="Train under a TC preset or explicit "
                                   "toggles and write the model file.")
    common(p)
    proposal_opts(p)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--report", help="write the training report here")
    p.add_argument("--preset", help=f"one of {', '.join(PRESET_NAMES)}")
    p.add_argument("--bg-class", type=_bool_flag, default=None)
    p.add_argument("--bbs", choices=("GT", "GT+OP"), default=None)
    p.add_argument("--data-augm", type=_bool_flag, default=None)
    p.add_argument("--class-balance", choices=("none", "epoch", "batch"),
                   default=None)
    p.add_argument("--contrast-norm", type=_bool_flag, default=None)
    p.add_argument("--sample-weight", type=_bool_flag, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("calibrate", help="re-fit a model's decision threshold",
                       description="Recalibrate on the train+val splits and "
                                   "rewrite the model file.")
    common(p)
    proposal_opts(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write here instead of overwriting")

    p = sub.add_parser("predict", help="classify images with a trained model",
                       description="One line per image: path predicted_class "
                                   "confidence n_proposals.")
    common(p)
    proposal_opts(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="dataset root (with --split)")
    p.add_argument("--split", default="test")
    p.add_argument("images", nargs="*", help="image files (alternative to --data)")

    p = sub.add_parser("evaluate", help="score a model on a dataset split")
    common(p)
    proposal_opts(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--csv", help="also write metrics as CSV here")

    p = sub.add_parser("ablate", help="train and evaluate several presets",
                       description="Shared-seed ablation over TC presets; "
                                   "prints the toggle/metric table.")
    common(p)
    proposal_opts(p)
    p.add_argument("--presets", default="TC-I,TC-II,TC-III,TC-IV",
                   help="comma-separated preset names")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--csv", help="also write the table as CSV here")

    p = sub.add_parser("dedup", help="find exact/near duplicate images",
                       description="exact mode: path_a path_b ssim lines; "
                                   "near mode: query neighbor rank distance.")
    common(p)
    p.add_argument("--mode", choices=("exact", "near"), default="exact")
    p.add_argument("--a", required=True, dest="set_a",
                   help="image directory (exact) or dataset root (near)")
    p.add_argument("--b", dest="set_b",
                   help="second set; omitted = within-set search")
    p.add_argument("--model", help="model file (near mode)")
    p.add_argument("--threshold", type=float, default=0.9)

    p = sub.add_parser("bench", help="time the recognition pipeline",
                       description="Average per-image stage timings, "
                                   "printed as a device/proposal/preproc/"
                                   "classif/overall table.")
    common(p)
    proposal_opts(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=100,
                   help="number of distinct images to time")
    p.add_argument("--runs", type=int, default=1,
                   help="averaging passes over those images")
    return parser


# ---------------------------------------------------------------------------
# config-file layering
# ---------------------------------------------------------------------------

def parse_kv_file(path) -> dict[str, str]:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, _, val = line.partition("=")
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def apply_config_file(args: argparse.Namespace, explicit: set,
                      parser_actions) -> None:
    if not args.config:
        return
    values = parse_kv_file(args.config)
    actions = {a.dest: a for a in parser_actions
               if a.dest not in ("help", "config", "command")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(
            f"{args.config}: unknown config keys: {', '.join(unknown)}; "
            f"valid keys: {', '.join(sorted(actions))}")
    for key, raw in values.items():
        if key in explicit:
            continue   # command-line flags win
        action = actions[key]
        if isinstance(action, (argparse._StoreTrueAction,
                               argparse._StoreFalseAction)):
            value = _bool_flag(raw)
        elif action.type is not None:
            try:
                value = action.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{args.config}: bad value for {key}: {exc}")
        else:
            value = raw
        setattr(args, key, value)


def echo_config(args: argparse.Namespace) -> None:
    pairs = sorted((k, v) for k, v in vars(args).items() if k != "command")
    rendered = " ".join(f"{k}={v}" for k, v in pairs)
    print(f"# {args.command} config: {rendered}", file=sys.stderr)


def _explicit_dests(parser: Parser, argv) -> set:
    """Dests the user actually named on the command line."""
    probe = build_parser()
    stack = [probe]
    for action in list(probe._actions):
        if isinstance(action, argparse._SubParsersAction):
            stack.extend(action.choices.values())
    for sp in stack:
        for action in sp._actions:
            action.default = argparse.SUPPRESS
            action.required = False
    try:
        ns, _ = probe.parse_known_args(argv)
    except UsageError:
        return set()
    return set(vars(ns))


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def _proposer(args) -> ProposalGenerator:
    k_values = tuple(float(v) for v in str(args.k_values).split(",") if v)
    if not k_values:
        raise UsageError("--k-values needs at least one value")
    return ProposalGenerator(ProposalConfig(
        k_values=k_values, min_size=args.min_size,
        max_proposals=args.max_proposals))


def _image_paths(directory) -> list[str]:
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    return sorted(str(p) for p in root.rglob("*")
                  if p.suffix.lower() in dm.IMAGE_EXTENSIONS)


def cmd_synth(args) -> int:
    spec = SynthSpec(num_classes=args.classes, seed=args.seed,
                     train_per_class=args.train_per_class,
                     val_per_class=args.val_per_class,
                     test_per_class=args.test_per_class,
                     image_size=args.image_size,
                     noise_level=args.noise)
    index = generate(spec, args.out)
    for split in ("train", "val", "test"):
        print(f"{split}: {len(index.splits[split])} images")
    print(f"classes: {','.join(index.class_names)}")
    return 0


def cmd_propose(args) -> int:
    proposer = _proposer(args)

    def run(path):
        image = dm.load_image(path)
        return path, proposer(image, key=path)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(run, args.images))
    else:
        results = [run(p) for p in args.images]
    for path, props in results:
        for box, score in zip(props.boxes, props.scores):
            print(f"{path} {box.x} {box.y} {box.w} {box.h} {score:.6f}")
    return 0


def _training_config(args) -> TrainingConfig:
    if args.preset:
        try:
            config = preset(args.preset)
        except KeyError:
            raise UsageError(f"unknown preset {args.preset!r}; "
                             f"valid presets: {', '.join(PRESET_NAMES)}")
    else:
        config = TrainingConfig()
    overrides = {}
    for name in ("bg_class", "bbs", "data_augm", "class_balance",
                 "contrast_norm", "sample_weight", "lr", "momentum",
                 "batch_size", "epochs"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    overrides["seed"] = args.seed
    from dataclasses import replace
    return replace(config, **overrides)


def cmd_train(args) -> int:
    config = _training_config(args)
    dataset = dm.load_dataset(args.data)
    if not dataset.records("train"):
        raise DatasetError(f"{args.data}: no training images found")
    model, report = train(config, dataset, _proposer(args))
    save_model(model, args.out)
    lines = report.lines()
    if args.report:
        Path(args.report).write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines:
        print(line)
    print(f"model written to {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    dataset = dm.load_dataset(args.data)
    model = load_model(args.model, expected_classes=dataset.class_names)
    records = dataset.records("train", "val")
    if not records:
        raise DatasetError(f"{args.data}: no train/val images to calibrate on")
    model.threshold = calibrate_threshold(model, records, _proposer(args))
    out = args.out or args.model
    save_model(model, out)
    print(f"threshold {model.threshold!r} written to {out}")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    proposer = _proposer(args)
    if args.images:
        paths = list(args.images)
    elif args.data:
        dataset = dm.load_dataset(args.data)
        paths = [r.path for r in dataset.records(args.split)]
    else:
        raise UsageError("predict needs image files or --data")

    if args.threads > 1:
        def run(path):
            try:
                return classify_image(dm.load_image(path), model, proposer,
                                      path=path)
            except DatasetError as exc:
                from .inference import ImageDecision
                return ImageDecision(path=path, predicted=NO_LOGO,
                                     confidence=0.0, pooled=None,
                                     proposal_count=0, error=str(exc))
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            decisions = list(pool.map(run, paths))
    else:
        decisions, _ = classify_batch(paths, model, proposer)
    for dec in decisions:
        if dec.error:
            print(f"{dec.path} ERROR {dec.error}", file=sys.stderr)
        print(f"{dec.path} {dec.predicted} {dec.confidence:.6f} "
              f"{dec.proposal_count}")
    return 0


def cmd_evaluate(args) -> int:
    dataset = dm.load_dataset(args.data)
    model = load_model(args.model, expected_classes=dataset.class_names)
    result = evaluate_model(model, dataset, _proposer(args), args.split)
    header = list(METRIC_HEADER) + ["tp", "fp", "fn"]
    row = [f"{result.precision:.3f}", f"{result.recall:.3f}",
           f"{result.f1:.3f}", f"{result.accuracy:.3f}",
           str(result.tp), str(result.fp), str(result.fn)]
    print(format_table(header, [row]))
    if args.csv:
        Path(args.csv).write_text(table_to_csv(header, [row]), encoding="utf-8")
    return 0


def cmd_ablate(args) -> int:
    names = [n.strip() for n in args.presets.split(",") if n.strip()]
    for name in names:
        if name not in PRESET_NAMES:
            raise UsageError(f"unknown preset {name!r}; valid presets: "
                             f"{', '.join(PRESET_NAMES)}")
    dataset = dm.load_dataset(args.data)
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    results, table = ablation_table(names, dataset, _proposer(args),
                                    seed=args.seed, split=args.split,
                                    **overrides)
    print(table)
    if args.csv:
        header = list(TOGGLE_HEADER + METRIC_HEADER)
        Path(args.csv).write_text(table_to_csv(header, ablation_rows(results)),
                                  encoding="utf-8")
    return 0


def cmd_dedup(args) -> int:
    if args.mode == "exact":
        paths_a = _image_paths(args.set_a)
        images_a = [dm.load_image(p) for p in paths_a]
        if args.set_b:
            paths_b = _image_paths(args.set_b)
            images_b = [dm.load_image(p) for p in paths_b]
            pairs = find_exact_duplicates(images_a, images_b,
                                          threshold=args.threshold)
        else:
            paths_b = paths_a
            pairs = find_exact_duplicates(images_a, threshold=args.threshold)
        for i, j, score in pairs:
            print(f"{paths_a[i]} {paths_b[j]} {score:.6f}")
        return 0

    if not args.model:
        raise UsageError("near mode needs --model")
    model = load_model(args.model)

    def gt_crops(root):
        dataset = dm.load_dataset(root)
        crops, ids = [], []
        for split in dm.SPLITS:
            for record in dataset.splits[split]:
                image = None
                for k, ann in enumerate(record.annotations):
                    if image is None:
                        image = dm.load_image(record.path)
                    crops.append(dm.crop_resize(image, ann.box))
                    ids.append(f"{record.path}#{k}")
        return crops, ids

    crops_a, ids_a = gt_crops(args.set_a)
    if args.set_b:
        crops_b, ids_b = gt_crops(args.set_b)
        lists = find_near_duplicates(model, crops_a, crops_b)
    else:
        ids_b = ids_a
        lists = find_near_duplicates(model, crops_a)
    for nl in lists:
        for rank, (j, dist) in enumerate(zip(nl.neighbors, nl.distances), 1):
            print(f"{ids_a[nl.query]} {ids_b[j]} {rank} {dist:.6f}")
    return 0


def cmd_bench(args) -> int:
    dataset = dm.load_dataset(args.data)
    model = load_model(args.model, expected_classes=dataset.class_names)
    paths = [r.path for r in dataset.records(args.split)][:args.limit]
    if not paths:
        raise DatasetError(f"{args.data}: split {args.split} has no images")
    # deliberately uncached so proposal timings reflect real work
    config = _proposer(args).config
    def fresh(image, key=None):
        from .proposals import propose
        return propose(image, config)
    _, table = timing_report(model, paths, fresh, runs=args.runs)
    print(table)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "propose": cmd_propose,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "dedup": cmd_dedup,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            return 1
        sub = next(a for a in parser._actions
                   if isinstance(a, argparse._SubParsersAction))
        explicit = _explicit_dests(parser, argv)
        apply_config_file(args, explicit,
                          sub.choices[args.command]._actions)
        echo_config(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, ModelFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
