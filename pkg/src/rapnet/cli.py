"""Command-line entry point.

Each subcommand is a thin adapter over the library modules. Exit codes:
0 on success, 1 on usage errors, 2 on data or model errors. Diagnostics go to
standard error; results go only to the files named on the command line, each
accompanied by ``<output>.config.json`` holding the fully resolved options.
Passing that file back through ``--config`` repeats the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from rapnet import evalkit, extractor, heads, locdata, rapw, trainer
from rapnet.backbone import ModelError, load_weights, read_image

logger = logging.getLogger("rapnet")

WEIGHTS_ENV = "RAPNET_WEIGHTS"
DEFAULT_WEIGHT_FILE = "backbone.rapw"

DATA_ERRORS = (
    ModelError,
    rapw.WeightFileError,
    locdata.ManifestError,
    extractor.FeatureFileError,
    evalkit.BenchmarkError,
    trainer.TrainingDiverged,
    OSError,
    KeyError,
    ValueError,
)

# options that must be present after merging flags with an echoed config
REQUIRED = {
    "extract": ("weights", "image", "out"),
    "train": ("manifest", "weights", "seed", "out"),
    "locations": ("poses", "out"),
    "match": ("features_a", "features_b", "out"),
    "eval-mma": ("weights", "dataset", "out"),
    "inspect-weights": ("weights",),
}
NOT_ECHOED = ("config", "verbose")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def default_weights() -> str | None:
    """Weight file from the environment: a file path, or a directory holding ``backbone.rapw``."""
    value = os.environ.get(WEIGHTS_ENV)
    if not value:
        return None
    path = Path(value)
    return str(path / DEFAULT_WEIGHT_FILE) if path.is_dir() else str(path)


def _extraction_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--weights", help=f"RAPW backbone weights (default: ${WEIGHTS_ENV})")
    p.add_argument("--attention", help="RAPW file with attention tensors (default: those in --weights, if any)")
    p.add_argument("--no-region", action="store_true", help="rank keypoints by the point map alone")
    p.add_argument("--top-k", type=int, default=500)
    p.add_argument("--max-edge", type=int, default=640)
    p.add_argument("--border", type=int, default=8)


def build_parser() -> _Parser:
    parser = _Parser(prog="rapnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", parser_class=_Parser, required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config echoed by an earlier run; flags given here override it")
        p.add_argument("--threads", type=int, default=1, help="upper bound on worker threads")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = add("extract", "detect and describe keypoints in one image")
    _extraction_flags(p)
    p.add_argument("--image")
    p.add_argument("--out")
    p.add_argument("--text", action="store_true", help="write the plain-text export instead of RAPF")

    p = add("train", "train the attention head on a location manifest")
    p.add_argument("--manifest")
    p.add_argument("--root", help="directory the manifest paths are relative to (default: manifest's directory)")
    p.add_argument("--weights", help=f"RAPW backbone weights (default: ${WEIGHTS_ENV})")
    p.add_argument("--init", help="RAPW file with starting attention tensors")
    p.add_argument("--seed", type=int, help="required; there is no clock-based default")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=trainer.TrainConfig.learning_rate)
    p.add_argument("--momentum", type=float, default=trainer.TrainConfig.momentum)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--max-edge", type=int, default=640)
    p.add_argument("--out")
    p.add_argument("--report", help="per-step loss CSV")

    p = add("locations", "group a TUM pose file into locations and write a manifest")
    p.add_argument("--poses")
    p.add_argument("--dist-thresh", type=float, default=locdata.DEFAULT_DIST_THRESH)
    p.add_argument("--angle-thresh", type=float, default=locdata.DEFAULT_ANGLE_THRESH)
    p.add_argument("--scene", default="scene")
    p.add_argument("--image-template", default="{timestamp:.6f}.png")
    p.add_argument("--out")

    p = add("match", "mutual nearest-neighbour matches between two RAPF files")
    p.add_argument("--features-a")
    p.add_argument("--features-b")
    p.add_argument("--out")

    p = add("eval-mma", "mean matching accuracy over an HPatches-layout dataset")
    _extraction_flags(p)
    p.add_argument("--dataset")
    p.add_argument("--out", help="CSV of per-sequence and aggregate curves")
    p.add_argument("--plot", help="optional PNG with the three MMA panels")

    p = add("inspect-weights", "list the tensors and architecture of a weight file")
    p.add_argument("--weights", help=f"RAPW file (default: ${WEIGHTS_ENV})")
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            echoed = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if echoed.get("subcommand") != args.subcommand:
            raise UsageError(f"config {args.config} is for {echoed.get('subcommand')!r}, not {args.subcommand!r}")
        sub = parser._subparsers._group_actions[0].choices[args.subcommand]  # type: ignore[union-attr]
        known = {a.dest for a in sub._actions}
        unknown = set(echoed) - known - {"subcommand"}
        if unknown:
            raise UsageError(f"config {args.config} has unknown keys {sorted(unknown)}")
        sub.set_defaults(**{k: v for k, v in echoed.items() if k != "subcommand"})
        args = parser.parse_args(argv)
    if getattr(args, "weights", "absent") is None:
        args.weights = default_weights()
    missing = [k for k in REQUIRED[args.subcommand] if getattr(args, k) is None]
    if missing:
        raise UsageError(f"rapnet {args.subcommand}: missing required option(s) " + ", ".join("--" + m.replace("_", "-") for m in missing))
    if args.threads < 1:
        raise UsageError("--threads must be at least 1")
    return args


def echo_config(args: argparse.Namespace, output: str | Path) -> Path:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in NOT_ECHOED}
    path = Path(f"{output}.config.json")
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ----------------------------------------------------------------- commands


def _attention_for(args) -> heads.AttentionParams | None:
    if args.no_region:
        return None
    if args.attention:
        return heads.AttentionParams.from_prefixed(rapw.load(args.attention))
    tensors = rapw.load(args.weights)
    if any(k.startswith(heads.ATTN_PREFIX) for k in tensors):
        return heads.AttentionParams.from_prefixed(tensors)
    logger.warning("no attention tensors in %s; ranking keypoints by the point map only", args.weights)
    return None


def _options(args) -> extractor.ExtractOptions:
    return extractor.ExtractOptions(top_k=args.top_k, max_edge=args.max_edge, border=args.border, use_region=not args.no_region)


def cmd_extract(args) -> None:
    backbone = load_weights(args.weights)
    features = extractor.extract(read_image(args.image), backbone, _attention_for(args), _options(args))
    if args.text:
        extractor.write_features_text(args.out, features)
    else:
        extractor.write_features(args.out, features)
    logger.info("%d keypoints written to %s", len(features), args.out)


def cmd_train(args) -> None:
    backbone = load_weights(args.weights)
    dataset = locdata.load_manifest(args.manifest)
    root = Path(args.root) if args.root else Path(args.manifest).parent
    if args.init:
        init = heads.AttentionParams.from_prefixed(rapw.load(args.init))
    else:
        init = heads.init_attention(backbone.config.channels, seed=args.seed)
    config = trainer.TrainConfig(
        learning_rate=args.lr,
        momentum=args.momentum,
        steps=args.steps,
        seed=args.seed,
        batch_size=args.batch_size,
        threads=args.threads,
    )
    params, report = trainer.train_attention(dataset, backbone, init, config, lambda ref: read_image(root / ref), args.max_edge)
    rapw.save(args.out, params.prefixed())
    if args.report:
        report.write_csv(args.report)
    means = report.epoch_means()
    if means:
        logger.info("epoch mean loss %.5f -> %.5f", means[0], means[-1])


def cmd_locations(args) -> None:
    sequence = locdata.read_tum(args.poses, args.image_template)
    dataset = locdata.extract_locations(sequence, args.dist_thresh, args.angle_thresh, args.scene)
    locdata.write_manifest(args.out, dataset)
    logger.info("%d images grouped into %d locations", dataset.num_images, dataset.num_locations)


def cmd_match(args) -> None:
    a = extractor.read_features(args.features_a)
    b = extractor.read_features(args.features_b)
    matches = evalkit.match_mutual_nn(a.descriptors, b.descriptors)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("# index_a index_b distance\n")
        for (i, j), d in zip(matches.pairs, matches.distances):
            fh.write(f"{i} {j} {d:.6g}\n")
    logger.info("%d mutual matches", len(matches))


def cmd_eval_mma(args) -> None:
    backbone = load_weights(args.weights)
    attention, options = _attention_for(args), _options(args)
    result = evalkit.run_benchmark(
        args.dataset, lambda path: extractor.extract(path, backbone, attention, options), args.out, threads=args.threads
    )
    if args.plot:
        evalkit.plot_curves(result, args.plot)
    for kind, curve in result.aggregates.items():
        logger.info("%s MMA@3 %.4f over %d matches", kind, curve.at(3), curve.matches)
    if result.skipped:
        logger.warning("%d image pairs skipped", result.skipped)


def cmd_inspect_weights(args) -> None:
    tensors = rapw.load(args.weights)
    for name, arr in tensors.items():
        print(f"{name} {'x'.join(map(str, arr.shape))} {rapw.tensor_checksum(arr)[:16]}")
    backbone = load_weights(args.weights)
    cfg = backbone.config
    print(f"# backbone plan={[list(s) for s in cfg.plan]} channels={cfg.channels} receptive_radius={cfg.receptive_radius}")
    if any(k.startswith(heads.ATTN_PREFIX) for k in tensors):
        params = heads.AttentionParams.from_prefixed(tensors)
        count = sum(int(np.prod(params.tensors[n].shape)) for n in params.trainable_names())
        print(f"# attention channels={params.channels} trainable={count}")


COMMANDS = {
    "extract": cmd_extract,
    "train": cmd_train,
    "locations": cmd_locations,
    "match": cmd_match,
    "eval-mma": cmd_eval_mma,
    "inspect-weights": cmd_inspect_weights,
}


def run(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.subcommand](args)
    except DATA_ERRORS as exc:
        print(f"rapnet {args.subcommand}: {exc}", file=sys.stderr)
        return 2
    out = getattr(args, "out", None)
    if out:
        echo_config(args, out)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
